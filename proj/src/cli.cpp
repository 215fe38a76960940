#include "softcpt/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "softcpt/data_io.hpp"
#include "softcpt/eval.hpp"
#include "softcpt/optim.hpp"

#ifndef SOFTCPT_VERSION
#define SOFTCPT_VERSION "unknown"
#endif

namespace softcpt::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

int exit_code_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::contract:
      return kExitUsage;
    case ErrorCode::numerical:
      return kExitNumerical;
    default:
      return kExitData;
  }
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::string> config_file_args(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::vector<std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (value.size() >= 2 && value.front() == '[' && value.back() == ']') {
      std::string joined;
      for (char ch : value.substr(1, value.size() - 2)) {
        if (ch != ' ' && ch != '"') joined += ch;
      }
      value = joined;
    }
    if (key.empty()) throw InvalidArgument(path + ":" + std::to_string(lineno) + ": empty key");
    if (value.empty()) continue;  // unset option
    out.push_back("--" + key + "=" + value);
  }
  return out;
}

namespace {

// ---------------------------------------------------------------------------
// Shared option groups
// ---------------------------------------------------------------------------

struct EncoderOpts {
  int d_embed = 32;
  int d_txt = 64;
  int depth = 2;
  int heads = 2;
  std::string pooling = "mean";
  std::uint64_t seed = 0;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app) {
    opts.push_back(app->add_option("--d-embed", d_embed, "token embedding width"));
    opts.push_back(app->add_option("--d-txt", d_txt, "text feature width"));
    opts.push_back(app->add_option("--depth", depth, "toy encoder layers"));
    opts.push_back(app->add_option("--heads", heads, "attention heads"));
    opts.push_back(app->add_option("--pooling", pooling, "mean or last-token"));
    opts.push_back(app->add_option("--encoder-seed", seed, "toy encoder weight seed"));
    // Unset means "take it from the suite", so defaults are not recorded.
    for (CLI::Option* o : opts) o->always_capture_default(false)->default_str("");
  }

  EncoderSpec spec() const {
    EncoderSpec e;
    e.d_embed = d_embed;
    e.d_txt = d_txt;
    e.depth = depth;
    e.heads = heads;
    e.pooling = parse_pooling(pooling);
    e.weight_seed = seed;
    return e;
  }

  /// The suite's own encoder unless flags say otherwise.
  EncoderSpec resolve(const Suite& suite) const {
    EncoderSpec e;
    if (suite.encoder) {
      e = *suite.encoder;
    } else {
      e.d_txt = suite.d_txt;
      if (suite.d_embed > 0) e.d_embed = suite.d_embed;
      e.pooling = suite.pooling;
    }
    if (opts[0]->count()) e.d_embed = d_embed;
    if (opts[1]->count()) e.d_txt = d_txt;
    if (opts[2]->count()) e.depth = depth;
    if (opts[3]->count()) e.heads = heads;
    if (opts[4]->count()) e.pooling = parse_pooling(pooling);
    if (opts[5]->count()) e.weight_seed = seed;
    e.validate();
    if (e.d_txt != suite.d_txt) {
      throw ShapeError("encoder d_txt " + std::to_string(e.d_txt) + " != suite d_txt " +
                       std::to_string(suite.d_txt));
    }
    return e;
  }
};

struct ModelOpts {
  std::string method = "softcpt-nata";
  int L = 16;
  int M = 8;
  int K = 4;
  std::string body = "linear";
  int reduction = 1;
  double tau = 0.0;
  double class_fraction = 1.0;
  bool freeze = false;
  CLI::Option* tau_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--method", method, "coop-ca|coop-cs|coop-mt|softcpt-{nata,nats,cata,csta,cats,csts}");
    app->add_option("--L", L, "prompt context length");
    app->add_option("--M", M, "task context length");
    app->add_option("--K", K, "class context length (C* variants)");
    app->add_option("--body", body, "sub-network body: linear or mlp");
    app->add_option("--reduction", reduction, "MLP reduction ratio");
    tau_opt = app->add_option("--tau", tau, "temperature (default: the suite's)")
                  ->always_capture_default(false)->default_str("");
    app->add_option("--class-fraction", class_fraction, "C* class sampling fraction");
    app->add_flag("--freeze-task-context", freeze, "keep task contexts fixed");
  }

  ModelConfig config(const Suite& suite) const {
    ModelConfig c;
    c.method = parse_method(method);
    c.L = L;
    c.M = M;
    c.K = K;
    c.body = parse_body(body);
    c.reduction = reduction;
    c.tau = tau_opt->count() && tau != 0.0 ? tau : suite.tau;
    c.class_sampling_fraction = class_fraction;
    c.freeze_task_context = freeze;
    c.validate();
    return c;
  }
};

struct TrainOpts {
  double lr = 0.002;
  int epochs = 50;
  int batch = 32;
  std::string batching = "uniform";

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "initial learning rate");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--batch-size", batch, "batch size");
    app->add_option("--batching", batching, "uniform or round-robin");
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.lr0 = lr;
    c.epochs = epochs;
    c.batch_size = batch;
    c.seed = seed;
    c.batching = parse_batch_mode(batching);
    c.validate();
    return c;
  }
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::istringstream is(item);
    T v{};
    is >> v;
    if (!is || !is.eof()) throw InvalidArgument(std::string("bad ") + what + " entry '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw InvalidArgument(std::string("empty ") + what + " list");
  return out;
}

std::vector<std::uint64_t> resolve_seeds(int count, const std::string& list) {
  if (!list.empty()) return parse_list<std::uint64_t>(list, "seed");
  if (count < 1) throw InvalidArgument("--seeds must be at least 1");
  std::vector<std::uint64_t> out;
  for (int i = 1; i <= count; ++i) out.push_back(static_cast<std::uint64_t>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Training runs
// ---------------------------------------------------------------------------

struct Run {
  std::unique_ptr<TextEncoder> encoder;
  std::unique_ptr<PromptModel> model;
  ParameterSet params;
  ParameterSet buffers;
  std::vector<StepLog> log;
  Batch train_set;
};

Batch train_batch(const Suite& suite, int shots, std::uint64_t seed) {
  if (shots <= 0) return split_batch(suite, Split::train);
  std::vector<FewShotSplit> fs;
  for (const auto& t : suite.tasks) fs.push_back(sample_few_shot(t, shots, seed));
  return split_batch(suite, Split::train, fs);
}

std::unique_ptr<PromptModel> make_model(const ModelConfig& cfg, const TextEncoder& enc,
                                        const Suite& suite) {
  return std::make_unique<PromptModel>(cfg, enc, task_texts(suite, enc.spec()));
}

Run train_run(const Suite& suite, const EncoderSpec& enc, const ModelConfig& cfg,
              const TrainConfig& tc, int shots) {
  Run r;
  r.encoder = std::make_unique<TextEncoder>(enc);
  r.model = make_model(cfg, *r.encoder, suite);
  r.train_set = train_batch(suite, shots, tc.seed);
  TrainResult tr = train(*r.model, tc, r.train_set);
  r.params = std::move(tr.params);
  r.buffers = std::move(tr.buffers);
  r.log = std::move(tr.log);
  return r;
}

Run load_run(const fs::path& dir, const Suite& suite) {
  Checkpoint ck = read_checkpoint(dir);
  if (ck.task_names.size() != suite.tasks.size()) {
    throw DatasetError("checkpoint has " + std::to_string(ck.task_names.size()) +
                       " tasks, suite has " + std::to_string(suite.tasks.size()));
  }
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    if (ck.task_names[t] != suite.tasks[t].name || ck.class_counts[t] != suite.tasks[t].class_count()) {
      throw DatasetError("checkpoint task '" + ck.task_names[t] + "' does not match the suite");
    }
  }
  Run r;
  r.encoder = std::make_unique<TextEncoder>(ck.encoder);
  r.model = make_model(ck.model, *r.encoder, suite);
  r.params = std::move(ck.params);
  r.buffers = std::move(ck.buffers);
  ParameterSet fresh_buffers;
  Rng rng(0, 1);
  const ParameterSet expected = r.model->init_parameters(rng, fresh_buffers);
  for (const auto& [name, m] : expected) {
    if (!r.params.contains(name) || r.params.at(name).rows() != m.rows() ||
        r.params.at(name).cols() != m.cols()) {
      throw FormatError(ErrorCode::format_width, "checkpoint tensor '" + name + "' missing or misshapen");
    }
  }
  return r;
}

Checkpoint make_checkpoint(const Run& r, const Suite& suite, std::uint64_t seed) {
  Checkpoint c;
  c.model = r.model->config();
  c.encoder = r.encoder->spec();
  c.params = r.params;
  c.buffers = r.buffers;
  c.seed = seed;
  for (const auto& t : suite.tasks) {
    c.task_names.push_back(t.name);
    c.class_counts.push_back(t.class_count());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_matrix(const fs::path& dir, const std::string& stem, const Matrix& m) {
  std::ostringstream ss;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) ss << (j ? "\t" : "") << fmt(m(i, j));
    ss << "\n";
  }
  write_text(dir / (stem + ".tsv"), ss.str());
  write_tensor(dir / (stem + ".bin"), m);
}

json to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json resolved_json(const EncoderSpec& e, const ModelConfig& m) {
  return json{{"encoder",
               {{"d_embed", e.d_embed}, {"d_txt", e.d_txt}, {"depth", e.depth}, {"heads", e.heads},
                {"pooling", to_string(e.pooling)}, {"weight_seed", e.weight_seed}}},
              {"model",
               {{"method", to_string(m.method)}, {"L", m.L}, {"M", m.M}, {"K", m.K},
                {"body", to_string(m.body)}, {"reduction", m.reduction}, {"tau", m.tau},
                {"class_sampling_fraction", m.class_sampling_fraction},
                {"freeze_task_context", m.freeze_task_context}}}};
}

void write_manifest(const fs::path& out, const CLI::App& sub, const json& seeds,
                    const json& resolved = json::object()) {
  json m;
  m["tool"] = "softcpt";
  m["version"] = SOFTCPT_VERSION;
  m["command"] = sub.get_name();
  m["seeds"] = seeds;
  const std::string cfg = sub.config_to_str(true, false);
  m["config"] = cfg;
  m["resolved"] = resolved;
  write_text(out / "manifest.json", m.dump(2) + "\n");
  write_text(out / "config.txt", cfg);
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw InvalidArgument("--out is required");
  fs::create_directories(out);
  return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Context {
  std::ostream& out;
  std::ostream& err;
};

struct GenSyntheticCmd {
  SyntheticSpec spec;
  std::string out;
  EncoderOpts enc;

  void add(CLI::App* app) {
    app->add_option("--out", out, "suite directory to write")->required();
    app->add_option("--tasks", spec.tasks, "number of tasks");
    app->add_option("--classes", spec.classes, "classes per task");
    app->add_option("--train-per-class", spec.train_per_class);
    app->add_option("--val-per-class", spec.val_per_class);
    app->add_option("--test-per-class", spec.test_per_class);
    app->add_option("--spread", spec.spread, "noise norm relative to the unit class center");
    app->add_option("--seed", spec.seed);
    app->add_option("--hidden-length", spec.hidden_context_length, "length of the hidden task prompt");
    enc.add(app);
  }

  int run(const CLI::App& sub, Context& ctx) {
    spec.encoder = enc.spec();
    const Suite s = generate_synthetic(spec);
    write_suite(s, out);
    write_manifest(out, sub, json::array({spec.seed}));
    ctx.out << "wrote " << s.tasks.size() << " tasks, " << s.total_classes() << " classes to " << out
            << "\n";
    return kExitOk;
  }
};

struct ImportCmd {
  std::string suite;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--suite", suite, "suite directory to validate")->required();
    app->add_option("--out", out, "optional directory for a normalized copy");
  }

  int run(const CLI::App& sub, Context& ctx) {
    const Suite s = read_suite(suite);
    std::size_t samples = 0;
    for (const auto& t : s.tasks) samples += t.labels.size();
    ctx.out << "valid suite: " << s.tasks.size() << " tasks, " << s.total_classes() << " classes, "
            << samples << " samples, d_txt " << s.d_txt << ", d_embed " << s.d_embed << ", tau "
            << fmt(s.tau) << "\n";
    for (const auto& t : s.tasks) {
      ctx.out << "  " << t.name << ": " << t.class_count() << " classes, " << t.train.size()
              << " train / " << t.val.size() << " val / " << t.test.size() << " test"
              << (t.class_tokens ? ", token blocks" : "") << "\n";
    }
    if (!out.empty()) {
      write_suite(s, out);
      write_manifest(out, sub, json::array());
    }
    return kExitOk;
  }
};

struct TrainCmd {
  std::string suite, out;
  ModelOpts model;
  TrainOpts train;
  EncoderOpts enc;
  std::uint64_t seed = 1;
  int shots = 0;

  void add(CLI::App* app) {
    app->add_option("--suite", suite)->required();
    app->add_option("--out", out)->required();
    app->add_option("--seed", seed);
    app->add_option("--shots", shots, "shots per class; 0 uses the whole train split");
    model.add(app);
    train.add(app);
    enc.add(app);
  }

  int run(const CLI::App& sub, Context& ctx) {
    const Suite s = read_suite(suite);
    const fs::path dir = prepare_out(out);
    Run r = train_run(s, enc.resolve(s), model.config(s), train.config(seed), shots);
    write_checkpoint(make_checkpoint(r, s, seed), dir / "checkpoint");
    std::ostringstream log;
    write_train_log(log, r.log, s.tasks.size());
    write_text(dir / "train_log.tsv", log.str());
    const auto train_acc = evaluate_model(*r.model, r.params, r.buffers, s, Split::train);
    const auto test_acc = evaluate_model(*r.model, r.params, r.buffers, s, Split::test);
    json scores = json::array();
    for (std::size_t t = 0; t < s.tasks.size(); ++t) {
      scores.push_back({{"task", s.tasks[t].name}, {"train", train_acc[t]}, {"test", test_acc[t]}});
      ctx.out << s.tasks[t].name << "\ttrain " << fmt(train_acc[t]) << "\ttest " << fmt(test_acc[t])
              << "\n";
    }
    write_text(dir / "scores.json", scores.dump(2) + "\n");
    write_manifest(dir, sub, json::array({seed}), resolved_json(r.encoder->spec(), r.model->config()));
    return kExitOk;
  }
};

struct EvalCmd {
  std::string suite, out, checkpoint, shots = "1,2,4,8,16", seed_list;
  int seeds = 3;
  bool base_new = false;
  ModelOpts model;
  TrainOpts train;
  EncoderOpts enc;

  void add(CLI::App* app) {
    app->add_option("--suite", suite)->required();
    app->add_option("--out", out)->required();
    app->add_option("--checkpoint", checkpoint, "evaluate this checkpoint instead of training");
    app->add_option("--shots", shots, "comma-separated shot levels");
    app->add_option("--seeds", seeds, "number of trials, seeded 1..N");
    app->add_option("--seed-list", seed_list, "explicit comma-separated seeds");
    app->add_flag("--base-new", base_new, "train on base classes, score base and new");
    model.add(app);
    train.add(app);
    enc.add(app);
  }

  int run_checkpoint(const CLI::App& sub, const Suite& s, const fs::path& dir, Context& ctx) {
    Run r = load_run(checkpoint, s);
    const auto acc = evaluate_model(*r.model, r.params, r.buffers, s, Split::test);
    json scores = json::array();
    for (std::size_t t = 0; t < acc.size(); ++t) {
      scores.push_back({{"task", s.tasks[t].name}, {"test", acc[t]}});
      ctx.out << s.tasks[t].name << "\t" << fmt(acc[t]) << "\n";
    }
    write_text(dir / "scores.json", scores.dump(2) + "\n");
    write_manifest(dir, sub, json::array(), resolved_json(r.encoder->spec(), r.model->config()));
    return kExitOk;
  }

  int run_base_new(const CLI::App& sub, const Suite& s, const fs::path& dir, Context& ctx,
                   const std::vector<int>& shot_list, const std::vector<std::uint64_t>& seed_vals) {
    const ModelConfig cfg = model.config(s);
    if (cfg.method == Method::coop_cs || class_specific_class_context(cfg.method)) {
      throw ContractError("base-to-new needs class-agnostic parameters; " +
                          std::string(to_string(cfg.method)) + " learns per-class tensors");
    }
    Suite base = s, novel = s;
    for (std::size_t t = 0; t < s.tasks.size(); ++t) {
      auto [b, n] = split_base_new(s.tasks[t]);
      base.tasks[t] = std::move(b);
      novel.tasks[t] = std::move(n);
    }
    const EncoderSpec es = enc.resolve(s);
    std::ostringstream tsv;
    tsv << "task\tshot\tseed\tbase\tnew\tharmonic\n";
    for (int k : shot_list) {
      for (std::uint64_t seed : seed_vals) {
        Run r = train_run(base, es, cfg, train.config(seed), k);
        const PromptModel novel_model(cfg, *r.encoder, task_texts(novel, es));
        const auto acc_b = evaluate_model(*r.model, r.params, r.buffers, base, Split::test);
        const auto acc_n = evaluate_model(novel_model, r.params, r.buffers, novel, Split::test);
        for (std::size_t t = 0; t < s.tasks.size(); ++t) {
          tsv << s.tasks[t].name << "\t" << k << "\t" << seed << "\t" << fmt(acc_b[t]) << "\t"
              << fmt(acc_n[t]) << "\t" << fmt(harmonic_mean(acc_b[t], acc_n[t])) << "\n";
        }
      }
    }
    write_text(dir / "base_new.tsv", tsv.str());
    ctx.out << tsv.str();
    write_manifest(dir, sub, seed_vals, resolved_json(es, cfg));
    return kExitOk;
  }

  int run(const CLI::App& sub, Context& ctx) {
    const Suite s = read_suite(suite);
    const fs::path dir = prepare_out(out);
    if (!checkpoint.empty()) return run_checkpoint(sub, s, dir, ctx);
    const auto shot_list = parse_list<int>(shots, "shot");
    for (int k : shot_list) {
      if (k < 1) throw InvalidArgument("shot levels must be >= 1");
    }
    const auto seed_vals = resolve_seeds(seeds, seed_list);
    if (base_new) return run_base_new(sub, s, dir, ctx, shot_list, seed_vals);

    const EncoderSpec es = enc.resolve(s);
    const ModelConfig cfg = model.config(s);
    ScoreTable table;
    for (int k : shot_list) {
      for (std::uint64_t seed : seed_vals) {
        Run r = train_run(s, es, cfg, train.config(seed), k);
        const auto acc = evaluate_model(*r.model, r.params, r.buffers, s, Split::test);
        for (std::size_t t = 0; t < acc.size(); ++t) table.add(t, k, seed, acc[t]);
      }
    }
    std::ostringstream tsv;
    tsv << "task\tshot\tseed\taccuracy\n";
    for (const auto& [key, acc] : table.entries()) {
      tsv << s.tasks[std::get<0>(key)].name << "\t" << std::get<1>(key) << "\t" << std::get<2>(key)
          << "\t" << fmt(acc) << "\n";
    }
    write_text(dir / "score_table.tsv", tsv.str());
    json summary;
    summary["method"] = to_string(cfg.method);
    json levels = json::array();
    for (int k : shot_list) {
      json per_task = json::array();
      for (std::size_t t = 0; t < s.tasks.size(); ++t) {
        per_task.push_back({{"task", s.tasks[t].name}, {"mean", table.mean(t, k)}, {"std", table.stddev(t, k)}});
      }
      levels.push_back({{"shot", k}, {"mean", table.mean_score(k)}, {"std", table.mean_stddev(k)},
                        {"tasks", per_task}});
      ctx.out << "shot " << k << "\tmean " << fmt(table.mean_score(k)) << "\tstd "
              << fmt(table.mean_stddev(k)) << "\n";
    }
    summary["levels"] = levels;
    bool all_levels = true;
    for (int k : kRsdShots) all_levels &= std::find(shot_list.begin(), shot_list.end(), k) != shot_list.end();
    summary["rsd"] = all_levels ? json(rsd(table)) : json(nullptr);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    write_manifest(dir, sub, seed_vals, resolved_json(es, cfg));
    return kExitOk;
  }
};

std::vector<Matrix> single_task_contexts(const Run& r) {
  if (r.model->config().method != Method::coop_ca) {
    throw ContractError("single-task contexts come from a coop-ca run");
  }
  std::vector<Matrix> out;
  for (std::size_t t = 0; t < r.model->task_count(); ++t) {
    out.push_back(r.params.at(names::prompt_context_task(t)));
  }
  return out;
}

struct TransferCmd {
  std::string suite, out, checkpoint, mode = "all";
  ModelOpts model;
  TrainOpts train;
  EncoderOpts enc;
  std::uint64_t seed = 1;
  int shots = 0;
  bool no_renormalize = false;

  void add(CLI::App* app) {
    app->add_option("--suite", suite)->required();
    app->add_option("--out", out)->required();
    app->add_option("--checkpoint", checkpoint, "coop-ca checkpoint with the source contexts");
    app->add_option("--mode", mode, "oracle, ensfeat, enspred or all");
    app->add_option("--seed", seed);
    app->add_option("--shots", shots, "shots per class; 0 uses the whole train split");
    app->add_flag("--no-renormalize", no_renormalize, "EnsFeat: keep averaged rows unnormalized");
    model.add(app);
    train.add(app);
    enc.add(app);
  }

  int run(const CLI::App& sub, Context& ctx) {
    const Suite s = read_suite(suite);
    const fs::path dir = prepare_out(out);
    Run r;
    if (!checkpoint.empty()) {
      r = load_run(checkpoint, s);
    } else {
      ModelConfig cfg = model.config(s);
      cfg.method = Method::coop_ca;
      r = train_run(s, enc.resolve(s), cfg, train.config(seed), shots);
    }
    const auto contexts = single_task_contexts(r);
    const auto texts = task_texts(s, r.encoder->spec());
    std::vector<TransferMode> modes;
    if (mode == "all") {
      modes = {TransferMode::oracle, TransferMode::ensfeat, TransferMode::enspred};
    } else {
      modes = {parse_transfer_mode(mode)};
    }
    json report;
    std::vector<double> self;
    const auto self_acc = evaluate_model(*r.model, r.params, r.buffers, s, Split::test);
    report["self"] = self_acc;
    for (TransferMode m : modes) {
      TransferOptions opt;
      opt.mode = m;
      opt.renormalize = !no_renormalize;
      const TransferResult tr = transfer_eval(contexts, s, texts, *r.encoder, opt);
      report[to_string(m)] = tr.scores;
      if (m == TransferMode::oracle) {
        write_matrix(dir, "S", tr.S);
        report["S"] = to_json(tr.S);
      }
      ctx.out << to_string(m);
      for (double v : tr.scores) ctx.out << "\t" << fmt(v);
      ctx.out << "\n";
    }
    report["tasks"] = json::array();
    for (const auto& t : s.tasks) report["tasks"].push_back(t.name);
    write_text(dir / "transfer.json", report.dump(2) + "\n");
    write_manifest(dir, sub, json::array({seed}), resolved_json(r.encoder->spec(), r.model->config()));
    return kExitOk;
  }
};

struct AnalyzeCmd {
  std::string suite, out, single_ckpt, multi_ckpt;
  ModelOpts model;
  TrainOpts train;
  EncoderOpts enc;
  std::uint64_t seed = 1;
  int shots = 0;
  std::size_t pairs = 1000;

  void add(CLI::App* app) {
    app->add_option("--suite", suite)->required();
    app->add_option("--out", out)->required();
    app->add_option("--single-checkpoint", single_ckpt, "coop-ca checkpoint");
    app->add_option("--multi-checkpoint", multi_ckpt, "SoftCPT N/A checkpoint");
    app->add_option("--seed", seed);
    app->add_option("--shots", shots, "shots per class; 0 uses the whole train split");
    app->add_option("--lipschitz-pairs", pairs, "random pairs for the Lipschitz check");
    model.add(app);
    train.add(app);
    enc.add(app);
  }

  int run(const CLI::App& sub, Context& ctx) {
    const Suite s = read_suite(suite);
    const fs::path dir = prepare_out(out);
    const EncoderSpec es = enc.resolve(s);
    Run single, multi;
    if (!single_ckpt.empty()) {
      single = load_run(single_ckpt, s);
    } else {
      ModelConfig cfg = model.config(s);
      cfg.method = Method::coop_ca;
      single = train_run(s, es, cfg, train.config(seed), shots);
    }
    if (!multi_ckpt.empty()) {
      multi = load_run(multi_ckpt, s);
    } else {
      multi = train_run(s, es, model.config(s), train.config(seed), shots);
    }
    const ModelConfig& mc = multi.model->config();
    if (!is_softcpt(mc.method) || uses_class_features(mc.method)) {
      throw ContractError("analyze needs a SoftCPT N/A model for per-task contexts");
    }
    const auto st = single_task_contexts(single);
    std::vector<Matrix> mt;
    for (std::size_t t = 0; t < s.tasks.size(); ++t) {
      mt.push_back(multi.model->task_prompt_context(multi.params, multi.buffers, t));
    }
    TransferOptions opt;
    const TransferResult tr = transfer_eval(st, s, task_texts(s, single.encoder->spec()), *single.encoder, opt);
    const SimilarityMatrices sm = similarity_report(st, mt, tr.S, *multi.encoder);
    write_matrix(dir, "S", sm.S);
    write_matrix(dir, "S_norm", sm.S_norm);
    write_matrix(dir, "S_oracle", sm.S_oracle);
    write_matrix(dir, "S_st", sm.S_st);
    write_matrix(dir, "S_mt", sm.S_mt);
    json report;
    report["corr_st"] = optional_json(sm.corr_st);
    report["corr_mt"] = optional_json(sm.corr_mt);
    const std::string wname = mc.body == SubnetBody::linear ? names::meta_w() : names::meta_w2();
    const LipschitzReport lr = lipschitz_check(multi.params.at(wname), pairs, seed);
    report["lipschitz"] = {{"matrix", wname},
                           {"sigma_max", lr.sigma_max},
                           {"worst_ratio", lr.worst_ratio},
                           {"pairs", lr.pairs},
                           {"violations", lr.violations}};
    write_text(dir / "report.json", report.dump(2) + "\n");
    write_manifest(dir, sub, json::array({seed}), resolved_json(es, mc));
    ctx.out << "corr(S_oracle, S_st) = " << (sm.corr_st ? fmt(*sm.corr_st) : "degenerate") << "\n"
            << "corr(S_oracle, S_mt) = " << (sm.corr_mt ? fmt(*sm.corr_mt) : "degenerate") << "\n"
            << "lipschitz violations " << lr.violations << " / " << lr.pairs << "\n";
    return lr.violations == 0 ? kExitOk : kExitNumerical;
  }
};

struct CheckPropCmd {
  std::string suite, checkpoint, out, mode = "exact", etas;
  double tolerance = 1e-10;
  double min_ratio = 3.0;
  int shots = 0;
  std::uint64_t seed = 1;
  ModelOpts model;
  EncoderOpts enc;

  void add(CLI::App* app) {
    app->add_option("--suite", suite)->required();
    app->add_option("--checkpoint", checkpoint, "model to perturb; fresh initialization if omitted");
    app->add_option("--out", out, "directory for report.json");
    app->add_option("--mode", mode, "exact or general");
    app->add_option("--eta", etas, "comma-separated step sizes");
    app->add_option("--tolerance", tolerance, "exact mode: max residual");
    app->add_option("--min-ratio", min_ratio, "general mode: min residual(eta)/residual(eta/2)");
    app->add_option("--shots", shots, "shots per class; 0 uses the whole train split");
    app->add_option("--seed", seed);
    model.add(app);
    enc.add(app);
  }

  int run(const CLI::App& sub, Context& ctx) {
    const Suite s = read_suite(suite);
    const PropositionMode pm = parse_proposition_mode(mode);
    Run r;
    if (!checkpoint.empty()) {
      r = load_run(checkpoint, s);
    } else {
      ModelConfig cfg = model.config(s);
      // A fresh initialization has no training history, so exact mode holds
      // the task context fixed for the step instead of refusing.
      if (pm == PropositionMode::exact && cfg.M > 0 && !cfg.freeze_task_context) {
        cfg.freeze_task_context = true;
        ctx.out << "task context frozen for exact mode\n";
      }
      r.encoder = std::make_unique<TextEncoder>(enc.resolve(s));
      r.model = make_model(cfg, *r.encoder, s);
      Rng rng(seed, 1);
      r.params = r.model->init_parameters(rng, r.buffers);
    }
    const Batch batch = train_batch(s, shots, seed);
    const std::vector<double> eta_list =
        etas.empty() ? (pm == PropositionMode::exact ? std::vector<double>{1e-1, 1e-2, 1e-3}
                                                     : std::vector<double>{1e-2, 1e-3, 1e-4, 1e-5})
                     : parse_list<double>(etas, "eta");
    json report;
    report["mode"] = mode;
    json rows = json::array();
    bool pass = true;
    if (pm == PropositionMode::exact) {
      for (double eta : eta_list) {
        const PropositionReport rep = verify_proposition(*r.model, r.params, r.buffers, batch, eta, pm);
        const bool ok = rep.max_residual() <= tolerance;
        pass &= ok;
        rows.push_back({{"eta", eta}, {"max_residual", rep.max_residual()}, {"pass", ok}});
        ctx.out << "eta " << fmt(eta) << "\tresidual " << fmt(rep.max_residual()) << "\n";
      }
    } else {
      const auto ratios = proposition_convergence(*r.model, r.params, r.buffers, batch, eta_list);
      for (std::size_t i = 0; i < eta_list.size(); ++i) {
        const double res =
            verify_proposition(*r.model, r.params, r.buffers, batch, eta_list[i], pm).max_residual();
        const bool ok = ratios[i] >= min_ratio;
        pass &= ok;
        rows.push_back({{"eta", eta_list[i]}, {"max_residual", res}, {"ratio", ratios[i]}, {"pass", ok}});
        ctx.out << "eta " << fmt(eta_list[i]) << "\tresidual " << fmt(res) << "\tratio "
                << fmt(ratios[i]) << "\n";
      }
    }
    report["steps"] = rows;
    report["pass"] = pass;
    if (!out.empty()) {
      const fs::path dir = prepare_out(out);
      write_text(dir / "report.json", report.dump(2) + "\n");
      write_manifest(dir, sub, json::array({seed}));
    }
    ctx.out << (pass ? "PASS" : "FAIL") << "\n";
    if (!pass) ctx.err << "check-prop: decomposition check failed\n";
    return pass ? kExitOk : kExitNumerical;
  }
};

struct GradCheckCmd {
  std::string suite, out;
  double tolerance = 1e-4;
  GradCheckOptions opts;
  std::size_t max_samples = 24;
  std::uint64_t seed = 1;
  ModelOpts model;
  EncoderOpts enc;

  void add(CLI::App* app) {
    app->add_option("--suite", suite)->required();
    app->add_option("--out", out, "directory for report.json");
    app->add_option("--tolerance", tolerance, "max relative error per tensor");
    app->add_option("--step", opts.step, "central-difference step");
    app->add_option("--coords", opts.max_coords, "coordinates sampled per tensor (0 = all)");
    app->add_option("--max-samples", max_samples, "training samples in the probe batch");
    app->add_option("--seed", seed);
    model.add(app);
    enc.add(app);
  }

  int run(const CLI::App& sub, Context& ctx) {
    const Suite s = read_suite(suite);
    const TextEncoder encoder(enc.resolve(s));
    const PromptModel m(model.config(s), encoder, task_texts(s, encoder.spec()));
    ParameterSet buffers;
    Rng rng(seed, 1);
    const ParameterSet params = m.init_parameters(rng, buffers);
    const Batch all = split_batch(s, Split::train);
    // Evenly spaced rows so every task is represented.
    std::vector<std::size_t> rows;
    const std::size_t n = std::min(max_samples, all.size());
    for (std::size_t i = 0; i < n; ++i) rows.push_back(i * all.size() / n);
    const Batch batch = select_rows(all, rows);
    opts.seed = seed;
    const auto checks = gradient_check(m, params, buffers, batch, opts);
    bool pass = true;
    json rep = json::array();
    for (const auto& c : checks) {
      const bool ok = c.rel_error < tolerance;
      pass &= ok;
      rep.push_back({{"tensor", c.name}, {"coords", c.checked}, {"rel_error", c.rel_error}, {"pass", ok}});
      ctx.out << c.name << "\t" << fmt(c.rel_error) << (ok ? "" : "\tFAIL") << "\n";
    }
    if (!out.empty()) {
      const fs::path dir = prepare_out(out);
      write_text(dir / "report.json", json{{"tensors", rep}, {"pass", pass}}.dump(2) + "\n");
      write_manifest(dir, sub, json::array({seed}));
    }
    ctx.out << (pass ? "PASS" : "FAIL") << "\n";
    if (!pass) ctx.err << "gradcheck: analytic and numeric gradients disagree\n";
    return pass ? kExitOk : kExitNumerical;
  }
};

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::vector<std::string> from_file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw InvalidArgument("--config needs a file name");
      from_file = config_file_args(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      from_file = config_file_args(args[i].substr(9));
    } else {
      rest.push_back(args[i]);
    }
  }
  if (from_file.empty()) return rest;
  // File values go right after the subcommand so later command-line flags win.
  std::vector<std::string> out;
  std::size_t i = 0;
  if (!rest.empty() && rest[0].rfind("-", 0) != 0) out.push_back(rest[i++]);
  out.insert(out.end(), from_file.begin(), from_file.end());
  out.insert(out.end(), rest.begin() + static_cast<std::ptrdiff_t>(i), rest.end());
  return out;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  Context ctx{out, err};
  CLI::App app{"Multi-task prompt tuning engine", "softcpt"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", SOFTCPT_VERSION);

  GenSyntheticCmd gen;
  ImportCmd imp;
  TrainCmd trn;
  EvalCmd evl;
  TransferCmd xfer;
  AnalyzeCmd ana;
  CheckPropCmd prop;
  GradCheckCmd grad;
  auto* s_gen = app.add_subcommand("gen-synthetic", "write a synthetic suite");
  auto* s_imp = app.add_subcommand("import", "validate a suite directory");
  auto* s_trn = app.add_subcommand("train", "train one model and write a checkpoint");
  auto* s_evl = app.add_subcommand("eval", "few-shot score table over shots and seeds");
  auto* s_xfer = app.add_subcommand("transfer", "prompt transfer from single-task contexts");
  auto* s_ana = app.add_subcommand("analyze", "task similarity matrices and correlations");
  auto* s_prop = app.add_subcommand("check-prop", "verify the one-step context update decomposition");
  auto* s_grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gen.add(s_gen);
  imp.add(s_imp);
  trn.add(s_trn);
  evl.add(s_evl);
  xfer.add(s_xfer);
  ana.add(s_ana);
  prop.add(s_prop);
  grad.add(s_grad);

  try {
    std::vector<std::string> args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::CallForVersion&) {
      out << SOFTCPT_VERSION << "\n";
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err << "softcpt: " << e.what() << "\n";
      return kExitUsage;
    }
    if (s_gen->parsed()) return gen.run(*s_gen, ctx);
    if (s_imp->parsed()) return imp.run(*s_imp, ctx);
    if (s_trn->parsed()) return trn.run(*s_trn, ctx);
    if (s_evl->parsed()) return evl.run(*s_evl, ctx);
    if (s_xfer->parsed()) return xfer.run(*s_xfer, ctx);
    if (s_ana->parsed()) return ana.run(*s_ana, ctx);
    if (s_prop->parsed()) return prop.run(*s_prop, ctx);
    if (s_grad->parsed()) return grad.run(*s_grad, ctx);
    err << "softcpt: no command\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "softcpt: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "softcpt: io: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "softcpt: internal: " << e.what() << "\n";
    return kExitData;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace softcpt::cli
