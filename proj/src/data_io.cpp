#include "softcpt/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <unistd.h>

#include "json.hpp"

namespace softcpt {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

// ---------------------------------------------------------------------------
// Tensor blocks
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace

std::string encode_tensor(const Matrix& m, ElementKind kind) {
  if (!all_finite(m)) throw NumericalError("refusing to serialize a non-finite tensor");
  if (m.rows() > 0xffffffffLL || m.cols() > 0xffffffffLL) throw ShapeError("tensor too large");
  const std::size_t elem = kind == ElementKind::float32 ? 4 : 8;
  std::string out;
  out.reserve(kTensorHeaderBytes + static_cast<std::size_t>(m.size()) * elem);
  out.append(kTensorMagic, 4);
  put<std::uint16_t>(out, kTensorVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  put<std::uint16_t>(out, static_cast<std::uint16_t>(kind));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (kind == ElementKind::float32) {
        put<float>(out, static_cast<float>(m(i, j)));
      } else {
        put<double>(out, m(i, j));
      }
    }
  }
  return out;
}

Matrix decode_tensor(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < kTensorHeaderBytes) {
    throw FormatError(ErrorCode::format_truncated,
                      origin + ": " + std::to_string(bytes.size()) + " bytes, header needs 16");
  }
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw FormatError(ErrorCode::format_magic, origin + ": bad magic, expected PTSH");
  }
  const auto version = get<std::uint16_t>(bytes, 4);
  if (version != kTensorVersion) {
    throw FormatError(ErrorCode::format_version,
                      origin + ": unsupported version " + std::to_string(version));
  }
  const auto rows = get<std::uint32_t>(bytes, 6);
  const auto cols = get<std::uint32_t>(bytes, 10);
  const auto kind = get<std::uint16_t>(bytes, 14);
  if (kind > 1) {
    throw FormatError(ErrorCode::format_version,
                      origin + ": unknown element kind " + std::to_string(kind));
  }
  const std::size_t elem = kind == 0 ? 4 : 8;
  const std::uint64_t need = static_cast<std::uint64_t>(rows) * cols * elem;
  const std::uint64_t have = bytes.size() - kTensorHeaderBytes;
  if (have != need) {
    throw FormatError(ErrorCode::format_truncated,
                      origin + ": payload has " + std::to_string(have) + " bytes, header implies " +
                          std::to_string(need));
  }
  Matrix m(rows, cols);
  std::size_t off = kTensorHeaderBytes;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j, off += elem) {
      m(i, j) = kind == 0 ? static_cast<double>(get<float>(bytes, off)) : get<double>(bytes, off);
    }
  }
  if (!all_finite(m)) throw FormatError(ErrorCode::format_metadata, origin + ": non-finite values");
  return m;
}

void write_tensor(const fs::path& path, const Matrix& m, ElementKind kind) {
  write_file(path, encode_tensor(m, kind));
}

Matrix read_tensor(const fs::path& path) { return decode_tensor(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Atomic directories
// ---------------------------------------------------------------------------

fs::path temporary_sibling(const fs::path& dir) {
  fs::path clean = dir;
  if (!clean.has_filename()) clean = clean.parent_path();
  return clean.parent_path() / (clean.filename().string() + ".tmp-" + std::to_string(::getpid()));
}

void replace_directory(const fs::path& tmp, const fs::path& dir) {
  fs::path clean = dir;
  if (!clean.has_filename()) clean = clean.parent_path();
  std::error_code ec;
  if (fs::exists(clean)) {
    const fs::path old = clean.parent_path() / (clean.filename().string() + ".old-" +
                                                std::to_string(::getpid()));
    fs::remove_all(old);
    fs::rename(clean, old, ec);
    if (ec) throw IoError("cannot move aside '" + clean.string() + "': " + ec.message());
    fs::rename(tmp, clean, ec);
    if (ec) {
      fs::rename(old, clean);
      throw IoError("cannot rename into '" + clean.string() + "': " + ec.message());
    }
    fs::remove_all(old);
  } else {
    if (clean.has_parent_path()) fs::create_directories(clean.parent_path());
    fs::rename(tmp, clean, ec);
    if (ec) throw IoError("cannot rename into '" + clean.string() + "': " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

const char* to_string(Metric m) noexcept { return m == Metric::top1 ? "top1" : "per-class"; }

Metric parse_metric(std::string_view name) {
  if (name == "top1") return Metric::top1;
  if (name == "per-class") return Metric::per_class;
  throw InvalidArgument("unknown metric '" + std::string(name) + "'");
}

const std::vector<std::size_t>& TaskBundle::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return test;
}

std::size_t Suite::total_classes() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.class_count();
  return n;
}

void Suite::validate() const {
  if (tasks.empty()) throw DatasetError("suite has no tasks");
  if (d_txt < 1) throw DatasetError("suite d_txt must be positive");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw DatasetError("suite temperature must be positive");
  if (encoder && (encoder->d_txt != d_txt || encoder->d_embed != d_embed)) {
    throw FormatError(ErrorCode::format_width, "encoder spec widths disagree with suite dims");
  }
  std::set<std::string> names;
  for (const TaskBundle& t : tasks) {
    const std::string where = "task '" + t.name + "': ";
    if (t.name.empty()) throw DatasetError("task with empty name");
    if (!names.insert(t.name).second) throw DatasetError(where + "duplicate task name");
    if (t.class_names.size() < 2) throw DatasetError(where + "needs at least two classes");
    if (std::set<std::string>(t.class_names.begin(), t.class_names.end()).size() !=
        t.class_names.size()) {
      throw DatasetError(where + "duplicate class name");
    }
    for (const auto& c : t.class_names) {
      if (c.empty()) throw DatasetError(where + "empty class name");
    }
    if (t.image_features.cols() != d_txt) {
      throw FormatError(ErrorCode::format_width,
                        where + "feature width " + std::to_string(t.image_features.cols()) +
                            " != d_txt " + std::to_string(d_txt));
    }
    const auto n = static_cast<std::size_t>(t.image_features.rows());
    if (t.labels.size() != n) throw DatasetError(where + "label count differs from feature rows");
    for (int y : t.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= t.class_count()) {
        throw DatasetError(where + "label " + std::to_string(y) + " out of range");
      }
    }
    std::vector<char> seen(n, 0);
    for (Split s : {Split::train, Split::val, Split::test}) {
      for (std::size_t i : t.split(s)) {
        if (i >= n) throw DatasetError(where + "split index " + std::to_string(i) + " out of range");
        if (seen[i]) throw DatasetError(where + "split indices overlap at " + std::to_string(i));
        seen[i] = 1;
      }
    }
    if (!all_finite(t.image_features)) throw DatasetError(where + "non-finite image features");
    if (t.task_tokens) {
      if (t.task_tokens->rows() < 1 || t.task_tokens->cols() != d_embed) {
        throw FormatError(ErrorCode::format_width, where + "task token block width != d_embed");
      }
    }
    if (t.class_tokens) {
      if (t.class_tokens->size() != t.class_count()) {
        throw DatasetError(where + "class token blocks do not match class count");
      }
      for (const auto& c : *t.class_tokens) {
        if (c.rows() < 1 || c.cols() != d_embed) {
          throw FormatError(ErrorCode::format_width, where + "class token block width != d_embed");
        }
      }
    }
  }
}

namespace {

json encoder_to_json(const EncoderSpec& e) {
  return json{{"d_embed", e.d_embed},   {"d_txt", e.d_txt},
              {"depth", e.depth},       {"heads", e.heads},
              {"pooling", to_string(e.pooling)},
              {"weight_seed", e.weight_seed}, {"vocab_size", e.vocab_size}};
}

EncoderSpec encoder_from_json(const json& j) {
  EncoderSpec e;
  e.d_embed = j.at("d_embed").get<int>();
  e.d_txt = j.at("d_txt").get<int>();
  e.depth = j.at("depth").get<int>();
  e.heads = j.at("heads").get<int>();
  e.pooling = parse_pooling(j.at("pooling").get<std::string>());
  e.weight_seed = j.at("weight_seed").get<std::uint64_t>();
  e.vocab_size = j.at("vocab_size").get<int>();
  return e;
}

std::string task_file_stem(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "task%03zu", t);
  return buf;
}

json block_ref(const std::string& file, const Matrix& m) {
  return json{{"file", file}, {"rows", m.rows()}, {"cols", m.cols()}};
}

Matrix read_block(const fs::path& dir, const json& ref) {
  const auto file = ref.at("file").get<std::string>();
  if (file.empty() || file.find('/') != std::string::npos || file.find("..") != std::string::npos) {
    throw FormatError(ErrorCode::format_metadata, "illegal tensor file name '" + file + "'");
  }
  Matrix m = read_tensor(dir / file);
  if (m.rows() != ref.at("rows").get<Eigen::Index>() || m.cols() != ref.at("cols").get<Eigen::Index>()) {
    throw FormatError(ErrorCode::format_width,
                      file + ": tensor shape disagrees with suite.json");
  }
  return m;
}

}  // namespace

void write_suite(const Suite& suite, const fs::path& dir) {
  suite.validate();
  write_directory_atomically(dir, [&](const fs::path& tmp) {
    json root;
    root["format"] = "softcpt-suite";
    root["version"] = 1;
    root["d_txt"] = suite.d_txt;
    root["d_embed"] = suite.d_embed;
    root["tau"] = suite.tau;
    root["features_normalized"] = suite.features_normalized;
    root["pooling"] = to_string(suite.pooling);
    root["source"] = suite.source;
    if (suite.encoder) root["encoder"] = encoder_to_json(*suite.encoder);
    json tasks = json::array();
    for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
      const TaskBundle& b = suite.tasks[t];
      const std::string stem = task_file_stem(t);
      json jt;
      jt["name"] = b.name;
      jt["metric"] = to_string(b.metric);
      jt["class_names"] = b.class_names;
      jt["labels"] = b.labels;
      jt["splits"] = {{"train", b.train}, {"val", b.val}, {"test", b.test}};
      write_tensor(tmp / (stem + "_features.bin"), b.image_features);
      jt["features"] = block_ref(stem + "_features.bin", b.image_features);
      if (b.task_tokens) {
        write_tensor(tmp / (stem + "_task_tokens.bin"), *b.task_tokens);
        jt["task_tokens"] = block_ref(stem + "_task_tokens.bin", *b.task_tokens);
      }
      if (b.class_tokens) {
        std::vector<std::size_t> offsets{0};
        Eigen::Index rows = 0;
        for (const auto& c : *b.class_tokens) rows += c.rows();
        Matrix all(rows, suite.d_embed);
        for (const auto& c : *b.class_tokens) {
          all.middleRows(static_cast<Eigen::Index>(offsets.back()), c.rows()) = c;
          offsets.push_back(offsets.back() + static_cast<std::size_t>(c.rows()));
        }
        write_tensor(tmp / (stem + "_class_tokens.bin"), all);
        jt["class_tokens"] = block_ref(stem + "_class_tokens.bin", all);
        jt["class_tokens"]["offsets"] = offsets;
      }
      tasks.push_back(std::move(jt));
    }
    root["tasks"] = std::move(tasks);
    write_file(tmp / "suite.json", root.dump(2) + "\n");
  });
}

Suite read_suite(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("suite directory '" + dir.string() + "' not found");
  json root;
  try {
    root = json::parse(read_file(dir / "suite.json"));
  } catch (const json::exception& e) {
    throw FormatError(ErrorCode::format_metadata, "suite.json: " + std::string(e.what()));
  }
  Suite s;
  try {
    if (root.at("format").get<std::string>() != "softcpt-suite") {
      throw FormatError(ErrorCode::format_magic, "suite.json: not a suite manifest");
    }
    if (root.at("version").get<int>() != 1) {
      throw FormatError(ErrorCode::format_version, "suite.json: unsupported version");
    }
    s.d_txt = root.at("d_txt").get<int>();
    s.d_embed = root.at("d_embed").get<int>();
    s.tau = root.at("tau").get<double>();
    s.features_normalized = root.value("features_normalized", false);
    s.pooling = parse_pooling(root.value("pooling", std::string("mean")));
    s.source = root.value("source", std::string("unknown"));
    if (root.contains("encoder")) s.encoder = encoder_from_json(root.at("encoder"));
    for (const json& jt : root.at("tasks")) {
      TaskBundle b;
      b.name = jt.at("name").get<std::string>();
      b.metric = parse_metric(jt.value("metric", std::string("top1")));
      b.class_names = jt.at("class_names").get<std::vector<std::string>>();
      b.labels = jt.at("labels").get<std::vector<int>>();
      const json& sp = jt.at("splits");
      b.train = sp.at("train").get<std::vector<std::size_t>>();
      b.val = sp.value("val", std::vector<std::size_t>{});
      b.test = sp.at("test").get<std::vector<std::size_t>>();
      b.image_features = read_block(dir, jt.at("features"));
      if (jt.contains("task_tokens")) b.task_tokens = read_block(dir, jt.at("task_tokens"));
      if (jt.contains("class_tokens")) {
        const json& ref = jt.at("class_tokens");
        const Matrix all = read_block(dir, ref);
        const auto offsets = ref.at("offsets").get<std::vector<std::size_t>>();
        if (offsets.size() != b.class_names.size() + 1 || offsets.front() != 0 ||
            offsets.back() != static_cast<std::size_t>(all.rows()) ||
            !std::is_sorted(offsets.begin(), offsets.end())) {
          throw FormatError(ErrorCode::format_metadata,
                            "task '" + b.name + "': bad class token offsets");
        }
        std::vector<TokenSequence> blocks;
        for (std::size_t c = 0; c + 1 < offsets.size(); ++c) {
          blocks.emplace_back(all.middleRows(static_cast<Eigen::Index>(offsets[c]),
                                             static_cast<Eigen::Index>(offsets[c + 1] - offsets[c])));
        }
        b.class_tokens = std::move(blocks);
      }
      s.tasks.push_back(std::move(b));
    }
  } catch (const json::exception& e) {
    throw FormatError(ErrorCode::format_metadata, "suite.json: " + std::string(e.what()));
  } catch (const InvalidArgument& e) {
    throw FormatError(ErrorCode::format_metadata, "suite.json: " + std::string(e.what()));
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Sampling and splitting
// ---------------------------------------------------------------------------

std::vector<std::size_t> FewShotSplit::indices() const {
  std::vector<std::size_t> all;
  for (const auto& c : per_class) all.insert(all.end(), c.begin(), c.end());
  std::sort(all.begin(), all.end());
  return all;
}

FewShotSplit sample_few_shot(const TaskBundle& bundle, int k, std::uint64_t seed) {
  if (k < 1) throw InvalidArgument("few-shot k must be at least 1");
  std::vector<std::vector<std::size_t>> pool(bundle.class_count());
  for (std::size_t i : bundle.train) {
    pool.at(static_cast<std::size_t>(bundle.labels.at(i))).push_back(i);
  }
  FewShotSplit out;
  out.k = k;
  out.seed = seed;
  Rng rng(seed, fnv1a64(bundle.name));
  for (std::size_t c = 0; c < pool.size(); ++c) {
    if (pool[c].empty()) {
      throw DatasetError("task '" + bundle.name + "': class '" + bundle.class_names[c] +
                         "' has no training samples");
    }
    rng.shuffle(std::span<std::size_t>(pool[c]));
    pool[c].resize(std::min(pool[c].size(), static_cast<std::size_t>(k)));
    std::sort(pool[c].begin(), pool[c].end());
    out.per_class.push_back(std::move(pool[c]));
  }
  return out;
}

std::pair<TaskBundle, TaskBundle> split_base_new(const TaskBundle& bundle) {
  const std::size_t C = bundle.class_count();
  if (C < 2) throw DatasetError("base/new split needs at least two classes");
  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return bundle.class_names[a] < bundle.class_names[b];
  });
  const std::size_t n_base = (C + 1) / 2;

  auto make = [&](std::size_t first, std::size_t last) {
    TaskBundle part;
    part.name = bundle.name;
    part.metric = bundle.metric;
    std::vector<int> relabel(C, -1);
    for (std::size_t r = first; r < last; ++r) {
      relabel[order[r]] = static_cast<int>(r - first);
      part.class_names.push_back(bundle.class_names[order[r]]);
    }
    if (bundle.class_tokens) {
      part.class_tokens.emplace();
      for (std::size_t r = first; r < last; ++r) part.class_tokens->push_back((*bundle.class_tokens)[order[r]]);
    }
    part.task_tokens = bundle.task_tokens;
    std::vector<std::ptrdiff_t> remap(bundle.labels.size(), -1);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < bundle.labels.size(); ++i) {
      if (relabel[static_cast<std::size_t>(bundle.labels[i])] >= 0) {
        remap[i] = static_cast<std::ptrdiff_t>(kept.size());
        kept.push_back(i);
      }
    }
    part.image_features.resize(static_cast<Eigen::Index>(kept.size()), bundle.image_features.cols());
    for (std::size_t r = 0; r < kept.size(); ++r) {
      part.image_features.row(static_cast<Eigen::Index>(r)) =
          bundle.image_features.row(static_cast<Eigen::Index>(kept[r]));
      part.labels.push_back(relabel[static_cast<std::size_t>(bundle.labels[kept[r]])]);
    }
    auto filter = [&](const std::vector<std::size_t>& src, std::vector<std::size_t>& dst) {
      for (std::size_t i : src) {
        if (remap.at(i) >= 0) dst.push_back(static_cast<std::size_t>(remap[i]));
      }
    };
    filter(bundle.train, part.train);
    filter(bundle.val, part.val);
    filter(bundle.test, part.test);
    return part;
  };
  return {make(0, n_base), make(n_base, C)};
}

std::vector<TaskText> task_texts(const Suite& suite, const EncoderSpec& encoder) {
  if (suite.d_embed != 0 && suite.d_embed != encoder.d_embed) {
    bool has_blocks = false;
    for (const auto& t : suite.tasks) has_blocks |= t.task_tokens.has_value() || t.class_tokens.has_value();
    if (has_blocks) {
      throw ShapeError("suite token blocks have width " + std::to_string(suite.d_embed) +
                       " but the encoder expects " + std::to_string(encoder.d_embed));
    }
  }
  std::vector<TaskText> out;
  for (const TaskBundle& t : suite.tasks) {
    TaskText text;
    text.task_tokens = t.task_tokens ? *t.task_tokens
                                     : tokenize_and_embed(t.name, encoder, encoder.weight_seed);
    if (t.class_tokens) {
      text.class_tokens = *t.class_tokens;
    } else {
      for (const auto& c : t.class_names) {
        text.class_tokens.push_back(tokenize_and_embed(c, encoder, encoder.weight_seed));
      }
    }
    out.push_back(std::move(text));
  }
  return out;
}

namespace {

void append_rows(Batch& b, const TaskBundle& bundle, std::size_t task,
                 const std::vector<std::size_t>& rows, std::vector<Eigen::RowVectorXd>& feats) {
  for (std::size_t i : rows) {
    b.task.push_back(task);
    b.label.push_back(bundle.labels.at(i));
    feats.push_back(bundle.image_features.row(static_cast<Eigen::Index>(i)));
  }
}

Batch assemble(std::vector<Eigen::RowVectorXd>& feats, Batch b, int width) {
  b.features.resize(static_cast<Eigen::Index>(feats.size()), width);
  for (std::size_t i = 0; i < feats.size(); ++i) b.features.row(static_cast<Eigen::Index>(i)) = feats[i];
  return b;
}

}  // namespace

Batch split_batch(const Suite& suite, Split split, std::span<const FewShotSplit> few_shot) {
  if (!few_shot.empty() && few_shot.size() != suite.tasks.size()) {
    throw InvalidArgument("split_batch: need one few-shot selection per task");
  }
  Batch b;
  std::vector<Eigen::RowVectorXd> feats;
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    const TaskBundle& bundle = suite.tasks[t];
    if (split == Split::train && !few_shot.empty()) {
      append_rows(b, bundle, t, few_shot[t].indices(), feats);
    } else {
      append_rows(b, bundle, t, bundle.split(split), feats);
    }
  }
  return assemble(feats, std::move(b), suite.d_txt);
}

Batch task_split_batch(const Suite& suite, std::size_t task, Split split) {
  Batch b;
  std::vector<Eigen::RowVectorXd> feats;
  const TaskBundle& bundle = suite.tasks.at(task);
  append_rows(b, bundle, task, bundle.split(split), feats);
  return assemble(feats, std::move(b), suite.d_txt);
}

// ---------------------------------------------------------------------------
// Synthetic suites
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kTaskNames[] = {
    "flower species", "pet breeds",      "aircraft models", "food dishes",
    "car models",     "bird species",    "texture patterns", "satellite scenes",
    "human actions",  "leaf diseases",   "fungus types",     "insect species",
    "clothing items", "road signs",      "dog breeds",       "fruit varieties",
};

constexpr const char* kAdjectives[] = {
    "red",   "blue",   "green",  "golden", "silver", "dark",   "bright", "small",
    "giant", "spotted", "striped", "wild",  "royal",  "common", "alpine", "desert",
};

constexpr const char* kNouns[] = {
    "lily",  "falcon", "tulip", "badger", "orchid", "heron",  "maple", "otter",
    "fern",  "lynx",   "poppy", "raven",  "cedar",  "marten", "daisy", "wren",
};

constexpr std::uint64_t kNameStream = 0x6e616d6573ULL;
constexpr std::uint64_t kHiddenStream = 0x68696464656eULL;
constexpr std::uint64_t kSampleStream = 0x73616d706c65ULL;

Matrix hidden_context(const SyntheticSpec& spec, std::size_t task) {
  // A shared component plus a task-specific one, so tasks are related.
  Rng shared(spec.seed, kHiddenStream);
  Rng own(spec.seed, kHiddenStream + 1 + task);
  // Ten times the token embedding scale, so the hidden prompt dominates the
  // class tokens the way a trained context does.
  const double std = 2.0;
  return shared.gaussian(spec.hidden_context_length, spec.encoder.d_embed, std) +
         0.5 * own.gaussian(spec.hidden_context_length, spec.encoder.d_embed, std);
}

}  // namespace

void SyntheticSpec::validate() const {
  if (tasks < 1) throw InvalidArgument("synthetic suite needs at least one task");
  if (classes < 2) throw InvalidArgument("synthetic tasks need at least two classes");
  if (classes > 256) throw InvalidArgument("synthetic tasks support at most 256 classes");
  if (train_per_class < 1 || test_per_class < 0 || val_per_class < 0) {
    throw InvalidArgument("synthetic sample counts must be non-negative (train positive)");
  }
  if (!(spread >= 0.0) || !std::isfinite(spread)) throw InvalidArgument("spread must be >= 0");
  if (hidden_context_length < 0) throw InvalidArgument("hidden context length must be >= 0");
  encoder.validate();
}

Matrix synthetic_centers(const SyntheticSpec& spec, const Suite& suite, std::size_t task) {
  const TextEncoder enc(spec.encoder);
  const Matrix hidden = hidden_context(spec, task);
  const TaskBundle& b = suite.tasks.at(task);
  Matrix centers(static_cast<Eigen::Index>(b.class_count()), spec.encoder.d_txt);
  for (std::size_t c = 0; c < b.class_count(); ++c) {
    const TokenSequence cls = tokenize_and_embed(b.class_names[c], spec.encoder, spec.encoder.weight_seed);
    centers.row(static_cast<Eigen::Index>(c)) = l2_normalize(enc.encode(vconcat(hidden, cls))).transpose();
  }
  return centers;
}

Suite generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Suite s;
  s.d_txt = spec.encoder.d_txt;
  s.d_embed = spec.encoder.d_embed;
  s.tau = 0.01;
  s.features_normalized = true;
  s.pooling = spec.encoder.pooling;
  s.source = "synthetic";
  s.encoder = spec.encoder;

  constexpr std::size_t n_task_names = std::size(kTaskNames);
  for (int t = 0; t < spec.tasks; ++t) {
    TaskBundle b;
    b.name = kTaskNames[static_cast<std::size_t>(t) % n_task_names];
    if (static_cast<std::size_t>(t) >= n_task_names) {
      b.name += " " + std::to_string(static_cast<std::size_t>(t) / n_task_names + 1);
    }
    Rng names(spec.seed, kNameStream + static_cast<std::uint64_t>(t));
    std::vector<std::size_t> combos(std::size(kAdjectives) * std::size(kNouns));
    std::iota(combos.begin(), combos.end(), std::size_t{0});
    names.shuffle(std::span<std::size_t>(combos));
    for (int c = 0; c < spec.classes; ++c) {
      const std::size_t k = combos[static_cast<std::size_t>(c)];
      b.class_names.push_back(std::string(kAdjectives[k / std::size(kNouns)]) + " " +
                              kNouns[k % std::size(kNouns)]);
    }
    s.tasks.push_back(std::move(b));
  }

  for (std::size_t t = 0; t < s.tasks.size(); ++t) {
    TaskBundle& b = s.tasks[t];
    const Matrix centers = synthetic_centers(spec, s, t);
    Rng rng(spec.seed, kSampleStream + t);
    const int per_class = spec.train_per_class + spec.val_per_class + spec.test_per_class;
    const auto n = static_cast<std::size_t>(per_class * spec.classes);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    b.image_features.resize(static_cast<Eigen::Index>(n), s.d_txt);
    b.labels.assign(n, 0);
    const double noise = spec.spread / std::sqrt(static_cast<double>(s.d_txt));
    for (std::size_t j = 0; j < n; ++j) {
      // Sample j (class-major generation order) lands at row order[j].
      const std::size_t c = j / static_cast<std::size_t>(per_class);
      const std::size_t within = j % static_cast<std::size_t>(per_class);
      const std::size_t row = order[j];
      Vec x = centers.row(static_cast<Eigen::Index>(c)).transpose();
      for (Eigen::Index d = 0; d < x.size(); ++d) x(d) += noise * rng.normal();
      b.image_features.row(static_cast<Eigen::Index>(row)) = l2_normalize(x).transpose();
      b.labels[row] = static_cast<int>(c);
      if (within < static_cast<std::size_t>(spec.train_per_class)) {
        b.train.push_back(row);
      } else if (within < static_cast<std::size_t>(spec.train_per_class + spec.val_per_class)) {
        b.val.push_back(row);
      } else {
        b.test.push_back(row);
      }
    }
    std::sort(b.train.begin(), b.train.end());
    std::sort(b.val.begin(), b.val.end());
    std::sort(b.test.begin(), b.test.end());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

json model_to_json(const ModelConfig& m) {
  return json{{"method", to_string(m.method)},
              {"L", m.L},
              {"M", m.M},
              {"K", m.K},
              {"body", to_string(m.body)},
              {"reduction", m.reduction},
              {"tau", m.tau},
              {"class_sampling_fraction", m.class_sampling_fraction},
              {"freeze_task_context", m.freeze_task_context}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.method = parse_method(j.at("method").get<std::string>());
  m.L = j.at("L").get<int>();
  m.M = j.at("M").get<int>();
  m.K = j.at("K").get<int>();
  m.body = parse_body(j.at("body").get<std::string>());
  m.reduction = j.at("reduction").get<int>();
  m.tau = j.at("tau").get<double>();
  m.class_sampling_fraction = j.at("class_sampling_fraction").get<double>();
  m.freeze_task_context = j.at("freeze_task_context").get<bool>();
  return m;
}

std::string tensor_file_name(const std::string& prefix, const std::string& name) {
  std::string out = prefix + "__";
  for (char ch : name) out += ch == '/' ? '.' : ch;
  return out + ".bin";
}

json write_set(const fs::path& dir, const std::string& prefix, const ParameterSet& set) {
  json entries = json::array();
  for (const auto& [name, m] : set) {
    const std::string file = tensor_file_name(prefix, name);
    write_tensor(dir / file, m, ElementKind::float64);
    entries.push_back({{"name", name}, {"file", file}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  return entries;
}

ParameterSet read_set(const fs::path& dir, const json& entries) {
  ParameterSet set;
  for (const json& e : entries) set.set(e.at("name").get<std::string>(), read_block(dir, e));
  return set;
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  write_directory_atomically(dir, [&](const fs::path& tmp) {
    json root;
    root["format"] = "softcpt-checkpoint";
    root["version"] = 1;
    root["model"] = model_to_json(ckpt.model);
    root["encoder"] = encoder_to_json(ckpt.encoder);
    root["augment_order"] = ckpt.augment_order;
    root["seed"] = ckpt.seed;
    root["task_names"] = ckpt.task_names;
    root["class_counts"] = ckpt.class_counts;
    root["params"] = write_set(tmp, "param", ckpt.params);
    root["buffers"] = write_set(tmp, "buffer", ckpt.buffers);
    write_file(tmp / "checkpoint.json", root.dump(2) + "\n");
  });
}

Checkpoint read_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("checkpoint directory '" + dir.string() + "' not found");
  Checkpoint c;
  try {
    const json root = json::parse(read_file(dir / "checkpoint.json"));
    if (root.at("format").get<std::string>() != "softcpt-checkpoint") {
      throw FormatError(ErrorCode::format_magic, "checkpoint.json: not a checkpoint manifest");
    }
    if (root.at("version").get<int>() != 1) {
      throw FormatError(ErrorCode::format_version, "checkpoint.json: unsupported version");
    }
    c.model = model_from_json(root.at("model"));
    c.encoder = encoder_from_json(root.at("encoder"));
    c.augment_order = root.at("augment_order").get<std::string>();
    if (c.augment_order != "task-first") {
      throw FormatError(ErrorCode::format_metadata, "unsupported augment order '" + c.augment_order + "'");
    }
    c.seed = root.at("seed").get<std::uint64_t>();
    c.task_names = root.at("task_names").get<std::vector<std::string>>();
    c.class_counts = root.at("class_counts").get<std::vector<std::size_t>>();
    c.params = read_set(dir, root.at("params"));
    c.buffers = read_set(dir, root.at("buffers"));
  } catch (const json::exception& e) {
    throw FormatError(ErrorCode::format_metadata, "checkpoint.json: " + std::string(e.what()));
  } catch (const InvalidArgument& e) {
    throw FormatError(ErrorCode::format_metadata, "checkpoint.json: " + std::string(e.what()));
  }
  c.model.validate();
  c.encoder.validate();
  return c;
}

}  // namespace softcpt
