#include "softcpt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "softcpt/optim.hpp"

namespace softcpt {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double accuracy(std::span<const int> predictions, std::span<const int> labels, Metric metric) {
  if (predictions.size() != labels.size()) throw ShapeError("accuracy: length mismatch");
  if (labels.empty()) throw DatasetError("accuracy: empty input");
  if (metric == Metric::top1) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
    return 100.0 * static_cast<double>(hit) / static_cast<double>(labels.size());
  }
  std::map<int, std::pair<std::size_t, std::size_t>> per;  // label -> (hits, count)
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [hit, n] = per[labels[i]];
    hit += predictions[i] == labels[i];
    ++n;
  }
  double sum = 0.0;
  for (const auto& [label, hn] : per) {
    sum += static_cast<double>(hn.first) / static_cast<double>(hn.second);
  }
  return 100.0 * sum / static_cast<double>(per.size());
}

Matrix predict_probs_batch(const Matrix& features, const ClassifierWeights& weights) {
  Matrix out(features.rows(), weights.rows.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    out.row(i) = predict_probs(Vec(features.row(i).transpose()), weights).transpose();
  }
  return out;
}

std::vector<int> argmax_rows(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index j = 0;
    scores.row(i).maxCoeff(&j);
    out[static_cast<std::size_t>(i)] = static_cast<int>(j);
  }
  return out;
}

namespace {

Matrix split_features(const TaskBundle& bundle, const std::vector<std::size_t>& rows,
                      std::vector<int>& labels) {
  Matrix x(static_cast<Eigen::Index>(rows.size()), bundle.image_features.cols());
  labels.clear();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    x.row(static_cast<Eigen::Index>(r)) = bundle.image_features.row(static_cast<Eigen::Index>(rows[r]));
    labels.push_back(bundle.labels[rows[r]]);
  }
  return x;
}

}  // namespace

double evaluate_weights(const ClassifierWeights& weights, const TaskBundle& bundle, Split split) {
  std::vector<int> labels;
  const Matrix x = split_features(bundle, bundle.split(split), labels);
  if (weights.rows.rows() != static_cast<Eigen::Index>(bundle.class_count())) {
    throw ShapeError("classifier has " + std::to_string(weights.rows.rows()) + " rows for " +
                     std::to_string(bundle.class_count()) + " classes");
  }
  return accuracy(argmax_rows(predict_probs_batch(x, weights)), labels, bundle.metric);
}

std::vector<double> evaluate_model(const PromptModel& model, const ParameterSet& params,
                                   const ParameterSet& buffers, const Suite& suite, Split split) {
  if (model.task_count() != suite.tasks.size()) throw ShapeError("model and suite task counts differ");
  std::vector<double> out;
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    out.push_back(evaluate_weights(model.class_weights(params, buffers, t), suite.tasks[t], split));
  }
  return out;
}

void ScoreTable::add(std::size_t task, int shot, std::uint64_t seed, double acc) {
  if (!(acc >= 0.0 && acc <= 100.0)) throw InvalidArgument("accuracy outside [0, 100]");
  entries_[{task, shot, seed}] = acc;
}

std::vector<int> ScoreTable::shots() const {
  std::set<int> s;
  for (const auto& [k, v] : entries_) s.insert(std::get<1>(k));
  return {s.begin(), s.end()};
}

std::vector<std::size_t> ScoreTable::tasks() const {
  std::set<std::size_t> s;
  for (const auto& [k, v] : entries_) s.insert(std::get<0>(k));
  return {s.begin(), s.end()};
}

std::vector<double> ScoreTable::values(std::size_t task, int shot) const {
  std::vector<double> out;
  for (const auto& [k, v] : entries_) {
    if (std::get<0>(k) == task && std::get<1>(k) == shot) out.push_back(v);
  }
  return out;
}

double ScoreTable::mean(std::size_t task, int shot) const {
  const auto v = values(task, shot);
  if (v.empty()) throw InvalidArgument("score table has no entry for this task and shot");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double ScoreTable::stddev(std::size_t task, int shot) const {
  const auto v = values(task, shot);
  const double mu = mean(task, shot);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double ScoreTable::mean_score(int shot) const {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t : tasks()) {
    if (values(t, shot).empty()) continue;
    s += mean(t, shot);
    ++n;
  }
  if (n == 0) throw InvalidArgument("score table has no entries at shot " + std::to_string(shot));
  return s / static_cast<double>(n);
}

double ScoreTable::mean_stddev(int shot) const {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t : tasks()) {
    if (values(t, shot).empty()) continue;
    s += stddev(t, shot);
    ++n;
  }
  if (n == 0) throw InvalidArgument("score table has no entries at shot " + std::to_string(shot));
  return s / static_cast<double>(n);
}

double rsd(std::span<const double> stds, std::span<const double> scores) {
  if (stds.size() != scores.size() || stds.empty()) throw ShapeError("rsd: mismatched shot levels");
  double sum = 0.0;
  for (std::size_t i = 0; i < stds.size(); ++i) {
    if (!(scores[i] > 0.0)) throw DegenerateInputError("rsd: scores must be positive");
    if (stds[i] < 0.0) throw InvalidArgument("rsd: negative std");
    sum += stds[i] / scores[i];
  }
  return sum / static_cast<double>(stds.size());
}

double rsd(const ScoreTable& table) {
  const auto have = table.shots();
  std::vector<double> stds, scores;
  for (int k : kRsdShots) {
    if (!std::binary_search(have.begin(), have.end(), k)) {
      throw InvalidArgument("rsd: missing shot level " + std::to_string(k));
    }
    stds.push_back(table.mean_stddev(k));
    scores.push_back(table.mean_score(k));
  }
  return rsd(stds, scores);
}

double harmonic_mean(double base, double novel) {
  if (base < 0.0 || novel < 0.0) throw InvalidArgument("harmonic mean of negative accuracy");
  if (base == 0.0 && novel == 0.0) throw DegenerateInputError("harmonic mean of two zeros");
  return 2.0 * base * novel / (base + novel);
}

// ---------------------------------------------------------------------------
// Prompt transfer
// ---------------------------------------------------------------------------

const char* to_string(TransferMode m) noexcept {
  switch (m) {
    case TransferMode::oracle: return "oracle";
    case TransferMode::ensfeat: return "ensfeat";
    case TransferMode::enspred: return "enspred";
  }
  return "?";
}

TransferMode parse_transfer_mode(std::string_view name) {
  if (name == "oracle") return TransferMode::oracle;
  if (name == "ensfeat") return TransferMode::ensfeat;
  if (name == "enspred") return TransferMode::enspred;
  throw InvalidArgument("unknown transfer mode '" + std::string(name) + "'");
}

ClassifierWeights context_weights(const Matrix& context, const TaskText& text,
                                  const TextEncoder& encoder, double tau) {
  if (context.cols() != encoder.spec().d_embed) {
    throw ShapeError("context width " + std::to_string(context.cols()) + " != d_embed " +
                     std::to_string(encoder.spec().d_embed));
  }
  ClassifierWeights w;
  w.tau = tau;
  w.rows.resize(static_cast<Eigen::Index>(text.class_tokens.size()), encoder.spec().d_txt);
  for (std::size_t c = 0; c < text.class_tokens.size(); ++c) {
    w.rows.row(static_cast<Eigen::Index>(c)) =
        l2_normalize(encoder.encode(build_class_prompt(context, text.class_tokens[c]))).transpose();
  }
  return w;
}

namespace {

void check_transfer_inputs(std::span<const Matrix> contexts, const Suite& suite,
                           std::span<const TaskText> texts) {
  if (contexts.empty()) throw InvalidArgument("transfer needs at least one source context");
  if (texts.size() != suite.tasks.size()) throw ShapeError("transfer: one TaskText per task required");
  for (const Matrix& c : contexts) {
    if (c.cols() != contexts.front().cols()) throw ShapeError("transfer: context widths differ");
  }
}

}  // namespace

Matrix transfer_probs(std::span<const Matrix> contexts, const Suite& suite,
                      std::span<const TaskText> texts, const TextEncoder& encoder, std::size_t task,
                      const TransferOptions& options) {
  check_transfer_inputs(contexts, suite, texts);
  const TaskBundle& bundle = suite.tasks.at(task);
  std::vector<int> labels;
  const Matrix x = split_features(bundle, bundle.split(options.split), labels);
  const double tau = suite.tau;
  if (options.mode == TransferMode::ensfeat) {
    ClassifierWeights avg;
    avg.tau = tau;
    for (const Matrix& ctx : contexts) {
      const ClassifierWeights w = context_weights(ctx, texts[task], encoder, tau);
      if (avg.rows.size() == 0) {
        avg.rows = w.rows;
      } else {
        avg.rows += w.rows;
      }
    }
    avg.rows /= static_cast<double>(contexts.size());
    if (options.renormalize) {
      for (Eigen::Index r = 0; r < avg.rows.rows(); ++r) {
        avg.rows.row(r) = l2_normalize(Vec(avg.rows.row(r).transpose())).transpose();
      }
    }
    return predict_probs_batch(x, avg);
  }
  if (options.mode == TransferMode::enspred) {
    Matrix sum = Matrix::Zero(x.rows(), static_cast<Eigen::Index>(bundle.class_count()));
    for (const Matrix& ctx : contexts) {
      sum += predict_probs_batch(x, context_weights(ctx, texts[task], encoder, tau));
    }
    return sum / static_cast<double>(contexts.size());
  }
  throw InvalidArgument("transfer_probs: oracle mode selects a context, it does not ensemble");
}

TransferResult transfer_eval(std::span<const Matrix> contexts, const Suite& suite,
                             std::span<const TaskText> texts, const TextEncoder& encoder,
                             const TransferOptions& options) {
  check_transfer_inputs(contexts, suite, texts);
  TransferResult r;
  r.mode = options.mode;
  const std::size_t T = suite.tasks.size();
  if (options.mode == TransferMode::oracle) {
    r.S.resize(static_cast<Eigen::Index>(contexts.size()), static_cast<Eigen::Index>(T));
    for (std::size_t s = 0; s < contexts.size(); ++s) {
      for (std::size_t u = 0; u < T; ++u) {
        r.S(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(u)) = evaluate_weights(
            context_weights(contexts[s], texts[u], encoder, suite.tau), suite.tasks[u], options.split);
      }
    }
    for (std::size_t u = 0; u < T; ++u) r.scores.push_back(r.S.col(static_cast<Eigen::Index>(u)).maxCoeff());
    return r;
  }
  for (std::size_t u = 0; u < T; ++u) {
    const TaskBundle& bundle = suite.tasks[u];
    std::vector<int> labels;
    for (std::size_t i : bundle.split(options.split)) labels.push_back(bundle.labels[i]);
    const Matrix p = transfer_probs(contexts, suite, texts, encoder, u, options);
    r.scores.push_back(accuracy(argmax_rows(p), labels, bundle.metric));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Task similarity
// ---------------------------------------------------------------------------

Matrix normalize_scores(const Matrix& S) {
  if (S.rows() != S.cols()) throw ShapeError("score matrix must be square");
  Matrix out = S;
  for (Eigen::Index j = 0; j < S.cols(); ++j) {
    if (S(j, j) == 0.0) throw DegenerateInputError("score matrix has a zero diagonal entry");
    out.col(j) /= S(j, j);
  }
  return out;
}

Matrix symmetrize(const Matrix& A) {
  if (A.rows() != A.cols()) throw ShapeError("symmetrize: matrix must be square");
  return 0.5 * (A + A.transpose());
}

Matrix prompt_feature_cosines(std::span<const Matrix> contexts, const TextEncoder& encoder) {
  const auto n = static_cast<Eigen::Index>(contexts.size());
  Matrix f(n, encoder.spec().d_txt);
  for (Eigen::Index i = 0; i < n; ++i) {
    f.row(i) = l2_normalize(encoder.encode(contexts[static_cast<std::size_t>(i)])).transpose();
  }
  Matrix c = f * f.transpose();
  c = c.cwiseMax(-1.0).cwiseMin(1.0);
  c.diagonal().setOnes();
  return 0.5 * (c + c.transpose());
}

std::optional<double> upper_triangle_correlation(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || a.rows() != b.rows() || b.rows() != b.cols()) {
    throw ShapeError("correlation needs two square matrices of equal size");
  }
  std::vector<double> x, y;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < a.cols(); ++j) {
      x.push_back(a(i, j));
      y.push_back(b(i, j));
    }
  }
  if (x.size() < 2) return std::nullopt;
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // Spread below rounding noise counts as constant.
  const double tol_x = 1e-24 * std::max(1.0, mx * mx) * n;
  const double tol_y = 1e-24 * std::max(1.0, my * my) * n;
  if (sxx <= tol_x || syy <= tol_y) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

SimilarityMatrices similarity_report(std::span<const Matrix> single_task_contexts,
                                     std::span<const Matrix> multi_task_contexts, const Matrix& S,
                                     const TextEncoder& encoder) {
  const auto T = static_cast<std::size_t>(S.rows());
  if (single_task_contexts.size() != T || multi_task_contexts.size() != T) {
    throw ShapeError("similarity report: need one context per task for both runs");
  }
  SimilarityMatrices m;
  m.S = S;
  m.S_norm = normalize_scores(S);
  m.S_oracle = symmetrize(m.S_norm);
  m.S_st = prompt_feature_cosines(single_task_contexts, encoder);
  m.S_mt = prompt_feature_cosines(multi_task_contexts, encoder);
  m.corr_st = upper_triangle_correlation(m.S_oracle, m.S_st);
  m.corr_mt = upper_triangle_correlation(m.S_oracle, m.S_mt);
  return m;
}

LipschitzReport lipschitz_check(const Matrix& w, std::size_t pairs, std::uint64_t seed, double slack) {
  LipschitzReport r;
  r.sigma_max = spectral_norm(w);
  r.pairs = pairs;
  Rng rng(seed, 0x6c6970ULL);
  for (std::size_t p = 0; p < pairs; ++p) {
    Vec a(w.rows()), b(w.rows());
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.normal();
    a.normalize();
    b.normalize();
    const double lhs = (w.transpose() * (a - b)).norm();
    const double rhs = r.sigma_max * (a - b).norm();
    const double ratio = rhs > 0.0 ? lhs / rhs : 0.0;
    r.worst_ratio = std::max(r.worst_ratio, ratio);
    if (lhs > rhs * (1.0 + slack)) ++r.violations;
  }
  return r;
}

// ---------------------------------------------------------------------------
// One-step SGD decomposition
// ---------------------------------------------------------------------------

const char* to_string(PropositionMode m) noexcept {
  return m == PropositionMode::exact ? "exact" : "general";
}

PropositionMode parse_proposition_mode(std::string_view name) {
  if (name == "exact") return PropositionMode::exact;
  if (name == "general") return PropositionMode::general;
  throw InvalidArgument("unknown proposition mode '" + std::string(name) + "'");
}

double PropositionReport::max_residual() const {
  double m = 0.0;
  for (const auto& t : tasks) m = std::max(m, t.residual);
  return m;
}

PropositionReport verify_proposition(const PromptModel& model, const ParameterSet& params,
                                     const ParameterSet& buffers, const Batch& batch, double eta,
                                     PropositionMode mode) {
  const ModelConfig& cfg = model.config();
  if (!is_softcpt(cfg.method) || uses_class_features(cfg.method)) {
    throw ContractError("the decomposition applies to SoftCPT-NATA/NATS only");
  }
  if (cfg.body != SubnetBody::linear) {
    throw ContractError("the decomposition requires the linear sub-network");
  }
  const bool task_ctx_learned = cfg.M > 0 && !cfg.freeze_task_context;
  if (mode == PropositionMode::exact && task_ctx_learned) {
    throw ContractError("exact mode requires a frozen or empty task context");
  }
  if (mode == PropositionMode::general && !task_specific_task_context(cfg.method)) {
    throw ContractError("general mode requires task-specific task contexts");
  }
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw InvalidArgument("eta must be finite and >= 0");

  ParameterSet buf = buffers;
  const LossResult r = model.loss_and_grad(params, buf, batch);
  ParameterSet next = params;
  sgd_step(next, r.grads, eta);

  const Matrix& W = params.at(names::meta_w());
  const Matrix& W_next = next.at(names::meta_w());
  const std::size_t T = model.task_count();

  PropositionReport rep;
  rep.mode = mode;
  rep.eta = eta;
  rep.loss = r.total;
  for (std::size_t t = 0; t < T; ++t) {
    TaskDiagnostics d;
    d.g = r.task_features.at(t);
    d.d = r.context_grads.at(t);
    d.S = W.transpose() * d.g;
    d.g_next = model.task_feature(next, t).g;
    d.S_next = W_next.transpose() * d.g_next;
    if (task_ctx_learned) {
      const std::string name = task_specific_task_context(cfg.method) ? names::task_context(t)
                                                                       : names::task_context_shared();
      if (r.grads.contains(name)) d.m = r.grads.at(name);
    }
    Vec pred = d.S;
    for (std::size_t k = 0; k < T; ++k) {
      pred -= eta * r.context_grads[k] * r.task_features[k].dot(d.g);
    }
    if (mode == PropositionMode::general) {
      d.C = W.transpose() * (d.g_next - d.g);
      pred += d.C;
    }
    d.predicted = pred;
    d.residual = (d.S_next - d.predicted).norm();
    rep.tasks.push_back(std::move(d));
  }
  return rep;
}

std::vector<double> proposition_convergence(const PromptModel& model, const ParameterSet& params,
                                            const ParameterSet& buffers, const Batch& batch,
                                            std::span<const double> etas) {
  std::vector<double> ratios;
  for (double eta : etas) {
    const double a = verify_proposition(model, params, buffers, batch, eta, PropositionMode::general)
                         .max_residual();
    const double b =
        verify_proposition(model, params, buffers, batch, eta / 2, PropositionMode::general)
            .max_residual();
    ratios.push_back(b > 0.0 ? a / b : std::numeric_limits<double>::infinity());
  }
  return ratios;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

std::vector<TensorCheck> gradient_check(const PromptModel& model, const ParameterSet& params,
                                        const ParameterSet& buffers, const Batch& batch,
                                        const GradCheckOptions& options) {
  ParameterSet buf = buffers;
  const LossResult r = model.loss_and_grad(params, buf, batch);
  Rng rng(options.seed, 0x6763ULL);
  std::vector<TensorCheck> out;
  ParameterSet probe = params;
  for (const auto& [name, g] : r.grads) {
    const Eigen::Index n = g.size();
    std::vector<Eigen::Index> coords;
    if (options.max_coords == 0 || static_cast<std::size_t>(n) <= options.max_coords) {
      for (Eigen::Index i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
      rng.shuffle(std::span<Eigen::Index>(all));
      coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(options.max_coords));
      std::sort(coords.begin(), coords.end());
    }
    Vec analytic(static_cast<Eigen::Index>(coords.size()));
    Vec numeric(static_cast<Eigen::Index>(coords.size()));
    Matrix& p = probe.at(name);
    for (std::size_t j = 0; j < coords.size(); ++j) {
      double& x = p.data()[coords[j]];
      const double saved = x;
      x = saved + options.step;
      const double up = model.loss(probe, buf, batch);
      x = saved - options.step;
      const double down = model.loss(probe, buf, batch);
      x = saved;
      numeric(static_cast<Eigen::Index>(j)) = (up - down) / (2.0 * options.step);
      analytic(static_cast<Eigen::Index>(j)) = g.data()[coords[j]];
    }
    TensorCheck c;
    c.name = name;
    c.checked = coords.size();
    c.max_abs_analytic = analytic.cwiseAbs().maxCoeff();
    c.abs_error = (analytic - numeric).norm();
    c.scale = std::max(analytic.norm(), numeric.norm());
    out.push_back(std::move(c));
  }
  // Tensors whose gradient vanishes (up to rounding) are measured against the
  // largest gradient in the model instead of their own.
  double largest = 0.0;
  for (const auto& c : out) largest = std::max(largest, c.scale);
  const double floor = std::max(options.floor * largest, 1e-300);
  for (auto& c : out) {
    c.rel_error = c.abs_error == 0.0 ? 0.0 : c.abs_error / std::max(c.scale, floor);
  }
  return out;
}

}  // namespace softcpt
