#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "softcpt/data_io.hpp"
#include "softcpt/model.hpp"

namespace softcpt {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Percentage in [0, 100]. Per-class accuracy is the unweighted mean recall
/// over the classes that occur in `labels`.
double accuracy(std::span<const int> predictions, std::span<const int> labels, Metric metric);

/// Row-wise probabilities softmax(cos(x, w_c) / tau).
Matrix predict_probs_batch(const Matrix& features, const ClassifierWeights& weights);
std::vector<int> argmax_rows(const Matrix& scores);

/// Accuracy of `weights` on the rows of one task's split.
double evaluate_weights(const ClassifierWeights& weights, const TaskBundle& bundle, Split split);

/// Accuracy of a trained model on each task's split.
std::vector<double> evaluate_model(const PromptModel& model, const ParameterSet& params,
                                   const ParameterSet& buffers, const Suite& suite, Split split);

/// Accuracies keyed by (task, shot, seed).
class ScoreTable {
 public:
  void add(std::size_t task, int shot, std::uint64_t seed, double accuracy);

  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<int> shots() const;
  std::vector<std::size_t> tasks() const;
  std::vector<double> values(std::size_t task, int shot) const;

  /// Mean and population standard deviation over seeds.
  double mean(std::size_t task, int shot) const;
  double stddev(std::size_t task, int shot) const;

  /// Averages over tasks of the per-task mean / std at one shot level.
  double mean_score(int shot) const;
  double mean_stddev(int shot) const;

  const std::map<std::tuple<std::size_t, int, std::uint64_t>, double>& entries() const noexcept {
    return entries_;
  }

 private:
  std::map<std::tuple<std::size_t, int, std::uint64_t>, double> entries_;
};

inline constexpr int kRsdShots[] = {1, 2, 4, 8, 16};

/// Mean over shot levels of STD_i / Score_i.
double rsd(std::span<const double> stds, std::span<const double> scores);
/// Uses shot levels 1, 2, 4, 8 and 16 of the table.
double rsd(const ScoreTable& table);

double harmonic_mean(double base, double novel);

// ---------------------------------------------------------------------------
// Prompt transfer
// ---------------------------------------------------------------------------

enum class TransferMode { oracle, ensfeat, enspred };
const char* to_string(TransferMode m) noexcept;
TransferMode parse_transfer_mode(std::string_view name);

/// Unit classifier rows for a task under an arbitrary L x d_embed context.
ClassifierWeights context_weights(const Matrix& context, const TaskText& text,
                                  const TextEncoder& encoder, double tau);

struct TransferResult {
  TransferMode mode = TransferMode::oracle;
  /// Oracle only: S(s, u) = score on target task u with the context of source s.
  Matrix S;
  std::vector<double> scores;
};

struct TransferOptions {
  TransferMode mode = TransferMode::oracle;
  Split split = Split::test;
  /// EnsFeat: renormalize averaged classifier rows.
  bool renormalize = true;
};

/// Probabilities on target task `task` after ensembling all source contexts.
Matrix transfer_probs(std::span<const Matrix> contexts, const Suite& suite,
                      std::span<const TaskText> texts, const TextEncoder& encoder,
                      std::size_t task, const TransferOptions& options);

TransferResult transfer_eval(std::span<const Matrix> contexts, const Suite& suite,
                             std::span<const TaskText> texts, const TextEncoder& encoder,
                             const TransferOptions& options);

// ---------------------------------------------------------------------------
// Task similarity
// ---------------------------------------------------------------------------

/// S' = S diag(1 / diag(S)).
Matrix normalize_scores(const Matrix& S);
Matrix symmetrize(const Matrix& A);

/// Pairwise cosine of encode(context) over a list of contexts.
Matrix prompt_feature_cosines(std::span<const Matrix> contexts, const TextEncoder& encoder);

/// Pearson correlation of the strict upper triangles; nullopt when either
/// triangle is constant or has fewer than two entries.
std::optional<double> upper_triangle_correlation(const Matrix& a, const Matrix& b);

struct SimilarityMatrices {
  Matrix S, S_norm, S_oracle, S_st, S_mt;
  std::optional<double> corr_st, corr_mt;
};

SimilarityMatrices similarity_report(std::span<const Matrix> single_task_contexts,
                                     std::span<const Matrix> multi_task_contexts, const Matrix& S,
                                     const TextEncoder& encoder);

struct LipschitzReport {
  double sigma_max = 0.0;
  double worst_ratio = 0.0;  // max ||W^T a - W^T b|| / (sigma ||a - b||)
  std::size_t pairs = 0;
  std::size_t violations = 0;
};

/// Checks ||W^T a - W^T b|| <= sigma_max(W) ||a - b|| on random unit pairs.
LipschitzReport lipschitz_check(const Matrix& w, std::size_t pairs, std::uint64_t seed,
                                double slack = 1e-9);

// ---------------------------------------------------------------------------
// One-step SGD decomposition of generated contexts
// ---------------------------------------------------------------------------

enum class PropositionMode { exact, general };
const char* to_string(PropositionMode m) noexcept;
PropositionMode parse_proposition_mode(std::string_view name);

struct TaskDiagnostics {
  Vec S;          // W^T g_t before the step
  Vec S_next;     // W'^T g'_t after the step
  Vec predicted;  // decomposition of S_next
  Vec d;          // dL/dS_t
  Matrix m;       // dL/dU_t (empty when the task context is not learned)
  Vec g, g_next;
  Vec C;          // general mode: W^T (g'_t - g_t)
  double residual = 0.0;
};

struct PropositionReport {
  PropositionMode mode = PropositionMode::exact;
  double eta = 0.0;
  double loss = 0.0;
  std::vector<TaskDiagnostics> tasks;

  double max_residual() const;
};

/// Takes one full-batch SGD step of size eta on `batch` and compares every
/// task's new generated context with its predicted decomposition. Requires a
/// SoftCPT N/A variant with the linear body; exact mode also requires a
/// frozen or empty task context, general mode task-specific task contexts.
PropositionReport verify_proposition(const PromptModel& model, const ParameterSet& params,
                                     const ParameterSet& buffers, const Batch& batch, double eta,
                                     PropositionMode mode);

/// residual(eta) / residual(eta / 2) for each eta.
std::vector<double> proposition_convergence(const PromptModel& model, const ParameterSet& params,
                                            const ParameterSet& buffers, const Batch& batch,
                                            std::span<const double> etas);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct TensorCheck {
  std::string name;
  std::size_t checked = 0;
  double max_abs_analytic = 0.0;
  double abs_error = 0.0;  // ||analytic - numeric||
  double scale = 0.0;      // max(||analytic||, ||numeric||)
  /// abs_error / max(scale, floor * largest scale over all tensors).
  double rel_error = 0.0;
};

struct GradCheckOptions {
  double step = 1e-6;
  /// Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t max_coords = 24;
  std::uint64_t seed = 11;
  double floor = 1e-6;
};

/// Central finite differences of PromptModel::loss against loss_and_grad.
std::vector<TensorCheck> gradient_check(const PromptModel& model, const ParameterSet& params,
                                        const ParameterSet& buffers, const Batch& batch,
                                        const GradCheckOptions& options = {});

}  // namespace softcpt
