#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "softcpt/encoder.hpp"
#include "softcpt/metanet.hpp"
#include "softcpt/params.hpp"
#include "softcpt/prompt.hpp"
#include "softcpt/rng.hpp"

namespace softcpt {

struct ModelConfig {
  Method method = Method::softcpt_nata;
  int L = 16;
  int M = 8;
  int K = 4;
  SubnetBody body = SubnetBody::linear;
  int reduction = 1;
  double tau = 0.01;
  /// C* variants only: fraction of each task's classes kept per step.
  double class_sampling_fraction = 1.0;
  /// Keep [U] fixed (it still shapes g_t but receives no gradient).
  bool freeze_task_context = false;

  void validate() const;
};

/// Frozen token embeddings of one task's name and class names.
struct TaskText {
  TokenSequence task_tokens;
  std::vector<TokenSequence> class_tokens;
};

/// Unit classifier rows g(s_{t,c}) and the softmax temperature.
struct ClassifierWeights {
  Matrix rows;
  double tau = 0.01;
};

/// Samples from any mix of tasks; row i of `features` is e(x_i).
struct Batch {
  std::vector<std::size_t> task;
  std::vector<int> label;
  Matrix features;

  std::size_t size() const noexcept { return task.size(); }
};

struct LossResult {
  double total = 0.0;
  std::vector<double> per_task;
  ParameterSet grads;
  /// SoftCPT N/A variants: g_t and d_t = dL/dS_t (flattened context) per task.
  std::vector<Vec> task_features;
  std::vector<Vec> context_grads;
};

/// softmax(cos(e_x, w_c) / tau) over the rows of `weights`.
Vec predict_probs(const Vec& image_feature, const ClassifierWeights& weights);

/// Multi-task prompt learner. Parameters are passed in explicitly so the same
/// model can evaluate perturbed copies (finite differences, SGD lookahead).
class PromptModel {
 public:
  PromptModel(ModelConfig config, const TextEncoder& encoder, std::vector<TaskText> texts);

  const ModelConfig& config() const noexcept { return config_; }
  const TextEncoder& encoder() const noexcept { return *encoder_; }
  std::size_t task_count() const noexcept { return texts_.size(); }
  std::size_t class_count(std::size_t task) const { return texts_.at(task).class_tokens.size(); }
  std::size_t total_classes() const noexcept { return class_offsets_.back(); }
  std::size_t global_class(std::size_t task, std::size_t c) const {
    return class_offsets_.at(task) + c;
  }
  const MetaNetSpec& metanet_spec() const noexcept { return meta_spec_; }

  /// Fresh parameters; non-learnable state (batch-norm statistics) goes to `buffers`.
  ParameterSet init_parameters(Rng& rng, ParameterSet& buffers) const;

  TaskContext task_context(const ParameterSet& params) const;
  TaskFeature task_feature(const ParameterSet& params, std::size_t task) const;

  /// Context prepended to every class of `task`. Not defined for methods with
  /// per-class contexts (CoOp-CS, C* variants).
  Matrix task_prompt_context(const ParameterSet& params, const ParameterSet& buffers,
                             std::size_t task) const;

  ClassifierWeights class_weights(const ParameterSet& params, const ParameterSet& buffers,
                                  std::size_t task) const;

  /// Summed cross-entropy of the batch, grouped per task, and its gradient
  /// with respect to every learnable tensor. Batch-norm statistics are taken
  /// from this batch and stored in `buffers`. `class_sampler` is consulted
  /// only when class sampling is active.
  LossResult loss_and_grad(const ParameterSet& params, ParameterSet& buffers, const Batch& batch,
                           Rng* class_sampler = nullptr) const;

  /// Forward-only value of loss_and_grad (same batch statistics).
  double loss(const ParameterSet& params, ParameterSet& buffers, const Batch& batch) const;

 private:
  LossResult run(const ParameterSet& params, ParameterSet& buffers, const Batch& batch,
                 Rng* class_sampler, bool want_grads) const;

  ModelConfig config_;
  const TextEncoder* encoder_;
  std::vector<TaskText> texts_;
  std::vector<std::size_t> class_offsets_;
  MetaNetSpec meta_spec_;
};

}  // namespace softcpt
