#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

#include "softcpt/model.hpp"

namespace softcpt {

enum class BatchMode { uniform, round_robin };

const char* to_string(BatchMode m) noexcept;
BatchMode parse_batch_mode(std::string_view name);

struct TrainConfig {
  double lr0 = 0.002;
  int epochs = 50;
  int batch_size = 32;
  std::uint64_t seed = 1;
  BatchMode batching = BatchMode::uniform;

  void validate() const;
};

/// 0.5 * lr0 * (1 + cos(pi * step / total_steps)), stepped per iteration.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

/// One epoch: uniform mode shuffles the union of all tasks and cuts it into
/// batches; round-robin mode cuts each task separately and interleaves them.
std::vector<Batch> make_batches(const Batch& joint, int batch_size, Rng& rng,
                                BatchMode mode = BatchMode::uniform);

Batch select_rows(const Batch& joint, std::span<const std::size_t> rows);

/// Plain SGD: p <- p - lr * g for every tensor that has a gradient.
void sgd_step(ParameterSet& params, const ParameterSet& grads, double lr);

struct StepLog {
  int run = -1;  // task index for per-task runs, -1 for joint runs
  std::size_t step = 0;
  double lr = 0.0;
  std::vector<double> per_task;
  double total = 0.0;
};

struct TrainResult {
  ParameterSet initial;
  ParameterSet params;
  ParameterSet buffers;
  std::vector<StepLog> log;
};

/// Trains a model on the joint training set. CoOp-CA and CoOp-CS train each
/// task independently (own batches, own schedule); the other methods train
/// jointly. Throws NumericalError on a non-finite loss.
TrainResult train(const PromptModel& model, const TrainConfig& config, const Batch& train_set);

/// Tab-separated: step, lr, one loss column per task, total. Steps are
/// numbered globally when per-task runs follow each other.
void write_train_log(std::ostream& os, const std::vector<StepLog>& log, std::size_t task_count);

}  // namespace softcpt
