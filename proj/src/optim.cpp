#include "softcpt/optim.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <ostream>

namespace softcpt {

namespace {
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kBatchStream = 2;
constexpr std::uint64_t kClassSampleStream = 3;
}  // namespace

const char* to_string(BatchMode m) noexcept {
  return m == BatchMode::uniform ? "uniform" : "round-robin";
}

BatchMode parse_batch_mode(std::string_view name) {
  if (name == "uniform") return BatchMode::uniform;
  if (name == "round-robin") return BatchMode::round_robin;
  throw InvalidArgument("unknown batching mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw InvalidArgument("lr0 must be finite and >= 0");
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
  if (batch_size < 1) throw InvalidArgument("batch size must be positive");
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) return lr0;
  if (step > total_steps) throw InvalidArgument("cosine_lr: step beyond schedule");
  const double ratio = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * ratio));
}

Batch select_rows(const Batch& joint, std::span<const std::size_t> rows) {
  Batch b;
  b.features.resize(static_cast<Eigen::Index>(rows.size()), joint.features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    b.task.push_back(joint.task[rows[i]]);
    b.label.push_back(joint.label[rows[i]]);
    b.features.row(static_cast<Eigen::Index>(i)) = joint.features.row(static_cast<Eigen::Index>(rows[i]));
  }
  return b;
}

std::vector<Batch> make_batches(const Batch& joint, int batch_size, Rng& rng, BatchMode mode) {
  if (joint.size() == 0) throw DatasetError("make_batches: empty training set");
  if (batch_size < 1) throw InvalidArgument("make_batches: batch size must be positive");
  const auto bs = static_cast<std::size_t>(batch_size);
  std::vector<std::vector<std::size_t>> chunks;

  if (mode == BatchMode::uniform) {
    std::vector<std::size_t> order(joint.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i = 0; i < order.size(); i += bs) {
      chunks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + bs)));
    }
  } else {
    std::size_t tasks = 0;
    for (std::size_t t : joint.task) tasks = std::max(tasks, t + 1);
    std::vector<std::vector<std::size_t>> per_task(tasks);
    for (std::size_t i = 0; i < joint.size(); ++i) per_task[joint.task[i]].push_back(i);
    std::vector<std::vector<std::vector<std::size_t>>> task_chunks(tasks);
    for (std::size_t t = 0; t < tasks; ++t) {
      rng.shuffle(std::span<std::size_t>(per_task[t]));
      for (std::size_t i = 0; i < per_task[t].size(); i += bs) {
        task_chunks[t].emplace_back(
            per_task[t].begin() + static_cast<std::ptrdiff_t>(i),
            per_task[t].begin() + static_cast<std::ptrdiff_t>(std::min(per_task[t].size(), i + bs)));
      }
    }
    for (std::size_t round = 0;; ++round) {
      bool any = false;
      for (std::size_t t = 0; t < tasks; ++t) {
        if (round < task_chunks[t].size()) {
          chunks.push_back(task_chunks[t][round]);
          any = true;
        }
      }
      if (!any) break;
    }
  }

  std::vector<Batch> out;
  out.reserve(chunks.size());
  for (const auto& c : chunks) out.push_back(select_rows(joint, c));
  return out;
}

void sgd_step(ParameterSet& params, const ParameterSet& grads, double lr) {
  for (const auto& [name, g] : grads) {
    Matrix& p = params.at(name);
    if (p.rows() != g.rows() || p.cols() != g.cols()) {
      throw ShapeError("sgd_step: gradient shape mismatch for '" + name + "'");
    }
    p -= lr * g;
  }
}

namespace {

void train_run(const PromptModel& model, const TrainConfig& config, const Batch& data, int run,
               std::uint64_t batch_stream, TrainResult& result) {
  Rng batch_rng(config.seed, batch_stream);
  Rng class_rng(config.seed, kClassSampleStream + batch_stream);
  const std::size_t per_epoch = (data.size() + static_cast<std::size_t>(config.batch_size) - 1) /
                                static_cast<std::size_t>(config.batch_size);
  const std::size_t total = per_epoch * static_cast<std::size_t>(config.epochs);
  std::size_t step = 0;
  const std::size_t base = result.log.size();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (const Batch& batch : make_batches(data, config.batch_size, batch_rng, config.batching)) {
      const double lr = cosine_lr(step, total, config.lr0);
      LossResult r = model.loss_and_grad(result.params, result.buffers, batch, &class_rng);
      if (!std::isfinite(r.total)) {
        throw NumericalError("non-finite loss at step " + std::to_string(step) +
                             (run >= 0 ? " of task run " + std::to_string(run) : std::string()));
      }
      sgd_step(result.params, r.grads, lr);
      result.log.push_back({run, base + step, lr, std::move(r.per_task), r.total});
      ++step;
    }
  }
}

}  // namespace

TrainResult train(const PromptModel& model, const TrainConfig& config, const Batch& train_set) {
  config.validate();
  if (train_set.size() == 0) throw DatasetError("train: empty training set");
  TrainResult result;
  Rng init_rng(config.seed, kInitStream);
  result.params = model.init_parameters(init_rng, result.buffers);
  result.initial = result.params;

  const Method m = model.config().method;
  if (m == Method::coop_ca || m == Method::coop_cs) {
    for (std::size_t t = 0; t < model.task_count(); ++t) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < train_set.size(); ++i) {
        if (train_set.task[i] == t) rows.push_back(i);
      }
      if (rows.empty()) continue;
      train_run(model, config, select_rows(train_set, rows), static_cast<int>(t),
                kBatchStream + 16 * (t + 1), result);
    }
  } else {
    train_run(model, config, train_set, -1, kBatchStream, result);
  }
  if (!result.params.all_finite()) throw NumericalError("training produced non-finite parameters");
  return result;
}

void write_train_log(std::ostream& os, const std::vector<StepLog>& log, std::size_t task_count) {
  os << "# step\tlr";
  for (std::size_t t = 0; t < task_count; ++t) os << "\tloss_task" << t;
  os << "\ttotal\n";
  char buf[64];
  for (const StepLog& s : log) {
    os << s.step;
    std::snprintf(buf, sizeof buf, "\t%.9g", s.lr);
    os << buf;
    for (std::size_t t = 0; t < task_count; ++t) {
      std::snprintf(buf, sizeof buf, "\t%.9g", t < s.per_task.size() ? s.per_task[t] : 0.0);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "\t%.9g\n", s.total);
    os << buf;
  }
}

}  // namespace softcpt
