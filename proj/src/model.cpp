#include "softcpt/model.hpp"

#include <algorithm>
#include <cmath>

namespace softcpt {

void ModelConfig::validate() const {
  if (L < 1) throw InvalidArgument("prompt context length L must be at least 1");
  if (M < 0) throw InvalidArgument("task context length M must be non-negative");
  if (uses_class_features(method) && K < 1) {
    throw InvalidArgument("class context length K must be at least 1 for C* variants");
  }
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  if (!(class_sampling_fraction > 0.0 && class_sampling_fraction <= 1.0)) {
    throw InvalidArgument("class sampling fraction must lie in (0, 1]");
  }
  if (reduction < 1) throw InvalidArgument("reduction ratio must be positive");
}

Vec predict_probs(const Vec& image_feature, const ClassifierWeights& weights) {
  if (image_feature.size() != weights.rows.cols()) {
    throw ShapeError("predict_probs: image feature width " + std::to_string(image_feature.size()) +
                     ", classifier width " + std::to_string(weights.rows.cols()));
  }
  if (!(weights.tau > 0.0)) throw InvalidArgument("predict_probs: temperature must be positive");
  const Vec x = l2_normalize(image_feature);
  return softmax(Vec(weights.rows * x / weights.tau));
}

PromptModel::PromptModel(ModelConfig config, const TextEncoder& encoder,
                         std::vector<TaskText> texts)
    : config_(config), encoder_(&encoder), texts_(std::move(texts)) {
  config_.validate();
  if (texts_.empty()) throw InvalidArgument("PromptModel needs at least one task");
  const int d = encoder.spec().d_embed;
  class_offsets_.push_back(0);
  for (const TaskText& t : texts_) {
    if (t.task_tokens.rows() < 1 || t.task_tokens.cols() != d) {
      throw ShapeError("task-name tokens must be non-empty rows of width d_embed");
    }
    if (t.class_tokens.size() < 2) throw DatasetError("every task needs at least two classes");
    for (const TokenSequence& c : t.class_tokens) {
      if (c.rows() < 1 || c.cols() != d) {
        throw ShapeError("class-name tokens must be non-empty rows of width d_embed");
      }
    }
    class_offsets_.push_back(class_offsets_.back() + t.class_tokens.size());
  }
  meta_spec_.body = config_.body;
  meta_spec_.reduction = config_.reduction;
  meta_spec_.d_in = encoder.spec().d_txt * (uses_class_features(config_.method) ? 2 : 1);
  meta_spec_.d_embed = d;
  meta_spec_.length = config_.L;
  if (is_softcpt(config_.method)) meta_spec_.validate();
}

ParameterSet PromptModel::init_parameters(Rng& rng, ParameterSet& buffers) const {
  ParameterSet p;
  const int d = encoder_->spec().d_embed;
  switch (config_.method) {
    case Method::coop_ca:
      for (std::size_t t = 0; t < task_count(); ++t) {
        p.set(names::prompt_context_task(t), init_context(config_.L, d, rng));
      }
      return p;
    case Method::coop_cs:
      for (std::size_t c = 0; c < total_classes(); ++c) {
        p.set(names::prompt_context_class(c), init_context(config_.L, d, rng));
      }
      return p;
    case Method::coop_mt:
      p.set(names::prompt_context_shared(), init_context(config_.L, d, rng));
      return p;
    default:
      break;
  }
  init_metanet(meta_spec_, rng, p, buffers);
  if (config_.M > 0) {
    if (task_specific_task_context(config_.method)) {
      for (std::size_t t = 0; t < task_count(); ++t) {
        p.set(names::task_context(t), init_context(config_.M, d, rng));
      }
    } else {
      p.set(names::task_context_shared(), init_context(config_.M, d, rng));
    }
  }
  if (uses_class_features(config_.method)) {
    if (class_specific_class_context(config_.method)) {
      for (std::size_t c = 0; c < total_classes(); ++c) {
        p.set(names::class_context(c), init_context(config_.K, d, rng));
      }
    } else {
      p.set(names::class_context_shared(), init_context(config_.K, d, rng));
    }
  }
  return p;
}

TaskContext PromptModel::task_context(const ParameterSet& params) const {
  TaskContext ctx;
  if (config_.M == 0) {
    ctx.blocks.emplace_back(0, encoder_->spec().d_embed);
    return ctx;
  }
  if (task_specific_task_context(config_.method)) {
    ctx.owner = ContextOwner::per_owner;
    for (std::size_t t = 0; t < task_count(); ++t) ctx.blocks.push_back(params.at(names::task_context(t)));
  } else {
    ctx.blocks.push_back(params.at(names::task_context_shared()));
  }
  return ctx;
}

TaskFeature PromptModel::task_feature(const ParameterSet& params, std::size_t task) const {
  if (!is_softcpt(config_.method)) throw ContractError("task features exist only for SoftCPT");
  return softcpt::task_feature(task_context(params), texts_.at(task).task_tokens, task, *encoder_);
}

namespace {

std::string task_context_name(Method m, std::size_t task) {
  return task_specific_task_context(m) ? names::task_context(task) : names::task_context_shared();
}

std::string class_context_name(Method m, std::size_t global_class) {
  return class_specific_class_context(m) ? names::class_context(global_class)
                                         : names::class_context_shared();
}

struct ClassFeature {
  Vec h;
  Vec raw;
  TextEncoder::Tape tape;
};

ClassFeature class_feature(const Matrix& class_ctx, const TokenSequence& tokens,
                           const TextEncoder& enc) {
  ClassFeature f;
  f.raw = enc.forward(build_class_prompt(class_ctx, tokens), f.tape);
  f.h = l2_normalize(f.raw);
  return f;
}

}  // namespace

Matrix PromptModel::task_prompt_context(const ParameterSet& params, const ParameterSet& buffers,
                                        std::size_t task) const {
  if (task >= task_count()) throw InvalidArgument("task index out of range");
  switch (config_.method) {
    case Method::coop_ca: return params.at(names::prompt_context_task(task));
    case Method::coop_mt: return params.at(names::prompt_context_shared());
    case Method::coop_cs: throw ContractError("CoOp-CS has no per-task prompt context");
    default: break;
  }
  if (uses_class_features(config_.method)) {
    throw ContractError("C* variants generate one context per class, not per task");
  }
  const TaskFeature f = task_feature(params, task);
  ParameterSet scratch = buffers;
  const Matrix out = metanet_forward(meta_spec_, params, scratch, f.g.transpose(), false);
  return reshape(out.row(0).transpose(), config_.L, encoder_->spec().d_embed);
}

ClassifierWeights PromptModel::class_weights(const ParameterSet& params, const ParameterSet& buffers,
                                             std::size_t task) const {
  if (task >= task_count()) throw InvalidArgument("task index out of range");
  const TaskText& text = texts_[task];
  const std::size_t n = text.class_tokens.size();
  const int d = encoder_->spec().d_embed;
  ClassifierWeights w;
  w.tau = config_.tau;
  w.rows.resize(static_cast<Eigen::Index>(n), encoder_->spec().d_txt);

  std::vector<Matrix> contexts(n);
  if (config_.method == Method::coop_cs) {
    for (std::size_t c = 0; c < n; ++c) {
      contexts[c] = params.at(names::prompt_context_class(global_class(task, c)));
    }
  } else if (uses_class_features(config_.method)) {
    const TaskFeature tf = task_feature(params, task);
    const Eigen::Index d_txt = encoder_->spec().d_txt;
    Matrix inputs(static_cast<Eigen::Index>(n), 2 * d_txt);
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t gc = global_class(task, c);
      const ClassFeature cf =
          class_feature(params.at(class_context_name(config_.method, gc)), text.class_tokens[c], *encoder_);
      inputs.row(static_cast<Eigen::Index>(c)) = augment_task_feature(tf.g, cf.h).transpose();
    }
    ParameterSet scratch = buffers;
    const Matrix out = metanet_forward(meta_spec_, params, scratch, inputs, false);
    for (std::size_t c = 0; c < n; ++c) {
      contexts[c] = reshape(out.row(static_cast<Eigen::Index>(c)).transpose(), config_.L, d);
    }
  } else {
    const Matrix shared = task_prompt_context(params, buffers, task);
    for (std::size_t c = 0; c < n; ++c) contexts[c] = shared;
  }

  for (std::size_t c = 0; c < n; ++c) {
    const Vec raw = encoder_->encode(build_class_prompt(contexts[c], text.class_tokens[c]));
    w.rows.row(static_cast<Eigen::Index>(c)) = l2_normalize(raw).transpose();
  }
  return w;
}

LossResult PromptModel::loss_and_grad(const ParameterSet& params, ParameterSet& buffers,
                                      const Batch& batch, Rng* class_sampler) const {
  return run(params, buffers, batch, class_sampler, true);
}

double PromptModel::loss(const ParameterSet& params, ParameterSet& buffers, const Batch& batch) const {
  return run(params, buffers, batch, nullptr, false).total;
}

LossResult PromptModel::run(const ParameterSet& params, ParameterSet& buffers, const Batch& batch,
                            Rng* class_sampler, bool want_grads) const {
  const std::size_t T = task_count();
  const int d = encoder_->spec().d_embed;
  const Eigen::Index d_txt = encoder_->spec().d_txt;
  const Method method = config_.method;

  if (batch.task.size() != batch.label.size() ||
      batch.features.rows() != static_cast<Eigen::Index>(batch.task.size())) {
    throw ShapeError("batch: task, label, and feature counts differ");
  }
  if (batch.size() > 0 && batch.features.cols() != d_txt) {
    throw ShapeError("batch: image feature width " + std::to_string(batch.features.cols()) +
                     ", expected " + std::to_string(d_txt));
  }
  std::vector<char> present(T, 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t t = batch.task[i];
    if (t >= T) throw DatasetError("sample task index out of range");
    if (batch.label[i] < 0 || static_cast<std::size_t>(batch.label[i]) >= class_count(t)) {
      throw DatasetError("label " + std::to_string(batch.label[i]) + " out of range for task " +
                         std::to_string(t));
    }
    present[t] = 1;
  }

  // Classes scored per task. C* variants may subsample to bound memory; the
  // labels present in the batch are always kept.
  std::vector<std::vector<std::size_t>> subset(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (!present[t]) continue;
    const std::size_t n = class_count(t);
    const bool sample = uses_class_features(method) && config_.class_sampling_fraction < 1.0;
    if (!sample) {
      for (std::size_t c = 0; c < n; ++c) subset[t].push_back(c);
      continue;
    }
    if (class_sampler == nullptr) throw InvalidArgument("class sampling requires an Rng");
    const auto need = static_cast<std::size_t>(std::ceil(config_.class_sampling_fraction * n));
    std::vector<char> keep(n, 0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (batch.task[i] == t) keep[static_cast<std::size_t>(batch.label[i])] = 1;
    }
    std::vector<std::size_t> rest;
    for (std::size_t c = 0; c < n; ++c) {
      if (!keep[c]) rest.push_back(c);
    }
    class_sampler->shuffle(std::span<std::size_t>(rest));
    std::size_t kept = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1));
    for (std::size_t c : rest) {
      if (kept >= need) break;
      keep[c] = 1;
      ++kept;
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (keep[c]) subset[t].push_back(c);
    }
  }

  // Context slots: one per distinct prompt context this batch needs.
  struct Slot {
    Matrix ctx;
    std::string param;  // empty for generated contexts
  };
  std::vector<Slot> slots;
  std::vector<std::vector<int>> slot_of(T);
  for (std::size_t t = 0; t < T; ++t) slot_of[t].assign(class_count(t), -1);

  std::vector<TaskFeature> task_feats(T);
  std::vector<char> have_task_feat(T, 0);
  struct MetaRow {
    std::size_t task;
    std::size_t cls;  // local class; unused for N/A variants
  };
  std::vector<MetaRow> meta_rows;
  std::vector<ClassFeature> class_feats;
  MetaNetTape meta_tape;

  if (!is_softcpt(method)) {
    if (method == Method::coop_mt) {
      slots.push_back({params.at(names::prompt_context_shared()), names::prompt_context_shared()});
    }
    for (std::size_t t = 0; t < T; ++t) {
      if (!present[t]) continue;
      if (method == Method::coop_ca) {
        const std::string name = names::prompt_context_task(t);
        slots.push_back({params.at(name), name});
      }
      for (std::size_t c : subset[t]) {
        if (method == Method::coop_cs) {
          const std::string name = names::prompt_context_class(global_class(t, c));
          slots.push_back({params.at(name), name});
        }
        slot_of[t][c] = static_cast<int>(slots.size()) - 1;
      }
    }
    if (method == Method::coop_mt) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c : subset[t]) slot_of[t][c] = 0;
      }
    }
  } else {
    const TaskContext tctx = task_context(params);
    const bool with_classes = uses_class_features(method);
    for (std::size_t t = 0; t < T; ++t) {
      // N/A variants feed every task so batch statistics see the whole task set.
      if (with_classes && !present[t]) continue;
      task_feats[t] = softcpt::task_feature(tctx, texts_[t].task_tokens, t, *encoder_);
      have_task_feat[t] = 1;
      if (!with_classes) {
        meta_rows.push_back({t, 0});
        continue;
      }
      for (std::size_t c : subset[t]) {
        meta_rows.push_back({t, c});
        class_feats.push_back(class_feature(params.at(class_context_name(method, global_class(t, c))),
                                            texts_[t].class_tokens[c], *encoder_));
      }
    }
    Matrix meta_in(static_cast<Eigen::Index>(meta_rows.size()), meta_spec_.d_in);
    for (std::size_t r = 0; r < meta_rows.size(); ++r) {
      const Vec& g = task_feats[meta_rows[r].task].g;
      if (with_classes) {
        meta_in.row(static_cast<Eigen::Index>(r)) = augment_task_feature(g, class_feats[r].h).transpose();
      } else {
        meta_in.row(static_cast<Eigen::Index>(r)) = g.transpose();
      }
    }
    const Matrix meta_out = metanet_forward(meta_spec_, params, buffers, meta_in, true, &meta_tape);
    for (std::size_t r = 0; r < meta_rows.size(); ++r) {
      slots.push_back({reshape(meta_out.row(static_cast<Eigen::Index>(r)).transpose(), config_.L, d), {}});
      const std::size_t t = meta_rows[r].task;
      if (with_classes) {
        slot_of[t][meta_rows[r].cls] = static_cast<int>(r);
      } else {
        for (std::size_t c : subset[t]) slot_of[t][c] = static_cast<int>(r);
      }
    }
  }

  // Classifier weights for every scored (task, class).
  struct ClassPrompt {
    Vec raw;
    Vec w;
    Vec dw;
    TextEncoder::Tape tape;
    int slot = -1;
  };
  std::vector<std::vector<int>> prompt_of(T);
  std::vector<ClassPrompt> prompts;
  for (std::size_t t = 0; t < T; ++t) {
    prompt_of[t].assign(class_count(t), -1);
    for (std::size_t c : subset[t]) {
      ClassPrompt cp;
      cp.slot = slot_of[t][c];
      const Slot& slot = slots[static_cast<std::size_t>(cp.slot)];
      cp.raw = encoder_->forward(build_class_prompt(slot.ctx, texts_[t].class_tokens[c]), cp.tape);
      cp.w = l2_normalize(cp.raw);
      cp.dw = Vec::Zero(d_txt);
      prompt_of[t][c] = static_cast<int>(prompts.size());
      prompts.push_back(std::move(cp));
    }
  }

  LossResult result;
  result.per_task.assign(T, 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t t = batch.task[i];
    const auto& classes = subset[t];
    const Vec x = l2_normalize(Vec(batch.features.row(static_cast<Eigen::Index>(i)).transpose()));
    Vec logits(static_cast<Eigen::Index>(classes.size()));
    Eigen::Index target = -1;
    for (std::size_t j = 0; j < classes.size(); ++j) {
      const ClassPrompt& cp = prompts[static_cast<std::size_t>(prompt_of[t][classes[j]])];
      logits(static_cast<Eigen::Index>(j)) = cp.w.dot(x) / config_.tau;
      if (static_cast<int>(classes[j]) == batch.label[i]) target = static_cast<Eigen::Index>(j);
    }
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    result.per_task[t] += lse - logits(target);
    if (want_grads) {
      Vec dz = (logits.array() - lse).exp().matrix();
      dz(target) -= 1.0;
      for (std::size_t j = 0; j < classes.size(); ++j) {
        prompts[static_cast<std::size_t>(prompt_of[t][classes[j]])].dw +=
            dz(static_cast<Eigen::Index>(j)) * x / config_.tau;
      }
    }
  }
  for (std::size_t t = 0; t < T; ++t) result.total += result.per_task[t];
  if (!want_grads) return result;

  std::vector<Matrix> d_slot(slots.size());
  for (std::size_t s = 0; s < slots.size(); ++s) d_slot[s] = Matrix::Zero(config_.L, d);
  for (const ClassPrompt& cp : prompts) {
    const Vec d_raw = l2_normalize_vjp(cp.raw, cp.dw);
    const TokenSequence d_seq = encoder_->backward(cp.tape, d_raw);
    d_slot[static_cast<std::size_t>(cp.slot)] += d_seq.topRows(config_.L);
  }

  if (!is_softcpt(method)) {
    for (std::size_t s = 0; s < slots.size(); ++s) result.grads.accumulate(slots[s].param, d_slot[s]);
    return result;
  }

  Matrix d_out(static_cast<Eigen::Index>(meta_rows.size()), meta_spec_.d_out());
  for (std::size_t r = 0; r < meta_rows.size(); ++r) {
    d_out.row(static_cast<Eigen::Index>(r)) = flatten(d_slot[r]).transpose();
  }
  const Matrix d_in = metanet_backward(meta_spec_, params, meta_tape, d_out, result.grads);

  const bool with_classes = uses_class_features(method);
  std::vector<Vec> d_task(T, Vec::Zero(d_txt));
  for (std::size_t r = 0; r < meta_rows.size(); ++r) {
    const auto row = d_in.row(static_cast<Eigen::Index>(r));
    const std::size_t t = meta_rows[r].task;
    d_task[t] += row.head(d_txt).transpose();
    if (with_classes) {
      const ClassFeature& cf = class_feats[r];
      const Vec d_raw = l2_normalize_vjp(cf.raw, Vec(row.tail(d_txt).transpose()));
      const TokenSequence d_seq = encoder_->backward(cf.tape, d_raw);
      result.grads.accumulate(class_context_name(method, global_class(t, meta_rows[r].cls)),
                              d_seq.topRows(config_.K));
    }
  }
  const bool learn_task_ctx = config_.M > 0 && !config_.freeze_task_context;
  for (std::size_t t = 0; t < T; ++t) {
    if (!have_task_feat[t] || !learn_task_ctx) continue;
    result.grads.accumulate(task_context_name(method, t),
                            task_feature_vjp(task_feats[t], *encoder_, d_task[t], config_.M));
  }

  if (!with_classes) {
    result.task_features.resize(T);
    result.context_grads.resize(T);
    for (std::size_t r = 0; r < meta_rows.size(); ++r) {
      result.task_features[meta_rows[r].task] = task_feats[meta_rows[r].task].g;
      result.context_grads[meta_rows[r].task] = d_out.row(static_cast<Eigen::Index>(r)).transpose();
    }
  }
  return result;
}

}  // namespace softcpt
