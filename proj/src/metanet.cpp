#include "softcpt/metanet.hpp"

#include <cmath>

namespace softcpt {

namespace {
constexpr double kBatchNormEps = 1e-5;
}

const char* to_string(SubnetBody b) noexcept { return b == SubnetBody::linear ? "linear" : "mlp"; }

SubnetBody parse_body(std::string_view name) {
  if (name == "linear") return SubnetBody::linear;
  if (name == "mlp") return SubnetBody::mlp;
  throw InvalidArgument("unknown sub-network body '" + std::string(name) + "'");
}

void MetaNetSpec::validate() const {
  if (d_in <= 0 || d_embed <= 0 || length <= 0) {
    throw InvalidArgument("meta network dimensions must be positive");
  }
  if (body == SubnetBody::mlp && (reduction <= 0 || d_in % reduction != 0)) {
    throw InvalidArgument("MLP reduction ratio must divide the input width");
  }
}

void init_metanet(const MetaNetSpec& spec, Rng& rng, ParameterSet& params,
                  ParameterSet& buffers) {
  spec.validate();
  if (spec.body == SubnetBody::linear) {
    params.set(names::meta_w(), init_context(spec.d_in, spec.d_out(), rng));
    return;
  }
  const int h = spec.hidden();
  params.set(names::meta_w1(), init_context(spec.d_in, h, rng));
  params.set(names::meta_bn_gamma(), Matrix::Ones(1, h));
  params.set(names::meta_bn_beta(), Matrix::Zero(1, h));
  params.set(names::meta_w2(), init_context(h, spec.d_out(), rng));
  buffers.set(names::meta_bn_mean(), Matrix::Zero(1, h));
  buffers.set(names::meta_bn_var(), Matrix::Ones(1, h));
}

Matrix metanet_forward(const MetaNetSpec& spec, const ParameterSet& params,
                       ParameterSet& buffers, const Matrix& inputs, bool training,
                       MetaNetTape* tape) {
  if (inputs.cols() != spec.d_in) {
    throw ShapeError("meta network input width " + std::to_string(inputs.cols()) +
                     ", expected " + std::to_string(spec.d_in));
  }
  if (spec.body == SubnetBody::linear) {
    if (tape) {
      tape->inputs = inputs;
      tape->training = training;
    }
    return inputs * params.at(names::meta_w());
  }

  const Matrix hidden = inputs * params.at(names::meta_w1());
  Eigen::RowVectorXd mean, var;
  if (training) {
    mean = hidden.colwise().mean();
    var = (hidden.rowwise() - mean).array().square().colwise().mean();
    buffers.set(names::meta_bn_mean(), mean);
    buffers.set(names::meta_bn_var(), var);
  } else {
    mean = buffers.at(names::meta_bn_mean());
    var = buffers.at(names::meta_bn_var());
  }
  const Eigen::RowVectorXd inv_std = (var.array() + kBatchNormEps).rsqrt().matrix();
  const Matrix normed = ((hidden.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  const Eigen::RowVectorXd gamma = params.at(names::meta_bn_gamma());
  const Eigen::RowVectorXd beta = params.at(names::meta_bn_beta());
  Matrix preact = (normed.array().rowwise() * gamma.array()).matrix();
  preact.rowwise() += beta;
  const Matrix activated = preact.cwiseMax(0.0);
  if (tape) {
    tape->inputs = inputs;
    tape->hidden_normed = normed;
    tape->preact = preact;
    tape->activated = activated;
    tape->inv_std = inv_std;
    tape->training = training;
  }
  return activated * params.at(names::meta_w2());
}

Matrix metanet_backward(const MetaNetSpec& spec, const ParameterSet& params,
                        const MetaNetTape& tape, const Matrix& d_outputs, ParameterSet& grads) {
  if (spec.body == SubnetBody::linear) {
    const Matrix& w = params.at(names::meta_w());
    grads.accumulate(names::meta_w(), tape.inputs.transpose() * d_outputs);
    return d_outputs * w.transpose();
  }

  const Matrix& w1 = params.at(names::meta_w1());
  const Matrix& w2 = params.at(names::meta_w2());
  grads.accumulate(names::meta_w2(), tape.activated.transpose() * d_outputs);
  const Matrix d_act = d_outputs * w2.transpose();
  const Matrix d_pre = (tape.preact.array() > 0.0).select(d_act, 0.0);
  grads.accumulate(names::meta_bn_beta(), d_pre.colwise().sum());
  grads.accumulate(names::meta_bn_gamma(),
                   (d_pre.array() * tape.hidden_normed.array()).colwise().sum().matrix());
  const Eigen::RowVectorXd gamma = params.at(names::meta_bn_gamma());
  const Matrix d_normed = (d_pre.array().rowwise() * gamma.array()).matrix();

  Matrix d_hidden;
  if (tape.training) {
    // Batch statistics depend on every row.
    const double n = static_cast<double>(d_normed.rows());
    const Eigen::RowVectorXd sum_d = d_normed.colwise().sum();
    const Eigen::RowVectorXd sum_dx =
        (d_normed.array() * tape.hidden_normed.array()).colwise().sum().matrix();
    Matrix centered = (d_normed * n).rowwise() - sum_d;
    centered -= (tape.hidden_normed.array().rowwise() * sum_dx.array()).matrix();
    d_hidden = (centered.array().rowwise() * (tape.inv_std.array() / n)).matrix();
  } else {
    d_hidden = (d_normed.array().rowwise() * tape.inv_std.array()).matrix();
  }
  grads.accumulate(names::meta_w1(), tape.inputs.transpose() * d_hidden);
  return d_hidden * w1.transpose();
}

Matrix generate_context(const Vec& meta_input, const Matrix& w, int length) {
  if (meta_input.size() != w.rows()) {
    throw ShapeError("generate_context: input width " + std::to_string(meta_input.size()) +
                     ", W has " + std::to_string(w.rows()) + " rows");
  }
  if (length <= 0 || w.cols() % length != 0) {
    throw ShapeError("generate_context: W columns not divisible by context length");
  }
  const Vec flat = w.transpose() * meta_input;
  return reshape(flat, length, w.cols() / length);
}

TaskFeature task_feature(const TaskContext& context, const TokenSequence& task_tokens,
                         std::size_t task, const TextEncoder& encoder) {
  TaskFeature out;
  out.task = task;
  const TokenSequence seq = build_task_prompt(context, task_tokens, task);
  out.raw = encoder.forward(seq, out.tape);
  out.g = l2_normalize(out.raw);
  return out;
}

Matrix task_feature_vjp(const TaskFeature& feature, const TextEncoder& encoder,
                        const Vec& cotangent, Eigen::Index context_length) {
  const Vec d_raw = l2_normalize_vjp(feature.raw, cotangent);
  const TokenSequence d_seq = encoder.backward(feature.tape, d_raw);
  return d_seq.topRows(context_length);
}

std::size_t param_count(Method method, const CensusDims& d) {
  const std::size_t block = d.L * d.d_embed;
  switch (method) {
    case Method::coop_ca: return d.tasks * block;
    case Method::coop_cs: return d.classes * block;
    case Method::coop_mt: return block;
    default: break;
  }
  const std::size_t d_in = uses_class_features(method) ? 2 * d.d_txt : d.d_txt;
  std::size_t count = 0;
  if (d.body == SubnetBody::linear) {
    count += d_in * block;
  } else {
    const std::size_t hidden = d_in / d.reduction;
    count += d_in * hidden + 2 * hidden + hidden * block;
  }
  const std::size_t task_owners = task_specific_task_context(method) ? d.tasks : 1;
  count += task_owners * d.M * d.d_embed;
  if (uses_class_features(method)) {
    const std::size_t class_owners = class_specific_class_context(method) ? d.classes : 1;
    count += class_owners * d.K * d.d_embed;
  }
  return count;
}

double spectral_norm(const Matrix& w, int iterations, std::uint64_t seed) {
  if (w.size() == 0) return 0.0;
  Rng rng(seed, 0x73706563ull);
  Vec v = rng.gaussian(w.cols(), 1, 1.0);
  double sigma = 0.0;
  for (int i = 0; i < iterations; ++i) {
    const double n = v.norm();
    if (n == 0.0) return 0.0;
    v /= n;
    const Vec wv = w * v;
    sigma = wv.norm();
    v = w.transpose() * wv;
  }
  return sigma;
}

}  // namespace softcpt
