#pragma once

#include <cstddef>
#include <string_view>

#include "softcpt/encoder.hpp"
#include "softcpt/params.hpp"
#include "softcpt/prompt.hpp"
#include "softcpt/rng.hpp"

namespace softcpt {

enum class SubnetBody { linear, mlp };

const char* to_string(SubnetBody b) noexcept;
SubnetBody parse_body(std::string_view name);

/// Sub-network mapping a meta input of width d_in to L context tokens.
///
/// Linear: Y = X W with W of shape d_in x (d_embed*L), no bias.
/// MLP: Y = relu(BN(X W1)) W2, hidden width d_in / reduction; batch
/// statistics are taken over the rows of X in training mode and the last
/// training statistics are reused in evaluation mode.
struct MetaNetSpec {
  SubnetBody body = SubnetBody::linear;
  int reduction = 1;
  int d_in = 0;
  int d_embed = 0;
  int length = 0;  // L

  int hidden() const noexcept { return d_in / reduction; }
  int d_out() const noexcept { return d_embed * length; }
  void validate() const;
};

namespace names {
inline std::string meta_w() { return "meta/W"; }
inline std::string meta_w1() { return "meta/W1"; }
inline std::string meta_w2() { return "meta/W2"; }
inline std::string meta_bn_gamma() { return "meta/bn_gamma"; }
inline std::string meta_bn_beta() { return "meta/bn_beta"; }
inline std::string meta_bn_mean() { return "meta/bn_mean"; }
inline std::string meta_bn_var() { return "meta/bn_var"; }
}  // namespace names

void init_metanet(const MetaNetSpec& spec, Rng& rng, ParameterSet& params,
                  ParameterSet& buffers);

struct MetaNetTape {
  Matrix inputs;
  Matrix hidden_normed;  // BN output before affine
  Matrix activated;      // relu output
  Matrix preact;         // gamma*normed + beta
  Eigen::RowVectorXd inv_std;
  bool training = true;
};

/// Rows of `inputs` are meta inputs; rows of the result are flattened contexts.
/// In training mode the batch statistics are written to `buffers`.
Matrix metanet_forward(const MetaNetSpec& spec, const ParameterSet& params,
                       ParameterSet& buffers, const Matrix& inputs, bool training,
                       MetaNetTape* tape = nullptr);

/// Accumulates parameter gradients into `grads`; returns dL/dinputs.
Matrix metanet_backward(const MetaNetSpec& spec, const ParameterSet& params,
                        const MetaNetTape& tape, const Matrix& d_outputs, ParameterSet& grads);

/// Reshape(W^T g): chunk l of W^T g is token l of the generated context.
Matrix generate_context(const Vec& meta_input, const Matrix& w, int length);

/// Unit task feature g_t together with what its backward pass needs.
struct TaskFeature {
  std::size_t task = 0;
  Vec g;    // unit norm
  Vec raw;  // encoder output before normalization
  TextEncoder::Tape tape;
};

TaskFeature task_feature(const TaskContext& context, const TokenSequence& task_tokens,
                         std::size_t task, const TextEncoder& encoder);
/// Gradient of <g_t, cotangent> with respect to the task context block.
Matrix task_feature_vjp(const TaskFeature& feature, const TextEncoder& encoder,
                        const Vec& cotangent, Eigen::Index context_length);

struct CensusDims {
  std::size_t tasks = 1;
  std::size_t classes = 1;  // total over all tasks
  std::size_t d_txt = 1024;
  std::size_t d_embed = 512;
  std::size_t L = 16;
  std::size_t M = 8;
  std::size_t K = 4;
  SubnetBody body = SubnetBody::linear;
  std::size_t reduction = 1;
};

/// Exact learnable-parameter count of a method; buffers are not counted.
std::size_t param_count(Method method, const CensusDims& dims);

/// Largest singular value by power iteration on W^T W.
double spectral_norm(const Matrix& w, int iterations = 500, std::uint64_t seed = 7);

}  // namespace softcpt
