#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "softcpt/tensor.hpp"

namespace softcpt {

enum class Pooling { mean, last_token };

const char* to_string(Pooling p) noexcept;
Pooling parse_pooling(std::string_view name);

/// Architecture of the frozen toy text encoder. The weights are a pure
/// function of this struct.
struct EncoderSpec {
  int d_embed = 32;
  int d_txt = 64;
  int depth = 2;
  int heads = 2;
  Pooling pooling = Pooling::mean;
  std::uint64_t weight_seed = 0;
  int vocab_size = 49408;

  void validate() const;
  bool operator==(const EncoderSpec&) const = default;
};

/// One row per token, each of width d_embed.
using TokenSequence = Matrix;

/// Lowercased whitespace tokenization.
std::vector<std::string> tokenize(std::string_view text);

std::size_t vocab_slot(std::string_view token, int vocab_size) noexcept;

/// Embeds each token as a frozen pseudo-random vector keyed on its vocabulary
/// slot, so equal text always maps to the same sequence.
TokenSequence tokenize_and_embed(std::string_view text, const EncoderSpec& spec,
                                 std::uint64_t embed_seed);

/// Frozen pre-norm transformer g(.) that pools its last layer into a d_txt
/// feature. Depth 0 degenerates to a linear projection of the pooled tokens
/// (no positions, no final normalization).
///
/// Layer: x += MHA(LN(x)); x += W2 tanh(W1 LN(x) + b1) + b2. Attention is
/// bidirectional. Sinusoidal positions are added to the input when depth > 0.
/// Output: P^T LN(pool(x)).
class TextEncoder {
 public:
  struct LayerTape {
    Matrix x_in, a, q, k, v, attn, x_mid, b, z;
    std::vector<Matrix> probs;
    Vec inv_std1, inv_std2;
  };
  /// Forward intermediates needed by backward().
  struct Tape {
    Eigen::Index length = 0;
    std::vector<LayerTape> layers;
    Vec pooled;
    Vec pooled_normed;
    double pooled_inv_std = 1.0;
  };

  explicit TextEncoder(EncoderSpec spec);

  const EncoderSpec& spec() const noexcept { return spec_; }

  Vec encode(const TokenSequence& seq) const;
  Vec forward(const TokenSequence& seq, Tape& tape) const;
  /// Gradient of <encode(seq), cotangent> with respect to every input token.
  TokenSequence backward(const Tape& tape, const Vec& cotangent) const;
  TokenSequence encode_vjp(const TokenSequence& seq, const Vec& cotangent) const;

  /// Hash of all weight bytes; unchanged for the encoder's lifetime.
  std::uint64_t weights_fingerprint() const;

  static double positional_scale() noexcept { return 0.1; }
  Matrix positional_encoding(Eigen::Index length) const;

 private:
  struct Layer {
    Matrix wq, wk, wv, wo, w1, w2;
    Eigen::RowVectorXd b1, b2;
  };

  void check_input(const TokenSequence& seq) const;

  EncoderSpec spec_;
  std::vector<Layer> layers_;
  Matrix proj_;  // d_embed x d_txt
};

}  // namespace softcpt
