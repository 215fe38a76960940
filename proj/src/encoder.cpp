#include "softcpt/encoder.hpp"

#include <cctype>
#include <cmath>
#include <cstring>

#include "softcpt/rng.hpp"

namespace softcpt {

namespace {

constexpr double kLayerNormEps = 1e-5;
// Inputs well above context-init scale keep the input layer norm from
// amplifying context gradients under the summed loss.
constexpr double kTokenEmbeddingStd = 0.2;
constexpr std::uint64_t kWeightStream = 0x656e636f646572ull;  // "encoder"
constexpr std::uint64_t kVocabStreamBase = 0x766f636162ull << 24;

// Row-wise layer norm without affine parameters; returns 1/std per row.
Vec layer_norm_rows(const Matrix& x, Matrix& y) {
  y.resize(x.rows(), x.cols());
  Vec inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    y.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  return inv_std;
}

Matrix layer_norm_rows_vjp(const Matrix& y, const Vec& inv_std, const Matrix& dy) {
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_dy = dy.row(r).mean();
    const double mean_dyy = dy.row(r).dot(y.row(r)) / static_cast<double>(dy.cols());
    dx.row(r) = inv_std(r) * (dy.row(r).array() - mean_dy - y.row(r).array() * mean_dyy);
  }
  return dx;
}

}  // namespace

const char* to_string(Pooling p) noexcept {
  return p == Pooling::mean ? "mean" : "last-token";
}

Pooling parse_pooling(std::string_view name) {
  if (name == "mean") return Pooling::mean;
  if (name == "last-token" || name == "last") return Pooling::last_token;
  throw InvalidArgument("unknown pooling mode '" + std::string(name) + "'");
}

void EncoderSpec::validate() const {
  if (d_embed <= 0 || d_txt <= 0) throw InvalidArgument("encoder widths must be positive");
  if (depth < 0) throw InvalidArgument("encoder depth must be non-negative");
  if (depth > 0 && (heads <= 0 || d_embed % heads != 0)) {
    throw InvalidArgument("attention heads must divide d_embed");
  }
  if (vocab_size <= 0) throw InvalidArgument("vocabulary size must be positive");
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::size_t vocab_slot(std::string_view token, int vocab_size) noexcept {
  return static_cast<std::size_t>(fnv1a64(token) % static_cast<std::uint64_t>(vocab_size));
}

TokenSequence tokenize_and_embed(std::string_view text, const EncoderSpec& spec,
                                 std::uint64_t embed_seed) {
  spec.validate();
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw DegenerateInputError("tokenize_and_embed: empty text");
  TokenSequence seq(static_cast<Eigen::Index>(tokens.size()), spec.d_embed);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    // Each slot owns its own Philox stream, so the table is never materialized.
    Rng rng(embed_seed, kVocabStreamBase + vocab_slot(tokens[i], spec.vocab_size));
    seq.row(static_cast<Eigen::Index>(i)) = rng.gaussian(1, spec.d_embed, kTokenEmbeddingStd);
  }
  return seq;
}

TextEncoder::TextEncoder(EncoderSpec spec) : spec_(spec) {
  spec_.validate();
  Rng rng(spec_.weight_seed, kWeightStream);
  const int d = spec_.d_embed;
  const int hidden = 4 * d;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < spec_.depth; ++l) {
    Layer layer;
    layer.wq = rng.gaussian(d, d, s);
    layer.wk = rng.gaussian(d, d, s);
    layer.wv = rng.gaussian(d, d, s);
    layer.wo = rng.gaussian(d, d, s);
    layer.w1 = rng.gaussian(d, hidden, s);
    layer.b1 = rng.gaussian(1, hidden, 0.02);
    layer.w2 = rng.gaussian(hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)));
    layer.b2 = rng.gaussian(1, d, 0.02);
    layers_.push_back(std::move(layer));
  }
  proj_ = rng.gaussian(d, spec_.d_txt, s);
}

Matrix TextEncoder::positional_encoding(Eigen::Index length) const {
  const int d = spec_.d_embed;
  Matrix pe(length, d);
  for (Eigen::Index pos = 0; pos < length; ++pos) {
    for (int i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      const double angle = static_cast<double>(pos) * freq;
      pe(pos, i) = (i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe * positional_scale();
}

void TextEncoder::check_input(const TokenSequence& seq) const {
  if (seq.rows() < 1) throw ShapeError("encode: empty token sequence");
  if (seq.cols() != spec_.d_embed) {
    throw ShapeError("encode: token width " + std::to_string(seq.cols()) + ", expected " +
                     std::to_string(spec_.d_embed));
  }
}

Vec TextEncoder::encode(const TokenSequence& seq) const {
  Tape tape;
  return forward(seq, tape);
}

Vec TextEncoder::forward(const TokenSequence& seq, Tape& tape) const {
  check_input(seq);
  const Eigen::Index n = seq.rows();
  tape = Tape{};
  tape.length = n;

  if (spec_.depth == 0) {
    tape.pooled = spec_.pooling == Pooling::mean ? Vec(seq.colwise().mean().transpose())
                                                 : Vec(seq.row(n - 1).transpose());
    return proj_.transpose() * tape.pooled;
  }

  const int dh = spec_.d_embed / spec_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix x = seq + positional_encoding(n);
  for (const Layer& layer : layers_) {
    LayerTape lt;
    lt.x_in = x;
    lt.inv_std1 = layer_norm_rows(x, lt.a);
    lt.q = lt.a * layer.wq;
    lt.k = lt.a * layer.wk;
    lt.v = lt.a * layer.wv;
    lt.attn.resize(n, spec_.d_embed);
    for (int h = 0; h < spec_.heads; ++h) {
      const auto qh = lt.q.middleCols(h * dh, dh);
      const auto kh = lt.k.middleCols(h * dh, dh);
      const auto vh = lt.v.middleCols(h * dh, dh);
      Matrix p = (qh * kh.transpose()) * scale;
      for (Eigen::Index r = 0; r < n; ++r) p.row(r) = softmax(p.row(r).transpose()).transpose();
      lt.attn.middleCols(h * dh, dh) = p * vh;
      lt.probs.push_back(std::move(p));
    }
    lt.x_mid = lt.x_in + lt.attn * layer.wo;
    lt.inv_std2 = layer_norm_rows(lt.x_mid, lt.b);
    lt.z = ((lt.b * layer.w1).rowwise() + layer.b1).array().tanh().matrix();
    x = lt.x_mid + lt.z * layer.w2;
    x.rowwise() += layer.b2;
    tape.layers.push_back(std::move(lt));
  }

  tape.pooled = spec_.pooling == Pooling::mean ? Vec(x.colwise().mean().transpose())
                                               : Vec(x.row(n - 1).transpose());
  Matrix pooled_row = tape.pooled.transpose();
  Matrix normed;
  const Vec inv = layer_norm_rows(pooled_row, normed);
  tape.pooled_inv_std = inv(0);
  tape.pooled_normed = normed.row(0).transpose();
  return proj_.transpose() * tape.pooled_normed;
}

TokenSequence TextEncoder::backward(const Tape& tape, const Vec& cotangent) const {
  if (cotangent.size() != spec_.d_txt) {
    throw ShapeError("encode_vjp: cotangent width " + std::to_string(cotangent.size()) +
                     ", expected " + std::to_string(spec_.d_txt));
  }
  const Eigen::Index n = tape.length;
  const int d = spec_.d_embed;

  auto spread_pooled = [&](const Vec& dpooled) {
    Matrix dx = Matrix::Zero(n, d);
    if (spec_.pooling == Pooling::mean) {
      dx.rowwise() = dpooled.transpose() / static_cast<double>(n);
    } else {
      dx.row(n - 1) = dpooled.transpose();
    }
    return dx;
  };

  if (spec_.depth == 0) return spread_pooled(proj_ * cotangent);

  const Vec dnormed = proj_ * cotangent;
  Matrix normed_row = tape.pooled_normed.transpose();
  Vec inv(1);
  inv(0) = tape.pooled_inv_std;
  const Matrix dpooled = layer_norm_rows_vjp(normed_row, inv, dnormed.transpose());
  Matrix dx = spread_pooled(dpooled.row(0).transpose());

  const int dh = d / spec_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& layer = layers_[li];
    const LayerTape& lt = tape.layers[li];

    // Feed-forward block.
    Matrix dx_mid = dx;
    const Matrix dz = dx * layer.w2.transpose();
    const Matrix du = (dz.array() * (1.0 - lt.z.array().square())).matrix();
    const Matrix db = du * layer.w1.transpose();
    dx_mid += layer_norm_rows_vjp(lt.b, lt.inv_std2, db);

    // Attention block.
    Matrix dx_in = dx_mid;
    const Matrix dattn = dx_mid * layer.wo.transpose();
    Matrix dq(n, d), dk(n, d), dv(n, d);
    for (int h = 0; h < spec_.heads; ++h) {
      const Matrix& p = lt.probs[static_cast<std::size_t>(h)];
      const auto qh = lt.q.middleCols(h * dh, dh);
      const auto kh = lt.k.middleCols(h * dh, dh);
      const auto vh = lt.v.middleCols(h * dh, dh);
      const auto doh = dattn.middleCols(h * dh, dh);
      const Matrix dp = doh * vh.transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * doh;
      Matrix ds(n, n);
      for (Eigen::Index r = 0; r < n; ++r) {
        ds.row(r) = softmax_vjp(p.row(r).transpose(), dp.row(r).transpose()).transpose();
      }
      ds *= scale;
      dq.middleCols(h * dh, dh) = ds * kh;
      dk.middleCols(h * dh, dh) = ds.transpose() * qh;
    }
    const Matrix da = dq * layer.wq.transpose() + dk * layer.wk.transpose() +
                      dv * layer.wv.transpose();
    dx_in += layer_norm_rows_vjp(lt.a, lt.inv_std1, da);
    dx = std::move(dx_in);
  }
  // Positions are constants, so the input gradient passes straight through.
  return dx;
}

TokenSequence TextEncoder::encode_vjp(const TokenSequence& seq, const Vec& cotangent) const {
  Tape tape;
  forward(seq, tape);
  return backward(tape, cotangent);
}

std::uint64_t TextEncoder::weights_fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const auto& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    const std::size_t count = static_cast<std::size_t>(m.size()) * sizeof(double);
    for (std::size_t i = 0; i < count; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const Layer& l : layers_) {
    mix(l.wq); mix(l.wk); mix(l.wv); mix(l.wo); mix(l.w1); mix(l.w2); mix(l.b1); mix(l.b2);
  }
  mix(proj_);
  return h;
}

}  // namespace softcpt
