#include "doctest.h"

#include <map>
#include <set>
#include <string>
#include <vector>

#include "softcpt/encoder.hpp"
#include "softcpt/rng.hpp"

using namespace softcpt;

namespace {

EncoderSpec toy_spec(int depth, Pooling pooling) {
  EncoderSpec s;
  s.depth = depth;
  s.pooling = pooling;
  s.weight_seed = 17;
  return s;
}

double fd_rel_error(const TextEncoder& enc, const TokenSequence& seq, const Vec& cot) {
  const TokenSequence analytic = enc.encode_vjp(seq, cot);
  TokenSequence numeric(seq.rows(), seq.cols());
  TokenSequence x = seq;
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = enc.encode(x).dot(cot);
    x.data()[i] = saved - h;
    const double down = enc.encode(x).dot(cot);
    x.data()[i] = saved;
    numeric.data()[i] = (up - down) / (2 * h);
  }
  return (analytic - numeric).norm() / std::max(analytic.norm(), numeric.norm());
}

// Task names of the four benchmark suites (general, plant, remote sensing, fashion).
const std::vector<std::string> kBenchmarkTaskNames = {
    "object classification", "texture classification",
    "land use and land cover classification", "aircraft classification", "food classification",
    "flower classification", "pets classification", "car classification", "scene classification",
    "action classification", "fruits and vegetables image classification",
    "flower classification", "mushroom classification", "vegetable classification",
    "plant seedling classification", "plant leaf disease classification",
    "aerial image scene classification", "remote sensing image scene classification",
    "Google Earth image scene classification",
    "global-scale remote sensing image scene classification",
    "Google Earth image scene classification", "satellite image scene classification",
    "remote sensing image scene classification with high resolution overhead image",
    "Google Earth image scene classification", "pants type", "pants length", "waist type",
    "collar type", "sleeve type", "sleeve length", "top pattern", "shoe material", "shoe style",
    "heel shape", "heel thickness", "heel height", "upper height", "toe cap style", "hat style",
    "socks length", "socks type", "skirt length", "number of button rows", "underwear style",
};

}  // namespace

TEST_CASE("tokenize lowercases and splits on whitespace") {
  CHECK(tokenize("  Flower\tClassification\n") ==
        std::vector<std::string>{"flower", "classification"});
  CHECK(tokenize("   ").empty());
}

TEST_CASE("tokenize_and_embed is deterministic and order sensitive") {
  const EncoderSpec spec;
  const TokenSequence a = tokenize_and_embed("flower classification", spec, 3);
  CHECK(a.rows() == 2);
  CHECK(a.cols() == spec.d_embed);
  CHECK(a == tokenize_and_embed("flower classification", spec, 3));
  CHECK(a == tokenize_and_embed("FLOWER  classification", spec, 3));
  CHECK(a != tokenize_and_embed("flower classification", spec, 4));

  const TokenSequence ab = tokenize_and_embed("a b", spec, 3);
  const TokenSequence ba = tokenize_and_embed("b a", spec, 3);
  CHECK(ab != ba);
  CHECK(ab.row(0) == ba.row(1));
}

TEST_CASE("empty text is a degenerate input") {
  CHECK_THROWS_AS(tokenize_and_embed("", EncoderSpec{}, 0), DegenerateInputError);
  CHECK_THROWS_AS(tokenize_and_embed(" \t ", EncoderSpec{}, 0), DegenerateInputError);
}

TEST_CASE("vocabulary collision rate on the benchmark task names is below 5%") {
  std::set<std::string> vocab;
  for (const auto& name : kBenchmarkTaskNames) {
    for (const auto& tok : tokenize(name)) vocab.insert(tok);
  }
  std::map<std::size_t, int> slots;
  for (const auto& tok : vocab) ++slots[vocab_slot(tok, EncoderSpec{}.vocab_size)];
  int colliding = 0;
  for (const auto& tok : vocab) {
    if (slots[vocab_slot(tok, EncoderSpec{}.vocab_size)] > 1) ++colliding;
  }
  const double rate = static_cast<double>(colliding) / static_cast<double>(vocab.size());
  MESSAGE("distinct tokens: " << vocab.size() << ", colliding: " << colliding);
  CHECK(kBenchmarkTaskNames.size() == 44);
  CHECK(rate < 0.05);
}

TEST_CASE("encoder spec validation") {
  EncoderSpec s;
  s.heads = 3;
  CHECK_THROWS_AS(TextEncoder{s}, InvalidArgument);
  s = EncoderSpec{};
  s.d_txt = 0;
  CHECK_THROWS_AS(TextEncoder{s}, InvalidArgument);
  CHECK(parse_pooling("last-token") == Pooling::last_token);
  CHECK_THROWS_AS(parse_pooling("max"), InvalidArgument);
}

TEST_CASE("encode: width, determinism, frozen weights") {
  const TextEncoder enc(toy_spec(2, Pooling::mean));
  const auto fp = enc.weights_fingerprint();
  for (const char* text : {"a", "flower classification", "remote sensing image scene"}) {
    const TokenSequence seq = tokenize_and_embed(text, enc.spec(), 1);
    const Vec y = enc.encode(seq);
    CHECK(y.size() == enc.spec().d_txt);
    CHECK(y == enc.encode(seq));
  }
  CHECK(enc.weights_fingerprint() == fp);
  CHECK(TextEncoder(toy_spec(2, Pooling::mean)).weights_fingerprint() == fp);
  CHECK(TextEncoder(toy_spec(1, Pooling::mean)).weights_fingerprint() != fp);
}

TEST_CASE("encode: token width mismatch is a shape error") {
  const TextEncoder enc(toy_spec(2, Pooling::mean));
  CHECK_THROWS_AS(enc.encode(Matrix::Zero(2, 31)), ShapeError);
  CHECK_THROWS_AS(enc.encode(Matrix::Zero(0, 32)), ShapeError);
  const TokenSequence seq = tokenize_and_embed("x y", enc.spec(), 1);
  CHECK_THROWS_AS(enc.encode_vjp(seq, Vec::Zero(63)), ShapeError);
}

TEST_CASE("encode: positions make the output order dependent") {
  const TextEncoder enc(toy_spec(1, Pooling::mean));
  const TokenSequence ab = tokenize_and_embed("a b", enc.spec(), 1);
  const TokenSequence ba = tokenize_and_embed("b a", enc.spec(), 1);
  CHECK((enc.encode(ab) - enc.encode(ba)).norm() > 1e-8);
}

TEST_CASE("encode: depth 0 with one token is its linear projection") {
  const TextEncoder enc(toy_spec(0, Pooling::mean));
  const TokenSequence one = tokenize_and_embed("single", enc.spec(), 1);
  // Linearity: scaling the token scales the output.
  const Vec y = enc.encode(one);
  CHECK((enc.encode(one * 2.0) - 2.0 * y).norm() < 1e-12 * y.norm());
  // Mean pooling: a repeated token pools to itself.
  const TokenSequence twice = vconcat(one, one);
  CHECK((enc.encode(twice) - y).norm() < 1e-12 * y.norm());
}

TEST_CASE("encode_vjp: zero cotangent gives zero gradient") {
  const TextEncoder enc(toy_spec(2, Pooling::mean));
  const TokenSequence seq = tokenize_and_embed("x y z", enc.spec(), 1);
  CHECK(enc.encode_vjp(seq, Vec::Zero(enc.spec().d_txt)).isZero(0.0));
}

TEST_CASE("encode_vjp matches central differences for every depth and pooling") {
  for (int depth : {0, 1, 2}) {
    for (Pooling pooling : {Pooling::mean, Pooling::last_token}) {
      CAPTURE(depth);
      CAPTURE(to_string(pooling));
      const TextEncoder enc(toy_spec(depth, pooling));
      Rng rng(100 + static_cast<std::uint64_t>(depth));
      // Context-sized inputs keep the layer norms well conditioned.
      const TokenSequence seq = rng.gaussian(3, enc.spec().d_embed, 0.5);
      const Vec cot = rng.gaussian(enc.spec().d_txt, 1, 1.0);
      CHECK(fd_rel_error(enc, seq, cot) < 1e-5);
    }
  }
}

TEST_CASE("encode_vjp reaches every token position that pooling touches") {
  Rng rng(8);
  {
    const TextEncoder enc(toy_spec(2, Pooling::mean));
    const TokenSequence seq = rng.gaussian(4, enc.spec().d_embed, 0.5);
    const TokenSequence g = enc.encode_vjp(seq, rng.gaussian(enc.spec().d_txt, 1, 1.0));
    for (Eigen::Index r = 0; r < g.rows(); ++r) CHECK(g.row(r).norm() > 0.0);
  }
  {
    // Without attention only the last token reaches the output.
    const TextEncoder enc(toy_spec(0, Pooling::last_token));
    const TokenSequence seq = rng.gaussian(4, enc.spec().d_embed, 0.5);
    const TokenSequence g = enc.encode_vjp(seq, rng.gaussian(enc.spec().d_txt, 1, 1.0));
    for (Eigen::Index r = 0; r + 1 < g.rows(); ++r) CHECK(g.row(r).isZero(0.0));
    CHECK(g.row(g.rows() - 1).norm() > 0.0);
  }
}

TEST_CASE("output width does not depend on sequence length") {
  const TextEncoder enc(toy_spec(2, Pooling::mean));
  Rng rng(4);
  for (Eigen::Index n : {1, 2, 7, 20}) {
    CHECK(enc.encode(rng.gaussian(n, enc.spec().d_embed, 0.1)).size() == enc.spec().d_txt);
  }
}
