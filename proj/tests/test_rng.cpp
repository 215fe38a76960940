#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

#include "softcpt/rng.hpp"

using namespace softcpt;

// Known-answer vectors of Philox4x32-10 from the Random123 distribution.
TEST_CASE("philox known-answer vectors") {
  using B = Rng::Block;
  CHECK(Rng::philox(B{0, 0, 0, 0}, {0, 0}) == B{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(Rng::philox(B{0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
        B{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(Rng::philox(B{0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
        B{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("first block of seed 0 stream 0 is the zero-counter block") {
  Rng rng(0, 0);
  CHECK(rng.next_u32() == 0x6627e8d5u);
  CHECK(rng.next_u32() == 0xe169c58du);
}

TEST_CASE("same seed and stream reproduce bitwise; streams differ") {
  Rng a(42, 3), b(42, 3), c(42, 4), d(43, 3);
  const Matrix ma = a.gaussian(5, 7, 1.0);
  CHECK(ma == b.gaussian(5, 7, 1.0));
  CHECK(ma != c.gaussian(5, 7, 1.0));
  CHECK(ma != d.gaussian(5, 7, 1.0));
}

TEST_CASE("uniform lies in [0, 1) with mean near 1/2") {
  Rng rng(1);
  double sum = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  // 5 standard errors of the mean, sd = 1/sqrt(12)
  CHECK(std::abs(sum / n - 0.5) < 5 * 0.2887 / std::sqrt(double(n)));
}

TEST_CASE("normal draws have unit variance") {
  Rng rng(2);
  const int n = 40000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 5.0 / std::sqrt(double(n)));
  CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / n));
}

TEST_CASE("uniform_index stays in range and hits every value") {
  Rng rng(3);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto k = rng.uniform_index(7);
    REQUIRE(k < 7);
    ++hits[k];
  }
  for (int h : hits) CHECK(h > 800);
  CHECK(rng.uniform_index(1) == 0);
}

TEST_CASE("shuffle is a permutation and deterministic") {
  std::vector<int> a(50), b(50);
  std::iota(a.begin(), a.end(), 0);
  b = a;
  Rng r1(9), r2(9);
  r1.shuffle(std::span<int>(a));
  r2.shuffle(std::span<int>(b));
  CHECK(a == b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(50);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(sorted == expect);
  CHECK(a != expect);
}

TEST_CASE("gaussian fills row-major from the stream") {
  Rng a(5, 1), b(5, 1);
  const Matrix m = a.gaussian(2, 3, 2.0);
  for (Eigen::Index i = 0; i < 2; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) CHECK(m(i, j) == 2.0 * b.normal());
  }
}

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}
