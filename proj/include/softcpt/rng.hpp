#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

#include "softcpt/tensor.hpp"

namespace softcpt {

/// Philox4x32-10 counter-based generator (Salmon et al., Random123).
///
/// A stream is identified by (seed, stream id). The seed is the 64-bit key;
/// the stream id occupies the upper 64 bits of the 128-bit counter and the
/// draw index the lower 64 bits, so distinct streams never overlap and any
/// draw can be recomputed without replaying the sequence. Distribution
/// transforms are implemented here (not via <random>) so that the same seed
/// yields the same values with every standard library.
class Rng {
 public:
  using Block = std::array<std::uint32_t, 4>;

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream) {}

  static Block philox(Block counter, std::array<std::uint32_t, 2> key) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint32_t next_u32() noexcept;
  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Standard normal via Box-Muller.
  double normal() noexcept;
  /// Uniform integer on [0, n); n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// rows x cols matrix of i.i.d. N(0, stddev^2) entries, filled row-major.
  Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev);

 private:
  void refill() noexcept;

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  Block buffer_{};
  int used_ = 4;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

/// 64-bit FNV-1a; stable hash used for vocabulary slots and stream ids.
std::uint64_t fnv1a64(std::string_view text) noexcept;

}  // namespace softcpt
