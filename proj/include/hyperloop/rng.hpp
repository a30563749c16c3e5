#pragma once

#include <cstdint>
#include <string_view>

namespace hyperloop {

/// Counter-based 64-bit generator.
///
/// Output i of a stream with key k is splitmix64_mix(k + (i + 1) * 0x9E3779B97F4A7C15),
/// so any position of any stream can be computed directly from (key, counter).
/// Named streams are split from a run seed with
///   key = splitmix64_mix(seed ^ fnv1a64(name)),
/// which is how every parameter tensor gets an initialization stream that is
/// independent of construction order.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  CounterRng() = default;
  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  /// Stream for `name` derived from a run seed.
  static CounterRng stream(std::uint64_t seed, std::string_view name);

  static std::uint64_t mix(std::uint64_t z);
  static std::uint64_t fnv1a64(std::string_view s);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal();
  /// Standard normal truncated to [-2, 2] by redrawing.
  double truncated_normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace hyperloop
