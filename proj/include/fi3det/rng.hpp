#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace fi3det {

// Deterministic random stream used everywhere randomness is needed.
//
// The generator is SplitMix64 (Steele/Lea/Vigna): a counter advanced by the
// golden-gamma constant, finalized by a 64-bit mix. It is fully defined by
// integer arithmetic, so the raw bit stream is identical on every platform
// and toolchain; golden tests pin it. Floating-point derivations below use
// only exact scaling (uniform) plus libm (normal), which is stable on a
// given platform.
//
// Streams are cheap value types. Derive independent substreams with
// Rng::child(tag, index) instead of sharing one stream across unrelated
// work: that keeps consumption order changes in one component from
// perturbing another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  // Uniform integer in [0, n). n == 0 is a caller bug; returns 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) return 0;
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller; one draw per call, no cached state, so
  // interleaving with other draws cannot change the stream layout.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // Guard the log singularity at u1 == 0.
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Deterministic substream: hash of (state-seed, tag, index) with FNV-1a.
  Rng child(std::string_view tag, std::uint64_t index = 0) const {
    std::uint64_t h = 0xCBF29CE484222325ull ^ state_;
    auto mix = [&h](std::uint64_t byte) {
      h ^= byte;
      h *= 0x100000001B3ull;
    };
    for (char c : tag) mix(static_cast<unsigned char>(c));
    for (int i = 0; i < 8; ++i) mix((index >> (8 * i)) & 0xFF);
    return Rng(h);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

}  // namespace fi3det
