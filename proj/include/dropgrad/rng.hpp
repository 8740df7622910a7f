#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace dropgrad {

// Deterministic, seedable PRNG used everywhere randomness is needed.
//
// Algorithm (pinned so sequences are reproducible across implementations):
//   * state: xoshiro256** (Blackman & Vigna, 2018), four 64-bit words
//   * seeding: the 64-bit seed is expanded into the four state words with
//     four successive splitmix64 draws
//   * uniform double in [0,1): (next_u64() >> 11) * 2^-53
//   * bounded integer in [0,n): multiply-shift (128-bit product high word)
//   * normal: Box-Muller, consuming exactly two uniforms per pair of
//     outputs (cos then sin); fills discard the spare of a trailing odd pair
//
// The integer and uniform streams are bit-exact across platforms. The normal
// stream additionally depends on libm rounding, so it is bit-exact per build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t s = seed;
    for (auto& word : state_) word = splitmix64(s);
  }

  std::uint64_t seed() const { return seed_; }
  const std::array<std::uint64_t, 4>& state() const { return state_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53 random mantissa bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Multiply-shift map of one 64-bit draw; the
  // selection bias is below 2^-64 * n and the mapping is platform-fixed.
  std::uint64_t next_index(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // One pair of independent standard normals from two uniforms.
  std::pair<double, double> next_normal_pair() {
    const double u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));  // 1-u1 in (0,1]
    const double a = 2.0 * M_PI * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }

  static std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_ = 0;
  std::array<std::uint64_t, 4> state_{};
};

// Independent substream for (base seed, tag), e.g. per-epoch shuffles or
// per-sweep-row runs. Two splitmix64 rounds decorrelate nearby tags.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t s = base ^ (tag * 0x9E3779B97F4A7C15ULL);
  Rng::splitmix64(s);
  return Rng::splitmix64(s);
}

}  // namespace dropgrad
