#pragma once

#include <cstdint>
#include <cmath>

namespace mdt {

// Counter-based generator: every draw is a hash of (key, counter). State is
// two u64s, so streams serialize trivially and draws never depend on call
// history beyond the counter value.
class Rng {
 public:
  Rng() : key_(0x9e3779b97f4a7c15ull), ctr_(0) {}
  Rng(uint64_t key, uint64_t ctr) : key_(key), ctr_(ctr) {}

  // Derives an independent stream for one purpose (noise, mask, dropout, ...).
  static Rng stream(uint64_t seed, uint64_t purpose) {
    uint64_t k = mix(seed + 0x632be59bd9b4e019ull);
    k = mix(k ^ mix(purpose + 0x9e3779b97f4a7c15ull));
    return Rng(k, 0);
  }

  uint64_t next_u64() {
    uint64_t z = key_ + ctr_ * 0x9e3779b97f4a7c15ull;
    ++ctr_;
    return mix(z);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(mulhi(next_u64(), range));
  }

  // Standard normal via Box-Muller; always consumes exactly two uniforms.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return ctr_; }
  void set_state(uint64_t key, uint64_t ctr) { key_ = key; ctr_ = ctr; }

 private:
  static uint64_t mix(uint64_t z) {  // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static uint64_t mulhi(uint64_t a, uint64_t b) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(a) * b) >> 64);
  }

  uint64_t key_;
  uint64_t ctr_;
};

// Stream purposes, fixed so checkpoints stay stable.
namespace rng_purpose {
constexpr uint64_t kInit = 1;
constexpr uint64_t kNoise = 2;
constexpr uint64_t kMask = 3;
constexpr uint64_t kDropout = 4;
constexpr uint64_t kData = 5;
constexpr uint64_t kTimestep = 6;
constexpr uint64_t kSample = 7;
constexpr uint64_t kEval = 8;
}  // namespace rng_purpose

}  // namespace mdt
