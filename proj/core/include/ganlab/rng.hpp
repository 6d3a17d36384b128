#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace ganlab {

// Deterministic random stream (splitmix64). Every random draw in the library
// goes through this class so runs replay bit-for-bit from a seed, independent
// of the platform's <random> distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two uniforms per draw.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform index in [0, n).
  size_t index(size_t n) {
    return static_cast<size_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  // Derives an independent stream seed from a master seed and a stream tag.
  static uint64_t derive(uint64_t seed, uint64_t stream) {
    Rng r(seed ^ (0x632be59bd9b4e019ull * (stream + 1)));
    return r.next_u64();
  }

 private:
  uint64_t state_;
};

}  // namespace ganlab
