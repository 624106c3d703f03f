#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace diger {

inline constexpr double kEulerGamma = 0.57721566490153286060651209008240243;
inline constexpr double kGumbelStd = 1.2825498301618640955440363270523419;  // pi/sqrt(6)

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Counter-based random stream. A stream is keyed once (seed plus context
// words such as epoch/step/item); each draw is addressed by an explicit
// counter, so draws never depend on call order.
class RngStream {
 public:
  explicit RngStream(uint64_t seed, std::initializer_list<uint64_t> key = {}) : state_(splitmix64(seed)) {
    for (uint64_t k : key) state_ = splitmix64(state_ ^ splitmix64(k + 0x632BE59BD9B4E019ull));
  }

  uint64_t bits(uint64_t counter) const { return splitmix64(state_ + 0x9E3779B97F4A7C15ull * (counter + 1)); }

  // Uniform on (0,1), never exactly 0 or 1.
  double uniform(uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard Gumbel(0,1): mean Euler gamma, std pi/sqrt(6).
  double gumbel(uint64_t counter) const { return -std::log(-std::log(uniform(counter))); }

  // Standard normal via Box-Muller; consumes counters 2c and 2c+1.
  double normal(uint64_t counter) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t counter, uint64_t n) const { return n == 0 ? 0 : bits(counter) % n; }

 private:
  uint64_t state_;
};

// Deterministic Fisher-Yates shuffle driven by a counter stream.
template <class Vec>
void shuffle_stream(Vec& v, const RngStream& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace diger
