#pragma once

#include <cmath>
#include <cstdint>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <utility>

namespace twinlab {

// splitmix64 finalizer; used to derive independent stream seeds from one
// user seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Seeded generator with distribution code of our own. The std
// distributions are implementation-defined, so using them would make
// corpora and training runs differ between standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform in [0, n), unbiased (rejection sampling).
  std::uint64_t index(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next();
    while (x >= limit) x = next();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; draws two uniforms per call and keeps no cached value so the
  // generator state is fully described by the engine.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(std::distance(first, last));
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = index(i);
      using std::swap;
      swap(*(first + static_cast<std::ptrdiff_t>(i - 1)), *(first + static_cast<std::ptrdiff_t>(j)));
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace twinlab
