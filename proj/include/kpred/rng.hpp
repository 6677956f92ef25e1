#pragma once

#include <cstdint>
#include <vector>

namespace kpred {

// splitmix64. Bit-stable across platforms and compilers; std:: distributions
// are implementation-defined and cannot back the byte-reproducibility
// guarantees, so every seeded operation draws from this.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform index in [0, n); n must be > 0
  std::size_t index(std::size_t n) {
    std::size_t i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return i < n ? i : n - 1;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream, e.g. a per-shape seed from a run seed.
  static uint64_t derive(uint64_t seed, uint64_t tag) {
    Rng r(seed ^ (0x632be59bd9b4e019ull * (tag + 1)));
    return r.next_u64();
  }

 private:
  uint64_t state_;
};

}  // namespace kpred
