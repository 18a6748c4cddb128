#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace idpt {

// Deterministic RNG. All draws go through hand-rolled transforms of
// std::mt19937 output so results do not depend on library internals
// (std::uniform_real_distribution and std::shuffle are not pinned by the
// standard).
class Rng {
 public:
  explicit Rng(std::uint32_t seed) : gen_(seed) {}

  std::uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1) with 24 bits of mantissa.
  double unit() { return static_cast<double>(gen_() >> 8) * (1.0 / 16777216.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  // Box-Muller, one value per call (the pair's second half is discarded to
  // keep the draw sequence position-independent).
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = unit();
    double u2 = unit();
    if (u1 < 1e-12) u1 = 1e-12;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
  }

  // Uniform index in [0, n). Modulo bias is negligible for the n used here.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_()) % n; }

 private:
  std::mt19937 gen_;
};

// Stable sub-seed derivation: FNV-1a over the tag, mixed with the base seed.
inline std::uint32_t derive_seed(std::uint32_t base, std::string_view tag) {
  std::uint32_t h = 2166136261u;
  for (char c : tag) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 16777619u;
  }
  h ^= base + 0x9e3779b9u + (h << 6) + (h >> 2);
  return h;
}

// Fisher-Yates with explicit index draws.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = rng.index(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace idpt
