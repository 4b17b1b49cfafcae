#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace dynabs {

// One SplitMix64 step. Doubles as the mixing primitive for seed derivation.
inline constexpr uint64_t splitmix64(uint64_t& state) noexcept {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t fnv1a64(std::string_view s) noexcept;

// Child seed for (root seed, module tag, instance index). Indexed derivation:
// adding instance n+1 never perturbs the seeds of instances 0..n, and distinct
// tags decorrelate modules sharing one root seed.
uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index = 0) noexcept;

// mt19937_64 engine (output sequence pinned by the standard) with hand-rolled
// distribution transforms, so streams are reproducible across standard
// libraries. All methods consume a deterministic number of engine outputs
// given the same inputs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) via rejection.
  uint64_t next_below(uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal, Box-Muller with a cached spare.
  double normal();

  double gamma(double shape);

  std::vector<double> dirichlet(std::size_t n, double concentration);

  // Index sample from an explicit probability vector (inverse CDF).
  std::size_t categorical(const std::vector<double>& probs);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dynabs
