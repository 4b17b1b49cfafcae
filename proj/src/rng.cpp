#include "dynabs/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace dynabs {

uint64_t fnv1a64(std::string_view s) noexcept {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

uint64_t derive_seed(uint64_t root, std::string_view tag, uint64_t index) noexcept {
  uint64_t state = root;
  uint64_t a = splitmix64(state);
  state = a ^ fnv1a64(tag);
  uint64_t b = splitmix64(state);
  state = b ^ index;
  return splitmix64(state);
}

uint64_t Rng::next_below(uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::next_below: n must be positive");
  if (n == 1) return 0;
  // Rejection keeps the draw unbiased without widening arithmetic.
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  for (;;) {
    uint64_t x = engine_();
    if (x < limit) return x % n;
  }
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1]: guards log(0).
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw std::invalid_argument("Rng::gamma: shape must be positive");
  if (shape < 1.0) {
    // Boost: Gamma(a) = Gamma(a+1) * U^{1/a}.
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  // Marsaglia-Tsang squeeze.
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> Rng::dirichlet(std::size_t n, double concentration) {
  std::vector<double> out(n);
  double total = 0.0;
  for (auto& x : out) {
    x = gamma(concentration);
    total += x;
  }
  if (total <= 0.0) {
    // Degenerate draw (all underflowed); fall back to uniform weights.
    for (auto& x : out) x = 1.0 / static_cast<double>(n);
    return out;
  }
  for (auto& x : out) x /= total;
  return out;
}

std::size_t Rng::categorical(const std::vector<double>& probs) {
  if (probs.empty()) throw std::invalid_argument("Rng::categorical: empty distribution");
  double u = uniform();
  double cum = 0.0;
  std::size_t last_positive = probs.size();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = i;
    cum += probs[i];
    if (u < cum) return i;
  }
  if (last_positive == probs.size())
    throw std::invalid_argument("Rng::categorical: no positive mass");
  return last_positive;  // u landed in the rounding tail
}

}  // namespace dynabs
