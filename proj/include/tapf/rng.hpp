#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace tapf {

// Splittable deterministic generator. One master seed feeds the whole
// program; independent streams are derived by labeled split() so that
// consumption order in one stream never perturbs another. The generator
// itself is splitmix64; normals come from Box-Muller on its uniforms, so
// sequences are identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : origin_(seed), state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + std::int64_t(next_u64() % std::uint64_t(hi - lo + 1));
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Child stream derived from the construction seed and the label only;
  // draws from this stream do not affect the derivation.
  Rng split(std::string_view label) const {
    std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
    for (char c : label) {
      h ^= std::uint64_t(static_cast<unsigned char>(c));
      h *= 0x100000001B3ull;
    }
    Rng child(origin_ ^ (h | 1));
    child.next_u64();  // decorrelate adjacent labels
    return child;
  }

  Rng split(std::string_view label, std::uint64_t index) const {
    return split(std::string(label) + "/" + std::to_string(index));
  }

 private:
  std::uint64_t origin_;
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tapf
