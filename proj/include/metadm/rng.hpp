#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace metadm {

// Deterministic random stream. The engine is std::mt19937_64 (its output
// sequence is fixed by the standard); all distribution transforms are done
// here rather than with std:: distributions, whose output is
// implementation-defined. Derived streams (per episode, per image) come from
// Rng::mix so parallel and serial traversals see identical draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0. Unbiased via rejection.
  std::uint64_t uniform_below(std::uint64_t n);

  int uniform_int(int lo, int hi_exclusive) {
    return lo + static_cast<int>(uniform_below(static_cast<std::uint64_t>(hi_exclusive - lo)));
  }

  // Standard normal via Box-Muller; second value of each pair is cached.
  double normal();

  float uniform_f32() { return static_cast<float>(uniform()); }
  float normal_f32() { return static_cast<float>(normal()); }

  void fill_normal(std::vector<float>& out) {
    for (auto& v : out) v = normal_f32();
  }

  // First k of a Fisher-Yates shuffle over [0, n): a uniform k-subset in
  // random order, without replacement.
  std::vector<int> sample_without_replacement(int n, int k);

  // Stream derivation: splitmix64 over the concatenation of seed and index.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t index);

 private:
  std::mt19937_64 engine_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace metadm
