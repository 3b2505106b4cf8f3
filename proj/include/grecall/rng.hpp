#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace grecall {

// One root seed feeds every component through named substreams, so any
// two runs that share (seed, name) see identical randomness and paired
// experiments (e.g. RL with different expert counts) share rollout noise.
uint64_t substream_seed(uint64_t root, std::string_view name);

// Deterministic generator with hand-rolled distributions. The standard
// library distributions are implementation-defined, which would tie
// artifact bytes to the standard library version.
class Rng {
 public:
  explicit Rng(uint64_t seed);
  Rng(uint64_t root, std::string_view name) : Rng(substream_seed(root, name)) {}

  uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);
  // Box-Muller, one value per call (second value cached).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  double gumbel() { return -std::log(-std::log(uniform() + 1e-300) + 1e-300); }
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t s_[4];
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace grecall
