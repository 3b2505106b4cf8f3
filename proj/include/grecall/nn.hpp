#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "grecall/rng.hpp"
#include "grecall/tape.hpp"
#include "grecall/tensor.hpp"

namespace grecall::nn {

// Named parameters with gradient slots. Initialization draws from a
// substream keyed by (seed, name) so layout changes elsewhere in the model
// do not shift any parameter's starting values.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, std::vector<int> shape);
  // add + N(0, stddev) init from substream_seed(seed, name).
  Parameter& add_normal(const std::string& name, std::vector<int> shape,
                        uint64_t seed, double stddev);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  void zero_grads();
  int64_t num_values() const;
  size_t size() const { return params_.size(); }
  Parameter& operator[](size_t i) { return params_[i]; }
  const Parameter& operator[](size_t i) const { return params_[i]; }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer with bias correction. Moments are keyed by
// parameter name so a snapshot/restore of the ParameterSet cannot
// misalign them.
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One update using the gradients currently stored in ps; throws
  // NumericError naming the parameter if any gradient is NaN/Inf.
  void step(ParameterSet& ps);
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  int64_t step_count() const { return t_; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;  // (m, v)
};

// Cosine decay from lr0 to lr0*floor_frac across total steps.
double cosine_lr(double lr0, int64_t step, int64_t total, double floor_frac = 0.01);

// Checkpoints: versioned magic, then per parameter a name, shape header and
// raw little-endian doubles.
void save_checkpoint(const std::string& path, const ParameterSet& ps,
                     const std::map<std::string, std::string>& meta = {});
std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                   ParameterSet& ps);

// Deep copies for theta_old / frozen-reference snapshots.
void copy_values(const ParameterSet& src, ParameterSet& dst);
ParameterSet clone(const ParameterSet& src);

}  // namespace grecall::nn
