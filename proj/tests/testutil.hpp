#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "grecall/nn.hpp"

namespace grecall::testutil {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t checked = 0;
};

// Central finite differences against the analytic gradients already stored
// in ps.grad. loss_fn must recompute the loss from the current parameter
// values and leave them unchanged.
inline GradCheckResult finite_diff_check(nn::ParameterSet& ps,
                                         const std::function<double()>& loss_fn,
                                         double h = 1e-5) {
  GradCheckResult res;
  for (size_t pi = 0; pi < ps.size(); ++pi) {
    nn::Parameter& p = ps[pi];
    for (int64_t i = 0; i < p.value.size(); ++i) {
      double orig = p.value.at(i);
      p.value.at(i) = orig + h;
      double up = loss_fn();
      p.value.at(i) = orig - h;
      double down = loss_fn();
      p.value.at(i) = orig;
      double fd = (up - down) / (2.0 * h);
      double an = p.grad.at(i);
      double scale = std::max(std::fabs(fd), std::fabs(an));
      double err = scale < 1e-8 ? 0.0 : std::fabs(fd - an) / std::max(scale, 1e-6);
      ++res.checked;
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace grecall::testutil
