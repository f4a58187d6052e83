#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pseg/optim.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t n_checked = 0;
};

// Compares reverse-mode gradients against central finite differences. The
// probe side only ever runs forward passes (with the tape disabled), so it
// is independent of the backward implementation it checks.
//
// loss_fn must rebuild the graph from the current parameter values on each
// call. Relative error uses a guarded denominator so that near-zero
// gradients are compared absolutely at the same tolerance scale.
template <typename LossFn>
GradCheckResult finite_diff_check(std::vector<NamedParam<double>>& params,
                                  LossFn loss_fn, double h = 1e-5,
                                  std::size_t max_per_tensor = 0) {
  for (auto& p : params) p.tensor.zero_grad();
  {
    auto loss = loss_fn();
    backward(loss);
  }
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.push_back(p.tensor.grad());

  GradCheckResult res;
  NoGrad ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi].tensor.value();
    const std::size_t limit =
        max_per_tensor == 0 ? vals.size()
                            : std::min(vals.size(), max_per_tensor);
    // deterministic stride so sampled entries spread over the tensor
    const std::size_t stride =
        limit == vals.size() ? 1 : std::max<std::size_t>(1, vals.size() / limit);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < vals.size() && checked < limit;
         i += stride, ++checked) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = loss_fn().item();
      vals[i] = keep - h;
      const double down = loss_fn().item();
      vals[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = grads[pi][i];
      const double denom =
          std::max({std::abs(fd), std::abs(an), 1e-2});
      const double rel = std::abs(fd - an) / denom;
      ++res.n_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = params[pi].name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace pseg
