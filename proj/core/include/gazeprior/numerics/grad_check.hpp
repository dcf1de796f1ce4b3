#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "gazeprior/numerics/tensor.hpp"

namespace gazeprior::num {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t n_checked = 0;
};

// Compares reverse-mode gradients of the scalar `f` against central
// differences, perturbing every entry of every tensor in `params` in place.
// Error per entry: |analytic - numeric| / (|numeric| + 1e-8).
// Throws kNonFinite naming the parameter entry whose perturbation made f
// non-finite.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           double eps = 1e-5);

}  // namespace gazeprior::num
