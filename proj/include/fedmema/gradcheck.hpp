#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "fedmema/param_store.hpp"

namespace fedmema {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Entries whose +h/-h evaluations landed on different relu activation
  // patterns even after shrinking the step; the function is not
  // differentiable there, so they are not compared.
  std::size_t skipped_kinks = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-4;
  // Check at most this many entries per tensor (0 = all), spread evenly.
  std::size_t max_per_tensor = 0;
};

// Compares the tape gradient of `loss` w.r.t. every entry of `params`
// against central differences (f(θ+h) - f(θ-h)) / 2h. `loss` must be
// deterministic and build its graph from the tensors in `params`.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, ParamStore& params,
                                  const GradCheckOptions& options = {});

}  // namespace fedmema
