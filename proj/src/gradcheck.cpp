#include "fedmema/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fedmema {

namespace {

struct Probe {
  double value;
  std::uint64_t pattern;
};

Probe evaluate(const std::function<Tensor()>& loss) {
  ActivationProbe probe;
  const double v = loss().item();
  return {v, probe.signature()};
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss, ParamStore& params,
                                  const GradCheckOptions& options) {
  std::vector<bool> restore_flags;
  for (auto& e : params) {
    restore_flags.push_back(e.tensor.requires_grad());
    e.tensor.set_requires_grad(true);
  }
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(loss());
  }

  GradCheckReport report;
  for (auto& e : params) {
    auto values = e.tensor.mutable_data();
    const auto grad = e.tensor.grad();
    const std::size_t n = values.size();
    const std::size_t stride =
        (options.max_per_tensor == 0 || n <= options.max_per_tensor) ? 1 : n / options.max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double original = values[i];
      double h = options.step;
      bool smooth = false;
      double numeric = 0.0;
      for (int attempt = 0; attempt < 3 && !smooth; ++attempt, h *= 0.1) {
        values[i] = original + h;
        const Probe plus = evaluate(loss);
        values[i] = original - h;
        const Probe minus = evaluate(loss);
        values[i] = original;
        smooth = plus.pattern == minus.pattern;
        numeric = (plus.value - minus.value) / (2.0 * h);
      }
      if (!smooth) {
        ++report.skipped_kinks;
        continue;
      }
      const double analytic = grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = e.name;
        report.worst_index = i;
      }
    }
  }
  std::size_t k = 0;
  for (auto& e : params) e.tensor.set_requires_grad(restore_flags[k++]);
  return report;
}

}  // namespace fedmema
