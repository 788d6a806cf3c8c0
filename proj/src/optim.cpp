#include "fedmema/optim.hpp"

#include <cmath>

#include "fedmema/errors.hpp"

namespace fedmema {

void Adam::step(ParamStore& params) {
  if (m_.empty()) {
    for (const auto& e : params) {
      m_.emplace_back(e.tensor.numel(), 0.0);
      v_.emplace_back(e.tensor.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam state belongs to a different ParamStore");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t k = 0;
  for (auto& e : params) {
    auto w = e.tensor.mutable_data();
    const auto g = e.tensor.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != w.size() || g.size() != w.size()) {
      throw ContractError("Adam: layout changed or '" + e.name + "' has no gradient");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      w[i] -= cfg_.lr * (update + cfg_.weight_decay * w[i]);
    }
    ++k;
  }
  check_finite("adam", params.flatten());
}

void Adam::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

}  // namespace fedmema
