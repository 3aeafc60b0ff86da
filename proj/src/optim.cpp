#include "pfsm/optim.hpp"

#include <cmath>

#include "pfsm/errors.hpp"

namespace pfsm {

Adam::Adam(ParamMap params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr < 0) throw ValidationError("Adam: learning rate must be non-negative");
  for (const auto& [name, t] : params_) {
    m_[name] = std::vector<double>(t.numel(), 0.0);
    v_[name] = std::vector<double>(t.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (auto& [name, t] : params_) {
    auto& m = m_[name];
    auto& v = v_[name];
    const std::vector<double>* g = t.has_grad() ? &t.grad() : nullptr;
    auto& p = t.raw_values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double gi = g ? (*g)[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

}  // namespace pfsm
