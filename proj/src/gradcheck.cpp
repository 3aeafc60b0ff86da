#include "pfsm/gradcheck.hpp"

#include <cmath>

#include "pfsm/rng.hpp"

namespace pfsm {

GradCheckReport grad_check(const std::string& name,
                           const std::function<Tensor()>& fn, Tensor leaf,
                           double eps, double tolerance) {
  if (!(eps > 0.0) || eps > 1e-2)
    throw ValidationError("grad_check: eps must lie in (0, 1e-2]");
  if (!leaf.defined()) throw ShapeError("grad_check: undefined leaf");

  Tensor loss = fn();
  if (loss.numel() != 1) throw ShapeError("grad_check: fn must return a scalar");
  if (std::isnan(loss.item()))
    throw NumericError("grad_check[" + name + "]: NaN at unperturbed point");

  leaf.zero_grad();
  backward(loss);
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) analytic = leaf.grad();

  auto& store = leaf.raw_values();
  double max_rel = 0.0;
  for (int i = 0; i < leaf.numel(); ++i) {
    double saved = store[i];
    store[i] = saved + eps;
    double fp = fn().item();
    store[i] = saved - eps;
    double fm = fn().item();
    store[i] = saved;
    if (std::isnan(fp) || std::isnan(fm))
      throw NumericError("grad_check[" + name + "]: NaN at coordinate " +
                         std::to_string(i));
    double numeric = (fp - fm) / (2.0 * eps);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
    double rel = std::fabs(analytic[i] - numeric) / denom;
    if (rel > max_rel) max_rel = rel;
  }

  GradCheckReport report;
  report.op_name = name;
  report.max_rel_error = max_rel;
  report.tolerance = tolerance;
  report.passed = max_rel <= tolerance;
  return report;
}

}  // namespace pfsm
