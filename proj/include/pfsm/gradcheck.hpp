#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pfsm/tensor.hpp"

namespace pfsm {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Compares reverse-mode gradients of fn() with central differences taken by
// perturbing `leaf` one coordinate at a time. fn must rebuild its graph on
// every call and use `leaf` as an input. Relative error per coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(const std::string& name,
                           const std::function<Tensor()>& fn, Tensor leaf,
                           double eps = 1e-5, double tolerance = 1e-4);

// Checks every differentiable op at 3 random points each, plus composite
// checks for the adapter layers and the full training loss on a reduced
// model. Used by both the test suite and the `gradcheck` CLI command.
std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed = 20260813);

}  // namespace pfsm
