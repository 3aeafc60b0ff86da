#pragma once

#include <map>
#include <string>
#include <vector>

#include "pfsm/tensor.hpp"

namespace pfsm {

// Adam over a named parameter map. Iteration is in map (name) order, so
// updates are reproducible. Parameters without a populated gradient are
// treated as having zero gradient.
class Adam {
 public:
  Adam(ParamMap params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step();
  void zero_grad();
  const ParamMap& params() const { return params_; }

 private:
  ParamMap params_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace pfsm
