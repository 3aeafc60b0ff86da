#pragma once

#include "pfsm/tensor.hpp"

namespace pfsm {

struct LossWeights {
  double lambda_lmoe = 1.5;
  double lambda_kd = 0.1;
  double tau = 0.5;

  void validate() const;
};

// Mean binary cross-entropy over pixels, from raw logits, stable for large
// magnitudes. Labels must be exactly 0 or 1 and receive no gradient.
Tensor ce_loss(const Tensor& logits, const Tensor& labels);

// Distillation between sigmoid maps at temperature tau:
//   tau^2 * mean( softplus(zs/tau) - sigmoid(zt/tau) * zs/tau )
// which is the soft-target cross-entropy up to a constant in zs. Teacher
// logits are read as plain values; no gradient can reach them.
Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               double tau);

struct PersonalizedLossParts {
  Tensor total;
  Tensor ce;
  Tensor lmoe;
  Tensor kd;
};

// total = ce + lambda_lmoe * lmoe_aux + lambda_kd * kd. teacher_logits may be
// undefined when lambda_kd is zero.
PersonalizedLossParts personalized_loss_parts(const Tensor& student_logits,
                                              const Tensor& labels,
                                              const Tensor& teacher_logits,
                                              const Tensor& lmoe_aux,
                                              const LossWeights& w);

Tensor personalized_loss(const Tensor& student_logits, const Tensor& labels,
                         const Tensor& teacher_logits, const Tensor& lmoe_aux,
                         const LossWeights& w);

}  // namespace pfsm
