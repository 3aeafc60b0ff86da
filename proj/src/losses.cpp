#include "pfsm/losses.hpp"

#include <cmath>

namespace pfsm {

void LossWeights::validate() const {
  if (lambda_lmoe < 0) throw ValidationError("lambda_lmoe must be non-negative");
  if (lambda_kd < 0) throw ValidationError("lambda_kd must be non-negative");
  if (!(tau > 0)) throw ValidationError("tau must be positive");
}

Tensor ce_loss(const Tensor& logits, const Tensor& labels) {
  if (logits.shape() != labels.shape())
    throw ShapeError("ce_loss: logits and labels must share a shape");
  for (double v : labels.values())
    if (v != 0.0 && v != 1.0)
      throw ValidationError("ce_loss: labels must be exactly 0 or 1");
  return bce_with_logits_mean(logits, labels);
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
               double tau) {
  if (!(tau > 0)) throw ValidationError("kd_loss: tau must be positive");
  if (student_logits.shape() != teacher_logits.shape())
    throw ShapeError("kd_loss: student and teacher shapes differ");
  int n = teacher_logits.numel();
  std::vector<double> soft(n);
  const auto& tv = teacher_logits.values();
  for (int i = 0; i < n; ++i) {
    double z = tv[i] / tau;
    soft[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  Tensor targets = Tensor::from_vector(teacher_logits.shape(), std::move(soft));
  Tensor scaled_student = scale(student_logits, 1.0 / tau);
  return scale(bce_with_logits_mean(scaled_student, targets), tau * tau);
}

PersonalizedLossParts personalized_loss_parts(const Tensor& student_logits,
                                              const Tensor& labels,
                                              const Tensor& teacher_logits,
                                              const Tensor& lmoe_aux,
                                              const LossWeights& w) {
  w.validate();
  PersonalizedLossParts parts;
  parts.ce = ce_loss(student_logits, labels);
  parts.lmoe = lmoe_aux.defined() ? lmoe_aux : Tensor::scalar(0.0);
  if (w.lambda_kd != 0.0) {
    if (!teacher_logits.defined())
      throw ValidationError("personalized_loss: teacher logits required when lambda_kd > 0");
    parts.kd = kd_loss(student_logits, teacher_logits, w.tau);
  } else {
    parts.kd = Tensor::scalar(0.0);
  }
  parts.total = add(parts.ce, add(scale(parts.lmoe, w.lambda_lmoe),
                                  scale(parts.kd, w.lambda_kd)));
  return parts;
}

Tensor personalized_loss(const Tensor& student_logits, const Tensor& labels,
                         const Tensor& teacher_logits, const Tensor& lmoe_aux,
                         const LossWeights& w) {
  return personalized_loss_parts(student_logits, labels, teacher_logits, lmoe_aux, w)
      .total;
}

}  // namespace pfsm
