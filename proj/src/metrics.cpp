#include "pfsm/metrics.hpp"

#include <cmath>

#include "pfsm/errors.hpp"

namespace pfsm {

std::string model_kind_name(ModelKind k) {
  return k == ModelKind::personalized ? "personalized" : "global";
}

PixelCounts overlap_counts(const Tensor& pred_logits, const Tensor& mask, double threshold) {
  if (pred_logits.shape() != mask.shape()) {
    throw ShapeError("overlap_counts: logits and mask shapes differ");
  }
  const auto& z = pred_logits.values();
  const auto& m = mask.values();
  PixelCounts c;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (m[i] != 0.0 && m[i] != 1.0) throw ValidationError("overlap_counts mask is not binary");
    double p = 1.0 / (1.0 + std::exp(-z[i]));
    bool pred = p > threshold;
    bool truth = m[i] == 1.0;
    if (pred && truth) ++c.tp;
    else if (pred && !truth) ++c.fp;
    else if (!pred && truth) ++c.fn;
  }
  return c;
}

std::pair<double, double> dice_iou_from_counts(const PixelCounts& c) {
  std::uint64_t denom_iou = c.tp + c.fp + c.fn;
  if (denom_iou == 0) return {1.0, 1.0};
  double iou = static_cast<double>(c.tp) / static_cast<double>(denom_iou);
  double dice = static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  return {dice, iou};
}

std::pair<double, double> dice_iou(const Tensor& pred_logits, const Tensor& mask,
                                   double threshold) {
  return dice_iou_from_counts(overlap_counts(pred_logits, mask, threshold));
}

EvalResult evaluate(const SegModel& model, const std::vector<Sample>& samples,
                    const std::string& client_id, ModelKind kind, double threshold) {
  PixelCounts pooled;
  for (const auto& s : samples) {
    ForwardOut out = model.forward(s.image);
    pooled += overlap_counts(out.logits, s.downsampled_mask, threshold);
  }
  auto [dice, iou] = dice_iou_from_counts(pooled);
  EvalResult r;
  r.client_id = client_id;
  r.model_kind = kind;
  r.dice = dice;
  r.iou = iou;
  r.n_samples = static_cast<int>(samples.size());
  return r;
}

}  // namespace pfsm
