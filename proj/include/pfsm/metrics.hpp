#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pfsm/data.hpp"
#include "pfsm/segmodel.hpp"
#include "pfsm/tensor.hpp"

namespace pfsm {

enum class ModelKind { personalized, global_model };

std::string model_kind_name(ModelKind k);

struct PixelCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  PixelCounts& operator+=(const PixelCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

// Predicted foreground = sigmoid(logit) > threshold.
PixelCounts overlap_counts(const Tensor& pred_logits, const Tensor& mask,
                           double threshold = 0.5);

// Dice and IoU from pooled counts; an empty prediction against an empty
// mask scores 1 for both.
std::pair<double, double> dice_iou_from_counts(const PixelCounts& c);
std::pair<double, double> dice_iou(const Tensor& pred_logits, const Tensor& mask,
                                   double threshold = 0.5);

struct EvalResult {
  std::string client_id;
  ModelKind model_kind = ModelKind::global_model;
  double dice = 0.0;
  double iou = 0.0;
  int n_samples = 0;
};

// Micro-averaged over all pixels of all samples (counts are pooled before
// the ratio is taken).
EvalResult evaluate(const SegModel& model, const std::vector<Sample>& samples,
                    const std::string& client_id, ModelKind kind,
                    double threshold = 0.5);

}  // namespace pfsm
