#pragma once

#include <string>
#include <vector>

#include "pfsm/rng.hpp"
#include "pfsm/tensor.hpp"

namespace pfsm {

// Low-rank bypass around a frozen projection W0 (d, k):
//   h = W0 x + (alpha / rank) * B (A x)
// A starts uniform(-1/sqrt(k), 1/sqrt(k)), B starts zero, so a fresh adapter
// is an exact no-op.
struct LoraAdapter {
  Tensor A;  // (rank, k)
  Tensor B;  // (d, rank)
  int rank = 0;
  double alpha = 0.0;
  std::string target_name;

  static LoraAdapter create(int d, int k, int rank, double alpha,
                            std::string target_name, Pcg32& stream,
                            bool trainable = true);
  double scaling() const { return alpha / rank; }
};

// One localized expert: pool down by `scale`, 3x3 conv (padding 1), nearest
// upsample back. Kernel and bias start at zero.
struct ConvExpert {
  int scale = 1;
  Tensor kernel;  // (rank, rank, 3, 3)
  Tensor bias;    // (rank)
};

// LoRA pair with a gated mixture of conv experts between A and B. The gate
// and experts are the client-private part of the model.
struct LmoeAdapter {
  Tensor A;             // (rank, k)
  Tensor B;             // (d, rank)
  Tensor gate_weights;  // (experts, rank)
  std::vector<ConvExpert> experts;
  int top_k = 0;
  int rank = 0;
  double alpha = 0.0;
  std::string target_name;

  static LmoeAdapter create(int d, int k, int rank, double alpha, int experts,
                            int top_k, std::string target_name, Pcg32& stream,
                            bool trainable = true);
  double scaling() const { return alpha / rank; }
};

// Expert resolutions cycle through full and half scale: (1,1,2,2) for m=4.
std::vector<int> expert_scales(int experts);

struct GateDecision {
  std::vector<int> experts;     // selected expert ids, ascending
  std::vector<double> weights;  // renormalized gate probs, sum to 1
};

// x is (k) or (T, k); result matches the input rank.
Tensor lora_forward(const LoraAdapter& adapter, const Tensor& W0, const Tensor& x);

// Top-k routing from softmaxed gate logits; ties break toward the lower
// expert index. ax_tokens is (T, rank) or (rank).
std::vector<GateDecision> gate(const LmoeAdapter& adapter, const Tensor& ax_tokens);

struct LmoeResult {
  Tensor output;      // same rank as the input tokens
  Tensor gate_probs;  // (T, experts), graph-connected
  std::vector<GateDecision> decisions;
};

// Full mixture forward. Tokens are laid out on a (grid_h, grid_w) grid for
// the conv experts; every expert scale must divide both grid sides.
LmoeResult lmoe_forward(const LmoeAdapter& adapter, const Tensor& W0,
                        const Tensor& x_tokens, int grid_h, int grid_w);

// Switch-style usage penalty: experts * sum_i routed_fraction_i * mean_prob_i.
// 1.0 under perfectly uniform routing, `experts` under full collapse.
Tensor load_balance_loss(const Tensor& gate_probs,
                         const std::vector<GateDecision>& decisions);

}  // namespace pfsm
