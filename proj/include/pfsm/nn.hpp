#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "pfsm/rng.hpp"
#include "pfsm/tensor.hpp"

namespace pfsm {

// Validated description of a single layer. Construction helpers below consume
// the dims; init draws come from a caller-supplied stream so that identical
// (seed, label) pairs rebuild identical layers.
struct LayerSpec {
  enum class Kind { linear, conv2d, layernorm, attention, patch_embed, avgpool, upsample };
  Kind kind = Kind::linear;
  int in_dim = 0;
  int out_dim = 0;
  int kernel = 0;
  int heads = 0;
  int patch = 0;
  int factor = 0;
  std::uint64_t init_seed = 0;

  void validate() const;
};

// Kaiming-uniform fill: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
void kaiming_uniform(Tensor& t, int fan_in, Pcg32& stream);

struct Linear {
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)

  static Linear create(int in_dim, int out_dim, Pcg32& stream, bool trainable);
  // x (T, in) -> (T, out)
  Tensor forward(const Tensor& x) const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams create(int dim, bool trainable);
  Tensor forward(const Tensor& x) const;
};

struct Conv2dLayer {
  Tensor kernel;  // (co, ci, k, k)
  Tensor bias;    // (co)
  int padding = 0;

  static Conv2dLayer create(int in_ch, int out_ch, int k, int padding,
                            Pcg32& stream, bool trainable);
  Tensor forward(const Tensor& x) const;
};

// Pooling / upsampling behind one switch, factor 1 is identity.
enum class ResampleMode { avgpool_down, nearest_up };
Tensor resample(const Tensor& x, ResampleMode mode, int factor);

struct AttentionWeights {
  Linear q, k, v, out;
  int heads = 0;
};

// Replaces the plain projection of one attention input; used to splice
// adapters onto Q and V without the attention code knowing about them.
using ProjHook = std::function<Tensor(const Tensor& x, const Linear& base)>;

// Pre-normalized tokens in, attended tokens out (residual is the caller's
// job). Scores are scaled by 1/sqrt(head_dim) and softmaxed per row.
Tensor multi_head_attention(const Tensor& tokens, const AttentionWeights& w,
                            const ProjHook& q_hook = nullptr,
                            const ProjHook& v_hook = nullptr);

}  // namespace pfsm
