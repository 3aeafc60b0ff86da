#include "pfsm/nn.hpp"

#include <cmath>

namespace pfsm {

void LayerSpec::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string("LayerSpec: ") + what + " must be positive");
  };
  switch (kind) {
    case Kind::linear:
      positive(in_dim, "in_dim");
      positive(out_dim, "out_dim");
      break;
    case Kind::conv2d:
      positive(in_dim, "in_dim");
      positive(out_dim, "out_dim");
      positive(kernel, "kernel");
      if (kernel % 2 == 0) throw ConfigError("LayerSpec: conv kernel must be odd");
      break;
    case Kind::layernorm:
      positive(in_dim, "in_dim");
      break;
    case Kind::attention:
      positive(in_dim, "in_dim");
      positive(heads, "heads");
      if (in_dim % heads != 0)
        throw ConfigError("LayerSpec: attention dim must be divisible by heads");
      break;
    case Kind::patch_embed:
      positive(in_dim, "in_dim");
      positive(out_dim, "out_dim");
      positive(patch, "patch");
      break;
    case Kind::avgpool:
    case Kind::upsample:
      positive(factor, "factor");
      break;
  }
}

void kaiming_uniform(Tensor& t, int fan_in, Pcg32& stream) {
  double bound = std::sqrt(6.0 / fan_in);
  auto& v = t.raw_values();
  for (double& x : v) x = stream.uniform(-bound, bound);
}

Linear Linear::create(int in_dim, int out_dim, Pcg32& stream, bool trainable) {
  LayerSpec spec;
  spec.kind = LayerSpec::Kind::linear;
  spec.in_dim = in_dim;
  spec.out_dim = out_dim;
  spec.validate();
  Linear l;
  l.weight = Tensor::zeros({out_dim, in_dim}, trainable);
  kaiming_uniform(l.weight, in_dim, stream);
  l.bias = Tensor::zeros({out_dim}, trainable);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  return add_bias(matmul(x, transpose(weight)), bias);
}

LayerNormParams LayerNormParams::create(int dim, bool trainable) {
  LayerNormParams ln;
  ln.gamma = Tensor::full({dim}, 1.0, trainable);
  ln.beta = Tensor::zeros({dim}, trainable);
  return ln;
}

Tensor LayerNormParams::forward(const Tensor& x) const {
  return layer_norm(x, gamma, beta);
}

Conv2dLayer Conv2dLayer::create(int in_ch, int out_ch, int k, int padding,
                                Pcg32& stream, bool trainable) {
  LayerSpec spec;
  spec.kind = LayerSpec::Kind::conv2d;
  spec.in_dim = in_ch;
  spec.out_dim = out_ch;
  spec.kernel = k;
  spec.validate();
  Conv2dLayer c;
  c.kernel = Tensor::zeros({out_ch, in_ch, k, k}, trainable);
  kaiming_uniform(c.kernel, in_ch * k * k, stream);
  c.bias = Tensor::zeros({out_ch}, trainable);
  c.padding = padding;
  return c;
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return conv2d(x, kernel, bias, padding);
}

Tensor resample(const Tensor& x, ResampleMode mode, int factor) {
  if (mode == ResampleMode::avgpool_down) return avg_pool2d(x, factor);
  return upsample_nearest(x, factor);
}

Tensor multi_head_attention(const Tensor& tokens, const AttentionWeights& w,
                            const ProjHook& q_hook, const ProjHook& v_hook) {
  if (tokens.shape().size() != 2)
    throw ShapeError("multi_head_attention: tokens must be (T, d)");
  int d = tokens.shape()[1];
  if (w.heads <= 0 || d % w.heads != 0)
    throw ShapeError("multi_head_attention: embed dim must be divisible by heads");
  int head_dim = d / w.heads;

  Tensor q = q_hook ? q_hook(tokens, w.q) : w.q.forward(tokens);
  Tensor k = w.k.forward(tokens);
  Tensor v = v_hook ? v_hook(tokens, w.v) : w.v.forward(tokens);

  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads;
  heads.reserve(w.heads);
  for (int h = 0; h < w.heads; ++h) {
    Tensor qh = col_slice(q, h * head_dim, head_dim);
    Tensor kh = col_slice(k, h * head_dim, head_dim);
    Tensor vh = col_slice(v, h * head_dim, head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor probs = softmax_rows(scores);
    heads.push_back(matmul(probs, vh));
  }
  Tensor merged = w.heads == 1 ? heads[0] : concat_cols(heads);
  return w.out.forward(merged);
}

}  // namespace pfsm
