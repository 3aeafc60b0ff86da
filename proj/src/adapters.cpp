#include "pfsm/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pfsm/nn.hpp"

namespace pfsm {

namespace {

void check_rank(int rank, int d, int k) {
  if (rank <= 0) throw ValidationError("adapter: rank must be positive");
  if (rank >= std::min(d, k))
    throw ValidationError("adapter: rank must be below min(d, k)");
}

void lora_init(Tensor& A, int k, Pcg32& stream) {
  double bound = 1.0 / std::sqrt(static_cast<double>(k));
  for (double& v : A.raw_values()) v = stream.uniform(-bound, bound);
}

// Reshape a bare (k) vector to a single-token row so every path below can
// assume (T, k).
Tensor as_rows(const Tensor& x, int expect_cols, const char* who) {
  if (x.shape().size() == 1) {
    if (x.shape()[0] != expect_cols)
      throw ShapeError(std::string(who) + ": input length mismatch");
    return reshape(x, {1, x.shape()[0]});
  }
  if (x.shape().size() != 2 || x.shape()[1] != expect_cols)
    throw ShapeError(std::string(who) + ": expected (T, " +
                     std::to_string(expect_cols) + ") input");
  return x;
}

std::vector<GateDecision> decide_topk(const std::vector<double>& probs, int t,
                                      int m, int top_k) {
  std::vector<GateDecision> out(t);
  std::vector<int> idx(m);
  for (int r = 0; r < t; ++r) {
    std::iota(idx.begin(), idx.end(), 0);
    const double* p = &probs[static_cast<std::size_t>(r) * m];
    std::stable_sort(idx.begin(), idx.end(),
                     [p](int a, int b) { return p[a] > p[b]; });
    std::vector<int> chosen(idx.begin(), idx.begin() + top_k);
    std::sort(chosen.begin(), chosen.end());
    double mass = 0.0;
    for (int e : chosen) mass += p[e];
    GateDecision& d = out[r];
    d.experts = chosen;
    d.weights.reserve(top_k);
    for (int e : chosen) d.weights.push_back(p[e] / mass);
  }
  return out;
}

Tensor gate_probs_graph(const LmoeAdapter& adapter, const Tensor& ax_rows) {
  return softmax_rows(matmul(ax_rows, transpose(adapter.gate_weights)));
}

}  // namespace

std::vector<int> expert_scales(int experts) {
  if (experts <= 0) throw ValidationError("expert_scales: experts must be positive");
  std::vector<int> scales(experts);
  int full = (experts + 1) / 2;
  for (int i = 0; i < experts; ++i) scales[i] = i < full ? 1 : 2;
  return scales;
}

LoraAdapter LoraAdapter::create(int d, int k, int rank, double alpha,
                                std::string target_name, Pcg32& stream,
                                bool trainable) {
  check_rank(rank, d, k);
  if (alpha <= 0) throw ValidationError("adapter: alpha must be positive");
  LoraAdapter a;
  a.A = Tensor::zeros({rank, k}, trainable);
  lora_init(a.A, k, stream);
  a.B = Tensor::zeros({d, rank}, trainable);
  a.rank = rank;
  a.alpha = alpha;
  a.target_name = std::move(target_name);
  return a;
}

LmoeAdapter LmoeAdapter::create(int d, int k, int rank, double alpha, int experts,
                                int top_k, std::string target_name, Pcg32& stream,
                                bool trainable) {
  check_rank(rank, d, k);
  if (alpha <= 0) throw ValidationError("adapter: alpha must be positive");
  if (experts <= 0) throw ValidationError("adapter: experts must be positive");
  if (top_k <= 0 || top_k > experts)
    throw ValidationError("adapter: top_k must lie in [1, experts]");
  LmoeAdapter a;
  a.A = Tensor::zeros({rank, k}, trainable);
  lora_init(a.A, k, stream);
  a.B = Tensor::zeros({d, rank}, trainable);
  a.gate_weights = Tensor::zeros({experts, rank}, trainable);
  auto scales = expert_scales(experts);
  a.experts.reserve(experts);
  for (int i = 0; i < experts; ++i) {
    ConvExpert e;
    e.scale = scales[i];
    e.kernel = Tensor::zeros({rank, rank, 3, 3}, trainable);
    e.bias = Tensor::zeros({rank}, trainable);
    a.experts.push_back(std::move(e));
  }
  a.top_k = top_k;
  a.rank = rank;
  a.alpha = alpha;
  a.target_name = std::move(target_name);
  return a;
}

Tensor lora_forward(const LoraAdapter& adapter, const Tensor& W0, const Tensor& x) {
  if (W0.shape().size() != 2) throw ShapeError("lora_forward: W0 must be (d, k)");
  int k = W0.shape()[1];
  bool vector_in = x.shape().size() == 1;
  Tensor rows = as_rows(x, k, "lora_forward");
  Tensor base = matmul(rows, transpose(W0));
  Tensor down = matmul(rows, transpose(adapter.A));
  Tensor bypass = scale(matmul(down, transpose(adapter.B)), adapter.scaling());
  Tensor out = add(base, bypass);
  if (vector_in) return reshape(out, {W0.shape()[0]});
  return out;
}

std::vector<GateDecision> gate(const LmoeAdapter& adapter, const Tensor& ax_tokens) {
  Tensor rows = as_rows(ax_tokens, adapter.rank, "gate");
  Tensor probs = gate_probs_graph(adapter, rows.detach());
  int t = rows.shape()[0];
  int m = adapter.gate_weights.shape()[0];
  return decide_topk(probs.values(), t, m, adapter.top_k);
}

LmoeResult lmoe_forward(const LmoeAdapter& adapter, const Tensor& W0,
                        const Tensor& x_tokens, int grid_h, int grid_w) {
  if (W0.shape().size() != 2) throw ShapeError("lmoe_forward: W0 must be (d, k)");
  int k = W0.shape()[1];
  bool vector_in = x_tokens.shape().size() == 1;
  Tensor rows = as_rows(x_tokens, k, "lmoe_forward");
  int t = rows.shape()[0];
  if (t != grid_h * grid_w)
    throw ShapeError("lmoe_forward: token count must equal grid_h * grid_w");
  int m = adapter.gate_weights.shape()[0];

  Tensor base = matmul(rows, transpose(W0));
  Tensor ax = matmul(rows, transpose(adapter.A));  // (T, rank)

  Tensor probs = gate_probs_graph(adapter, ax);
  std::vector<GateDecision> decisions = decide_topk(probs.values(), t, m, adapter.top_k);

  std::vector<std::uint8_t> selected(static_cast<std::size_t>(t) * m, 0);
  for (int r = 0; r < t; ++r)
    for (int e : decisions[r].experts) selected[r * m + e] = 1;
  Tensor weights = row_renormalize(probs, selected);  // (T, m)

  Tensor grid = tokens_to_grid(ax, grid_h, grid_w);  // (rank, h, w)
  Tensor mixed;
  for (int i = 0; i < m; ++i) {
    bool used = false;
    for (int r = 0; r < t && !used; ++r) used = selected[r * m + i] != 0;
    if (!used) continue;
    const ConvExpert& ex = adapter.experts[i];
    Tensor e = resample(grid, ResampleMode::avgpool_down, ex.scale);
    e = conv2d(e, ex.kernel, ex.bias, 1);
    e = resample(e, ResampleMode::nearest_up, ex.scale);
    Tensor tokens = grid_to_tokens(e);  // (T, rank)
    Tensor weighted = mul_colvec(tokens, reshape(col_slice(weights, i, 1), {t}));
    mixed = mixed.defined() ? add(mixed, weighted) : weighted;
  }
  Tensor bypass = scale(matmul(mixed, transpose(adapter.B)), adapter.scaling());

  LmoeResult result;
  result.output = add(base, bypass);
  if (vector_in) result.output = reshape(result.output, {W0.shape()[0]});
  result.gate_probs = probs;
  result.decisions = std::move(decisions);
  return result;
}

Tensor load_balance_loss(const Tensor& gate_probs,
                         const std::vector<GateDecision>& decisions) {
  if (gate_probs.shape().size() != 2)
    throw ShapeError("load_balance_loss: gate_probs must be (T, experts)");
  int t = gate_probs.shape()[0];
  int m = gate_probs.shape()[1];
  if (static_cast<int>(decisions.size()) != t)
    throw ShapeError("load_balance_loss: one decision per token required");
  std::vector<double> routed(m, 0.0);
  std::size_t slots = 0;
  for (const GateDecision& d : decisions) {
    for (int e : d.experts) {
      if (e < 0 || e >= m) throw ShapeError("load_balance_loss: expert id out of range");
      routed[e] += 1.0;
      ++slots;
    }
  }
  for (double& f : routed) f /= static_cast<double>(slots);
  return balance_penalty(gate_probs, routed);
}

}  // namespace pfsm
