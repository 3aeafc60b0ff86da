#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pfsm/errors.hpp"

namespace pfsm {

using Shape = std::vector<int>;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first use
  bool requires_grad = false;
  const char* op = nullptr;  // null for leaves
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  int numel() const { return static_cast<int>(data.size()); }
};

}  // namespace detail

// Value handle onto a node of the reverse-mode graph. Ops are free functions;
// the op set is closed: adding one means adding its backward rule here and a
// finite-difference check to the gradient suite.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int numel() const;
  bool requires_grad() const;

  const std::vector<double>& values() const;
  // Mutable access to leaf storage (parameter init, optimizer steps,
  // finite-difference probes). Must not be used on op outputs.
  std::vector<double>& raw_values();

  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if never populated
  void zero_grad();

  double item() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  // Value copy with no graph history and no grad requirement.
  Tensor detach() const;
  // Fresh leaf sharing nothing with this tensor.
  Tensor clone_leaf(bool requires_grad) const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

using ParamMap = std::map<std::string, Tensor>;

// ---- elementwise / broadcast ----
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // same shape
Tensor scale(const Tensor& x, double s);
// x (..., d) + bias (d): the only broadcast form supported.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x (T, d) scaled per row by col (T) or (T, 1).
Tensor mul_colvec(const Tensor& x, const Tensor& col);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// ---- linear algebra / layout ----
Tensor matmul(const Tensor& a, const Tensor& b);     // (n,m)x(m,p)
Tensor transpose(const Tensor& x);                   // 2-D
Tensor reshape(const Tensor& x, Shape shape);
Tensor col_slice(const Tensor& x, int start, int len);
Tensor concat_cols(const std::vector<Tensor>& xs);
// (T, c) tokens in row-major grid order -> (c, h, w) feature grid.
Tensor tokens_to_grid(const Tensor& tokens, int h, int w);
Tensor grid_to_tokens(const Tensor& grid);
// (c, s, s) image -> (T, c*p*p) patch rows, features ordered (c, py, px).
Tensor patchify(const Tensor& image, int patch);

// ---- normalization / attention pieces ----
Tensor softmax_rows(const Tensor& x);                // 2-D, rows sum to 1
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// ---- spatial ----
// input (ci, h, w), kernel (co, ci, k, k) with odd k, stride 1, zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int padding);
Tensor avg_pool2d(const Tensor& x, int factor);
Tensor upsample_nearest(const Tensor& x, int factor);

// ---- reductions / fused losses ----
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
// mean over elements of softplus(z) - t*z; targets are treated as constants.
// Stable for large |z|; exact binary cross-entropy when t is 0/1.
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);
// w[t,i] = p[t,i]*mask[t,i] / sum_j p[t,j]*mask[t,j]; mask is constant 0/1.
Tensor row_renormalize(const Tensor& probs, const std::vector<std::uint8_t>& mask);
// m * sum_i f_i * colmean_i(probs); f (routed fractions) is constant.
Tensor balance_penalty(const Tensor& probs, const std::vector<double>& routed_fraction);

// Reverse pass from a scalar loss. Gradients accumulate into .grad of every
// reachable requires_grad node; leaves keep accumulating across calls until
// zero_grad. A detached loss is a no-op.
void backward(const Tensor& loss);

// Convenience: zero param grads, backward, then collect per-name gradients.
// Unreachable params report zeros. A detached loss yields an empty map.
std::map<std::string, std::vector<double>> grad_map(const Tensor& loss,
                                                    const ParamMap& params);

}  // namespace pfsm
