#include "pfsm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>
#include <utility>

namespace pfsm {

namespace {

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + ")";
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

using Node = detail::TensorNode;

Tensor make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor::wrap(std::move(n));
}

Tensor make_node(const char* op, std::vector<Tensor> parents, Shape shape,
                 std::vector<double> data, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->op = op;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(n));
}

double softplus(double z) {
  if (z > 0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

double sigmoid_val(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---- Tensor handle ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int>(values.size()))
    throw ShapeError("from_vector: element count does not match shape");
  return make_leaf(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("shape() on undefined tensor");
  return node_->shape;
}

int Tensor::numel() const {
  if (!node_) throw ShapeError("numel() on undefined tensor");
  return node_->numel();
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<double>& Tensor::values() const {
  if (!node_) throw ShapeError("values() on undefined tensor");
  return node_->data;
}

std::vector<double>& Tensor::raw_values() {
  if (!node_) throw ShapeError("raw_values() on undefined tensor");
  if (node_->op) throw ShapeError("raw_values() is only valid on leaf tensors");
  return node_->data;
}

bool Tensor::has_grad() const {
  return node_ && node_->grad.size() == node_->data.size();
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw NumericError("grad() requested but no gradient populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a scalar tensor");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw ShapeError("at(): index rank mismatch");
  int flat = 0;
  int i = 0;
  for (int v : idx) {
    if (v < 0 || v >= s[i]) throw ShapeError("at(): index out of range");
    flat = flat * s[i] + v;
    ++i;
  }
  return node_->data[flat];
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  return make_leaf(node_->shape, node_->data, false);
}

Tensor Tensor::clone_leaf(bool requires_grad) const {
  if (!node_) return Tensor();
  return make_leaf(node_->shape, node_->data, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  int n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  return make_node("add", {a, b}, a.shape(), std::move(out), [](Node& self) {
    for (int p = 0; p < 2; ++p) {
      Node& par = *self.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      for (int i = 0; i < par.numel(); ++i) par.grad[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  int n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  return make_node("mul", {a, b}, a.shape(), std::move(out), [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int i = 0; i < pa.numel(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int i = 0; i < pb.numel(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  int n = x.numel();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (int i = 0; i < n; ++i) out[i] = xv[i] * s;
  return make_node("scale", {x}, x.shape(), std::move(out), [s](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < p.numel(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.shape().size() != 1)
    throw ShapeError("add_bias: bias must be rank 1");
  int d = bias.shape()[0];
  if (x.shape().empty() || x.shape().back() != d)
    throw ShapeError("add_bias: trailing dimension of x must match bias length");
  int n = x.numel();
  int rows = n / d;
  std::vector<double> out(n);
  const auto& xv = x.values();
  const auto& bv = bias.values();
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[j];
  return make_node("add_bias", {x, bias}, x.shape(), std::move(out),
                   [rows, d](Node& self) {
                     Node& px = *self.parents[0];
                     Node& pb = *self.parents[1];
                     if (px.requires_grad) {
                       px.ensure_grad();
                       for (int i = 0; i < px.numel(); ++i) px.grad[i] += self.grad[i];
                     }
                     if (pb.requires_grad) {
                       pb.ensure_grad();
                       for (int r = 0; r < rows; ++r)
                         for (int j = 0; j < d; ++j) pb.grad[j] += self.grad[r * d + j];
                     }
                   });
}

Tensor mul_colvec(const Tensor& x, const Tensor& col) {
  if (x.shape().size() != 2) throw ShapeError("mul_colvec: x must be rank 2");
  int t = x.shape()[0];
  int d = x.shape()[1];
  if (col.numel() != t) throw ShapeError("mul_colvec: column length must equal row count");
  std::vector<double> out(static_cast<std::size_t>(t) * d);
  const auto& xv = x.values();
  const auto& cv = col.values();
  for (int r = 0; r < t; ++r)
    for (int j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * cv[r];
  return make_node("mul_colvec", {x, col}, x.shape(), std::move(out),
                   [t, d](Node& self) {
                     Node& px = *self.parents[0];
                     Node& pc = *self.parents[1];
                     if (px.requires_grad) {
                       px.ensure_grad();
                       for (int r = 0; r < t; ++r)
                         for (int j = 0; j < d; ++j)
                           px.grad[r * d + j] += self.grad[r * d + j] * pc.data[r];
                     }
                     if (pc.requires_grad) {
                       pc.ensure_grad();
                       for (int r = 0; r < t; ++r) {
                         double acc = 0.0;
                         for (int j = 0; j < d; ++j)
                           acc += self.grad[r * d + j] * px.data[r * d + j];
                         pc.grad[r] += acc;
                       }
                     }
                   });
}

Tensor relu(const Tensor& x) {
  int n = x.numel();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (int i = 0; i < n; ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_node("relu", {x}, x.shape(), std::move(out), [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < p.numel(); ++i)
      if (p.data[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  int n = x.numel();
  std::vector<double> out(n);
  const auto& xv = x.values();
  for (int i = 0; i < n; ++i) out[i] = sigmoid_val(xv[i]);
  return make_node("sigmoid", {x}, x.shape(), std::move(out), [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < p.numel(); ++i) {
      double s = self.data[i];
      p.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

// ---- linear algebra / layout ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ShapeError("matmul: both operands must be rank 2");
  int n = a.shape()[0];
  int m = a.shape()[1];
  int p = b.shape()[1];
  if (b.shape()[0] != m)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(n) * p, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < n; ++i) {
    const double* arow = &av[static_cast<std::size_t>(i) * m];
    double* orow = &out[static_cast<std::size_t>(i) * p];
    for (int k = 0; k < m; ++k) {
      double aik = arow[k];
      const double* brow = &bv[static_cast<std::size_t>(k) * p];
      for (int j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
  return make_node("matmul", {a, b}, {n, p}, std::move(out), [n, m, p](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();  // dA = G * B^T
      for (int i = 0; i < n; ++i) {
        const double* grow = &self.grad[static_cast<std::size_t>(i) * p];
        double* arow = &pa.grad[static_cast<std::size_t>(i) * m];
        for (int k = 0; k < m; ++k) {
          const double* brow = &pb.data[static_cast<std::size_t>(k) * p];
          double acc = 0.0;
          for (int j = 0; j < p; ++j) acc += grow[j] * brow[j];
          arow[k] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();  // dB = A^T * G
      for (int k = 0; k < m; ++k) {
        double* brow = &pb.grad[static_cast<std::size_t>(k) * p];
        for (int i = 0; i < n; ++i) {
          double aik = pa.data[static_cast<std::size_t>(i) * m + k];
          const double* grow = &self.grad[static_cast<std::size_t>(i) * p];
          for (int j = 0; j < p; ++j) brow[j] += aik * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& x) {
  if (x.shape().size() != 2) throw ShapeError("transpose: rank 2 required");
  int r = x.shape()[0];
  int c = x.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(r) * c);
  const auto& xv = x.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = xv[static_cast<std::size_t>(i) * c + j];
  return make_node("transpose", {x}, {c, r}, std::move(out), [r, c](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        p.grad[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: element count mismatch");
  return make_node("reshape", {x}, std::move(shape), x.values(), [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < p.numel(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor col_slice(const Tensor& x, int start, int len) {
  if (x.shape().size() != 2) throw ShapeError("col_slice: rank 2 required");
  int t = x.shape()[0];
  int d = x.shape()[1];
  if (start < 0 || len <= 0 || start + len > d)
    throw ShapeError("col_slice: column range out of bounds");
  std::vector<double> out(static_cast<std::size_t>(t) * len);
  const auto& xv = x.values();
  for (int r = 0; r < t; ++r)
    for (int j = 0; j < len; ++j) out[r * len + j] = xv[r * d + start + j];
  return make_node("col_slice", {x}, {t, len}, std::move(out),
                   [t, d, start, len](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int r = 0; r < t; ++r)
                       for (int j = 0; j < len; ++j)
                         p.grad[r * d + start + j] += self.grad[r * len + j];
                   });
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_cols: empty input list");
  int t = xs[0].shape().size() == 2 ? xs[0].shape()[0] : -1;
  if (t < 0) throw ShapeError("concat_cols: rank 2 required");
  int total = 0;
  std::vector<int> widths;
  for (const Tensor& x : xs) {
    if (x.shape().size() != 2 || x.shape()[0] != t)
      throw ShapeError("concat_cols: row counts must match");
    widths.push_back(x.shape()[1]);
    total += x.shape()[1];
  }
  std::vector<double> out(static_cast<std::size_t>(t) * total);
  int off = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto& xv = xs[i].values();
    int w = widths[i];
    for (int r = 0; r < t; ++r)
      for (int j = 0; j < w; ++j) out[r * total + off + j] = xv[r * w + j];
    off += w;
  }
  return make_node("concat_cols", xs, {t, total}, std::move(out),
                   [t, total, widths](Node& self) {
                     int off = 0;
                     for (std::size_t i = 0; i < self.parents.size(); ++i) {
                       Node& p = *self.parents[i];
                       int w = widths[i];
                       if (p.requires_grad) {
                         p.ensure_grad();
                         for (int r = 0; r < t; ++r)
                           for (int j = 0; j < w; ++j)
                             p.grad[r * w + j] += self.grad[r * total + off + j];
                       }
                       off += w;
                     }
                   });
}

Tensor tokens_to_grid(const Tensor& tokens, int h, int w) {
  if (tokens.shape().size() != 2) throw ShapeError("tokens_to_grid: rank 2 required");
  int t = tokens.shape()[0];
  int c = tokens.shape()[1];
  if (t != h * w) throw ShapeError("tokens_to_grid: token count must equal h*w");
  std::vector<double> out(static_cast<std::size_t>(c) * h * w);
  const auto& xv = tokens.values();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < t; ++i) out[ch * t + i] = xv[i * c + ch];
  return make_node("tokens_to_grid", {tokens}, {c, h, w}, std::move(out),
                   [t, c](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int ch = 0; ch < c; ++ch)
                       for (int i = 0; i < t; ++i)
                         p.grad[i * c + ch] += self.grad[ch * t + i];
                   });
}

Tensor grid_to_tokens(const Tensor& grid) {
  if (grid.shape().size() != 3) throw ShapeError("grid_to_tokens: rank 3 required");
  int c = grid.shape()[0];
  int h = grid.shape()[1];
  int w = grid.shape()[2];
  int t = h * w;
  std::vector<double> out(static_cast<std::size_t>(t) * c);
  const auto& xv = grid.values();
  for (int i = 0; i < t; ++i)
    for (int ch = 0; ch < c; ++ch) out[i * c + ch] = xv[ch * t + i];
  return make_node("grid_to_tokens", {grid}, {t, c}, std::move(out),
                   [t, c](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int i = 0; i < t; ++i)
                       for (int ch = 0; ch < c; ++ch)
                         p.grad[ch * t + i] += self.grad[i * c + ch];
                   });
}

Tensor patchify(const Tensor& image, int patch) {
  if (image.shape().size() != 3) throw ShapeError("patchify: rank 3 required");
  int c = image.shape()[0];
  int h = image.shape()[1];
  int w = image.shape()[2];
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: image sides must be divisible by patch size");
  int gh = h / patch;
  int gw = w / patch;
  int t = gh * gw;
  int f = c * patch * patch;
  std::vector<double> out(static_cast<std::size_t>(t) * f);
  const auto& xv = image.values();
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      int tok = gy * gw + gx;
      for (int ch = 0; ch < c; ++ch)
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px) {
            int src = (ch * h + gy * patch + py) * w + gx * patch + px;
            int dst = tok * f + (ch * patch + py) * patch + px;
            out[dst] = xv[src];
          }
    }
  return make_node("patchify", {image}, {t, f}, std::move(out),
                   [c, h, w, patch, gh, gw, f](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int gy = 0; gy < gh; ++gy)
                       for (int gx = 0; gx < gw; ++gx) {
                         int tok = gy * gw + gx;
                         for (int ch = 0; ch < c; ++ch)
                           for (int py = 0; py < patch; ++py)
                             for (int px = 0; px < patch; ++px) {
                               int src = (ch * h + gy * patch + py) * w + gx * patch + px;
                               int dst = tok * f + (ch * patch + py) * patch + px;
                               p.grad[src] += self.grad[dst];
                             }
                       }
                   });
}

// ---- normalization ----

Tensor softmax_rows(const Tensor& x) {
  if (x.shape().size() != 2) throw ShapeError("softmax_rows: rank 2 required");
  int t = x.shape()[0];
  int d = x.shape()[1];
  const auto& xv = x.values();
  for (double v : xv)
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
  std::vector<double> out(static_cast<std::size_t>(t) * d);
  for (int r = 0; r < t; ++r) {
    const double* row = &xv[static_cast<std::size_t>(r) * d];
    double mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      double e = std::exp(row[j] - mx);
      out[r * d + j] = e;
      sum += e;
    }
    for (int j = 0; j < d; ++j) out[r * d + j] /= sum;
  }
  return make_node("softmax_rows", {x}, x.shape(), std::move(out), [t, d](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int r = 0; r < t; ++r) {
      const double* s = &self.data[static_cast<std::size_t>(r) * d];
      const double* g = &self.grad[static_cast<std::size_t>(r) * d];
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += g[j] * s[j];
      for (int j = 0; j < d; ++j) p.grad[r * d + j] += (g[j] - dot) * s[j];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.shape().size() != 2) throw ShapeError("layer_norm: rank 2 required");
  int t = x.shape()[0];
  int d = x.shape()[1];
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: gamma/beta length must equal feature dim");
  constexpr double kEps = 1e-8;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(static_cast<std::size_t>(t) * d);
  std::vector<double> mean(t), inv_std(t);
  for (int r = 0; r < t; ++r) {
    const double* row = &xv[static_cast<std::size_t>(r) * d];
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - mu;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + kEps);
    mean[r] = mu;
    inv_std[r] = is;
    for (int j = 0; j < d; ++j)
      out[r * d + j] = gv[j] * (row[j] - mu) * is + bv[j];
  }
  return make_node("layer_norm", {x, gamma, beta}, x.shape(), std::move(out),
                   [t, d, mean, inv_std](Node& self) {
                     Node& px = *self.parents[0];
                     Node& pg = *self.parents[1];
                     Node& pb = *self.parents[2];
                     for (int r = 0; r < t; ++r) {
                       const double* xr = &px.data[static_cast<std::size_t>(r) * d];
                       const double* g = &self.grad[static_cast<std::size_t>(r) * d];
                       double mu = mean[r];
                       double is = inv_std[r];
                       if (pg.requires_grad || pb.requires_grad) {
                         pg.ensure_grad();
                         pb.ensure_grad();
                         for (int j = 0; j < d; ++j) {
                           double xhat = (xr[j] - mu) * is;
                           pg.grad[j] += g[j] * xhat;
                           pb.grad[j] += g[j];
                         }
                       }
                       if (px.requires_grad) {
                         px.ensure_grad();
                         const double* gw = &pg.data[0];
                         double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                         for (int j = 0; j < d; ++j) {
                           double xhat = (xr[j] - mu) * is;
                           double dxhat = g[j] * gw[j];
                           sum_dxhat += dxhat;
                           sum_dxhat_xhat += dxhat * xhat;
                         }
                         for (int j = 0; j < d; ++j) {
                           double xhat = (xr[j] - mu) * is;
                           px.grad[r * d + j] +=
                               is * (g[j] * gw[j] - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                         }
                       }
                     }
                   });
}

// ---- spatial ----

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding) {
  if (input.shape().size() != 3) throw ShapeError("conv2d: input must be (c,h,w)");
  if (kernel.shape().size() != 4) throw ShapeError("conv2d: kernel must be (co,ci,k,k)");
  int ci = input.shape()[0];
  int h = input.shape()[1];
  int w = input.shape()[2];
  int co = kernel.shape()[0];
  int k = kernel.shape()[2];
  if (kernel.shape()[1] != ci) throw ShapeError("conv2d: channel mismatch");
  if (kernel.shape()[3] != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd side");
  if (bias.numel() != co) throw ShapeError("conv2d: bias length must equal output channels");
  if (padding < 0) throw ShapeError("conv2d: negative padding");
  int ho = h + 2 * padding - k + 1;
  int wo = w + 2 * padding - k + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty");
  const auto& xv = input.values();
  const auto& kv = kernel.values();
  const auto& bv = bias.values();
  std::vector<double> out(static_cast<std::size_t>(co) * ho * wo);
  for (int oc = 0; oc < co; ++oc) {
    for (int y = 0; y < ho; ++y)
      for (int x = 0; x < wo; ++x) out[(oc * ho + y) * wo + x] = bv[oc];
    for (int ic = 0; ic < ci; ++ic)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double kval = kv[((oc * ci + ic) * k + ky) * k + kx];
          if (kval == 0.0) continue;
          for (int y = 0; y < ho; ++y) {
            int iy = y + ky - padding;
            if (iy < 0 || iy >= h) continue;
            const double* irow = &xv[(ic * h + iy) * w];
            double* orow = &out[(oc * ho + y) * wo];
            for (int x = 0; x < wo; ++x) {
              int ix = x + kx - padding;
              if (ix < 0 || ix >= w) continue;
              orow[x] += kval * irow[ix];
            }
          }
        }
  }
  return make_node(
      "conv2d", {input, kernel, bias}, {co, ho, wo}, std::move(out),
      [ci, h, w, co, k, padding, ho, wo](Node& self) {
        Node& pin = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pb = *self.parents[2];
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (int oc = 0; oc < co; ++oc) {
            double acc = 0.0;
            for (int i = 0; i < ho * wo; ++i) acc += self.grad[oc * ho * wo + i];
            pb.grad[oc] += acc;
          }
        }
        if (pk.requires_grad) {
          pk.ensure_grad();
          for (int oc = 0; oc < co; ++oc)
            for (int ic = 0; ic < ci; ++ic)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  double acc = 0.0;
                  for (int y = 0; y < ho; ++y) {
                    int iy = y + ky - padding;
                    if (iy < 0 || iy >= h) continue;
                    const double* irow = &pin.data[(ic * h + iy) * w];
                    const double* grow = &self.grad[(oc * ho + y) * wo];
                    for (int x = 0; x < wo; ++x) {
                      int ix = x + kx - padding;
                      if (ix < 0 || ix >= w) continue;
                      acc += grow[x] * irow[ix];
                    }
                  }
                  pk.grad[((oc * ci + ic) * k + ky) * k + kx] += acc;
                }
        }
        if (pin.requires_grad) {
          pin.ensure_grad();
          for (int oc = 0; oc < co; ++oc)
            for (int ic = 0; ic < ci; ++ic)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  double kval = pk.data[((oc * ci + ic) * k + ky) * k + kx];
                  if (kval == 0.0) continue;
                  for (int y = 0; y < ho; ++y) {
                    int iy = y + ky - padding;
                    if (iy < 0 || iy >= h) continue;
                    double* irow = &pin.grad[(ic * h + iy) * w];
                    const double* grow = &self.grad[(oc * ho + y) * wo];
                    for (int x = 0; x < wo; ++x) {
                      int ix = x + kx - padding;
                      if (ix < 0 || ix >= w) continue;
                      irow[ix] += kval * grow[x];
                    }
                  }
                }
        }
      });
}

Tensor avg_pool2d(const Tensor& x, int factor) {
  if (x.shape().size() != 3) throw ShapeError("avg_pool2d: input must be (c,h,w)");
  if (factor <= 0) throw ShapeError("avg_pool2d: factor must be positive");
  int c = x.shape()[0];
  int h = x.shape()[1];
  int w = x.shape()[2];
  if (h % factor != 0 || w % factor != 0)
    throw ShapeError("avg_pool2d: sides must be divisible by factor");
  if (factor == 1) return reshape(x, x.shape());
  int ho = h / factor;
  int wo = w / factor;
  double inv = 1.0 / (factor * factor);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c) * ho * wo, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(ch * ho + y / factor) * wo + xx / factor] += xv[(ch * h + y) * w + xx] * inv;
  return make_node("avg_pool2d", {x}, {c, ho, wo}, std::move(out),
                   [c, h, w, factor, ho, wo, inv](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int ch = 0; ch < c; ++ch)
                       for (int y = 0; y < h; ++y)
                         for (int xx = 0; xx < w; ++xx)
                           p.grad[(ch * h + y) * w + xx] +=
                               self.grad[(ch * ho + y / factor) * wo + xx / factor] * inv;
                   });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.shape().size() != 3) throw ShapeError("upsample_nearest: input must be (c,h,w)");
  if (factor <= 0) throw ShapeError("upsample_nearest: factor must be positive");
  if (factor == 1) return reshape(x, x.shape());
  int c = x.shape()[0];
  int h = x.shape()[1];
  int w = x.shape()[2];
  int ho = h * factor;
  int wo = w * factor;
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out[(ch * ho + y) * wo + xx] = xv[(ch * h + y / factor) * w + xx / factor];
  return make_node("upsample_nearest", {x}, {c, ho, wo}, std::move(out),
                   [c, h, w, factor, ho, wo](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int ch = 0; ch < c; ++ch)
                       for (int y = 0; y < ho; ++y)
                         for (int xx = 0; xx < wo; ++xx)
                           p.grad[(ch * h + y / factor) * w + xx / factor] +=
                               self.grad[(ch * ho + y) * wo + xx];
                   });
}

// ---- reductions / fused losses ----

Tensor reduce_sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_node("reduce_sum", {x}, {1}, {acc}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < p.numel(); ++i) p.grad[i] += self.grad[0];
  });
}

Tensor reduce_mean(const Tensor& x) {
  return scale(reduce_sum(x), 1.0 / x.numel());
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  check_same_shape("bce_with_logits_mean", logits, targets);
  int n = logits.numel();
  const auto& zv = logits.values();
  const auto& tv = targets.values();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    if (tv[i] < 0.0 || tv[i] > 1.0)
      throw ValidationError("bce_with_logits_mean: targets must lie in [0,1]");
    acc += softplus(zv[i]) - tv[i] * zv[i];
  }
  acc /= n;
  // Targets enter as captured constants: no gradient ever reaches them.
  std::vector<double> targets_copy = tv;
  return make_node("bce_with_logits_mean", {logits}, {1}, {acc},
                   [n, targets_copy](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     double g = self.grad[0] / n;
                     for (int i = 0; i < n; ++i)
                       p.grad[i] += g * (sigmoid_val(p.data[i]) - targets_copy[i]);
                   });
}

Tensor row_renormalize(const Tensor& probs, const std::vector<std::uint8_t>& mask) {
  if (probs.shape().size() != 2) throw ShapeError("row_renormalize: rank 2 required");
  int t = probs.shape()[0];
  int m = probs.shape()[1];
  if (static_cast<int>(mask.size()) != t * m)
    throw ShapeError("row_renormalize: mask size must match probs");
  const auto& pv = probs.values();
  std::vector<double> out(static_cast<std::size_t>(t) * m, 0.0);
  std::vector<double> denom(t, 0.0);
  for (int r = 0; r < t; ++r) {
    double s = 0.0;
    for (int j = 0; j < m; ++j)
      if (mask[r * m + j]) s += pv[r * m + j];
    if (s <= 0.0) throw NumericError("row_renormalize: selected mass is zero");
    denom[r] = s;
    for (int j = 0; j < m; ++j)
      if (mask[r * m + j]) out[r * m + j] = pv[r * m + j] / s;
  }
  return make_node("row_renormalize", {probs}, probs.shape(), std::move(out),
                   [t, m, mask, denom](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     for (int r = 0; r < t; ++r) {
                       double dot = 0.0;
                       for (int j = 0; j < m; ++j)
                         dot += self.grad[r * m + j] * self.data[r * m + j];
                       for (int j = 0; j < m; ++j)
                         if (mask[r * m + j])
                           p.grad[r * m + j] += (self.grad[r * m + j] - dot) / denom[r];
                     }
                   });
}

Tensor balance_penalty(const Tensor& probs, const std::vector<double>& routed_fraction) {
  if (probs.shape().size() != 2) throw ShapeError("balance_penalty: rank 2 required");
  int t = probs.shape()[0];
  int m = probs.shape()[1];
  if (static_cast<int>(routed_fraction.size()) != m)
    throw ShapeError("balance_penalty: fraction vector length must equal expert count");
  const auto& pv = probs.values();
  double acc = 0.0;
  for (int j = 0; j < m; ++j) {
    double col = 0.0;
    for (int r = 0; r < t; ++r) col += pv[r * m + j];
    acc += routed_fraction[j] * (col / t);
  }
  acc *= m;
  return make_node("balance_penalty", {probs}, {1}, {acc},
                   [t, m, routed_fraction](Node& self) {
                     Node& p = *self.parents[0];
                     if (!p.requires_grad) return;
                     p.ensure_grad();
                     double g = self.grad[0] * m / t;
                     for (int r = 0; r < t; ++r)
                       for (int j = 0; j < m; ++j)
                         p.grad[r * m + j] += g * routed_fraction[j];
                   });
}

// ---- reverse pass ----

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ShapeError("backward: undefined loss tensor");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; reversed, each node sees its full upstream
  // gradient before its backward rule runs.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

std::map<std::string, std::vector<double>> grad_map(const Tensor& loss,
                                                    const ParamMap& params) {
  std::map<std::string, std::vector<double>> out;
  if (!loss.defined() || !loss.requires_grad()) return out;
  for (const auto& [name, t] : params) {
    Tensor copy = t;
    copy.zero_grad();
  }
  backward(loss);
  for (const auto& [name, t] : params) {
    if (t.has_grad())
      out[name] = t.grad();
    else
      out[name] = std::vector<double>(t.numel(), 0.0);
  }
  return out;
}

}  // namespace pfsm
