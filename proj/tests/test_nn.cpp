#include <cmath>
#include <vector>

#include <doctest.h>

#include "pfsm/errors.hpp"
#include "pfsm/nn.hpp"
#include "pfsm/rng.hpp"
#include "pfsm/tensor.hpp"

using namespace pfsm;

namespace {

Tensor random_tensor(Shape shape, Pcg32& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.raw_values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("linear layer matches the affine loop") {
  Pcg32 rng = make_stream(3, "init/test.linear");
  Linear lin = Linear::create(4, 3, rng, false);
  Pcg32 xr(1, 1);
  Tensor x = random_tensor({2, 4}, xr);
  Tensor y = lin.forward(x);
  REQUIRE(y.shape() == Shape{2, 3});
  for (int t = 0; t < 2; ++t) {
    for (int o = 0; o < 3; ++o) {
      double acc = lin.bias.values()[o];
      for (int i = 0; i < 4; ++i) {
        acc += lin.weight.values()[o * 4 + i] * x.values()[t * 4 + i];
      }
      CHECK(y.values()[t * 3 + o] == doctest::Approx(acc).epsilon(1e-13));
    }
  }
}

TEST_CASE("kaiming uniform respects the fan-in bound and bias starts at zero") {
  Pcg32 rng = make_stream(4, "init/test.kaiming");
  Linear lin = Linear::create(64, 16, rng, false);
  double bound = std::sqrt(6.0 / 64.0);
  double max_abs = 0.0;
  for (double v : lin.weight.values()) {
    REQUIRE(std::fabs(v) <= bound);
    max_abs = std::max(max_abs, std::fabs(v));
  }
  CHECK(max_abs > 0.5 * bound);  // actually spread out
  for (double v : lin.bias.values()) CHECK(v == 0.0);
}

TEST_CASE("single-head attention matches a hand-rolled oracle") {
  const int T = 2, D = 2;
  Pcg32 rng = make_stream(5, "init/test.attn");
  AttentionWeights w;
  w.heads = 1;
  w.q = Linear::create(D, D, rng, false);
  w.k = Linear::create(D, D, rng, false);
  w.v = Linear::create(D, D, rng, false);
  w.out = Linear::create(D, D, rng, false);
  Pcg32 xr(2, 2);
  Tensor tokens = random_tensor({T, D}, xr);

  Tensor result = multi_head_attention(tokens, w);
  REQUIRE(result.shape() == Shape{T, D});

  // oracle with plain loops
  auto lin = [&](const Linear& l, const std::vector<double>& x, int t, int o) {
    double acc = l.bias.values()[o];
    for (int i = 0; i < D; ++i) acc += l.weight.values()[o * D + i] * x[t * D + i];
    return acc;
  };
  std::vector<double> q(T * D), k(T * D), v(T * D);
  for (int t = 0; t < T; ++t)
    for (int o = 0; o < D; ++o) {
      q[t * D + o] = lin(w.q, tokens.values(), t, o);
      k[t * D + o] = lin(w.k, tokens.values(), t, o);
      v[t * D + o] = lin(w.v, tokens.values(), t, o);
    }
  double scale_f = 1.0 / std::sqrt(static_cast<double>(D));
  std::vector<double> attended(T * D, 0.0);
  for (int t = 0; t < T; ++t) {
    std::vector<double> score(T);
    double max_s = -1e300;
    for (int u = 0; u < T; ++u) {
      double s = 0.0;
      for (int d = 0; d < D; ++d) s += q[t * D + d] * k[u * D + d];
      score[u] = s * scale_f;
      max_s = std::max(max_s, score[u]);
    }
    double denom = 0.0;
    for (int u = 0; u < T; ++u) denom += std::exp(score[u] - max_s);
    for (int u = 0; u < T; ++u) {
      double p = std::exp(score[u] - max_s) / denom;
      for (int d = 0; d < D; ++d) attended[t * D + d] += p * v[u * D + d];
    }
  }
  for (int t = 0; t < T; ++t)
    for (int o = 0; o < D; ++o) {
      double acc = w.out.bias.values()[o];
      for (int i = 0; i < D; ++i) acc += w.out.weight.values()[o * D + i] * attended[t * D + i];
      CHECK(result.values()[t * D + o] == doctest::Approx(acc).epsilon(1e-11));
    }
}

TEST_CASE("two heads attend within their own half of the channels") {
  const int T = 3, D = 4;
  Pcg32 rng = make_stream(6, "init/test.attn2");
  AttentionWeights w;
  w.heads = 2;
  w.q = Linear::create(D, D, rng, false);
  w.k = Linear::create(D, D, rng, false);
  w.v = Linear::create(D, D, rng, false);
  w.out = Linear::create(D, D, rng, false);
  Pcg32 xr(3, 3);
  Tensor tokens = random_tensor({T, D}, xr);
  Tensor result = multi_head_attention(tokens, w);

  const int hd = D / 2;
  auto lin_all = [&](const Linear& l) {
    std::vector<double> out(T * D);
    for (int t = 0; t < T; ++t)
      for (int o = 0; o < D; ++o) {
        double acc = l.bias.values()[o];
        for (int i = 0; i < D; ++i) acc += l.weight.values()[o * D + i] * tokens.values()[t * D + i];
        out[t * D + o] = acc;
      }
    return out;
  };
  auto q = lin_all(w.q), k = lin_all(w.k), v = lin_all(w.v);
  std::vector<double> attended(T * D, 0.0);
  for (int h = 0; h < 2; ++h) {
    for (int t = 0; t < T; ++t) {
      std::vector<double> score(T);
      double max_s = -1e300;
      for (int u = 0; u < T; ++u) {
        double s = 0.0;
        for (int d = 0; d < hd; ++d) s += q[t * D + h * hd + d] * k[u * D + h * hd + d];
        score[u] = s / std::sqrt(static_cast<double>(hd));
        max_s = std::max(max_s, score[u]);
      }
      double denom = 0.0;
      for (int u = 0; u < T; ++u) denom += std::exp(score[u] - max_s);
      for (int u = 0; u < T; ++u) {
        double p = std::exp(score[u] - max_s) / denom;
        for (int d = 0; d < hd; ++d) attended[t * D + h * hd + d] += p * v[u * D + h * hd + d];
      }
    }
  }
  for (int t = 0; t < T; ++t)
    for (int o = 0; o < D; ++o) {
      double acc = w.out.bias.values()[o];
      for (int i = 0; i < D; ++i) acc += w.out.weight.values()[o * D + i] * attended[t * D + i];
      CHECK(result.values()[t * D + o] == doctest::Approx(acc).epsilon(1e-11));
    }
}

TEST_CASE("projection hooks replace the base projection") {
  const int T = 2, D = 2;
  Pcg32 rng = make_stream(7, "init/test.hook");
  AttentionWeights w;
  w.heads = 1;
  w.q = Linear::create(D, D, rng, false);
  w.k = Linear::create(D, D, rng, false);
  w.v = Linear::create(D, D, rng, false);
  w.out = Linear::create(D, D, rng, false);
  Pcg32 xr(4, 4);
  Tensor tokens = random_tensor({T, D}, xr);

  // identity hook must reproduce the default path
  ProjHook same = [](const Tensor& x, const Linear& base) { return base.forward(x); };
  CHECK(multi_head_attention(tokens, w, same, same).values() ==
        multi_head_attention(tokens, w).values());

  // a zero hook on v collapses the output to the out-projection bias
  ProjHook zero = [](const Tensor& x, const Linear&) {
    return scale(x, 0.0);
  };
  Tensor collapsed = multi_head_attention(tokens, w, nullptr, zero);
  for (int t = 0; t < T; ++t)
    for (int o = 0; o < D; ++o)
      CHECK(collapsed.values()[t * D + o] ==
            doctest::Approx(w.out.bias.values()[o]).epsilon(1e-12));
}

TEST_CASE("resample dispatches to pooling and upsampling") {
  Pcg32 rng(8, 8);
  Tensor x = random_tensor({1, 4, 4}, rng);
  CHECK(resample(x, ResampleMode::avgpool_down, 2).shape() == Shape{1, 2, 2});
  CHECK(resample(x, ResampleMode::nearest_up, 2).shape() == Shape{1, 8, 8});
  CHECK(resample(x, ResampleMode::avgpool_down, 1).values() == x.values());
}

TEST_CASE("layer spec validation rejects bad dimensions") {
  LayerSpec spec;
  spec.kind = LayerSpec::Kind::linear;
  spec.in_dim = 0;
  spec.out_dim = 4;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.in_dim = 4;
  spec.kind = LayerSpec::Kind::conv2d;
  spec.kernel = 2;  // even kernels unsupported
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}
