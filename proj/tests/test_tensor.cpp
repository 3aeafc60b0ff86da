#include <cmath>
#include <vector>

#include <doctest.h>

#include "pfsm/errors.hpp"
#include "pfsm/rng.hpp"
#include "pfsm/tensor.hpp"

using namespace pfsm;

namespace {

Tensor random_tensor(Shape shape, Pcg32& rng, bool requires_grad = false,
                     double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (auto& v : t.raw_values()) v = rng.uniform(lo, hi);
  return t;
}

double softplus_ref(double z) {
  // stable softplus for the loop oracle
  return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z)));
}

}  // namespace

TEST_CASE("x*x backward gives 2x") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = mul(x, x);
  backward(y);
  CHECK(y.item() == doctest::Approx(9.0));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("add and mul match elementwise loops") {
  Pcg32 rng(1, 1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  Tensor s = add(a, b);
  Tensor p = mul(a, b);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(s.values()[i] == doctest::Approx(a.values()[i] + b.values()[i]).epsilon(1e-15));
    CHECK(p.values()[i] == doctest::Approx(a.values()[i] * b.values()[i]).epsilon(1e-15));
  }
  CHECK_THROWS_AS(add(a, Tensor::zeros({4, 3})), ShapeError);
}

TEST_CASE("matmul matches the triple loop") {
  Pcg32 rng(2, 1);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({5, 4}, rng);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 4});
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 5; ++k) acc += a.values()[i * 5 + k] * b.values()[k * 4 + j];
      CHECK(c.values()[i * 4 + j] == doctest::Approx(acc).epsilon(1e-13));
    }
  }
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("matmul backward matches loop-built gradients") {
  Pcg32 rng(3, 1);
  Tensor a = random_tensor({2, 3}, rng, true);
  Tensor b = random_tensor({3, 2}, rng, true);
  Tensor w = random_tensor({2, 2}, rng);
  backward(reduce_sum(mul(matmul(a, b), w)));
  // dL/da[i,k] = sum_j w[i,j] * b[k,j]
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 3; ++k) {
      double acc = 0.0;
      for (int j = 0; j < 2; ++j) acc += w.values()[i * 2 + j] * b.values()[k * 2 + j];
      CHECK(a.grad()[i * 3 + k] == doctest::Approx(acc).epsilon(1e-13));
    }
  }
  for (int k = 0; k < 3; ++k) {
    for (int j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int i = 0; i < 2; ++i) acc += w.values()[i * 2 + j] * a.values()[i * 3 + k];
      CHECK(b.grad()[k * 2 + j] == doctest::Approx(acc).epsilon(1e-13));
    }
  }
}

TEST_CASE("transpose and reshape move values where expected") {
  Pcg32 rng(4, 1);
  Tensor x = random_tensor({2, 3}, rng);
  Tensor t = transpose(x);
  REQUIRE(t.shape() == Shape{3, 2});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(t.values()[j * 2 + i] == x.values()[i * 3 + j]);
  Tensor r = reshape(x, {3, 2});
  CHECK(r.values() == x.values());
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
}

TEST_CASE("col_slice and concat_cols are inverse") {
  Pcg32 rng(5, 1);
  Tensor x = random_tensor({3, 6}, rng);
  Tensor left = col_slice(x, 0, 2);
  Tensor mid = col_slice(x, 2, 3);
  Tensor right = col_slice(x, 5, 1);
  Tensor back = concat_cols({left, mid, right});
  CHECK(back.values() == x.values());
  CHECK_THROWS_AS(col_slice(x, 5, 2), ShapeError);
}

TEST_CASE("token/grid moves preserve row-major layout") {
  Pcg32 rng(6, 1);
  Tensor tokens = random_tensor({6, 4}, rng);  // 2x3 grid, 4 channels
  Tensor grid = tokens_to_grid(tokens, 2, 3);
  REQUIRE(grid.shape() == Shape{4, 2, 3});
  for (int t = 0; t < 6; ++t) {
    int y = t / 3, x = t % 3;
    for (int c = 0; c < 4; ++c) {
      CHECK(grid.values()[(c * 2 + y) * 3 + x] == tokens.values()[t * 4 + c]);
    }
  }
  Tensor back = grid_to_tokens(grid);
  CHECK(back.values() == tokens.values());
}

TEST_CASE("patchify orders features channel major") {
  // 1 channel 4x4 image, patch 2: row t of the output is patch (ty, tx)
  std::vector<double> img(16);
  for (int i = 0; i < 16; ++i) img[static_cast<std::size_t>(i)] = i;
  Tensor image = Tensor::from_vector({1, 4, 4}, img);
  Tensor p = patchify(image, 2);
  REQUIRE(p.shape() == Shape{4, 4});
  // patch (0,0) covers pixels 0,1,4,5
  CHECK(p.values()[0] == 0);
  CHECK(p.values()[1] == 1);
  CHECK(p.values()[2] == 4);
  CHECK(p.values()[3] == 5);
  // patch (1,1) covers pixels 10,11,14,15
  CHECK(p.values()[12] == 10);
  CHECK(p.values()[15] == 15);

  Pcg32 rng(7, 1);
  Tensor two = random_tensor({2, 4, 4}, rng);
  Tensor q = patchify(two, 2);
  REQUIRE(q.shape() == Shape{4, 8});
  // features ordered (channel, py, px)
  CHECK(q.values()[0 * 8 + 4] == two.values()[16 + 0]);
}

TEST_CASE("softmax rows sum to one and reject NaN") {
  Pcg32 rng(8, 1);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor s = softmax_rows(x);
  for (int r = 0; r < 3; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 5; ++c) sum += s.values()[r * 5 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  // shift invariance
  Tensor shifted = softmax_rows(add(x, Tensor::full({3, 5}, 100.0)));
  for (std::size_t i = 0; i < 15; ++i) {
    CHECK(shifted.values()[i] == doctest::Approx(s.values()[i]).epsilon(1e-12));
  }
  Tensor bad = Tensor::full({1, 2}, std::nan(""));
  CHECK_THROWS_AS(softmax_rows(bad), NumericError);
}

TEST_CASE("layer_norm normalizes rows with biased variance") {
  Pcg32 rng(9, 1);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor gamma = Tensor::full({6}, 1.0);
  Tensor beta = Tensor::zeros({6});
  Tensor y = layer_norm(x, gamma, beta);
  for (int r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < 6; ++c) mean += y.values()[r * 6 + c] / 6.0;
    for (int c = 0; c < 6; ++c) {
      double d = y.values()[r * 6 + c] - mean;
      var += d * d / 6.0;
    }
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
  // loop oracle for one element
  double m = 0.0, v = 0.0;
  for (int c = 0; c < 6; ++c) m += x.values()[c] / 6.0;
  for (int c = 0; c < 6; ++c) v += (x.values()[c] - m) * (x.values()[c] - m) / 6.0;
  double expected = (x.values()[2] - m) / std::sqrt(v + 1e-8);
  CHECK(y.values()[2] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("conv2d matches the direct convolution loop") {
  Pcg32 rng(10, 1);
  Tensor x = random_tensor({2, 4, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor y = conv2d(x, k, b, 1);
  REQUIRE(y.shape() == Shape{3, 4, 5});
  for (int oc = 0; oc < 3; ++oc) {
    for (int oy = 0; oy < 4; ++oy) {
      for (int ox = 0; ox < 5; ++ox) {
        double acc = b.values()[oc];
        for (int ic = 0; ic < 2; ++ic) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= 4 || ix < 0 || ix >= 5) continue;
              acc += k.values()[((oc * 2 + ic) * 3 + ky) * 3 + kx] *
                     x.values()[(ic * 4 + iy) * 5 + ix];
            }
          }
        }
        CHECK(y.values()[(oc * 4 + oy) * 5 + ox] == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({3, 2, 2, 2}), b, 1), ShapeError);
}

TEST_CASE("avg_pool2d and upsample_nearest match loops") {
  Pcg32 rng(11, 1);
  Tensor x = random_tensor({2, 4, 4}, rng);
  Tensor p = avg_pool2d(x, 2);
  REQUIRE(p.shape() == Shape{2, 2, 2});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 2; ++y)
      for (int xx = 0; xx < 2; ++xx) {
        double acc = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            acc += x.values()[(c * 4 + 2 * y + dy) * 4 + 2 * xx + dx] / 4.0;
        CHECK(p.values()[(c * 2 + y) * 2 + xx] == doctest::Approx(acc).epsilon(1e-13));
      }

  Tensor u = upsample_nearest(p, 2);
  REQUIRE(u.shape() == Shape{2, 4, 4});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 4; ++xx)
        CHECK(u.values()[(c * 4 + y) * 4 + xx] ==
              p.values()[(c * 2 + y / 2) * 2 + xx / 2]);

  // factor 1 is a pass-through
  CHECK(avg_pool2d(x, 1).values() == x.values());
  CHECK(upsample_nearest(x, 1).values() == x.values());
}

TEST_CASE("reductions match loops") {
  Pcg32 rng(12, 1);
  Tensor x = random_tensor({3, 7}, rng);
  double total = 0.0;
  for (double v : x.values()) total += v;
  CHECK(reduce_sum(x).item() == doctest::Approx(total).epsilon(1e-13));
  CHECK(reduce_mean(x).item() == doctest::Approx(total / 21.0).epsilon(1e-13));
}

TEST_CASE("bce_with_logits_mean matches the stable loop oracle") {
  Pcg32 rng(13, 1);
  Tensor z = random_tensor({4, 4}, rng, false, -6.0, 6.0);
  Tensor t = Tensor::zeros({4, 4});
  for (auto& v : t.raw_values()) v = rng.next_double() < 0.5 ? 0.0 : 1.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < 16; ++i) {
    acc += softplus_ref(z.values()[i]) - t.values()[i] * z.values()[i];
  }
  CHECK(bce_with_logits_mean(z, t).item() == doctest::Approx(acc / 16.0).epsilon(1e-12));

  // extreme logits stay finite
  Tensor big = Tensor::from_vector({1, 2}, {700.0, -700.0});
  Tensor ones = Tensor::from_vector({1, 2}, {1.0, 1.0});
  double loss = bce_with_logits_mean(big, ones).item();
  CHECK(std::isfinite(loss));
  CHECK(loss == doctest::Approx(350.0).epsilon(1e-10));  // (0 + 700)/2
}

TEST_CASE("row_renormalize matches the masked loop") {
  Pcg32 rng(14, 1);
  Tensor p = random_tensor({3, 4}, rng, false, 0.1, 2.0);
  std::vector<std::uint8_t> mask = {1, 1, 0, 0, 0, 1, 0, 1, 1, 1, 1, 1};
  Tensor w = row_renormalize(p, mask);
  for (int r = 0; r < 3; ++r) {
    double denom = 0.0;
    for (int c = 0; c < 4; ++c) denom += mask[r * 4 + c] ? p.values()[r * 4 + c] : 0.0;
    for (int c = 0; c < 4; ++c) {
      double expect = mask[r * 4 + c] ? p.values()[r * 4 + c] / denom : 0.0;
      CHECK(w.values()[r * 4 + c] == doctest::Approx(expect).epsilon(1e-13));
    }
  }
}

TEST_CASE("balance_penalty matches m * sum f_i * colmean_i") {
  Tensor p = Tensor::from_vector({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.1, 0.3});
  std::vector<double> f = {0.5, 0.5, 0.0};
  double colmean0 = (0.2 + 0.6) / 2.0, colmean1 = (0.3 + 0.1) / 2.0;
  double expected = 3.0 * (0.5 * colmean0 + 0.5 * colmean1);
  CHECK(balance_penalty(p, f).item() == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("mul_colvec scales rows, accepting (T) and (T,1)") {
  Pcg32 rng(15, 1);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor col = Tensor::from_vector({3}, {2.0, -1.0, 0.5});
  Tensor y = mul_colvec(x, col);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      CHECK(y.values()[r * 4 + c] ==
            doctest::Approx(x.values()[r * 4 + c] * col.values()[r]).epsilon(1e-15));
  Tensor col2 = Tensor::from_vector({3, 1}, {2.0, -1.0, 0.5});
  CHECK(mul_colvec(x, col2).values() == y.values());
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y1 = mul(x, x);
  backward(y1);
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  Tensor y2 = mul(x, x);
  backward(y2);
  CHECK(x.grad()[0] == doctest::Approx(8.0));
  x.zero_grad();
  Tensor y3 = mul(x, x);
  backward(y3);
  CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("diamond-shaped graphs accumulate both paths") {
  Tensor x = Tensor::scalar(5.0, true);
  Tensor y = add(x, x);
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(2.0));

  Tensor a = Tensor::scalar(1.5, true);
  Tensor shared = mul(a, a);           // a^2
  Tensor z = add(shared, shared);      // 2 a^2, da = 4a
  a.zero_grad();
  backward(z);
  CHECK(a.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("detached losses are no-ops for autodiff") {
  Tensor x = Tensor::scalar(2.0, false);
  Tensor y = mul(x, x);
  backward(y);  // nothing to do
  CHECK_FALSE(x.has_grad());
  ParamMap params;
  params.emplace("x", x);
  CHECK(grad_map(y, params).empty());
}

TEST_CASE("relu and sigmoid forward values") {
  Tensor x = Tensor::from_vector({1, 4}, {-2.0, 0.0, 0.5, 3.0});
  Tensor r = relu(x);
  CHECK(r.values() == std::vector<double>{0.0, 0.0, 0.5, 3.0});
  Tensor s = sigmoid(Tensor::scalar(0.0));
  CHECK(s.item() == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("grad_map reports zeros for unreachable params") {
  Tensor used = Tensor::scalar(1.0, true);
  Tensor unused = Tensor::scalar(2.0, true);
  ParamMap params;
  params.emplace("used", used);
  params.emplace("unused", unused);
  auto grads = grad_map(mul(used, used), params);
  REQUIRE(grads.count("used") == 1);
  REQUIRE(grads.count("unused") == 1);
  CHECK(grads["used"][0] == doctest::Approx(2.0));
  CHECK(grads["unused"][0] == 0.0);
}
