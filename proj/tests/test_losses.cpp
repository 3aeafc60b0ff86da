#include <cmath>
#include <vector>

#include <doctest.h>

#include "pfsm/errors.hpp"
#include "pfsm/losses.hpp"
#include "pfsm/rng.hpp"
#include "pfsm/tensor.hpp"

using namespace pfsm;

namespace {

double softplus_ref(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z)));
}

double sigmoid_ref(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Tensor random_logits(Shape shape, Pcg32& rng, double amp = 3.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.raw_values()) v = rng.uniform(-amp, amp);
  return t;
}

Tensor random_labels(Shape shape, Pcg32& rng) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.raw_values()) v = rng.next_double() < 0.5 ? 0.0 : 1.0;
  return t;
}

}  // namespace

TEST_CASE("ce_loss matches the binary cross-entropy loop") {
  Pcg32 rng(21, 1);
  Tensor z = random_logits({4, 4}, rng);
  Tensor y = random_labels({4, 4}, rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < 16; ++i) {
    acc += softplus_ref(z.values()[i]) - y.values()[i] * z.values()[i];
  }
  CHECK(std::fabs(ce_loss(z, y).item() - acc / 16.0) <= 1e-10);
}

TEST_CASE("ce_loss rejects labels that are not exactly 0 or 1") {
  Tensor z = Tensor::zeros({2, 2});
  Tensor bad = Tensor::full({2, 2}, 0.5);
  CHECK_THROWS_AS(ce_loss(z, bad), ValidationError);
  CHECK_THROWS_AS(ce_loss(z, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("kd at zero logits and tau one half equals ln2 / 4") {
  Tensor zs = Tensor::zeros({4, 4});
  Tensor zt = Tensor::zeros({4, 4});
  double expected = 0.25 * std::log(2.0);
  CHECK(std::fabs(kd_loss(zs, zt, 0.5).item() - expected) <= 1e-12);
}

TEST_CASE("kd_loss matches tau^2 times soft-target cross entropy") {
  Pcg32 rng(22, 1);
  Tensor zs = random_logits({3, 5}, rng);
  Tensor zt = random_logits({3, 5}, rng);
  const double tau = 0.7;
  double acc = 0.0;
  for (std::size_t i = 0; i < 15; ++i) {
    double s = zs.values()[i] / tau;
    double t = sigmoid_ref(zt.values()[i] / tau);
    acc += softplus_ref(s) - t * s;
  }
  double expected = tau * tau * acc / 15.0;
  CHECK(std::fabs(kd_loss(zs, zt, tau).item() - expected) <= 1e-10);
}

TEST_CASE("matching the teacher is a stationary point of kd") {
  Pcg32 rng(23, 1);
  Tensor zt = random_logits({2, 3}, rng);
  Tensor zs = zt.clone_leaf(true);
  Tensor loss = kd_loss(zs, zt, 0.5);
  backward(loss);
  for (double g : zs.grad()) CHECK(std::fabs(g) <= 1e-6);

  // and perturbing the student in any direction increases the loss
  double at_teacher = loss.item();
  for (double delta : {0.3, -0.3}) {
    Tensor moved = zt.clone_leaf(false);
    moved.raw_values()[0] += delta;
    CHECK(kd_loss(moved, zt, 0.5).item() > at_teacher);
  }
}

TEST_CASE("no gradient flows into the teacher") {
  Pcg32 rng(24, 1);
  Tensor zt = random_logits({2, 2}, rng);
  Tensor zt_leaf = zt.clone_leaf(true);
  Tensor zs = random_logits({2, 2}, rng).clone_leaf(true);
  backward(kd_loss(zs, zt_leaf, 0.5));
  CHECK(zs.has_grad());
  CHECK_FALSE(zt_leaf.has_grad());
}

TEST_CASE("personalized loss composes its three terms") {
  Pcg32 rng(25, 1);
  Tensor zs = random_logits({4, 4}, rng);
  Tensor y = random_labels({4, 4}, rng);
  Tensor zt = random_logits({4, 4}, rng);
  Tensor aux = Tensor::scalar(1.37);
  LossWeights w;  // 1.5, 0.1, 0.5
  auto parts = personalized_loss_parts(zs, y, zt, aux, w);
  double expected = parts.ce.item() + 1.5 * parts.lmoe.item() + 0.1 * parts.kd.item();
  CHECK(std::fabs(parts.total.item() - expected) <= 1e-12);
  CHECK(parts.lmoe.item() == doctest::Approx(1.37));
  CHECK(std::fabs(parts.ce.item() - ce_loss(zs, y).item()) <= 1e-15);
  CHECK(std::fabs(parts.kd.item() - kd_loss(zs, zt, 0.5).item()) <= 1e-15);
}

TEST_CASE("lambda_kd zero works without any teacher") {
  Pcg32 rng(26, 1);
  Tensor zs = random_logits({4, 4}, rng);
  Tensor y = random_labels({4, 4}, rng);
  Tensor aux = Tensor::scalar(0.5);
  LossWeights w;
  w.lambda_kd = 0.0;
  Tensor undefined_teacher;
  auto parts = personalized_loss_parts(zs, y, undefined_teacher, aux, w);
  CHECK(parts.kd.item() == 0.0);
  CHECK(std::fabs(parts.total.item() - (parts.ce.item() + 1.5 * 0.5)) <= 1e-12);
}

TEST_CASE("loss weight validation names the offending field") {
  LossWeights w;
  w.tau = 0.0;
  CHECK_THROWS_WITH_AS(w.validate(), doctest::Contains("tau"), ValidationError);
  w = LossWeights{};
  w.lambda_lmoe = -0.1;
  CHECK_THROWS_AS(w.validate(), ValidationError);
  w = LossWeights{};
  w.lambda_kd = -1.0;
  CHECK_THROWS_AS(w.validate(), ValidationError);
}
