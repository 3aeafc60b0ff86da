#include <cmath>
#include <string>
#include <vector>

#include "pfsm/adapters.hpp"
#include "pfsm/errors.hpp"
#include "pfsm/gradcheck.hpp"
#include "pfsm/losses.hpp"
#include "pfsm/nn.hpp"
#include "pfsm/rng.hpp"
#include "pfsm/segmodel.hpp"

namespace pfsm {

namespace {

void fill_uniform(Tensor& t, Pcg32& rng, double lo, double hi) {
  for (auto& v : t.raw_values()) v = rng.uniform(lo, hi);
}

// magnitudes in [lo, hi] with random sign; keeps relu and other kinked
// inputs a safe distance from the kink under the finite-difference step
void fill_away_from_zero(Tensor& t, Pcg32& rng, double lo, double hi) {
  for (auto& v : t.raw_values()) {
    double mag = rng.uniform(lo, hi);
    v = rng.uniform(0.0, 1.0) < 0.5 ? -mag : mag;
  }
}

struct Suite {
  std::uint64_t seed;
  std::vector<GradCheckReport> reports;

  enum class Draw { any, positive, away_from_zero };

  void check(const std::string& name, const std::function<Tensor()>& fn, Tensor leaf,
             int points = 3, Draw draw = Draw::any, double amplitude = 1.5) {
    GradCheckReport merged;
    merged.op_name = name;
    merged.passed = true;
    for (int p = 0; p < points; ++p) {
      Pcg32 rng = make_stream(seed, "gradcheck/" + name + "/" + std::to_string(p));
      switch (draw) {
        case Draw::any: fill_uniform(leaf, rng, -amplitude, amplitude); break;
        case Draw::positive: fill_uniform(leaf, rng, 0.2, amplitude); break;
        case Draw::away_from_zero: fill_away_from_zero(leaf, rng, 0.2, amplitude); break;
      }
      GradCheckReport r = grad_check(name, fn, leaf);
      merged.tolerance = r.tolerance;
      merged.max_rel_error = std::max(merged.max_rel_error, r.max_rel_error);
      merged.passed = merged.passed && r.passed;
    }
    reports.push_back(merged);
  }
};

// sum(op_output * fixed_random_weights): a scalar objective whose gradient
// pattern exposes permuted or misplaced elements, unlike a plain sum
Tensor weighted_sum(const Tensor& t, const Tensor& w) { return reduce_sum(mul(t, w)); }

Tensor constant_like_shape(const Shape& shape, Pcg32& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(shape, false);
  fill_uniform(t, rng, lo, hi);
  return t;
}

}  // namespace

std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed) {
  Suite suite{seed, {}};
  Pcg32 setup = make_stream(seed, "gradcheck/setup");

  // fixed counter-weights per output shape
  auto cw = [&setup](Shape shape) { return constant_like_shape(shape, setup, -1.0, 1.0); };

  // ---- elementwise / broadcast ----
  {
    Tensor a = Tensor::zeros({2, 3}, true);
    Tensor b = constant_like_shape({2, 3}, setup, -1.0, 1.0);
    Tensor w = cw({2, 3});
    suite.check("add/a", [=]() { return weighted_sum(add(a, b), w); }, a);
    Tensor b2 = Tensor::zeros({2, 3}, true);
    Tensor a2 = constant_like_shape({2, 3}, setup, -1.0, 1.0);
    suite.check("add/b", [=]() { return weighted_sum(add(a2, b2), w); }, b2);
  }
  {
    Tensor a = Tensor::zeros({2, 3}, true);
    Tensor b = constant_like_shape({2, 3}, setup, -1.0, 1.0);
    Tensor w = cw({2, 3});
    suite.check("mul/a", [=]() { return weighted_sum(mul(a, b), w); }, a);
    Tensor b2 = Tensor::zeros({2, 3}, true);
    Tensor a2 = constant_like_shape({2, 3}, setup, -1.0, 1.0);
    suite.check("mul/b", [=]() { return weighted_sum(mul(a2, b2), w); }, b2);
  }
  {
    Tensor x = Tensor::zeros({3, 2}, true);
    Tensor w = cw({3, 2});
    suite.check("scale", [=]() { return weighted_sum(scale(x, -1.7), w); }, x);
  }
  {
    Tensor x = Tensor::zeros({2, 3}, true);
    Tensor bias = constant_like_shape({3}, setup, -1.0, 1.0);
    Tensor w = cw({2, 3});
    suite.check("add_bias/x", [=]() { return weighted_sum(add_bias(x, bias), w); }, x);
    Tensor bias2 = Tensor::zeros({3}, true);
    Tensor x2 = constant_like_shape({2, 3}, setup, -1.0, 1.0);
    suite.check("add_bias/bias", [=]() { return weighted_sum(add_bias(x2, bias2), w); }, bias2);
  }
  {
    Tensor x = Tensor::zeros({3, 4}, true);
    Tensor col = constant_like_shape({3}, setup, -1.0, 1.0);
    Tensor w = cw({3, 4});
    suite.check("mul_colvec/x", [=]() { return weighted_sum(mul_colvec(x, col), w); }, x);
    Tensor col2 = Tensor::zeros({3}, true);
    Tensor x2 = constant_like_shape({3, 4}, setup, -1.0, 1.0);
    suite.check("mul_colvec/col",
                [=]() { return weighted_sum(mul_colvec(x2, col2), w); }, col2);
  }
  {
    Tensor x = Tensor::zeros({3, 4}, true);
    Tensor w = cw({3, 4});
    suite.check("relu", [=]() { return weighted_sum(relu(x), w); }, x, 3,
                Suite::Draw::away_from_zero);
    Tensor x2 = Tensor::zeros({3, 4}, true);
    suite.check("sigmoid", [=]() { return weighted_sum(sigmoid(x2), w); }, x2);
  }

  // ---- linear algebra / layout ----
  {
    Tensor a = Tensor::zeros({2, 3}, true);
    Tensor b = constant_like_shape({3, 4}, setup, -1.0, 1.0);
    Tensor w = cw({2, 4});
    suite.check("matmul/a", [=]() { return weighted_sum(matmul(a, b), w); }, a);
    Tensor b2 = Tensor::zeros({3, 4}, true);
    Tensor a2 = constant_like_shape({2, 3}, setup, -1.0, 1.0);
    suite.check("matmul/b", [=]() { return weighted_sum(matmul(a2, b2), w); }, b2);
  }
  {
    Tensor x = Tensor::zeros({2, 5}, true);
    Tensor w = cw({5, 2});
    suite.check("transpose", [=]() { return weighted_sum(transpose(x), w); }, x);
  }
  {
    Tensor x = Tensor::zeros({2, 6}, true);
    Tensor w = cw({3, 4});
    suite.check("reshape", [=]() { return weighted_sum(reshape(x, {3, 4}), w); }, x);
  }
  {
    Tensor x = Tensor::zeros({3, 6}, true);
    Tensor w = cw({3, 2});
    suite.check("col_slice", [=]() { return weighted_sum(col_slice(x, 2, 2), w); }, x);
  }
  {
    Tensor a = Tensor::zeros({3, 2}, true);
    Tensor b = constant_like_shape({3, 3}, setup, -1.0, 1.0);
    Tensor w = cw({3, 5});
    suite.check("concat_cols",
                [=]() { return weighted_sum(concat_cols({a, b}), w); }, a);
  }
  {
    Tensor tokens = Tensor::zeros({4, 3}, true);
    Tensor w = cw({3, 2, 2});
    suite.check("tokens_to_grid",
                [=]() { return weighted_sum(tokens_to_grid(tokens, 2, 2), w); }, tokens);
    Tensor grid = Tensor::zeros({3, 2, 2}, true);
    Tensor w2 = cw({4, 3});
    suite.check("grid_to_tokens",
                [=]() { return weighted_sum(grid_to_tokens(grid), w2); }, grid);
  }
  {
    Tensor image = Tensor::zeros({2, 4, 4}, true);
    Tensor w = cw({4, 8});
    suite.check("patchify", [=]() { return weighted_sum(patchify(image, 2), w); }, image);
  }

  // ---- normalization / attention pieces ----
  {
    Tensor x = Tensor::zeros({3, 4}, true);
    Tensor w = cw({3, 4});
    suite.check("softmax_rows", [=]() { return weighted_sum(softmax_rows(x), w); }, x);
  }
  {
    Tensor x = Tensor::zeros({3, 4}, true);
    Tensor gamma = constant_like_shape({4}, setup, 0.5, 1.5);
    Tensor beta = constant_like_shape({4}, setup, -0.5, 0.5);
    Tensor w = cw({3, 4});
    suite.check("layer_norm/x",
                [=]() { return weighted_sum(layer_norm(x, gamma, beta), w); }, x);
    Tensor gamma2 = Tensor::zeros({4}, true);
    Tensor x2 = constant_like_shape({3, 4}, setup, -1.0, 1.0);
    suite.check("layer_norm/gamma",
                [=]() { return weighted_sum(layer_norm(x2, gamma2, beta), w); }, gamma2);
    Tensor beta2 = Tensor::zeros({4}, true);
    suite.check("layer_norm/beta",
                [=]() { return weighted_sum(layer_norm(x2, gamma, beta2), w); }, beta2);
  }

  // ---- spatial ----
  {
    Tensor x = Tensor::zeros({2, 5, 5}, true);
    Tensor kernel = constant_like_shape({3, 2, 3, 3}, setup, -1.0, 1.0);
    Tensor bias = constant_like_shape({3}, setup, -0.5, 0.5);
    Tensor w = cw({3, 5, 5});
    suite.check("conv2d/input",
                [=]() { return weighted_sum(conv2d(x, kernel, bias, 1), w); }, x);
    Tensor kernel2 = Tensor::zeros({3, 2, 3, 3}, true);
    Tensor x2 = constant_like_shape({2, 5, 5}, setup, -1.0, 1.0);
    suite.check("conv2d/kernel",
                [=]() { return weighted_sum(conv2d(x2, kernel2, bias, 1), w); }, kernel2);
    Tensor bias2 = Tensor::zeros({3}, true);
    suite.check("conv2d/bias",
                [=]() { return weighted_sum(conv2d(x2, kernel, bias2, 1), w); }, bias2);
  }
  {
    Tensor x = Tensor::zeros({2, 4, 4}, true);
    Tensor w = cw({2, 2, 2});
    suite.check("avg_pool2d",
                [=]() { return weighted_sum(avg_pool2d(x, 2), w); }, x);
    Tensor x2 = Tensor::zeros({2, 2, 2}, true);
    Tensor w2 = cw({2, 4, 4});
    suite.check("upsample_nearest",
                [=]() { return weighted_sum(upsample_nearest(x2, 2), w2); }, x2);
  }

  // ---- reductions / fused losses ----
  {
    Tensor x = Tensor::zeros({3, 4}, true);
    suite.check("reduce_sum", [=]() { return reduce_sum(x); }, x);
    Tensor x2 = Tensor::zeros({3, 4}, true);
    suite.check("reduce_mean", [=]() { return reduce_mean(x2); }, x2);
  }
  {
    Tensor logits = Tensor::zeros({3, 4}, true);
    Tensor targets = Tensor::zeros({3, 4}, false);
    Pcg32 trng = make_stream(seed, "gradcheck/setup/targets");
    for (auto& t : targets.raw_values()) t = trng.uniform(0.0, 1.0) < 0.5 ? 0.0 : 1.0;
    suite.check("bce_with_logits_mean",
                [=]() { return bce_with_logits_mean(logits, targets); }, logits, 3,
                Suite::Draw::any, 3.0);
  }
  {
    Tensor probs = Tensor::zeros({3, 4}, true);
    std::vector<std::uint8_t> mask = {1, 0, 1, 0, 0, 1, 1, 0, 1, 1, 0, 1};
    Tensor w = cw({3, 4});
    suite.check("row_renormalize",
                [=]() { return weighted_sum(row_renormalize(probs, mask), w); }, probs, 3,
                Suite::Draw::positive);
  }
  {
    Tensor probs = Tensor::zeros({4, 3}, true);
    std::vector<double> fractions = {0.5, 0.25, 0.25};
    suite.check("balance_penalty",
                [=]() { return balance_penalty(probs, fractions); }, probs, 3,
                Suite::Draw::positive);
  }

  // ---- adapter composites ----
  {
    Pcg32 arng = make_stream(seed, "gradcheck/setup/lora");
    LoraAdapter ad = LoraAdapter::create(4, 5, 2, 8.0, "q", arng, true);
    fill_uniform(ad.B, arng, -0.8, 0.8);  // off the zero init so A sees gradient
    Tensor W0 = constant_like_shape({4, 5}, arng, -0.8, 0.8);
    Tensor x = constant_like_shape({3, 5}, arng, -1.0, 1.0);
    Tensor w = cw({3, 4});
    auto fn = [=]() { return weighted_sum(lora_forward(ad, W0, x), w); };
    suite.check("lora_forward/A", fn, ad.A, 3, Suite::Draw::any, 0.8);
    suite.check("lora_forward/B", fn, ad.B, 3, Suite::Draw::any, 0.8);
    Tensor x2 = x.clone_leaf(true);
    auto fn2 = [=]() { return weighted_sum(lora_forward(ad, W0, x2), w); };
    suite.check("lora_forward/x", fn2, x2, 3, Suite::Draw::any, 0.8);
  }
  {
    Pcg32 arng = make_stream(seed, "gradcheck/setup/lmoe");
    LmoeAdapter ad = LmoeAdapter::create(4, 5, 2, 8.0, 4, 2, "v", arng, true);
    fill_uniform(ad.B, arng, -0.6, 0.6);
    fill_uniform(ad.gate_weights, arng, -0.9, 0.9);
    for (auto& e : ad.experts) {
      fill_uniform(e.kernel, arng, -0.6, 0.6);
      fill_uniform(e.bias, arng, -0.3, 0.3);
    }
    Tensor W0 = constant_like_shape({4, 5}, arng, -0.8, 0.8);
    Tensor x = constant_like_shape({4, 5}, arng, -1.0, 1.0);  // 2x2 token grid
    Tensor w = cw({4, 4});
    auto fn = [=]() {
      LmoeResult r = lmoe_forward(ad, W0, x, 2, 2);
      Tensor main = weighted_sum(r.output, w);
      Tensor balance = load_balance_loss(r.gate_probs, r.decisions);
      return add(main, scale(balance, 0.7));
    };
    suite.check("lmoe_forward/A", fn, ad.A, 2, Suite::Draw::any, 0.6);
    suite.check("lmoe_forward/B", fn, ad.B, 2, Suite::Draw::any, 0.6);
    suite.check("lmoe_forward/gate", fn, ad.gate_weights, 2, Suite::Draw::any, 0.9);
    suite.check("lmoe_forward/expert_near", fn, ad.experts[0].kernel, 2,
                Suite::Draw::any, 0.6);
    suite.check("lmoe_forward/expert_wide", fn, ad.experts[3].kernel, 2,
                Suite::Draw::any, 0.6);
    suite.check("lmoe_forward/expert_bias", fn, ad.experts[1].bias, 2,
                Suite::Draw::any, 0.4);
  }
  {
    Pcg32 arng = make_stream(seed, "gradcheck/setup/attention");
    AttentionWeights aw;
    aw.heads = 2;
    aw.q = Linear::create(4, 4, arng, true);
    aw.k = Linear::create(4, 4, arng, true);
    aw.v = Linear::create(4, 4, arng, true);
    aw.out = Linear::create(4, 4, arng, true);
    Tensor tokens = constant_like_shape({3, 4}, arng, -1.0, 1.0);
    Tensor w = cw({3, 4});
    auto fn = [=]() { return weighted_sum(multi_head_attention(tokens, aw), w); };
    suite.check("attention/q_weight", fn, aw.q.weight, 2, Suite::Draw::any, 0.8);
    suite.check("attention/v_weight", fn, aw.v.weight, 2, Suite::Draw::any, 0.8);
    suite.check("attention/out_bias", fn, aw.out.bias, 2, Suite::Draw::any, 0.8);
    Tensor tokens2 = tokens.clone_leaf(true);
    auto fn2 = [=]() { return weighted_sum(multi_head_attention(tokens2, aw), w); };
    suite.check("attention/tokens", fn2, tokens2, 2, Suite::Draw::any, 0.8);
  }

  // ---- full training objective on a reduced model ----
  {
    ModelConfig mc;
    mc.image_size = 16;
    mc.patch_size = 4;
    mc.embed_dim = 8;
    mc.depth = 1;
    mc.heads = 2;
    mc.mask_scale = 4;
    mc.variant = Variant::lora_moe;
    mc.rank = 2;
    mc.alpha = 8.0;
    mc.experts = 4;
    mc.top_k = 2;
    SegModel model = SegModel::build(mc, derive_seed(seed, "gradcheck/model"), true);

    // move every trainable tensor to a generic point: the zero-init gate
    // ties all experts and zero B hides the A gradient
    Pcg32 mrng = make_stream(seed, "gradcheck/setup/model");
    ParamMap trainable = model.trainable_params();
    for (auto& [name, p] : trainable) fill_uniform(p, mrng, -0.35, 0.35);

    Pcg32 drng = make_stream(seed, "gradcheck/setup/model_data");
    Tensor image = constant_like_shape({1, 16, 16}, drng, 0.0, 1.0);
    Tensor labels = Tensor::zeros({4, 4}, false);
    for (auto& v : labels.raw_values()) v = drng.uniform(0.0, 1.0) < 0.4 ? 1.0 : 0.0;
    Tensor teacher_logits = constant_like_shape({4, 4}, drng, -1.2, 1.2);
    LossWeights lw;

    auto fn = [=, &model]() {
      ForwardOut out = model.forward(image);
      return personalized_loss(out.logits, labels, teacher_logits, out.moe_aux, lw);
    };
    auto pick = [&trainable](const std::string& needle) {
      for (auto& [name, p] : trainable) {
        if (name.find(needle) != std::string::npos) return p;
      }
      throw ValidationError("gradcheck suite: no parameter matches " + needle);
    };
    suite.check("loss_composite/lora_A", fn, pick(".lora.A"), 2, Suite::Draw::any, 0.35);
    suite.check("loss_composite/lora_B", fn, pick(".lora.B"), 2, Suite::Draw::any, 0.35);
    suite.check("loss_composite/gate", fn, pick(".lmoe.gate"), 2, Suite::Draw::any, 0.35);
    suite.check("loss_composite/expert_kernel", fn, pick(".lmoe.expert2.kernel"), 1,
                Suite::Draw::any, 0.35);
    suite.check("loss_composite/decoder_kernel", fn, pick("decoder.conv1.kernel"), 1,
                Suite::Draw::any, 0.35);
    suite.check("loss_composite/decoder_out_bias", fn, pick("decoder.out.bias"), 2,
                Suite::Draw::any, 0.35);
  }

  return suite.reports;
}

}  // namespace pfsm
