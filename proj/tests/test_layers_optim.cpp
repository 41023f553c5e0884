#include <cmath>
#include <vector>

#include "doctest.h"
#include "metadm/errors.hpp"
#include "metadm/layers.hpp"
#include "metadm/optim.hpp"
#include "metadm/rng.hpp"
#include "metadm/tensor.hpp"

using namespace metadm;
using namespace metadm::nn;

TEST_CASE("Params keeps insertion order and rejects duplicates") {
  Params params;
  params.add("b.w", Tensor::zeros({2, 2}, true));
  params.add("a.w", Tensor::zeros({3}, true));
  params.add("a.stats", Tensor::zeros({3}, false));
  CHECK(params.size() == 3);
  CHECK(params.total_count() == 10);
  CHECK(params.entries()[0].first == "b.w");
  CHECK(params.entries()[1].first == "a.w");
  CHECK(params.contains("a.stats"));
  CHECK(!params.contains("missing"));
  CHECK(params.trainable().size() == 2);
  CHECK_THROWS_AS(params.add("a.w", Tensor::zeros({1}, true)), ConfigError);
  CHECK_THROWS_AS(params.add("x", Tensor()), ShapeError);
  CHECK_THROWS_AS(params.at("missing"), ConfigError);
}

TEST_CASE("he_uniform_fill stays in bounds and spreads out") {
  Rng rng(42);
  Tensor w = Tensor::zeros({2000});
  const int fan_in = 27;
  he_uniform_fill(w, fan_in, rng);
  const float bound = std::sqrt(6.0f / fan_in);
  float lo = 0.0f, hi = 0.0f;
  for (float v : w.data()) {
    CHECK(v >= -bound);
    CHECK(v <= bound);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo < -0.8f * bound);
  CHECK(hi > 0.8f * bound);
}

TEST_CASE("layer modules register their tensors under a prefix") {
  Rng rng(1);
  Conv2d conv(3, 8, 3, 1, 1, true, rng);
  Linear fc(8, 4, rng);
  BatchNorm2d bn(8);
  Params params;
  conv.register_into(params, "enc.conv");
  bn.register_into(params, "enc.bn");
  fc.register_into(params, "head");
  CHECK(params.at("enc.conv.w").numel() == 8 * 3 * 3 * 3);
  CHECK(params.at("enc.conv.b").numel() == 8);
  CHECK(params.at("enc.bn.gamma").data()[0] == 1.0f);
  CHECK(params.at("enc.bn.beta").data()[0] == 0.0f);
  CHECK(!params.at("enc.bn.running_mean").requires_grad());
  CHECK(params.at("enc.bn.running_var").data()[0] == 1.0f);
  CHECK(params.at("head.w").numel() == 32);
  // buffers are carried but never handed to the optimizer
  CHECK(params.trainable().size() == 6);

  Rng rng2(2);
  Conv2d no_bias(3, 4, 3, 1, 1, false, rng2);
  Params p2;
  no_bias.register_into(p2, "c");
  CHECK(p2.size() == 1);
  CHECK(!no_bias.b.defined());
}

TEST_CASE("layer forwards agree with the underlying ops") {
  Rng rng(3);
  Tensor x = Tensor::zeros({2, 3, 6, 6});
  rng.fill_normal(x.data());
  Conv2d conv(3, 4, 3, 1, 1, true, rng);
  Tensor got = conv.forward(x);
  Tensor want = conv2d(x, conv.w, conv.b, 1, 1);
  CHECK(got.data() == want.data());

  BatchNorm2d bn(4);
  Tensor y_train = bn.forward(got, true);
  CHECK(bn.running_mean.data() != std::vector<float>(4, 0.0f));
  Tensor y_eval = bn.forward(got, false);
  CHECK(y_train.data() != y_eval.data());

  Linear fc(3 * 6 * 6, 5, rng);
  Tensor z = fc.forward(flatten(x));
  CHECK(z.dim(0) == 2);
  CHECK(z.dim(1) == 5);
}

TEST_CASE("SGD applies p -= lr * g and clears grads") {
  Params params;
  params.add("p", Tensor::from_data({1}, {1.0f}, true));
  Tensor p = params.at("p");
  sum(p).backward();  // g = 1
  Sgd opt(0.1f);
  opt.step(params);
  CHECK(p.data()[0] == doctest::Approx(0.9f));
  CHECK(!p.has_grad());
  CHECK(opt.step_count == 1);
}

TEST_CASE("SGD with zero gradients or zero lr leaves parameters unchanged") {
  Params params;
  params.add("w", Tensor::from_data({3}, {1, 2, 3}, true));
  Tensor w = params.at("w");
  SUBCASE("zero gradient values") {
    sum(mul(w, Tensor::zeros({3}))).backward();
    Sgd(0.5f).step(params);
    CHECK(w.data() == std::vector<float>{1, 2, 3});
  }
  SUBCASE("zero learning rate") {
    sum(mul(w, w)).backward();
    Sgd(0.0f).step(params);
    CHECK(w.data() == std::vector<float>{1, 2, 3});
  }
}

TEST_CASE("SGD converges on a one-dimensional quadratic") {
  Params params;
  params.add("p", Tensor::from_data({1}, {0.0f}, true));
  Tensor p = params.at("p");
  Tensor target = Tensor::full({1}, 3.0f);
  Sgd opt(0.1f);
  for (int i = 0; i < 200; ++i) {
    Tensor d = sub(p, target);
    sum(mul(d, d)).backward();
    opt.step(params);
  }
  CHECK(std::abs(p.data()[0] - 3.0f) < 1e-3f);
}

TEST_CASE("optimizers reject a trainable parameter with no gradient") {
  Params params;
  params.add("conv.w", Tensor::from_data({2}, {1, 2}, true));
  params.add("conv.b", Tensor::from_data({1}, {0}, true));
  sum(params.at("conv.w")).backward();  // conv.b never received a grad
  Sgd sgd(0.1f);
  CHECK_THROWS_WITH_AS(sgd.step(params), doctest::Contains("conv.b"), NumericError);
  // the failed step must not have touched anything
  CHECK(params.at("conv.w").data() == std::vector<float>{1, 2});
  CHECK(params.at("conv.w").has_grad());
  Adam adam(0.1f);
  CHECK_THROWS_WITH_AS(adam.step(params), doctest::Contains("conv.b"), NumericError);
}

TEST_CASE("optimizers skip buffers") {
  Params params;
  params.add("w", Tensor::from_data({1}, {1.0f}, true));
  params.add("stats", Tensor::from_data({1}, {5.0f}, false));
  sum(params.at("w")).backward();
  Sgd(0.5f).step(params);
  CHECK(params.at("stats").data()[0] == 5.0f);
  CHECK(params.at("w").data()[0] == doctest::Approx(0.5f));
}

TEST_CASE("first Adam step moves by roughly lr in the gradient direction") {
  Params params;
  params.add("p", Tensor::from_data({1}, {1.0f}, true));
  Tensor p = params.at("p");
  sum(p).backward();
  Adam opt(0.1f);
  opt.step(params);
  // bias correction makes m_hat = g and v_hat = g^2 on the first step
  CHECK(p.data()[0] == doctest::Approx(0.9f).epsilon(1e-5));
  CHECK(!p.has_grad());
}

TEST_CASE("Adam converges on a quadratic and tracks moments per parameter") {
  Params params;
  params.add("a", Tensor::from_data({1}, {0.0f}, true));
  params.add("b", Tensor::from_data({1}, {10.0f}, true));
  Tensor a = params.at("a"), b = params.at("b");
  Tensor ta = Tensor::full({1}, 3.0f), tb = Tensor::full({1}, -2.0f);
  Adam opt(0.05f);
  for (int i = 0; i < 800; ++i) {
    Tensor da = sub(a, ta);
    Tensor db = sub(b, tb);
    add(sum(mul(da, da)), sum(mul(db, db))).backward();
    opt.step(params);
  }
  CHECK(std::abs(a.data()[0] - 3.0f) < 1e-2f);
  CHECK(std::abs(b.data()[0] + 2.0f) < 1e-2f);
}
