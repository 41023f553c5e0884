#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "metadm/checkpoint.hpp"
#include "metadm/diffusion.hpp"
#include "metadm/digest.hpp"
#include "metadm/errors.hpp"
#include "metadm/rng.hpp"
#include "metadm/tensor.hpp"

#include <unistd.h>

using namespace metadm;
using namespace metadm::diff;
using nn::Tensor;

namespace {

std::vector<float> random_image(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = 2.0f * rng.uniform_f32() - 1.0f;
  return v;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("metadm-diff-" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

template <typename F>
double directional_fd_err(Tensor& p, F loss_fn, int trials = 4) {
  p.zero_grad();
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<float> ga = p.grad();
  p.zero_grad();
  Rng rng(0xd1ull);
  double worst = 0.0;
  const float h = 1e-3f;
  const std::vector<float> orig = p.data();
  for (int t = 0; t < trials; ++t) {
    std::vector<float> u(orig.size());
    rng.fill_normal(u);
    double dot = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) dot += static_cast<double>(ga[i]) * u[i];
    for (std::size_t i = 0; i < u.size(); ++i) p.data()[i] = orig[i] + h * u[i];
    const double lp = loss_fn().item();
    for (std::size_t i = 0; i < u.size(); ++i) p.data()[i] = orig[i] - h * u[i];
    const double lm = loss_fn().item();
    p.data() = orig;
    const double gn = (lp - lm) / (2.0 * h);
    worst = std::max(worst, std::abs(dot - gn) / std::max({std::abs(dot), std::abs(gn), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST_CASE("noise schedule construction") {
  SUBCASE("single step uses beta_min directly") {
    NoiseSchedule s = make_schedule(1, 0.1, 0.1);
    REQUIRE(s.beta.size() == 1);
    CHECK(s.beta[0] == 0.1f);
    CHECK(s.alpha[0] == 0.9f);
    CHECK(s.alpha_bar[0] == 0.9f);
  }
  SUBCASE("stock 200-step ramp decays most of the signal") {
    NoiseSchedule s = make_schedule(200, 1e-4, 0.02);
    REQUIRE(s.beta.size() == 200);
    CHECK(s.beta[0] == doctest::Approx(1e-4));
    CHECK(s.beta[199] == doctest::Approx(0.02));
    CHECK(s.alpha_bar[199] < 0.15f);
    CHECK(s.alpha_bar[199] > 0.10f);
  }
  SUBCASE("alpha_bar is a strictly decreasing product") {
    NoiseSchedule s = make_schedule(64, 0.003, 0.3);
    double prod = 1.0;
    for (std::size_t t = 0; t < s.beta.size(); ++t) {
      CHECK(s.alpha[t] == doctest::Approx(1.0 - s.beta[t]).epsilon(1e-7));
      prod *= 1.0 - static_cast<double>(s.beta[t]);
      CHECK(std::abs(s.alpha_bar[t] - prod) < 1e-6);
      if (t > 0) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
  }
  SUBCASE("invalid arguments are rejected") {
    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), ConfigError);
  }
  SUBCASE("default betas scale with schedule length") {
    auto [lo, hi] = default_schedule_betas(200);
    CHECK(lo == doctest::Approx(5e-4));
    CHECK(hi == doctest::Approx(0.1));
    auto [lo2, hi2] = default_schedule_betas(1000);
    CHECK(lo2 == doctest::Approx(1e-4));
    CHECK(hi2 == doctest::Approx(0.02));
  }
}

TEST_CASE("forward diffusion matches the closed form") {
  NoiseSchedule s = make_schedule(10, 0.001, 0.05);
  Rng rng(3);
  std::vector<float> src = random_image(24, rng);
  std::vector<float> eps(24);
  rng.fill_normal(eps);
  Tensor s0 = Tensor::from_data({2, 3, 2, 2}, src);
  Tensor noise = Tensor::from_data({2, 3, 2, 2}, eps);

  SUBCASE("elementwise formula") {
    Tensor out = forward_diffuse(s0, 7, noise, s);
    const double sa = std::sqrt(static_cast<double>(s.alpha_bar[7]));
    const double sb = std::sqrt(1.0 - static_cast<double>(s.alpha_bar[7]));
    for (std::size_t i = 0; i < src.size(); ++i) {
      CHECK(out.data()[i] == doctest::Approx(sa * src[i] + sb * eps[i]).epsilon(1e-6));
    }
  }
  SUBCASE("zero source keeps only the noise term") {
    Tensor out = forward_diffuse(Tensor::zeros({2, 3, 2, 2}), 9, noise, s);
    const float sb = std::sqrt(1.0f - s.alpha_bar[9]);
    for (std::size_t i = 0; i < eps.size(); ++i) CHECK(out.data()[i] == sb * eps[i]);
  }
  SUBCASE("timestep bounds") {
    CHECK_THROWS_AS(forward_diffuse(s0, -1, noise, s), ConfigError);
    CHECK_THROWS_AS(forward_diffuse(s0, 10, noise, s), ConfigError);
    CHECK_THROWS_AS(forward_diffuse(s0, 3, Tensor::zeros({2, 3, 2, 3}), s), ShapeError);
  }
}

TEST_CASE("iterated single-step noising matches the closed-form jump") {
  // Monte-Carlo oracle in double precision: chain t+1 transitions
  // s_k = sqrt(alpha_k) s_{k-1} + sqrt(beta_k) eps_k and compare the sample
  // moments against the jump's mean and variance.
  NoiseSchedule s = make_schedule(20, 0.01, 0.15);
  const int t = 12;
  const int trials = 10000;
  const std::vector<double> s0 = {-0.9, -0.4, -0.1, 0.0, 0.2, 0.5, 0.8, 1.0};
  Rng rng(0xabcdef);
  for (double x0 : s0) {
    double acc = 0.0, acc2 = 0.0;
    for (int n = 0; n < trials; ++n) {
      double x = x0;
      for (int k = 0; k <= t; ++k) {
        x = std::sqrt(static_cast<double>(s.alpha[k])) * x +
            std::sqrt(static_cast<double>(s.beta[k])) * rng.normal();
      }
      acc += x;
      acc2 += x * x;
    }
    const double mean_emp = acc / trials;
    const double var_emp = acc2 / trials - mean_emp * mean_emp;
    const double mean_th = std::sqrt(static_cast<double>(s.alpha_bar[t])) * x0;
    const double var_th = 1.0 - static_cast<double>(s.alpha_bar[t]);
    const double se_mean = std::sqrt(var_emp / trials);
    const double se_var = var_th * std::sqrt(2.0 / (trials - 1));
    CHECK(std::abs(mean_emp - mean_th) < 3.0 * se_mean);
    CHECK(std::abs(var_emp - var_th) < 3.0 * se_var);
  }
}

TEST_CASE("sinusoidal time embedding") {
  Tensor e = sinusoidal_time_embedding({0, 7, 199}, 32);
  REQUIRE(e.shape() == std::vector<int>{3, 32});
  for (float v : e.data()) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  // t = 0: all sines vanish, all cosines are one.
  for (int k = 0; k < 16; ++k) {
    CHECK(e.data()[static_cast<std::size_t>(k)] == 0.0f);
    CHECK(e.data()[static_cast<std::size_t>(16 + k)] == 1.0f);
  }
  double diff = 0.0;
  for (int k = 0; k < 32; ++k) {
    diff = std::max(diff, std::abs(static_cast<double>(e.data()[static_cast<std::size_t>(k)]) -
                                   e.data()[static_cast<std::size_t>(32 + k)]));
  }
  CHECK(diff > 1e-3);
  CHECK_THROWS_AS(sinusoidal_time_embedding({1}, 31), ConfigError);
}

TEST_CASE("denoiser forward") {
  Rng rng(5);
  Denoiser model(rng);

  SUBCASE("output shape equals input shape") {
    Rng data_rng(11);
    for (const auto& shape : {std::vector<int>{2, 3, 8, 8}, std::vector<int>{1, 3, 9, 7}}) {
      const auto n = static_cast<std::size_t>(shape[0] * shape[1] * shape[2] * shape[3]);
      Tensor x = Tensor::from_data(shape, random_image(n, data_rng));
      Tensor y = model.forward(x, std::vector<int>(static_cast<std::size_t>(shape[0]), 3), false);
      CHECK(y.shape() == shape);
      for (float v : y.data()) CHECK(std::isfinite(v));
    }
  }
  SUBCASE("eval mode is deterministic") {
    Rng data_rng(12);
    Tensor x = Tensor::from_data({2, 3, 6, 6}, random_image(216, data_rng));
    Tensor a = model.forward(x, {1, 17}, false);
    Tensor b = model.forward(x, {1, 17}, false);
    CHECK(a.data() == b.data());
    Tensor c = model.forward(x, {2, 17}, false);
    CHECK(a.data() != c.data());
  }
  SUBCASE("input validation") {
    CHECK_THROWS_AS(model.forward(Tensor::zeros({2, 1, 6, 6}), {0, 1}, false), ShapeError);
    CHECK_THROWS_AS(model.forward(Tensor::zeros({2, 3, 6, 6}), {0}, false), ShapeError);
  }
  SUBCASE("parameter registration") {
    // 5 bias-free convs, the biased output conv, 5 norms (gamma, beta, two
    // running buffers), 5 time projections (w+b).
    CHECK(model.params().size() == 37);
    CHECK(model.params().trainable().size() == 27);
    CHECK(model.params().contains("enc1.conv.w"));
    CHECK(model.params().contains("dec2.bn.running_var"));
    CHECK(model.params().contains("out.conv.b"));
  }
}

TEST_CASE("noise prediction error") {
  SUBCASE("perfect predictor scores exactly zero") {
    Rng rng(21);
    std::vector<float> e(96);
    rng.fill_normal(e);
    Tensor eps = Tensor::from_data({2, 3, 4, 4}, e);
    CHECK(noise_mse(eps, eps).item() == 0.0f);
  }
  SUBCASE("zero predictor scores the noise variance") {
    Rng rng(22);
    std::vector<float> e(10080);
    rng.fill_normal(e);
    Tensor eps = Tensor::from_data({4, 3, 28, 30}, e);
    CHECK(std::abs(noise_mse(Tensor::zeros({4, 3, 28, 30}), eps).item() - 1.0) < 0.05);
  }
  SUBCASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(noise_mse(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  }
}

TEST_CASE("diffusion loss") {
  NoiseSchedule sched = make_schedule(16, 0.005, 0.2);
  Rng rng(31);
  Denoiser model(rng);
  const std::size_t n = 2 * 3 * 6 * 6;
  Tensor s0 = Tensor::from_data({2, 3, 6, 6}, random_image(n, rng));

  SUBCASE("sampled loss is finite and near the noise scale") {
    Rng loss_rng(32);
    Tensor loss = diffusion_loss(model, s0, sched, loss_rng);
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() > 0.0f);
    CHECK(loss.item() < 10.0f);
  }
  SUBCASE("backward reaches every trainable parameter") {
    Rng loss_rng(33);
    model.params().zero_grad();
    Tensor loss = diffusion_loss(model, s0, sched, loss_rng);
    loss.backward();
    for (const auto& [name, t] : model.params().entries()) {
      if (!t.requires_grad()) continue;
      REQUIRE_MESSAGE(!t.grad().empty(), name.c_str());
      double mag = 0.0;
      for (float g : t.grad()) mag += std::abs(static_cast<double>(g));
      CHECK_MESSAGE(mag > 0.0, name.c_str());
    }
  }
  SUBCASE("gradients agree with finite differences through the whole model") {
    std::vector<float> e(n);
    Rng eps_rng(34);
    eps_rng.fill_normal(e);
    const std::vector<int> ts = {3, 11};
    Tensor eps = Tensor::from_data({2, 3, 6, 6}, e);
    auto loss_fn = [&] { return diffusion_loss_with(model, s0, ts, eps, sched, true); };

    // The norms center every pre-activation at the rectifier kink when beta
    // is zero, which ruins finite differences. Shift the offsets so most
    // units sit on a smooth branch; the masked minority still exercises the
    // rectifier backward.
    for (auto& [name, t] : model.params().entries()) {
      if (name.ends_with("bn.beta") || name.ends_with("temb.b")) {
        std::fill(t.data().begin(), t.data().end(), 0.75f);
      }
    }

    // Joint direction over every trainable tensor: per-parameter quotients
    // are noise-dominated for the small-gradient upstream layers in f32, but
    // the joint derivative is well scaled and still flags a systematic error
    // anywhere in the chain. The median over trials rides out residual kink
    // crossings, which hit single directions, unlike a wrong backward.
    // Per-op precision lives in the tensor op tests.
    std::vector<Tensor> params = model.params().trainable();
    model.params().zero_grad();
    loss_fn().backward();
    std::vector<std::vector<float>> grads, origs;
    for (auto& p : params) {
      grads.push_back(p.grad());
      origs.push_back(p.data());
    }
    model.params().zero_grad();
    Rng dir_rng(0xfd);
    const float h = 3e-4f;
    std::vector<double> rels;
    for (int trial = 0; trial < 9; ++trial) {
      double dot = 0.0;
      std::vector<std::vector<float>> dirs(params.size());
      for (std::size_t k = 0; k < params.size(); ++k) {
        dirs[k].resize(origs[k].size());
        dir_rng.fill_normal(dirs[k]);
        for (std::size_t i = 0; i < dirs[k].size(); ++i) {
          dot += static_cast<double>(grads[k][i]) * dirs[k][i];
        }
      }
      auto shift = [&](float sign) {
        for (std::size_t k = 0; k < params.size(); ++k) {
          for (std::size_t i = 0; i < dirs[k].size(); ++i) {
            params[k].data()[i] = origs[k][i] + sign * h * dirs[k][i];
          }
        }
      };
      shift(1.0f);
      const double lp = loss_fn().item();
      shift(-1.0f);
      const double lm = loss_fn().item();
      for (std::size_t k = 0; k < params.size(); ++k) params[k].data() = origs[k];
      const double gn = (lp - lm) / (2.0 * h);
      rels.push_back(std::abs(dot - gn) / std::max({std::abs(dot), std::abs(gn), 1e-6}));
    }
    std::sort(rels.begin(), rels.end());
    CHECK(rels[rels.size() / 2] < 1e-2);
    CHECK(rels.back() < 0.2);
  }
  SUBCASE("per-row timesteps are validated") {
    CHECK_THROWS_AS(
        diffusion_loss_with(model, s0, {3, 16}, Tensor::zeros({2, 3, 6, 6}), sched, true),
        ConfigError);
    CHECK_THROWS_AS(
        diffusion_loss_with(model, s0, {3}, Tensor::zeros({2, 3, 6, 6}), sched, true),
        ShapeError);
  }
}

TEST_CASE("reverse step") {
  Rng rng(41);
  Denoiser model(rng);
  NoiseSchedule sched = make_schedule(12, 0.01, 0.2);
  const std::size_t n = 1 * 3 * 6 * 6;
  Tensor s_t = Tensor::from_data({1, 3, 6, 6}, random_image(n, rng));

  SUBCASE("matches the update formula") {
    const int t = 5;
    Rng step_rng(42);
    Tensor out = denoise_step(model, s_t, t, sched, step_rng);
    {
      nn::NoGradGuard ng;
      Tensor eps = model.forward(s_t, {t}, false);
      Rng clone(42);
      const double inv = 1.0 / std::sqrt(static_cast<double>(sched.alpha[5]));
      const double coef =
          static_cast<double>(sched.beta[5]) / std::sqrt(1.0 - static_cast<double>(sched.alpha_bar[5]));
      const double sigma = std::sqrt(static_cast<double>(sched.beta[5]));
      for (std::size_t i = 0; i < n; ++i) {
        const double want =
            inv * (s_t.data()[i] - coef * eps.data()[i]) + sigma * clone.normal();
        CHECK(out.data()[i] == doctest::Approx(want).epsilon(1e-5));
      }
    }
  }
  SUBCASE("final step draws no noise") {
    Rng a(7), b(7);
    Tensor x = denoise_step(model, s_t, 0, sched, a);
    Tensor y = denoise_step(model, s_t, 0, sched, b);
    CHECK(x.data() == y.data());
    CHECK(a.next_u64() == Rng(7).next_u64());
  }
  SUBCASE("vanishing beta leaves the state nearly fixed") {
    NoiseSchedule tiny = make_schedule(12, 1e-8, 1e-8);
    Rng step_rng(43);
    Tensor out = denoise_step(model, s_t, 5, tiny, step_rng);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(out.data()[i]) - s_t.data()[i]));
    }
    CHECK(worst < 1e-2);
  }
  SUBCASE("timestep bounds") {
    Rng step_rng(44);
    CHECK_THROWS_AS(denoise_step(model, s_t, 12, sched, step_rng), ConfigError);
  }
}

TEST_CASE("image-to-image generation") {
  Rng rng(51);
  Denoiser model(rng);
  NoiseSchedule sched = make_schedule(kDefaultTimesteps, 5e-4, 0.1);
  Tensor source = Tensor::from_data({3, 12, 12}, random_image(3 * 12 * 12, rng));

  SUBCASE("zero strength returns the source bit for bit") {
    Tensor out = img2img_generate(model, source, {.strength = 0.0f, .seed = 9}, sched);
    CHECK(out.data() == source.data());
  }
  SUBCASE("strength outside the unit interval is rejected") {
    CHECK_THROWS_AS(img2img_generate(model, source, {.strength = -0.1f, .seed = 9}, sched),
                    ConfigError);
    CHECK_THROWS_AS(img2img_generate(model, source, {.strength = 1.2f, .seed = 9}, sched),
                    ConfigError);
  }
  SUBCASE("fixed seed reproduces bit for bit") {
    Tensor a = img2img_generate(model, source, {.strength = 0.1f, .seed = 77}, sched);
    Tensor b = img2img_generate(model, source, {.strength = 0.1f, .seed = 77}, sched);
    Tensor c = img2img_generate(model, source, {.strength = 0.1f, .seed = 78}, sched);
    CHECK(a.data() == b.data());
    CHECK(a.data() != c.data());
    for (float v : a.data()) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
  }
  SUBCASE("full strength starts from near-pure noise") {
    Rng noise_rng(7);
    std::vector<float> eps(3 * 32 * 32);
    noise_rng.fill_normal(eps);
    Tensor big = Tensor::from_data({3, 32, 32}, random_image(3 * 32 * 32, noise_rng));
    Tensor start = forward_diffuse(big, sched.T - 1, Tensor::from_data({3, 32, 32}, eps), sched);
    double acc = 0.0, acc2 = 0.0;
    for (float v : start.data()) {
      acc += v;
      acc2 += static_cast<double>(v) * v;
    }
    const double mean = acc / start.numel();
    const double var = acc2 / start.numel() - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 0.05);
  }
  SUBCASE("distance to the source grows with strength") {
    const std::size_t numel = 3 * 12 * 12;
    std::vector<std::vector<float>> sources;
    Rng src_rng(52);
    for (int i = 0; i < 8; ++i) sources.push_back(random_image(numel, src_rng));
    double prev = -1.0;
    for (float strength : {0.05f, 0.2f, 0.5f}) {
      auto outs = img2img_batch(model, sources, {3, 12, 12}, strength, 99, sched);
      double total = 0.0;
      for (std::size_t i = 0; i < sources.size(); ++i) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < numel; ++j) {
          const double d = static_cast<double>(outs[i][j]) - sources[i][j];
          d2 += d * d;
        }
        total += std::sqrt(d2);
      }
      const double mean_l2 = total / static_cast<double>(sources.size());
      CHECK(mean_l2 > prev);
      prev = mean_l2;
    }
  }
  SUBCASE("batch output equals per-image generation") {
    const std::size_t numel = 3 * 8 * 8;
    std::vector<std::vector<float>> sources;
    Rng src_rng(53);
    for (int i = 0; i < 4; ++i) sources.push_back(random_image(numel, src_rng));
    auto outs = img2img_batch(model, sources, {3, 8, 8}, 0.2f, 123, sched);
    REQUIRE(outs.size() == 4);
    for (std::size_t i = 0; i < sources.size(); ++i) {
      Tensor single = img2img_generate(model, Tensor::from_data({3, 8, 8}, sources[i]),
                                       {.strength = 0.2f, .seed = Rng::mix(123, i)}, sched);
      CHECK(outs[i] == single.data());
    }
    auto shifted = img2img_batch(model, {sources[2], sources[3]}, {3, 8, 8}, 0.2f, 123, sched,
                                 /*start_index=*/2);
    CHECK(shifted[0] == outs[2]);
    CHECK(shifted[1] == outs[3]);
  }
}

TEST_CASE("denoiser training") {
  NoiseSchedule sched = make_schedule(50, default_schedule_betas(50).first,
                                      default_schedule_betas(50).second);
  const std::vector<int> shape = {3, 12, 12};
  const std::size_t numel = 3 * 12 * 12;

  SUBCASE("loss drops below the zero-predictor baseline") {
    Rng rng(61);
    Denoiser model(rng);
    std::vector<std::vector<float>> images;
    for (int i = 0; i < 12; ++i) images.push_back(random_image(numel, rng));
    DiffusionTrainOptions opts;
    opts.epochs = 30;
    opts.batch_size = 6;
    opts.lr = 3e-3f;
    opts.seed = 62;
    const std::vector<double> losses = train_denoiser(model, images, shape, sched, opts);
    REQUIRE(losses.size() == 30);
    CHECK(losses.back() < losses.front());
    CHECK(losses.back() < 0.98);
  }
  SUBCASE("non-finite loss aborts with a diagnostic") {
    Rng rng(63);
    Denoiser model(rng);
    // Poison a bias on the output path; its channel goes non-finite without
    // passing through a rectifier that would mask it.
    model.params().at("out.conv.b").data()[0] = std::numeric_limits<float>::infinity();
    std::vector<std::vector<float>> images(2, std::vector<float>(numel, 0.0f));
    DiffusionTrainOptions opts;
    opts.epochs = 1;
    opts.batch_size = 2;
    CHECK_THROWS_AS(train_denoiser(model, images, shape, sched, opts), NumericError);
  }
  SUBCASE("degenerate options are rejected") {
    Rng rng(64);
    Denoiser model(rng);
    DiffusionTrainOptions opts;
    opts.epochs = 0;
    CHECK_THROWS_AS(
        train_denoiser(model, {std::vector<float>(numel, 0.0f)}, shape, sched, opts),
        ConfigError);
    opts.epochs = 1;
    CHECK_THROWS_AS(train_denoiser(model, {}, shape, sched, opts), ConfigError);
  }
}

TEST_CASE("denoiser checkpoints") {
  TempDir tmp;
  Rng rng_a(71), rng_b(72);
  Denoiser a(rng_a);
  Denoiser b(rng_b);
  NoiseSchedule sched = make_schedule(37, 0.003, 0.4);

  SUBCASE("round trip restores weights and schedule") {
    const std::string path = tmp.file("denoiser.ckpt");
    save_denoiser(path, a, sched);
    NoiseSchedule loaded = load_denoiser(path, b);
    CHECK(loaded.T == 37);
    CHECK(loaded.beta_min == 0.003);
    CHECK(loaded.beta_max == 0.4);
    CHECK(loaded.alpha_bar == sched.alpha_bar);
    for (const auto& [name, t] : a.params().entries()) {
      CHECK(b.params().at(name).data() == t.data());
    }
    Rng data_rng(73);
    Tensor x = Tensor::from_data({1, 3, 8, 8}, random_image(3 * 8 * 8, data_rng));
    nn::NoGradGuard ng;
    CHECK(a.forward(x, {5}, false).data() == b.forward(x, {5}, false).data());

    const std::string again = tmp.file("denoiser2.ckpt");
    save_denoiser(again, b, loaded);
    CHECK(sha256_file_hex(again) == sha256_file_hex(path));
  }
  SUBCASE("plain parameter files are refused") {
    const std::string path = tmp.file("plain.ckpt");
    nn::save_params(path, a.params());
    CHECK_THROWS_WITH_AS(load_denoiser(path, b), doctest::Contains("version"),
                         DataIntegrityError);
  }
  SUBCASE("denoiser files are refused by the plain loader") {
    const std::string path = tmp.file("denoiser.ckpt");
    save_denoiser(path, a, sched);
    CHECK_THROWS_WITH_AS(nn::load_params(path), doctest::Contains("version"), DataIntegrityError);
  }
}
