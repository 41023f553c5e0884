#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metadm/layers.hpp"
#include "metadm/rng.hpp"
#include "metadm/tensor.hpp"

namespace metadm::diff {

struct NoiseSchedule {
  int T = 0;
  double beta_min = 0.0;  // the make_schedule arguments, kept for checkpointing
  double beta_max = 0.0;
  std::vector<float> beta;
  std::vector<float> alpha;      // 1 - beta[t]
  std::vector<float> alpha_bar;  // running product of alpha, strictly decreasing
};

// Linear beta ramp over T steps; T=1 collapses to beta = {beta_min}.
NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

// The stock 1e-4..0.02 ramp is tuned for 1000 steps; shorter schedules scale
// the betas up by 1000/T so the total noise injected stays comparable.
std::pair<double, double> default_schedule_betas(int T);

inline constexpr int kDefaultTimesteps = 200;

// Closed-form jump to step t: sqrt(abar_t) * s0 + sqrt(1 - abar_t) * noise.
// Equals t+1 iterative single-step noisings in distribution.
nn::Tensor forward_diffuse(const nn::Tensor& s0, int t, const nn::Tensor& noise,
                           const NoiseSchedule& schedule);

// One {len(ts), dim} row per timestep: sin halves then cos halves of
// geometrically spaced frequencies. Constant wrt the graph.
nn::Tensor sinusoidal_time_embedding(const std::vector<int>& ts, int dim);

// Noise predictor. Constant-resolution conv stages with additive skips; the
// time embedding enters each stage as a per-channel bias after the norm, so
// the norm cannot wash it out. Output shape always equals input shape.
class Denoiser {
 public:
  static constexpr int kTimeEmbedDim = 32;

  explicit Denoiser(Rng& rng);
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) = default;

  // x: [B,3,H,W]; ts: one timestep per batch row.
  nn::Tensor forward(const nn::Tensor& x, const std::vector<int>& ts, bool training);

  nn::Params& params() { return params_; }
  const nn::Params& params() const { return params_; }

 private:
  nn::Conv2d enc1_, enc2_, enc3_, dec1_, dec2_, out_;
  nn::BatchNorm2d bn_enc1_, bn_enc2_, bn_enc3_, bn_dec1_, bn_dec2_;
  nn::Linear temb_enc1_, temb_enc2_, temb_enc3_, temb_dec1_, temb_dec2_;
  nn::Params params_;
};

// Mean over all elements of (pred - eps)^2.
nn::Tensor noise_mse(const nn::Tensor& pred, const nn::Tensor& eps);

// Deterministic core: noises each batch row to its own timestep with the
// given eps, runs the model, returns the prediction error.
nn::Tensor diffusion_loss_with(Denoiser& model, const nn::Tensor& s0_batch,
                               const std::vector<int>& ts, const nn::Tensor& eps,
                               const NoiseSchedule& schedule, bool training = true);

// Samples per-row t ~ U[0,T) and elementwise standard-normal eps from rng,
// then defers to the deterministic core.
nn::Tensor diffusion_loss(Denoiser& model, const nn::Tensor& s0_batch,
                          const NoiseSchedule& schedule, Rng& rng, bool training = true);

// Ancestral reverse step from t to t-1, eval mode, no graph. sigma = sqrt(beta_t);
// the noise term is dropped at t=0. rng is consumed only when t > 0.
nn::Tensor denoise_step(Denoiser& model, const nn::Tensor& s_t, int t,
                        const NoiseSchedule& schedule, Rng& rng);

struct GeneratorConfig {
  float strength = 0.05f;  // in [0,1]; t_start = round(strength * T)
  std::uint64_t seed = 0;
};

// Image-to-image: noise the source to t_start, then denoise back down.
// strength 0 returns the source bit-unchanged; output is clamped to [-1,1].
// source is a single [3,H,W] image.
nn::Tensor img2img_generate(Denoiser& model, const nn::Tensor& source,
                            const GeneratorConfig& cfg, const NoiseSchedule& schedule);

// Batched variant over flat CHW images. Image i draws from its own stream
// seeded Rng::mix(base_seed, start_index + i), so results are bit-identical
// to per-image img2img_generate calls and independent of batching.
std::vector<std::vector<float>> img2img_batch(Denoiser& model,
                                              const std::vector<std::vector<float>>& sources,
                                              const std::vector<int>& image_shape, float strength,
                                              std::uint64_t base_seed,
                                              const NoiseSchedule& schedule,
                                              std::int64_t start_index = 0);

struct DiffusionTrainOptions {
  int epochs = 30;
  int batch_size = 16;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
};

// Adam on the noise-prediction error over shuffled minibatches. Returns the
// per-epoch mean loss. Aborts with a diagnostic if the loss leaves the reals.
std::vector<double> train_denoiser(Denoiser& model, const std::vector<std::vector<float>>& images,
                                   const std::vector<int>& image_shape,
                                   const NoiseSchedule& schedule,
                                   const DiffusionTrainOptions& opts);

// Denoiser checkpoints extend the parameter container format: version 2
// inserts {T u32, beta_min f64, beta_max f64} between version and count, so
// one file pins both weights and schedule.
inline constexpr std::uint32_t kCheckpointVersionDenoiser = 2;

void save_denoiser(const std::string& path, const Denoiser& model, const NoiseSchedule& schedule);
// Overwrites model's parameters; returns the stored schedule.
NoiseSchedule load_denoiser(const std::string& path, Denoiser& model);

}  // namespace metadm::diff
