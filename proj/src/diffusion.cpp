#include "metadm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <numeric>

#include "metadm/checkpoint.hpp"
#include "metadm/errors.hpp"
#include "metadm/optim.hpp"

namespace metadm::diff {

namespace {

void check_timestep(int t, const NoiseSchedule& schedule, const char* where) {
  if (t < 0 || t >= schedule.T) {
    throw ConfigError(std::string(where) + ": timestep " + std::to_string(t) +
                      " outside schedule of " + std::to_string(schedule.T) + " steps");
  }
}

void check_image_batch(const nn::Tensor& x, const char* where) {
  if (x.ndim() != 4 || x.dim(1) != 3) {
    throw ShapeError(std::string(where) + " expects a [B,3,H,W] batch");
  }
}

// dst = sqrt(abar) * src + sqrt(1 - abar) * noise, elementwise in f32.
void noised_into(float* dst, const float* src, const float* noise, std::int64_t n, float abar) {
  const float sa = std::sqrt(abar);
  const float sb = std::sqrt(1.0f - abar);
  for (std::int64_t i = 0; i < n; ++i) dst[i] = sa * src[i] + sb * noise[i];
}

}  // namespace

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 1) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_min > 0.0) || !(beta_max < 1.0) || !(beta_min <= beta_max)) {
    throw ConfigError("noise schedule needs 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double b =
        T == 1 ? beta_min : beta_min + (beta_max - beta_min) * static_cast<double>(t) / (T - 1);
    prod *= 1.0 - b;
    s.beta[static_cast<std::size_t>(t)] = static_cast<float>(b);
    s.alpha[static_cast<std::size_t>(t)] = static_cast<float>(1.0 - b);
    s.alpha_bar[static_cast<std::size_t>(t)] = static_cast<float>(prod);
  }
  return s;
}

std::pair<double, double> default_schedule_betas(int T) {
  if (T < 1) throw ConfigError("noise schedule needs at least one step");
  const double scale = 1000.0 / T;
  return {1e-4 * scale, 0.02 * scale};
}

nn::Tensor forward_diffuse(const nn::Tensor& s0, int t, const nn::Tensor& noise,
                           const NoiseSchedule& schedule) {
  check_timestep(t, schedule, "forward_diffuse");
  if (s0.shape() != noise.shape()) {
    throw ShapeError("forward_diffuse: noise shape must match the source");
  }
  std::vector<float> out(static_cast<std::size_t>(s0.numel()));
  noised_into(out.data(), s0.data().data(), noise.data().data(), s0.numel(),
              schedule.alpha_bar[static_cast<std::size_t>(t)]);
  return nn::Tensor::from_data(s0.shape(), std::move(out));
}

nn::Tensor sinusoidal_time_embedding(const std::vector<int>& ts, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("time embedding dim must be even and >= 2");
  const int half = dim / 2;
  const int rows = static_cast<int>(ts.size());
  std::vector<float> data(static_cast<std::size_t>(rows) * dim);
  for (int r = 0; r < rows; ++r) {
    float* row = data.data() + static_cast<std::size_t>(r) * dim;
    for (int k = 0; k < half; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
      const double a = ts[static_cast<std::size_t>(r)] * freq;
      row[k] = static_cast<float>(std::sin(a));
      row[half + k] = static_cast<float>(std::cos(a));
    }
  }
  return nn::Tensor::from_data({rows, dim}, std::move(data));
}

// Inner convs run without bias: the following norm would cancel it anyway,
// leaving a parameter with an identically zero gradient.
Denoiser::Denoiser(Rng& rng)
    : enc1_(3, 32, 3, 1, 1, false, rng),
      enc2_(32, 64, 3, 1, 1, false, rng),
      enc3_(64, 64, 3, 1, 1, false, rng),
      dec1_(64, 64, 3, 1, 1, false, rng),
      dec2_(64, 32, 3, 1, 1, false, rng),
      out_(32, 3, 3, 1, 1, true, rng),
      bn_enc1_(32),
      bn_enc2_(64),
      bn_enc3_(64),
      bn_dec1_(64),
      bn_dec2_(32),
      temb_enc1_(kTimeEmbedDim, 32, rng),
      temb_enc2_(kTimeEmbedDim, 64, rng),
      temb_enc3_(kTimeEmbedDim, 64, rng),
      temb_dec1_(kTimeEmbedDim, 64, rng),
      temb_dec2_(kTimeEmbedDim, 32, rng) {
  enc1_.register_into(params_, "enc1.conv");
  bn_enc1_.register_into(params_, "enc1.bn");
  temb_enc1_.register_into(params_, "enc1.temb");
  enc2_.register_into(params_, "enc2.conv");
  bn_enc2_.register_into(params_, "enc2.bn");
  temb_enc2_.register_into(params_, "enc2.temb");
  enc3_.register_into(params_, "enc3.conv");
  bn_enc3_.register_into(params_, "enc3.bn");
  temb_enc3_.register_into(params_, "enc3.temb");
  dec1_.register_into(params_, "dec1.conv");
  bn_dec1_.register_into(params_, "dec1.bn");
  temb_dec1_.register_into(params_, "dec1.temb");
  dec2_.register_into(params_, "dec2.conv");
  bn_dec2_.register_into(params_, "dec2.bn");
  temb_dec2_.register_into(params_, "dec2.temb");
  out_.register_into(params_, "out.conv");
}

namespace {

nn::Tensor denoiser_stage(const nn::Conv2d& conv, nn::BatchNorm2d& bn, const nn::Linear& temb,
                          const nn::Tensor& x, const nn::Tensor& emb, bool training) {
  nn::Tensor h = bn.forward(conv.forward(x), training);
  h = nn::add_channel_vec(h, temb.forward(emb));
  return nn::relu(h);
}

}  // namespace

nn::Tensor Denoiser::forward(const nn::Tensor& x, const std::vector<int>& ts, bool training) {
  check_image_batch(x, "Denoiser::forward");
  if (static_cast<std::int64_t>(ts.size()) != x.dim(0)) {
    throw ShapeError("Denoiser::forward: one timestep per batch row required");
  }
  const nn::Tensor emb = sinusoidal_time_embedding(ts, kTimeEmbedDim);
  const nn::Tensor h1 = denoiser_stage(enc1_, bn_enc1_, temb_enc1_, x, emb, training);
  const nn::Tensor h2 = denoiser_stage(enc2_, bn_enc2_, temb_enc2_, h1, emb, training);
  const nn::Tensor h3 = denoiser_stage(enc3_, bn_enc3_, temb_enc3_, h2, emb, training);
  const nn::Tensor g1 =
      nn::add(denoiser_stage(dec1_, bn_dec1_, temb_dec1_, h3, emb, training), h2);
  const nn::Tensor g2 =
      nn::add(denoiser_stage(dec2_, bn_dec2_, temb_dec2_, g1, emb, training), h1);
  return out_.forward(g2);
}

nn::Tensor noise_mse(const nn::Tensor& pred, const nn::Tensor& eps) {
  if (pred.shape() != eps.shape()) {
    throw ShapeError("noise_mse: prediction and noise shapes must match");
  }
  const nn::Tensor d = nn::sub(pred, eps);
  return nn::mean(nn::mul(d, d));
}

nn::Tensor diffusion_loss_with(Denoiser& model, const nn::Tensor& s0_batch,
                               const std::vector<int>& ts, const nn::Tensor& eps,
                               const NoiseSchedule& schedule, bool training) {
  check_image_batch(s0_batch, "diffusion_loss");
  if (s0_batch.shape() != eps.shape()) {
    throw ShapeError("diffusion_loss: noise shape must match the batch");
  }
  if (static_cast<std::int64_t>(ts.size()) != s0_batch.dim(0)) {
    throw ShapeError("diffusion_loss: one timestep per batch row required");
  }
  const std::int64_t row = s0_batch.numel() / s0_batch.dim(0);
  std::vector<float> noisy(static_cast<std::size_t>(s0_batch.numel()));
  for (std::int64_t b = 0; b < s0_batch.dim(0); ++b) {
    const int t = ts[static_cast<std::size_t>(b)];
    check_timestep(t, schedule, "diffusion_loss");
    noised_into(noisy.data() + b * row, s0_batch.data().data() + b * row,
                eps.data().data() + b * row, row,
                schedule.alpha_bar[static_cast<std::size_t>(t)]);
  }
  const nn::Tensor s_t = nn::Tensor::from_data(s0_batch.shape(), std::move(noisy));
  return noise_mse(model.forward(s_t, ts, training), eps);
}

nn::Tensor diffusion_loss(Denoiser& model, const nn::Tensor& s0_batch,
                          const NoiseSchedule& schedule, Rng& rng, bool training) {
  check_image_batch(s0_batch, "diffusion_loss");
  std::vector<int> ts(static_cast<std::size_t>(s0_batch.dim(0)));
  for (auto& t : ts) t = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(schedule.T)));
  std::vector<float> eps(static_cast<std::size_t>(s0_batch.numel()));
  rng.fill_normal(eps);
  return diffusion_loss_with(model, s0_batch,
                             ts, nn::Tensor::from_data(s0_batch.shape(), std::move(eps)), schedule,
                             training);
}

nn::Tensor denoise_step(Denoiser& model, const nn::Tensor& s_t, int t,
                        const NoiseSchedule& schedule, Rng& rng) {
  check_image_batch(s_t, "denoise_step");
  check_timestep(t, schedule, "denoise_step");
  nn::NoGradGuard ng;
  const std::vector<int> ts(static_cast<std::size_t>(s_t.dim(0)), t);
  const nn::Tensor eps = model.forward(s_t, ts, false);
  const auto ti = static_cast<std::size_t>(t);
  const float inv = 1.0f / std::sqrt(schedule.alpha[ti]);
  const float coef = schedule.beta[ti] / std::sqrt(1.0f - schedule.alpha_bar[ti]);
  const float sigma = std::sqrt(schedule.beta[ti]);
  std::vector<float> out(static_cast<std::size_t>(s_t.numel()));
  const float* s = s_t.data().data();
  const float* e = eps.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv * (s[i] - coef * e[i]);
  if (t > 0) {
    for (auto& v : out) v += sigma * rng.normal_f32();
  }
  return nn::Tensor::from_data(s_t.shape(), std::move(out));
}

namespace {

int start_timestep(float strength, const NoiseSchedule& schedule, const char* where) {
  if (!(strength >= 0.0f) || !(strength <= 1.0f)) {
    throw ConfigError(std::string(where) + ": strength must lie in [0,1]");
  }
  return static_cast<int>(std::lround(static_cast<double>(strength) * schedule.T));
}

}  // namespace

nn::Tensor img2img_generate(Denoiser& model, const nn::Tensor& source,
                            const GeneratorConfig& cfg, const NoiseSchedule& schedule) {
  if (source.ndim() != 3 || source.dim(0) != 3) {
    throw ShapeError("img2img_generate expects a [3,H,W] source image");
  }
  const int t_start = start_timestep(cfg.strength, schedule, "img2img_generate");
  if (t_start == 0) return nn::Tensor::from_data(source.shape(), source.data());

  nn::NoGradGuard ng;
  Rng rng(cfg.seed);
  std::vector<float> noise(static_cast<std::size_t>(source.numel()));
  rng.fill_normal(noise);
  const std::vector<int> batch_shape = {1, source.dim(0), source.dim(1), source.dim(2)};
  nn::Tensor s = forward_diffuse(nn::Tensor::from_data(batch_shape, source.data()), t_start - 1,
                                 nn::Tensor::from_data(batch_shape, std::move(noise)), schedule);
  for (int t = t_start - 1; t >= 0; --t) s = denoise_step(model, s, t, schedule, rng);
  std::vector<float> out = s.data();
  for (auto& v : out) v = std::clamp(v, -1.0f, 1.0f);
  return nn::Tensor::from_data(source.shape(), std::move(out));
}

std::vector<std::vector<float>> img2img_batch(Denoiser& model,
                                              const std::vector<std::vector<float>>& sources,
                                              const std::vector<int>& image_shape, float strength,
                                              std::uint64_t base_seed,
                                              const NoiseSchedule& schedule,
                                              std::int64_t start_index) {
  if (image_shape.size() != 3 || image_shape[0] != 3) {
    throw ShapeError("img2img_batch expects [3,H,W] images");
  }
  const auto numel = static_cast<std::size_t>(image_shape[0]) *
                     static_cast<std::size_t>(image_shape[1]) *
                     static_cast<std::size_t>(image_shape[2]);
  for (const auto& img : sources) {
    if (img.size() != numel) throw ShapeError("img2img_batch: image size mismatch");
  }
  const int t_start = start_timestep(strength, schedule, "img2img_batch");
  std::vector<std::vector<float>> out(sources.size());
  if (t_start == 0) {
    for (std::size_t i = 0; i < sources.size(); ++i) out[i] = sources[i];
    return out;
  }

  // Chunked to cap activation memory. Eval-mode kernels treat batch rows
  // independently, so chunk size never changes the bits.
  nn::NoGradGuard ng;
  constexpr std::size_t kChunk = 32;
  const auto abar = schedule.alpha_bar[static_cast<std::size_t>(t_start - 1)];
  for (std::size_t lo = 0; lo < sources.size(); lo += kChunk) {
    const std::size_t n = std::min(kChunk, sources.size() - lo);
    std::vector<Rng> rngs;
    rngs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      rngs.emplace_back(Rng::mix(base_seed, static_cast<std::uint64_t>(start_index +
                                                                       static_cast<std::int64_t>(lo + i))));
    }
    const std::vector<int> batch_shape = {static_cast<int>(n), image_shape[0], image_shape[1],
                                          image_shape[2]};
    std::vector<float> data(n * numel);
    std::vector<float> noise(numel);
    for (std::size_t i = 0; i < n; ++i) {
      rngs[i].fill_normal(noise);
      noised_into(data.data() + i * numel, sources[lo + i].data(), noise.data(),
                  static_cast<std::int64_t>(numel), abar);
    }
    nn::Tensor s = nn::Tensor::from_data(batch_shape, std::move(data));
    for (int t = t_start - 1; t >= 0; --t) {
      const std::vector<int> ts(n, t);
      const nn::Tensor eps = model.forward(s, ts, false);
      const auto ti = static_cast<std::size_t>(t);
      const float inv = 1.0f / std::sqrt(schedule.alpha[ti]);
      const float coef = schedule.beta[ti] / std::sqrt(1.0f - schedule.alpha_bar[ti]);
      const float sigma = std::sqrt(schedule.beta[ti]);
      std::vector<float> next(n * numel);
      const float* sp = s.data().data();
      const float* ep = eps.data().data();
      for (std::size_t i = 0; i < n; ++i) {
        float* dst = next.data() + i * numel;
        const float* si = sp + i * numel;
        const float* ei = ep + i * numel;
        for (std::size_t j = 0; j < numel; ++j) dst[j] = inv * (si[j] - coef * ei[j]);
        if (t > 0) {
          for (std::size_t j = 0; j < numel; ++j) dst[j] += sigma * rngs[i].normal_f32();
        }
      }
      s = nn::Tensor::from_data(batch_shape, std::move(next));
    }
    const float* sp = s.data().data();
    for (std::size_t i = 0; i < n; ++i) {
      out[lo + i].resize(numel);
      for (std::size_t j = 0; j < numel; ++j) {
        out[lo + i][j] = std::clamp(sp[i * numel + j], -1.0f, 1.0f);
      }
    }
  }
  return out;
}

std::vector<double> train_denoiser(Denoiser& model, const std::vector<std::vector<float>>& images,
                                   const std::vector<int>& image_shape,
                                   const NoiseSchedule& schedule,
                                   const DiffusionTrainOptions& opts) {
  if (image_shape.size() != 3 || image_shape[0] != 3) {
    throw ShapeError("train_denoiser expects [3,H,W] images");
  }
  if (images.empty()) throw ConfigError("train_denoiser: no training images");
  if (opts.epochs < 1 || opts.batch_size < 1) {
    throw ConfigError("train_denoiser: epochs and batch_size must be positive");
  }
  const auto numel = static_cast<std::size_t>(image_shape[0]) *
                     static_cast<std::size_t>(image_shape[1]) *
                     static_cast<std::size_t>(image_shape[2]);
  for (const auto& img : images) {
    if (img.size() != numel) throw ShapeError("train_denoiser: image size mismatch");
  }

  Rng rng(opts.seed);
  nn::Adam optim(opts.lr);
  std::vector<int> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_losses;
  epoch_losses.reserve(static_cast<std::size_t>(opts.epochs));
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    // Full-length without-replacement draw doubles as a shuffle.
    order = rng.sample_without_replacement(static_cast<int>(images.size()),
                                          static_cast<int>(images.size()));
    double total = 0.0;
    int batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t n =
          std::min(static_cast<std::size_t>(opts.batch_size), order.size() - lo);
      std::vector<float> data(n * numel);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& img = images[static_cast<std::size_t>(order[lo + i])];
        std::copy(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(i * numel));
      }
      const std::vector<int> batch_shape = {static_cast<int>(n), image_shape[0], image_shape[1],
                                            image_shape[2]};
      nn::Tensor batch = nn::Tensor::from_data(batch_shape, std::move(data));
      model.params().zero_grad();
      nn::Tensor loss = diffusion_loss(model, batch, schedule, rng, true);
      const double value = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(value)) {
        throw NumericError("denoiser training diverged: loss became non-finite at epoch " +
                           std::to_string(epoch));
      }
      loss.backward();
      optim.step(model.params());
      total += value;
      ++batches;
    }
    epoch_losses.push_back(total / batches);
  }
  return epoch_losses;
}

namespace {

void copy_entries_into(const nn::Params& loaded, nn::Params& dst, const std::string& path) {
  if (loaded.size() != dst.size()) {
    throw DataIntegrityError("'" + path + "' holds " + std::to_string(loaded.size()) +
                             " entries, expected " + std::to_string(dst.size()));
  }
  for (const auto& [name, src] : loaded.entries()) {
    if (!dst.contains(name)) {
      throw DataIntegrityError("'" + path + "' holds unexpected entry '" + name + "'");
    }
    nn::Tensor& d = dst.at(name);
    if (d.shape() != src.shape()) {
      throw DataIntegrityError("entry '" + name + "' in '" + path + "' has a mismatched shape");
    }
    d.data() = src.data();
  }
}

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataIntegrityError("truncated checkpoint file '" + path + "'");
  return v;
}

}  // namespace

void save_denoiser(const std::string& path, const Denoiser& model, const NoiseSchedule& schedule) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataIntegrityError("cannot open '" + path + "' for writing");
  nn::write_checkpoint_header(out, kCheckpointVersionDenoiser);
  write_raw(out, static_cast<std::uint32_t>(schedule.T));
  write_raw(out, schedule.beta_min);
  write_raw(out, schedule.beta_max);
  nn::write_param_entries(out, model.params());
  out.flush();
  if (!out) throw DataIntegrityError("write to '" + path + "' failed");
}

NoiseSchedule load_denoiser(const std::string& path, Denoiser& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataIntegrityError("cannot open '" + path + "'");
  const auto version = nn::read_checkpoint_header(in, path);
  if (version != kCheckpointVersionDenoiser) {
    throw DataIntegrityError("'" + path + "' has version " + std::to_string(version) +
                             ", expected " + std::to_string(kCheckpointVersionDenoiser));
  }
  const auto T = read_raw<std::uint32_t>(in, path);
  const auto beta_min = read_raw<double>(in, path);
  const auto beta_max = read_raw<double>(in, path);
  if (T == 0 || T > (1u << 24)) {
    throw DataIntegrityError("'" + path + "' stores an implausible schedule length");
  }
  NoiseSchedule schedule = make_schedule(static_cast<int>(T), beta_min, beta_max);
  copy_entries_into(nn::read_param_entries(in, path), model.params(), path);
  return schedule;
}

}  // namespace metadm::diff
