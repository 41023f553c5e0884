#include "metadm/layers.hpp"

#include <cmath>

#include "metadm/errors.hpp"

namespace metadm::nn {

Tensor& Params::add(const std::string& name, Tensor t) {
  if (!t.defined()) throw ShapeError("parameter '" + name + "' is undefined");
  if (index_.count(name) != 0) throw ConfigError("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(t));
  return entries_.back().second;
}

Tensor& Params::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

const Tensor& Params::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::int64_t Params::total_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

std::vector<Tensor> Params::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : entries_) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

void Params::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

void he_uniform_fill(Tensor& t, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  for (auto& v : t.data()) v = static_cast<float>((rng.uniform() * 2.0 - 1.0) * bound);
}

Conv2d::Conv2d(int in_ch, int out_ch, int ksize, int stride, int padding, bool bias, Rng& rng)
    : stride(stride), padding(padding) {
  w = Tensor::zeros({out_ch, in_ch, ksize, ksize}, true);
  he_uniform_fill(w, in_ch * ksize * ksize, rng);
  if (bias) b = Tensor::zeros({out_ch}, true);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, w, b, stride, padding); }

void Conv2d::register_into(Params& params, const std::string& prefix) {
  params.add(prefix + ".w", w);
  if (b.defined()) params.add(prefix + ".b", b);
}

Linear::Linear(int in_dim, int out_dim, Rng& rng) {
  w = Tensor::zeros({out_dim, in_dim}, true);
  he_uniform_fill(w, in_dim, rng);
  b = Tensor::zeros({out_dim}, true);
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, w, b); }

void Linear::register_into(Params& params, const std::string& prefix) {
  params.add(prefix + ".w", w);
  params.add(prefix + ".b", b);
}

BatchNorm2d::BatchNorm2d(int ch) {
  gamma = Tensor::full({ch}, 1.0f, true);
  beta = Tensor::zeros({ch}, true);
  running_mean = Tensor::zeros({ch});
  running_var = Tensor::full({ch}, 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  return batchnorm2d(x, gamma, beta, running_mean.data(), running_var.data(), momentum, eps,
                     training);
}

void BatchNorm2d::register_into(Params& params, const std::string& prefix) {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
  params.add(prefix + ".running_mean", running_mean);
  params.add(prefix + ".running_var", running_var);
}

}  // namespace metadm::nn
