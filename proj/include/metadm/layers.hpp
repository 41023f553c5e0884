#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metadm/rng.hpp"
#include "metadm/tensor.hpp"

namespace metadm::nn {

// Named ordered parameter collection. Iteration follows insertion order, which
// fixes optimizer update order and checkpoint layout. Entries with
// requires_grad=false are persistent buffers (e.g. batch-norm running stats):
// serialized but never updated by optimizers.
class Params {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  std::int64_t total_count() const;
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// He-uniform fill: U(-b, b) with b = sqrt(6 / fan_in).
void he_uniform_fill(Tensor& t, int fan_in, Rng& rng);

struct Conv2d {
  Tensor w;  // [out_ch, in_ch, k, k]
  Tensor b;  // [out_ch], undefined when bias is disabled
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int padding, bool bias, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void register_into(Params& params, const std::string& prefix);
};

struct Linear {
  Tensor w;  // [out_dim, in_dim]
  Tensor b;  // [out_dim]

  Linear() = default;
  Linear(int in_dim, int out_dim, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void register_into(Params& params, const std::string& prefix);
};

struct BatchNorm2d {
  Tensor gamma;         // ones at init
  Tensor beta;          // zeros at init
  Tensor running_mean;  // buffer, zeros at init
  Tensor running_var;   // buffer, ones at init
  float momentum = 0.1f;
  float eps = 1e-5f;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int ch);
  // Training mode normalizes with batch statistics and updates the running
  // buffers in place; eval mode reads the buffers.
  Tensor forward(const Tensor& x, bool training);
  void register_into(Params& params, const std::string& prefix);
};

}  // namespace metadm::nn
