#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "metadm/layers.hpp"

namespace metadm::nn {

// Both optimizers update trainable entries in collection order and zero their
// gradients afterwards; a trainable entry without a gradient is an error
// naming the parameter. Buffers (requires_grad=false) are left alone.

struct Sgd {
  float lr;
  std::int64_t step_count = 0;

  explicit Sgd(float lr) : lr(lr) {}
  void step(Params& params);
};

struct Adam {
  float lr;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::int64_t step_count = 0;

  explicit Adam(float lr) : lr(lr) {}
  void step(Params& params);

 private:
  std::unordered_map<std::string, std::vector<float>> m_;
  std::unordered_map<std::string, std::vector<float>> v_;
};

}  // namespace metadm::nn
