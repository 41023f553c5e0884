#include "metadm/optim.hpp"

#include <cmath>

#include "metadm/errors.hpp"

namespace metadm::nn {

namespace {

// Checked before any update so a failed step leaves every parameter intact.
void require_all_grads(const Params& params) {
  for (const auto& [name, t] : params.entries()) {
    if (t.requires_grad() && !t.has_grad()) {
      throw NumericError("missing gradient for parameter '" + name + "'");
    }
  }
}

}  // namespace

void Sgd::step(Params& params) {
  require_all_grads(params);
  ++step_count;
  for (auto& [name, t] : params.entries()) {
    if (!t.requires_grad()) continue;
    auto& data = t.data();
    const auto& g = t.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * g[i];
    t.zero_grad();
  }
}

void Adam::step(Params& params) {
  require_all_grads(params);
  ++step_count;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step_count));
  for (auto& [name, t] : params.entries()) {
    if (!t.requires_grad()) continue;
    auto& data = t.data();
    const auto& g = t.grad();
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(data.size(), 0.0f);
    if (v.empty()) v.assign(data.size(), 0.0f);
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
    t.zero_grad();
  }
}

}  // namespace metadm::nn
