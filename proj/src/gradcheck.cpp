#include "metadm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "metadm/errors.hpp"
#include "metadm/rng.hpp"

namespace metadm::nn {

GradCheckReport gradient_check(Params& params, const std::function<Tensor()>& loss_graph,
                               const std::function<double()>& oracle, float h, int max_coords,
                               std::uint64_t seed) {
  params.zero_grad();
  const float l1 = loss_graph().item();
  const float l2 = loss_graph().item();
  if (l1 != l2) {
    throw NumericError("loss function is not deterministic: " + std::to_string(l1) + " vs " +
                       std::to_string(l2));
  }
  Tensor loss = loss_graph();
  loss.backward();

  GradCheckReport report;
  Rng rng(seed);
  for (auto& [name, t] : params.entries()) {
    if (!t.requires_grad()) continue;
    if (!t.has_grad()) throw NumericError("missing gradient for parameter '" + name + "'");
    const std::vector<float> ga = t.grad();
    const int n = static_cast<int>(t.data().size());
    std::vector<int> coords;
    if (n <= max_coords) {
      coords.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      coords = rng.sample_without_replacement(n, max_coords);
    }
    GradCheckParam entry{name, 0.0, static_cast<int>(coords.size())};
    for (int i : coords) {
      auto& slot = t.data()[static_cast<std::size_t>(i)];
      const float orig = slot;
      slot = orig + h;
      const double lp = oracle();
      slot = orig - h;
      const double lm = oracle();
      slot = orig;
      const double gn = (lp - lm) / (2.0 * static_cast<double>(h));
      const double gaI = static_cast<double>(ga[static_cast<std::size_t>(i)]);
      const double rel =
          std::abs(gaI - gn) / std::max({std::abs(gaI), std::abs(gn), 1e-3});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    if (report.worst_param.empty() || entry.max_rel_err > report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst_param = name;
    }
    report.per_param.push_back(std::move(entry));
  }
  params.zero_grad();
  return report;
}

}  // namespace metadm::nn
