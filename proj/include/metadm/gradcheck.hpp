#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metadm/layers.hpp"

namespace metadm::nn {

struct GradCheckParam {
  std::string name;
  double max_rel_err = 0.0;
  int checked_coords = 0;
};

struct GradCheckReport {
  std::vector<GradCheckParam> per_param;  // trainable entries only
  double max_rel_err = 0.0;
  std::string worst_param;

  bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

// Central finite differences against the analytic gradients of loss_graph.
// loss_graph rebuilds the f32 scalar loss from the current parameter data;
// oracle evaluates the same loss in double precision and is called with
// perturbed parameter data in place. Relative error per coordinate is
// |g_a - g_n| / max(|g_a|, |g_n|, 1e-3); the 1e-3 floor absorbs f32 rounding
// of near-zero gradients. Coordinates are subsampled (deterministically from
// seed) when a tensor has more than max_coords of them. Frozen entries are
// skipped. Throws NumericError when two evaluations of loss_graph disagree
// bitwise, since a non-deterministic loss invalidates the comparison.
GradCheckReport gradient_check(Params& params, const std::function<Tensor()>& loss_graph,
                               const std::function<double()>& oracle, float h = 1e-3f,
                               int max_coords = 64, std::uint64_t seed = 0x5eedc0de5eedc0deull);

}  // namespace metadm::nn
