#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bingo/errors.hpp"

namespace bingo {

// Stochastic view generator over feature rows: x' = s*(x + eps) with
// coordinates independently zeroed, eps ~ N(0, noise_sigma^2 I),
// s ~ Uniform(scale_lo, scale_hi). Draws are counter-keyed by
// (seed, instance, step, draw_id), so the full view stream is reproducible
// regardless of call order.
struct AugmentationPolicy {
  double noise_sigma = 0.1;
  double mask_prob = 0.0;
  double scale_lo = 1.0;
  double scale_hi = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (noise_sigma < 0.0) throw InvariantError("AugmentationPolicy: noise_sigma < 0");
    if (mask_prob < 0.0 || mask_prob > 1.0)
      throw InvariantError("AugmentationPolicy: mask_prob outside [0, 1]");
    if (!(scale_lo > 0.0) || scale_lo > scale_hi)
      throw InvariantError("AugmentationPolicy: need 0 < scale_lo <= scale_hi");
  }

  static AugmentationPolicy identity() { return {0.0, 0.0, 1.0, 1.0, 0}; }
};

std::vector<double> sample_view(std::span<const double> x, const AugmentationPolicy& policy,
                                std::uint64_t instance, std::uint64_t step,
                                std::uint64_t draw_id);

struct ThreeViews {
  std::vector<double> anchor_t1;    // student query view of the anchor
  std::vector<double> anchor_t2;    // teacher key view of the anchor
  std::vector<double> positive_t3;  // student view of the positive
};

ThreeViews sample_three_views(std::span<const double> x_anchor,
                              std::span<const double> x_positive,
                              std::uint64_t anchor_instance,
                              std::uint64_t positive_instance,
                              const AugmentationPolicy& policy, std::uint64_t step);

}  // namespace bingo
