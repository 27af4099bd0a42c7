#include "bingo/augment.hpp"

#include "bingo/rng.hpp"

namespace bingo {

std::vector<double> sample_view(std::span<const double> x, const AugmentationPolicy& policy,
                                std::uint64_t instance, std::uint64_t step,
                                std::uint64_t draw_id) {
  policy.validate();
  for (double v : x) {
    if (!std::isfinite(v)) throw InvariantError("sample_view: non-finite input row");
  }
  Rng rng = keyed_rng(policy.seed, instance, step, draw_id);
  double s = rng.next_uniform(policy.scale_lo, policy.scale_hi);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = s * (x[i] + policy.noise_sigma * rng.next_normal());
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (rng.next_unit() < policy.mask_prob) out[i] = 0.0;
  }
  return out;
}

ThreeViews sample_three_views(std::span<const double> x_anchor,
                              std::span<const double> x_positive,
                              std::uint64_t anchor_instance,
                              std::uint64_t positive_instance,
                              const AugmentationPolicy& policy, std::uint64_t step) {
  ThreeViews v;
  v.anchor_t1 = sample_view(x_anchor, policy, anchor_instance, step, 1);
  v.anchor_t2 = sample_view(x_anchor, policy, anchor_instance, step, 2);
  v.positive_t3 = sample_view(x_positive, policy, positive_instance, step, 3);
  return v;
}

}  // namespace bingo
