#pragma once

#include <vector>

#include "wfs/field.hpp"

namespace wfs {

struct SsimConfig {
  double c_l = 4e-4;
  double c_c = 3.6e-3;

  /// (0.01 L)^2 and (0.03 L)^2 for data of dynamic range L.
  static SsimConfig for_range(double range) {
    return {0.0001 * range * range, 0.0009 * range * range};
  }
};

/// Structural similarity from whole-image statistics, averaged over channels.
/// Standard deviations and covariance use the population (1/n) convention.
template <typename Scalar>
double ssim(const BasicField<Scalar>& a, const BasicField<Scalar>& b, const SsimConfig& cfg) {
  if (!a.same_shape(b)) throw Error(Errc::invalid_argument, "ssim: dimension mismatch");
  if (!(cfg.c_l > 0.0) || !(cfg.c_c > 0.0))
    throw Error(Errc::invalid_argument, "ssim: constants must be > 0");
  const Index n = a.plane_size();
  double total = 0.0;
  for (Index c = 0; c < a.channels(); ++c) {
    const auto x = a.data().segment(c * n, n).template cast<double>().array();
    const auto y = b.data().segment(c * n, n).template cast<double>().array();
    // Identical planes score exactly 1 regardless of rounding in the formula.
    if ((x == y).all()) {
      total += 1.0;
      continue;
    }
    const double mx = x.mean();
    const double my = y.mean();
    const double vx = (x - mx).square().mean();
    const double vy = (y - my).square().mean();
    const double cxy = ((x - mx) * (y - my)).mean();
    total += (2.0 * mx * my + cfg.c_l) * (2.0 * cxy + cfg.c_c) /
             ((mx * mx + my * my + cfg.c_l) * (vx + vy + cfg.c_c));
  }
  return total / double(a.channels());
}

double mean_ssim(const std::vector<Field>& pred, const std::vector<Field>& truth,
                 const SsimConfig& cfg);

}  // namespace wfs
