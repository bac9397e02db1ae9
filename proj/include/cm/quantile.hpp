#pragma once

#include "cm/types.hpp"

#include <algorithm>
#include <span>

namespace cm {

/// 1-based rank ceil((n + 1)(1 - epsilon)) of the split-conformal quantile.
///
/// The product is evaluated with a relative slack of 1e-12 so that exact
/// integers such as 100 * 0.99 do not round up to the next rank.
inline std::size_t conformal_rank(std::size_t n, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw Error(ErrorKind::InvalidProbability, "epsilon must lie in (0, 1)");
  }
  const double x = static_cast<double>(n + 1) * (1.0 - epsilon);
  return static_cast<std::size_t>(std::ceil(x - 1e-12 * x));
}

/// The conformal_rank-th smallest score. Throws InsufficientCalibrationData
/// when that rank exceeds n (the quantile would be +infinity).
inline double conformal_quantile(std::span<const double> scores, double epsilon) {
  const std::size_t n = scores.size();
  const std::size_t rank = conformal_rank(n, epsilon);
  if (n == 0 || rank > n) {
    throw Error(ErrorKind::InsufficientCalibrationData,
                "rank " + std::to_string(rank) + " exceeds " + std::to_string(n) + " calibration scores");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw Error(ErrorKind::InvalidParams, "calibration score is NaN");
  }
  std::vector<double> work(scores.begin(), scores.end());
  const auto nth = work.begin() + static_cast<std::ptrdiff_t>(rank - 1);
  std::nth_element(work.begin(), nth, work.end());
  return *nth;
}

}  // namespace cm
