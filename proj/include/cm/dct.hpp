#pragma once

#include "cm/types.hpp"

#include <numbers>
#include <span>

namespace cm {

/// Orthonormal DCT-II basis, row k = frequency k: D(k, n) = s_k cos(pi (n + 1/2) k / K).
/// D is orthogonal, so the inverse transform is D^T.
inline Eigen::MatrixXd dct_matrix(std::size_t length) {
  const auto k_len = static_cast<Eigen::Index>(length);
  Eigen::MatrixXd d(k_len, k_len);
  const double kd = static_cast<double>(length);
  for (Eigen::Index k = 0; k < k_len; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / kd) : std::sqrt(2.0 / kd);
    for (Eigen::Index n = 0; n < k_len; ++n) {
      d(k, n) = scale * std::cos(std::numbers::pi * (static_cast<double>(n) + 0.5) * static_cast<double>(k) / kd);
    }
  }
  return d;
}

/// Coefficients ordered low to high frequency.
inline std::vector<double> dct_forward(std::span<const double> series) {
  if (series.empty()) throw Error(ErrorKind::InvalidParams, "DCT needs at least one sample");
  const Eigen::MatrixXd d = dct_matrix(series.size());
  const Eigen::Map<const Eigen::VectorXd> x(series.data(), static_cast<Eigen::Index>(series.size()));
  const Eigen::VectorXd c = d * x;
  return {c.data(), c.data() + c.size()};
}

inline std::vector<double> dct_inverse(std::span<const double> coeffs) {
  if (coeffs.empty()) throw Error(ErrorKind::InvalidParams, "DCT needs at least one coefficient");
  const Eigen::MatrixXd d = dct_matrix(coeffs.size());
  const Eigen::Map<const Eigen::VectorXd> c(coeffs.data(), static_cast<Eigen::Index>(coeffs.size()));
  const Eigen::VectorXd x = d.transpose() * c;
  return {x.data(), x.data() + x.size()};
}

}  // namespace cm
