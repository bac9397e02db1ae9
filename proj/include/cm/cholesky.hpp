#pragma once

#include "cm/types.hpp"

#include <array>

namespace cm {

/// Unconstrained parameters of one 3x3 covariance C = L L^T.
///
/// values = (log L00, log L11, log L22, L10, L20, L21). Every finite value
/// yields a positive-definite matrix because the diagonal of L is exp(.) > 0.
struct CholeskyFactor {
  std::array<double, 6> values{};

  Mat3 lower() const {
    Mat3 l = Mat3::Zero();
    l(0, 0) = std::exp(values[0]);
    l(1, 1) = std::exp(values[1]);
    l(2, 2) = std::exp(values[2]);
    l(1, 0) = values[3];
    l(2, 0) = values[4];
    l(2, 1) = values[5];
    return l;
  }
};

/// Indexed [timestep][joint].
using CholeskyParams = std::vector<std::vector<CholeskyFactor>>;

inline Mat3 cholesky_to_cov(const CholeskyFactor& p) {
  const Mat3 l = p.lower();
  return l * l.transpose();
}

inline CholeskyFactor cov_to_cholesky(const Mat3& c) {
  if (!c.allFinite() || !is_symmetric(c)) {
    throw Error(ErrorKind::NotPositiveDefinite, "covariance is not a finite symmetric matrix");
  }
  Eigen::LLT<Mat3> llt(c);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::NotPositiveDefinite, "Cholesky factorization failed");
  const Mat3 l = llt.matrixL();
  if (!(l.diagonal().minCoeff() > 0.0)) throw Error(ErrorKind::NotPositiveDefinite, "zero pivot in Cholesky factor");
  CholeskyFactor p;
  p.values = {std::log(l(0, 0)), std::log(l(1, 1)), std::log(l(2, 2)), l(1, 0), l(2, 0), l(2, 1)};
  return p;
}

inline PoseCovariances cholesky_to_cov(const std::vector<CholeskyFactor>& params) {
  PoseCovariances out;
  out.covs.reserve(params.size());
  for (const auto& p : params) out.covs.push_back(cholesky_to_cov(p));
  return out;
}

inline std::vector<CholeskyFactor> cov_to_cholesky(const PoseCovariances& covs) {
  std::vector<CholeskyFactor> out;
  out.reserve(covs.size());
  for (const auto& c : covs.covs) out.push_back(cov_to_cholesky(c));
  return out;
}

}  // namespace cm
