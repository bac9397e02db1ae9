#pragma once

#include "cm/quantile.hpp"
#include "cm/types.hpp"

#include <numbers>
#include <span>

namespace cm {

/// ISO 13855 worst-case human speed, m/s.
inline constexpr double kIsoMaxSpeed = 1.6;

/// Largest eigenvalue of a symmetric 3x3 matrix.
///
/// Trigonometric closed form of the characteristic cubic. acos loses half the
/// digits when the top two eigenvalues nearly coincide, and the cubic is too
/// flat there for Newton to recover them. So when the largest eigenvalue is
/// the isolated one it gets up to two guarded Newton steps; otherwise the
/// isolated smallest eigenvector is deflated and the remaining 2x2 block is
/// solved with the cancellation-free formula.
inline double lambda_max(const Mat3& a) {
  if (!a.allFinite() || !is_symmetric(a)) throw Error(ErrorKind::NotSymmetric, "matrix is not symmetric");
  const Mat3 m = 0.5 * (a + a.transpose());
  const double off = m(0, 1) * m(0, 1) + m(0, 2) * m(0, 2) + m(1, 2) * m(1, 2);
  if (off == 0.0) return m.diagonal().maxCoeff();

  const double q = m.trace() / 3.0;
  const double p2 = (m(0, 0) - q) * (m(0, 0) - q) + (m(1, 1) - q) * (m(1, 1) - q) + (m(2, 2) - q) * (m(2, 2) - q) +
                    2.0 * off;
  const double p = std::sqrt(p2 / 6.0);
  const Mat3 b = (m - q * Mat3::Identity()) / p;
  const double r = std::clamp(b.determinant() / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double l1 = q + 2.0 * p * std::cos(phi);
  const double l3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  const double l2 = 3.0 * q - l1 - l3;

  if (l1 - l2 >= l2 - l3) {
    // det(m - x I) = -x^3 + c2 x^2 - c1 x + c0
    const double c2 = m.trace();
    const double c1 = m(0, 0) * m(1, 1) + m(0, 0) * m(2, 2) + m(1, 1) * m(2, 2) - off;
    const double c0 = m.determinant();
    auto f = [&](double x) { return ((-x + c2) * x - c1) * x + c0; };
    auto df = [&](double x) { return (-3.0 * x + 2.0 * c2) * x - c1; };
    double lambda = l1;
    for (int it = 0; it < 2; ++it) {
      const double slope = df(lambda);
      if (slope == 0.0) break;
      const double next = lambda - f(lambda) / slope;
      if (!(std::abs(f(next)) < std::abs(f(lambda)))) break;
      lambda = next;
    }
    return lambda;
  }

  // Eigenvector of l3: the largest cross product of two rows of (m - l3 I).
  const Mat3 s = m - l3 * Mat3::Identity();
  const Vec3 c01 = s.row(0).cross(s.row(1)), c02 = s.row(0).cross(s.row(2)), c12 = s.row(1).cross(s.row(2));
  Vec3 v = c01;
  if (c02.squaredNorm() > v.squaredNorm()) v = c02;
  if (c12.squaredNorm() > v.squaredNorm()) v = c12;
  if (!(v.squaredNorm() > 0.0)) return l1;
  v.normalize();
  const Vec3 u1 = v.unitOrthogonal();
  const Vec3 u2 = v.cross(u1);
  const double b00 = u1.dot(m * u1), b11 = u2.dot(m * u2), b01 = u1.dot(m * u2);
  return 0.5 * (b00 + b11) + std::hypot(0.5 * (b00 - b11), b01);
}

/// ||d|| / sqrt(lambda_max(C)).
inline double nonconformity(const Vec3& residual, const Mat3& cov) {
  if (!is_positive_definite(cov)) throw Error(ErrorKind::NotPositiveDefinite, "covariance is not positive definite");
  return residual.norm() / std::sqrt(lambda_max(cov));
}

/// Per-(horizon, joint) quantiles alpha[k][j] at miscoverage epsilon.
struct ConformalCalibration {
  std::vector<std::vector<double>> alpha;
  double epsilon = 0.01;
  std::size_t n_cal = 0;

  std::size_t horizon() const { return alpha.size(); }
  std::size_t joint_count() const { return alpha.empty() ? 0 : alpha.front().size(); }
};

/// Scores indexed [horizon][joint][sample].
using ScoreTable = std::vector<std::vector<std::vector<double>>>;

/// Each cell gets its own finite-sample split-conformal quantile.
inline ConformalCalibration calibrate(const ScoreTable& scores, double epsilon) {
  if (scores.empty() || scores.front().empty()) {
    throw Error(ErrorKind::InsufficientCalibrationData, "empty score table");
  }
  ConformalCalibration cal;
  cal.epsilon = epsilon;
  cal.n_cal = std::numeric_limits<std::size_t>::max();
  const std::size_t joints = scores.front().size();
  cal.alpha.resize(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (scores[k].size() != joints) throw Error(ErrorKind::LengthMismatch, "ragged score table");
    cal.alpha[k].resize(joints);
    for (std::size_t j = 0; j < joints; ++j) {
      cal.alpha[k][j] = conformal_quantile(scores[k][j], epsilon);
      cal.n_cal = std::min(cal.n_cal, scores[k][j].size());
    }
  }
  return cal;
}

struct SphereSet {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
  std::size_t joint = 0;
  double time = 0.0;

  double volume() const { return 4.0 / 3.0 * std::numbers::pi * radius * radius * radius; }
  bool contains(const Vec3& p) const { return (p - center).norm() <= radius; }
};

inline SphereSet sphere_set(const Vec3& mean, const Mat3& cov, double alpha, std::size_t joint = 0,
                            double time = 0.0) {
  if (!(alpha >= 0.0)) throw Error(ErrorKind::InvalidParams, "alpha must be >= 0");
  if (!is_positive_definite(cov)) throw Error(ErrorKind::NotPositiveDefinite, "covariance is not positive definite");
  return SphereSet{mean, alpha * std::sqrt(lambda_max(cov)), joint, time};
}

/// Grows the radius by (t - s.time) * v_max for queries between prediction steps.
inline SphereSet extend_in_time(const SphereSet& s, double t, double v_max = kIsoMaxSpeed) {
  if (t < s.time) throw Error(ErrorKind::TimeBeforeSet, "query time precedes the set");
  SphereSet out = s;
  out.radius += (t - s.time) * v_max;
  out.time = t;
  return out;
}

/// ISO 13855 reachable set: one sphere per joint around the last observed position.
inline std::vector<SphereSet> iso_baseline_set(const Pose& last_pose, double t, double v_max = kIsoMaxSpeed) {
  if (t < last_pose.timestamp) throw Error(ErrorKind::TimeBeforeSet, "query time precedes the last pose");
  const double r = (t - last_pose.timestamp) * v_max;
  std::vector<SphereSet> out;
  out.reserve(last_pose.size());
  for (std::size_t j = 0; j < last_pose.size(); ++j) out.push_back(SphereSet{last_pose.joints[j], r, j, t});
  return out;
}

struct CoverageVolume {
  double coverage = 0.0;
  double mean_volume = 0.0;
  std::size_t count = 0;
};

inline CoverageVolume coverage_and_volume(std::span<const SphereSet> sets, std::span<const Vec3> truths) {
  if (sets.size() != truths.size()) throw Error(ErrorKind::LengthMismatch, "one truth per set is required");
  CoverageVolume out;
  out.count = sets.size();
  if (sets.empty()) return out;
  std::size_t hits = 0;
  double volume = 0.0;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    hits += sets[i].contains(truths[i]) ? 1 : 0;
    volume += sets[i].volume();
  }
  out.coverage = static_cast<double>(hits) / static_cast<double>(sets.size());
  out.mean_volume = volume / static_cast<double>(sets.size());
  return out;
}

/// Padded sphere union standing in for a full-body reachable occupancy.
struct Occupancy {
  std::vector<SphereSet> spheres;
  double padding = 0.0;
  double time = 0.0;
};

inline Occupancy occupancy_union(std::span<const SphereSet> spheres, double padding) {
  if (spheres.empty()) throw Error(ErrorKind::InvalidParams, "occupancy needs at least one sphere");
  if (!(padding >= 0.0)) throw Error(ErrorKind::InvalidParams, "padding must be >= 0");
  const double t = spheres.front().time;
  Occupancy occ;
  occ.padding = padding;
  occ.time = t;
  occ.spheres.reserve(spheres.size());
  for (const auto& s : spheres) {
    if (std::abs(s.time - t) > 1e-9) throw Error(ErrorKind::MixedTimestamps, "spheres have different times");
    SphereSet padded = s;
    padded.radius += padding;
    occ.spheres.push_back(padded);
  }
  return occ;
}

}  // namespace cm
