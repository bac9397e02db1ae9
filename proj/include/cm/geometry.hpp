#pragma once

#include "cm/types.hpp"

#include <Eigen/SVD>

#include <array>
#include <optional>
#include <span>
#include <utility>

namespace cm {

/// Pinhole projection P = K[R|t]; maps homogeneous world points (m) to homogeneous pixels.
struct CameraModel {
  Mat34 projection = Mat34::Zero();
  int id = 1;

  /// Throws InvalidParams unless the left 3x3 block is invertible.
  void validate() const {
    if (!projection.allFinite()) throw Error(ErrorKind::InvalidParams, "camera projection has non-finite entries");
    const Mat3 m = projection.leftCols<3>();
    Eigen::JacobiSVD<Mat3> svd(m);
    const auto& s = svd.singularValues();
    if (!(s(2) > 1e-12 * s(0))) {
      throw Error(ErrorKind::InvalidParams, "camera projection left 3x3 block is rank deficient");
    }
  }

  Vec3 center() const {
    const Mat3 m = projection.leftCols<3>();
    return -m.partialPivLu().solve(projection.col(3));
  }

  Vec2 project(const Vec3& point) const {
    const Vec3 h = projection * point.homogeneous();
    return h.hnormalized();
  }
};

/// Builds K[R|t] from focal length, principal point, world-to-camera rotation and camera center.
inline CameraModel make_pinhole_camera(int id, double focal_px, double cx, double cy, const Mat3& rotation,
                                       const Vec3& center) {
  Mat3 k;
  k << focal_px, 0.0, cx, 0.0, focal_px, cy, 0.0, 0.0, 1.0;
  Mat34 rt;
  rt.leftCols<3>() = rotation;
  rt.col(3) = -rotation * center;
  return CameraModel{k * rt, id};
}

struct Detection2D {
  Vec2 mean = Vec2::Zero();  // pixels
  Mat2 cov = Mat2::Zero();   // pixels^2
  int joint_index = 1;       // 1-based
};

struct StereoObservation {
  std::vector<Detection2D> detections_cam1;
  std::vector<Detection2D> detections_cam2;
  /// Per-joint cross-covariance between camera-1 and camera-2 residuals (pixels^2).
  std::optional<std::vector<Mat2>> cross_cov;
  double timestamp = 0.0;
  /// No human detected in the frame; always scored as OOD.
  bool missing_human = false;
  /// Optional per-camera feature vectors consumed by 2D OOD scorers.
  std::vector<double> features_cam1;
  std::vector<double> features_cam2;

  std::size_t joint_count() const { return detections_cam1.size(); }
};

namespace detail {

inline Eigen::Matrix4d dlt_matrix(const Vec2& x1, const Vec2& x2, const CameraModel& cam1,
                                  const CameraModel& cam2) {
  Eigen::Matrix4d a;
  a.row(0) = x1.x() * cam1.projection.row(2) - cam1.projection.row(0);
  a.row(1) = x1.y() * cam1.projection.row(2) - cam1.projection.row(1);
  a.row(2) = x2.x() * cam2.projection.row(2) - cam2.projection.row(0);
  a.row(3) = x2.y() * cam2.projection.row(2) - cam2.projection.row(1);
  for (int r = 0; r < 4; ++r) {
    const double n = a.row(r).norm();
    if (n > 0.0) a.row(r) /= n;
  }
  return a;
}

}  // namespace detail

/// Linear (DLT) triangulation of one correspondence.
///
/// The homogeneous point is the right singular vector of the smallest singular
/// value of the row-normalized 4x4 constraint matrix. When the two smallest
/// singular values coincide to within 1e-9 of the largest, the null space is
/// not one-dimensional (the rays are parallel or collinear) and the point is
/// not recoverable.
inline Vec3 triangulate_point(const Vec2& x1, const Vec2& x2, const CameraModel& cam1, const CameraModel& cam2) {
  if (!x1.allFinite() || !x2.allFinite()) {
    throw Error(ErrorKind::DegenerateGeometry, "non-finite pixel coordinates");
  }
  const Eigen::Matrix4d a = detail::dlt_matrix(x1, x2, cam1, cam2);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  const Vec4 s = svd.singularValues();
  if (s(2) - s(3) <= 1e-9 * s(0)) {
    throw Error(ErrorKind::DegenerateGeometry, "smallest singular values coincide (near-parallel rays)");
  }
  const Vec4 h = svd.matrixV().col(3);
  if (std::abs(h(3)) <= 1e-12 * h.head<3>().norm()) {
    throw Error(ErrorKind::DegenerateGeometry, "triangulated point at infinity");
  }
  return h.head<3>() / h(3);
}

inline void check_stereo_inputs(const StereoObservation& obs, const CameraModel& cam1, const CameraModel& cam2) {
  if (obs.detections_cam1.size() != obs.detections_cam2.size()) {
    throw Error(ErrorKind::LengthMismatch, "camera detection lists differ in length");
  }
  if (obs.cross_cov && obs.cross_cov->size() != obs.joint_count()) {
    throw Error(ErrorKind::LengthMismatch, "cross_cov must have one entry per joint");
  }
  if ((cam1.center() - cam2.center()).norm() <= 1e-12) {
    throw Error(ErrorKind::DegenerateGeometry, "camera centers coincide");
  }
}

/// Triangulates every joint; throws DegenerateGeometry if any joint fails.
inline Pose triangulate(const StereoObservation& obs, const CameraModel& cam1, const CameraModel& cam2) {
  check_stereo_inputs(obs, cam1, cam2);
  Pose pose;
  pose.timestamp = obs.timestamp;
  pose.joints.reserve(obs.joint_count());
  for (std::size_t j = 0; j < obs.joint_count(); ++j) {
    pose.joints.push_back(
        triangulate_point(obs.detections_cam1[j].mean, obs.detections_cam2[j].mean, cam1, cam2));
  }
  return pose;
}

/// 3x4 Jacobian of the triangulated point with respect to (u1, v1, u2, v2),
/// by central differences.
inline Eigen::Matrix<double, 3, 4> triangulation_jacobian(const Vec2& x1, const Vec2& x2, const CameraModel& cam1,
                                                          const CameraModel& cam2, double step_px = 1e-4) {
  Eigen::Matrix<double, 3, 4> jac;
  const Vec4 base(x1.x(), x1.y(), x2.x(), x2.y());
  for (int i = 0; i < 4; ++i) {
    Vec4 plus = base;
    Vec4 minus = base;
    plus(i) += step_px;
    minus(i) -= step_px;
    Vec3 fp;
    Vec3 fm;
    try {
      fp = triangulate_point(plus.head<2>(), plus.tail<2>(), cam1, cam2);
      fm = triangulate_point(minus.head<2>(), minus.tail<2>(), cam1, cam2);
    } catch (const Error& e) {
      throw Error(ErrorKind::NonFiniteJacobian, e.what());
    }
    jac.col(i) = (fp - fm) / (2.0 * step_px);
  }
  if (!jac.allFinite()) throw Error(ErrorKind::NonFiniteJacobian, "finite-difference Jacobian is not finite");
  return jac;
}

/// Stacked 4x4 covariance of (u1, v1, u2, v2).
inline Mat4 stacked_pixel_covariance(const Mat2& c1, const Mat2& c2, const Mat2& cross) {
  Mat4 c = Mat4::Zero();
  c.topLeftCorner<2, 2>() = c1;
  c.bottomRightCorner<2, 2>() = c2;
  c.topRightCorner<2, 2>() = cross;
  c.bottomLeftCorner<2, 2>() = cross.transpose();
  return c;
}

/// First-order propagation for one joint: Jac * C4 * Jac^T + sigma_iso^2 * I.
inline Mat3 propagate_joint_covariance(const Detection2D& d1, const Detection2D& d2, const Mat2& cross,
                                       const CameraModel& cam1, const CameraModel& cam2, double sigma_iso) {
  const auto jac = triangulation_jacobian(d1.mean, d2.mean, cam1, cam2);
  const Mat4 c4 = stacked_pixel_covariance(d1.cov, d2.cov, cross);
  Mat3 c = jac * c4 * jac.transpose();
  c = 0.5 * (c + c.transpose());
  c.diagonal().array() += sigma_iso * sigma_iso;
  return c;
}

inline PoseCovariances propagate_covariance(const StereoObservation& obs, const CameraModel& cam1,
                                            const CameraModel& cam2, const Pose& point, double sigma_iso) {
  check_stereo_inputs(obs, cam1, cam2);
  if (point.size() != obs.joint_count()) {
    throw Error(ErrorKind::LengthMismatch, "pose and observation joint counts differ");
  }
  PoseCovariances out;
  out.covs.reserve(obs.joint_count());
  for (std::size_t j = 0; j < obs.joint_count(); ++j) {
    const Mat2 cross = obs.cross_cov ? (*obs.cross_cov)[j] : Mat2::Zero();
    out.covs.push_back(propagate_joint_covariance(obs.detections_cam1[j], obs.detections_cam2[j], cross, cam1,
                                                  cam2, sigma_iso));
  }
  return out;
}

/// Paired reprojection residuals (camera 1, camera 2) for one calibration sample.
using ResidualPair = std::pair<Vec2, Vec2>;

/// Mean-removed sample cross-covariance E[(r1 - m1)(r2 - m2)^T], normalized by n - 1.
inline Mat2 estimate_cross_covariance(std::span<const ResidualPair> residual_pairs) {
  constexpr std::size_t kMinPairs = 30;
  const std::size_t n = residual_pairs.size();
  if (n < kMinPairs) {
    throw Error(ErrorKind::InsufficientData,
                "need at least 30 residual pairs, got " + std::to_string(n));
  }
  Vec2 m1 = Vec2::Zero();
  Vec2 m2 = Vec2::Zero();
  for (const auto& [r1, r2] : residual_pairs) {
    m1 += r1;
    m2 += r2;
  }
  m1 /= static_cast<double>(n);
  m2 /= static_cast<double>(n);
  Mat2 c = Mat2::Zero();
  for (const auto& [r1, r2] : residual_pairs) c += (r1 - m1) * (r2 - m2).transpose();
  return c / static_cast<double>(n - 1);
}

}  // namespace cm
