#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace cm {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

enum class ErrorKind {
  DegenerateGeometry,
  NonFiniteJacobian,
  InsufficientData,
  NotPositiveDefinite,
  NotSymmetric,
  SingularCovariance,
  HistoryIncomplete,
  ModelNotFitted,
  InsufficientCalibrationData,
  TimeBeforeSet,
  LengthMismatch,
  MixedTimestamps,
  InvalidProbability,
  InvalidParams,
  NotCalibrated,
  NotFitted,
  ParseError,
  SchemaError,
  NonUniformFrameRate,
  ModelMismatch,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorKind::NonFiniteJacobian: return "NonFiniteJacobian";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::NotSymmetric: return "NotSymmetric";
    case ErrorKind::SingularCovariance: return "SingularCovariance";
    case ErrorKind::HistoryIncomplete: return "HistoryIncomplete";
    case ErrorKind::ModelNotFitted: return "ModelNotFitted";
    case ErrorKind::InsufficientCalibrationData: return "InsufficientCalibrationData";
    case ErrorKind::TimeBeforeSet: return "TimeBeforeSet";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::MixedTimestamps: return "MixedTimestamps";
    case ErrorKind::InvalidProbability: return "InvalidProbability";
    case ErrorKind::InvalidParams: return "InvalidParams";
    case ErrorKind::NotCalibrated: return "NotCalibrated";
    case ErrorKind::NotFitted: return "NotFitted";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::SchemaError: return "SchemaError";
    case ErrorKind::NonUniformFrameRate: return "NonUniformFrameRate";
    case ErrorKind::ModelMismatch: return "ModelMismatch";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying its kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Joint positions in meters at one timestep.
struct Pose {
  std::vector<Vec3> joints;
  double timestamp = 0.0;

  std::size_t size() const { return joints.size(); }

  bool is_finite() const {
    for (const auto& p : joints) {
      if (!p.allFinite()) return false;
    }
    return std::isfinite(timestamp);
  }

  /// All-NaN placeholder used for invalid motion-buffer slots.
  static Pose sentinel(std::size_t joint_count, double timestamp) {
    return Pose{std::vector<Vec3>(joint_count, Vec3::Constant(kNaN)), timestamp};
  }
};

/// One 3x3 covariance (meters^2) per joint.
struct PoseCovariances {
  std::vector<Mat3> covs;

  std::size_t size() const { return covs.size(); }

  static PoseCovariances zeros(std::size_t joint_count) {
    return PoseCovariances{std::vector<Mat3>(joint_count, Mat3::Zero())};
  }
  static PoseCovariances isotropic(std::size_t joint_count, double variance) {
    return PoseCovariances{std::vector<Mat3>(joint_count, variance * Mat3::Identity())};
  }
  static PoseCovariances sentinel(std::size_t joint_count) {
    return PoseCovariances{std::vector<Mat3>(joint_count, Mat3::Constant(kNaN))};
  }
};

inline double max_abs_entry(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  return m.cwiseAbs().maxCoeff();
}

/// Symmetric up to an absolute tolerance scaled by max(1, largest entry).
inline bool is_symmetric(const Eigen::Ref<const Eigen::MatrixXd>& m, double tol = 1e-9) {
  if (m.rows() != m.cols()) return false;
  const double scale = std::max(1.0, max_abs_entry(m));
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

inline bool is_positive_definite(const Mat3& m) {
  if (!m.allFinite() || !is_symmetric(m)) return false;
  Eigen::LLT<Mat3> llt(m);
  return llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0;
}

}  // namespace cm
