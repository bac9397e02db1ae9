#pragma once

#include "cm/geometry.hpp"
#include "cm/predict.hpp"
#include "cm/quantile.hpp"
#include "cm/types.hpp"

#include <functional>
#include <span>

namespace cm {

enum class OodSource { Pose2D, Motion };

inline const char* to_string(OodSource s) { return s == OodSource::Pose2D ? "pose_2d" : "motion"; }

/// Higher is more out-of-distribution.
struct OodScore {
  double value = 0.0;
  OodSource source = OodSource::Pose2D;
};

struct OodThreshold {
  double tau = std::numeric_limits<double>::infinity();
  double epsilon_ood = 0.05;
  std::size_t n_cal = 0;
};

/// Score assigned to frames without a detected human; exceeds every finite threshold.
inline constexpr double kMissingHumanScore = std::numeric_limits<double>::max();

/// tau = ceil((n + 1)(1 - epsilon_ood))-th order statistic of in-distribution scores.
inline OodThreshold calibrate_threshold(std::span<const double> scores, double epsilon_ood) {
  return OodThreshold{conformal_quantile(scores, epsilon_ood), epsilon_ood, scores.size()};
}

/// A score equal to tau is in-distribution.
inline bool is_ood(const OodScore& score, const OodThreshold& threshold) { return score.value > threshold.tau; }

inline OodScore score_mahalanobis(const Eigen::VectorXd& features, const Eigen::VectorXd& reference_mean,
                                  const Eigen::MatrixXd& reference_cov, OodSource source = OodSource::Pose2D) {
  if (features.size() != reference_mean.size() || reference_cov.rows() != features.size() ||
      reference_cov.cols() != features.size()) {
    throw Error(ErrorKind::LengthMismatch, "feature and reference dimensions differ");
  }
  if (!is_symmetric(reference_cov)) throw Error(ErrorKind::NotPositiveDefinite, "reference covariance not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(reference_cov);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::NotPositiveDefinite, "reference covariance not SPD");
  const Eigen::VectorXd y = llt.matrixL().solve(features - reference_mean);
  return OodScore{y.norm(), source};
}

/// Gaussian reference fitted to in-distribution feature vectors.
struct MahalanobisReference {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  /// Sample mean and covariance (n - 1), with a small ridge so the result stays SPD.
  static MahalanobisReference fit(std::span<const Eigen::VectorXd> samples, double ridge = 1e-9) {
    if (samples.size() < 2) throw Error(ErrorKind::InsufficientData, "need at least two reference samples");
    const auto d = samples.front().size();
    MahalanobisReference ref{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, d)};
    for (const auto& s : samples) {
      if (s.size() != d) throw Error(ErrorKind::LengthMismatch, "reference samples differ in dimension");
      ref.mean += s;
    }
    ref.mean /= static_cast<double>(samples.size());
    for (const auto& s : samples) ref.cov += (s - ref.mean) * (s - ref.mean).transpose();
    ref.cov /= static_cast<double>(samples.size() - 1);
    ref.cov.diagonal().array() += ridge;
    return ref;
  }

  OodScore score(const Eigen::VectorXd& x, OodSource source) const { return score_mahalanobis(x, mean, cov, source); }
};

/// Scores one camera (1 or 2) of a stereo observation.
using PoseScorer = std::function<OodScore(const StereoObservation&, int camera)>;
/// Scores a full pose history.
using MotionScorer = std::function<OodScore(const MotionHistory&)>;

/// Missing human -> maximal score; no features -> 0; otherwise Mahalanobis
/// distance of the camera's feature vector to the reference, when one is given.
inline PoseScorer make_pose_scorer(std::optional<MahalanobisReference> reference = std::nullopt) {
  return [reference = std::move(reference)](const StereoObservation& obs, int camera) {
    if (obs.missing_human) return OodScore{kMissingHumanScore, OodSource::Pose2D};
    const auto& f = camera == 2 ? obs.features_cam2 : obs.features_cam1;
    if (f.empty() || !reference) return OodScore{0.0, OodSource::Pose2D};
    const Eigen::Map<const Eigen::VectorXd> x(f.data(), static_cast<Eigen::Index>(f.size()));
    return reference->score(x, OodSource::Pose2D);
  };
}

/// (mean joint speed, max joint speed, mean joint acceleration) over the history.
inline Eigen::VectorXd motion_features(const MotionHistory& history) {
  Eigen::VectorXd f = Eigen::VectorXd::Zero(3);
  const std::size_t n = history.poses.size();
  if (n < 3) return f;
  const double rate = history.frame_rate;
  double speed_sum = 0.0;
  double speed_max = 0.0;
  double accel_sum = 0.0;
  std::size_t speed_terms = 0;
  std::size_t accel_terms = 0;
  for (std::size_t i = 1; i < n; ++i) {
    for (std::size_t j = 0; j < history.poses[i].size(); ++j) {
      const Vec3 v = (history.poses[i].joints[j] - history.poses[i - 1].joints[j]) * rate;
      speed_sum += v.norm();
      speed_max = std::max(speed_max, v.norm());
      ++speed_terms;
      if (i >= 2) {
        const Vec3 a =
            (history.poses[i].joints[j] - 2.0 * history.poses[i - 1].joints[j] + history.poses[i - 2].joints[j]) *
            rate * rate;
        accel_sum += a.norm();
        ++accel_terms;
      }
    }
  }
  f << speed_sum / static_cast<double>(std::max<std::size_t>(1, speed_terms)), speed_max,
      accel_sum / static_cast<double>(std::max<std::size_t>(1, accel_terms));
  return f;
}

inline MotionScorer make_motion_scorer(std::optional<MahalanobisReference> reference = std::nullopt) {
  return [reference = std::move(reference)](const MotionHistory& history) {
    if (!reference) return OodScore{0.0, OodSource::Motion};
    return reference->score(motion_features(history), OodSource::Motion);
  };
}

}  // namespace cm
