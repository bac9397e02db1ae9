#pragma once

#include "cm/cholesky.hpp"
#include "cm/dct.hpp"
#include "cm/types.hpp"

#include <memory>
#include <span>
#include <string>

namespace cm {

struct MotionHistory {
  std::vector<Pose> poses;
  std::vector<PoseCovariances> covs;
  double frame_rate = 25.0;

  std::size_t size() const { return poses.size(); }
};

/// The motion buffer: K_P future poses with covariances and per-slot validity.
/// Invalid slots hold all-NaN sentinels.
struct MotionPrediction {
  std::vector<Pose> poses;
  std::vector<PoseCovariances> covs;
  std::vector<bool> valid;

  std::size_t size() const { return poses.size(); }

  static MotionPrediction invalid(std::size_t horizon, std::size_t joint_count) {
    MotionPrediction m;
    m.poses.assign(horizon, Pose::sentinel(joint_count, kNaN));
    m.covs.assign(horizon, PoseCovariances::sentinel(joint_count));
    m.valid.assign(horizon, false);
    return m;
  }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (bool v : valid) n += v ? 1 : 0;
    return n;
  }
};

struct PredictorConfig {
  std::size_t K_I = 50;
  std::size_t K_P = 10;
  std::size_t J = 13;
  double lambda = 1.0;
  std::size_t dct_cutoff = 10;
  /// Covariance growth rate of the baselines, m/s.
  double sigma_v = 0.5;
  /// Ridge regularizer of RidgeDCT.
  double ridge_mu = 1e-3;

  void validate() const {
    if (K_I < 1 || K_P < 1 || J < 1) throw Error(ErrorKind::InvalidParams, "K_I, K_P and J must be >= 1");
    if (dct_cutoff < 1 || dct_cutoff > K_I) throw Error(ErrorKind::InvalidParams, "dct_cutoff must be in [1, K_I]");
    if (!(lambda >= 0.0)) throw Error(ErrorKind::InvalidParams, "lambda must be >= 0");
    if (!(sigma_v >= 0.0)) throw Error(ErrorKind::InvalidParams, "sigma_v must be >= 0");
    if (!(ridge_mu >= 0.0)) throw Error(ErrorKind::InvalidParams, "ridge_mu must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Losses

namespace detail {

inline void check_loss_inputs(const MotionPrediction& pred, std::span<const Pose> truth) {
  if (pred.size() != truth.size() || pred.covs.size() != pred.size() || pred.valid.size() != pred.size()) {
    throw Error(ErrorKind::LengthMismatch, "prediction and truth horizons differ");
  }
  if (pred.size() == 0) throw Error(ErrorKind::LengthMismatch, "empty prediction");
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (!pred.valid[k]) throw Error(ErrorKind::InvalidParams, "loss requires every prediction slot to be valid");
    if (pred.poses[k].size() != truth[k].size() || pred.covs[k].size() != truth[k].size()) {
      throw Error(ErrorKind::LengthMismatch, "joint counts differ");
    }
  }
}

}  // namespace detail

/// Mean over steps and joints of 1/2 log|C| + 1/2 d^T C^-1 d, d = truth - mean.
inline double nll_loss(const MotionPrediction& pred, std::span<const Pose> truth) {
  detail::check_loss_inputs(pred, truth);
  double total = 0.0;
  std::size_t terms = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    for (std::size_t j = 0; j < truth[k].size(); ++j) {
      const Mat3& c = pred.covs[k].covs[j];
      const double det = c.determinant();
      if (!(det > 1e-300)) throw Error(ErrorKind::SingularCovariance, "covariance determinant <= 1e-300");
      const Vec3 d = truth[k].joints[j] - pred.poses[k].joints[j];
      total += 0.5 * std::log(det) + 0.5 * d.dot(c.ldlt().solve(d));
      ++terms;
    }
  }
  return total / static_cast<double>(terms);
}

/// Mean over steps and joints of ||d||_1.
inline double pose_loss(const MotionPrediction& pred, std::span<const Pose> truth) {
  if (pred.size() != truth.size() || pred.size() == 0) {
    throw Error(ErrorKind::LengthMismatch, "prediction and truth horizons differ");
  }
  double total = 0.0;
  std::size_t terms = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (pred.poses[k].size() != truth[k].size()) throw Error(ErrorKind::LengthMismatch, "joint counts differ");
    for (std::size_t j = 0; j < truth[k].size(); ++j) {
      total += (truth[k].joints[j] - pred.poses[k].joints[j]).lpNorm<1>();
      ++terms;
    }
  }
  return total / static_cast<double>(terms);
}

inline double total_loss(const MotionPrediction& pred, std::span<const Pose> truth, double lambda) {
  return nll_loss(pred, truth) + lambda * pose_loss(pred, truth);
}

/// NLL evaluated directly on Cholesky parameters:
/// sum_i log L_ii + 1/2 ||L^-1 d||^2, averaged over steps and joints.
inline double nll_loss_cholesky(std::span<const Pose> means, const CholeskyParams& params,
                                std::span<const Pose> truth) {
  if (means.size() != truth.size() || params.size() != truth.size() || truth.empty()) {
    throw Error(ErrorKind::LengthMismatch, "horizon lengths differ");
  }
  double total = 0.0;
  std::size_t terms = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    for (std::size_t j = 0; j < truth[k].size(); ++j) {
      const CholeskyFactor& p = params[k][j];
      const Mat3 l = p.lower();
      const Vec3 d = truth[k].joints[j] - means[k].joints[j];
      const Vec3 y = l.triangularView<Eigen::Lower>().solve(d);
      total += p.values[0] + p.values[1] + p.values[2] + 0.5 * y.squaredNorm();
      ++terms;
    }
  }
  return total / static_cast<double>(terms);
}

/// Analytic gradient of nll_loss_cholesky with respect to every Cholesky parameter.
///
/// With y = L^-1 d and z = L^-T y, dNLL/dL = diag(1/L_ii) - z y^T on the lower
/// triangle; the diagonal parameters pick up the chain factor L_ii.
inline CholeskyParams nll_gradient_cholesky(std::span<const Pose> means, const CholeskyParams& params,
                                            std::span<const Pose> truth) {
  if (means.size() != truth.size() || params.size() != truth.size() || truth.empty()) {
    throw Error(ErrorKind::LengthMismatch, "horizon lengths differ");
  }
  std::size_t terms = 0;
  for (const auto& pose : truth) terms += pose.size();
  const double norm = 1.0 / static_cast<double>(terms);

  CholeskyParams grad(truth.size());
  for (std::size_t k = 0; k < truth.size(); ++k) {
    grad[k].resize(truth[k].size());
    for (std::size_t j = 0; j < truth[k].size(); ++j) {
      const Mat3 l = params[k][j].lower();
      const Vec3 d = truth[k].joints[j] - means[k].joints[j];
      const Vec3 y = l.triangularView<Eigen::Lower>().solve(d);
      const Vec3 z = l.transpose().triangularView<Eigen::Upper>().solve(y);
      const Mat3 g = -z * y.transpose();
      auto& out = grad[k][j].values;
      for (int i = 0; i < 3; ++i) out[static_cast<std::size_t>(i)] = norm * (1.0 + g(i, i) * l(i, i));
      out[3] = norm * g(1, 0);
      out[4] = norm * g(2, 0);
      out[5] = norm * g(2, 1);
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Predictors

enum class PredictorKind { LastFrame, ConstantVelocity, RidgeDCT };

inline const char* to_string(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::LastFrame: return "last_frame";
    case PredictorKind::ConstantVelocity: return "constant_velocity";
    case PredictorKind::RidgeDCT: return "ridge_dct";
  }
  return "unknown";
}

inline PredictorKind parse_predictor_kind(const std::string& name) {
  if (name == "last_frame") return PredictorKind::LastFrame;
  if (name == "constant_velocity") return PredictorKind::ConstantVelocity;
  if (name == "ridge_dct") return PredictorKind::RidgeDCT;
  throw Error(ErrorKind::InvalidParams, "unknown predictor kind '" + name + "'");
}

/// Common interface of motion predictors. Implementations are immutable after
/// construction, so predict() may be called concurrently.
class MotionPredictor {
 public:
  explicit MotionPredictor(PredictorConfig cfg) : cfg_(cfg) { cfg_.validate(); }
  virtual ~MotionPredictor() = default;

  virtual PredictorKind kind() const = 0;
  virtual MotionPrediction predict(const MotionHistory& history) const = 0;

  const PredictorConfig& config() const { return cfg_; }

 protected:
  /// Throws HistoryIncomplete unless at least K_I entries with J joints are present.
  void check_history(const MotionHistory& history) const {
    if (history.poses.size() < cfg_.K_I || history.covs.size() < cfg_.K_I) {
      throw Error(ErrorKind::HistoryIncomplete, "history has " + std::to_string(history.poses.size()) +
                                                    " entries, need " + std::to_string(cfg_.K_I));
    }
    if (!(history.frame_rate > 0.0)) throw Error(ErrorKind::InvalidParams, "frame_rate must be > 0");
    const std::size_t first = history.poses.size() - cfg_.K_I;
    for (std::size_t i = first; i < history.poses.size(); ++i) {
      if (history.poses[i].size() != cfg_.J || history.covs[i].size() != cfg_.J) {
        throw Error(ErrorKind::LengthMismatch, "history joint count differs from J");
      }
    }
  }

  /// Baseline covariance: last input covariance grown by (k dt sigma_v)^2 I.
  MotionPrediction grow_from_last(const MotionHistory& history, std::vector<Pose> poses) const {
    const double dt = 1.0 / history.frame_rate;
    const PoseCovariances& last = history.covs.back();
    MotionPrediction out;
    out.poses = std::move(poses);
    out.covs.reserve(cfg_.K_P);
    for (std::size_t k = 1; k <= cfg_.K_P; ++k) {
      const double s = static_cast<double>(k) * dt * cfg_.sigma_v;
      PoseCovariances c = last;
      for (auto& m : c.covs) m.diagonal().array() += s * s;
      out.covs.push_back(std::move(c));
    }
    out.valid.assign(cfg_.K_P, true);
    return out;
  }

 private:
  PredictorConfig cfg_;
};

class LastFramePredictor final : public MotionPredictor {
 public:
  using MotionPredictor::MotionPredictor;

  PredictorKind kind() const override { return PredictorKind::LastFrame; }

  MotionPrediction predict(const MotionHistory& history) const override {
    check_history(history);
    const Pose& last = history.poses.back();
    const double dt = 1.0 / history.frame_rate;
    std::vector<Pose> poses;
    poses.reserve(config().K_P);
    for (std::size_t k = 1; k <= config().K_P; ++k) {
      poses.push_back(Pose{last.joints, last.timestamp + static_cast<double>(k) * dt});
    }
    return grow_from_last(history, std::move(poses));
  }
};

class ConstantVelocityPredictor final : public MotionPredictor {
 public:
  using MotionPredictor::MotionPredictor;

  PredictorKind kind() const override { return PredictorKind::ConstantVelocity; }

  MotionPrediction predict(const MotionHistory& history) const override {
    check_history(history);
    const Pose& last = history.poses.back();
    const double dt = 1.0 / history.frame_rate;
    std::vector<Vec3> step(last.size(), Vec3::Zero());
    if (config().K_I >= 2) {
      const Pose& prev = history.poses[history.poses.size() - 2];
      for (std::size_t j = 0; j < last.size(); ++j) step[j] = last.joints[j] - prev.joints[j];
    }
    std::vector<Pose> poses;
    poses.reserve(config().K_P);
    for (std::size_t k = 1; k <= config().K_P; ++k) {
      Pose p{last.joints, last.timestamp + static_cast<double>(k) * dt};
      for (std::size_t j = 0; j < p.size(); ++j) p.joints[j] += static_cast<double>(k) * step[j];
      poses.push_back(std::move(p));
    }
    return grow_from_last(history, std::move(poses));
  }
};

/// One supervised example: K_I history entries and the K_P poses that followed.
struct TrainingWindow {
  MotionHistory history;
  std::vector<Pose> future;
};

/// Parameters of a fitted RidgeDCT model.
struct RidgeDctModel {
  PredictorConfig config;
  /// dct_cutoff x K_P map from input coefficients to output coefficients.
  Eigen::MatrixXd weights;
  /// Mean-square training residual per [horizon][joint].
  std::vector<std::vector<Mat3>> residual_cov;
  /// Mean training input-covariance trace per joint.
  std::vector<double> reference_trace;
};

/// Linear map between DCT coefficient windows, fit in closed form by ridge regression.
///
/// Each coordinate series (joint, axis) is expressed relative to its last
/// observed value, transformed with the orthonormal DCT, and truncated to
/// dct_cutoff low-frequency coefficients. One weight matrix is shared by all
/// joints and axes. Covariance per (horizon, joint) is the mean-square training
/// residual, scaled up when the window's input covariances are larger than
/// those seen in training.
class RidgeDctPredictor final : public MotionPredictor {
 public:
  explicit RidgeDctPredictor(RidgeDctModel model)
      : MotionPredictor(model.config),
        model_(std::move(model)),
        dct_in_(dct_matrix(config().K_I).topRows(static_cast<Eigen::Index>(config().dct_cutoff))),
        dct_out_(dct_matrix(config().K_P)) {
    const auto& c = config();
    if (model_.weights.rows() != static_cast<Eigen::Index>(c.dct_cutoff) ||
        model_.weights.cols() != static_cast<Eigen::Index>(c.K_P) || model_.residual_cov.size() != c.K_P ||
        model_.reference_trace.size() != c.J) {
      throw Error(ErrorKind::ModelMismatch, "RidgeDCT parameters do not match their configuration");
    }
    for (const auto& row : model_.residual_cov) {
      if (row.size() != c.J) throw Error(ErrorKind::ModelMismatch, "residual covariance table has wrong joint count");
    }
  }

  PredictorKind kind() const override { return PredictorKind::RidgeDCT; }
  const RidgeDctModel& model() const { return model_; }

  MotionPrediction predict(const MotionHistory& history) const override {
    check_history(history);
    const auto& c = config();
    const std::size_t first = history.poses.size() - c.K_I;
    const Pose& last = history.poses.back();
    const double dt = 1.0 / history.frame_rate;

    MotionPrediction out;
    out.poses.resize(c.K_P);
    for (std::size_t k = 0; k < c.K_P; ++k) {
      out.poses[k].joints.resize(c.J);
      out.poses[k].timestamp = last.timestamp + static_cast<double>(k + 1) * dt;
    }
    Eigen::VectorXd series(static_cast<Eigen::Index>(c.K_I));
    for (std::size_t j = 0; j < c.J; ++j) {
      for (int axis = 0; axis < 3; ++axis) {
        const double offset = last.joints[j](axis);
        for (std::size_t i = 0; i < c.K_I; ++i) {
          series(static_cast<Eigen::Index>(i)) = history.poses[first + i].joints[j](axis) - offset;
        }
        const Eigen::VectorXd future = dct_out_.transpose() * (model_.weights.transpose() * (dct_in_ * series));
        for (std::size_t k = 0; k < c.K_P; ++k) {
          out.poses[k].joints[j](axis) = future(static_cast<Eigen::Index>(k)) + offset;
        }
      }
    }

    out.covs.assign(c.K_P, PoseCovariances::zeros(c.J));
    for (std::size_t j = 0; j < c.J; ++j) {
      double input_trace = 0.0;
      for (std::size_t i = first; i < history.covs.size(); ++i) input_trace += history.covs[i].covs[j].trace();
      input_trace /= static_cast<double>(c.K_I);
      for (std::size_t k = 0; k < c.K_P; ++k) {
        const Mat3& s = model_.residual_cov[k][j];
        const double ratio = (s.trace() + input_trace) / (s.trace() + model_.reference_trace[j]);
        out.covs[k].covs[j] = std::max(1.0, ratio) * s;
      }
    }
    out.valid.assign(c.K_P, true);
    return out;
  }

 private:
  RidgeDctModel model_;
  Eigen::MatrixXd dct_in_;
  Eigen::MatrixXd dct_out_;
};

/// Closed-form ridge fit; identical inputs give bit-identical parameters.
inline RidgeDctPredictor fit_ridge_dct(std::span<const TrainingWindow> windows, const PredictorConfig& cfg) {
  cfg.validate();
  const std::size_t min_windows = 10 * cfg.dct_cutoff;
  if (windows.size() < min_windows) {
    throw Error(ErrorKind::InsufficientData, "need at least " + std::to_string(min_windows) +
                                                 " training windows, got " + std::to_string(windows.size()));
  }
  for (const auto& w : windows) {
    if (w.history.poses.size() != cfg.K_I || w.history.covs.size() != cfg.K_I || w.future.size() != cfg.K_P) {
      throw Error(ErrorKind::LengthMismatch, "training window lengths must equal K_I and K_P");
    }
    for (const auto& p : w.history.poses) {
      if (p.size() != cfg.J) throw Error(ErrorKind::LengthMismatch, "training window joint count differs from J");
    }
    for (const auto& p : w.future) {
      if (p.size() != cfg.J) throw Error(ErrorKind::LengthMismatch, "training window joint count differs from J");
    }
  }

  const auto cutoff = static_cast<Eigen::Index>(cfg.dct_cutoff);
  const auto kp = static_cast<Eigen::Index>(cfg.K_P);
  const Eigen::MatrixXd dct_in = dct_matrix(cfg.K_I).topRows(cutoff);
  const Eigen::MatrixXd dct_out = dct_matrix(cfg.K_P);

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(cutoff, cutoff);
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(cutoff, kp);
  Eigen::VectorXd series(static_cast<Eigen::Index>(cfg.K_I));
  Eigen::VectorXd target(kp);
  for (const auto& w : windows) {
    const Pose& last = w.history.poses.back();
    for (std::size_t j = 0; j < cfg.J; ++j) {
      for (int axis = 0; axis < 3; ++axis) {
        const double offset = last.joints[j](axis);
        for (std::size_t i = 0; i < cfg.K_I; ++i) {
          series(static_cast<Eigen::Index>(i)) = w.history.poses[i].joints[j](axis) - offset;
        }
        for (std::size_t k = 0; k < cfg.K_P; ++k) {
          target(static_cast<Eigen::Index>(k)) = w.future[k].joints[j](axis) - offset;
        }
        const Eigen::VectorXd x = dct_in * series;
        const Eigen::VectorXd y = dct_out * target;
        gram.noalias() += x * x.transpose();
        cross.noalias() += x * y.transpose();
      }
    }
  }
  gram.diagonal().array() += cfg.ridge_mu;

  RidgeDctModel model;
  model.config = cfg;
  model.weights = gram.ldlt().solve(cross);
  model.residual_cov.assign(cfg.K_P, std::vector<Mat3>(cfg.J, Mat3::Zero()));
  model.reference_trace.assign(cfg.J, 0.0);

  // Residual statistics of the fitted mean on the training windows.
  RidgeDctModel mean_only = model;
  for (auto& row : mean_only.residual_cov) {
    for (auto& m : row) m = Mat3::Identity();
  }
  const RidgeDctPredictor mean_predictor(mean_only);
  constexpr double kVarianceFloor = 1e-12;
  for (const auto& w : windows) {
    const MotionPrediction p = mean_predictor.predict(w.history);
    for (std::size_t k = 0; k < cfg.K_P; ++k) {
      for (std::size_t j = 0; j < cfg.J; ++j) {
        const Vec3 d = w.future[k].joints[j] - p.poses[k].joints[j];
        model.residual_cov[k][j] += d * d.transpose();
      }
    }
    for (std::size_t j = 0; j < cfg.J; ++j) {
      double tr = 0.0;
      for (const auto& c : w.history.covs) tr += c.covs[j].trace();
      model.reference_trace[j] += tr / static_cast<double>(cfg.K_I);
    }
  }
  const double n = static_cast<double>(windows.size());
  for (auto& row : model.residual_cov) {
    for (auto& m : row) {
      m /= n;
      m = 0.5 * (m + m.transpose());
      m.diagonal().array() += kVarianceFloor;
    }
  }
  for (auto& t : model.reference_trace) t /= n;
  return RidgeDctPredictor(std::move(model));
}

inline MotionPrediction predict(const MotionHistory& history, const MotionPredictor& model) {
  return model.predict(history);
}

/// Baseline predictors need no fitting; RidgeDCT must come from fit_ridge_dct or a loaded model.
inline std::unique_ptr<MotionPredictor> make_baseline_predictor(PredictorKind kind, const PredictorConfig& cfg) {
  switch (kind) {
    case PredictorKind::LastFrame: return std::make_unique<LastFramePredictor>(cfg);
    case PredictorKind::ConstantVelocity: return std::make_unique<ConstantVelocityPredictor>(cfg);
    case PredictorKind::RidgeDCT: break;
  }
  throw Error(ErrorKind::ModelNotFitted, "RidgeDCT must be fitted before use");
}

}  // namespace cm
