#pragma once

#include "cm/conformal.hpp"
#include "cm/geometry.hpp"
#include "cm/ood.hpp"
#include "cm/predict.hpp"
#include "cm/types.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <random>

namespace cm {

struct PipelineConfig {
  std::size_t K_I = 50;
  std::size_t K_P = 10;
  std::size_t N_req = 3;
  double f_cam = 25.0;
  double epsilon = 0.01;
  double epsilon_ood = 0.05;
  double v_max = kIsoMaxSpeed;
  double sigma_iso = 0.01;
  /// Isotropic std (m) given to joints whose triangulation is degenerate.
  double sigma_fallback = 0.25;
  /// Body-thickness padding added to every published sphere (m).
  double padding = 0.1;
  /// Score both cameras and take the max instead of camera 1 only.
  bool score_both_cameras = false;

  void validate() const {
    if (K_I < 1 || K_P < 1) throw Error(ErrorKind::InvalidParams, "K_I and K_P must be >= 1");
    if (N_req < 1 || N_req > K_I) throw Error(ErrorKind::InvalidParams, "N_req must lie in [1, K_I]");
    if (!(f_cam > 0.0)) throw Error(ErrorKind::InvalidParams, "f_cam must be > 0");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw Error(ErrorKind::InvalidProbability, "epsilon must lie in (0, 1)");
    if (!(epsilon_ood > 0.0 && epsilon_ood < 1.0)) {
      throw Error(ErrorKind::InvalidProbability, "epsilon_ood must lie in (0, 1)");
    }
    if (!(v_max >= 0.0) || !(sigma_iso >= 0.0) || !(sigma_fallback > 0.0) || !(padding >= 0.0)) {
      throw Error(ErrorKind::InvalidParams, "v_max, sigma_iso and padding must be >= 0, sigma_fallback > 0");
    }
  }
};

/// Everything the state machine consumes besides observations. Shareable and immutable.
struct PipelineModels {
  CameraModel cam1;
  CameraModel cam2;
  std::shared_ptr<const MotionPredictor> predictor;
  PoseScorer pose_scorer = make_pose_scorer();
  MotionScorer motion_scorer = make_motion_scorer();
  OodThreshold tau_2d;
  OodThreshold tau_mot;
};

inline constexpr std::size_t kNoHorizon = std::numeric_limits<std::size_t>::max();

struct PipelineState {
  /// Pose buffer H (at most K_I entries) with its validity flags v.
  MotionHistory history;
  std::vector<bool> validity;
  /// Number of all-NaN poses currently in H.
  std::size_t sentinels_in_history = 0;
  /// Motion buffer M; motion_horizon[i] is the horizon index slot i was predicted at.
  MotionPrediction motion;
  std::vector<std::size_t> motion_horizon;
  std::uint64_t step_count = 0;

  static PipelineState initial(const PipelineConfig& cfg, std::size_t joint_count) {
    cfg.validate();
    PipelineState s;
    s.history.frame_rate = cfg.f_cam;
    s.history.poses.reserve(cfg.K_I + 1);
    s.history.covs.reserve(cfg.K_I + 1);
    s.motion = MotionPrediction::invalid(cfg.K_P, joint_count);
    s.motion_horizon.assign(cfg.K_P, kNoHorizon);
    return s;
  }
};

enum class StepStatus { WarmingUp, Nominal, PoseOod, MotionOod, AwaitingRecovery };

inline const char* to_string(StepStatus s) {
  switch (s) {
    case StepStatus::WarmingUp: return "warming_up";
    case StepStatus::Nominal: return "nominal";
    case StepStatus::PoseOod: return "pose_ood";
    case StepStatus::MotionOod: return "motion_ood";
    case StepStatus::AwaitingRecovery: return "awaiting_recovery";
  }
  return "unknown";
}

/// One published occupancy per motion-buffer slot.
struct PublishedOccupancy {
  Occupancy occupancy;
  bool valid = false;
};

struct StepDiagnostics {
  double score_2d = 0.0;
  std::optional<double> score_mot;
  bool pose_in_distribution = false;
  /// Last N_req validity flags were all 1 (only meaningful once |H| = K_I).
  bool buffer_valid = false;
  bool accepted = false;
  bool cold_start_discard = false;
  bool sentinel_appended = false;
  std::vector<std::size_t> fallback_joints;
  std::size_t history_size = 0;
  std::size_t valid_slots = 0;
};

struct StepOutput {
  /// Empty before warm-up completes, otherwise K_P entries.
  std::vector<PublishedOccupancy> occupancies;
  StepStatus status = StepStatus::WarmingUp;
  StepDiagnostics diagnostics;
};

namespace detail {

inline void push_history(PipelineState& s, const PipelineConfig& cfg, Pose pose, PoseCovariances covs, bool valid,
                         bool sentinel) {
  s.history.poses.push_back(std::move(pose));
  s.history.covs.push_back(std::move(covs));
  s.validity.push_back(valid);
  if (sentinel) ++s.sentinels_in_history;
  if (s.history.poses.size() > cfg.K_I) {
    if (!s.history.poses.front().is_finite()) --s.sentinels_in_history;
    s.history.poses.erase(s.history.poses.begin());
    s.history.covs.erase(s.history.covs.begin());
    s.validity.erase(s.validity.begin());
  }
}

inline void shift_motion(PipelineState& s, double dt) {
  MotionPrediction& m = s.motion;
  const std::size_t joints = m.poses.front().size();
  const double last_time = m.poses.back().timestamp;
  m.poses.erase(m.poses.begin());
  m.covs.erase(m.covs.begin());
  m.valid.erase(m.valid.begin());
  s.motion_horizon.erase(s.motion_horizon.begin());
  m.poses.push_back(Pose::sentinel(joints, last_time + dt));
  m.covs.push_back(PoseCovariances::sentinel(joints));
  m.valid.push_back(false);
  s.motion_horizon.push_back(kNoHorizon);
}

inline bool last_flags_valid(const std::vector<bool>& v, std::size_t n) {
  if (v.size() < n) return false;
  for (std::size_t i = v.size() - n; i < v.size(); ++i) {
    if (!v[i]) return false;
  }
  return true;
}

inline bool prediction_finite(const MotionPrediction& p) {
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!p.poses[k].is_finite()) return false;
    for (const auto& c : p.covs[k].covs) {
      if (!c.allFinite()) return false;
    }
  }
  return true;
}

inline std::vector<PublishedOccupancy> conformal_occupancies(const PipelineState& s, const PipelineConfig& cfg,
                                                             const ConformalCalibration& calib) {
  std::vector<PublishedOccupancy> out;
  out.reserve(s.motion.size());
  std::vector<SphereSet> spheres;
  for (std::size_t i = 0; i < s.motion.size(); ++i) {
    const Pose& pose = s.motion.poses[i];
    PublishedOccupancy pub;
    pub.valid = s.motion.valid[i];
    spheres.clear();
    for (std::size_t j = 0; j < pose.size(); ++j) {
      if (pub.valid) {
        const double alpha = calib.alpha[s.motion_horizon[i]][j];
        spheres.push_back(sphere_set(pose.joints[j], s.motion.covs[i].covs[j], alpha, j, pose.timestamp));
      } else {
        spheres.push_back(SphereSet{Vec3::Constant(kNaN), kNaN, j, pose.timestamp});
      }
    }
    if (pub.valid) {
      pub.occupancy = occupancy_union(spheres, cfg.padding);
    } else {
      pub.occupancy = Occupancy{spheres, cfg.padding, pose.timestamp};
    }
    out.push_back(std::move(pub));
  }
  return out;
}

}  // namespace detail

/// One iteration of the uncertainty-aware pose pipeline.
///
/// 1. Triangulate every joint and propagate its covariance. A joint whose
///    geometry is degenerate keeps its last buffered position with an
///    isotropic sigma_fallback covariance.
/// 2. Score camera 1 (or both). In-distribution frames enter H with v = 1;
///    otherwise the first motion-buffer slot M[0] is buffered with v = 0. With
///    M[0] invalid the frame is dropped while H is still filling, and an
///    all-NaN pose is buffered afterwards.
/// 3. Return warming_up until |H| = K_I.
/// 4. Predict from H and score the motion input.
/// 5. Accept the prediction iff the motion score is within tau_mot, the last
///    N_req flags are all 1 and H holds no NaN pose.
/// 6. Otherwise shift M left and invalidate its last slot.
/// 7. Publish one padded conformal sphere union per slot of M.
inline StepOutput step(PipelineState& state, const StereoObservation& obs, const PipelineConfig& cfg,
                       const PipelineModels& models, const ConformalCalibration& calib) {
  if (!models.predictor) throw Error(ErrorKind::NotFitted, "no motion predictor supplied");
  const std::size_t joints = models.predictor->config().J;
  if (models.predictor->config().K_I != cfg.K_I || models.predictor->config().K_P != cfg.K_P) {
    throw Error(ErrorKind::NotFitted, "predictor K_I/K_P differ from the pipeline configuration");
  }
  if (calib.horizon() != cfg.K_P || calib.joint_count() != joints) {
    throw Error(ErrorKind::NotCalibrated, "conformal table must be K_P x J");
  }
  if (state.motion.size() != cfg.K_P) throw Error(ErrorKind::InvalidParams, "state was initialized for another K_P");

  ++state.step_count;
  const double dt = 1.0 / cfg.f_cam;
  StepOutput out;
  auto& diag = out.diagnostics;

  // Lines 4-5: 3D pose and covariances.
  Pose pose{std::vector<Vec3>(joints, Vec3::Zero()), obs.timestamp};
  PoseCovariances covs = PoseCovariances::zeros(joints);
  bool geometry_ok = !obs.missing_human;
  if (geometry_ok) {
    if (obs.detections_cam1.size() != joints || obs.detections_cam2.size() != joints) {
      throw Error(ErrorKind::LengthMismatch, "observation joint count differs from the predictor");
    }
    for (std::size_t j = 0; j < joints && geometry_ok; ++j) {
      const auto& d1 = obs.detections_cam1[j];
      const auto& d2 = obs.detections_cam2[j];
      try {
        pose.joints[j] = triangulate_point(d1.mean, d2.mean, models.cam1, models.cam2);
        const Mat2 cross = obs.cross_cov ? (*obs.cross_cov)[j] : Mat2::Zero();
        covs.covs[j] = propagate_joint_covariance(d1, d2, cross, models.cam1, models.cam2, cfg.sigma_iso);
      } catch (const Error&) {
        const bool have_previous = !state.history.poses.empty() && state.history.poses.back().is_finite();
        if (!have_previous) {
          geometry_ok = false;
          break;
        }
        pose.joints[j] = state.history.poses.back().joints[j];
        covs.covs[j] = cfg.sigma_fallback * cfg.sigma_fallback * Mat3::Identity();
        diag.fallback_joints.push_back(j);
      }
    }
  }

  // Lines 6-11: 2D OOD gate and pose buffer.
  OodScore s2d = models.pose_scorer(obs, 1);
  if (cfg.score_both_cameras) s2d.value = std::max(s2d.value, models.pose_scorer(obs, 2).value);
  if (!geometry_ok && !obs.missing_human) s2d.value = kMissingHumanScore;
  diag.score_2d = s2d.value;
  diag.pose_in_distribution = geometry_ok && !is_ood(s2d, models.tau_2d);

  bool skip_prediction = false;
  if (diag.pose_in_distribution) {
    detail::push_history(state, cfg, std::move(pose), std::move(covs), true, false);
  } else if (state.motion.valid.front()) {
    Pose reused = state.motion.poses.front();
    reused.timestamp = obs.timestamp;
    detail::push_history(state, cfg, std::move(reused), state.motion.covs.front(), false, false);
  } else if (state.history.poses.size() < cfg.K_I) {
    diag.cold_start_discard = true;
    diag.history_size = state.history.poses.size();
    out.status = StepStatus::PoseOod;
    return out;
  } else {
    detail::push_history(state, cfg, Pose::sentinel(joints, obs.timestamp), PoseCovariances::sentinel(joints), false,
                         true);
    diag.sentinel_appended = true;
    skip_prediction = true;
  }
  diag.history_size = state.history.poses.size();

  // Line 12.
  if (state.history.poses.size() < cfg.K_I) {
    out.status = StepStatus::WarmingUp;
    return out;
  }

  // Lines 14-20.
  diag.buffer_valid = detail::last_flags_valid(state.validity, cfg.N_req);
  bool motion_in_distribution = false;
  std::optional<MotionPrediction> candidate;
  if (!skip_prediction && state.sentinels_in_history == 0) {
    candidate = models.predictor->predict(state.history);
    const OodScore smot = models.motion_scorer(state.history);
    diag.score_mot = smot.value;
    motion_in_distribution = !is_ood(smot, models.tau_mot) && detail::prediction_finite(*candidate);
  }
  if (candidate && motion_in_distribution && diag.buffer_valid) {
    state.motion = std::move(*candidate);
    for (std::size_t i = 0; i < cfg.K_P; ++i) state.motion_horizon[i] = i;
    diag.accepted = true;
    out.status = StepStatus::Nominal;
  } else {
    detail::shift_motion(state, dt);
    if (skip_prediction) {
      out.status = StepStatus::PoseOod;
    } else if (!diag.buffer_valid || state.sentinels_in_history > 0) {
      out.status = StepStatus::AwaitingRecovery;
    } else {
      out.status = StepStatus::MotionOod;
    }
  }
  diag.valid_slots = state.motion.valid_count();

  // Lines 21-22.
  out.occupancies = detail::conformal_occupancies(state, cfg, calib);
  return out;
}

/// Owns one PipelineState; move it between threads, never share it.
class Pipeline {
 public:
  /// Called after every step with the state before and after it.
  using AuditHook = std::function<void(const PipelineState& before, const PipelineState& after, const StepOutput&)>;

  Pipeline(PipelineConfig cfg, PipelineModels models, ConformalCalibration calib)
      : cfg_(cfg), models_(std::move(models)), calib_(std::move(calib)) {
    cfg_.validate();
    if (!models_.predictor) throw Error(ErrorKind::NotFitted, "no motion predictor supplied");
    state_ = PipelineState::initial(cfg_, models_.predictor->config().J);
  }

  StepOutput step(const StereoObservation& obs) {
    if (!audit_) return cm::step(state_, obs, cfg_, models_, calib_);
    const PipelineState before = state_;
    StepOutput out = cm::step(state_, obs, cfg_, models_, calib_);
    audit_(before, state_, out);
    return out;
  }

  void set_audit_hook(AuditHook hook) { audit_ = std::move(hook); }
  const PipelineState& state() const { return state_; }
  const PipelineConfig& config() const { return cfg_; }

 private:
  PipelineConfig cfg_;
  PipelineModels models_;
  ConformalCalibration calib_;
  PipelineState state_;
  AuditHook audit_;
};

// ---------------------------------------------------------------------------
// Failure-rate model

enum class OodHandling { None, Reuse };

struct InvalidFractionEstimate {
  double value = 0.0;
  /// Batch-means standard error; 0 for the closed form.
  double std_error = 0.0;
  std::size_t steps = 0;
};

/// Long-run fraction of steps whose pose buffer fails the acceptance gate when
/// each frame is OOD independently with probability p.
///
/// None: any OOD frame among the last K_I fails the gate, 1 - (1 - p)^K_I.
/// Reuse: the gate needs only the last N_req frames; estimated by simulating
/// the run length of consecutive valid frames after a K_I-frame warm-up.
inline InvalidFractionEstimate expected_invalid_fraction(double p, std::size_t K_I, OodHandling handling,
                                                         std::size_t N_req = 3, std::size_t steps = 1'000'000,
                                                         std::uint64_t seed = 1) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::InvalidProbability, "p must lie in [0, 1]");
  if (K_I < 1) throw Error(ErrorKind::InvalidParams, "K_I must be >= 1");
  if (handling == OodHandling::None) {
    return InvalidFractionEstimate{1.0 - std::pow(1.0 - p, static_cast<double>(K_I)), 0.0, 0};
  }
  if (N_req < 1 || N_req > K_I) throw Error(ErrorKind::InvalidParams, "N_req must lie in [1, K_I]");
  constexpr std::size_t kBatches = 100;
  if (steps < kBatches) throw Error(ErrorKind::InvalidParams, "need at least 100 simulated steps");

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution ood(p);
  std::size_t run = K_I;  // warm-up fills H with valid frames
  const std::size_t batch = steps / kBatches;
  std::vector<double> batch_means;
  batch_means.reserve(kBatches);
  std::size_t invalid_total = 0;
  for (std::size_t b = 0; b < kBatches; ++b) {
    std::size_t invalid = 0;
    for (std::size_t i = 0; i < batch; ++i) {
      run = ood(rng) ? 0 : std::min(run + 1, K_I);
      invalid += run < N_req ? 1 : 0;
    }
    invalid_total += invalid;
    batch_means.push_back(static_cast<double>(invalid) / static_cast<double>(batch));
  }
  const std::size_t n = batch * kBatches;
  const double mean = static_cast<double>(invalid_total) / static_cast<double>(n);
  double var = 0.0;
  for (double m : batch_means) var += (m - mean) * (m - mean);
  var /= static_cast<double>(kBatches - 1);
  return InvalidFractionEstimate{mean, std::sqrt(var / static_cast<double>(kBatches)), n};
}

}  // namespace cm
