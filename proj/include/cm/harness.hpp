#pragma once

#include "cm/conformal.hpp"
#include "cm/geometry.hpp"
#include "cm/io.hpp"
#include "cm/ood.hpp"
#include "cm/pipeline.hpp"
#include "cm/predict.hpp"

#include <array>
#include <deque>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace cm::harness {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetSplit { Train, Cal, Test };

inline const char* to_string(DatasetSplit s) {
  switch (s) {
    case DatasetSplit::Train: return "train";
    case DatasetSplit::Cal: return "cal";
    case DatasetSplit::Test: return "test";
  }
  return "unknown";
}

struct MotionSequence {
  std::vector<Pose> truth;
  /// Noisy stream fed to predictors; equals truth for ingested data.
  std::vector<Pose> observed;
  /// Per-frame covariances of observed; empty when the source had none.
  std::vector<PoseCovariances> covs;
  /// Injected OOD events, one flag per frame.
  std::vector<bool> ood;

  std::size_t size() const { return observed.size(); }
};

struct MotionDataset {
  std::vector<MotionSequence> sequences;
  double frame_rate = 25.0;
  DatasetSplit split = DatasetSplit::Train;
};

enum class SyntheticKind { Static, Linear, Sinusoidal, Piecewise };

inline SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "static") return SyntheticKind::Static;
  if (s == "linear") return SyntheticKind::Linear;
  if (s == "sinusoidal") return SyntheticKind::Sinusoidal;
  if (s == "piecewise") return SyntheticKind::Piecewise;
  throw Error(ErrorKind::InvalidParams, "unknown synthetic kind '" + s + "'");
}

struct SyntheticParams {
  std::size_t joints = 13;
  std::size_t sequences = 4;
  std::size_t frames = 200;
  double frame_rate = 25.0;
  /// Sinusoid amplitude (m) and frequency (Hz).
  double amplitude = 0.2;
  double frequency = 0.5;
  /// Speed (m/s) of linear and piecewise motion.
  double speed = 1.0;
  std::size_t segment_frames = 25;
  /// Observation noise std (m).
  double noise_sigma = 0.0;
  double ood_probability = 0.0;
  DatasetSplit split = DatasetSplit::Train;

  void validate() const {
    if (joints < 1 || sequences < 1 || frames < 1) throw Error(ErrorKind::InvalidParams, "joints, sequences, frames must be >= 1");
    if (!(frame_rate > 0.0)) throw Error(ErrorKind::InvalidParams, "frame_rate must be > 0");
    if (!(amplitude >= 0.0) || !(frequency >= 0.0) || !(speed >= 0.0) || !(noise_sigma >= 0.0)) {
      throw Error(ErrorKind::InvalidParams, "amplitude, frequency, speed and noise_sigma must be >= 0");
    }
    if (segment_frames < 1) throw Error(ErrorKind::InvalidParams, "segment_frames must be >= 1");
    if (!(ood_probability >= 0.0 && ood_probability <= 1.0)) {
      throw Error(ErrorKind::InvalidParams, "ood_probability must lie in [0, 1]");
    }
  }
};

/// Sequential ground-truth generator for one synthetic sequence.
///
/// The body is a rigid set of joint offsets around a root 3 m in front of the
/// cameras. Sinusoidal motion moves each joint along its own axis with its
/// own phase; linear and piecewise motion translate the whole body.
class SyntheticTrajectory {
 public:
  SyntheticTrajectory(SyntheticKind kind, const SyntheticParams& params, std::mt19937_64& rng)
      : kind_(kind), params_(params) {
    std::uniform_real_distribution<double> offset(-0.3, 0.3);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> gauss(0.0, 1.0);
    base_.resize(params.joints);
    axis_.resize(params.joints);
    phase_.resize(params.joints);
    const Vec3 root(0.0, 0.0, 3.0);
    for (std::size_t j = 0; j < params.joints; ++j) {
      base_[j] = root + Vec3(offset(rng), offset(rng), offset(rng));
      axis_[j] = random_unit(rng, gauss);
      phase_[j] = phase(rng);
    }
    direction_ = random_unit(rng, gauss);
    seed_ = rng();
    segment_rng_.seed(seed_);
  }

  Pose next() {
    const double dt = 1.0 / params_.frame_rate;
    const double t = static_cast<double>(frame_) * dt;
    Pose p{base_, t};
    switch (kind_) {
      case SyntheticKind::Static: break;
      case SyntheticKind::Linear:
        for (auto& x : p.joints) x += params_.speed * t * direction_;
        break;
      case SyntheticKind::Sinusoidal:
        for (std::size_t j = 0; j < p.size(); ++j) {
          p.joints[j] += params_.amplitude *
                         std::sin(2.0 * std::numbers::pi * params_.frequency * t + phase_[j]) * axis_[j];
        }
        break;
      case SyntheticKind::Piecewise:
        if (frame_ % params_.segment_frames == 0) {
          std::normal_distribution<double> gauss(0.0, 1.0);
          direction_ = random_unit(segment_rng_, gauss);
        }
        for (auto& x : p.joints) x += displacement_;
        displacement_ += params_.speed * dt * direction_;
        break;
    }
    ++frame_;
    return p;
  }

 private:
  static Vec3 random_unit(std::mt19937_64& rng, std::normal_distribution<double>& gauss) {
    Vec3 v(gauss(rng), gauss(rng), gauss(rng));
    while (v.norm() < 1e-6) v = Vec3(gauss(rng), gauss(rng), gauss(rng));
    return v.normalized();
  }

  SyntheticKind kind_;
  SyntheticParams params_;
  std::vector<Vec3> base_;
  std::vector<Vec3> axis_;
  std::vector<double> phase_;
  Vec3 direction_ = Vec3::UnitX();
  Vec3 displacement_ = Vec3::Zero();
  std::uint64_t seed_ = 0;
  std::mt19937_64 segment_rng_;
  std::size_t frame_ = 0;
};

/// Deterministic in (kind, params, seed). Ground truth is kept next to the noisy stream.
inline MotionDataset generate_synthetic(SyntheticKind kind, const SyntheticParams& params, std::uint64_t seed) {
  params.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution ood(params.ood_probability);
  MotionDataset ds;
  ds.frame_rate = params.frame_rate;
  ds.split = params.split;
  const double var = params.noise_sigma * params.noise_sigma;
  for (std::size_t s = 0; s < params.sequences; ++s) {
    SyntheticTrajectory traj(kind, params, rng);
    MotionSequence seq;
    seq.truth.reserve(params.frames);
    for (std::size_t k = 0; k < params.frames; ++k) {
      Pose truth = traj.next();
      Pose obs = truth;
      if (params.noise_sigma > 0.0) {
        for (auto& x : obs.joints) x += params.noise_sigma * Vec3(noise(rng), noise(rng), noise(rng));
      }
      seq.truth.push_back(std::move(truth));
      seq.observed.push_back(std::move(obs));
      seq.covs.push_back(PoseCovariances::isotropic(params.joints, var));
      seq.ood.push_back(params.ood_probability > 0.0 && ood(rng));
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// JSON-lines dataset format
//
// One frame per line: {"t": f64, "joints": [[x,y,z]; J]} with optional
// "covs": [[[f64;3];3]; J] and optional "seq": int. A new sequence starts when
// "seq" changes or "t" does not increase.

inline MotionDataset ingest_jsonl_stream(std::istream& in, const std::string& name = "<stream>") {
  MotionDataset ds;
  ds.frame_rate = 0.0;
  std::string line;
  std::size_t line_no = 0;
  std::optional<long long> current_seq;
  std::optional<std::size_t> joints;
  bool seq_has_covs = false;
  auto fail = [&](ErrorKind kind, const std::string& msg) {
    throw Error(kind, name + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorKind::ParseError, e.what());
    }
    Pose pose;
    PoseCovariances covs;
    bool has_covs = false;
    std::optional<long long> seq_id;
    try {
      if (!j.is_object()) fail(ErrorKind::SchemaError, "line is not a JSON object");
      if (!j.contains("t") || !j.at("t").is_number()) fail(ErrorKind::SchemaError, "missing numeric field 't'");
      pose.timestamp = j.at("t").get<double>();
      if (!j.contains("joints") || !j.at("joints").is_array()) fail(ErrorKind::SchemaError, "missing array 'joints'");
      for (const auto& p : j.at("joints")) {
        const Vec3 v = io::vec3_from_json(p);
        if (!v.allFinite()) fail(ErrorKind::SchemaError, "non-finite joint coordinate");
        pose.joints.push_back(v);
      }
      if (pose.joints.empty()) fail(ErrorKind::SchemaError, "'joints' is empty");
      if (joints && *joints != pose.size()) fail(ErrorKind::SchemaError, "joint count differs from earlier lines");
      joints = pose.size();
      if (j.contains("covs")) {
        has_covs = true;
        const json& c = j.at("covs");
        if (!c.is_array() || c.size() != pose.size()) fail(ErrorKind::SchemaError, "'covs' must have one matrix per joint");
        for (const auto& m : c) covs.covs.push_back(io::mat_from_json(m, 3, 3, "covs"));
      }
      if (j.contains("seq")) seq_id = j.at("seq").get<long long>();
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::SchemaError && std::string(e.what()).find(name + ":") == std::string::npos) {
        fail(ErrorKind::SchemaError, e.what());
      }
      throw;
    } catch (const json::exception& e) {
      fail(ErrorKind::SchemaError, e.what());
    }

    const bool new_sequence = ds.sequences.empty() || seq_id != current_seq ||
                              !(pose.timestamp > ds.sequences.back().observed.back().timestamp);
    if (new_sequence) {
      ds.sequences.emplace_back();
      current_seq = seq_id;
      seq_has_covs = has_covs;
    } else if (has_covs != seq_has_covs) {
      fail(ErrorKind::SchemaError, "'covs' must be present on every line of a sequence or on none");
    }
    auto& seq = ds.sequences.back();
    if (!new_sequence) {
      const double dt = pose.timestamp - seq.observed.back().timestamp;
      if (seq.observed.size() >= 2) {
        const double dt0 = seq.observed[1].timestamp - seq.observed[0].timestamp;
        if (std::abs(dt - dt0) > 1e-6) fail(ErrorKind::NonUniformFrameRate, "frame spacing changes within a sequence");
      } else {
        const double rate = 1.0 / dt;
        if (ds.frame_rate == 0.0) {
          ds.frame_rate = rate;
        } else if (std::abs(1.0 / ds.frame_rate - dt) > 1e-6) {
          fail(ErrorKind::NonUniformFrameRate, "frame rate differs from earlier sequences");
        }
      }
    }
    seq.truth.push_back(pose);
    seq.observed.push_back(std::move(pose));
    if (has_covs) seq.covs.push_back(std::move(covs));
    seq.ood.push_back(false);
  }
  return ds;
}

inline MotionDataset ingest_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open '" + path + "'");
  return ingest_jsonl_stream(in, path);
}

/// Writes the observed stream, with covariances when present.
inline std::string export_jsonl(const MotionDataset& ds) {
  std::ostringstream out;
  for (std::size_t s = 0; s < ds.sequences.size(); ++s) {
    const auto& seq = ds.sequences[s];
    for (std::size_t k = 0; k < seq.size(); ++k) {
      json j{{"seq", s}, {"t", seq.observed[k].timestamp}};
      json joints = json::array();
      for (const auto& p : seq.observed[k].joints) joints.push_back(io::vec_json(p));
      j["joints"] = joints;
      if (!seq.covs.empty()) {
        json covs = json::array();
        for (const auto& c : seq.covs[k].covs) covs.push_back(io::mat_json(c));
        j["covs"] = covs;
      }
      out << j.dump() << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Windows and metrics

/// Sliding windows of K_I observed frames followed by K_P true frames.
inline std::vector<TrainingWindow> make_windows(const MotionDataset& ds, std::size_t K_I, std::size_t K_P,
                                                std::size_t stride = 1) {
  if (stride < 1) throw Error(ErrorKind::InvalidParams, "stride must be >= 1");
  std::vector<TrainingWindow> out;
  for (const auto& seq : ds.sequences) {
    if (seq.size() < K_I + K_P) continue;
    for (std::size_t start = 0; start + K_I + K_P <= seq.size(); start += stride) {
      TrainingWindow w;
      w.history.frame_rate = ds.frame_rate;
      w.history.poses.assign(seq.observed.begin() + static_cast<std::ptrdiff_t>(start),
                             seq.observed.begin() + static_cast<std::ptrdiff_t>(start + K_I));
      if (seq.covs.empty()) {
        w.history.covs.assign(K_I, PoseCovariances::zeros(seq.observed.front().size()));
      } else {
        w.history.covs.assign(seq.covs.begin() + static_cast<std::ptrdiff_t>(start),
                              seq.covs.begin() + static_cast<std::ptrdiff_t>(start + K_I));
      }
      w.future.assign(seq.truth.begin() + static_cast<std::ptrdiff_t>(start + K_I),
                      seq.truth.begin() + static_cast<std::ptrdiff_t>(start + K_I + K_P));
      out.push_back(std::move(w));
    }
  }
  return out;
}

inline constexpr std::array<double, 4> kHorizonsMs = {80.0, 160.0, 320.0, 400.0};

/// Frame offsets of the standard horizons that fit in K_P (at 25 fps: 2, 4, 8, 10).
inline std::vector<std::size_t> horizon_frames(double frame_rate, std::size_t K_P) {
  std::vector<std::size_t> out;
  for (double ms : kHorizonsMs) {
    const auto f = static_cast<std::size_t>(std::llround(ms * frame_rate / 1000.0));
    if (f >= 1 && f <= K_P) out.push_back(f);
  }
  return out;
}

/// Mean joint error (mm) at each horizon frame, over valid slots only. NaN when a
/// horizon has no valid slot. root_relative subtracts joint 0 from both poses.
inline std::vector<double> mpjpe(std::span<const MotionPrediction> preds, std::span<const std::vector<Pose>> truths,
                                 std::span<const std::size_t> horizons, bool root_relative = false) {
  if (preds.size() != truths.size()) throw Error(ErrorKind::LengthMismatch, "one truth sequence per prediction");
  std::vector<double> sum(horizons.size(), 0.0);
  std::vector<std::size_t> count(horizons.size(), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t h = 0; h < horizons.size(); ++h) {
      const std::size_t slot = horizons[h] - 1;
      if (slot >= preds[i].size() || slot >= truths[i].size()) {
        throw Error(ErrorKind::LengthMismatch, "horizon exceeds the prediction length");
      }
      if (!preds[i].valid[slot]) continue;
      const Pose& p = preds[i].poses[slot];
      const Pose& t = truths[i][slot];
      if (p.size() != t.size()) throw Error(ErrorKind::LengthMismatch, "joint counts differ");
      for (std::size_t j = 0; j < p.size(); ++j) {
        Vec3 d = t.joints[j] - p.joints[j];
        if (root_relative) d -= t.joints[0] - p.joints[0];
        sum[h] += d.norm();
        ++count[h];
      }
    }
  }
  std::vector<double> out(horizons.size());
  for (std::size_t h = 0; h < horizons.size(); ++h) {
    out[h] = count[h] ? 1000.0 * sum[h] / static_cast<double>(count[h]) : kNaN;
  }
  return out;
}

struct MetricReport {
  std::string method;
  std::vector<double> horizons_ms;
  std::vector<double> mpjpe_mm;
  double coverage = kNaN;
  double mean_volume = kNaN;
  std::vector<double> coverage_per_horizon;
  std::vector<double> volume_per_horizon;
  double invalid_H_rate = kNaN;
  double motion_valid_rate = kNaN;
  /// Fraction of post-warm-up steps whose first published slot is valid.
  double published_valid_rate = kNaN;
  std::optional<std::size_t> n_req;
  std::size_t samples = 0;
};

inline json to_json(const MetricReport& r) {
  json j{{"method", r.method},
         {"horizons_ms", r.horizons_ms},
         {"coverage", io::number(r.coverage)},
         {"mean_volume", io::number(r.mean_volume)},
         {"invalid_H_rate", io::number(r.invalid_H_rate)},
         {"motion_valid_rate", io::number(r.motion_valid_rate)},
         {"published_valid_rate", io::number(r.published_valid_rate)},
         {"samples", r.samples}};
  auto arr = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(io::number(x));
    return a;
  };
  j["mpjpe_mm"] = arr(r.mpjpe_mm);
  j["coverage_per_horizon"] = arr(r.coverage_per_horizon);
  j["volume_per_horizon"] = arr(r.volume_per_horizon);
  j["n_req"] = r.n_req ? json(*r.n_req) : json(nullptr);
  return j;
}

/// One row per metric per method: method,metric,value.
inline std::string to_csv(std::span<const MetricReport> reports) {
  std::ostringstream out;
  out.precision(17);
  out << "method,metric,value\n";
  auto row = [&](const std::string& method, const std::string& metric, double v) {
    out << method << ',' << metric << ',';
    if (std::isfinite(v)) out << v;
    out << '\n';
  };
  for (const auto& r : reports) {
    const std::string m = r.n_req ? r.method + "_nreq" + std::to_string(*r.n_req) : r.method;
    for (std::size_t h = 0; h < r.mpjpe_mm.size(); ++h) {
      row(m, "mpjpe_mm_" + std::to_string(static_cast<int>(r.horizons_ms[h])) + "ms", r.mpjpe_mm[h]);
    }
    row(m, "coverage", r.coverage);
    row(m, "mean_volume_m3", r.mean_volume);
    for (std::size_t k = 0; k < r.coverage_per_horizon.size(); ++k) {
      row(m, "coverage_step" + std::to_string(k + 1), r.coverage_per_horizon[k]);
      row(m, "volume_m3_step" + std::to_string(k + 1), r.volume_per_horizon[k]);
    }
    row(m, "invalid_H_rate", r.invalid_H_rate);
    row(m, "motion_valid_rate", r.motion_valid_rate);
    row(m, "published_valid_rate", r.published_valid_rate);
  }
  return out.str();
}

/// Predicts every window and reports MPJPE at the standard horizons.
inline MetricReport evaluate_predictor(const MotionPredictor& predictor, std::span<const TrainingWindow> windows,
                                       double frame_rate, bool root_relative = false) {
  const auto horizons = horizon_frames(frame_rate, predictor.config().K_P);
  std::vector<MotionPrediction> preds;
  std::vector<std::vector<Pose>> truths;
  for (const auto& w : windows) {
    preds.push_back(predictor.predict(w.history));
    truths.push_back(w.future);
  }
  MetricReport r;
  r.method = to_string(predictor.kind());
  for (auto f : horizons) r.horizons_ms.push_back(1000.0 * static_cast<double>(f) / frame_rate);
  r.mpjpe_mm = mpjpe(preds, truths, horizons, root_relative);
  r.samples = windows.size();
  return r;
}

// ---------------------------------------------------------------------------
// Conformal set experiment

/// A prediction with its ground truth and the last observed pose (for the ISO baseline).
struct ConformalSample {
  MotionPrediction pred;
  std::vector<Pose> truth;
  Pose last_observed;
};

enum class CoverageMode { PerJoint, PerPose };

struct Table2Result {
  MetricReport conformal;
  MetricReport iso;
  ConformalCalibration calibration;
};

inline ScoreTable score_table(std::span<const ConformalSample> samples) {
  if (samples.empty()) throw Error(ErrorKind::InsufficientCalibrationData, "no calibration samples");
  const std::size_t kp = samples.front().pred.size();
  const std::size_t joints = samples.front().truth.front().size();
  ScoreTable t(kp, std::vector<std::vector<double>>(joints));
  for (const auto& s : samples) {
    if (s.pred.size() != kp || s.truth.size() != kp) throw Error(ErrorKind::LengthMismatch, "sample horizons differ");
    for (std::size_t k = 0; k < kp; ++k) {
      for (std::size_t j = 0; j < joints; ++j) {
        t[k][j].push_back(
            nonconformity(s.truth[k].joints[j] - s.pred.poses[k].joints[j], s.pred.covs[k].covs[j]));
      }
    }
  }
  return t;
}

/// Calibrates on cal, then compares conformal spheres with the ISO baseline on test.
inline Table2Result run_table2_experiment(std::span<const ConformalSample> cal, std::span<const ConformalSample> test,
                                          double epsilon, double frame_rate, double v_max = kIsoMaxSpeed,
                                          CoverageMode mode = CoverageMode::PerJoint) {
  Table2Result out;
  out.calibration = calibrate(score_table(cal), epsilon);
  if (test.empty()) throw Error(ErrorKind::LengthMismatch, "no test samples");
  const std::size_t kp = out.calibration.horizon();
  const std::size_t joints = out.calibration.joint_count();

  struct Acc {
    std::vector<std::size_t> hits;
    std::vector<std::size_t> total;
    std::vector<double> volume;
    std::vector<std::size_t> volume_n;
  };
  auto make_acc = [&] {
    return Acc{std::vector<std::size_t>(kp, 0), std::vector<std::size_t>(kp, 0), std::vector<double>(kp, 0.0),
               std::vector<std::size_t>(kp, 0)};
  };
  Acc conf = make_acc();
  Acc iso = make_acc();
  std::vector<MotionPrediction> preds;
  std::vector<MotionPrediction> iso_preds;
  std::vector<std::vector<Pose>> truths;

  for (const auto& s : test) {
    if (s.pred.size() != kp || s.truth.size() != kp) throw Error(ErrorKind::LengthMismatch, "sample horizons differ");
    MotionPrediction last = MotionPrediction::invalid(kp, joints);
    for (std::size_t k = 0; k < kp; ++k) {
      const auto iso_sets = iso_baseline_set(s.last_observed, s.truth[k].timestamp, v_max);
      bool conf_all = true;
      bool iso_all = true;
      for (std::size_t j = 0; j < joints; ++j) {
        const Vec3& y = s.truth[k].joints[j];
        const SphereSet cs = sphere_set(s.pred.poses[k].joints[j], s.pred.covs[k].covs[j],
                                        out.calibration.alpha[k][j], j, s.truth[k].timestamp);
        const bool ch = cs.contains(y);
        const bool ih = iso_sets[j].contains(y);
        conf_all = conf_all && ch;
        iso_all = iso_all && ih;
        if (mode == CoverageMode::PerJoint) {
          conf.hits[k] += ch ? 1 : 0;
          iso.hits[k] += ih ? 1 : 0;
          ++conf.total[k];
          ++iso.total[k];
        }
        conf.volume[k] += cs.volume();
        iso.volume[k] += iso_sets[j].volume();
        ++conf.volume_n[k];
        ++iso.volume_n[k];
      }
      if (mode == CoverageMode::PerPose) {
        conf.hits[k] += conf_all ? 1 : 0;
        iso.hits[k] += iso_all ? 1 : 0;
        ++conf.total[k];
        ++iso.total[k];
      }
      last.poses[k] = Pose{s.last_observed.joints, s.truth[k].timestamp};
      last.valid[k] = true;
    }
    preds.push_back(s.pred);
    iso_preds.push_back(std::move(last));
    truths.push_back(s.truth);
  }

  const auto horizons = horizon_frames(frame_rate, kp);
  auto finish = [&](const Acc& a, const char* name, const std::vector<MotionPrediction>& p) {
    MetricReport r;
    r.method = name;
    std::size_t hits = 0;
    std::size_t total = 0;
    double vol = 0.0;
    std::size_t vol_n = 0;
    for (std::size_t k = 0; k < kp; ++k) {
      r.coverage_per_horizon.push_back(static_cast<double>(a.hits[k]) / static_cast<double>(a.total[k]));
      r.volume_per_horizon.push_back(a.volume[k] / static_cast<double>(a.volume_n[k]));
      hits += a.hits[k];
      total += a.total[k];
      vol += a.volume[k];
      vol_n += a.volume_n[k];
    }
    r.coverage = static_cast<double>(hits) / static_cast<double>(total);
    r.mean_volume = vol / static_cast<double>(vol_n);
    for (auto f : horizons) r.horizons_ms.push_back(1000.0 * static_cast<double>(f) / frame_rate);
    r.mpjpe_mm = mpjpe(p, truths, horizons);
    r.samples = test.size();
    return r;
  };
  out.conformal = finish(conf, "conformal", preds);
  out.iso = finish(iso, "iso13855", iso_preds);
  return out;
}

/// Runs a predictor over every window of a dataset.
inline std::vector<ConformalSample> predict_samples(const MotionPredictor& predictor, const MotionDataset& ds,
                                                    std::size_t stride = 1) {
  const auto& c = predictor.config();
  std::vector<ConformalSample> out;
  for (auto& w : make_windows(ds, c.K_I, c.K_P, stride)) {
    ConformalSample s;
    s.pred = predictor.predict(w.history);
    s.last_observed = w.history.poses.back();
    s.truth = std::move(w.future);
    out.push_back(std::move(s));
  }
  return out;
}

inline Table2Result run_table2_experiment(const MotionPredictor& predictor, const MotionDataset& cal,
                                          const MotionDataset& test, double epsilon, double v_max = kIsoMaxSpeed,
                                          CoverageMode mode = CoverageMode::PerJoint) {
  const auto cal_samples = predict_samples(predictor, cal);
  const auto test_samples = predict_samples(predictor, test);
  return run_table2_experiment(cal_samples, test_samples, epsilon, test.frame_rate, v_max, mode);
}

/// Oracle predictor on a dataset: the mean is the truth displaced by N(0, sigma^2 I)
/// and the covariance is sigma^2 I, so the predictive distribution is exact.
inline std::vector<ConformalSample> oracle_samples(const MotionDataset& ds, std::size_t K_I, std::size_t K_P,
                                                   double sigma, std::uint64_t seed, std::size_t stride = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<ConformalSample> out;
  for (auto& w : make_windows(ds, K_I, K_P, stride)) {
    ConformalSample s;
    s.last_observed = w.history.poses.back();
    s.pred.poses = w.future;
    for (auto& p : s.pred.poses) {
      for (auto& x : p.joints) x -= sigma * Vec3(gauss(rng), gauss(rng), gauss(rng));
    }
    s.pred.covs.assign(K_P, PoseCovariances::isotropic(w.future.front().size(), sigma * sigma));
    s.pred.valid.assign(K_P, true);
    s.truth = std::move(w.future);
    out.push_back(std::move(s));
  }
  return out;
}

/// Heteroscedastic Gaussian samples: each (step, joint) has a random SPD
/// covariance with std between 0.5 sigma and sigma along random axes, and the
/// truth is drawn from N(mean, C). The last observed pose sits one frame
/// before the first step.
inline std::vector<ConformalSample> gaussian_oracle_samples(std::size_t n, std::size_t K_P, std::size_t joints,
                                                            double sigma, double frame_rate, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.5, 1.0);
  const double dt = 1.0 / frame_rate;
  std::vector<ConformalSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ConformalSample s;
    s.last_observed.timestamp = 0.0;
    for (std::size_t j = 0; j < joints; ++j) {
      s.last_observed.joints.push_back(Vec3(0.0, 0.0, 3.0) + 0.3 * Vec3(gauss(rng), gauss(rng), gauss(rng)));
    }
    s.pred = MotionPrediction::invalid(K_P, joints);
    s.truth.resize(K_P);
    for (std::size_t k = 0; k < K_P; ++k) {
      const double t = static_cast<double>(k + 1) * dt;
      s.pred.poses[k] = Pose{s.last_observed.joints, t};
      s.pred.covs[k] = PoseCovariances::zeros(joints);
      s.truth[k] = Pose{std::vector<Vec3>(joints), t};
      for (std::size_t j = 0; j < joints; ++j) {
        const Mat3 q = Eigen::Quaterniond(gauss(rng), gauss(rng), gauss(rng), gauss(rng)).normalized().toRotationMatrix();
        const Vec3 sd(sigma * scale(rng), sigma * scale(rng), sigma * scale(rng));
        const Mat3 l = q * sd.asDiagonal();
        s.pred.covs[k].covs[j] = l * l.transpose();
        s.truth[k].joints[j] = s.pred.poses[k].joints[j] + l * Vec3(gauss(rng), gauss(rng), gauss(rng));
      }
      s.pred.valid[k] = true;
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full pipeline experiment

/// Two cameras 0.5 m apart looking down +z, 600 px focal length, 640x480 principal point.
inline std::pair<CameraModel, CameraModel> default_stereo_rig() {
  return {make_pinhole_camera(1, 600.0, 320.0, 240.0, Mat3::Identity(), Vec3(-0.25, 0.0, 0.0)),
          make_pinhole_camera(2, 600.0, 320.0, 240.0, Mat3::Identity(), Vec3(0.25, 0.0, 0.0))};
}

/// Projects a pose into both cameras with isotropic pixel noise. OOD frames
/// carry no detections and the missing-human flag.
inline StereoObservation make_observation(const Pose& truth, bool ood, const CameraModel& cam1, const CameraModel& cam2,
                                          double pixel_sigma, std::mt19937_64& rng) {
  StereoObservation obs;
  obs.timestamp = truth.timestamp;
  if (ood) {
    obs.missing_human = true;
    return obs;
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Mat2 cov = pixel_sigma * pixel_sigma * Mat2::Identity();
  for (std::size_t j = 0; j < truth.size(); ++j) {
    const int idx = static_cast<int>(j) + 1;
    obs.detections_cam1.push_back(
        Detection2D{cam1.project(truth.joints[j]) + pixel_sigma * Vec2(gauss(rng), gauss(rng)), cov, idx});
    obs.detections_cam2.push_back(
        Detection2D{cam2.project(truth.joints[j]) + pixel_sigma * Vec2(gauss(rng), gauss(rng)), cov, idx});
  }
  return obs;
}

/// One frame of a pipeline stream: ground truth plus the OOD-injection flag.
struct StreamFrame {
  Pose truth;
  bool ood = false;
};

/// Pulls the next frame; returns false at the end of the stream.
using FrameSource = std::function<bool(StreamFrame&)>;

struct Table3Models {
  CameraModel cam1;
  CameraModel cam2;
  std::shared_ptr<const MotionPredictor> predictor;
  ConformalCalibration calibration;
  double pixel_sigma = 1.0;
  std::uint64_t noise_seed = 7;
};

/// Runs one pipeline over a stream and reports the gate and prediction statistics.
///
/// Rates count post-warm-up steps: invalid_H_rate is the fraction whose last
/// N_req validity flags are not all 1, motion_valid_rate the fraction that
/// accepted a fresh prediction. MPJPE compares every valid slot i at step s with
/// the true pose of frame s + i + 1.
inline MetricReport run_pipeline_stream(const FrameSource& source, const PipelineConfig& cfg,
                                        const Table3Models& models) {
  PipelineModels pm;
  pm.cam1 = models.cam1;
  pm.cam2 = models.cam2;
  pm.predictor = models.predictor;
  Pipeline pipeline(cfg, pm, models.calibration);
  std::mt19937_64 noise(models.noise_seed);

  const auto horizons = horizon_frames(cfg.f_cam, cfg.K_P);
  std::vector<double> err_sum(horizons.size(), 0.0);
  std::vector<std::size_t> err_n(horizons.size(), 0);

  // Pending predictions waiting for their ground truth: (frame index, pose).
  struct Pending {
    std::size_t frame;
    std::size_t horizon;
    Pose pose;
  };
  std::deque<Pending> pending;

  std::size_t counted = 0;
  std::size_t invalid = 0;
  std::size_t accepted = 0;
  std::size_t published = 0;
  StreamFrame frame;
  std::size_t index = 0;
  while (source(frame)) {
    while (!pending.empty() && pending.front().frame == index) {
      const Pending& p = pending.front();
      for (std::size_t j = 0; j < p.pose.size(); ++j) {
        err_sum[p.horizon] += (frame.truth.joints[j] - p.pose.joints[j]).norm();
        ++err_n[p.horizon];
      }
      pending.pop_front();
    }
    const StepOutput out = pipeline.step(make_observation(frame.truth, frame.ood, models.cam1, models.cam2,
                                                          models.pixel_sigma, noise));
    if (!out.occupancies.empty()) {
      ++counted;
      invalid += out.diagnostics.buffer_valid ? 0 : 1;
      accepted += out.diagnostics.accepted ? 1 : 0;
      published += out.occupancies.front().valid ? 1 : 0;
      const auto& m = pipeline.state().motion;
      for (std::size_t h = 0; h < horizons.size(); ++h) {
        const std::size_t slot = horizons[h] - 1;
        if (m.valid[slot]) pending.push_back(Pending{index + horizons[h], h, m.poses[slot]});
      }
      std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) { return a.frame < b.frame; });
    }
    ++index;
  }

  MetricReport r;
  r.method = "pipeline";
  r.n_req = cfg.N_req;
  r.samples = counted;
  if (counted > 0) {
    r.invalid_H_rate = static_cast<double>(invalid) / static_cast<double>(counted);
    r.motion_valid_rate = static_cast<double>(accepted) / static_cast<double>(counted);
    r.published_valid_rate = static_cast<double>(published) / static_cast<double>(counted);
  }
  for (std::size_t h = 0; h < horizons.size(); ++h) {
    r.horizons_ms.push_back(1000.0 * static_cast<double>(horizons[h]) / cfg.f_cam);
    r.mpjpe_mm.push_back(err_n[h] ? 1000.0 * err_sum[h] / static_cast<double>(err_n[h]) : kNaN);
  }
  return r;
}

/// Runs the pipeline once per N_req over every sequence of an OOD-injected dataset
/// and pools the statistics across sequences.
inline std::vector<MetricReport> run_table3_experiment(const MotionDataset& ds, std::span<const std::size_t> n_req_values,
                                                       const PipelineConfig& base, const Table3Models& models) {
  std::vector<MetricReport> reports;
  for (std::size_t n_req : n_req_values) {
    PipelineConfig cfg = base;
    cfg.N_req = n_req;
    cfg.f_cam = ds.frame_rate;
    MetricReport pooled;
    pooled.method = "pipeline";
    pooled.n_req = n_req;
    double inv = 0.0, acc = 0.0, pub = 0.0;
    std::vector<double> err_weighted;
    std::size_t total = 0;
    for (const auto& seq : ds.sequences) {
      std::size_t k = 0;
      FrameSource src = [&](StreamFrame& f) {
        if (k >= seq.size()) return false;
        f.truth = seq.truth[k];
        f.ood = seq.ood.empty() ? false : seq.ood[k];
        ++k;
        return true;
      };
      const MetricReport r = run_pipeline_stream(src, cfg, models);
      if (r.samples == 0) continue;
      const auto n = static_cast<double>(r.samples);
      inv += r.invalid_H_rate * n;
      acc += r.motion_valid_rate * n;
      pub += r.published_valid_rate * n;
      if (err_weighted.empty()) {
        err_weighted.assign(r.mpjpe_mm.size(), 0.0);
        pooled.horizons_ms = r.horizons_ms;
      }
      for (std::size_t h = 0; h < r.mpjpe_mm.size(); ++h) {
        if (std::isfinite(r.mpjpe_mm[h])) err_weighted[h] += r.mpjpe_mm[h] * n;
      }
      total += r.samples;
    }
    pooled.samples = total;
    if (total > 0) {
      const auto n = static_cast<double>(total);
      pooled.invalid_H_rate = inv / n;
      pooled.motion_valid_rate = acc / n;
      pooled.published_valid_rate = pub / n;
      for (double e : err_weighted) pooled.mpjpe_mm.push_back(e / n);
    }
    reports.push_back(std::move(pooled));
  }
  return reports;
}

/// Parameters of an arbitrarily long synthetic stream with Bernoulli OOD events.
struct StreamSpec {
  SyntheticKind kind = SyntheticKind::Sinusoidal;
  SyntheticParams params;
  std::size_t steps = 1'000'000;
  double ood_probability = 0.05;
  std::uint64_t seed = 1;
};

/// Generates frames on the fly, so memory does not grow with the step count.
inline FrameSource make_stream_source(const StreamSpec& spec) {
  auto rng = std::make_shared<std::mt19937_64>(spec.seed);
  auto traj = std::make_shared<SyntheticTrajectory>(spec.kind, spec.params, *rng);
  auto ood = std::make_shared<std::bernoulli_distribution>(spec.ood_probability);
  auto k = std::make_shared<std::size_t>(0);
  return [=, steps = spec.steps](StreamFrame& f) {
    if (*k >= steps) return false;
    f.truth = traj->next();
    f.ood = (*ood)(*rng);
    ++*k;
    return true;
  };
}

/// Calibrates the conformal table for a predictor on clean windows of the same
/// motion family (seed distinct from the evaluation stream).
inline ConformalCalibration calibrate_on_synthetic(const MotionPredictor& predictor, SyntheticKind kind,
                                                   SyntheticParams params, double epsilon, std::uint64_t seed) {
  const auto& c = predictor.config();
  params.joints = c.J;
  params.ood_probability = 0.0;
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw Error(ErrorKind::InvalidProbability, "epsilon must lie in (0, 1)");
  const auto needed = static_cast<std::size_t>(std::ceil(1.0 / epsilon));
  params.frames = std::max(params.frames, c.K_I + c.K_P + 4 * needed);
  const MotionDataset ds = generate_synthetic(kind, params, seed);
  return calibrate(score_table(predict_samples(predictor, ds)), epsilon);
}

inline std::vector<MetricReport> run_table3_stream(const StreamSpec& spec, std::span<const std::size_t> n_req_values,
                                                   const PipelineConfig& base, const Table3Models& models) {
  std::vector<MetricReport> reports;
  for (std::size_t n_req : n_req_values) {
    PipelineConfig cfg = base;
    cfg.N_req = n_req;
    cfg.f_cam = spec.params.frame_rate;
    reports.push_back(run_pipeline_stream(make_stream_source(spec), cfg, models));
  }
  return reports;
}

}  // namespace cm::harness
