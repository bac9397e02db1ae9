#pragma once

#include "cm/conformal.hpp"
#include "cm/geometry.hpp"
#include "cm/ood.hpp"
#include "cm/pipeline.hpp"
#include "cm/predict.hpp"

#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

namespace cm::io {

using nlohmann::json;

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::ParseError, path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::InvalidParams, "cannot write '" + path + "'");
  out << text;
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw Error(ErrorKind::SchemaError, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::SchemaError, std::string("field '") + key + "': " + e.what());
  }
}

/// NaN is written as null; null reads back as NaN.
inline json number(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
inline double number_or_nan(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

inline json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number(v(i)));
  return a;
}

inline json mat_json(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(vec_json(m.row(r).transpose()));
  return a;
}

inline Eigen::MatrixXd mat_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw Error(ErrorKind::SchemaError, std::string(what) + ": expected " + std::to_string(rows) + " rows");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw Error(ErrorKind::SchemaError, std::string(what) + ": expected " + std::to_string(cols) + " columns");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      const json& x = row[static_cast<std::size_t>(c)];
      if (!x.is_number()) throw Error(ErrorKind::SchemaError, std::string(what) + ": non-numeric entry");
      m(r, c) = x.get<double>();
    }
  }
  return m;
}

inline Vec3 vec3_from_json(const json& j) { return mat_from_json(json::array({j}), 1, 3, "point").row(0).transpose(); }

// ---------------------------------------------------------------------------
// Cameras: {"id": int, "projection": [[f64;4];3]}

inline json to_json(const CameraModel& cam) { return json{{"id", cam.id}, {"projection", mat_json(cam.projection)}}; }

inline CameraModel camera_from_json(const json& j) {
  CameraModel cam;
  cam.id = field<int>(j, "id");
  if (cam.id != 1 && cam.id != 2) throw Error(ErrorKind::SchemaError, "camera id must be 1 or 2");
  if (!j.contains("projection")) throw Error(ErrorKind::SchemaError, "missing field 'projection'");
  cam.projection = mat_from_json(j.at("projection"), 3, 4, "projection");
  cam.validate();
  return cam;
}

/// Accepts a two-element array of camera documents or {"cam1": ..., "cam2": ...}.
inline std::pair<CameraModel, CameraModel> cameras_from_json(const json& j) {
  if (j.is_array() && j.size() == 2) {
    CameraModel a = camera_from_json(j[0]);
    CameraModel b = camera_from_json(j[1]);
    if (a.id == 2) std::swap(a, b);
    if (a.id != 1 || b.id != 2) throw Error(ErrorKind::SchemaError, "expected cameras with ids 1 and 2");
    return {a, b};
  }
  if (j.is_object() && j.contains("cam1") && j.contains("cam2")) {
    return {camera_from_json(j.at("cam1")), camera_from_json(j.at("cam2"))};
  }
  throw Error(ErrorKind::SchemaError, "camera file must hold two camera documents");
}

// ---------------------------------------------------------------------------
// Calibration: {"epsilon": f64, "n_cal": int, "alpha": [[f64; J]; K_P]} with
// optional "ood": {"tau_2d": {...}, "tau_mot": {...}}.

inline json to_json(const OodThreshold& t) {
  return json{{"tau", number(t.tau)}, {"epsilon_ood", t.epsilon_ood}, {"n_cal", t.n_cal}};
}

inline OodThreshold threshold_from_json(const json& j) {
  OodThreshold t;
  t.tau = j.contains("tau") && j.at("tau").is_null() ? std::numeric_limits<double>::infinity()
                                                      : field<double>(j, "tau");
  t.epsilon_ood = field<double>(j, "epsilon_ood");
  t.n_cal = field<std::size_t>(j, "n_cal");
  return t;
}

inline json to_json(const ConformalCalibration& c) {
  return json{{"epsilon", c.epsilon}, {"n_cal", c.n_cal}, {"alpha", c.alpha}};
}

inline ConformalCalibration calibration_from_json(const json& j) {
  ConformalCalibration c;
  c.epsilon = field<double>(j, "epsilon");
  c.n_cal = field<std::size_t>(j, "n_cal");
  c.alpha = field<std::vector<std::vector<double>>>(j, "alpha");
  if (c.alpha.empty()) throw Error(ErrorKind::SchemaError, "alpha table is empty");
  for (const auto& row : c.alpha) {
    if (row.size() != c.alpha.front().size()) throw Error(ErrorKind::SchemaError, "alpha table is ragged");
    for (double a : row) {
      if (!(a >= 0.0)) throw Error(ErrorKind::SchemaError, "alpha entries must be >= 0");
    }
  }
  return c;
}

struct CalibrationBundle {
  ConformalCalibration conformal;
  std::optional<OodThreshold> tau_2d;
  std::optional<OodThreshold> tau_mot;
};

inline json to_json(const CalibrationBundle& b) {
  json j = to_json(b.conformal);
  if (b.tau_2d || b.tau_mot) {
    json ood = json::object();
    if (b.tau_2d) ood["tau_2d"] = to_json(*b.tau_2d);
    if (b.tau_mot) ood["tau_mot"] = to_json(*b.tau_mot);
    j["ood"] = ood;
  }
  return j;
}

inline CalibrationBundle bundle_from_json(const json& j) {
  CalibrationBundle b;
  b.conformal = calibration_from_json(j);
  if (j.contains("ood")) {
    const json& ood = j.at("ood");
    if (ood.contains("tau_2d")) b.tau_2d = threshold_from_json(ood.at("tau_2d"));
    if (ood.contains("tau_mot")) b.tau_mot = threshold_from_json(ood.at("tau_mot"));
  }
  return b;
}

// ---------------------------------------------------------------------------
// RidgeDCT model documents

inline constexpr const char* kRidgeFormat = "cm.ridge_dct";
inline constexpr int kRidgeVersion = 1;

inline json to_json(const RidgeDctModel& m) {
  json cov = json::array();
  for (const auto& row : m.residual_cov) {
    json r = json::array();
    for (const auto& c : row) r.push_back(mat_json(c));
    cov.push_back(r);
  }
  return json{{"format", kRidgeFormat},
              {"version", kRidgeVersion},
              {"K_I", m.config.K_I},
              {"K_P", m.config.K_P},
              {"J", m.config.J},
              {"dct_cutoff", m.config.dct_cutoff},
              {"lambda", m.config.lambda},
              {"sigma_v", m.config.sigma_v},
              {"ridge_mu", m.config.ridge_mu},
              {"weights", mat_json(m.weights)},
              {"residual_cov", cov},
              {"reference_trace", m.reference_trace}};
}

/// Refuses documents whose K_I, K_P or J differ from the expected shape.
inline RidgeDctPredictor ridge_from_json(const json& j, std::size_t expect_K_I, std::size_t expect_K_P,
                                         std::size_t expect_J) {
  if (field<std::string>(j, "format") != kRidgeFormat) throw Error(ErrorKind::SchemaError, "not a RidgeDCT document");
  const int version = field<int>(j, "version");
  if (version != kRidgeVersion) {
    throw Error(ErrorKind::ModelMismatch, "unsupported RidgeDCT version " + std::to_string(version));
  }
  RidgeDctModel m;
  m.config.K_I = field<std::size_t>(j, "K_I");
  m.config.K_P = field<std::size_t>(j, "K_P");
  m.config.J = field<std::size_t>(j, "J");
  if (m.config.K_I != expect_K_I || m.config.K_P != expect_K_P || m.config.J != expect_J) {
    std::ostringstream msg;
    msg << "model has K_I=" << m.config.K_I << " K_P=" << m.config.K_P << " J=" << m.config.J << ", expected K_I="
        << expect_K_I << " K_P=" << expect_K_P << " J=" << expect_J;
    throw Error(ErrorKind::ModelMismatch, msg.str());
  }
  m.config.dct_cutoff = field<std::size_t>(j, "dct_cutoff");
  m.config.lambda = field<double>(j, "lambda");
  m.config.sigma_v = field<double>(j, "sigma_v");
  m.config.ridge_mu = field<double>(j, "ridge_mu");
  m.config.validate();
  m.weights = mat_from_json(j.at("weights"), static_cast<Eigen::Index>(m.config.dct_cutoff),
                            static_cast<Eigen::Index>(m.config.K_P), "weights");
  const json& cov = j.at("residual_cov");
  if (!cov.is_array() || cov.size() != m.config.K_P) throw Error(ErrorKind::SchemaError, "residual_cov must have K_P rows");
  for (const auto& row : cov) {
    if (!row.is_array() || row.size() != m.config.J) throw Error(ErrorKind::SchemaError, "residual_cov row must have J entries");
    std::vector<Mat3> r;
    for (const auto& c : row) r.push_back(mat_from_json(c, 3, 3, "residual_cov"));
    m.residual_cov.push_back(std::move(r));
  }
  m.reference_trace = field<std::vector<double>>(j, "reference_trace");
  return RidgeDctPredictor(std::move(m));
}

// ---------------------------------------------------------------------------
// Stereo observations (one JSON object per line)
//
// {"t": f64, "cam1": [{"u","v","cov":[[..],[..]]}...], "cam2": [...],
//  "cross_cov": [[[..],[..]]...] (optional), "missing": bool (optional),
//  "features1": [...], "features2": [...] (optional)}

inline json to_json(const StereoObservation& obs) {
  auto dets = [](const std::vector<Detection2D>& ds) {
    json a = json::array();
    for (const auto& d : ds) {
      a.push_back(json{{"u", d.mean.x()}, {"v", d.mean.y()}, {"cov", mat_json(d.cov)}, {"joint", d.joint_index}});
    }
    return a;
  };
  json j{{"t", obs.timestamp}, {"cam1", dets(obs.detections_cam1)}, {"cam2", dets(obs.detections_cam2)}};
  if (obs.cross_cov) {
    json c = json::array();
    for (const auto& m : *obs.cross_cov) c.push_back(mat_json(m));
    j["cross_cov"] = c;
  }
  if (obs.missing_human) j["missing"] = true;
  if (!obs.features_cam1.empty()) j["features1"] = obs.features_cam1;
  if (!obs.features_cam2.empty()) j["features2"] = obs.features_cam2;
  return j;
}

inline StereoObservation observation_from_json(const json& j) {
  StereoObservation obs;
  obs.timestamp = field<double>(j, "t");
  obs.missing_human = j.contains("missing") && j.at("missing").get<bool>();
  auto dets = [&](const char* key) {
    std::vector<Detection2D> out;
    if (!j.contains(key)) {
      if (obs.missing_human) return out;
      throw Error(ErrorKind::SchemaError, std::string("missing field '") + key + "'");
    }
    int index = 1;
    for (const auto& d : j.at(key)) {
      Detection2D det;
      det.mean = Vec2(field<double>(d, "u"), field<double>(d, "v"));
      det.cov = d.contains("cov") ? Mat2(mat_from_json(d.at("cov"), 2, 2, "cov")) : Mat2::Zero();
      if (!is_symmetric(det.cov)) throw Error(ErrorKind::SchemaError, "detection covariance is not symmetric");
      det.joint_index = d.contains("joint") ? d.at("joint").get<int>() : index;
      ++index;
      out.push_back(det);
    }
    return out;
  };
  obs.detections_cam1 = dets("cam1");
  obs.detections_cam2 = dets("cam2");
  if (obs.detections_cam1.size() != obs.detections_cam2.size()) {
    throw Error(ErrorKind::SchemaError, "cam1 and cam2 detection lists differ in length");
  }
  if (j.contains("cross_cov")) {
    std::vector<Mat2> c;
    for (const auto& m : j.at("cross_cov")) c.push_back(mat_from_json(m, 2, 2, "cross_cov"));
    obs.cross_cov = std::move(c);
  }
  if (j.contains("features1")) obs.features_cam1 = j.at("features1").get<std::vector<double>>();
  if (j.contains("features2")) obs.features_cam2 = j.at("features2").get<std::vector<double>>();
  return obs;
}

// ---------------------------------------------------------------------------
// Step outputs (one JSON object per line)

inline json to_json(const StepOutput& out, std::uint64_t step_index) {
  json occ = json::array();
  for (std::size_t i = 0; i < out.occupancies.size(); ++i) {
    const auto& pub = out.occupancies[i];
    json spheres = json::array();
    for (const auto& s : pub.occupancy.spheres) {
      spheres.push_back(json{{"joint", s.joint},
                             {"center", vec_json(s.center)},
                             {"radius", number(s.radius)},
                             {"time", number(s.time)},
                             {"valid", pub.valid}});
    }
    occ.push_back(json{{"slot", i}, {"valid", pub.valid}, {"time", number(pub.occupancy.time)}, {"spheres", spheres}});
  }
  const auto& d = out.diagnostics;
  json diag{{"score_2d", number(d.score_2d)},
            {"pose_in_distribution", d.pose_in_distribution},
            {"buffer_valid", d.buffer_valid},
            {"accepted", d.accepted},
            {"cold_start_discard", d.cold_start_discard},
            {"sentinel_appended", d.sentinel_appended},
            {"fallback_joints", d.fallback_joints},
            {"history_size", d.history_size},
            {"valid_slots", d.valid_slots}};
  diag["score_mot"] = d.score_mot ? number(*d.score_mot) : json(nullptr);
  return json{{"step", step_index}, {"status", to_string(out.status)}, {"occupancies", occ}, {"diagnostics", diag}};
}

// ---------------------------------------------------------------------------
// Pipeline configuration file
//
// A JSON object whose keys mirror PipelineConfig field names. Every key can be
// overridden by an environment variable CM_<KEY> with the key upper-cased,
// e.g. CM_K_I, CM_N_REQ, CM_SIGMA_ISO, CM_CAMERAS.

struct RunConfig {
  PipelineConfig pipeline;
  std::string cameras;
  std::string calibration;
  std::string predictor = "last_frame";
  std::string model;
  std::size_t J = 13;
  double sigma_v = 0.5;
  std::size_t dct_cutoff = 10;
};

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "K_I",     "K_P",       "N_req",          "f_cam",          "epsilon", "epsilon_ood",
      "v_max",   "sigma_iso", "sigma_fallback", "padding",        "score_both_cameras",
      "cameras", "calibration", "predictor",    "model",          "J",       "sigma_v",
      "dct_cutoff"};
  return keys;
}

inline std::string env_name(const std::string& key) {
  std::string name = "CM_";
  for (char c : key) name.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return name;
}

/// Parses an environment override as JSON when possible, else as a plain string.
inline json env_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

inline json apply_env_overrides(json doc) {
  if (!doc.is_object()) throw Error(ErrorKind::SchemaError, "config must be a JSON object");
  for (const auto& key : config_keys()) {
    if (const char* v = std::getenv(env_name(key).c_str())) doc[key] = env_value(v);
  }
  return doc;
}

inline RunConfig run_config_from_json(const json& raw) {
  const json doc = apply_env_overrides(raw);
  for (const auto& [key, value] : doc.items()) {
    const auto& keys = config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      throw Error(ErrorKind::SchemaError, "unknown config key '" + key + "'");
    }
  }
  RunConfig rc;
  auto& p = rc.pipeline;
  auto opt = [&](const char* key, auto& target) {
    using T = std::decay_t<decltype(target)>;
    if (doc.contains(key)) target = field<T>(doc, key);
  };
  opt("K_I", p.K_I);
  opt("K_P", p.K_P);
  opt("N_req", p.N_req);
  opt("f_cam", p.f_cam);
  opt("epsilon", p.epsilon);
  opt("epsilon_ood", p.epsilon_ood);
  opt("v_max", p.v_max);
  opt("sigma_iso", p.sigma_iso);
  opt("sigma_fallback", p.sigma_fallback);
  opt("padding", p.padding);
  opt("score_both_cameras", p.score_both_cameras);
  opt("cameras", rc.cameras);
  opt("calibration", rc.calibration);
  opt("predictor", rc.predictor);
  opt("model", rc.model);
  opt("J", rc.J);
  opt("sigma_v", rc.sigma_v);
  opt("dct_cutoff", rc.dct_cutoff);
  p.validate();
  return rc;
}

}  // namespace cm::io
