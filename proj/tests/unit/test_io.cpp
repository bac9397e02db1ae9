#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace cm;
using cm::testing::Gen;
using nlohmann::json;

TEST(IoCamera, RoundTripAndValidation) {
  const auto [c1, c2] = cm::testing::parallel_rig();
  const auto back = io::camera_from_json(io::to_json(c1));
  EXPECT_EQ(back.projection, c1.projection);
  EXPECT_EQ(back.id, 1);
  const auto pair = io::cameras_from_json(json::array({io::to_json(c2), io::to_json(c1)}));
  EXPECT_EQ(pair.first.id, 1);
  EXPECT_EQ(pair.second.projection, c2.projection);
  const auto named = io::cameras_from_json(json{{"cam1", io::to_json(c1)}, {"cam2", io::to_json(c2)}});
  EXPECT_EQ(named.second.id, 2);
  json bad = io::to_json(c1);
  bad["id"] = 3;
  EXPECT_THROW(io::camera_from_json(bad), Error);
  bad = io::to_json(c1);
  bad["projection"] = json::array({json::array({1, 0, 0, 0})});
  EXPECT_THROW(io::camera_from_json(bad), Error);
  EXPECT_THROW(io::cameras_from_json(json::array({io::to_json(c1)})), Error);
}

TEST(IoCalibration, BundleRoundTrip) {
  io::CalibrationBundle b;
  b.conformal.alpha = {{1.0, 2.0}, {3.0, 4.5}};
  b.conformal.epsilon = 0.05;
  b.conformal.n_cal = 123;
  b.tau_2d = OodThreshold{2.5, 0.05, 400};
  const auto back = io::bundle_from_json(json::parse(io::to_json(b).dump()));
  EXPECT_EQ(back.conformal.alpha, b.conformal.alpha);
  EXPECT_EQ(back.conformal.epsilon, 0.05);
  EXPECT_EQ(back.conformal.n_cal, 123u);
  ASSERT_TRUE(back.tau_2d);
  EXPECT_EQ(back.tau_2d->tau, 2.5);
  EXPECT_FALSE(back.tau_mot);
  json j = io::to_json(b);
  j["alpha"] = json::array({json::array({1.0}), json::array({1.0, 2.0})});
  EXPECT_THROW(io::bundle_from_json(j), Error);
  j = io::to_json(b);
  j.erase("epsilon");
  EXPECT_THROW(io::bundle_from_json(j), Error);
}

TEST(IoRidge, SaveLoadPredictsIdentically) {
  harness::SyntheticParams p;
  p.joints = 2;
  p.frames = 150;
  p.sequences = 2;
  const auto ds = harness::generate_synthetic(harness::SyntheticKind::Sinusoidal, p, 1);
  PredictorConfig c;
  c.J = 2;
  const auto windows = harness::make_windows(ds, c.K_I, c.K_P);
  const auto model = fit_ridge_dct(windows, c);
  const auto loaded = io::ridge_from_json(json::parse(io::to_json(model.model()).dump()), c.K_I, c.K_P, c.J);
  const auto a = model.predict(windows[7].history), b = loaded.predict(windows[7].history);
  for (std::size_t k = 0; k < c.K_P; ++k) {
    EXPECT_EQ(a.poses[k].joints, b.poses[k].joints);
    EXPECT_EQ(a.covs[k].covs, b.covs[k].covs);
  }
}

TEST(IoRidge, MismatchRefused) {
  PredictorConfig c;
  c.J = 1;
  c.K_I = 20;
  c.dct_cutoff = 5;
  std::vector<TrainingWindow> windows;
  const Pose pose{{Vec3(0, 0, 3)}, 0.0};
  for (int i = 0; i < 50; ++i) {
    windows.push_back({cm::testing::constant_history(pose, c.K_I, 25.0), std::vector<Pose>(c.K_P, pose)});
  }
  const json doc = io::to_json(fit_ridge_dct(windows, c).model());
  for (auto [ki, kp, jj] : {std::tuple{50u, 10u, 1u}, std::tuple{20u, 5u, 1u}, std::tuple{20u, 10u, 13u}}) {
    try {
      io::ridge_from_json(doc, ki, kp, jj);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::ModelMismatch);
      EXPECT_NE(std::string(e.what()).find("expected"), std::string::npos);
    }
  }
  json wrong = doc;
  wrong["version"] = 2;
  EXPECT_THROW(io::ridge_from_json(wrong, 20, 10, 1), Error);
  wrong = doc;
  wrong["format"] = "other";
  EXPECT_THROW(io::ridge_from_json(wrong, 20, 10, 1), Error);
}

TEST(IoObservation, RoundTrip) {
  Gen g(2);
  StereoObservation obs;
  obs.timestamp = 1.5;
  for (int j = 0; j < 3; ++j) {
    obs.detections_cam1.push_back({g.vec2(100.0), Mat2::Identity() * 2.0, j + 1});
    obs.detections_cam2.push_back({g.vec2(100.0), Mat2::Identity() * 3.0, j + 1});
  }
  obs.cross_cov = std::vector<Mat2>(3, Mat2::Identity() * 0.5);
  obs.features_cam1 = {1.0, 2.0};
  const auto back = io::observation_from_json(json::parse(io::to_json(obs).dump()));
  EXPECT_EQ(back.timestamp, 1.5);
  ASSERT_EQ(back.detections_cam1.size(), 3u);
  EXPECT_EQ(back.detections_cam1[2].mean, obs.detections_cam1[2].mean);
  EXPECT_EQ(back.detections_cam2[1].cov, obs.detections_cam2[1].cov);
  EXPECT_EQ((*back.cross_cov)[0], (*obs.cross_cov)[0]);
  EXPECT_EQ(back.features_cam1, obs.features_cam1);
  EXPECT_FALSE(back.missing_human);

  const auto missing = io::observation_from_json(json{{"t", 2.0}, {"missing", true}});
  EXPECT_TRUE(missing.missing_human);
  EXPECT_THROW(io::observation_from_json(json{{"t", 2.0}}), Error);
}

TEST(IoStepOutput, FieldsPresent) {
  StepOutput out;
  out.status = StepStatus::Nominal;
  PublishedOccupancy pub;
  pub.valid = true;
  pub.occupancy = occupancy_union(std::vector<SphereSet>{{Vec3(1, 2, 3), 0.5, 0, 0.4}}, 0.1);
  out.occupancies.push_back(pub);
  PublishedOccupancy invalid;
  invalid.occupancy.spheres.push_back({Vec3::Constant(kNaN), kNaN, 0, 0.44});
  out.occupancies.push_back(invalid);
  const json j = io::to_json(out, 7);
  EXPECT_EQ(j["step"], 7);
  EXPECT_EQ(j["status"], "nominal");
  const auto& s = j["occupancies"][0]["spheres"][0];
  EXPECT_EQ(s["joint"], 0);
  EXPECT_EQ(s["center"], json::array({1.0, 2.0, 3.0}));
  EXPECT_NEAR(s["radius"].get<double>(), 0.6, 1e-15);
  EXPECT_EQ(s["valid"], true);
  EXPECT_TRUE(j["occupancies"][1]["spheres"][0]["radius"].is_null());
  EXPECT_EQ(j["occupancies"][1]["valid"], false);
}

TEST(IoConfig, KeysAndEnvOverrides) {
  const json doc{{"K_I", 50}, {"N_req", 5}, {"cameras", "cams.json"}, {"sigma_iso", 0.02}};
  auto rc = io::run_config_from_json(doc);
  EXPECT_EQ(rc.pipeline.N_req, 5u);
  EXPECT_EQ(rc.pipeline.sigma_iso, 0.02);
  EXPECT_EQ(rc.cameras, "cams.json");
  EXPECT_EQ(io::env_name("N_req"), "CM_N_REQ");
  EXPECT_EQ(io::env_name("score_both_cameras"), "CM_SCORE_BOTH_CAMERAS");

  ::setenv("CM_N_REQ", "10", 1);
  ::setenv("CM_CAMERAS", "other.json", 1);
  ::setenv("CM_SCORE_BOTH_CAMERAS", "true", 1);
  rc = io::run_config_from_json(doc);
  ::unsetenv("CM_N_REQ");
  ::unsetenv("CM_CAMERAS");
  ::unsetenv("CM_SCORE_BOTH_CAMERAS");
  EXPECT_EQ(rc.pipeline.N_req, 10u);
  EXPECT_EQ(rc.cameras, "other.json");
  EXPECT_TRUE(rc.pipeline.score_both_cameras);

  EXPECT_THROW(io::run_config_from_json(json{{"K_i", 50}}), Error);
  EXPECT_THROW(io::run_config_from_json(json{{"N_req", 60}}), Error);
  EXPECT_THROW(io::run_config_from_json(json{{"N_req", "three"}}), Error);
  // Every PipelineConfig field is a documented key.
  for (const char* k : {"K_I", "K_P", "N_req", "f_cam", "epsilon", "epsilon_ood", "v_max", "sigma_iso"}) {
    const auto& keys = io::config_keys();
    EXPECT_NE(std::find(keys.begin(), keys.end(), k), keys.end()) << k;
  }
}
