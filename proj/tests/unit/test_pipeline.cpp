#include "support/oracles.hpp"

#include <gtest/gtest.h>

using namespace cm;
using cm::testing::Gen;

namespace {

constexpr std::size_t kJoints = 2;

struct Rig {
  PipelineConfig cfg;
  PipelineModels models;
  ConformalCalibration calib;
  Pose pose{{Vec3(0.1, 0.0, 2.5), Vec3(-0.2, 0.3, 3.0)}, 0.0};

  explicit Rig(std::size_t n_req = 3) {
    cfg.N_req = n_req;
    auto [c1, c2] = cm::testing::parallel_rig();
    models.cam1 = c1;
    models.cam2 = c2;
    PredictorConfig pc;
    pc.J = kJoints;
    models.predictor = std::make_shared<LastFramePredictor>(pc);
    calib.alpha.assign(cfg.K_P, std::vector<double>(kJoints, 2.0));
    calib.epsilon = 0.01;
    calib.n_cal = 1000;
  }

  Pipeline make() const { return Pipeline(cfg, models, calib); }

  /// Frame index is 1-based; the timestamp advances by 1/f_cam per frame.
  StereoObservation frame(std::size_t index, bool ood = false) const {
    Pose p = pose;
    p.timestamp = static_cast<double>(index) / cfg.f_cam;
    auto obs = cm::testing::exact_observation(p, models.cam1, models.cam2, Mat2::Identity());
    if (ood) {
      obs.detections_cam1.clear();
      obs.detections_cam2.clear();
      obs.missing_human = true;
    }
    return obs;
  }
};

/// Invariants checked around every step.
void audit(const PipelineConfig& cfg, const PipelineState& before, const PipelineState& after, const StepOutput& out) {
  const std::size_t vb = before.motion.valid_count(), va = after.motion.valid_count();
  ASSERT_EQ(after.motion.size(), cfg.K_P);
  ASSERT_LE(after.history.poses.size(), cfg.K_I);
  ASSERT_EQ(after.validity.size(), after.history.poses.size());
  if (out.diagnostics.accepted) {
    ASSERT_EQ(va, cfg.K_P);
    ASSERT_TRUE(detail::last_flags_valid(after.validity, cfg.N_req));
    ASSERT_EQ(out.status, StepStatus::Nominal);
  } else if (!out.occupancies.empty()) {
    // A shift drops slot 0 and appends an invalid slot.
    ASSERT_EQ(va, vb - (before.motion.valid.front() ? 1 : 0));
  } else {
    ASSERT_EQ(va, vb);
  }
  for (std::size_t i = 0; i < after.motion.size(); ++i) {
    ASSERT_EQ(after.motion.valid[i], after.motion.poses[i].is_finite());
  }
  if (!out.occupancies.empty()) {
    ASSERT_EQ(out.occupancies.size(), cfg.K_P);
    for (std::size_t i = 0; i < cfg.K_P; ++i) {
      ASSERT_EQ(out.occupancies[i].valid, after.motion.valid[i]);
      for (const auto& s : out.occupancies[i].occupancy.spheres) {
        // Nothing finite is ever published from an invalid slot.
        ASSERT_EQ(std::isfinite(s.radius), out.occupancies[i].valid);
      }
    }
  }
}

Pipeline audited(const Rig& rig) {
  Pipeline p = rig.make();
  const PipelineConfig cfg = rig.cfg;
  p.set_audit_hook([cfg](const PipelineState& b, const PipelineState& a, const StepOutput& o) { audit(cfg, b, a, o); });
  return p;
}

}  // namespace

TEST(PipelineTrace, WarmUpThenNominal) {
  Rig rig;
  Pipeline p = audited(rig);
  for (std::size_t k = 1; k <= 100; ++k) {
    const auto out = p.step(rig.frame(k));
    if (k < 50) {
      ASSERT_EQ(out.status, StepStatus::WarmingUp) << k;
      ASSERT_TRUE(out.occupancies.empty());
    } else {
      ASSERT_EQ(out.status, StepStatus::Nominal) << k;
      ASSERT_EQ(p.state().motion.valid_count(), rig.cfg.K_P);
      ASSERT_TRUE(out.diagnostics.accepted);
    }
  }
}

TEST(PipelineTrace, SingleOodRecoveryAfterNreq) {
  Rig rig;
  Pipeline p = audited(rig);
  for (std::size_t k = 1; k <= 59; ++k) p.step(rig.frame(k));
  const Pose m0 = p.state().motion.poses.front();
  const auto at60 = p.step(rig.frame(60, true));
  EXPECT_EQ(at60.status, StepStatus::AwaitingRecovery);
  EXPECT_FALSE(p.state().validity.back());
  EXPECT_EQ(p.state().history.poses.back().joints, m0.joints);  // H received M[0]
  EXPECT_EQ(p.state().motion.valid_count(), rig.cfg.K_P - 1);
  EXPECT_EQ(p.step(rig.frame(61)).status, StepStatus::AwaitingRecovery);
  EXPECT_EQ(p.step(rig.frame(62)).status, StepStatus::AwaitingRecovery);
  EXPECT_EQ(p.state().motion.valid_count(), rig.cfg.K_P - 3);
  const auto at63 = p.step(rig.frame(63));
  EXPECT_EQ(at63.status, StepStatus::Nominal);
  EXPECT_TRUE(at63.diagnostics.accepted);
  EXPECT_EQ(p.state().motion.valid_count(), rig.cfg.K_P);
}

TEST(PipelineTrace, KpOodFramesExhaustBuffer) {
  Rig rig;
  Pipeline p = audited(rig);
  for (std::size_t k = 1; k <= 59; ++k) p.step(rig.frame(k));
  StepOutput out;
  for (std::size_t i = 0; i < rig.cfg.K_P; ++i) {
    out = p.step(rig.frame(60 + i, true));
    ASSERT_EQ(p.state().motion.valid_count(), rig.cfg.K_P - 1 - i);
  }
  EXPECT_EQ(p.state().motion.valid_count(), 0u);
  ASSERT_EQ(out.occupancies.size(), rig.cfg.K_P);
  for (const auto& o : out.occupancies) EXPECT_FALSE(o.valid);
}

TEST(PipelineTrace, SentinelAfterExhaustionBlocksForKi) {
  Rig rig;
  Pipeline p = audited(rig);
  std::size_t k = 1;
  for (; k <= 59; ++k) p.step(rig.frame(k));
  for (std::size_t i = 0; i < rig.cfg.K_P; ++i, ++k) p.step(rig.frame(k, true));
  // M is empty: the next OOD frame buffers an all-NaN pose and skips prediction.
  const auto s = p.step(rig.frame(k++, true));
  EXPECT_EQ(s.status, StepStatus::PoseOod);
  EXPECT_TRUE(s.diagnostics.sentinel_appended);
  EXPECT_FALSE(s.diagnostics.score_mot.has_value());
  EXPECT_EQ(p.state().sentinels_in_history, 1u);
  // The sentinel leaves H after K_I further frames; only then is a prediction accepted.
  for (std::size_t i = 1; i < rig.cfg.K_I; ++i, ++k) {
    const auto out = p.step(rig.frame(k));
    ASSERT_EQ(out.status, StepStatus::AwaitingRecovery) << i;
    ASSERT_FALSE(out.diagnostics.accepted);
  }
  const auto out = p.step(rig.frame(k));
  EXPECT_EQ(p.state().sentinels_in_history, 0u);
  EXPECT_EQ(out.status, StepStatus::Nominal);
}

TEST(PipelineTrace, ColdStartOodDiscarded) {
  Rig rig;
  Pipeline p = audited(rig);
  for (std::size_t k = 1; k <= 9; ++k) p.step(rig.frame(k));
  const auto out = p.step(rig.frame(10, true));
  EXPECT_EQ(out.status, StepStatus::PoseOod);
  EXPECT_TRUE(out.diagnostics.cold_start_discard);
  EXPECT_TRUE(out.occupancies.empty());
  EXPECT_EQ(p.state().history.poses.size(), 9u);
  // Warm-up completes one frame later than without the OOD frame.
  for (std::size_t k = 11; k <= 50; ++k) ASSERT_EQ(p.step(rig.frame(k)).status, StepStatus::WarmingUp) << k;
  EXPECT_EQ(p.step(rig.frame(51)).status, StepStatus::Nominal);
}

TEST(PipelineTrace, NreqEqualKiBlocksForKiSteps) {
  Rig rig(50);
  Pipeline p = audited(rig);
  std::size_t k = 1;
  for (; k <= 59; ++k) p.step(rig.frame(k));
  p.step(rig.frame(k++, true));
  std::size_t blocked = 1;
  while (!p.step(rig.frame(k++)).diagnostics.accepted) ++blocked;
  EXPECT_EQ(blocked, rig.cfg.K_I);
}

TEST(Pipeline, NoOodMeansNominalForever) {
  Rig rig;
  Pipeline p = audited(rig);
  for (std::size_t k = 1; k <= 400; ++k) {
    const auto out = p.step(rig.frame(k));
    if (k >= 50) {
      ASSERT_EQ(out.status, StepStatus::Nominal);
    }
  }
}

TEST(Pipeline, PublishedSphereRadius) {
  Rig rig;
  Pipeline p = rig.make();
  StepOutput out;
  for (std::size_t k = 1; k <= 50; ++k) out = p.step(rig.frame(k));
  const auto& m = p.state().motion;
  for (std::size_t i = 0; i < rig.cfg.K_P; ++i) {
    for (std::size_t j = 0; j < kJoints; ++j) {
      const auto& s = out.occupancies[i].occupancy.spheres[j];
      EXPECT_NEAR(s.radius, 2.0 * std::sqrt(lambda_max(m.covs[i].covs[j])) + rig.cfg.padding, 1e-12);
      EXPECT_EQ(s.center, m.poses[i].joints[j]);
      EXPECT_EQ(s.time, m.poses[i].timestamp);
    }
  }
}

TEST(Pipeline, ShiftedSlotsKeepTheirHorizonAlpha) {
  Rig rig;
  for (std::size_t k = 0; k < rig.cfg.K_P; ++k) {
    for (std::size_t j = 0; j < kJoints; ++j) rig.calib.alpha[k][j] = 1.0 + static_cast<double>(k);
  }
  Pipeline p = rig.make();
  for (std::size_t k = 1; k <= 59; ++k) p.step(rig.frame(k));
  const auto out = p.step(rig.frame(60, true));
  const auto& m = p.state().motion;
  // Slot 0 now holds the former horizon-2 prediction.
  const double expected = 2.0 * std::sqrt(lambda_max(m.covs[0].covs[0])) + rig.cfg.padding;
  EXPECT_NEAR(out.occupancies[0].occupancy.spheres[0].radius, expected, 1e-12);
}

TEST(Pipeline, MotionOodShiftsBuffer) {
  Rig rig;
  rig.models.motion_scorer = [](const MotionHistory&) { return OodScore{10.0, OodSource::Motion}; };
  rig.models.tau_mot = OodThreshold{1.0, 0.05, 100};
  Pipeline p = audited(rig);
  for (std::size_t k = 1; k <= 49; ++k) p.step(rig.frame(k));
  const auto out = p.step(rig.frame(50));
  EXPECT_EQ(out.status, StepStatus::MotionOod);
  EXPECT_EQ(*out.diagnostics.score_mot, 10.0);
  EXPECT_TRUE(out.diagnostics.buffer_valid);
  EXPECT_FALSE(out.diagnostics.accepted);
}

TEST(Pipeline, PoseScorerThreshold) {
  Rig rig;
  rig.models.pose_scorer = [](const StereoObservation& o, int cam) {
    return OodScore{cam == 1 ? o.features_cam1.at(0) : o.features_cam2.at(0), OodSource::Pose2D};
  };
  rig.models.tau_2d = OodThreshold{1.0, 0.05, 100};
  auto feat = [&](std::size_t k, double f1, double f2) {
    auto o = rig.frame(k);
    o.features_cam1 = {f1};
    o.features_cam2 = {f2};
    return o;
  };
  Pipeline p = rig.make();
  EXPECT_TRUE(p.step(feat(1, 1.0, 5.0)).diagnostics.pose_in_distribution);  // score == tau is ID
  EXPECT_FALSE(p.step(feat(2, 1.5, 0.0)).diagnostics.pose_in_distribution);
  rig.cfg.score_both_cameras = true;
  Pipeline both = rig.make();
  EXPECT_FALSE(both.step(feat(1, 1.0, 5.0)).diagnostics.pose_in_distribution);
}

TEST(Pipeline, DegenerateJointFallsBack) {
  Rig rig;
  Pipeline p = rig.make();
  p.step(rig.frame(1));
  auto obs = rig.frame(2);
  obs.detections_cam1[1].mean = Vec2(kNaN, kNaN);
  const auto out = p.step(obs);
  ASSERT_EQ(out.diagnostics.fallback_joints, std::vector<std::size_t>{1});
  EXPECT_TRUE(out.diagnostics.pose_in_distribution);
  const auto& h = p.state().history;
  EXPECT_EQ(h.poses.back().joints[1], h.poses[0].joints[1]);
  EXPECT_EQ(h.covs.back().covs[1], 0.25 * 0.25 * Mat3::Identity());
}

TEST(Pipeline, DegenerateWithoutPreviousPoseIsOod) {
  Rig rig;
  Pipeline p = rig.make();
  auto obs = rig.frame(1);
  obs.detections_cam2[0].mean = Vec2(kNaN, 1.0);
  const auto out = p.step(obs);
  EXPECT_FALSE(out.diagnostics.pose_in_distribution);
  EXPECT_TRUE(out.diagnostics.cold_start_discard);
  EXPECT_EQ(out.diagnostics.score_2d, kMissingHumanScore);
}

TEST(Pipeline, Errors) {
  Rig rig;
  PipelineModels none = rig.models;
  none.predictor.reset();
  EXPECT_THROW(Pipeline(rig.cfg, none, rig.calib), Error);
  PipelineState state = PipelineState::initial(rig.cfg, kJoints);
  try {
    step(state, rig.frame(1), rig.cfg, none, rig.calib);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotFitted);
  }
  ConformalCalibration bad = rig.calib;
  bad.alpha.pop_back();
  try {
    step(state, rig.frame(1), rig.cfg, rig.models, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotCalibrated);
  }
  PipelineConfig cfg = rig.cfg;
  cfg.N_req = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.N_req = 51;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = rig.cfg;
  cfg.f_cam = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Pipeline, RandomStreamInvariantsProperty) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rig rig(1 + seed * 2);
    Gen g(seed);
    Pipeline p = audited(rig);
    for (std::size_t k = 1; k <= 1500; ++k) {
      const bool ood = g.uniform(0.0, 1.0) < 0.15;
      const auto out = p.step(rig.frame(k, ood));
      if (out.diagnostics.accepted) {
        ASSERT_TRUE(detail::last_flags_valid(p.state().validity, rig.cfg.N_req));
      }
    }
  }
}

TEST(Pipeline, BitIdenticalAcrossRuns) {
  auto run = [] {
    Rig rig;
    Gen g(99);
    Pipeline p = rig.make();
    std::string log;
    for (std::size_t k = 1; k <= 300; ++k) {
      auto obs = rig.frame(k, g.uniform(0.0, 1.0) < 0.1);
      for (auto& d : obs.detections_cam1) d.mean += g.vec2();
      log += io::to_json(p.step(obs), k).dump() + "\n";
    }
    return log;
  };
  EXPECT_EQ(run(), run());
}

TEST(InvalidFraction, ClosedForm) {
  const auto none = expected_invalid_fraction(0.05, 50, OodHandling::None);
  EXPECT_NEAR(none.value, 0.9231, 1e-4);
  EXPECT_NEAR(none.value, 1.0 - std::pow(0.95, 50), 1e-15);
  EXPECT_EQ(expected_invalid_fraction(0.0, 50, OodHandling::None).value, 0.0);
  EXPECT_EQ(expected_invalid_fraction(0.0, 7, OodHandling::Reuse, 3, 10000).value, 0.0);
}

TEST(InvalidFraction, ReuseMatchesMarkovChain) {
  const auto reuse = expected_invalid_fraction(0.05, 50, OodHandling::Reuse, 3, 1'000'000, 7);
  const double oracle = cm::testing::markov_invalid_fraction(0.05, 3);
  EXPECT_LT(reuse.value, 1.0 - std::pow(0.95, 50));
  EXPECT_GT(reuse.std_error, 0.0);
  EXPECT_NEAR(reuse.value, oracle, 3.0 * reuse.std_error);
  EXPECT_EQ(reuse.steps, 1'000'000u);
}

TEST(InvalidFraction, ReuseWithNreqKiMatchesNone) {
  const auto reuse = expected_invalid_fraction(0.05, 50, OodHandling::Reuse, 50, 1'000'000, 8);
  EXPECT_NEAR(reuse.value, expected_invalid_fraction(0.05, 50, OodHandling::None).value, 3.0 * reuse.std_error);
  EXPECT_NEAR(cm::testing::markov_invalid_fraction(0.05, 50), 1.0 - std::pow(0.95, 50), 1e-12);
}

TEST(InvalidFraction, Errors) {
  for (double p : {-0.1, 1.5, kNaN}) {
    try {
      expected_invalid_fraction(p, 50, OodHandling::None);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidProbability);
    }
  }
  EXPECT_THROW(expected_invalid_fraction(0.05, 50, OodHandling::Reuse, 51), Error);
}

TEST(InvalidFraction, Deterministic) {
  const auto a = expected_invalid_fraction(0.1, 20, OodHandling::Reuse, 5, 100000, 3);
  const auto b = expected_invalid_fraction(0.1, 20, OodHandling::Reuse, 5, 100000, 3);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.std_error, b.std_error);
}
