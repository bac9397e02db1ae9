#include "support/oracles.hpp"

#include <gtest/gtest.h>

using namespace cm;
using cm::testing::Gen;

namespace {
std::vector<double> one_to(int n) {
  std::vector<double> s;
  for (int i = n; i >= 1; --i) s.push_back(i);
  return s;
}
}  // namespace

TEST(CalibrateThreshold, Examples) {
  EXPECT_EQ(calibrate_threshold(one_to(100), 0.05).tau, 96.0);
  EXPECT_EQ(calibrate_threshold(std::vector<double>(40, 2.5), 0.05).tau, 2.5);
  const auto t = calibrate_threshold(one_to(3), 0.5);
  EXPECT_EQ(t.tau, 2.0);
  EXPECT_EQ(t.n_cal, 3u);
  EXPECT_EQ(t.epsilon_ood, 0.5);
}

TEST(CalibrateThreshold, TooFewScores) {
  try {
    calibrate_threshold(one_to(18), 0.05);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientCalibrationData);
  }
  EXPECT_NO_THROW(calibrate_threshold(one_to(19), 0.05));
}

TEST(CalibrateThreshold, CalibrationDataFlaggedAtMostEpsilonProperty) {
  Gen g(1);
  for (int rep = 0; rep < 200; ++rep) {
    const double eps = g.uniform(0.01, 0.3);
    const std::size_t n = static_cast<std::size_t>(std::ceil((1.0 - eps) / eps)) + g.index(1000);
    std::vector<double> s(n);
    for (auto& v : s) v = g.normal();
    const auto t = calibrate_threshold(s, eps);
    std::size_t flagged = 0;
    for (double v : s) flagged += is_ood(OodScore{v, OodSource::Pose2D}, t) ? 1 : 0;
    ASSERT_LE(static_cast<double>(flagged) / static_cast<double>(n), eps);
  }
}

TEST(CalibrateThreshold, FreshDataRateWithinBinomialBounds) {
  Gen g(2);
  const double eps = 0.05;
  std::vector<double> cal(5000);
  for (auto& v : cal) v = g.normal();
  const auto t = calibrate_threshold(cal, eps);
  const int n = 100000;
  int flagged = 0;
  for (int i = 0; i < n; ++i) flagged += is_ood(OodScore{g.normal(), OodSource::Motion}, t) ? 1 : 0;
  // Binomial 3 sigma on the test draws plus the calibration quantile's own spread.
  const double sigma_test = std::sqrt(eps * (1 - eps) / n);
  const double sigma_cal = std::sqrt(eps * (1 - eps) / 5000.0);
  EXPECT_NEAR(static_cast<double>(flagged) / n, eps, 3.0 * (sigma_test + sigma_cal));
}

TEST(CalibrateThreshold, MonotoneInEpsilonProperty) {
  Gen g(3);
  std::vector<double> s(2000);
  for (auto& v : s) v = g.normal();
  double previous = std::numeric_limits<double>::infinity();
  for (double eps = 0.01; eps < 0.9; eps += 0.01) {
    const double tau = calibrate_threshold(s, eps).tau;
    ASSERT_LE(tau, previous);
    previous = tau;
  }
}

TEST(IsOod, Boundary) {
  const OodThreshold t{1.5, 0.05, 100};
  EXPECT_FALSE(is_ood(OodScore{1.5, OodSource::Pose2D}, t));
  EXPECT_TRUE(is_ood(OodScore{std::nextafter(1.5, 2.0), OodSource::Pose2D}, t));
  EXPECT_TRUE(is_ood(OodScore{1.5 + 1e-9, OodSource::Pose2D}, t));
  EXPECT_FALSE(is_ood(OodScore{std::numeric_limits<double>::lowest(), OodSource::Pose2D}, t));
  EXPECT_TRUE(is_ood(OodScore{kMissingHumanScore, OodSource::Pose2D}, t));
  EXPECT_FALSE(is_ood(OodScore{kMissingHumanScore, OodSource::Pose2D}, OodThreshold{}));
}

TEST(Mahalanobis, Examples) {
  Eigen::VectorXd mu(2), x(2);
  mu << 1.0, -1.0;
  EXPECT_EQ(score_mahalanobis(mu, mu, Eigen::MatrixXd::Identity(2, 2)).value, 0.0);
  x << 4.0, 3.0;
  EXPECT_NEAR(score_mahalanobis(x, mu, Eigen::MatrixXd::Identity(2, 2)).value, 5.0, 1e-15);
  EXPECT_EQ(score_mahalanobis(x, mu, Eigen::MatrixXd::Identity(2, 2), OodSource::Motion).source, OodSource::Motion);
}

TEST(Mahalanobis, MatchesExplicitInverse) {
  Gen g(4);
  for (int i = 0; i < 200; ++i) {
    const Mat3 c = g.spd(0.5);
    const Vec3 x = g.vec3(), mu = g.vec3();
    const double oracle = std::sqrt((x - mu).dot(cm::testing::explicit_inverse(c) * (x - mu)));
    ASSERT_NEAR(score_mahalanobis(x, mu, c).value, oracle, 1e-10);
  }
}

TEST(Mahalanobis, Errors) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 0.0, 0.0, -1.0;
  try {
    score_mahalanobis(x, x, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotPositiveDefinite);
  }
  EXPECT_THROW(score_mahalanobis(x, Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(2, 2)), Error);
}

TEST(Mahalanobis, ReferenceFit) {
  Gen g(5);
  std::vector<Eigen::VectorXd> samples;
  for (int i = 0; i < 20000; ++i) {
    Eigen::VectorXd v(2);
    v << 1.0 + 2.0 * g.normal(), -3.0 + 0.5 * g.normal();
    samples.push_back(v);
  }
  const auto ref = MahalanobisReference::fit(samples);
  EXPECT_NEAR(ref.mean(0), 1.0, 0.05);
  EXPECT_NEAR(ref.cov(0, 0), 4.0, 0.15);
  EXPECT_NEAR(ref.cov(1, 1), 0.25, 0.01);
  EXPECT_THROW(MahalanobisReference::fit(std::span(samples).first(1)), Error);
}

TEST(PoseScorer, MissingHumanAndFeatures) {
  std::vector<Eigen::VectorXd> samples;
  Gen g(6);
  for (int i = 0; i < 100; ++i) samples.push_back(Eigen::Vector2d(g.normal(), g.normal()));
  const auto scorer = make_pose_scorer(MahalanobisReference::fit(samples));
  StereoObservation obs;
  EXPECT_EQ(scorer(obs, 1).value, 0.0);  // no features
  obs.features_cam1 = {0.0, 0.0};
  obs.features_cam2 = {30.0, 0.0};
  EXPECT_LT(scorer(obs, 1).value, 1.0);
  EXPECT_GT(scorer(obs, 2).value, 10.0);
  obs.missing_human = true;
  EXPECT_EQ(scorer(obs, 1).value, kMissingHumanScore);
  EXPECT_EQ(make_pose_scorer()(obs, 2).value, kMissingHumanScore);
}

TEST(MotionScorer, FeaturesAndDefault) {
  PredictorConfig c;
  c.J = 1;
  MotionHistory h;
  h.frame_rate = 25.0;
  for (std::size_t i = 0; i < c.K_I; ++i) {
    h.poses.push_back(Pose{{Vec3(0.04 * static_cast<double>(i), 0, 0)}, static_cast<double>(i) / 25.0});
    h.covs.push_back(PoseCovariances::isotropic(1, 1e-4));
  }
  const auto f = motion_features(h);
  EXPECT_NEAR(f(0), 1.0, 1e-9);
  EXPECT_NEAR(f(1), 1.0, 1e-9);
  EXPECT_NEAR(f(2), 0.0, 1e-6);
  EXPECT_EQ(make_motion_scorer()(h).value, 0.0);
  EXPECT_EQ(make_motion_scorer()(h).source, OodSource::Motion);
}
