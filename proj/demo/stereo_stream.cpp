// Walks a synthetic person past a stereo rig: fit a predictor, calibrate the
// conformal radii, then stream noisy observations with occasional occlusions
// through the pipeline and print what gets published.
//
// With a directory argument it also writes cameras.json, calibration.json,
// config.json and observations.jsonl there, ready for `cmpose run`.

#include "cm/cm.hpp"

#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

using namespace cm;

int main(int argc, char** argv) {
  constexpr std::size_t kJoints = 5;
  harness::SyntheticParams params;
  params.joints = kJoints;
  params.sequences = 6;
  params.frames = 250;
  params.noise_sigma = 0.01;

  PredictorConfig pc;
  pc.J = kJoints;
  const auto train = harness::generate_synthetic(harness::SyntheticKind::Sinusoidal, params, 1);
  const auto ridge = std::make_shared<RidgeDctPredictor>(fit_ridge_dct(harness::make_windows(train, 50, 10), pc));

  const auto cal_ds = harness::generate_synthetic(harness::SyntheticKind::Sinusoidal, params, 2);
  const auto calib = calibrate(harness::score_table(harness::predict_samples(*ridge, cal_ds)), 0.05);
  std::printf("calibrated on %zu windows, alpha at 40 ms %.2f, at 400 ms %.2f\n", calib.n_cal, calib.alpha[0][0],
              calib.alpha[9][0]);

  auto [c1, c2] = harness::default_stereo_rig();
  PipelineConfig cfg;
  cfg.epsilon = 0.05;
  PipelineModels models;
  models.cam1 = c1;
  models.cam2 = c2;
  models.predictor = ridge;
  Pipeline pipeline(cfg, models, calib);

  params.sequences = 1;
  params.frames = 260;
  const auto test = harness::generate_synthetic(harness::SyntheticKind::Sinusoidal, params, 3);
  std::mt19937_64 rng(4);
  std::ostringstream observations;
  StepStatus last = StepStatus::WarmingUp;
  for (std::size_t k = 0; k < test.sequences[0].size(); ++k) {
    const bool occluded = (k >= 90 && k < 93) || (k >= 140 && k < 155);
    const auto obs = harness::make_observation(test.sequences[0].truth[k], occluded, c1, c2, 1.0, rng);
    observations << io::to_json(obs).dump() << '\n';
    const auto out = pipeline.step(obs);
    if (out.status != last || k + 1 == test.sequences[0].size()) {
      std::size_t valid = 0;
      for (const auto& o : out.occupancies) valid += o.valid ? 1 : 0;
      std::printf("frame %3zu  %-18s valid slots %2zu/10", k + 1, to_string(out.status), valid);
      if (!out.occupancies.empty() && out.occupancies[0].valid) {
        const auto& s = out.occupancies[0].occupancy.spheres[0];
        std::printf("  joint 0 sphere r=%.3f m at (%.2f, %.2f, %.2f)", s.radius, s.center.x(), s.center.y(),
                    s.center.z());
      }
      std::printf("\n");
      last = out.status;
    }
  }

  if (argc > 1) {
    const std::filesystem::path dir = argv[1];
    std::filesystem::create_directories(dir);
    io::write_text_file((dir / "cameras.json").string(), nlohmann::json::array({io::to_json(c1), io::to_json(c2)}).dump(2));
    io::write_text_file((dir / "calibration.json").string(), io::to_json(calib).dump(2));
    io::write_text_file((dir / "model.json").string(), io::to_json(ridge->model()).dump());
    const nlohmann::json config{{"K_I", 50},          {"K_P", 10},
                                {"N_req", 3},         {"epsilon", 0.05},
                                {"J", kJoints},       {"predictor", "ridge_dct"},
                                {"model", (dir / "model.json").string()},
                                {"cameras", (dir / "cameras.json").string()},
                                {"calibration", (dir / "calibration.json").string()}};
    io::write_text_file((dir / "config.json").string(), config.dump(2));
    io::write_text_file((dir / "observations.jsonl").string(), observations.str());
    std::printf("wrote run inputs to %s\n", dir.string().c_str());
  }
  return 0;
}
