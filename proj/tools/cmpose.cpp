// cmpose: command-line front end for the library.

#include "cm/cm.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>

using namespace cm;
using nlohmann::json;

namespace {

struct PredictorOptions {
  std::string kind = "last_frame";
  std::string model;
  PredictorConfig cfg;
};

void add_predictor_options(CLI::App* app, PredictorOptions& p) {
  app->add_option("--predictor", p.kind, "last_frame, constant_velocity or ridge_dct")->capture_default_str();
  app->add_option("--model", p.model, "fitted ridge_dct model (JSON)");
  app->add_option("--K_I", p.cfg.K_I, "history length")->capture_default_str();
  app->add_option("--K_P", p.cfg.K_P, "prediction horizon")->capture_default_str();
  app->add_option("--sigma-v", p.cfg.sigma_v, "baseline covariance growth, m/s")->capture_default_str();
}

std::shared_ptr<const MotionPredictor> load_predictor(const PredictorOptions& p, std::size_t joints) {
  PredictorConfig cfg = p.cfg;
  cfg.J = joints;
  const auto kind = parse_predictor_kind(p.kind);
  if (kind == PredictorKind::RidgeDCT) {
    if (p.model.empty()) throw Error(ErrorKind::ModelNotFitted, "ridge_dct needs --model");
    return std::make_shared<RidgeDctPredictor>(io::ridge_from_json(io::read_json_file(p.model), cfg.K_I, cfg.K_P, cfg.J));
  }
  return make_baseline_predictor(kind, cfg);
}

std::size_t joint_count(const harness::MotionDataset& ds) {
  for (const auto& s : ds.sequences) {
    if (!s.truth.empty()) return s.truth.front().size();
  }
  throw Error(ErrorKind::InsufficientData, "dataset is empty");
}

struct ReportOptions {
  std::string json_path;
  std::string csv_path;
};

void add_report_options(CLI::App* app, ReportOptions& r) {
  app->add_option("--json", r.json_path, "write the report as JSON");
  app->add_option("--csv", r.csv_path, "write the report as CSV (method,metric,value)");
}

void emit(const std::vector<harness::MetricReport>& reports, const ReportOptions& r, json extra = json::object()) {
  json doc = extra;
  doc["reports"] = json::array();
  for (const auto& m : reports) doc["reports"].push_back(harness::to_json(m));
  if (!r.json_path.empty()) io::write_text_file(r.json_path, doc.dump(2) + "\n");
  if (!r.csv_path.empty()) io::write_text_file(r.csv_path, harness::to_csv(reports));
  if (r.json_path.empty() && r.csv_path.empty()) std::cout << harness::to_csv(reports);
}

std::vector<double> read_score_list(const std::string& path) {
  const json j = io::read_json_file(path);
  const json& arr = j.is_object() ? j.at("scores") : j;
  return arr.get<std::vector<double>>();
}

// ---------------------------------------------------------------------------

struct SimulateOptions {
  std::string kind = "sinusoidal";
  harness::SyntheticParams params;
  std::uint64_t seed = 1;
  std::string output;
};

int cmd_simulate(const SimulateOptions& o) {
  const auto ds = harness::generate_synthetic(harness::parse_synthetic_kind(o.kind), o.params, o.seed);
  io::write_text_file(o.output, harness::export_jsonl(ds));
  return 0;
}

struct FitOptions {
  std::string train;
  std::string output;
  PredictorConfig cfg;
};

int cmd_fit(const FitOptions& o) {
  const auto ds = harness::ingest_jsonl(o.train);
  PredictorConfig cfg = o.cfg;
  cfg.J = joint_count(ds);
  const auto model = fit_ridge_dct(harness::make_windows(ds, cfg.K_I, cfg.K_P), cfg);
  io::write_text_file(o.output, io::to_json(model.model()).dump() + "\n");
  return 0;
}

struct CalibrateOptions {
  std::string scores;
  std::string data;
  PredictorOptions predictor;
  double epsilon = 0.01;
  std::string pose_ood_scores;
  std::string motion_ood_scores;
  double epsilon_ood = 0.05;
  std::string output;
};

int cmd_calibrate(const CalibrateOptions& o) {
  io::CalibrationBundle b;
  if (!o.scores.empty()) {
    const json j = io::read_json_file(o.scores);
    b.conformal = calibrate((j.is_object() ? j.at("scores") : j).get<ScoreTable>(), o.epsilon);
  } else {
    const auto ds = harness::ingest_jsonl(o.data);
    const auto pred = load_predictor(o.predictor, joint_count(ds));
    b.conformal = calibrate(harness::score_table(harness::predict_samples(*pred, ds)), o.epsilon);
  }
  if (!o.pose_ood_scores.empty()) b.tau_2d = calibrate_threshold(read_score_list(o.pose_ood_scores), o.epsilon_ood);
  if (!o.motion_ood_scores.empty()) {
    b.tau_mot = calibrate_threshold(read_score_list(o.motion_ood_scores), o.epsilon_ood);
  }
  io::write_text_file(o.output, io::to_json(b).dump(2) + "\n");
  return 0;
}

struct RunOptions {
  std::string config;
  std::string input;
  std::string output;
};

int cmd_run(const RunOptions& o) {
  const io::RunConfig rc = io::run_config_from_json(io::read_json_file(o.config));
  if (rc.cameras.empty()) throw Error(ErrorKind::SchemaError, "config needs 'cameras'");
  if (rc.calibration.empty()) throw Error(ErrorKind::SchemaError, "config needs 'calibration'");
  PipelineModels models;
  std::tie(models.cam1, models.cam2) = io::cameras_from_json(io::read_json_file(rc.cameras));
  const auto bundle = io::bundle_from_json(io::read_json_file(rc.calibration));
  PredictorOptions po;
  po.kind = rc.predictor;
  po.model = rc.model;
  po.cfg.K_I = rc.pipeline.K_I;
  po.cfg.K_P = rc.pipeline.K_P;
  po.cfg.sigma_v = rc.sigma_v;
  po.cfg.dct_cutoff = rc.dct_cutoff;
  models.predictor = load_predictor(po, rc.J);
  if (bundle.tau_2d) models.tau_2d = *bundle.tau_2d;
  if (bundle.tau_mot) models.tau_mot = *bundle.tau_mot;
  Pipeline pipeline(rc.pipeline, models, bundle.conformal);

  std::ifstream in(o.input);
  if (!in) throw Error(ErrorKind::ParseError, "cannot open " + o.input);
  std::ofstream out(o.output);
  if (!out) throw Error(ErrorKind::ParseError, "cannot write " + o.output);
  std::string line;
  std::uint64_t step = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    StereoObservation obs;
    try {
      obs = io::observation_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::ParseError, o.input + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.kind(), o.input + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out << io::to_json(pipeline.step(obs), ++step).dump() << '\n';
  }
  return 0;
}

struct EvaluateOptions {
  std::string data;
  PredictorOptions predictor;
  bool root_relative = false;
  ReportOptions report;
};

int cmd_evaluate(const EvaluateOptions& o) {
  const auto ds = harness::ingest_jsonl(o.data);
  const auto pred = load_predictor(o.predictor, joint_count(ds));
  const auto windows = harness::make_windows(ds, pred->config().K_I, pred->config().K_P);
  emit({harness::evaluate_predictor(*pred, windows, ds.frame_rate, o.root_relative)}, o.report);
  return 0;
}

struct Table2Options {
  std::string cal;
  std::string test;
  std::string kind = "sinusoidal";
  harness::SyntheticParams params;
  std::uint64_t seed = 1;
  PredictorOptions predictor;
  double oracle_sigma = 0.0;
  double epsilon = 0.01;
  double v_max = kIsoMaxSpeed;
  bool per_pose = false;
  ReportOptions report;
};

int cmd_table2(const Table2Options& o) {
  harness::MotionDataset cal, test;
  if (!o.cal.empty() || !o.test.empty()) {
    if (o.cal.empty() || o.test.empty()) throw Error(ErrorKind::InvalidParams, "--cal and --test go together");
    cal = harness::ingest_jsonl(o.cal);
    test = harness::ingest_jsonl(o.test);
  } else {
    const auto kind = harness::parse_synthetic_kind(o.kind);
    cal = harness::generate_synthetic(kind, o.params, o.seed);
    test = harness::generate_synthetic(kind, o.params, o.seed + 1);
  }
  const auto mode = o.per_pose ? harness::CoverageMode::PerPose : harness::CoverageMode::PerJoint;
  harness::Table2Result r;
  if (o.oracle_sigma > 0.0) {
    const auto& c = o.predictor.cfg;
    r = harness::run_table2_experiment(harness::oracle_samples(cal, c.K_I, c.K_P, o.oracle_sigma, o.seed + 2),
                                       harness::oracle_samples(test, c.K_I, c.K_P, o.oracle_sigma, o.seed + 3),
                                       o.epsilon, test.frame_rate, o.v_max, mode);
  } else {
    const auto pred = load_predictor(o.predictor, joint_count(cal));
    r = harness::run_table2_experiment(*pred, cal, test, o.epsilon, o.v_max, mode);
  }
  emit({r.conformal, r.iso}, o.report, json{{"calibration", io::to_json(r.calibration)}});
  return 0;
}

struct Table3Options {
  std::string data;
  harness::StreamSpec spec;
  std::string kind = "sinusoidal";
  std::vector<std::size_t> n_req{3, 10, 50};
  PredictorOptions predictor;
  double epsilon = 0.01;
  double pixel_sigma = 1.0;
  ReportOptions report;
};

int cmd_table3(Table3Options o) {
  o.spec.kind = harness::parse_synthetic_kind(o.kind);
  harness::MotionDataset ds;
  std::size_t joints = o.spec.params.joints;
  if (!o.data.empty()) {
    ds = harness::ingest_jsonl(o.data);
    joints = joint_count(ds);
  }
  const auto pred = load_predictor(o.predictor, joints);
  auto [c1, c2] = harness::default_stereo_rig();
  harness::SyntheticParams cal_params = o.spec.params;
  cal_params.ood_probability = 0.0;
  harness::Table3Models models{c1, c2, pred,
                               harness::calibrate_on_synthetic(*pred, o.spec.kind, cal_params, o.epsilon, o.spec.seed + 1),
                               o.pixel_sigma, o.spec.seed + 2};
  PipelineConfig base;
  base.K_I = pred->config().K_I;
  base.K_P = pred->config().K_P;
  base.epsilon = o.epsilon;
  const auto reports = o.data.empty() ? harness::run_table3_stream(o.spec, o.n_req, base, models)
                                      : harness::run_table3_experiment(ds, o.n_req, base, models);
  emit(reports, o.report);
  return 0;
}

void add_synthetic_options(CLI::App* app, std::string& kind, harness::SyntheticParams& p) {
  app->add_option("--kind", kind, "static, linear, sinusoidal or piecewise")->capture_default_str();
  app->add_option("--joints", p.joints)->capture_default_str();
  app->add_option("--sequences", p.sequences)->capture_default_str();
  app->add_option("--frames", p.frames)->capture_default_str();
  app->add_option("--rate", p.frame_rate, "frames per second")->capture_default_str();
  app->add_option("--amplitude", p.amplitude, "sinusoid amplitude, m")->capture_default_str();
  app->add_option("--frequency", p.frequency, "sinusoid frequency, Hz")->capture_default_str();
  app->add_option("--speed", p.speed, "linear and piecewise speed, m/s")->capture_default_str();
  app->add_option("--noise", p.noise_sigma, "observation noise std, m")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-aware human pose pipeline tools"};
  app.require_subcommand(1);

  SimulateOptions sim;
  auto* simulate = app.add_subcommand("simulate", "generate a synthetic JSON-lines dataset");
  add_synthetic_options(simulate, sim.kind, sim.params);
  simulate->add_option("--ood", sim.params.ood_probability, "per-frame OOD probability")->capture_default_str();
  simulate->add_option("--seed", sim.seed)->capture_default_str();
  simulate->add_option("--output,-o", sim.output)->required();

  FitOptions fit;
  auto* fit_cmd = app.add_subcommand("fit", "fit the ridge DCT predictor on a dataset");
  fit_cmd->add_option("--train", fit.train)->required();
  fit_cmd->add_option("--output,-o", fit.output)->required();
  fit_cmd->add_option("--K_I", fit.cfg.K_I)->capture_default_str();
  fit_cmd->add_option("--K_P", fit.cfg.K_P)->capture_default_str();
  fit_cmd->add_option("--dct-cutoff", fit.cfg.dct_cutoff)->capture_default_str();
  fit_cmd->add_option("--ridge-mu", fit.cfg.ridge_mu)->capture_default_str();

  CalibrateOptions cal;
  auto* calibrate_cmd = app.add_subcommand("calibrate", "compute conformal quantiles and OOD thresholds");
  auto* scores_opt = calibrate_cmd->add_option("--scores", cal.scores, "score table JSON indexed [k][j][i]");
  auto* data_opt = calibrate_cmd->add_option("--data", cal.data, "calibration dataset (JSON lines)");
  scores_opt->excludes(data_opt);
  add_predictor_options(calibrate_cmd, cal.predictor);
  calibrate_cmd->add_option("--epsilon", cal.epsilon)->capture_default_str();
  calibrate_cmd->add_option("--pose-ood-scores", cal.pose_ood_scores, "in-distribution 2D pose scores");
  calibrate_cmd->add_option("--motion-ood-scores", cal.motion_ood_scores, "in-distribution motion scores");
  calibrate_cmd->add_option("--epsilon-ood", cal.epsilon_ood)->capture_default_str();
  calibrate_cmd->add_option("--output,-o", cal.output)->required();

  RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "stream observations through the pipeline");
  run_cmd->add_option("--config", run.config)->required();
  run_cmd->add_option("--input", run.input)->required();
  run_cmd->add_option("--output", run.output)->required();

  EvaluateOptions ev;
  auto* evaluate = app.add_subcommand("evaluate", "MPJPE of a predictor on a dataset");
  evaluate->add_option("--data", ev.data)->required();
  add_predictor_options(evaluate, ev.predictor);
  evaluate->add_flag("--root-relative", ev.root_relative);
  add_report_options(evaluate, ev.report);

  Table2Options t2;
  auto* table2 = app.add_subcommand("table2", "conformal sets versus the ISO baseline");
  table2->add_option("--cal", t2.cal, "calibration dataset");
  table2->add_option("--test", t2.test, "test dataset");
  add_synthetic_options(table2, t2.kind, t2.params);
  table2->add_option("--seed", t2.seed)->capture_default_str();
  add_predictor_options(table2, t2.predictor);
  table2->add_option("--oracle-sigma", t2.oracle_sigma, "use the Gaussian oracle predictor with this std")
      ->capture_default_str();
  table2->add_option("--epsilon", t2.epsilon)->capture_default_str();
  table2->add_option("--v-max", t2.v_max)->capture_default_str();
  table2->add_flag("--per-pose", t2.per_pose, "count a sample covered only if every joint is");
  add_report_options(table2, t2.report);

  Table3Options t3;
  t3.spec.params.joints = 1;
  auto* table3 = app.add_subcommand("table3", "pipeline validity rates across N_req");
  table3->add_option("--data", t3.data, "dataset with truth poses; otherwise a synthetic stream");
  add_synthetic_options(table3, t3.kind, t3.spec.params);
  table3->add_option("--steps", t3.spec.steps)->capture_default_str();
  table3->add_option("--p", t3.spec.ood_probability, "per-frame OOD probability")->capture_default_str();
  table3->add_option("--seed", t3.spec.seed)->capture_default_str();
  table3->add_option("--nreq", t3.n_req)->delimiter(',')->capture_default_str();
  add_predictor_options(table3, t3.predictor);
  table3->add_option("--epsilon", t3.epsilon)->capture_default_str();
  table3->add_option("--pixel-sigma", t3.pixel_sigma)->capture_default_str();
  add_report_options(table3, t3.report);

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(sim);
    if (fit_cmd->parsed()) return cmd_fit(fit);
    if (calibrate_cmd->parsed()) {
      if (cal.scores.empty() && cal.data.empty()) throw Error(ErrorKind::InvalidParams, "need --scores or --data");
      return cmd_calibrate(cal);
    }
    if (run_cmd->parsed()) return cmd_run(run);
    if (evaluate->parsed()) return cmd_evaluate(ev);
    if (table2->parsed()) return cmd_table2(t2);
    if (table3->parsed()) return cmd_table3(t3);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
