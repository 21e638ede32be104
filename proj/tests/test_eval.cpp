#include "stride/eval.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "stride/mppi.hpp"
#include "test_util.hpp"

namespace stride {
namespace {

using testutil::rel_err;

EnvSpec pendulum(double dt = 2e-3) {
  EnvSpec e;
  e.kind = EnvKind::Pendulum;
  e.dt = dt;
  return e;
}

TEST(Rollout, OracleSelfConsistencyIsExact) {
  EnvSpec env = pendulum();
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 1500, 0.0, 3);
  AnyModel oracle = OracleModel{env};
  RolloutReport r = eval_rollout(oracle, ds, 30, 16, ZPolicy::Zero, 1, 7);
  // the rollout replays the generator's own integrator step bit for bit
  EXPECT_LT(r.cumulative(30), 1e-8);
}

TEST(Rollout, FrozenModelErrorGrowsWithHorizon) {
  EnvSpec env = pendulum(5e-3);
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::SineSweep, 1500, 0.0, 5);
  // a Lagrangian model with zero potential and unit mass predicts constant
  // velocity; on a swinging pendulum its error must grow with the horizon
  TrainConfig cfg;
  cfg.hidden = {8};
  DelanModel frozen;
  frozen.n = 1;
  frozen.fc = feature_config_for(env);
  frozen.stats = NormStats::identity(frozen.fc);
  frozen.stats.qf_mean.assign(frozen.fc.qfeat_dim(), 0.0);
  frozen.lnn = make_lnn_params(frozen.fc, cfg.hidden, 2, 1e-4);
  std::fill(frozen.lnn.chol.flat.begin(), frozen.lnn.chol.flat.end(), 0.0);
  std::fill(frozen.lnn.pot.flat.begin(), frozen.lnn.pot.flat.end(), 0.0);
  frozen.trained_env = env;
  AnyModel any = frozen;
  RolloutReport r = eval_rollout(any, ds, 30, 16, ZPolicy::Zero, 1, 7);
  EXPECT_GT(r.cumulative(30), 10.0 * r.cumulative(1));
  for (int h = 2; h <= 30; ++h) EXPECT_GE(r.cumulative(h), r.cumulative(h - 1));
}

TEST(Rollout, ReportEmbedsDigestAndReproducesBitExactly) {
  EnvSpec env = pendulum(5e-3);
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 900, 0.0, 11);
  TrainConfig cfg;
  cfg.hidden = {8, 8};
  cfg.steps = 40;
  cfg.batch_size = 8;
  cfg.nfe_train = 2;
  cfg.seed = 3;
  StrideTrainResult tr = train_stride(ds, cfg);
  AnyModel any = tr.model;
  RolloutReport a = eval_rollout(any, ds, 10, 8, ZPolicy::Sampled, 4, 99);
  RolloutReport b = eval_rollout(any, ds, 10, 8, ZPolicy::Sampled, 4, 99);
  EXPECT_FALSE(a.config_digest.empty());
  EXPECT_EQ(a.config_digest, b.config_digest);
  for (int h = 0; h < 10; ++h) {
    EXPECT_EQ(a.per_step_rmse[h], b.per_step_rmse[h]);
    EXPECT_EQ(a.cumulative_rmse[h], b.cumulative_rmse[h]);
    EXPECT_EQ(a.residual_fraction[h], b.residual_fraction[h]);
  }
}

TEST(Force, OracleForceErrorIsZero) {
  EnvSpec env;
  env.kind = EnvKind::BouncingPendulum;
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 3000, 0.0, 13);
  AnyModel oracle = OracleModel{env};
  ForceReport r = eval_force(oracle, ds, 16, 5);
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_EQ(r.rmse_contact, 0.0);
  EXPECT_GT(r.n_contact, 0);
  EXPECT_GT(r.peak_force, 0.0);
}

TEST(Force, ZeroContactSliceComparesAgainstZeros) {
  EnvSpec env = pendulum();  // frictionless: true f_ext is identically zero
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 500, 0.0, 17);
  AnyModel oracle = OracleModel{env};
  ForceReport r = eval_force(oracle, ds, 16, 5);
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_EQ(r.n_contact, 0);
}

TEST(Force, ObservationSpaceModelsAreUnsupported) {
  EnvSpec env = pendulum(5e-3);
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 400, 0.0, 19);
  TrainConfig cfg;
  cfg.hidden = {8};
  cfg.steps = 10;
  cfg.batch_size = 4;
  cfg.seed = 1;
  OnnTrainResult onn = train_onn(ds, cfg);
  AnyModel any = onn.model;
  EXPECT_THROW(eval_force(any, ds, 16, 5), UnsupportedModelError);
}

TEST(Phase, AnalyticPendulumEquilibria) {
  EnvSpec env = pendulum();
  AnyModel oracle = OracleModel{env};
  PhasePortrait pp = eval_phase_portrait(oracle, GridRange{-0.5 + M_PI, 0.5 + M_PI, 9},
                                         GridRange{-1.0, 1.0, 9}, 3);
  double w = std::sqrt(env.gravity / env.length);  // 3.132 for g=9.81, l=1
  // upright: real saddle pair +-sqrt(g/l)
  EXPECT_NEAR(pp.upright.first.real(), w, 1e-3);
  EXPECT_NEAR(pp.upright.second.real(), -w, 1e-3);
  EXPECT_NEAR(pp.upright.first.imag(), 0.0, 1e-9);
  // downward: pure imaginary center pair
  EXPECT_NEAR(pp.downward.first.imag(), w, 1e-3);
  EXPECT_NEAR(pp.downward.second.imag(), -w, 1e-3);
  EXPECT_NEAR(pp.downward.first.real(), 0.0, 1e-9);
}

TEST(Phase, WritesCsvAndSvg) {
  namespace fs = std::filesystem;
  EnvSpec env = pendulum();
  AnyModel oracle = OracleModel{env};
  PhasePortrait pp =
      eval_phase_portrait(oracle, GridRange{-3.5, 3.5, 13}, GridRange{-4.0, 4.0, 11}, 3);
  std::string csv = (fs::temp_directory_path() / "stride_phase.csv").string();
  std::string svg = (fs::temp_directory_path() / "stride_phase.svg").string();
  write_phase_csv(pp, csv);
  write_phase_svg(pp, svg);
  std::ifstream fsvg(svg);
  std::string body((std::istreambuf_iterator<char>(fsvg)), std::istreambuf_iterator<char>());
  EXPECT_NE(body.find("<svg"), std::string::npos);
  EXPECT_NE(body.find("</svg>"), std::string::npos);
  fs::remove(csv);
  fs::remove(svg);
}

TEST(Phase, RejectsMultiDofModels) {
  EnvSpec env;
  env.kind = EnvKind::CartpoleFriction;
  AnyModel oracle = OracleModel{env};
  EXPECT_THROW(eval_phase_portrait(oracle, GridRange{-1, 1, 5}, GridRange{-1, 1, 5}, 3),
               UnsupportedModelError);
}

TEST(Checkpoint, RoundTripPreservesPredictionsBitExactly) {
  namespace fs = std::filesystem;
  EnvSpec env = pendulum(5e-3);
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 600, 0.0, 23);
  TrainConfig cfg;
  cfg.hidden = {8, 8};
  cfg.steps = 30;
  cfg.batch_size = 8;
  cfg.nfe_train = 2;
  cfg.seed = 9;
  StrideTrainResult tr = train_stride(ds, cfg);

  std::string path = (fs::temp_directory_path() / "stride_ckpt.json").string();
  save_checkpoint(tr.model, path);
  AnyModel loaded = load_checkpoint(path);
  ASSERT_TRUE(std::holds_alternative<StrideModel>(loaded));
  const StrideModel& m2 = std::get<StrideModel>(loaded);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Context ctx{State{{rng.uniform(-3, 3)}, {rng.uniform(-5, 5)}},
                ControlInput{{rng.uniform(-10, 10)}}};
    Vec z = {rng.normal()};
    Vec a = predict_accel(tr.model, ctx, z, 7);
    Vec b = predict_accel(m2, ctx, z, 7);
    EXPECT_EQ(a[0], b[0]);
  }
  fs::remove(path);
}

TEST(Checkpoint, AllKindsRoundTrip) {
  namespace fs = std::filesystem;
  EnvSpec env = pendulum(5e-3);
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 400, 0.0, 29);
  TrainConfig cfg;
  cfg.hidden = {6};
  cfg.steps = 8;
  cfg.batch_size = 4;
  cfg.nfe_train = 2;
  cfg.seed = 2;
  std::vector<AnyModel> models;
  models.push_back(train_stride(ds, cfg).model);
  models.push_back(train_onn(ds, cfg).model);
  models.push_back(train_delan(ds, cfg).model);
  models.push_back(train_lnn_diffusion(ds, cfg, NoiseSchedule::linear(8)).model);
  models.push_back(train_pure_diffusion(ds, cfg, true, NoiseSchedule::linear(8)).model);
  models.push_back(OracleModel{env});
  std::string path = (fs::temp_directory_path() / "stride_kind_ckpt.json").string();
  for (const AnyModel& m : models) {
    save_checkpoint(m, path);
    AnyModel loaded = load_checkpoint(path);
    EXPECT_EQ(model_kind_name(loaded), model_kind_name(m));
    EXPECT_EQ(checkpoint_digest(loaded), checkpoint_digest(m));
  }
  fs::remove(path);
}

TEST(Checkpoint, TruncatedFileFailsWithByteOffset) {
  namespace fs = std::filesystem;
  EnvSpec env = pendulum();
  std::string path = (fs::temp_directory_path() / "stride_trunc.json").string();
  save_checkpoint(OracleModel{env}, path);
  // truncate the file
  std::string full;
  {
    std::ifstream in(path);
    std::getline(in, full);
  }
  {
    std::ofstream out(path, std::ios::trunc);
    out << full.substr(0, full.size() / 2);
  }
  try {
    load_checkpoint(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos);
  }
  fs::remove(path);
}

TEST(Checkpoint, SchemaMismatchFails) {
  namespace fs = std::filesystem;
  std::string path = (fs::temp_directory_path() / "stride_schema.json").string();
  {
    std::ofstream out(path);
    out << "{\"schema_version\": 42, \"kind\": \"stride\"}";
  }
  EXPECT_THROW(load_checkpoint(path), DataError);
  fs::remove(path);
}

TEST(NfeSweep, CfmAtOneStepMatchesSingleEuler) {
  EnvSpec env = pendulum(5e-3);
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 500, 0.0, 31);
  TrainConfig cfg;
  cfg.hidden = {8, 8};
  cfg.steps = 15;
  cfg.batch_size = 8;
  cfg.nfe_train = 2;
  cfg.seed = 4;
  StrideModel m = train_stride(ds, cfg).model;
  Vec ctx_feat(m.fc.context_dim());
  const Record& rec = ds.records[100];
  context_features<double>(m.fc, m.stats, rec.q.data(), rec.qdot.data(), rec.tau.data(),
                           ctx_feat.data());
  Vec z0 = {0.7};
  Vec one = sample_residual(m.flow, ctx_feat, z0, 1);
  // single explicit Euler step by hand
  FlowWork<double> work;
  Vec v(1);
  flow_field<double>(m.flow, m.flow.net.flat.data(), z0.data(), 1, 0.0, ctx_feat, v.data(), work);
  EXPECT_DOUBLE_EQ(one[0], z0[0] + v[0]);
}

TEST(Allocation, RequiresStochasticModel) {
  EnvSpec env = pendulum(5e-3);
  TrajectoryDataset ds = generate_dataset(env, ExcitationPolicy::RandomTorque, 300, 0.0, 37);
  AnyModel oracle = OracleModel{env};
  EXPECT_THROW(eval_residual_allocation(oracle, ds, 4, 3), UnsupportedModelError);
}

TEST(Range, Parsing) {
  GridRange r = parse_range("-1.5:2.5:17");
  EXPECT_DOUBLE_EQ(r.lo, -1.5);
  EXPECT_DOUBLE_EQ(r.hi, 2.5);
  EXPECT_EQ(r.steps, 17);
  EXPECT_THROW(parse_range("1:2"), DataError);
  EXPECT_THROW(parse_range("3:1:5"), DataError);
}

}  // namespace
}  // namespace stride
