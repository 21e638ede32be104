#pragma once

#include <fstream>
#include <string>
#include <variant>

#include <nlohmann/json.hpp>

#include "stride/baselines.hpp"
#include "stride/dataset_io.hpp"
#include "stride/model.hpp"

namespace stride {

// Versioned, self-describing model checkpoints. Doubles are serialized with
// shortest-round-trip formatting, so a load reproduces predictions bit-exactly.

inline constexpr int kCheckpointSchemaVersion = 1;

using AnyModel =
    std::variant<StrideModel, OnnModel, DelanModel, LnnDiffusionModel, PureDiffusionModel,
                 OracleModel>;

inline std::string model_kind_name(const AnyModel& m) {
  struct Visitor {
    std::string operator()(const StrideModel&) { return "stride"; }
    std::string operator()(const OnnModel&) { return "onn"; }
    std::string operator()(const DelanModel&) { return "delan"; }
    std::string operator()(const LnnDiffusionModel&) { return "lnn_diffusion"; }
    std::string operator()(const PureDiffusionModel&) { return "pure_diffusion"; }
    std::string operator()(const OracleModel&) { return "oracle"; }
  };
  return std::visit(Visitor{}, m);
}

namespace detail {

inline json spec_to_json(const MlpSpec& s) {
  return json{{"input_dim", s.input_dim},
              {"hidden", s.hidden},
              {"output_dim", s.output_dim},
              {"act", s.act == Act::Tanh ? "tanh" : (s.act == Act::Softplus ? "softplus" : "relu")}};
}

inline MlpSpec spec_from_json(const json& j) {
  MlpSpec s;
  s.input_dim = j.at("input_dim").get<int>();
  s.hidden = j.at("hidden").get<std::vector<int>>();
  s.output_dim = j.at("output_dim").get<int>();
  std::string act = j.at("act").get<std::string>();
  s.act = act == "tanh" ? Act::Tanh : (act == "softplus" ? Act::Softplus : Act::Relu);
  s.validate();
  return s;
}

inline json params_to_json(const ParamVector& p) {
  return json{{"layout", p.layout}, {"flat", p.flat}};
}

inline ParamVector params_from_json(const json& j) {
  ParamVector p;
  p.layout = j.at("layout").get<std::vector<std::array<int, 2>>>();
  p.flat = j.at("flat").get<Vec>();
  return p;
}

inline json stats_to_json(const NormStats& s) {
  return json{{"qf_mean", s.qf_mean},   {"qf_std", s.qf_std},   {"qd_mean", s.qd_mean},
              {"qd_std", s.qd_std},     {"tau_mean", s.tau_mean}, {"tau_std", s.tau_std},
              {"qdd_mean", s.qdd_mean}, {"qdd_std", s.qdd_std}, {"fext_scale", s.fext_scale}};
}

inline NormStats stats_from_json(const json& j) {
  NormStats s;
  s.qf_mean = j.at("qf_mean").get<Vec>();
  s.qf_std = j.at("qf_std").get<Vec>();
  s.qd_mean = j.at("qd_mean").get<Vec>();
  s.qd_std = j.at("qd_std").get<Vec>();
  s.tau_mean = j.at("tau_mean").get<Vec>();
  s.tau_std = j.at("tau_std").get<Vec>();
  s.qdd_mean = j.at("qdd_mean").get<Vec>();
  s.qdd_std = j.at("qdd_std").get<Vec>();
  s.fext_scale = j.at("fext_scale").get<Vec>();
  return s;
}

inline json config_to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"batch_size", c.batch_size},
              {"steps", c.steps},
              {"lambda_fm", c.lambda_fm},
              {"nfe_train", c.nfe_train},
              {"seed", c.seed},
              {"grad_through_sampler", c.grad_through_sampler},
              {"sigma_min", c.sigma_min},
              {"hidden", c.hidden},
              {"time_embed_dim", c.time_embed_dim},
              {"diag_eps", c.diag_eps}};
}

inline TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.steps = j.at("steps").get<int>();
  c.lambda_fm = j.at("lambda_fm").get<double>();
  c.nfe_train = j.at("nfe_train").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.grad_through_sampler = j.at("grad_through_sampler").get<bool>();
  c.sigma_min = j.at("sigma_min").get<double>();
  c.hidden = j.at("hidden").get<std::vector<int>>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.diag_eps = j.at("diag_eps").get<double>();
  return c;
}

inline json lnn_to_json(const LnnParams& p) {
  return json{{"chol_spec", spec_to_json(p.chol_spec)},
              {"pot_spec", spec_to_json(p.pot_spec)},
              {"chol", params_to_json(p.chol)},
              {"pot", params_to_json(p.pot)},
              {"diag_eps", p.diag_eps}};
}

inline LnnParams lnn_from_json(const json& j) {
  LnnParams p;
  p.chol_spec = spec_from_json(j.at("chol_spec"));
  p.pot_spec = spec_from_json(j.at("pot_spec"));
  p.chol = params_from_json(j.at("chol"));
  p.pot = params_from_json(j.at("pot"));
  p.diag_eps = j.at("diag_eps").get<double>();
  return p;
}

inline json schedule_to_json(const NoiseSchedule& s) {
  return json{{"steps", s.steps}, {"betas", s.betas}};
}

inline NoiseSchedule schedule_from_json(const json& j) {
  NoiseSchedule s;
  s.steps = j.at("steps").get<int>();
  s.betas = j.at("betas").get<Vec>();
  s.alphas.resize(s.steps);
  s.alpha_bars.resize(s.steps);
  double cum = 1.0;
  for (int t = 0; t < s.steps; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    cum *= s.alphas[t];
    s.alpha_bars[t] = cum;
  }
  s.validate();
  return s;
}

inline void common_to_json(json& j, int n, const FeatureConfig& fc, const NormStats& stats,
                           const TrainConfig& cfg, uint64_t seed, const EnvSpec& env) {
  j["n"] = n;
  j["angle"] = fc.angle;
  j["norm_stats"] = stats_to_json(stats);
  j["train_config"] = config_to_json(cfg);
  j["seed"] = seed;
  json env_json;
  env_to_json(env, env_json);
  j["env"] = env_json;
}

template <class M>
void common_from_json(const json& j, M& m) {
  m.n = j.at("n").get<int>();
  m.fc = FeatureConfig{m.n, j.at("angle").get<std::vector<uint8_t>>()};
  m.stats = stats_from_json(j.at("norm_stats"));
  m.cfg = config_from_json(j.at("train_config"));
  m.seed = j.at("seed").get<uint64_t>();
  m.trained_env = env_from_json(j.at("env"));
}

}  // namespace detail

inline json checkpoint_to_json(const AnyModel& any) {
  json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["kind"] = model_kind_name(any);
  struct Visitor {
    json& j;
    void operator()(const StrideModel& m) {
      detail::common_to_json(j, m.n, m.fc, m.stats, m.cfg, m.seed, m.trained_env);
      j["lnn"] = detail::lnn_to_json(m.lnn);
      j["flow"] = json{{"spec", detail::spec_to_json(m.flow.spec)},
                       {"net", detail::params_to_json(m.flow.net)},
                       {"time_embed_dim", m.flow.time_embed_dim}};
    }
    void operator()(const OnnModel& m) {
      detail::common_to_json(j, m.n, m.fc, m.stats, m.cfg, m.seed, m.trained_env);
      j["net_spec"] = detail::spec_to_json(m.spec);
      j["net"] = detail::params_to_json(m.net);
    }
    void operator()(const DelanModel& m) {
      detail::common_to_json(j, m.n, m.fc, m.stats, m.cfg, m.seed, m.trained_env);
      j["lnn"] = detail::lnn_to_json(m.lnn);
    }
    void operator()(const LnnDiffusionModel& m) {
      detail::common_to_json(j, m.n, m.fc, m.stats, m.cfg, m.seed, m.trained_env);
      j["lnn"] = detail::lnn_to_json(m.lnn);
      j["denoiser_spec"] = detail::spec_to_json(m.denoiser_spec);
      j["denoiser"] = detail::params_to_json(m.denoiser);
      j["schedule"] = detail::schedule_to_json(m.schedule);
      j["time_embed_dim"] = m.time_embed_dim;
    }
    void operator()(const PureDiffusionModel& m) {
      detail::common_to_json(j, m.n, m.fc, m.stats, m.cfg, m.seed, m.trained_env);
      j["denoiser_spec"] = detail::spec_to_json(m.denoiser_spec);
      j["denoiser"] = detail::params_to_json(m.denoiser);
      j["schedule"] = detail::schedule_to_json(m.schedule);
      j["time_embed_dim"] = m.time_embed_dim;
      j["condition_on_obs"] = m.condition_on_obs;
    }
    void operator()(const OracleModel& m) {
      json env_json;
      env_to_json(m.env, env_json);
      j["env"] = env_json;
    }
  };
  std::visit(Visitor{j}, any);
  return j;
}

inline AnyModel checkpoint_from_json(const json& j) {
  int version = j.at("schema_version").get<int>();
  if (version != kCheckpointSchemaVersion)
    throw DataError("checkpoint schema_version " + std::to_string(version) + " unsupported (want " +
                    std::to_string(kCheckpointSchemaVersion) + ")");
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "stride") {
    StrideModel m;
    detail::common_from_json(j, m);
    m.lnn = detail::lnn_from_json(j.at("lnn"));
    m.flow.spec = detail::spec_from_json(j.at("flow").at("spec"));
    m.flow.net = detail::params_from_json(j.at("flow").at("net"));
    m.flow.time_embed_dim = j.at("flow").at("time_embed_dim").get<int>();
    return m;
  }
  if (kind == "onn") {
    OnnModel m;
    detail::common_from_json(j, m);
    m.spec = detail::spec_from_json(j.at("net_spec"));
    m.net = detail::params_from_json(j.at("net"));
    return m;
  }
  if (kind == "delan") {
    DelanModel m;
    detail::common_from_json(j, m);
    m.lnn = detail::lnn_from_json(j.at("lnn"));
    return m;
  }
  if (kind == "lnn_diffusion") {
    LnnDiffusionModel m;
    detail::common_from_json(j, m);
    m.lnn = detail::lnn_from_json(j.at("lnn"));
    m.denoiser_spec = detail::spec_from_json(j.at("denoiser_spec"));
    m.denoiser = detail::params_from_json(j.at("denoiser"));
    m.schedule = detail::schedule_from_json(j.at("schedule"));
    m.time_embed_dim = j.at("time_embed_dim").get<int>();
    return m;
  }
  if (kind == "pure_diffusion") {
    PureDiffusionModel m;
    detail::common_from_json(j, m);
    m.denoiser_spec = detail::spec_from_json(j.at("denoiser_spec"));
    m.denoiser = detail::params_from_json(j.at("denoiser"));
    m.schedule = detail::schedule_from_json(j.at("schedule"));
    m.time_embed_dim = j.at("time_embed_dim").get<int>();
    m.condition_on_obs = j.at("condition_on_obs").get<bool>();
    return m;
  }
  if (kind == "oracle") {
    OracleModel m;
    m.env = env_from_json(j.at("env"));
    return m;
  }
  throw DataError("unknown checkpoint kind: " + kind);
}

inline void save_checkpoint(const AnyModel& any, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << checkpoint_to_json(any).dump() << '\n';
  if (!out) throw DataError("write failed: " + path);
}

inline AnyModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("corrupt checkpoint " + path + " at byte " + std::to_string(e.byte) + ": " +
                    e.what());
  }
  try {
    return checkpoint_from_json(j);
  } catch (const json::exception& e) {
    throw DataError("bad checkpoint contents in " + path + ": " + e.what());
  }
}

/// Digest of the checkpoint contents, embedded in evaluation reports.
inline std::string checkpoint_digest(const AnyModel& any) {
  return hex_digest(fnv1a(checkpoint_to_json(any).dump()));
}

}  // namespace stride
