#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "stride/envs.hpp"

namespace stride {

using json = nlohmann::json;

// JSON-lines dataset format. The writer is hand-rolled with a fixed key order
// and 17-significant-digit floats, so write -> read -> write round-trips
// byte-identically. Reading goes through nlohmann::json and accepts any key
// order.

inline void env_to_json(const EnvSpec& e, json& j) {
  j["kind"] = env_kind_name(e.kind);
  j["dt"] = e.dt;
  j["integrator"] = e.integrator == IntegratorKind::Rk4 ? "rk4" : "semi_implicit_euler";
  j["mass"] = e.mass;
  j["length"] = e.length;
  j["gravity"] = e.gravity;
  j["viscous"] = e.viscous;
  j["wall_angle"] = e.wall_angle;
  j["contact_stiffness"] = e.contact_stiffness;
  j["contact_damping"] = e.contact_damping;
  j["cart_mass"] = e.cart_mass;
  j["pole_mass"] = e.pole_mass;
  j["pole_length"] = e.pole_length;
  j["coulomb_friction"] = e.coulomb_friction;
  j["viscous_friction"] = e.viscous_friction;
}

inline EnvSpec env_from_json(const json& j) {
  EnvSpec e;
  e.kind = env_kind_from_name(j.at("kind").get<std::string>());
  e.dt = j.at("dt").get<double>();
  std::string integ = j.at("integrator").get<std::string>();
  if (integ == "rk4")
    e.integrator = IntegratorKind::Rk4;
  else if (integ == "semi_implicit_euler")
    e.integrator = IntegratorKind::SemiImplicitEuler;
  else
    throw DataError("unknown integrator: " + integ);
  e.mass = j.at("mass").get<double>();
  e.length = j.at("length").get<double>();
  e.gravity = j.at("gravity").get<double>();
  e.viscous = j.at("viscous").get<double>();
  e.wall_angle = j.at("wall_angle").get<double>();
  e.contact_stiffness = j.at("contact_stiffness").get<double>();
  e.contact_damping = j.at("contact_damping").get<double>();
  e.cart_mass = j.at("cart_mass").get<double>();
  e.pole_mass = j.at("pole_mass").get<double>();
  e.pole_length = j.at("pole_length").get<double>();
  e.coulomb_friction = j.at("coulomb_friction").get<double>();
  e.viscous_friction = j.at("viscous_friction").get<double>();
  return e;
}

namespace detail {

inline void append_vec(std::string& out, std::span<const double> v) {
  out += '[';
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  out += ']';
}

inline std::string env_header_line(const TrajectoryDataset& ds) {
  const EnvSpec& e = ds.env;
  std::string s = "{\"schema_version\":" + std::to_string(TrajectoryDataset::kSchemaVersion);
  s += ",\"env\":{\"kind\":\"" + env_kind_name(e.kind) + "\"";
  s += ",\"dt\":" + format_double(e.dt);
  s += ",\"integrator\":\"" +
       std::string(e.integrator == IntegratorKind::Rk4 ? "rk4" : "semi_implicit_euler") + "\"";
  s += ",\"mass\":" + format_double(e.mass);
  s += ",\"length\":" + format_double(e.length);
  s += ",\"gravity\":" + format_double(e.gravity);
  s += ",\"viscous\":" + format_double(e.viscous);
  s += ",\"wall_angle\":" + format_double(e.wall_angle);
  s += ",\"contact_stiffness\":" + format_double(e.contact_stiffness);
  s += ",\"contact_damping\":" + format_double(e.contact_damping);
  s += ",\"cart_mass\":" + format_double(e.cart_mass);
  s += ",\"pole_mass\":" + format_double(e.pole_mass);
  s += ",\"pole_length\":" + format_double(e.pole_length);
  s += ",\"coulomb_friction\":" + format_double(e.coulomb_friction);
  s += ",\"viscous_friction\":" + format_double(e.viscous_friction);
  s += "},\"noise\":";
  append_vec(s, ds.noise_std);
  s += ",\"seed\":" + std::to_string(ds.seed);
  s += ",\"n\":" + std::to_string(ds.dof());
  s += ",\"dt\":" + format_double(ds.dt);
  s += "}";
  return s;
}

}  // namespace detail

inline void write_dataset_jsonl(const TrajectoryDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << detail::env_header_line(ds) << '\n';
  std::string line;
  for (const Record& r : ds.records) {
    line.clear();
    line += "{\"t\":" + format_double(r.t);
    line += ",\"q\":";
    detail::append_vec(line, r.q);
    line += ",\"qdot\":";
    detail::append_vec(line, r.qdot);
    line += ",\"tau\":";
    detail::append_vec(line, r.tau);
    line += ",\"qddot\":";
    detail::append_vec(line, r.qddot);
    line += ",\"f_ext\":";
    detail::append_vec(line, r.f_ext);
    line += "}";
    out << line << '\n';
  }
  if (!out) throw DataError("write failed: " + path);
}

inline TrajectoryDataset read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty dataset file: " + path);

  TrajectoryDataset ds;
  try {
    json header = json::parse(line);
    int version = header.at("schema_version").get<int>();
    if (version != TrajectoryDataset::kSchemaVersion)
      throw DataError("dataset schema_version " + std::to_string(version) + " unsupported (want " +
                      std::to_string(TrajectoryDataset::kSchemaVersion) + ")");
    ds.env = env_from_json(header.at("env"));
    ds.noise_std = header.at("noise").get<Vec>();
    ds.seed = header.at("seed").get<uint64_t>();
    ds.dt = header.at("dt").get<double>();
  } catch (const json::exception& e) {
    throw DataError("bad dataset header in " + path + ": " + e.what());
  }

  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      Record r;
      r.t = j.at("t").get<double>();
      r.q = j.at("q").get<Vec>();
      r.qdot = j.at("qdot").get<Vec>();
      r.tau = j.at("tau").get<Vec>();
      r.qddot = j.at("qddot").get<Vec>();
      r.f_ext = j.at("f_ext").get<Vec>();
      ds.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError("bad dataset record at line " + std::to_string(line_no) + " of " + path +
                      ": " + e.what());
    }
  }
  ds.validate();
  return ds;
}

}  // namespace stride
