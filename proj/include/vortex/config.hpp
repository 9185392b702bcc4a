#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vortex/bench.hpp"
#include "vortex/common.hpp"
#include "vortex/elasticity.hpp"
#include "vortex/executor.hpp"
#include "vortex/runtime.hpp"

namespace vortex::config {

struct SloBudget {
  double target_ms = 200;
  double allowed_miss_rate = 1.0;
};

/// Self-describing deployment file. Profile and pipeline content is included
/// by path; workload may be inline. Parse -> emit -> parse is the identity.
struct DeploymentConfig {
  std::string mode = "simulate";
  std::uint64_t seed = 42;
  int nodes = 4;
  double gpu_gb = 24;
  std::vector<std::vector<double>> layouts = {{24}, {12, 12}, {12, 6, 6}, {6, 6, 6, 6}};
  std::string profiles_path;
  std::string pipeline_path;
  std::string placement = "auto";  // "auto" | path to placement json
  double load_delay_ms = 3000;
  bool elasticity_enabled = false;
  elasticity::Controller::Options elasticity_opts;
  nlohmann::json workload;  // inline workload spec, or absent
  std::vector<SloBudget> slo;

  static DeploymentConfig from_json(const nlohmann::json& j) {
    DeploymentConfig c;
    c.mode = j.value("mode", "simulate");
    if (c.mode != "simulate" && c.mode != "live") fail(errc::bad_config, "mode " + c.mode);
    c.seed = j.value("seed", 42);
    if (j.contains("cluster")) {
      const auto& cl = j.at("cluster");
      c.nodes = cl.value("nodes", 4);
      c.gpu_gb = cl.value("gpu_gb", 24.0);
      if (cl.contains("layouts"))
        c.layouts = cl.at("layouts").get<std::vector<std::vector<double>>>();
    }
    c.profiles_path = j.value("profiles", "");
    c.pipeline_path = j.value("pipeline", "");
    c.placement = j.value("placement", "auto");
    c.load_delay_ms = j.value("load_delay_ms", 3000.0);
    if (j.contains("elasticity")) {
      const auto& e = j.at("elasticity");
      c.elasticity_enabled = e.value("enabled", true);
      c.elasticity_opts.preload_threshold = e.value("preload_threshold", 0.7);
      c.elasticity_opts.activate_threshold = e.value("activate_threshold", 0.9);
      c.elasticity_opts.scale_down_threshold = e.value("scale_down_threshold", 0.3);
      c.elasticity_opts.target_utilization = e.value("target_utilization", 0.8);
      c.elasticity_opts.hold_us = sim::micros(e.value("hold_ms", 10000.0) * sim::kMilli);
      c.elasticity_opts.half_life_us = sim::micros(e.value("half_life_ms", 2000.0) * sim::kMilli);
      c.elasticity_opts.tick_us = sim::micros(e.value("tick_ms", 100.0) * sim::kMilli);
      c.elasticity_opts.floor = e.value("floor", 1);
    }
    if (j.contains("workload")) c.workload = j.at("workload");
    if (j.contains("slo"))
      for (const auto& s : j.at("slo"))
        c.slo.push_back(SloBudget{s.at("target_ms").get<double>(),
                                  s.value("allowed_miss_rate", 1.0)});
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = mode;
    j["seed"] = seed;
    j["cluster"] = {{"nodes", nodes}, {"gpu_gb", gpu_gb}, {"layouts", layouts}};
    j["profiles"] = profiles_path;
    j["pipeline"] = pipeline_path;
    j["placement"] = placement;
    j["load_delay_ms"] = load_delay_ms;
    j["elasticity"] = {{"enabled", elasticity_enabled},
                       {"preload_threshold", elasticity_opts.preload_threshold},
                       {"activate_threshold", elasticity_opts.activate_threshold},
                       {"scale_down_threshold", elasticity_opts.scale_down_threshold},
                       {"target_utilization", elasticity_opts.target_utilization},
                       {"hold_ms", double(elasticity_opts.hold_us) / sim::kMilli},
                       {"half_life_ms", double(elasticity_opts.half_life_us) / sim::kMilli},
                       {"tick_ms", double(elasticity_opts.tick_us) / sim::kMilli},
                       {"floor", elasticity_opts.floor}};
    if (!workload.is_null()) j["workload"] = workload;
    nlohmann::json slos = nlohmann::json::array();
    for (const auto& s : slo)
      slos.push_back({{"target_ms", s.target_ms}, {"allowed_miss_rate", s.allowed_miss_rate}});
    j["slo"] = slos;
    return j;
  }

  static DeploymentConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(errc::io_error, "cannot open " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      fail(errc::bad_config, path + ": " + e.what());
    }
    return from_json(j);
  }
};

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(errc::io_error, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail(errc::bad_config, path + ": " + e.what());
  }
  return j;
}

}  // namespace vortex::config
