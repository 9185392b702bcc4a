// Command-line front end: placement planning, benchmark runs, rate sweeps,
// and a TCP query service, all driven by one deployment config file.
//
// Exit codes: 0 ok, 1 config error, 2 infeasible placement, 3 SLO budget
// exceeded.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vortex/bench.hpp"
#include "vortex/config.hpp"
#include "vortex/deploy.hpp"
#include "vortex/planner.hpp"
#include "vortex/service.hpp"

namespace {

bool log_debug() {
  const char* v = std::getenv("VORTEX_LOG");
  return v && std::string(v) == "debug";
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) vortex::fail(vortex::errc::io_error, "cannot write " + path);
  out << content;
}

int run_plan(const std::string& config_path, bool baseline, const std::string& out_path) {
  auto cfg = vortex::config::DeploymentConfig::from_file(config_path);
  auto profiles = vortex::exec::ProfileTable::from_csv_file(cfg.profiles_path);
  auto spec =
      vortex::runtime::PipelineSpec::from_json(vortex::config::load_json_file(cfg.pipeline_path));
  spec.validate();
  auto problem = vortex::deploy::problem_from_pipeline(spec, cfg, profiles);
  vortex::planner::Placement pl =
      baseline ? vortex::planner::monolithic_baseline(problem) : vortex::planner::plan(problem);
  auto violations = vortex::planner::validate(pl, problem);
  if (!violations.empty()) {
    for (const auto& v : violations)
      std::cerr << v.constraint << " node " << v.node << " " << v.model << ": " << v.detail
                << "\n";
    return 2;
  }
  if (!out_path.empty())
    write_file(out_path, vortex::planner::placement_to_json(pl, problem).dump(2) + "\n");
  std::cout << vortex::planner::placement_table(pl, problem);
  return 0;
}

int run_bench(const std::string& config_path, bool baseline, bool preload,
              const std::string& out_dir) {
  auto cfg = vortex::config::DeploymentConfig::from_file(config_path);
  if (cfg.workload.is_null()) vortex::fail(vortex::errc::bad_config, "config has no workload");
  if (!preload) cfg.elasticity_enabled = false;
  auto world = vortex::deploy::build_world(cfg, baseline);
  auto wspec = vortex::bench::WorkloadSpec::from_json(cfg.workload);
  vortex::bench::Driver driver(world->loop, *world->rt);
  auto report = driver.run(wspec);

  std::filesystem::create_directories(out_dir);
  write_file(out_dir + "/queries.csv", report.queries_csv());
  write_file(out_dir + "/gract.csv",
             world->exec->export_gract_csv(vortex::sim::kSecond, world->loop.now()));
  write_file(out_dir + "/exec_log.csv", world->rt->export_exec_log_csv());
  if (world->controller)
    write_file(out_dir + "/actions.csv", world->controller->export_action_log_csv());

  for (const auto& ph : report.phases) {
    std::cout << "phase " << ph.name << ": offered " << ph.offered_qps << " qps, achieved "
              << ph.achieved_qps << " qps, p50 " << ph.p50_ms << " ms, p95 " << ph.p95_ms
              << " ms" << (ph.backlogged ? " [backlog]" : "") << "\n";
  }
  std::cout << "completed " << report.completed << "/" << report.submitted << ", failed "
            << report.failed << "\n";

  // SLO budget check across all completed queries.
  std::vector<double> lat;
  for (const auto& r : report.rows) lat.push_back(r.latency_us);
  for (const auto& budget : cfg.slo) {
    if (lat.empty()) break;
    double miss = vortex::bench::slo_miss_rate(lat, budget.target_ms * vortex::sim::kMilli);
    if (log_debug())
      std::cerr << "slo " << budget.target_ms << "ms: miss " << miss << " allowed "
                << budget.allowed_miss_rate << "\n";
    if (miss > budget.allowed_miss_rate) {
      std::cerr << "SLO budget exceeded: " << budget.target_ms << "ms target missed by "
                << miss * 100 << "% (allowed " << budget.allowed_miss_rate * 100 << "%)\n";
      return 3;
    }
  }
  return 0;
}

int run_report(const std::string& config_path, const std::vector<double>& rates,
               std::uint64_t count, const std::string& out_path) {
  auto cfg = vortex::config::DeploymentConfig::from_file(config_path);
  std::vector<vortex::bench::CurvePoint> curve;
  for (double rate : rates) {
    // Fresh world per offered rate: points are independent experiments.
    auto world = vortex::deploy::build_world(cfg);
    vortex::bench::WorkloadSpec wspec;
    wspec.pipeline = world->pipeline.name;
    wspec.seed = cfg.seed;
    wspec.phases.push_back(vortex::bench::Phase{"sweep", rate, count, "constant"});
    vortex::bench::Driver driver(world->loop, *world->rt);
    auto rep = driver.run(wspec);
    const auto& ph = rep.phases.at(0);
    vortex::bench::CurvePoint pt;
    pt.offered_qps = rate;
    pt.p5_ms = ph.p5_ms;
    pt.p50_ms = ph.p50_ms;
    pt.p95_ms = ph.p95_ms;
    pt.miss_rate_200 = ph.miss_rate.size() > 0 ? ph.miss_rate[0] : 0;
    pt.miss_rate_500 = ph.miss_rate.size() > 1 ? ph.miss_rate[1] : 0;
    pt.achieved_qps = ph.achieved_qps;
    pt.backlogged = ph.backlogged;
    curve.push_back(pt);
    if (log_debug()) std::cerr << "rate " << rate << " done\n";
  }
  write_file(out_path, vortex::bench::curve_csv(curve));
  std::cout << "wrote " << out_path << " (" << curve.size() << " points)\n";
  return 0;
}

vortex::service::Server* g_server = nullptr;

int run_serve(const std::string& config_path, const std::string& host, int port) {
  auto cfg = vortex::config::DeploymentConfig::from_file(config_path);
  auto world = vortex::deploy::build_world(cfg);
  vortex::service::Server::Options so;
  so.host = host;
  so.port = port;
  vortex::service::Server server(world->loop, *world->rt, world->pipeline.name, so);
  server.set_egress(world->pipeline.name, world->pipeline.egress);
  int bound = server.listen();
  std::cout << "listening on " << host << ":" << bound << "\n" << std::flush;
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->request_stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->request_stop();
  });
  server.run();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SLO-first ML-serving simulator"};
  app.require_subcommand(1);

  std::string config_path, out_path, out_dir = "out", host = "127.0.0.1", rates_csv = "2,4,6,8";
  bool baseline = false, no_preload = false;
  int port = 0;
  std::uint64_t count = 200;

  auto* plan = app.add_subcommand("plan", "compute a placement");
  plan->add_option("--config", config_path)->required();
  plan->add_flag("--baseline", baseline, "monolithic full-replica baseline");
  plan->add_option("--out", out_path, "placement JSON output path");

  auto* bench = app.add_subcommand("bench", "run the configured workload");
  bench->add_option("--config", config_path)->required();
  bench->add_flag("--baseline", baseline);
  bench->add_flag("--no-preload", no_preload, "disable anticipatory preloading");
  bench->add_option("--out-dir", out_dir);

  auto* report = app.add_subcommand("report", "latency/throughput curve over offered rates");
  report->add_option("--config", config_path)->required();
  report->add_option("--rates", rates_csv, "comma-separated offered qps");
  report->add_option("--count", count, "queries per rate point");
  report->add_option("--out", out_path)->required();

  auto* serve = app.add_subcommand("serve", "JSON-lines query service over TCP");
  serve->add_option("--config", config_path)->required();
  serve->add_option("--host", host);
  serve->add_option("--port", port);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(plan)) return run_plan(config_path, baseline, out_path);
    if (app.got_subcommand(bench)) return run_bench(config_path, baseline, !no_preload, out_dir);
    if (app.got_subcommand(report)) {
      std::vector<double> rates;
      for (const auto& tok : vortex::split(rates_csv, ','))
        if (!tok.empty()) rates.push_back(std::stod(tok));
      return run_report(config_path, rates, count, out_path);
    }
    if (app.got_subcommand(serve)) return run_serve(config_path, host, port);
  } catch (const vortex::error& e) {
    std::cerr << e.what() << "\n";
    return e.code() == vortex::errc::infeasible ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 1;
}
