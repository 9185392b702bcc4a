#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vortex/config.hpp"
#include "vortex/elasticity.hpp"
#include "vortex/executor.hpp"
#include "vortex/kvs.hpp"
#include "vortex/planner.hpp"
#include "vortex/profile.hpp"
#include "vortex/runtime.hpp"
#include "vortex/sim.hpp"

namespace vortex::deploy {

/// Everything one simulated deployment needs, wired together in dependency
/// order. Owns the event loop; all members share it.
struct World {
  sim::EventLoop loop;
  kvs::HandlerRegistry handlers;
  exec::ProfileTable profiles;
  std::unique_ptr<kvs::Store> store;
  std::unique_ptr<exec::SimExecutor> exec;
  std::unique_ptr<runtime::Runtime> rt;
  runtime::PipelineSpec pipeline;
  planner::PlacementProblem problem;
  planner::Placement placement;
  std::unique_ptr<elasticity::Controller> controller;
};

inline planner::PlacementProblem problem_from_pipeline(const runtime::PipelineSpec& spec,
                                                       const config::DeploymentConfig& cfg,
                                                       const exec::ProfileTable& profiles) {
  planner::PlacementProblem p;
  p.nodes = cfg.nodes;
  p.gpu_gb = cfg.gpu_gb;
  for (const auto& l : cfg.layouts) p.layouts.push_back(exec::MIGLayout{l});
  for (const auto& st : spec.stages)
    p.components.push_back(planner::Component{st.id, st.model, st.max_batch});
  p.profiles = &profiles;
  return p;
}

inline std::map<std::string, std::vector<exec::Instance*>> instantiate_placement(
    exec::SimExecutor& exe, const planner::Placement& pl,
    std::map<std::pair<std::string, exec::Instance*>, int>* batch_caps = nullptr) {
  for (std::size_t n = 0; n < pl.node_layouts.size(); ++n) {
    while (exe.node_count() <= static_cast<int>(n)) exe.add_node(pl.node_layouts[n].total());
    exe.partition_node(static_cast<int>(n), pl.node_layouts[n]);
  }
  std::map<std::string, std::vector<exec::Instance*>> pools;
  for (const auto& r : pl.replicas) {
    auto* inst = &exe.instance(r.node, r.slot);
    pools[r.model].push_back(inst);
    if (batch_caps) (*batch_caps)[{r.model, inst}] = r.batch;
  }
  return pools;
}

/// Builds a full simulated deployment from a config: profiles, placement
/// (planned, monolithic, or from file), partitioned nodes, and a loaded
/// pipeline ready for ingress.
inline std::unique_ptr<World> build_world(const config::DeploymentConfig& cfg,
                                          bool baseline = false) {
  auto w = std::make_unique<World>();
  w->profiles = exec::ProfileTable::from_csv_file(cfg.profiles_path);
  w->pipeline = runtime::PipelineSpec::from_json(config::load_json_file(cfg.pipeline_path));
  w->pipeline.validate();
  w->problem = problem_from_pipeline(w->pipeline, cfg, w->profiles);

  if (baseline)
    w->placement = planner::monolithic_baseline(w->problem);
  else if (cfg.placement == "auto")
    w->placement = planner::plan(w->problem);
  else
    w->placement =
        planner::placement_from_json(config::load_json_file(cfg.placement), w->problem);

  kvs::Store::Options so;
  so.default_nodes = cfg.nodes;
  so.seed = cfg.seed;
  w->store = std::make_unique<kvs::Store>(w->loop, w->handlers, so);

  exec::SimExecutor::Options eo;
  eo.load_delay_ms = cfg.load_delay_ms;
  eo.seed = cfg.seed;
  w->exec = std::make_unique<exec::SimExecutor>(w->loop, w->profiles, eo);

  runtime::Runtime::Options ro;
  ro.seed = cfg.seed;
  w->rt = std::make_unique<runtime::Runtime>(w->loop, *w->store, w->handlers, *w->exec, ro);

  std::map<std::pair<std::string, exec::Instance*>, int> caps;
  auto pools = instantiate_placement(*w->exec, w->placement, &caps);
  w->rt->load_pipeline(w->pipeline, pools, caps);

  if (cfg.elasticity_enabled) {
    w->controller = std::make_unique<elasticity::Controller>(
        w->loop, *w->rt, *w->exec, w->pipeline.name, cfg.elasticity_opts);
    w->controller->start(w->pipeline);
  }
  return w;
}

}  // namespace vortex::deploy
