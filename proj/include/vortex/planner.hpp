#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vortex/common.hpp"
#include "vortex/executor.hpp"
#include "vortex/profile.hpp"

namespace vortex::planner {

struct Component {
  std::string id;
  std::string model;
  int max_batch = 1 << 30;  // SLO-compatible batch cap
};

struct PlacementProblem {
  int nodes = 1;
  double gpu_gb = 24;
  std::vector<exec::MIGLayout> layouts;
  std::vector<Component> components;
  const exec::ProfileTable* profiles = nullptr;
};

struct ReplicaAssignment {
  std::string model;
  int node = 0;
  int slot = 0;
  double size_gb = 0;
  int batch = 1;
  double throughput_qps = 0;
  double memory_gb = 0;
};

struct Placement {
  std::vector<exec::MIGLayout> node_layouts;
  std::vector<ReplicaAssignment> replicas;
  std::vector<double> throughput;  // per component, problem order

  double min_throughput() const {
    double m = throughput.empty() ? 0 : throughput[0];
    for (double t : throughput) m = std::min(m, t);
    return m;
  }
  std::vector<double> sorted_throughput() const {
    auto v = throughput;
    std::sort(v.begin(), v.end());
    return v;
  }
};

struct Violation {
  std::string constraint;  // "LayoutViolation" | "MemoryViolation"
  int node = 0;
  std::string model;
  std::string detail;
};

namespace detail {

// Components sharing a model act as one pooled cluster.
struct Cluster {
  std::string model;
  int max_batch = 1 << 30;
  std::vector<int> members;  // component indices
};

inline std::vector<Cluster> clusters_of(const PlacementProblem& p) {
  std::vector<Cluster> out;
  for (int i = 0; i < static_cast<int>(p.components.size()); ++i) {
    const auto& c = p.components[i];
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const Cluster& cl) { return cl.model == c.model; });
    if (it == out.end()) {
      out.push_back(Cluster{c.model, c.max_batch, {i}});
    } else {
      it->max_batch = std::min(it->max_batch, c.max_batch);
      it->members.push_back(i);
    }
  }
  return out;
}

// Best usable profile entry: max throughput among entries with batch <= cap
// and memory <= instance size.
inline const exec::ProfileEntry* best_entry(const exec::ProfileTable& t, const std::string& model,
                                            double size_gb, int cap) {
  if (!t.has(model, size_gb)) return nullptr;
  const exec::ProfileEntry* best = nullptr;
  for (const auto& e : t.entries(model, size_gb)) {
    if (e.batch > cap || e.memory_gb > size_gb) continue;
    if (!best || e.throughput_qps > best->throughput_qps) best = &e;
  }
  return best;
}

struct SlotChoice {
  double size_gb = 0;
  int cluster = -1;  // -1 = empty slot
  const exec::ProfileEntry* entry = nullptr;
};

struct NodeConfig {
  int layout = 0;
  std::vector<SlotChoice> slots;
  std::vector<double> contribution;  // per cluster qps
  int replica_count = 0;
  std::vector<int> key;  // canonical identity for tie-breaking
};

// All distinct per-node configurations: a layout plus one model (or none)
// per slot. Slots of equal size are interchangeable, so assignments are
// enumerated canonically (non-decreasing cluster index across equal sizes).
inline std::vector<NodeConfig> node_configs(const PlacementProblem& p,
                                            const std::vector<Cluster>& clusters) {
  std::vector<NodeConfig> out;
  for (int li = 0; li < static_cast<int>(p.layouts.size()); ++li) {
    exec::MIGLayout layout = p.layouts[li];
    std::sort(layout.sizes.begin(), layout.sizes.end(), std::greater<>());
    std::vector<SlotChoice> slots(layout.sizes.size());
    std::function<void(std::size_t, int)> rec = [&](std::size_t si, int min_cluster) {
      if (si == slots.size()) {
        NodeConfig cfg;
        cfg.layout = li;
        cfg.slots = slots;
        cfg.contribution.assign(clusters.size(), 0.0);
        for (const auto& s : slots) {
          if (s.cluster < 0) continue;
          cfg.contribution[s.cluster] += s.entry->throughput_qps;
          ++cfg.replica_count;
        }
        cfg.key.push_back(li);
        for (const auto& s : slots) cfg.key.push_back(s.cluster);
        out.push_back(std::move(cfg));
        return;
      }
      double size = layout.sizes[si];
      bool same_size = si > 0 && layout.sizes[si - 1] == size;
      int start = same_size ? min_cluster : -1;
      for (int c = start; c < static_cast<int>(clusters.size()); ++c) {
        const exec::ProfileEntry* e = nullptr;
        if (c >= 0) {
          e = best_entry(*p.profiles, clusters[c].model, size, clusters[c].max_batch);
          if (!e) continue;
        }
        slots[si] = SlotChoice{size, c, e};
        rec(si + 1, c);
      }
    };
    rec(0, -1);
  }
  // Deduplicate by contribution vector, keeping the tie-break-preferred config.
  std::map<std::vector<double>, NodeConfig> uniq;
  for (auto& cfg : out) {
    auto it = uniq.find(cfg.contribution);
    if (it == uniq.end()) {
      uniq.emplace(cfg.contribution, std::move(cfg));
    } else if (cfg.replica_count < it->second.replica_count ||
               (cfg.replica_count == it->second.replica_count && cfg.key < it->second.key)) {
      it->second = std::move(cfg);
    }
  }
  std::vector<NodeConfig> result;
  for (auto& [_, cfg] : uniq) result.push_back(std::move(cfg));
  std::sort(result.begin(), result.end(), [](const NodeConfig& a, const NodeConfig& b) {
    if (a.replica_count != b.replica_count) return a.replica_count < b.replica_count;
    return a.key < b.key;
  });
  return result;
}

inline bool lex_less(const std::vector<double>& a, const std::vector<double>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace detail

/// Per-component throughput: sum of replica throughput over the component's
/// (pooled, model-shared) cluster.
inline double component_throughput(const Placement& pl, const PlacementProblem& p,
                                   int component) {
  const std::string& model = p.components.at(component).model;
  double sum = 0;
  for (const auto& r : pl.replicas)
    if (r.model == model) sum += r.throughput_qps;
  return sum;
}

inline std::vector<Violation> validate(const Placement& pl, const PlacementProblem& p) {
  std::vector<Violation> out;
  if (static_cast<int>(pl.node_layouts.size()) != p.nodes) {
    out.push_back({"LayoutViolation", -1, "", "expected one layout per node"});
    return out;
  }
  for (int n = 0; n < p.nodes; ++n) {
    const auto& l = pl.node_layouts[n];
    bool allowed = std::any_of(p.layouts.begin(), p.layouts.end(), [&](const exec::MIGLayout& a) {
      auto x = a.sizes, y = l.sizes;
      std::sort(x.begin(), x.end());
      std::sort(y.begin(), y.end());
      return x == y;
    });
    if (!allowed || l.total() != p.gpu_gb)
      out.push_back({"LayoutViolation", n, "", "layout not in allowed set"});
  }
  std::map<std::pair<int, int>, double> slot_mem;
  for (const auto& r : pl.replicas) {
    if (r.node < 0 || r.node >= p.nodes ||
        r.slot >= static_cast<int>(pl.node_layouts[r.node].sizes.size()) ||
        pl.node_layouts[r.node].sizes[r.slot] != r.size_gb) {
      out.push_back({"LayoutViolation", r.node, r.model, "replica slot mismatch"});
      continue;
    }
    slot_mem[{r.node, r.slot}] += r.memory_gb;
    if (slot_mem[{r.node, r.slot}] > r.size_gb)
      out.push_back({"MemoryViolation", r.node, r.model,
                     "memory exceeds " + std::to_string(r.size_gb) + "GB"});
  }
  return out;
}

/// Chooses one MIG layout per GPU and assigns model replicas to instances so
/// that the ascending per-component throughput vector is lexicographically
/// maximal. Exact search: canonical (sorted) per-node configurations with an
/// upper-bound prune against the incumbent. Deterministic tie-breaking:
/// fewer replicas first, then lowest (layout, slot-assignment) key sequence.
inline Placement plan(const PlacementProblem& p) {
  if (!p.profiles || p.components.empty() || p.layouts.empty() || p.nodes < 1)
    fail(errc::bad_config, "malformed placement problem");
  auto clusters = detail::clusters_of(p);
  for (const auto& cl : clusters) {
    bool fits = false;
    for (const auto& l : p.layouts)
      for (double size : l.sizes)
        if (detail::best_entry(*p.profiles, cl.model, size, cl.max_batch)) fits = true;
    if (!fits) fail(errc::infeasible, "model " + cl.model + " fits no allowed instance");
  }
  auto configs = detail::node_configs(p, clusters);

  std::vector<double> max_contrib(clusters.size(), 0.0);
  for (const auto& c : configs)
    for (std::size_t i = 0; i < clusters.size(); ++i)
      max_contrib[i] = std::max(max_contrib[i], c.contribution[i]);

  struct Best {
    std::vector<double> sorted;
    int replicas = 0;
    std::vector<int> choice;
    bool set = false;
  } best;

  std::vector<int> choice(p.nodes, 0);
  std::vector<double> acc(clusters.size(), 0.0);

  std::function<void(int, int, int)> rec = [&](int node, int min_cfg, int replicas) {
    if (node == p.nodes) {
      std::vector<double> sorted = acc;
      std::sort(sorted.begin(), sorted.end());
      bool better = !best.set || detail::lex_less(best.sorted, sorted) ||
                    (sorted == best.sorted &&
                     (replicas < best.replicas ||
                      (replicas == best.replicas &&
                       std::vector<int>(choice.begin(), choice.end()) < best.choice)));
      if (better) best = Best{sorted, replicas, choice, true};
      return;
    }
    int rem = p.nodes - node;
    if (best.set) {
      std::vector<double> bound = acc;
      for (std::size_t i = 0; i < bound.size(); ++i) bound[i] += rem * max_contrib[i];
      std::sort(bound.begin(), bound.end());
      if (detail::lex_less(bound, best.sorted)) return;
    }
    for (int ci = min_cfg; ci < static_cast<int>(configs.size()); ++ci) {
      choice[node] = ci;
      for (std::size_t i = 0; i < clusters.size(); ++i) acc[i] += configs[ci].contribution[i];
      rec(node + 1, ci, replicas + configs[ci].replica_count);
      for (std::size_t i = 0; i < clusters.size(); ++i) acc[i] -= configs[ci].contribution[i];
    }
  };
  rec(0, 0, 0);

  Placement pl;
  for (int n = 0; n < p.nodes; ++n) {
    const auto& cfg = configs[best.choice[n]];
    exec::MIGLayout layout;
    for (const auto& s : cfg.slots) layout.sizes.push_back(s.size_gb);
    pl.node_layouts.push_back(layout);
    for (int si = 0; si < static_cast<int>(cfg.slots.size()); ++si) {
      const auto& s = cfg.slots[si];
      if (s.cluster < 0) continue;
      pl.replicas.push_back(ReplicaAssignment{clusters[s.cluster].model, n, si, s.size_gb,
                                              s.entry->batch, s.entry->throughput_qps,
                                              s.entry->memory_gb});
    }
  }
  for (int i = 0; i < static_cast<int>(p.components.size()); ++i)
    pl.throughput.push_back(component_throughput(pl, p, i));
  return pl;
}

/// Reference deployment: every node runs the whole pipeline on a full-GPU
/// instance. Co-resident components time-share the GPU at the balanced
/// pipeline rate 1 / sum(1/T); per-cluster batch points are chosen to
/// maximize that rate subject to the combined memory fitting the GPU.
inline Placement monolithic_baseline(const PlacementProblem& p) {
  auto clusters = detail::clusters_of(p);
  std::vector<std::vector<const exec::ProfileEntry*>> options(clusters.size());
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    if (!p.profiles->has(clusters[i].model, p.gpu_gb))
      fail(errc::infeasible, clusters[i].model + " has no full-GPU profile");
    for (const auto& e : p.profiles->entries(clusters[i].model, p.gpu_gb))
      if (e.batch <= clusters[i].max_batch && e.memory_gb <= p.gpu_gb)
        options[i].push_back(&e);
    if (options[i].empty()) fail(errc::infeasible, clusters[i].model + " unusable at full GPU");
  }
  std::vector<const exec::ProfileEntry*> pick(clusters.size()), best_pick;
  double best_rate = -1;
  std::function<void(std::size_t, double)> rec = [&](std::size_t i, double mem) {
    if (mem > p.gpu_gb) return;
    if (i == clusters.size()) {
      double inv = 0;
      for (const auto* e : pick) inv += 1.0 / e->throughput_qps;
      double rate = 1.0 / inv;
      if (rate > best_rate) {
        best_rate = rate;
        best_pick = pick;
      }
      return;
    }
    for (const auto* e : options[i]) {
      pick[i] = e;
      rec(i + 1, mem + e->memory_gb);
    }
  };
  rec(0, 0);
  if (best_rate < 0) fail(errc::infeasible, "combined models exceed node memory");

  Placement pl;
  for (int n = 0; n < p.nodes; ++n) {
    pl.node_layouts.push_back(exec::MIGLayout{{p.gpu_gb}});
    for (std::size_t i = 0; i < clusters.size(); ++i)
      pl.replicas.push_back(ReplicaAssignment{clusters[i].model, n, 0, p.gpu_gb,
                                              best_pick[i]->batch, best_rate,
                                              best_pick[i]->memory_gb});
  }
  for (int i = 0; i < static_cast<int>(p.components.size()); ++i)
    pl.throughput.push_back(component_throughput(pl, p, i));
  return pl;
}

// --- JSON interfaces --------------------------------------------------------

inline PlacementProblem problem_from_json(const nlohmann::json& j,
                                          const exec::ProfileTable& profiles) {
  PlacementProblem p;
  p.nodes = j.at("nodes").get<int>();
  p.gpu_gb = j.value("gpu_gb", 24.0);
  for (const auto& l : j.at("layouts"))
    p.layouts.push_back(exec::MIGLayout{l.get<std::vector<double>>()});
  for (const auto& c : j.at("components"))
    p.components.push_back(Component{c.at("id").get<std::string>(),
                                     c.at("model").get<std::string>(),
                                     c.value("max_batch", 1 << 30)});
  p.profiles = &profiles;
  return p;
}

inline nlohmann::json placement_to_json(const Placement& pl, const PlacementProblem& p) {
  nlohmann::json nodes = nlohmann::json::array();
  for (int n = 0; n < static_cast<int>(pl.node_layouts.size()); ++n) {
    nlohmann::json reps = nlohmann::json::array();
    for (const auto& r : pl.replicas) {
      if (r.node != n) continue;
      reps.push_back({{"model", r.model},
                      {"slot", r.slot},
                      {"size_gb", r.size_gb},
                      {"batch", r.batch},
                      {"throughput_qps", r.throughput_qps},
                      {"memory_gb", r.memory_gb}});
    }
    nodes.push_back({{"node", n}, {"layout", pl.node_layouts[n].sizes}, {"replicas", reps}});
  }
  nlohmann::json tp;
  for (int i = 0; i < static_cast<int>(p.components.size()); ++i)
    tp[p.components[i].id] = pl.throughput[i];
  return {{"nodes", nodes}, {"throughput", tp}};
}

inline Placement placement_from_json(const nlohmann::json& j, const PlacementProblem& p) {
  Placement pl;
  pl.node_layouts.resize(p.nodes);
  for (const auto& n : j.at("nodes")) {
    int idx = n.at("node").get<int>();
    pl.node_layouts.at(idx) = exec::MIGLayout{n.at("layout").get<std::vector<double>>()};
    for (const auto& r : n.at("replicas"))
      pl.replicas.push_back(ReplicaAssignment{
          r.at("model").get<std::string>(), idx, r.at("slot").get<int>(),
          r.at("size_gb").get<double>(), r.value("batch", 1),
          r.at("throughput_qps").get<double>(), r.value("memory_gb", 0.0)});
  }
  for (int i = 0; i < static_cast<int>(p.components.size()); ++i)
    pl.throughput.push_back(component_throughput(pl, p, i));
  return pl;
}

inline std::string placement_table(const Placement& pl, const PlacementProblem& p) {
  std::string out;
  char buf[160];
  for (int n = 0; n < static_cast<int>(pl.node_layouts.size()); ++n) {
    out += "node " + std::to_string(n) + " layout [";
    for (std::size_t i = 0; i < pl.node_layouts[n].sizes.size(); ++i)
      out += (i ? "," : "") + std::to_string(int(pl.node_layouts[n].sizes[i]));
    out += "]:";
    for (const auto& r : pl.replicas)
      if (r.node == n) out += " " + r.model + "@" + std::to_string(int(r.size_gb));
    out += "\n";
  }
  for (int i = 0; i < static_cast<int>(p.components.size()); ++i) {
    std::snprintf(buf, sizeof buf, "component %s (%s): %.3f qps\n", p.components[i].id.c_str(),
                  p.components[i].model.c_str(), pl.throughput[i]);
    out += buf;
  }
  return out;
}

}  // namespace vortex::planner
