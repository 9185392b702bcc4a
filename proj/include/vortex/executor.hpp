#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "vortex/common.hpp"
#include "vortex/profile.hpp"
#include "vortex/sim.hpp"

namespace vortex::exec {

/// Multiset of MIG instance sizes that together sum to the node's GPU memory.
struct MIGLayout {
  std::vector<double> sizes;

  double total() const { return std::accumulate(sizes.begin(), sizes.end(), 0.0); }
};

enum class InstanceState { empty, preloading, ready, active, draining };

inline const char* state_name(InstanceState s) {
  switch (s) {
    case InstanceState::empty: return "empty";
    case InstanceState::preloading: return "preloading";
    case InstanceState::ready: return "ready";
    case InstanceState::active: return "active";
    case InstanceState::draining: return "draining";
  }
  return "?";
}

struct BusyInterval {
  sim::micros start = 0;
  sim::micros end = 0;
};

struct Instance {
  int node = 0;
  int slot = 0;
  double size_gb = 0;
  InstanceState state = InstanceState::empty;
  std::map<std::string, double> loaded;  // model -> resident GB
  sim::micros busy_until = 0;
  std::vector<BusyInterval> busy_log;

  double used_gb() const {
    double s = 0;
    for (const auto& [_, gb] : loaded) s += gb;
    return s;
  }
  std::string label() const { return std::to_string(node) + ":" + std::to_string(slot); }
};

/// Deterministic profile-driven simulated accelerator fleet. Each instance is
/// a serial resource; all instances share the one virtual clock.
class SimExecutor {
 public:
  struct Options {
    double load_delay_ms = 3000;  // per-model GPU load time
    bool jitter = false;
    double jitter_eps = 0.05;
    std::uint64_t seed = 1;
    std::set<double> allowed_sizes = {6, 12, 24};
  };

  SimExecutor(sim::EventLoop& loop, const ProfileTable& profiles)
      : SimExecutor(loop, profiles, Options()) {}
  SimExecutor(sim::EventLoop& loop, const ProfileTable& profiles, Options opt)
      : loop_(loop), profiles_(profiles), opt_(opt), rng_(opt.seed) {}

  int add_node(double gpu_gb = 24) {
    nodes_.push_back(Node{gpu_gb, {}});
    return static_cast<int>(nodes_.size() - 1);
  }

  int node_count() const { return static_cast<int>(nodes_.size()); }

  std::vector<Instance*> partition_node(int node, const MIGLayout& layout) {
    Node& n = node_ref(node);
    for (const auto& size : layout.sizes)
      if (!opt_.allowed_sizes.count(size))
        fail(errc::bad_layout, "size " + std::to_string(size));
    if (layout.total() != n.gpu_gb)
      fail(errc::bad_layout, "layout sums to " + std::to_string(layout.total()));
    for (const auto& inst : n.instances)
      if (inst->state == InstanceState::active || inst->busy_until > loop_.now())
        fail(errc::node_busy, "node " + std::to_string(node));
    n.instances.clear();
    std::vector<Instance*> out;
    for (std::size_t i = 0; i < layout.sizes.size(); ++i) {
      auto inst = std::make_unique<Instance>();
      inst->node = node;
      inst->slot = static_cast<int>(i);
      inst->size_gb = layout.sizes[i];
      out.push_back(inst.get());
      n.instances.push_back(std::move(inst));
    }
    return out;
  }

  Instance& instance(int node, int slot) {
    Node& n = node_ref(node);
    if (slot < 0 || slot >= static_cast<int>(n.instances.size()))
      fail(errc::not_found, "instance " + std::to_string(node) + ":" + std::to_string(slot));
    return *n.instances[slot];
  }

  std::vector<Instance*> instances_of(int node) {
    Node& n = node_ref(node);
    std::vector<Instance*> out;
    for (auto& i : n.instances) out.push_back(i.get());
    return out;
  }

  double latency_ms(const std::string& model, double size_gb, int batch) const {
    return profiles_.latency_ms(model, size_gb, batch);
  }

  /// Starts loading `model`; returns the simulated completion time. Loading
  /// occupies memory immediately and does not block other instances. With
  /// preload=true the instance parks in `ready` until explicitly activated.
  sim::micros load_model(Instance& inst, const std::string& model, bool preload = false,
                         int batch_cap = 1 << 30) {
    if (inst.loaded.count(model)) return loop_.now();
    double need = profiles_.memory_gb(model, inst.size_gb, batch_cap);
    if (inst.used_gb() + need > inst.size_gb)
      fail(errc::out_of_memory, model + " needs " + std::to_string(need) + "GB on " +
                                    std::to_string(inst.size_gb) + "GB instance");
    inst.loaded[model] = need;
    if (inst.state == InstanceState::empty) inst.state = InstanceState::preloading;
    // Loads on one instance serialize with whatever the instance is doing.
    sim::micros start = std::max(loop_.now(), inst.busy_until);
    sim::micros done = start + sim::micros(opt_.load_delay_ms * sim::kMilli);
    loop_.at(done, [&inst, preload] {
      if (inst.state == InstanceState::preloading)
        inst.state = InstanceState::ready;
      (void)preload;
    });
    // Execution may not begin before the load finishes.
    inst.busy_until = std::max(inst.busy_until, done);
    return done;
  }

  void unload_model(Instance& inst, const std::string& model) { inst.loaded.erase(model); }

  void activate(Instance& inst) {
    if (inst.state != InstanceState::ready)
      fail(errc::bad_transition, inst.label() + " activate from " + state_name(inst.state));
    inst.state = InstanceState::active;
  }

  void drain_state(Instance& inst) {
    if (inst.state != InstanceState::active)
      fail(errc::bad_transition, inst.label() + " drain from " + state_name(inst.state));
    inst.state = InstanceState::draining;
  }

  void release(Instance& inst) {
    inst.state = InstanceState::empty;
    inst.loaded.clear();
  }

  /// Occupies the instance exclusively for the profiled batch latency. A cold
  /// instance first pays the model load delay. Calls on_done(completion_time).
  void execute_batch(Instance& inst, const std::string& model, int batch,
                     std::function<void(sim::micros)> on_done) {
    if (!inst.loaded.count(model)) load_model(inst, model);  // cold path
    double lat_ms = profiles_.latency_ms(model, inst.size_gb, batch);
    if (opt_.jitter) lat_ms *= rng_.uniform(1.0 - opt_.jitter_eps, 1.0 + opt_.jitter_eps);
    sim::micros start = std::max(loop_.now(), inst.busy_until);
    sim::micros end = start + sim::micros(lat_ms * sim::kMilli);
    inst.busy_until = end;
    inst.busy_log.push_back(BusyInterval{start, end});
    loop_.at(end, [end, cb = std::move(on_done)] { cb(end); });
  }

  bool idle(const Instance& inst) const { return inst.busy_until <= loop_.now(); }

  /// Fraction of [from, to) the instance spent computing.
  double gract(const Instance& inst, sim::micros from, sim::micros to) const {
    if (to <= from) fail(errc::bad_range, "empty gract window");
    sim::micros busy = 0;
    for (const auto& iv : inst.busy_log) {
      sim::micros s = std::max(iv.start, from);
      sim::micros e = std::min(iv.end, to);
      if (e > s) busy += e - s;
    }
    return double(busy) / double(to - from);
  }

  /// Heatmap rows: node,instance,window_start_us,gract for consecutive
  /// windows of `window_us` covering [0, horizon).
  std::string export_gract_csv(sim::micros window_us, sim::micros horizon) const {
    std::string out = "node,instance,window_start_us,gract\n";
    char buf[64];
    for (const auto& n : nodes_) {
      for (const auto& inst : n.instances) {
        for (sim::micros w = 0; w < horizon; w += window_us) {
          double g = gract(*inst, w, std::min(w + window_us, horizon));
          std::snprintf(buf, sizeof buf, "%.6f", g);
          out += std::to_string(inst->node) + "," + std::to_string(inst->slot) + "," +
                 std::to_string(w) + "," + buf + "\n";
        }
      }
    }
    return out;
  }

  const ProfileTable& profiles() const { return profiles_; }
  sim::EventLoop& loop() { return loop_; }
  const Options& options() const { return opt_; }

 private:
  struct Node {
    double gpu_gb = 24;
    std::vector<std::unique_ptr<Instance>> instances;
  };

  Node& node_ref(int node) {
    if (node < 0 || node >= static_cast<int>(nodes_.size()))
      fail(errc::not_found, "node " + std::to_string(node));
    return nodes_[node];
  }

  sim::EventLoop& loop_;
  const ProfileTable& profiles_;
  Options opt_;
  sim::Rng rng_;
  std::vector<Node> nodes_;
};

}  // namespace vortex::exec
