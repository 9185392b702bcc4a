#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "vortex/common.hpp"
#include "vortex/executor.hpp"
#include "vortex/runtime.hpp"
#include "vortex/sim.hpp"

namespace vortex::elasticity {

/// Exponentially weighted moving average with a half-life expressed in
/// simulated time: after one half-life the old estimate carries weight 0.5.
class Ewma {
 public:
  explicit Ewma(sim::micros half_life_us) : half_life_(half_life_us) {}

  void observe(sim::micros now, double sample) {
    if (!seeded_) {
      value_ = sample;
      seeded_ = true;
      last_ = now;
      return;
    }
    double dt = double(now >= last_ ? now - last_ : 0);
    double alpha = 1.0 - std::pow(0.5, dt / double(half_life_));
    value_ += alpha * (sample - value_);
    last_ = now;
  }

  double value() const { return value_; }
  bool seeded() const { return seeded_; }

 private:
  sim::micros half_life_;
  double value_ = 0;
  bool seeded_ = false;
  sim::micros last_ = 0;
};

enum class ActionKind { preload, activate, deactivate, capacity_alert };

inline const char* action_name(ActionKind k) {
  switch (k) {
    case ActionKind::preload: return "preload";
    case ActionKind::activate: return "activate";
    case ActionKind::deactivate: return "deactivate";
    case ActionKind::capacity_alert: return "capacity_alert";
  }
  return "?";
}

struct Action {
  sim::micros ts = 0;
  ActionKind kind = ActionKind::preload;
  std::string stage;
  int node = -1, slot = -1;
  int active_after = 0;
};

/// Anticipatory scaling for one pipeline: tracks the arrival-rate EWMA per
/// stage, preloads standby instances before they are needed, activates them
/// when load demands it, and retires extras after a hold period.
class Controller {
 public:
  struct Options {
    double preload_threshold = 0.7;     // utilization that triggers warm standby
    double activate_threshold = 0.9;    // utilization that promotes standbys
    double scale_down_threshold = 0.3;  // utilization that retires extras
    double target_utilization = 0.8;    // sizing sets capacity so util ~= this
    sim::micros hold_us = 10 * sim::kSecond;
    sim::micros half_life_us = 2 * sim::kSecond;
    sim::micros tick_us = 100 * sim::kMilli;
    int floor = 1;
  };

  Controller(sim::EventLoop& loop, runtime::Runtime& rt, exec::SimExecutor& exe,
             std::string pipeline)
      : Controller(loop, rt, exe, std::move(pipeline), Options()) {}
  Controller(sim::EventLoop& loop, runtime::Runtime& rt, exec::SimExecutor& exe,
             std::string pipeline, Options opt)
      : loop_(loop), rt_(rt), exec_(exe), pipeline_(std::move(pipeline)), opt_(opt) {}

  /// Registers a spare instance the controller may preload onto. Spares are
  /// consumed lowest node first.
  void add_standby(const std::string& stage, exec::Instance* inst) {
    auto& s = state_[stage];
    s.spares.push_back(inst);
    std::sort(s.spares.begin(), s.spares.end(), [](const auto* a, const auto* b) {
      return a->node != b->node ? a->node < b->node : a->slot < b->slot;
    });
  }

  void record_arrival(const std::string& stage) { ++state_[stage].arrivals; }

  /// Direct rate observation (qps) for callers that meter arrivals themselves.
  void observe_rate(const std::string& stage, double qps) {
    auto& s = state_[stage];
    ensure_ewma(s);
    s.ewma->observe(loop_.now(), qps);
  }

  double rate_estimate(const std::string& stage) {
    auto& s = state_[stage];
    ensure_ewma(s);
    return s.ewma->value();
  }

  /// Sum of per-replica peak throughput over the stage's active members.
  double capacity_qps(const std::string& stage, const std::string& model, int max_batch) {
    double cap = 0;
    auto n = rt_.pool_size(pipeline_, stage);
    for (std::size_t i = 0; i < n; ++i) {
      auto* inst = rt_.member_instance(pipeline_, stage, static_cast<int>(i));
      if (member_active(stage, static_cast<int>(i)))
        cap += exec_.profiles().peak(model, inst->size_gb, max_batch).throughput_qps;
    }
    return cap;
  }

  /// Starts the periodic control loop: converts arrival counts into a rate
  /// sample each tick, then applies scaling decisions.
  void start(const runtime::PipelineSpec& spec) {
    spec_ = spec;
    schedule_tick();
  }

  /// One decision pass for `stage` against the current EWMA. Exposed so tests
  /// and the periodic tick share the exact same policy.
  void decide(const std::string& stage, const std::string& model, int max_batch) {
    auto& s = state_[stage];
    ensure_ewma(s);
    if (!s.ewma->seeded()) return;
    double rate = s.ewma->value();
    double cap = capacity_qps(stage, model, max_batch);
    if (cap <= 0) return;
    double util = rate / cap;
    double t_per = replica_qps(stage, model, max_batch);
    if (t_per <= 0) return;

    if (util >= opt_.preload_threshold) {
      // Size for the target utilization midpoint; ceil covers the remainder.
      int need = static_cast<int>(std::ceil((rate / opt_.target_utilization - cap) / t_per));
      if (need > 0) {
        int warm = warm_standby_count(stage);
        for (int i = warm; i < need; ++i)
          if (!preload_one(stage, model)) {
            log_.push_back(Action{loop_.now(), ActionKind::capacity_alert, stage, -1, -1,
                                  active_count(stage)});
            break;
          }
        if (util >= opt_.activate_threshold) {
          int to_activate = std::min(need, warm_standby_count(stage));
          for (int i = 0; i < to_activate; ++i) activate_one(stage);
        }
      }
      s.last_high = loop_.now();
      return;
    }

    if (util <= opt_.scale_down_threshold && active_count(stage) > opt_.floor &&
        loop_.now() >= s.last_high + opt_.hold_us &&
        loop_.now() >= s.last_scale_down + opt_.hold_us) {
      deactivate_one(stage);
      s.last_scale_down = loop_.now();
    }
  }

  const std::vector<Action>& action_log() const { return log_; }

  std::string export_action_log_csv() const {
    std::string out = "ts_us,kind,component,node,instance,pool_active_after\n";
    for (const auto& a : log_)
      out += std::to_string(a.ts) + "," + action_name(a.kind) + "," + a.stage + "," +
             std::to_string(a.node) + "," + std::to_string(a.slot) + "," +
             std::to_string(a.active_after) + "\n";
    return out;
  }

  const Options& options() const { return opt_; }

 private:
  struct StageState {
    std::unique_ptr<Ewma> ewma;
    std::uint64_t arrivals = 0;
    std::vector<exec::Instance*> spares;
    std::vector<int> standby_members;  // preloaded, inactive pool indices
    sim::micros last_high = 0;
    sim::micros last_scale_down = 0;
  };

  void ensure_ewma(StageState& s) {
    if (!s.ewma) s.ewma = std::make_unique<Ewma>(opt_.half_life_us);
  }

  bool member_active(const std::string& stage, int idx) {
    return rt_.member_active(pipeline_, stage, idx);
  }

  int active_count(const std::string& stage) { return rt_.active_count(pipeline_, stage); }

  int warm_standby_count(const std::string& stage) {
    return static_cast<int>(state_[stage].standby_members.size());
  }

  double replica_qps(const std::string& stage, const std::string& model, int max_batch) {
    auto n = rt_.pool_size(pipeline_, stage);
    if (n == 0) return 0;
    auto* inst = rt_.member_instance(pipeline_, stage, 0);
    return exec_.profiles().peak(model, inst->size_gb, max_batch).throughput_qps;
  }

  bool preload_one(const std::string& stage, const std::string& model) {
    auto& s = state_[stage];
    if (s.spares.empty()) return false;
    exec::Instance* inst = s.spares.front();
    s.spares.erase(s.spares.begin());
    exec_.load_model(*inst, model, true);
    int idx = rt_.add_instance(pipeline_, stage, inst, /*active=*/false);
    s.standby_members.push_back(idx);
    log_.push_back(Action{loop_.now(), ActionKind::preload, stage, inst->node, inst->slot,
                          active_count(stage)});
    return true;
  }

  void activate_one(const std::string& stage) {
    auto& s = state_[stage];
    if (s.standby_members.empty()) return;
    int idx = s.standby_members.front();
    s.standby_members.erase(s.standby_members.begin());
    deactivated_[stage].erase(idx);
    rt_.activate_member(pipeline_, stage, idx);
    auto* inst = rt_.member_instance(pipeline_, stage, idx);
    log_.push_back(Action{loop_.now(), ActionKind::activate, stage, inst->node, inst->slot,
                          active_count(stage)});
  }

  void deactivate_one(const std::string& stage) {
    // Retire the most recently added active member; original replicas stay.
    int n = static_cast<int>(rt_.pool_size(pipeline_, stage));
    for (int idx = n - 1; idx >= 0; --idx) {
      auto& s = state_[stage];
      bool standby = std::find(s.standby_members.begin(), s.standby_members.end(), idx) !=
                     s.standby_members.end();
      if (standby || deactivated_[stage].count(idx)) continue;
      rt_.deactivate_member(pipeline_, stage, idx);
      deactivated_[stage].insert(idx);
      s.standby_members.push_back(idx);  // still loaded: cheap to reactivate
      auto* inst = rt_.member_instance(pipeline_, stage, idx);
      log_.push_back(Action{loop_.now(), ActionKind::deactivate, stage, inst->node, inst->slot,
                            active_count(stage)});
      return;
    }
  }

  void schedule_tick() {
    loop_.after(opt_.tick_us, [this] {
      for (const auto& st : spec_.stages) {
        auto& s = state_[st.id];
        ensure_ewma(s);
        double qps = double(s.arrivals) / (double(opt_.tick_us) / double(sim::kSecond));
        s.arrivals = 0;
        s.ewma->observe(loop_.now(), qps);
        decide(st.id, st.model, st.max_batch);
      }
      schedule_tick();
    });
  }

  sim::EventLoop& loop_;
  runtime::Runtime& rt_;
  exec::SimExecutor& exec_;
  std::string pipeline_;
  Options opt_;
  runtime::PipelineSpec spec_;
  std::map<std::string, StageState> state_;
  std::map<std::string, std::set<int>> deactivated_;
  std::vector<Action> log_;
};

}  // namespace vortex::elasticity
