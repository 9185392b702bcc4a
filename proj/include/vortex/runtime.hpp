#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "vortex/common.hpp"
#include "vortex/executor.hpp"
#include "vortex/kvs.hpp"
#include "vortex/sim.hpp"

namespace vortex::runtime {

struct StageSpec {
  std::string id;
  std::string model;
  int max_batch = 8;
  std::vector<std::string> incast;  // upstream stage ids, = in-edges
  std::vector<std::string> deps;    // affinity-group object keys
};

struct PipelineSpec {
  std::string name;
  std::vector<StageSpec> stages;
  std::vector<std::pair<std::string, std::string>> edges;
  std::string ingress;
  std::string egress;

  const StageSpec& stage(const std::string& id) const {
    for (const auto& s : stages)
      if (s.id == id) return s;
    fail(errc::bad_config, "no stage " + id);
  }

  std::vector<std::string> in_edges(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& [a, b] : edges)
      if (b == id) out.push_back(a);
    return out;
  }
  std::vector<std::string> out_edges(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& [a, b] : edges)
      if (a == id) out.push_back(b);
    return out;
  }
  std::vector<std::string> sources() const {
    std::vector<std::string> out;
    for (const auto& s : stages)
      if (in_edges(s.id).empty()) out.push_back(s.id);
    return out;
  }

  /// Kahn topological order; throws NotADag on a cycle.
  std::vector<std::string> topo_order() const {
    std::map<std::string, int> indeg;
    for (const auto& s : stages) indeg[s.id] = 0;
    for (const auto& [a, b] : edges) {
      if (!indeg.count(a) || !indeg.count(b)) fail(errc::bad_config, "edge names unknown stage");
      ++indeg[b];
    }
    std::deque<std::string> ready;
    for (const auto& s : stages)
      if (indeg[s.id] == 0) ready.push_back(s.id);
    std::vector<std::string> order;
    while (!ready.empty()) {
      auto id = ready.front();
      ready.pop_front();
      order.push_back(id);
      for (const auto& nxt : out_edges(id))
        if (--indeg[nxt] == 0) ready.push_back(nxt);
    }
    if (order.size() != stages.size()) fail(errc::not_a_dag, name);
    return order;
  }

  void validate() const {
    auto order = topo_order();
    if (stages.empty()) fail(errc::bad_config, "empty pipeline");
    stage(ingress);
    stage(egress);
    if (!in_edges(ingress).empty()) fail(errc::bad_config, "ingress has in-edges");
    if (!out_edges(egress).empty()) fail(errc::bad_config, "egress has out-edges");
    // Every stage reachable from the source set (parallel entry stages are
    // all fed at ingress).
    std::set<std::string> seen;
    std::deque<std::string> work;
    for (const auto& s : sources()) {
      seen.insert(s);
      work.push_back(s);
    }
    while (!work.empty()) {
      auto id = work.front();
      work.pop_front();
      for (const auto& nxt : out_edges(id))
        if (seen.insert(nxt).second) work.push_back(nxt);
    }
    if (seen.size() != stages.size()) fail(errc::bad_config, "unreachable stage");
    for (const auto& s : stages) {
      if (s.max_batch < 1) fail(errc::bad_config, s.id + " max_batch < 1");
      auto ins = in_edges(s.id);
      std::sort(ins.begin(), ins.end());
      auto inc = s.incast;
      std::sort(inc.begin(), inc.end());
      if (!inc.empty() && inc != ins) fail(errc::bad_config, s.id + " incast != in-edges");
    }
  }

  static PipelineSpec from_json(const nlohmann::json& j) {
    PipelineSpec p;
    p.name = j.at("name").get<std::string>();
    for (const auto& s : j.at("stages")) {
      StageSpec st;
      st.id = s.at("id").get<std::string>();
      st.model = s.at("model").get<std::string>();
      st.max_batch = s.value("max_batch", 8);
      if (s.contains("incast")) st.incast = s.at("incast").get<std::vector<std::string>>();
      if (s.contains("deps")) st.deps = s.at("deps").get<std::vector<std::string>>();
      p.stages.push_back(std::move(st));
    }
    for (const auto& e : j.at("edges")) p.edges.emplace_back(e.at(0), e.at(1));
    p.ingress = j.at("ingress").get<std::string>();
    p.egress = j.at("egress").get<std::string>();
    return p;
  }
};

struct StageTrace {
  sim::micros enqueue = 0, dispatch = 0, complete = 0, emit = 0;
  int instance = -1;
  int batch = 0;
};

struct QueryRecord {
  std::uint64_t id = 0;
  std::string pipeline;
  Payload payload;
  std::map<std::string, int> tags;  // stage -> pool member index, fixed at ingress
  sim::micros ingress_ts = 0, egress_ts = 0;
  std::map<std::string, StageTrace> stages;
  std::map<std::string, Payload> outputs;
  bool done = false;
  bool failed = false;
  int phase = 0;

  double latency_us() const { return double(egress_ts - ingress_ts); }
};

struct ExecLogEntry {
  std::uint64_t query = 0;
  std::string stage;
  int instance = -1;
  sim::micros enqueue = 0, dispatch = 0, complete = 0, emit = 0;
  int batch = 0;
};

struct SendRecord {
  std::string pipeline, from_stage, to_stage;
  int dest_node = -1;
  int count = 0;
  sim::micros ts = 0;
};

struct TagViolation {
  std::uint64_t query = 0;
  std::string stage;
  int tagged = -1, rerouted = -1;
};

using ComponentFn = std::function<std::vector<Payload>(const std::vector<Payload>&)>;

/// Executes pipeline DAGs over component pools: ingress admission with fixed
/// routing tags, per-stage pending queues, opportunistic batch formation,
/// matched-set joining for incast stages, and coalesced result handoff
/// through kvs trigger puts.
class Runtime {
 public:
  struct Options {
    std::uint64_t seed = 7;
    sim::micros incast_timeout_us = 60ull * sim::kSecond;
    bool warm_start = true;  // run loads to completion inside load_pipeline
  };

  Runtime(sim::EventLoop& loop, kvs::Store& store, kvs::HandlerRegistry& handlers,
          exec::SimExecutor& exe)
      : Runtime(loop, store, handlers, exe, Options()) {}
  Runtime(sim::EventLoop& loop, kvs::Store& store, kvs::HandlerRegistry& handlers,
          exec::SimExecutor& exe, Options opt)
      : loop_(loop), store_(store), handlers_(handlers), exec_(exe), opt_(opt), rng_(opt.seed) {}

  // --- components ------------------------------------------------------------

  std::string register_component(const std::string& model_id, ComponentFn fn) {
    if (components_.count(model_id)) fail(errc::already_registered, model_id);
    components_[model_id] = std::move(fn);
    // Also addressable as a kvs trigger handler under the same id.
    handlers_.add(model_id, [this, model_id](const kvs::TriggerEvent& ev) {
      trigger_invocations_[model_id].push_back(ev);
      components_[model_id]({ev.payload});
    });
    return model_id;
  }

  const std::vector<kvs::TriggerEvent>& trigger_invocations(const std::string& model_id) {
    return trigger_invocations_[model_id];
  }

  // --- pipeline lifecycle -----------------------------------------------------

  /// Maps placement replicas onto simulated accelerators: partitions each node
  /// per its layout and returns instance handles grouped by model.
  static std::map<std::string, std::vector<exec::Instance*>> apply_placement(
      exec::SimExecutor& exe, const std::vector<exec::MIGLayout>& node_layouts,
      const std::vector<std::tuple<std::string, int, int>>& replicas /* model,node,slot */) {
    while (exe.node_count() < static_cast<int>(node_layouts.size())) exe.add_node();
    for (int n = 0; n < static_cast<int>(node_layouts.size()); ++n)
      exe.partition_node(n, node_layouts[n]);
    std::map<std::string, std::vector<exec::Instance*>> out;
    for (const auto& [model, node, slot] : replicas)
      out[model].push_back(&exe.instance(node, slot));
    return out;
  }

  void load_pipeline(const PipelineSpec& spec,
                     const std::map<std::string, std::vector<exec::Instance*>>& pools) {
    load_pipeline(spec, pools, std::map<std::pair<std::string, exec::Instance*>, int>());
  }

  /// `batch_caps` optionally limits one replica's batch for a model below the
  /// stage's max_batch (placements may pick smaller batch points to fit
  /// co-resident models in memory).
  void load_pipeline(const PipelineSpec& spec,
                     const std::map<std::string, std::vector<exec::Instance*>>& pools,
                     const std::map<std::pair<std::string, exec::Instance*>, int>& batch_caps) {
    spec.validate();
    if (pipelines_.count(spec.name)) fail(errc::already_registered, spec.name);
    Pipeline pl;
    pl.spec = spec;
    pl.topo = spec.topo_order();
    for (const auto& st : spec.stages) {
      Stage stage;
      stage.spec = st;
      stage.pred = spec.in_edges(st.id);
      stage.succ = spec.out_edges(st.id);
      auto it = pools.find(st.model);
      if (it == pools.end() || it->second.empty())
        fail(errc::unschedulable, st.id + " (" + st.model + ") has no replicas");
      for (auto* inst : it->second) {
        Member m;
        m.inst = inst;
        auto cap = batch_caps.find({st.model, inst});
        if (cap != batch_caps.end()) m.max_batch = cap->second;
        int load_cap = m.max_batch;
        stage.pool.push_back(std::move(m));
        exec_.load_model(*inst, st.model, true, load_cap);
      }
      pl.stages.emplace(st.id, std::move(stage));
    }
    pipelines_.emplace(spec.name, std::move(pl));
    wire_kvs(pipelines_.at(spec.name));
    if (opt_.warm_start) {
      for (auto& [_, st] : pipelines_.at(spec.name).stages)
        for (auto& m : st.pool)
          loop_.run_while([&] { return !exec_.idle(*m.inst); });
      for (auto& [_, st] : pipelines_.at(spec.name).stages)
        for (auto& m : st.pool)
          if (m.inst->state == exec::InstanceState::ready) exec_.activate(*m.inst);
    }
  }

  bool has_pipeline(const std::string& name) const { return pipelines_.count(name) > 0; }

  // --- ingress ----------------------------------------------------------------

  std::uint64_t ingress_submit(const std::string& pipeline, Payload payload, int phase = 0) {
    Pipeline& pl = pipeline_ref(pipeline);
    if (!pl.accepting) fail(errc::bad_transition, pipeline + " is draining");
    // Routing decided up front for every stage; producers of an incast stage
    // inherit the same choice.
    std::map<std::string, int> tags;
    for (const auto& sid : pl.topo) tags[sid] = pick_member(pl.stages.at(sid));
    std::uint64_t qid = next_qid_++;
    QueryRecord rec;
    rec.id = qid;
    rec.pipeline = pipeline;
    rec.payload = std::move(payload);
    rec.tags = std::move(tags);
    rec.ingress_ts = loop_.now();
    rec.phase = phase;
    for (const auto& [sid, idx] : rec.tags) ++pl.stages.at(sid).pool[idx].outstanding;
    pl.records.emplace(qid, std::move(rec));
    ++pl.submitted;
    for (const auto& sid : pl.spec.sources()) enqueue(pl, sid, qid);
    return qid;
  }

  // --- queue plumbing (exposed for tests) --------------------------------------

  void enqueue(const std::string& pipeline, const std::string& stage, std::uint64_t qid) {
    enqueue(pipeline_ref(pipeline), stage, qid);
  }

  /// Buffers one upstream output for an incast stage; returns the query ids
  /// completed by this arrival.
  std::vector<std::uint64_t> join_matched_sets(const std::string& pipeline,
                                               const std::string& stage,
                                               const std::string& from, std::uint64_t qid,
                                               Payload payload) {
    Pipeline& pl = pipeline_ref(pipeline);
    Stage& st = pl.stages.at(stage);
    if (st.pred.size() < 2) fail(errc::bad_config, stage + " is not an incast stage");
    if (st.joined.count(qid) || st.partial[qid].count(from))
      fail(errc::duplicate_input, stage + "/" + from + " q" + std::to_string(qid));
    bool first = st.partial[qid].empty();
    st.partial[qid][from] = std::move(payload);
    if (first && opt_.incast_timeout_us > 0) {
      loop_.after(opt_.incast_timeout_us, [this, &pl, &st, qid] {
        auto it = st.partial.find(qid);
        if (it == st.partial.end()) return;  // completed in time
        st.partial.erase(it);
        auto rit = pl.records.find(qid);
        if (rit != pl.records.end() && !rit->second.done && !rit->second.failed) {
          rit->second.failed = true;
          ++pl.failed;
        }
      });
    }
    if (st.partial[qid].size() == st.pred.size()) {
      st.joined.insert(qid);
      auto& rec = pl.records.at(qid);
      Bytes merged;
      for (auto& [f, p] : st.partial[qid])
        if (p) merged.insert(merged.end(), p->begin(), p->end());
      rec.outputs["join:" + stage] = std::make_shared<const Bytes>(std::move(merged));
      st.partial.erase(qid);
      return {qid};
    }
    return {};
  }

  // --- elasticity hooks ---------------------------------------------------------

  int add_instance(const std::string& pipeline, const std::string& stage, exec::Instance* inst,
                   bool active = true) {
    Pipeline& pl = pipeline_ref(pipeline);
    Stage& st = stage_ref(pipeline, stage);
    Member m;
    m.inst = inst;
    m.active = active;
    m.activated_at = loop_.now();
    st.pool.push_back(std::move(m));
    // A new hosting node must join the stage's kvs pool to receive handoffs.
    std::string prefix = stage_pool_key(pl, stage);
    auto members = store_.shard_members(prefix, 0);
    if (std::find(members.begin(), members.end(), inst->node) == members.end()) {
      members.push_back(inst->node);
      store_.set_shard_members(prefix, 0, members);
    }
    return static_cast<int>(st.pool.size() - 1);
  }

  void activate_member(const std::string& pipeline, const std::string& stage, int idx) {
    Member& m = member_ref(pipeline, stage, idx);
    if (m.active) fail(errc::bad_transition, "already active");
    if (m.inst->state == exec::InstanceState::ready) exec_.activate(*m.inst);
    m.active = true;
    m.activated_at = loop_.now();
  }

  /// Stops new tags; queued and in-flight work still completes.
  void deactivate_member(const std::string& pipeline, const std::string& stage, int idx) {
    Member& m = member_ref(pipeline, stage, idx);
    m.active = false;
    if (m.inst->state == exec::InstanceState::active) exec_.drain_state(*m.inst);
  }

  int active_count(const std::string& pipeline, const std::string& stage) {
    Stage& st = stage_ref(pipeline, stage);
    int n = 0;
    for (const auto& m : st.pool) n += m.active ? 1 : 0;
    return n;
  }

  std::size_t pool_size(const std::string& pipeline, const std::string& stage) {
    return stage_ref(pipeline, stage).pool.size();
  }

  exec::Instance* member_instance(const std::string& pipeline, const std::string& stage,
                                  int idx) {
    return member_ref(pipeline, stage, idx).inst;
  }

  std::size_t queue_depth(const std::string& pipeline, const std::string& stage, int idx) {
    return member_ref(pipeline, stage, idx).queue.size();
  }

  bool member_active(const std::string& pipeline, const std::string& stage, int idx) {
    return member_ref(pipeline, stage, idx).active;
  }

  int member_outstanding(const std::string& pipeline, const std::string& stage, int idx) {
    return member_ref(pipeline, stage, idx).outstanding;
  }

  // --- draining -------------------------------------------------------------------

  std::uint64_t in_flight(const std::string& pipeline) {
    Pipeline& pl = pipeline_ref(pipeline);
    return pl.submitted - pl.completed - pl.failed;
  }

  std::uint64_t drain(const std::string& pipeline,
                      sim::micros timeout_us = 3600ull * sim::kSecond) {
    Pipeline& pl = pipeline_ref(pipeline);
    pl.accepting = false;
    std::uint64_t t0_inflight = in_flight(pipeline);
    sim::micros deadline = loop_.now() + timeout_us;
    while (in_flight(pipeline) > 0) {
      auto next = loop_.next_time();
      if (!next || *next > deadline) {
        loop_.run_until(deadline);
        fail(errc::drain_timeout,
             pipeline + " remaining " + std::to_string(in_flight(pipeline)));
      }
      loop_.step();
    }
    pl.accepting = true;
    return t0_inflight;
  }

  void wedge(const std::string& pipeline, const std::string& stage) {
    stage_ref(pipeline, stage).wedged = true;
  }

  // --- observability ----------------------------------------------------------------

  const QueryRecord& record(const std::string& pipeline, std::uint64_t qid) {
    return pipeline_ref(pipeline).records.at(qid);
  }
  std::vector<const QueryRecord*> completed_records(const std::string& pipeline) {
    Pipeline& pl = pipeline_ref(pipeline);
    std::vector<const QueryRecord*> out;
    for (const auto& [_, r] : pl.records)
      if (r.done) out.push_back(&r);
    return out;
  }
  std::uint64_t submitted(const std::string& pipeline) { return pipeline_ref(pipeline).submitted; }
  std::uint64_t completed(const std::string& pipeline) { return pipeline_ref(pipeline).completed; }
  std::uint64_t failed(const std::string& pipeline) { return pipeline_ref(pipeline).failed; }

  const std::vector<ExecLogEntry>& exec_log() const { return exec_log_; }
  const std::vector<SendRecord>& send_log() const { return send_log_; }
  const std::vector<TagViolation>& tag_violations() const { return tag_violations_; }

  std::string export_exec_log_csv() const {
    std::string out = "query_id,stage,instance,enqueue_us,dispatch_us,complete_us,emit_us,batch_size\n";
    for (const auto& e : exec_log_)
      out += std::to_string(e.query) + "," + e.stage + "," + std::to_string(e.instance) + "," +
             std::to_string(e.enqueue) + "," + std::to_string(e.dispatch) + "," +
             std::to_string(e.complete) + "," + std::to_string(e.emit) + "," +
             std::to_string(e.batch) + "\n";
    return out;
  }

 private:
  struct Member {
    exec::Instance* inst = nullptr;
    bool active = true;
    int outstanding = 0;  // tags issued minus stage completions
    std::deque<std::uint64_t> queue;
    bool executing = false;
    bool check_scheduled = false;
    sim::micros activated_at = 0;
    int max_batch = 1 << 30;  // replica-level cap from the placement
  };

  struct Stage {
    StageSpec spec;
    std::vector<std::string> pred, succ;
    std::vector<Member> pool;
    std::map<std::uint64_t, std::map<std::string, Payload>> partial;
    std::set<std::uint64_t> joined;
    bool wedged = false;
  };

  struct Pipeline {
    PipelineSpec spec;
    std::vector<std::string> topo;
    std::map<std::string, Stage> stages;
    bool accepting = true;
    std::uint64_t submitted = 0, completed = 0, failed = 0;
    std::map<std::uint64_t, QueryRecord> records;
  };

  Pipeline& pipeline_ref(const std::string& name) {
    auto it = pipelines_.find(name);
    if (it == pipelines_.end()) fail(errc::no_such_pipeline, name);
    return it->second;
  }
  Stage& stage_ref(const std::string& pipeline, const std::string& stage) {
    auto& pl = pipeline_ref(pipeline);
    auto it = pl.stages.find(stage);
    if (it == pl.stages.end()) fail(errc::bad_config, "no stage " + stage);
    return it->second;
  }
  Member& member_ref(const std::string& pipeline, const std::string& stage, int idx) {
    Stage& st = stage_ref(pipeline, stage);
    if (idx < 0 || idx >= static_cast<int>(st.pool.size()))
      fail(errc::not_found, stage + " member " + std::to_string(idx));
    return st.pool[idx];
  }

  /// Power-of-two-choices on outstanding load, ties to the lowest index.
  int pick_member(Stage& st) {
    std::vector<int> active;
    for (int i = 0; i < static_cast<int>(st.pool.size()); ++i)
      if (st.pool[i].active) active.push_back(i);
    if (active.empty()) fail(errc::no_worker, st.spec.id);
    if (active.size() == 1) return active[0];
    std::size_t a = rng_.below(active.size());
    std::size_t b = rng_.below(active.size() - 1);
    if (b >= a) ++b;
    int ia = active[a], ib = active[b];
    if (st.pool[ia].outstanding != st.pool[ib].outstanding)
      return st.pool[ia].outstanding < st.pool[ib].outstanding ? ia : ib;
    return std::min(ia, ib);
  }

  static std::string stage_pool_key(const Pipeline& pl, const std::string& stage) {
    return "/pipe/" + pl.spec.name + "/" + stage;
  }

  void wire_kvs(Pipeline& pl) {
    for (auto& [sid, st] : pl.stages) {
      std::vector<int> nodes;
      for (const auto& m : st.pool)
        if (std::find(nodes.begin(), nodes.end(), m.inst->node) == nodes.end())
          nodes.push_back(m.inst->node);
      std::string prefix = stage_pool_key(pl, sid);
      store_.create_pool(prefix, 1, static_cast<int>(nodes.size()));
      store_.set_shard_members(prefix, 0, nodes);
      std::string handler_id = "stage" + prefix;
      std::string pname = pl.spec.name;
      handlers_.add(handler_id, [this, pname, sid](const kvs::TriggerEvent& ev) {
        deliver_bundle(pname, sid, ev);
      });
      store_.register_trigger(prefix, handler_id);
    }
  }

  // Bundle wire format: "from|dest_node|qid,qid,...". Payloads themselves stay
  // in-process; the bundle only names them.
  static Payload encode_bundle(const std::string& from, int dest,
                               const std::vector<std::uint64_t>& qids) {
    std::string s = from + "|" + std::to_string(dest) + "|";
    for (std::size_t i = 0; i < qids.size(); ++i)
      s += (i ? "," : "") + std::to_string(qids[i]);
    return make_payload(s);
  }

  void deliver_bundle(const std::string& pipeline, const std::string& stage,
                      const kvs::TriggerEvent& ev) {
    auto parts = split(payload_str(ev.payload), '|');
    if (parts.size() != 3) return;
    int dest = std::stoi(parts[1]);
    if (ev.node != dest) return;  // replicated (persisted) delivery: not ours
    Pipeline& pl = pipeline_ref(pipeline);
    Stage& st = pl.stages.at(stage);
    for (const auto& tok : split(parts[2], ',')) {
      if (tok.empty()) continue;
      std::uint64_t qid = std::stoull(tok);
      auto rit = pl.records.find(qid);
      if (rit == pl.records.end() || rit->second.failed) continue;
      Payload out = rit->second.outputs.count(parts[0]) ? rit->second.outputs[parts[0]]
                                                        : rit->second.payload;
      if (st.pred.size() >= 2) {
        for (auto ready : join_matched_sets(pipeline, stage, parts[0], qid, out))
          enqueue(pl, stage, ready);
      } else {
        enqueue(pl, stage, qid);
      }
    }
  }

  void enqueue(Pipeline& pl, const std::string& stage, std::uint64_t qid) {
    Stage& st = pl.stages.at(stage);
    QueryRecord& rec = pl.records.at(qid);
    int idx = rec.tags.at(stage);
    if (!st.pool[idx].active) {
      // Tag points at a deactivated instance: fall back deterministically.
      std::vector<int> active;
      for (int i = 0; i < static_cast<int>(st.pool.size()); ++i)
        if (st.pool[i].active) active.push_back(i);
      if (active.empty()) fail(errc::no_worker, stage);
      int fallback = active[idx % active.size()];
      tag_violations_.push_back(TagViolation{qid, stage, idx, fallback});
      idx = fallback;
      rec.tags[stage] = idx;
    }
    Member& m = st.pool[idx];
    auto& tr = rec.stages[stage];
    tr.enqueue = loop_.now();
    tr.instance = idx;
    m.queue.push_back(qid);
    maybe_dispatch(pl, st, idx);
  }

  void maybe_dispatch(Pipeline& pl, Stage& st, int idx) {
    Member& m = st.pool[idx];
    if (st.wedged || m.executing || m.queue.empty()) return;
    if (!exec_.idle(*m.inst)) {
      if (!m.check_scheduled) {
        m.check_scheduled = true;
        loop_.at(m.inst->busy_until, [this, &pl, &st, idx] {
          st.pool[idx].check_scheduled = false;
          maybe_dispatch(pl, st, idx);
        });
      }
      return;
    }
    // Opportunistic: take what is queued, never wait to fill the batch.
    int k = std::min<int>(static_cast<int>(m.queue.size()),
                          std::min(st.spec.max_batch, m.max_batch));
    std::vector<std::uint64_t> batch(m.queue.begin(), m.queue.begin() + k);
    m.queue.erase(m.queue.begin(), m.queue.begin() + k);
    std::vector<Payload> inputs;
    for (auto qid : batch) {
      auto& rec = pl.records.at(qid);
      auto& tr = rec.stages[st.spec.id];
      tr.dispatch = loop_.now();
      tr.batch = k;
      Payload in = rec.payload;
      if (!st.pred.empty()) {
        std::string key = st.pred.size() >= 2 ? "join:" + st.spec.id : st.pred.front();
        if (rec.outputs.count(key)) in = rec.outputs[key];
      }
      inputs.push_back(std::move(in));
    }
    m.executing = true;
    exec_.execute_batch(*m.inst, st.spec.model, k,
                        [this, &pl, &st, idx, batch = std::move(batch),
                         inputs = std::move(inputs)](sim::micros) {
                          complete_batch(pl, st, idx, batch, inputs);
                        });
  }

  void complete_batch(Pipeline& pl, Stage& st, int idx, const std::vector<std::uint64_t>& batch,
                      const std::vector<Payload>& inputs) {
    Member& m = st.pool[idx];
    m.executing = false;
    std::vector<Payload> outputs = inputs;
    auto cit = components_.find(st.spec.model);
    if (cit != components_.end()) outputs = cit->second(inputs);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      QueryRecord& rec = pl.records.at(batch[i]);
      rec.outputs[st.spec.id] = outputs[i];
      auto& tr = rec.stages[st.spec.id];
      tr.complete = loop_.now();
      --m.outstanding;
    }
    emit_results(pl, st, idx, batch);
    maybe_dispatch(pl, st, idx);
  }

  void emit_results(Pipeline& pl, Stage& st, int idx, const std::vector<std::uint64_t>& batch) {
    sim::micros now = loop_.now();
    for (auto qid : batch) {
      QueryRecord& rec = pl.records.at(qid);
      auto& tr = rec.stages[st.spec.id];
      tr.emit = now;
      exec_log_.push_back(ExecLogEntry{qid, st.spec.id, idx, tr.enqueue, tr.dispatch, tr.complete,
                                       tr.emit, tr.batch});
      if (st.spec.id == pl.spec.egress) {
        rec.egress_ts = now;
        rec.done = true;
        ++pl.completed;
      }
    }
    // Results bound for one downstream node coalesce into a single send.
    for (const auto& succ : st.succ) {
      Stage& ds = pl.stages.at(succ);
      std::map<int, std::vector<std::uint64_t>> by_node;
      for (auto qid : batch) {
        QueryRecord& rec = pl.records.at(qid);
        if (rec.failed) continue;
        by_node[ds.pool[rec.tags.at(succ)].inst->node].push_back(qid);
      }
      for (auto& [node, qids] : by_node) {
        send_log_.push_back(SendRecord{pl.spec.name, st.spec.id, succ, node,
                                       static_cast<int>(qids.size()), now});
        store_.trigger_put_routed(stage_pool_key(pl, succ),
                                  encode_bundle(st.spec.id, node, qids), node);
      }
    }
  }

  sim::EventLoop& loop_;
  kvs::Store& store_;
  kvs::HandlerRegistry& handlers_;
  exec::SimExecutor& exec_;
  Options opt_;
  sim::Rng rng_;
  std::map<std::string, Pipeline> pipelines_;
  std::map<std::string, ComponentFn> components_;
  std::map<std::string, std::vector<kvs::TriggerEvent>> trigger_invocations_;
  std::uint64_t next_qid_ = 1;
  std::vector<ExecLogEntry> exec_log_;
  std::vector<SendRecord> send_log_;
  std::vector<TagViolation> tag_violations_;
};

}  // namespace vortex::runtime
