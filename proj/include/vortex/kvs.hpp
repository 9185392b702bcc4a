#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vortex/common.hpp"
#include "vortex/sim.hpp"

namespace vortex::kvs {

using Key = std::string;

struct VersionedObject {
  Key key;
  std::uint64_t version = 0;  // 1..n per key, no gaps
  sim::micros timestamp = 0;
  Payload payload;
  bool stable = false;
};

struct TriggerEvent {
  Key key;
  Payload payload;
  std::uint64_t version = 0;  // 0 for trigger-put (nothing stored)
  sim::micros ts = 0;
  std::string pool;
  int shard = 0;
  int node = 0;  // replica the upcall runs on
};

using Handler = std::function<void(const TriggerEvent&)>;

/// Component functions addressable by trigger registrations. Shared between
/// the store and the runtime's component registry.
class HandlerRegistry {
 public:
  void add(const std::string& id, Handler h) {
    if (handlers_.count(id)) fail(errc::already_registered, "handler " + id);
    handlers_.emplace(id, std::move(h));
  }
  bool has(const std::string& id) const { return handlers_.count(id) > 0; }
  void fire(const std::string& id, const TriggerEvent& ev) const {
    auto it = handlers_.find(id);
    if (it == handlers_.end()) fail(errc::no_such_handler, id);
    it->second(ev);
  }

 private:
  std::map<std::string, Handler> handlers_;
};

struct ObjectPool {
  std::string prefix;
  int shard_count = 1;
  int replicas = 2;
  std::size_t version_cap = 0;  // 0 = unbounded
};

struct TriggerRegistration {
  std::string prefix;
  std::string handler_id;
};

struct LogEntry {
  std::string shard;  // "<pool-prefix>#<idx>"
  int replica = 0;
  std::uint64_t seq = 0;
  std::string op;
  Key key;
  std::uint64_t version = 0;
  sim::micros ts = 0;
};

/// True if `prefix` is a path prefix of `key` at a slash boundary.
inline bool path_prefix(std::string_view prefix, std::string_view key) {
  if (key.size() < prefix.size() || key.substr(0, prefix.size()) != prefix) return false;
  return key.size() == prefix.size() || key[prefix.size()] == '/';
}

/// Sharded, versioned, trigger-capable store. One coordinator order per
/// shard: every mutation of a shard runs through the single event loop, so
/// replica logs agree by construction. A version is stable once all replicas
/// of its shard have acknowledged it; the shard threshold is the minimum over
/// replicas of the highest contiguous acknowledged timestamp.
class Store {
 public:
  struct Options {
    sim::micros stabilization_delay_us = 50;
    sim::micros delivery_delay_us = 0;
    sim::micros failure_timeout_us = 10'000;
    int default_nodes = 8;  // node universe for pools without explicit members
    std::uint64_t seed = 1;
  };

  Store(sim::EventLoop& loop, HandlerRegistry& handlers) : Store(loop, handlers, Options()) {}
  Store(sim::EventLoop& loop, HandlerRegistry& handlers, Options opt)
      : loop_(loop), handlers_(handlers), opt_(opt), rng_(opt.seed) {}

  // --- pools ---------------------------------------------------------------

  ObjectPool create_pool(const std::string& prefix, int shard_count, int replicas,
                         std::size_t version_cap = 0) {
    if (prefix.empty() || shard_count < 1 || replicas < 1)
      fail(errc::bad_config, "pool " + prefix);
    for (const auto& [p, _] : pools_)
      if (path_prefix(p, prefix) || path_prefix(prefix, p))
        fail(errc::pool_exists, prefix + " overlaps " + p);
    Pool pool;
    pool.cfg = ObjectPool{prefix, shard_count, replicas, version_cap};
    pool.shards.resize(shard_count);
    for (int s = 0; s < shard_count; ++s) {
      auto& shard = pool.shards[s];
      shard.label = prefix + "#" + std::to_string(s);
      shard.members.resize(replicas);
      for (int r = 0; r < replicas; ++r) {
        int node = static_cast<int>((fnv1a64(prefix) + s * replicas + r) % opt_.default_nodes);
        shard.members[r] = Member{node, true, 0};
      }
      shard.rr_cursor = rng_.below(replicas);
    }
    pools_.emplace(prefix, std::move(pool));
    return pools_.at(prefix).cfg;
  }

  void set_shard_members(const std::string& prefix, int shard, std::vector<int> nodes) {
    auto& sh = shard_ref(prefix, shard);
    sh.members.clear();
    for (int n : nodes) sh.members.push_back(Member{n, true, 0});
    sh.rr_cursor = sh.members.empty() ? 0 : rng_.below(sh.members.size());
  }

  std::vector<int> shard_members(const std::string& prefix, int shard) {
    std::vector<int> out;
    for (const auto& m : shard_ref(prefix, shard).members) out.push_back(m.node);
    return out;
  }

  const ObjectPool& pool(const std::string& prefix) const {
    auto it = pools_.find(prefix);
    if (it == pools_.end()) fail(errc::no_such_pool, prefix);
    return it->second.cfg;
  }

  void set_node_active(int node, bool active) {
    for (auto& [_, p] : pools_)
      for (auto& sh : p.shards)
        for (auto& m : sh.members)
          if (m.node == node) m.active = active;
  }

  // --- affinity ------------------------------------------------------------

  void define_affinity_group(const std::string& group_key, const std::vector<Key>& members) {
    const Pool* pool = nullptr;
    for (const auto& k : members) {
      const Pool& p = pool_of(k);
      if (pool && pool != &p) fail(errc::bad_config, "affinity group spans pools");
      pool = &p;
    }
    for (const auto& k : members) affinity_[k] = group_key;
  }

  int shard_of(const Key& key) const {
    const Pool& p = pool_of(key);
    auto it = affinity_.find(key);
    const std::string& basis = it != affinity_.end() ? it->second : key;
    return static_cast<int>(fnv1a64(basis) % p.cfg.shard_count);
  }

  // --- writes --------------------------------------------------------------

  VersionedObject put(const Key& key, Payload payload) {
    Pool& p = pool_mut(key);
    Shard& sh = p.shards[shard_of(key)];
    sim::micros ts = std::max(loop_.now(), sh.last_ts + 1);
    return apply_put(p, sh, key, std::move(payload), ts);
  }

  /// Put with an explicit timestamp; the path the too-old rule guards.
  VersionedObject put_at(const Key& key, Payload payload, sim::micros ts) {
    Pool& p = pool_mut(key);
    Shard& sh = p.shards[shard_of(key)];
    if (ts <= sh.threshold())
      fail(errc::too_old, key + " ts " + std::to_string(ts) + " below stability threshold");
    return apply_put(p, sh, key, std::move(payload), ts);
  }

  /// Put acknowledged through stabilization: returns once the version is
  /// stable, so a subsequent get in the same session observes it.
  VersionedObject put_sync(const Key& key, Payload payload) {
    VersionedObject v = put(key, std::move(payload));
    Shard& sh = pool_mut(key).shards[shard_of(key)];
    loop_.run_while([&] { return sh.threshold() < v.timestamp; });
    v.stable = true;
    return v;
  }

  // --- trigger puts (nothing stored) ----------------------------------------

  void trigger_put_routed(const Key& key, Payload payload, int target) {
    Pool& p = pool_mut(key);
    Shard& sh = p.shards[shard_of(key)];
    bool member = std::any_of(sh.members.begin(), sh.members.end(),
                              [&](const Member& m) { return m.node == target; });
    if (!member) fail(errc::bad_route, key + " -> node " + std::to_string(target));
    schedule_delivery(p, sh, key, std::move(payload), target, opt_.delivery_delay_us);
  }

  void trigger_put_balanced(const Key& key, Payload payload) {
    Pool& p = pool_mut(key);
    Shard& sh = p.shards[shard_of(key)];
    // Round-robin over active members from a seeded offset.
    std::size_t n = sh.members.size();
    for (std::size_t i = 0; i < n; ++i) {
      Member& m = sh.members[(sh.rr_cursor + i) % n];
      if (m.active) {
        sh.rr_cursor = (sh.rr_cursor + i + 1) % n;
        schedule_delivery(p, sh, key, std::move(payload), m.node, opt_.delivery_delay_us);
        return;
      }
    }
    fail(errc::no_worker, key);
  }

  // --- reads ---------------------------------------------------------------

  VersionedObject get(const Key& key) {
    Pool& p = pool_mut(key);
    auto it = p.histories.find(key);
    if (it == p.histories.end() || it->second.empty()) fail(errc::not_found, key);
    auto& hist = it->second;
    auto newest_stable = [&]() -> const VersionedObject* {
      for (auto rit = hist.rbegin(); rit != hist.rend(); ++rit)
        if (rit->stable) return &*rit;
      return nullptr;
    };
    if (const VersionedObject* v = newest_stable()) return *v;
    // Only unstable versions: wait until stabilization catches up.
    if (!loop_.run_while([&] { return newest_stable() == nullptr; }))
      fail(errc::not_found, key + " never stabilized");
    return *newest_stable();
  }

  VersionedObject get_at(const Key& key, sim::micros t) {
    Pool& p = pool_mut(key);
    auto it = p.histories.find(key);
    if (it == p.histories.end() || it->second.empty()) fail(errc::not_found, key);
    const VersionedObject* best = nullptr;
    for (const auto& v : it->second)
      if (v.stable && v.timestamp <= t && (!best || v.version > best->version)) best = &v;
    if (!best) fail(errc::not_found, key + " at " + std::to_string(t));
    return *best;
  }

  std::vector<VersionedObject> get_versions(const Key& key, sim::micros from, sim::micros to) {
    if (from > to) fail(errc::bad_range, "inverted range");
    Pool& p = pool_mut(key);
    std::vector<VersionedObject> out;
    auto it = p.histories.find(key);
    if (it == p.histories.end()) return out;
    for (const auto& v : it->second)
      if (v.stable && v.timestamp >= from && v.timestamp <= to) out.push_back(v);
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.version < b.version; });
    return out;
  }

  // --- triggers ------------------------------------------------------------

  TriggerRegistration register_trigger(const std::string& prefix, const std::string& handler_id) {
    if (!handlers_.has(handler_id)) fail(errc::no_such_handler, handler_id);
    triggers_.push_back(TriggerRegistration{prefix, handler_id});
    return triggers_.back();
  }

  // --- stability -----------------------------------------------------------

  sim::micros stability_threshold(const std::string& prefix, int shard) {
    return shard_ref(prefix, shard).threshold();
  }

  // --- observability -------------------------------------------------------

  const std::vector<LogEntry>& replica_log(int node) const {
    static const std::vector<LogEntry> empty;
    auto it = logs_.find(node);
    return it == logs_.end() ? empty : it->second;
  }

  std::vector<int> logged_nodes() const {
    std::vector<int> out;
    for (const auto& [n, _] : logs_) out.push_back(n);
    return out;
  }

  std::string export_log_csv() const {
    std::string out = "shard_id,replica_id,seq,op,key,version,ts_us\n";
    for (const auto& [node, entries] : logs_)
      for (const auto& e : entries) {
        out += e.shard + "," + std::to_string(e.replica) + "," + std::to_string(e.seq) + "," +
               e.op + "," + e.key + "," + std::to_string(e.version) + "," + std::to_string(e.ts) +
               "\n";
      }
    return out;
  }

 private:
  struct Member {
    int node = 0;
    bool active = true;
    sim::micros acked_ts = 0;
  };

  struct Shard {
    std::string label;
    std::vector<Member> members;
    sim::micros last_ts = 0;
    std::size_t rr_cursor = 0;
    // Versions not yet past the threshold, in timestamp order.
    std::deque<std::pair<sim::micros, VersionedObject*>> pending;

    sim::micros threshold() const {
      sim::micros t = ~sim::micros{0};
      for (const auto& m : members) t = std::min(t, m.acked_ts);
      return members.empty() ? 0 : t;
    }
  };

  struct Pool {
    ObjectPool cfg;
    std::vector<Shard> shards;
    std::unordered_map<Key, std::deque<VersionedObject>> histories;
    std::unordered_map<Key, std::uint64_t> next_version;
  };

  const Pool& pool_of(const Key& key) const {
    for (const auto& [p, pool] : pools_)
      if (path_prefix(p, key)) return pool;
    fail(errc::no_such_pool, key);
  }
  Pool& pool_mut(const Key& key) { return const_cast<Pool&>(pool_of(key)); }

  Shard& shard_ref(const std::string& prefix, int shard) {
    auto it = pools_.find(prefix);
    if (it == pools_.end()) fail(errc::no_such_pool, prefix);
    if (shard < 0 || shard >= static_cast<int>(it->second.shards.size()))
      fail(errc::no_such_pool, prefix + "#" + std::to_string(shard));
    return it->second.shards[shard];
  }

  VersionedObject apply_put(Pool& p, Shard& sh, const Key& key, Payload payload, sim::micros ts) {
    auto& hist = p.histories[key];
    std::uint64_t version = ++p.next_version[key];
    if (!hist.empty()) ts = std::max(ts, hist.back().timestamp);
    sh.last_ts = std::max(sh.last_ts, ts);
    hist.push_back(VersionedObject{key, version, ts, payload, false});
    sh.pending.emplace_back(ts, &hist.back());
    // Identical total order on every replica: deliver log entry and trigger
    // upcalls member by member, in member order.
    for (std::size_t r = 0; r < sh.members.size(); ++r) {
      log(sh, static_cast<int>(r), "put", key, version, ts);
      fire_triggers(p, sh, key, payload, version, ts, sh.members[r].node);
    }
    schedule_acks(p, sh, ts);
    if (p.cfg.version_cap > 0) evict(p, hist);
    return hist.back();
  }

  void schedule_acks(Pool& p, Shard& sh, sim::micros ts) {
    for (std::size_t r = 0; r < sh.members.size(); ++r) {
      loop_.after(opt_.stabilization_delay_us, [this, &p, &sh, r, ts] {
        sh.members[r].acked_ts = std::max(sh.members[r].acked_ts, ts);
        stabilize(sh);
      });
    }
  }

  void stabilize(Shard& sh) {
    sim::micros th = sh.threshold();
    while (!sh.pending.empty() && sh.pending.front().first <= th) {
      sh.pending.front().second->stable = true;
      sh.pending.pop_front();
    }
  }

  void evict(Pool& p, std::deque<VersionedObject>& hist) {
    while (hist.size() > p.cfg.version_cap && hist.front().stable) hist.pop_front();
  }

  void fire_triggers(Pool& p, Shard& sh, const Key& key, const Payload& payload,
                     std::uint64_t version, sim::micros ts, int node) {
    for (const auto& reg : triggers_) {
      if (!path_prefix(reg.prefix, key)) continue;
      TriggerEvent ev{key, payload, version, ts, p.cfg.prefix,
                      static_cast<int>(&sh - p.shards.data()), node};
      handlers_.fire(reg.handler_id, ev);
    }
  }

  void schedule_delivery(Pool& p, Shard& sh, const Key& key, Payload payload, int target,
                         sim::micros delay) {
    loop_.after(delay, [this, &p, &sh, key, payload, target] {
      for (auto& m : sh.members) {
        if (m.node != target) continue;
        if (m.active) {
          log(sh, replica_index(sh, target), "trigger", key, 0, loop_.now());
          fire_triggers(p, sh, key, payload, 0, loop_.now(), target);
          return;
        }
        // Failure detected: reissue once to the lowest live member.
        int fallback = -1;
        for (const auto& cand : sh.members)
          if (cand.active && (fallback < 0 || cand.node < fallback)) fallback = cand.node;
        if (fallback >= 0)
          schedule_delivery(p, sh, key, std::move(payload), fallback, opt_.failure_timeout_us);
        return;
      }
    });
  }

  static int replica_index(const Shard& sh, int node) {
    for (std::size_t i = 0; i < sh.members.size(); ++i)
      if (sh.members[i].node == node) return static_cast<int>(i);
    return -1;
  }

  void log(const Shard& sh, int replica, const std::string& op, const Key& key,
           std::uint64_t version, sim::micros ts) {
    int node = sh.members[replica >= 0 ? replica : 0].node;
    auto& entries = logs_[node];
    entries.push_back(LogEntry{sh.label, replica, entries.size(), op, key, version, ts});
  }

  sim::EventLoop& loop_;
  HandlerRegistry& handlers_;
  Options opt_;
  sim::Rng rng_;
  std::map<std::string, Pool> pools_;
  std::unordered_map<Key, std::string> affinity_;
  std::vector<TriggerRegistration> triggers_;
  std::map<int, std::vector<LogEntry>> logs_;
};

}  // namespace vortex::kvs
