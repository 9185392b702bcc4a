#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>
#include <string>
#include <vector>

#include "vortex/kvs.hpp"

using namespace vortex;

namespace {

struct Fixture {
  sim::EventLoop loop;
  kvs::HandlerRegistry handlers;
  kvs::Store store{loop, handlers};
};

}  // namespace

TEST_CASE("pool creation") {
  Fixture f;
  auto pool = f.store.create_pool("/flmr", 4, 2);
  CHECK(pool.shard_count == 4);
  CHECK(pool.replicas == 2);

  CHECK_THROWS_MATCHES(f.store.create_pool("/flmr", 1, 1), error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::StartsWith("PoolExists")));
  // A nested prefix overlaps the existing pool.
  CHECK_THROWS_AS(f.store.create_pool("/flmr/models", 1, 1), error);
  // A sibling with a shared string prefix but different path component is fine.
  CHECK_NOTHROW(f.store.create_pool("/flmr2", 1, 1));
}

TEST_CASE("shard mapping is deterministic and affinity-aware") {
  Fixture f;
  f.store.create_pool("/p", 4, 2);

  CHECK(f.store.shard_of("/p/k1") == f.store.shard_of("/p/k1"));
  CHECK_THROWS_AS(f.store.shard_of("/nopool/x"), error);

  f.store.define_affinity_group("grp", {"/p/a", "/p/b"});
  CHECK(f.store.shard_of("/p/a") == f.store.shard_of("/p/b"));
  // The group's shard is the hash of the group key, not of any member.
  CHECK(f.store.shard_of("/p/a") == int(fnv1a64("grp") % 4));

  // 1000 random keys cover all 4 shards, matching the direct hash oracle.
  std::set<int> seen;
  for (int i = 0; i < 1000; ++i) {
    std::string k = "/p/key" + std::to_string(i);
    int s = f.store.shard_of(k);
    CHECK(s == int(fnv1a64(k) % 4));
    seen.insert(s);
  }
  CHECK(seen.size() == 4);
}

TEST_CASE("put versions and replica order") {
  Fixture f;
  f.store.create_pool("/p", 1, 3);

  auto v1 = f.store.put("/p/k", make_payload("a"));
  CHECK(v1.version == 1);
  auto v2 = f.store.put("/p/k", make_payload("b"));
  CHECK(v2.version == 2);
  CHECK(v2.timestamp >= v1.timestamp);

  // Every replica logged the same (key, version) sequence.
  auto nodes = f.store.logged_nodes();
  REQUIRE(nodes.size() == 3);
  std::vector<std::pair<std::string, std::uint64_t>> ref;
  for (const auto& e : f.store.replica_log(nodes[0])) ref.emplace_back(e.key, e.version);
  for (int n : nodes) {
    std::vector<std::pair<std::string, std::uint64_t>> got;
    for (const auto& e : f.store.replica_log(n)) got.emplace_back(e.key, e.version);
    CHECK(got == ref);
  }
}

TEST_CASE("back-dated put below stability threshold is rejected") {
  Fixture f;
  f.store.create_pool("/p", 1, 2);
  auto v = f.store.put_sync("/p/k", make_payload("a"));
  REQUIRE(f.store.stability_threshold("/p", f.store.shard_of("/p/k")) >= v.timestamp);
  CHECK_THROWS_MATCHES(
      f.store.put_at("/p/k", make_payload("late"), v.timestamp), error,
      Catch::Matchers::MessageMatches(Catch::Matchers::StartsWith("TooOld")));
  // A timestamp above the threshold is accepted.
  CHECK_NOTHROW(f.store.put_at("/p/k", make_payload("ok"), f.loop.now() + 1000));
}

TEST_CASE("routed trigger puts") {
  Fixture f;
  f.store.create_pool("/p", 1, 3);
  f.store.set_shard_members("/p", 0, {1, 2, 3});
  std::vector<int> fired;
  f.handlers.add("h", [&](const kvs::TriggerEvent& ev) { fired.push_back(ev.node); });
  f.store.register_trigger("/p", "h");

  f.store.trigger_put_routed("/p/k", make_payload("x"), 2);
  f.loop.run_all();
  CHECK(fired == std::vector<int>{2});

  CHECK_THROWS_MATCHES(f.store.trigger_put_routed("/p/k", make_payload("x"), 9), error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::StartsWith("BadRoute")));

  // Dead target: exactly one eventual invocation, on the lowest live member.
  fired.clear();
  f.store.set_node_active(2, false);
  f.store.trigger_put_routed("/p/k", make_payload("x"), 2);
  f.loop.run_all();
  CHECK(fired == std::vector<int>{1});
}

TEST_CASE("balanced trigger puts") {
  Fixture f;
  f.store.create_pool("/p", 1, 3);
  f.store.set_shard_members("/p", 0, {1, 2, 3});
  std::map<int, int> count;
  f.handlers.add("h", [&](const kvs::TriggerEvent& ev) { ++count[ev.node]; });
  f.store.register_trigger("/p", "h");

  SECTION("single active member is the forced choice") {
    f.store.set_node_active(1, false);
    f.store.set_node_active(3, false);
    f.store.trigger_put_balanced("/p/k", make_payload("x"));
    f.loop.run_all();
    CHECK(count[2] == 1);
  }

  SECTION("3000 triggers spread 1000 +/- 10% per member") {
    for (int i = 0; i < 3000; ++i) f.store.trigger_put_balanced("/p/k", make_payload("x"));
    f.loop.run_all();
    for (int n : {1, 2, 3}) {
      CHECK(count[n] >= 900);
      CHECK(count[n] <= 1100);
    }
  }

  SECTION("no active member") {
    for (int n : {1, 2, 3}) f.store.set_node_active(n, false);
    CHECK_THROWS_MATCHES(f.store.trigger_put_balanced("/p/k", make_payload("x")), error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::StartsWith("NoWorker")));
  }
}

TEST_CASE("get semantics") {
  Fixture f;
  f.store.create_pool("/p", 1, 2);

  CHECK_THROWS_MATCHES(f.store.get("/p/never"), error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::StartsWith("NotFound")));

  auto v1 = f.store.put_sync("/p/k", make_payload("v1"));
  CHECK(payload_str(f.store.get("/p/k").payload) == "v1");

  // While v2 is unstable, get returns the stable v1; after stabilization, v2.
  f.store.put("/p/k", make_payload("v2"));
  CHECK(f.store.get("/p/k").version == v1.version);
  f.loop.run_all();
  CHECK(f.store.get("/p/k").version == v1.version + 1);
  CHECK(payload_str(f.store.get("/p/k").payload) == "v2");
}

TEST_CASE("read-your-writes after acknowledged put") {
  Fixture f;
  f.store.create_pool("/p", 2, 3);
  for (int i = 0; i < 50; ++i) {
    auto v = f.store.put_sync("/p/k" + std::to_string(i % 5), make_payload(std::to_string(i)));
    auto got = f.store.get("/p/k" + std::to_string(i % 5));
    CHECK(got.version >= v.version);
  }
}

TEST_CASE("time-indexed reads") {
  Fixture f;
  f.store.create_pool("/p", 1, 2);
  auto a = f.store.put_at("/p/k", make_payload("a"), 10);
  auto b = f.store.put_at("/p/k", make_payload("b"), 20);
  f.loop.run_all();

  CHECK(f.store.get_at("/p/k", 15).version == a.version);
  CHECK(f.store.get_at("/p/k", 20).version == b.version);
  CHECK_THROWS_AS(f.store.get_at("/p/k", 5), error);

  // Stable past is immutable: identical result on repeated calls.
  auto r1 = f.store.get_at("/p/k", 15);
  auto r2 = f.store.get_at("/p/k", 15);
  CHECK(r1.version == r2.version);
  CHECK(payload_str(r1.payload) == payload_str(r2.payload));
}

TEST_CASE("get_versions matches a linear-scan oracle") {
  Fixture f;
  f.store.create_pool("/p", 1, 2);
  sim::Rng rng(99);

  std::vector<std::pair<sim::micros, std::uint64_t>> written;  // (ts, version)
  sim::micros ts = 100;
  for (int i = 0; i < 200; ++i) {
    ts += 1 + rng.below(50);
    auto v = f.store.put_at("/p/k", make_payload("p" + std::to_string(i)), ts);
    written.emplace_back(v.timestamp, v.version);
  }
  f.loop.run_all();

  CHECK_THROWS_MATCHES(f.store.get_versions("/p/k", 50, 10), error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::StartsWith("BadRange")));
  CHECK(f.store.get_versions("/p/k", 0, 50).empty());

  for (int trial = 0; trial < 50; ++trial) {
    sim::micros from = rng.below(ts + 100);
    sim::micros to = from + rng.below(ts);
    std::vector<std::uint64_t> oracle;
    for (const auto& [wts, wv] : written)
      if (wts >= from && wts <= to) oracle.push_back(wv);
    std::sort(oracle.begin(), oracle.end());
    std::vector<std::uint64_t> got;
    for (const auto& v : f.store.get_versions("/p/k", from, to)) got.push_back(v.version);
    CHECK(got == oracle);
  }
}

TEST_CASE("trigger registration scope and timing") {
  Fixture f;
  f.store.create_pool("/a", 1, 2);
  f.store.create_pool("/b", 1, 2);
  std::vector<std::string> a_keys, b_keys;
  f.handlers.add("ha", [&](const kvs::TriggerEvent& ev) { a_keys.push_back(ev.key); });
  f.handlers.add("hb", [&](const kvs::TriggerEvent& ev) { b_keys.push_back(ev.key); });

  CHECK_THROWS_MATCHES(f.store.register_trigger("/a", "missing"), error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::StartsWith("NoSuchHandler")));

  // A put before registration never fires retroactively.
  f.store.put("/a/pre", make_payload("x"));
  f.store.register_trigger("/a", "ha");
  f.store.register_trigger("/b", "hb");
  CHECK(a_keys.empty());

  f.store.put("/a/k", make_payload("x"));
  f.store.put("/b/k", make_payload("y"));
  f.loop.run_all();
  CHECK(a_keys == std::vector<std::string>{"/a/k", "/a/k"});  // once per replica
  CHECK(b_keys == std::vector<std::string>{"/b/k", "/b/k"});
}

TEST_CASE("stability threshold is zero when fresh and non-decreasing") {
  Fixture f;
  f.store.create_pool("/p", 1, 3);
  CHECK(f.store.stability_threshold("/p", 0) == 0);

  sim::micros prev = 0;
  for (int i = 0; i < 30; ++i) {
    auto v = f.store.put("/p/k", make_payload(std::to_string(i)));
    f.loop.run_all();
    auto th = f.store.stability_threshold("/p", 0);
    CHECK(th >= v.timestamp);
    CHECK(th >= prev);
    prev = th;
  }
}

TEST_CASE("seeded fuzz: contiguity, order, determinism, immutability") {
  Fixture f;
  f.store.create_pool("/p", 4, 3);
  sim::Rng rng(1234);

  std::map<std::string, std::uint64_t> last_version;
  for (int i = 0; i < 2000; ++i) {
    std::string key = "/p/k" + std::to_string(rng.below(20));
    auto v = f.store.put(key, make_payload(std::to_string(i)));
    CHECK(v.version == last_version[key] + 1);  // contiguous 1..n
    last_version[key] = v.version;
    if (rng.below(4) == 0) f.loop.run_until(f.loop.now() + 60);
  }
  f.loop.run_all();

  // Replica logs of each shard agree pairwise.
  std::map<std::string, std::vector<std::pair<std::string, std::uint64_t>>> per_shard_ref;
  for (int n : f.store.logged_nodes()) {
    std::map<std::string, std::vector<std::pair<std::string, std::uint64_t>>> mine;
    for (const auto& e : f.store.replica_log(n)) mine[e.shard].emplace_back(e.key, e.version);
    for (auto& [shard, seq] : mine) {
      auto it = per_shard_ref.find(shard);
      if (it == per_shard_ref.end())
        per_shard_ref.emplace(shard, seq);
      else
        CHECK(it->second == seq);
    }
  }

  // get_at below threshold is deterministic.
  for (const auto& [key, _] : last_version) {
    sim::micros th = f.store.stability_threshold("/p", f.store.shard_of(key));
    if (th == 0) continue;
    auto r1 = f.store.get_at(key, th);
    auto r2 = f.store.get_at(key, th);
    CHECK(r1.version == r2.version);
  }
}
