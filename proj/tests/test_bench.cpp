#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <string>
#include <vector>

#include "vortex/bench.hpp"

using namespace vortex;
using Catch::Matchers::WithinAbs;

namespace {

struct World {
  sim::EventLoop loop;
  kvs::HandlerRegistry handlers;
  kvs::Store store{loop, handlers};
  exec::ProfileTable profiles;
  exec::SimExecutor ex;
  runtime::Runtime rt{loop, store, handlers, ex};

  explicit World(int replicas = 1, int max_batch = 8) : profiles(make_profiles()), ex(loop, profiles) {
    runtime::PipelineSpec s;
    s.name = "line";
    s.stages = {{"A", "mA", max_batch, {}, {}}, {"C", "mC", max_batch, {}, {}}};
    s.edges = {{"A", "C"}};
    s.ingress = "A";
    s.egress = "C";
    std::map<std::string, std::vector<exec::Instance*>> pools;
    int n = ex.add_node();
    ex.partition_node(n, exec::MIGLayout{{6, 6, 6, 6}});
    for (int i = 0; i < replicas; ++i) {
      pools["mA"].push_back(&ex.instance(n, i));
      pools["mC"].push_back(&ex.instance(n, i));
    }
    rt.load_pipeline(s, pools);
  }

  static exec::ProfileTable make_profiles() {
    exec::ProfileTable t;
    for (const char* m : {"mA", "mC"}) {
      t.add(m, 6, exec::ProfileEntry{1, 10, 100, 1});
      t.add(m, 6, exec::ProfileEntry{8, 40, 200, 1});
    }
    return t;
  }
};

bench::WorkloadSpec steady(double qps, std::uint64_t count, const std::string& arrival,
                           std::uint64_t seed = 42) {
  bench::WorkloadSpec w;
  w.pipeline = "line";
  w.phases = {bench::Phase{"steady", qps, count, arrival}};
  w.seed = seed;
  return w;
}

}  // namespace

TEST_CASE("nearest-rank percentile") {
  CHECK(bench::percentile({10}, 5) == 10.0);
  CHECK(bench::percentile({10}, 95) == 10.0);
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(i);
  CHECK(bench::percentile(v, 50) == 50.0);
  CHECK(bench::percentile(v, 95) == 95.0);
  CHECK(bench::percentile(v, 5) == 5.0);
  CHECK(bench::percentile({3, 1, 2}, 50) == 2.0);  // order-free
  CHECK_THROWS_AS(bench::percentile({}, 50), error);

  // Property against the rank definition on random samples.
  sim::Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s;
    std::size_t n = 1 + rng.below(40);
    for (std::size_t i = 0; i < n; ++i) s.push_back(double(rng.below(1000)));
    double p = 1 + double(rng.below(99));
    double r = bench::percentile(s, p);
    std::size_t rank = std::size_t(std::ceil(p / 100.0 * double(n)));
    std::size_t le = 0, lt = 0;
    bool member = false;
    for (double x : s) {
      le += x <= r ? 1 : 0;
      lt += x < r ? 1 : 0;
      member |= x == r;
    }
    CHECK(member);
    CHECK(le >= rank);   // at least `rank` values do not exceed it
    CHECK(lt < rank);    // fewer than `rank` values are strictly below it
  }
}

TEST_CASE("slo miss rate") {
  CHECK(bench::slo_miss_rate({100, 300, 200, 201}, 200) == 0.5);
  CHECK(bench::slo_miss_rate({1, 2}, 10) == 0.0);
  CHECK_THROWS_AS(bench::slo_miss_rate({}, 10), error);
}

TEST_CASE("least squares slope") {
  CHECK_THAT(bench::ls_slope({{0, 0}, {1, 2}, {2, 4}, {3, 6}}), WithinAbs(2.0, 1e-12));
  CHECK(bench::ls_slope({{0, 5}, {1, 5}, {2, 5}}) == 0.0);
  CHECK(bench::ls_slope({{1, 1}}) == 0.0);
}

TEST_CASE("constant arrivals are exactly spaced") {
  sim::Rng rng(1);
  bench::Phase ph{"p", 10, 5, "constant"};
  auto t = bench::arrival_times(ph, 1000, rng);
  CHECK(t == std::vector<sim::micros>{1000, 101000, 201000, 301000, 401000});
}

TEST_CASE("poisson arrivals are seeded and have the right mean gap") {
  bench::Phase ph{"p", 100, 10000, "poisson"};
  sim::Rng a(42), b(42), c(7);
  auto ta = bench::arrival_times(ph, 0, a);
  auto tb = bench::arrival_times(ph, 0, b);
  auto tc = bench::arrival_times(ph, 0, c);
  CHECK(ta == tb);
  CHECK(ta != tc);
  double mean_gap = double(ta.back() - ta.front()) / double(ta.size() - 1);
  CHECK_THAT(mean_gap, WithinAbs(10000.0, 500.0));  // 1/rate = 10ms +- 5%
}

TEST_CASE("workload spec parsing") {
  auto j = nlohmann::json{
      {"pipeline", "line"},
      {"phases", {{{"rate_qps", 10.0}, {"count", 5}, {"arrival", "poisson"}}}},
      {"slo_ms", {100.0}},
      {"seed", 3}};
  auto w = bench::WorkloadSpec::from_json(j);
  CHECK(w.phases.size() == 1);
  CHECK(w.phases[0].arrival == "poisson");
  CHECK(w.slo_ms == std::vector<double>{100.0});
  CHECK(w.seed == 3);

  j["phases"][0]["arrival"] = "bursty";
  CHECK_THROWS_AS(bench::WorkloadSpec::from_json(j), error);
  j["phases"][0]["arrival"] = "constant";
  j["phases"][0]["count"] = 0;
  CHECK_THROWS_AS(bench::WorkloadSpec::from_json(j), error);
}

TEST_CASE("driver completes an underloaded run") {
  World w(/*replicas=*/2);
  bench::Driver drv(w.loop, w.rt);
  auto rep = drv.run(steady(50, 500, "constant"));

  CHECK(rep.submitted == 500);
  CHECK(rep.completed == 500);
  CHECK(rep.failed == 0);
  REQUIRE(rep.rows.size() == 500);
  for (std::size_t i = 1; i < rep.rows.size(); ++i) CHECK(rep.rows[i].id > rep.rows[i - 1].id);
  REQUIRE(rep.phases.size() == 1);
  const auto& ph = rep.phases[0];
  CHECK(ph.completed == 500);
  CHECK_FALSE(ph.backlogged);
  CHECK(ph.p50_ms >= 20.0);           // two 10ms stages minimum
  CHECK(ph.p95_ms < 200.0);           // comfortably inside SLO
  CHECK(ph.miss_rate[0] == 0.0);
  CHECK_THAT(ph.achieved_qps, WithinAbs(50.0, 5.0));

  // Row content: latency from planned arrival, path covers both stages.
  for (const auto& r : rep.rows) {
    CHECK(r.latency_us == double(r.egress) - double(r.arrival));
    CHECK(r.path.find("A:") != std::string::npos);
    CHECK(r.path.find("C:") != std::string::npos);
    CHECK(r.miss.size() == 2);
  }

  auto csv = rep.queries_csv();
  CHECK(csv.rfind("query_id,phase,arrival_us,ingress_us,egress_us,latency_us,"
                  "miss_200ms,miss_500ms,path",
                  0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 501);
}

TEST_CASE("overload is flagged as backlog") {
  World w(/*replicas=*/1, /*max_batch=*/1);  // capacity 100 qps
  bench::Driver drv(w.loop, w.rt);
  auto rep = drv.run(steady(300, 600, "constant"));
  CHECK(rep.completed == 600);  // open loop still finishes eventually
  REQUIRE(rep.phases.size() == 1);
  CHECK(rep.phases[0].backlogged);
  CHECK(rep.phases[0].p95_ms > rep.phases[0].p5_ms);
  CHECK(rep.phases[0].miss_rate[1] > 0.5);  // most queries blow the 500ms SLO
}

TEST_CASE("arrivals are open loop") {
  // Submission times must match the planned schedule even under overload.
  World w(1, 1);
  bench::Driver::Options opt;
  std::vector<sim::micros> submit_ts;
  opt.on_submit = [&](std::uint64_t, sim::micros ts) { submit_ts.push_back(ts); };
  bench::Driver drv(w.loop, w.rt, opt);
  sim::micros t0 = w.loop.now();
  drv.run(steady(300, 100, "constant"));
  REQUIRE(submit_ts.size() == 100);
  for (std::size_t i = 0; i < submit_ts.size(); ++i)
    CHECK(submit_ts[i] == t0 + sim::micros(std::llround(double(i) * 1e6 / 300.0)));
}

TEST_CASE("multi-phase reports per-phase stats") {
  World w(2);
  bench::Driver drv(w.loop, w.rt);
  bench::WorkloadSpec spec;
  spec.pipeline = "line";
  spec.phases = {bench::Phase{"warm", 20, 100, "constant"},
                 bench::Phase{"hot", 80, 200, "poisson"}};
  auto rep = drv.run(spec);
  REQUIRE(rep.phases.size() == 2);
  CHECK(rep.phases[0].name == "warm");
  CHECK(rep.phases[1].name == "hot");
  CHECK(rep.phases[0].completed == 100);
  CHECK(rep.phases[1].completed == 200);
  CHECK_THAT(rep.phases[0].achieved_qps, WithinAbs(20.0, 3.0));
  CHECK_THAT(rep.phases[1].achieved_qps, WithinAbs(80.0, 12.0));
}

TEST_CASE("same seed gives byte-identical reports") {
  auto run_csv = [] {
    World w(2);
    bench::Driver drv(w.loop, w.rt);
    return drv.run(steady(50, 300, "poisson", 42)).queries_csv();
  };
  auto a = run_csv();
  CHECK(a == run_csv());
  auto diff_seed = [] {
    World w(2);
    bench::Driver drv(w.loop, w.rt);
    return drv.run(steady(50, 300, "poisson", 43)).queries_csv();
  };
  CHECK(a != diff_seed());
}

TEST_CASE("curve csv shape") {
  std::vector<bench::CurvePoint> pts = {{10, 1, 2, 3, 0, 0, 9.5, false},
                                        {20, 1, 2, 3, 0.25, 0.1, 19.0, true}};
  auto csv = bench::curve_csv(pts);
  CHECK(csv.rfind("offered_qps,p5_ms,p50_ms,p95_ms,miss_rate_200,miss_rate_500,achieved_qps", 0) ==
        0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("20.000,") != std::string::npos);
  CHECK(csv.find("0.250000,") != std::string::npos);
}
