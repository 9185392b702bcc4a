#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vortex/common.hpp"
#include "vortex/runtime.hpp"
#include "vortex/sim.hpp"

namespace vortex::bench {

struct Phase {
  std::string name;
  double rate_qps = 1;
  std::uint64_t count = 0;
  std::string arrival = "constant";  // constant | poisson
};

struct WorkloadSpec {
  std::string pipeline;
  std::vector<Phase> phases;
  std::vector<double> slo_ms = {200, 500};
  std::uint64_t seed = 42;

  static WorkloadSpec from_json(const nlohmann::json& j) {
    WorkloadSpec w;
    w.pipeline = j.at("pipeline").get<std::string>();
    for (const auto& p : j.at("phases")) {
      Phase ph;
      ph.name = p.value("name", "phase" + std::to_string(w.phases.size()));
      ph.rate_qps = p.at("rate_qps").get<double>();
      ph.count = p.at("count").get<std::uint64_t>();
      ph.arrival = p.value("arrival", "constant");
      if (ph.rate_qps <= 0 || ph.count == 0) fail(errc::bad_config, "phase " + ph.name);
      if (ph.arrival != "constant" && ph.arrival != "poisson")
        fail(errc::bad_config, "arrival " + ph.arrival);
      w.phases.push_back(std::move(ph));
    }
    if (j.contains("slo_ms")) w.slo_ms = j.at("slo_ms").get<std::vector<double>>();
    w.seed = j.value("seed", 42);
    return w;
  }
};

/// Open-loop arrival schedule for one phase starting at `start`. Constant
/// phases space arrivals exactly 1/rate apart; poisson draws seeded
/// exponential gaps. Arrivals never depend on completions.
inline std::vector<sim::micros> arrival_times(const Phase& ph, sim::micros start, sim::Rng& rng) {
  std::vector<sim::micros> out;
  out.reserve(ph.count);
  double gap_us = double(sim::kSecond) / ph.rate_qps;
  double t = double(start);
  for (std::uint64_t i = 0; i < ph.count; ++i) {
    if (ph.arrival == "poisson")
      t += rng.exp_gap(ph.rate_qps / double(sim::kSecond));
    else
      t = double(start) + double(i) * gap_us;
    out.push_back(sim::micros(std::llround(t)));
  }
  return out;
}

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) fail(errc::no_data, "percentile of empty sample");
  std::sort(v.begin(), v.end());
  std::size_t rank = std::size_t(std::ceil(p / 100.0 * double(v.size())));
  rank = std::min(std::max<std::size_t>(rank, 1), v.size());
  return v[rank - 1];
}

inline double slo_miss_rate(const std::vector<double>& latencies_us, double target_us) {
  if (latencies_us.empty()) fail(errc::no_data, "miss rate of empty sample");
  std::size_t miss = 0;
  for (double l : latencies_us) miss += l > target_us ? 1 : 0;
  return double(miss) / double(latencies_us.size());
}

/// Least-squares slope of y over x; used on in-flight samples to detect an
/// unboundedly growing backlog.
inline double ls_slope(const std::vector<std::pair<double, double>>& pts) {
  if (pts.size() < 2) return 0;
  double n = double(pts.size()), sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& [x, y] : pts) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  double denom = n * sxx - sx * sx;
  return denom == 0 ? 0 : (n * sxy - sx * sy) / denom;
}

struct QueryRow {
  std::uint64_t id = 0;
  int phase = 0;
  sim::micros arrival = 0, ingress = 0, egress = 0;
  double latency_us = 0;
  std::vector<bool> miss;  // one per slo target
  std::string path;        // stage:instance;...
};

struct PhaseStats {
  std::string name;
  double offered_qps = 0;
  double achieved_qps = 0;
  double p5_ms = 0, p50_ms = 0, p95_ms = 0;
  std::vector<double> miss_rate;  // one per slo target
  bool backlogged = false;
  std::uint64_t completed = 0;
};

struct RunReport {
  std::vector<double> slo_ms;
  std::vector<QueryRow> rows;
  std::vector<PhaseStats> phases;
  std::uint64_t submitted = 0, completed = 0, failed = 0;

  std::string queries_csv() const {
    std::string out = "query_id,phase,arrival_us,ingress_us,egress_us,latency_us";
    for (double s : slo_ms) out += ",miss_" + std::to_string(int(s)) + "ms";
    out += ",path\n";
    for (const auto& r : rows) {
      out += std::to_string(r.id) + "," + std::to_string(r.phase) + "," +
             std::to_string(r.arrival) + "," + std::to_string(r.ingress) + "," +
             std::to_string(r.egress) + "," + std::to_string(std::uint64_t(r.latency_us));
      for (bool m : r.miss) out += m ? ",1" : ",0";
      out += "," + r.path + "\n";
    }
    return out;
  }
};

/// Drives an open-loop workload into a loaded pipeline and reduces the
/// runtime's query records into per-phase statistics.
class Driver {
 public:
  struct Options {
    sim::micros sample_every_us = 100 * sim::kMilli;
    double steady_trim = 0.10;  // fraction dropped at each end of a phase
    double backlog_slope_qps = 1.0;
    sim::micros horizon_us = 24ull * 3600 * sim::kSecond;
    std::function<void(std::uint64_t seq, sim::micros ts)> on_submit;  // test hook
  };

  Driver(sim::EventLoop& loop, runtime::Runtime& rt) : Driver(loop, rt, Options()) {}
  Driver(sim::EventLoop& loop, runtime::Runtime& rt, Options opt)
      : loop_(loop), rt_(rt), opt_(opt) {}

  RunReport run(const WorkloadSpec& spec) {
    sim::Rng rng(spec.seed);
    struct Planned {
      sim::micros t;
      int phase;
    };
    std::vector<Planned> plan;
    sim::micros cursor = loop_.now();
    std::vector<std::pair<sim::micros, sim::micros>> phase_span;
    for (std::size_t p = 0; p < spec.phases.size(); ++p) {
      auto times = arrival_times(spec.phases[p], cursor, rng);
      for (auto t : times) plan.push_back(Planned{t, int(p)});
      phase_span.emplace_back(times.front(), times.back());
      cursor = times.back() + sim::micros(std::llround(double(sim::kSecond) /
                                                       spec.phases[p].rate_qps));
    }

    std::map<std::uint64_t, std::pair<sim::micros, int>> meta;  // qid -> (arrival, phase)
    std::uint64_t seq = 0;
    for (const auto& pl : plan) {
      loop_.at(pl.t, [this, &spec, &meta, pl, seq] {
        if (opt_.on_submit) opt_.on_submit(seq, pl.t);
        auto qid = rt_.ingress_submit(spec.pipeline, make_payload("q"), pl.phase);
        meta[qid] = {pl.t, pl.phase};
      });
      ++seq;
    }

    // In-flight samples for backlog detection.
    std::vector<std::pair<double, double>> samples;
    std::function<void()> sample = [&] {
      samples.emplace_back(double(loop_.now()) / double(sim::kSecond),
                           double(rt_.in_flight(spec.pipeline)));
      if (loop_.now() < cursor + opt_.sample_every_us) loop_.after(opt_.sample_every_us, sample);
    };
    loop_.after(opt_.sample_every_us, sample);

    sim::micros deadline = loop_.now() + opt_.horizon_us;
    loop_.run_while([&] {
      return (rt_.submitted(spec.pipeline) < plan.size() || rt_.in_flight(spec.pipeline) > 0) &&
             loop_.now() < deadline;
    });

    return reduce(spec, meta, phase_span, samples);
  }

 private:
  RunReport reduce(const WorkloadSpec& spec,
                   const std::map<std::uint64_t, std::pair<sim::micros, int>>& meta,
                   const std::vector<std::pair<sim::micros, sim::micros>>& phase_span,
                   const std::vector<std::pair<double, double>>& samples) {
    RunReport rep;
    rep.slo_ms = spec.slo_ms;
    rep.submitted = rt_.submitted(spec.pipeline);
    rep.completed = rt_.completed(spec.pipeline);
    rep.failed = rt_.failed(spec.pipeline);

    for (const auto& [qid, m] : meta) {
      const auto& rec = rt_.record(spec.pipeline, qid);
      if (!rec.done) continue;
      QueryRow row;
      row.id = qid;
      row.phase = m.second;
      row.arrival = m.first;
      row.ingress = rec.ingress_ts;
      row.egress = rec.egress_ts;
      row.latency_us = double(rec.egress_ts) - double(m.first);  // queueing included
      for (double s : spec.slo_ms) row.miss.push_back(row.latency_us > s * sim::kMilli);
      for (const auto& [sid, tr] : rec.stages)
        row.path += (row.path.empty() ? "" : ";") + sid + ":" + std::to_string(tr.instance);
      rep.rows.push_back(std::move(row));
    }
    std::sort(rep.rows.begin(), rep.rows.end(),
              [](const QueryRow& a, const QueryRow& b) { return a.id < b.id; });

    for (std::size_t p = 0; p < spec.phases.size(); ++p) {
      PhaseStats st;
      st.name = spec.phases[p].name;
      st.offered_qps = spec.phases[p].rate_qps;
      auto [lo, hi] = phase_span[p];
      sim::micros dur = hi - lo;
      sim::micros wlo = lo + sim::micros(double(dur) * opt_.steady_trim);
      sim::micros whi = hi - sim::micros(double(dur) * opt_.steady_trim);
      std::vector<double> lat;
      sim::micros last_egress = wlo;
      for (const auto& r : rep.rows) {
        if (r.phase != int(p)) continue;
        ++st.completed;
        if (r.arrival < wlo || r.arrival > whi) continue;
        lat.push_back(r.latency_us);
        last_egress = std::max(last_egress, r.egress);
      }
      if (!lat.empty()) {
        st.p5_ms = percentile(lat, 5) / sim::kMilli;
        st.p50_ms = percentile(lat, 50) / sim::kMilli;
        st.p95_ms = percentile(lat, 95) / sim::kMilli;
        for (double s : spec.slo_ms) st.miss_rate.push_back(slo_miss_rate(lat, s * sim::kMilli));
        sim::micros span = std::max<sim::micros>(last_egress - wlo, 1);
        st.achieved_qps = double(lat.size()) * double(sim::kSecond) / double(span);
      }
      // Backlog: in-flight grows steadily across the phase.
      std::vector<std::pair<double, double>> ph_samples;
      for (const auto& s : samples) {
        double t_us = s.first * double(sim::kSecond);
        if (t_us >= double(lo) && t_us <= double(hi)) ph_samples.push_back(s);
      }
      st.backlogged = ls_slope(ph_samples) > opt_.backlog_slope_qps;
      rep.phases.push_back(std::move(st));
    }
    return rep;
  }

  sim::EventLoop& loop_;
  runtime::Runtime& rt_;
  Options opt_;
};

struct CurvePoint {
  double offered_qps = 0;
  double p5_ms = 0, p50_ms = 0, p95_ms = 0;
  double miss_rate_200 = 0, miss_rate_500 = 0;
  double achieved_qps = 0;
  bool backlogged = false;
};

inline std::string curve_csv(const std::vector<CurvePoint>& pts) {
  std::string out = "offered_qps,p5_ms,p50_ms,p95_ms,miss_rate_200,miss_rate_500,achieved_qps\n";
  char buf[160];
  for (const auto& c : pts) {
    std::snprintf(buf, sizeof buf, "%.3f,%.3f,%.3f,%.3f,%.6f,%.6f,%.3f\n", c.offered_qps, c.p5_ms,
                  c.p50_ms, c.p95_ms, c.miss_rate_200, c.miss_rate_500, c.achieved_qps);
    out += buf;
  }
  return out;
}

}  // namespace vortex::bench
