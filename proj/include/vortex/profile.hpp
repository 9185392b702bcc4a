#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vortex/common.hpp"

namespace vortex::exec {

/// One profiled operating point of a model on an instance size.
struct ProfileEntry {
  int batch = 1;
  double latency_ms = 0;
  double throughput_qps = 0;
  double memory_gb = 0;
};

/// Per (model, instance-size) latency/throughput/memory profiles.
/// CSV schema: model_id,instance_size_gb,batch_size,latency_ms,throughput_qps,memory_gb
class ProfileTable {
 public:
  void add(const std::string& model, double size_gb, ProfileEntry e) {
    auto& v = entries_[{model, size_gb}];
    v.push_back(e);
    std::sort(v.begin(), v.end(),
              [](const ProfileEntry& a, const ProfileEntry& b) { return a.batch < b.batch; });
  }

  static ProfileTable from_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(errc::io_error, "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_csv(ss.str());
  }

  static ProfileTable from_csv(const std::string& csv) {
    ProfileTable t;
    std::istringstream in(csv);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (first && line.rfind("model_id", 0) == 0) {
        first = false;
        continue;
      }
      first = false;
      auto cols = split(line, ',');
      if (cols.size() != 6) fail(errc::bad_config, "profile row: " + line);
      t.add(cols[0], std::stod(cols[1]),
            ProfileEntry{std::stoi(cols[2]), std::stod(cols[3]), std::stod(cols[4]),
                         std::stod(cols[5])});
    }
    return t;
  }

  bool has(const std::string& model, double size_gb) const {
    return entries_.count({model, size_gb}) > 0;
  }

  const std::vector<ProfileEntry>& entries(const std::string& model, double size_gb) const {
    auto it = entries_.find({model, size_gb});
    if (it == entries_.end())
      fail(errc::no_profile, model + " @ " + std::to_string(size_gb) + "GB");
    return it->second;
  }

  std::vector<double> sizes(const std::string& model) const {
    std::vector<double> out;
    for (const auto& [k, _] : entries_)
      if (k.first == model) out.push_back(k.second);
    return out;
  }

  std::vector<std::string> models() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_)
      if (out.empty() || out.back() != k.first) out.push_back(k.first);
    return out;
  }

  /// Piecewise-linear interpolation over the profiled (batch, latency) knots;
  /// linear extrapolation past the last knot using the final segment's slope.
  double latency_ms(const std::string& model, double size_gb, int batch) const {
    if (batch < 1) fail(errc::bad_config, "batch < 1");
    const auto& v = entries(model, size_gb);
    double b = batch;
    if (v.size() == 1 || b <= v.front().batch) {
      if (v.size() == 1 || b == v.front().batch) return v.front().latency_ms;
      // Below the first knot: scale through it.
      return v.front().latency_ms * b / v.front().batch;
    }
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (b <= v[i].batch) {
        double t = (b - v[i - 1].batch) / double(v[i].batch - v[i - 1].batch);
        return v[i - 1].latency_ms + t * (v[i].latency_ms - v[i - 1].latency_ms);
      }
    }
    const auto& a = v[v.size() - 2];
    const auto& z = v.back();
    double slope = (z.latency_ms - a.latency_ms) / double(z.batch - a.batch);
    return z.latency_ms + slope * (b - z.batch);
  }

  /// The throughput-peak entry for (model, size), optionally capped at
  /// `batch_cap`. Ties resolve to the smallest batch.
  const ProfileEntry& peak(const std::string& model, double size_gb,
                           int batch_cap = 1 << 30) const {
    const auto& v = entries(model, size_gb);
    const ProfileEntry* best = nullptr;
    for (const auto& e : v) {
      if (e.batch > batch_cap) continue;
      if (!best || e.throughput_qps > best->throughput_qps) best = &e;
    }
    if (!best) fail(errc::no_profile, model + " no entry within batch cap");
    return *best;
  }

  /// Memory footprint used for placement and loading decisions: the memory
  /// at the throughput-peak batch.
  double memory_gb(const std::string& model, double size_gb, int batch_cap = 1 << 30) const {
    return peak(model, size_gb, batch_cap).memory_gb;
  }

 private:
  std::map<std::pair<std::string, double>, std::vector<ProfileEntry>> entries_;
};

}  // namespace vortex::exec
