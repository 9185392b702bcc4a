#pragma once

#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vortex {

enum class errc {
  pool_exists,
  no_such_pool,
  too_old,
  bad_route,
  no_worker,
  not_found,
  bad_range,
  no_such_handler,
  already_registered,
  not_a_dag,
  unschedulable,
  no_such_pipeline,
  duplicate_input,
  incast_timeout,
  drain_timeout,
  no_profile,
  out_of_memory,
  bad_layout,
  node_busy,
  infeasible,
  bad_transition,
  no_data,
  io_error,
  bad_config,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::pool_exists: return "PoolExists";
    case errc::no_such_pool: return "NoSuchPool";
    case errc::too_old: return "TooOld";
    case errc::bad_route: return "BadRoute";
    case errc::no_worker: return "NoWorker";
    case errc::not_found: return "NotFound";
    case errc::bad_range: return "BadRange";
    case errc::no_such_handler: return "NoSuchHandler";
    case errc::already_registered: return "AlreadyRegistered";
    case errc::not_a_dag: return "NotADag";
    case errc::unschedulable: return "Unschedulable";
    case errc::no_such_pipeline: return "NoSuchPipeline";
    case errc::duplicate_input: return "DuplicateInput";
    case errc::incast_timeout: return "IncastTimeout";
    case errc::drain_timeout: return "DrainTimeout";
    case errc::no_profile: return "NoProfile";
    case errc::out_of_memory: return "OutOfMemory";
    case errc::bad_layout: return "BadLayout";
    case errc::node_busy: return "NodeBusy";
    case errc::infeasible: return "Infeasible";
    case errc::bad_transition: return "BadTransition";
    case errc::no_data: return "NoData";
    case errc::io_error: return "IoError";
    case errc::bad_config: return "BadConfig";
  }
  return "Unknown";
}

class error : public std::runtime_error {
 public:
  error(errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  errc code() const { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw error(code, what); }

// Payloads are immutable after creation; intra-process delivery shares the
// same buffer, never copies.
using Bytes = std::vector<std::uint8_t>;
using Payload = std::shared_ptr<const Bytes>;

inline Payload make_payload(std::string_view s) {
  return std::make_shared<const Bytes>(s.begin(), s.end());
}

inline std::string payload_str(const Payload& p) {
  if (!p) return {};
  return std::string(p->begin(), p->end());
}

// FNV-1a, 64-bit. The fixed hash behind all key-to-shard mapping.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(s.substr(start));
      break;
    }
    out.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace vortex
