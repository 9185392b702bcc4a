#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vortex/bench.hpp"
#include "vortex/common.hpp"
#include "vortex/runtime.hpp"

namespace vortex::service {

inline std::string base64_encode(const Bytes& in) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  std::size_t i = 0;
  while (i + 2 < in.size()) {
    std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
    i += 3;
  }
  if (i + 1 == in.size()) {
    std::uint32_t v = in[i] << 16;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += "=";
  }
  return out;
}

inline Bytes base64_decode(const std::string& in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  Bytes out;
  std::uint32_t buf = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=') break;
    int v = val(c);
    if (v < 0) continue;
    buf = (buf << 6) | std::uint32_t(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(std::uint8_t((buf >> bits) & 0xff));
    }
  }
  return out;
}

/// Single-threaded JSON-lines query service over TCP. One poll loop owns the
/// listener and every connection; each response frame is written in full
/// before the next is started, so frames never interleave.
class Server {
 public:
  struct Options {
    std::string host = "127.0.0.1";
    int port = 0;  // 0: pick a free port
    std::vector<double> slo_ms = {200, 500};
  };

  Server(sim::EventLoop& loop, runtime::Runtime& rt, std::string pipeline, Options opt)
      : loop_(loop), rt_(rt), pipeline_(std::move(pipeline)), opt_(opt) {}

  ~Server() { stop(); }

  int listen() {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) fail(errc::io_error, "socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(std::uint16_t(opt_.port));
    ::inet_pton(AF_INET, opt_.host.c_str(), &addr.sin_addr);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      fail(errc::io_error, std::string("bind: ") + std::strerror(errno));
    if (::listen(fd_, 16) != 0) fail(errc::io_error, "listen");
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    return port_;
  }

  int port() const { return port_; }

  void request_stop() { stopping_ = true; }

  /// Serves until request_stop(); then drains the pipeline and returns.
  void run() {
    if (fd_ < 0) listen();
    while (!stopping_) poll_once(200);
    rt_.drain(pipeline_);
    stop();
  }

  /// One bounded poll pass; exposed so a test can drive the server inline.
  void poll_once(int timeout_ms) {
    std::vector<pollfd> fds;
    fds.push_back(pollfd{fd_, POLLIN, 0});
    for (const auto& [cfd, _] : conns_) fds.push_back(pollfd{cfd, POLLIN, 0});
    int n = ::poll(fds.data(), nfds_t(fds.size()), timeout_ms);
    if (n <= 0) return;
    if (fds[0].revents & POLLIN) {
      int cfd = ::accept(fd_, nullptr, nullptr);
      if (cfd >= 0) conns_[cfd] = "";
    }
    for (std::size_t i = 1; i < fds.size(); ++i) {
      if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      char buf[4096];
      ssize_t got = ::recv(fds[i].fd, buf, sizeof buf, 0);
      if (got <= 0) {
        ::close(fds[i].fd);
        conns_.erase(fds[i].fd);
        continue;
      }
      auto& acc = conns_[fds[i].fd];
      acc.append(buf, std::size_t(got));
      std::size_t pos;
      while ((pos = acc.find('\n')) != std::string::npos) {
        std::string line = acc.substr(0, pos);
        acc.erase(0, pos + 1);
        if (!line.empty()) send_frame(fds[i].fd, handle(line));
      }
    }
  }

  /// Request dispatcher; pure with respect to the socket layer so tests can
  /// call it directly.
  nlohmann::json handle(const std::string& line) {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      return {{"type", "error"}, {"reason", std::string("parse: ") + e.what()}};
    }
    try {
      std::string type = req.value("type", "");
      if (type == "query") return handle_query(req);
      if (type == "stats") return handle_stats();
      if (type == "shutdown") {
        request_stop();
        return {{"type", "ok"}};
      }
      return {{"type", "error"}, {"reason", "unknown type '" + type + "'"}};
    } catch (const error& e) {
      return {{"type", "error"}, {"reason", e.what()}};
    } catch (const std::exception& e) {
      return {{"type", "error"}, {"reason", e.what()}};
    }
  }

 private:
  nlohmann::json handle_query(const nlohmann::json& req) {
    std::string pipeline = req.value("pipeline", pipeline_);
    Bytes payload = base64_decode(req.value("payload", ""));
    auto qid = rt_.ingress_submit(pipeline, std::make_shared<const Bytes>(std::move(payload)));
    // Simulate mode: advance virtual time until this query leaves the egress.
    loop_.run_while([&] {
      const auto& r = rt_.record(pipeline, qid);
      return !r.done && !r.failed;
    });
    const auto& rec = rt_.record(pipeline, qid);
    if (rec.failed) return {{"type", "error"}, {"reason", "query failed"}};
    Payload out = rec.outputs.count(egress_stage(pipeline))
                      ? rec.outputs.at(egress_stage(pipeline))
                      : rec.payload;
    return {{"type", "result"},
            {"id", qid},
            {"latency_us", rec.egress_ts - rec.ingress_ts},
            {"payload", base64_encode(out ? *out : Bytes{})}};
  }

  std::string egress_stage(const std::string& pipeline) {
    // The runtime knows; cache per pipeline on first use.
    auto it = egress_.find(pipeline);
    if (it != egress_.end()) return it->second;
    // Completed records carry stage traces; fall back to asking the runtime
    // via record structure is indirect, so store at registration instead.
    return egress_[pipeline];
  }

 public:
  void set_egress(const std::string& pipeline, const std::string& stage) {
    egress_[pipeline] = stage;
  }

 private:
  nlohmann::json handle_stats() {
    nlohmann::json st;
    st["type"] = "stats";
    st["submitted"] = rt_.submitted(pipeline_);
    st["completed"] = rt_.completed(pipeline_);
    st["failed"] = rt_.failed(pipeline_);
    std::vector<double> lat;
    for (const auto* r : rt_.completed_records(pipeline_)) lat.push_back(r->latency_us());
    nlohmann::json miss = nlohmann::json::object();
    for (double s : opt_.slo_ms)
      miss[std::to_string(int(s)) + "ms"] =
          lat.empty() ? 0.0 : bench::slo_miss_rate(lat, s * sim::kMilli);
    st["miss_rate"] = miss;
    if (!lat.empty()) {
      st["p50_ms"] = bench::percentile(lat, 50) / sim::kMilli;
      st["p95_ms"] = bench::percentile(lat, 95) / sim::kMilli;
    }
    return st;
  }

  void send_frame(int cfd, const nlohmann::json& j) {
    std::string s = j.dump();
    s += '\n';
    std::size_t off = 0;
    while (off < s.size()) {
      ssize_t w = ::send(cfd, s.data() + off, s.size() - off, 0);
      if (w <= 0) break;
      off += std::size_t(w);
    }
  }

  void stop() {
    for (const auto& [cfd, _] : conns_) ::close(cfd);
    conns_.clear();
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  sim::EventLoop& loop_;
  runtime::Runtime& rt_;
  std::string pipeline_;
  Options opt_;
  int fd_ = -1;
  int port_ = 0;
  bool stopping_ = false;
  std::map<int, std::string> conns_;
  std::map<std::string, std::string> egress_;
};

}  // namespace vortex::service
