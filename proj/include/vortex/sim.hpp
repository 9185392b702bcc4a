#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <random>
#include <vector>

namespace vortex::sim {

using micros = std::uint64_t;

inline constexpr micros kSecond = 1'000'000;
inline constexpr micros kMilli = 1'000;

/// Deterministic virtual clock. Events scheduled at the same instant run in
/// insertion order, so a run is fully reproducible from the schedule alone.
class EventLoop {
 public:
  micros now() const { return now_; }

  void at(micros t, std::function<void()> fn) {
    queue_.push(Event{t < now_ ? now_ : t, seq_++, std::move(fn)});
  }

  void after(micros delay, std::function<void()> fn) { at(now_ + delay, std::move(fn)); }

  bool empty() const { return queue_.empty(); }

  /// Timestamp of the next pending event, if any.
  std::optional<micros> next_time() const {
    if (queue_.empty()) return std::nullopt;
    return queue_.top().t;
  }

  bool step() {
    if (queue_.empty()) return false;
    Event ev = std::move(const_cast<Event&>(queue_.top()));
    queue_.pop();
    now_ = ev.t;
    ev.fn();
    return true;
  }

  /// Runs every event with timestamp <= t, then advances the clock to t.
  void run_until(micros t) {
    while (!queue_.empty() && queue_.top().t <= t) step();
    if (t > now_) now_ = t;
  }

  void run_all() {
    while (step()) {
    }
  }

  /// Steps while pred() holds and events remain. Returns true once pred()
  /// became false.
  bool run_while(const std::function<bool()>& pred) {
    while (pred()) {
      if (!step()) return false;
    }
    return true;
  }

 private:
  struct Event {
    micros t;
    std::uint64_t seq;
    std::function<void()> fn;
    bool operator>(const Event& o) const { return t != o.t ? t > o.t : seq > o.seq; }
  };
  std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
  micros now_ = 0;
  std::uint64_t seq_ = 0;
};

/// Seeded RNG wrapper used wherever a module needs documented, reproducible
/// randomness.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(gen_);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  /// Exponential inter-arrival gap for a Poisson process at `rate_per_us`.
  double exp_gap(double rate_per_us) {
    return std::exponential_distribution<double>(rate_per_us)(gen_);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace vortex::sim
