#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pipetune/clock.hpp"
#include "pipetune/pipeline_spec.hpp"

namespace pipetune {

struct TracerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Counter values as copied into a snapshot.
struct OperatorStats {
  int64_t arrivals = 0;        // elements pulled from children
  int64_t completions = 0;     // elements yielded
  int64_t active_cpu_ns = 0;   // worker CPU attributed to this operator
  int64_t bytes_produced = 0;  // sum of yielded payload bytes
  int64_t bytes_read = 0;      // filesystem bytes (sources only)
  int64_t parallelism = 1;     // parallelism in effect during the run

  friend bool operator==(const OperatorStats&, const OperatorStats&) = default;
};

struct TraceSnapshot {
  double wall_seconds = 0.0;
  PipelineSpec spec;
  std::map<std::string, OperatorStats> ops;
  int64_t timestamp_ms = 0;

  const OperatorStats& at(const std::string& name) const {
    auto it = ops.find(name);
    if (it == ops.end()) throw TracerError("snapshot missing operator: " + name);
    return it->second;
  }
};

struct TraceEvent {
  enum class Kind { kPullStart, kPullEnd, kYield, kRead, kWork };
  Kind kind;
  int64_t value = 0;  // yield: payload bytes; read: bytes; work: cpu ns; pull_end: got element

  static TraceEvent pull_start() { return {Kind::kPullStart, 0}; }
  static TraceEvent pull_end(bool got_element) {
    return {Kind::kPullEnd, got_element ? 1 : 0};
  }
  static TraceEvent yield(int64_t payload_bytes) {
    return {Kind::kYield, payload_bytes};
  }
  static TraceEvent read(int64_t bytes) { return {Kind::kRead, bytes}; }
  static TraceEvent work(int64_t cpu_ns) { return {Kind::kWork, cpu_ns}; }
};

// Collects per-operator counters with active-CPU-time semantics.
//
// Element counters are plain relaxed atomics, bumped at every event. CPU time
// is attributed in micro-windows: each thread tallies events locally and only
// reads its (expensive) thread-CPU clock every `window_events` events. At a
// flush, self-measured busy work is credited exactly to its operator and the
// window's residual CPU (engine plumbing) is split across operators in
// proportion to their event counts. Snapshots tolerate the bounded lag of
// unflushed windows; ratios over large counts are insensitive to it.
class Tracer : public std::enable_shared_from_this<Tracer> {
 public:
  static constexpr int64_t kDefaultWindowEvents = 256;

  static std::shared_ptr<Tracer> create(const PipelineSpec& spec,
                                        int64_t window_events = kDefaultWindowEvents) {
    return std::shared_ptr<Tracer>(new Tracer(spec, window_events));
  }

  int op_index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw TracerError("unknown operator in trace event: " + name);
    return it->second;
  }

  size_t op_count() const { return names_.size(); }

  // Spec-facing event entry point; the engine uses the typed fast paths below.
  void attribute(const std::string& op, const TraceEvent& event) {
    const int idx = op_index(op);
    switch (event.kind) {
      case TraceEvent::Kind::kPullStart: pull_start(idx); break;
      case TraceEvent::Kind::kPullEnd: pull_end(idx, event.value != 0); break;
      case TraceEvent::Kind::kYield: yield(idx, event.value); break;
      case TraceEvent::Kind::kRead: read(idx, event.value); break;
      case TraceEvent::Kind::kWork: work(idx, event.value); break;
    }
  }

  void pull_start(int op) { bump(op); }

  void pull_end(int op, bool got_element) {
    if (got_element) slots_[op].arrivals.fetch_add(1, std::memory_order_relaxed);
    bump(op);
  }

  void yield(int op, int64_t payload_bytes) {
    slots_[op].completions.fetch_add(1, std::memory_order_relaxed);
    slots_[op].bytes_produced.fetch_add(payload_bytes, std::memory_order_relaxed);
    bump(op);
  }

  void read(int op, int64_t bytes) {
    slots_[op].bytes_read.fetch_add(bytes, std::memory_order_relaxed);
    bump(op);
  }

  // Self-measured busy work; credited exactly at the next window flush.
  void work(int op, int64_t cpu_ns) {
    ThreadState& st = state();
    st.work_ns[op] += cpu_ns;
    st.events[op] += 1;
    if (++st.window_events >= window_events_) flush(st);
  }

  void record_parallelism(int op, int64_t parallelism) {
    slots_[op].parallelism.store(parallelism, std::memory_order_relaxed);
  }

  int64_t completions(int op) const {
    return slots_[op].completions.load(std::memory_order_relaxed);
  }

  int64_t root_completions() const { return completions(root_index_); }

  // Pushes this thread's pending window into the shared counters. Worker
  // loops call it on exit; snapshotting paths call it for the driving thread.
  void flush_this_thread() {
    ThreadState& st = state();
    if (st.window_events > 0) flush(st);
  }

  double wall_seconds() const {
    return double(steady_now_ns() - start_ns_) / 1e9;
  }

  // Consistent monotonic copy of all counters plus the serialized program.
  // Throws EMPTY_TRACE when the root has no completions, unless allowed.
  TraceSnapshot snapshot(bool allow_empty = false) const {
    if (!allow_empty && root_completions() == 0)
      throw TracerError("EMPTY_TRACE: root has zero completions");
    TraceSnapshot snap;
    snap.wall_seconds = std::max(wall_seconds(), 1e-9);
    snap.spec = spec_;
    snap.timestamp_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::system_clock::now().time_since_epoch())
                            .count();
    for (size_t i = 0; i < names_.size(); ++i) {
      OperatorStats s;
      s.arrivals = slots_[i].arrivals.load(std::memory_order_relaxed);
      s.completions = slots_[i].completions.load(std::memory_order_relaxed);
      s.active_cpu_ns = slots_[i].cpu_ns.load(std::memory_order_relaxed);
      s.bytes_produced = slots_[i].bytes_produced.load(std::memory_order_relaxed);
      s.bytes_read = slots_[i].bytes_read.load(std::memory_order_relaxed);
      s.parallelism = slots_[i].parallelism.load(std::memory_order_relaxed);
      snap.ops[names_[i]] = s;
    }
    return snap;
  }

 private:
  struct Slot {
    std::atomic<int64_t> arrivals{0};
    std::atomic<int64_t> completions{0};
    std::atomic<int64_t> cpu_ns{0};
    std::atomic<int64_t> bytes_produced{0};
    std::atomic<int64_t> bytes_read{0};
    std::atomic<int64_t> parallelism{1};
  };

  struct ThreadState {
    std::vector<uint32_t> events;
    std::vector<int64_t> work_ns;
    int64_t window_events = 0;
    int64_t window_cpu_start = 0;
  };

  Tracer(const PipelineSpec& spec, int64_t window_events)
      : spec_(spec),
        window_events_(std::max<int64_t>(1, window_events)),
        slots_(spec.nodes.size()),
        start_ns_(steady_now_ns()) {
    names_.reserve(spec.nodes.size());
    for (const auto& n : spec.nodes) {
      index_[n.name] = int(names_.size());
      names_.push_back(n.name);
      if (n.tunable_parallelism.has_value())
        slots_[index_[n.name]].parallelism.store(*n.tunable_parallelism);
    }
    root_index_ = op_index(spec.root_id);
  }

  void bump(int op) {
    ThreadState& st = state();
    st.events[op] += 1;
    if (++st.window_events >= window_events_) flush(st);
  }

  void flush(ThreadState& st) {
    const int64_t cpu_now = thread_cpu_now_ns();
    const int64_t delta = cpu_now - st.window_cpu_start;
    st.window_cpu_start = cpu_now;

    int64_t total_work = 0;
    int64_t total_events = 0;
    for (size_t i = 0; i < st.events.size(); ++i) {
      total_work += st.work_ns[i];
      total_events += st.events[i];
    }
    // Residual = plumbing CPU not covered by self-measured work. Clamped at
    // zero: under contention wall-measured work can exceed the thread's CPU.
    const int64_t residual = std::max<int64_t>(0, delta - total_work);
    for (size_t i = 0; i < st.events.size(); ++i) {
      if (st.events[i] == 0 && st.work_ns[i] == 0) continue;
      int64_t credit = st.work_ns[i];
      if (total_events > 0)
        credit += residual * int64_t(st.events[i]) / total_events;
      if (credit > 0)
        slots_[i].cpu_ns.fetch_add(credit, std::memory_order_relaxed);
      st.events[i] = 0;
      st.work_ns[i] = 0;
    }
    st.window_events = 0;
  }

  // Thread states are keyed by a process-unique tracer id, never by pointer,
  // so a recycled allocation cannot inherit another tracer's tallies. Stale
  // entries of dead tracers are reclaimed once the map grows large.
  ThreadState& state() {
    thread_local uint64_t cached_id = 0;
    thread_local ThreadState* cached = nullptr;
    if (cached_id == id_ && cached != nullptr) return *cached;
    thread_local std::map<uint64_t, ThreadState> states;
    if (states.size() > 256) {
      std::erase_if(states, [&](const auto& kv) { return kv.first != id_; });
    }
    auto [it, inserted] = states.try_emplace(id_);
    ThreadState& st = it->second;
    if (inserted) {
      st.events.assign(names_.size(), 0);
      st.work_ns.assign(names_.size(), 0);
      st.window_cpu_start = thread_cpu_now_ns();
    }
    cached_id = id_;
    cached = &st;
    return st;
  }

  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }

  PipelineSpec spec_;
  std::map<std::string, int> index_;
  std::vector<std::string> names_;
  int64_t window_events_;
  std::vector<Slot> slots_;
  int root_index_ = 0;
  int64_t start_ns_;
  uint64_t id_ = next_id();
};

// ---------------------------------------------------------------------------
// Snapshot file format:
//   {"wall_seconds": f, "spec": {...},
//    "ops": {name: {"arrivals","completions","cpu_ns","bytes_produced",
//                   "bytes_read","parallelism"}}}

inline nlohmann::json snapshot_to_json(const TraceSnapshot& snap) {
  nlohmann::json ops = nlohmann::json::object();
  for (const auto& [name, s] : snap.ops) {
    ops[name] = {{"arrivals", s.arrivals},
                 {"completions", s.completions},
                 {"cpu_ns", s.active_cpu_ns},
                 {"bytes_produced", s.bytes_produced},
                 {"bytes_read", s.bytes_read},
                 {"parallelism", s.parallelism}};
  }
  return nlohmann::json{{"wall_seconds", snap.wall_seconds},
                        {"spec", spec_to_json(snap.spec)},
                        {"ops", std::move(ops)},
                        {"timestamp_ms", snap.timestamp_ms}};
}

inline TraceSnapshot snapshot_from_json(const nlohmann::json& j) {
  TraceSnapshot snap;
  try {
    snap.wall_seconds = j.at("wall_seconds").get<double>();
    snap.spec = spec_from_json(j.at("spec"));
    snap.timestamp_ms = j.value("timestamp_ms", int64_t{0});
    for (const auto& [name, js] : j.at("ops").items()) {
      OperatorStats s;
      s.arrivals = js.at("arrivals").get<int64_t>();
      s.completions = js.at("completions").get<int64_t>();
      s.active_cpu_ns = js.at("cpu_ns").get<int64_t>();
      s.bytes_produced = js.at("bytes_produced").get<int64_t>();
      s.bytes_read = js.at("bytes_read").get<int64_t>();
      s.parallelism = js.at("parallelism").get<int64_t>();
      snap.ops[name] = s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw TracerError(std::string("malformed snapshot: ") + e.what());
  }
  if (snap.wall_seconds <= 0.0)
    throw TracerError("malformed snapshot: wall_seconds must be > 0");
  for (const auto& n : snap.spec.nodes) {
    if (snap.ops.find(n.name) == snap.ops.end())
      throw TracerError("snapshot missing stats for node: " + n.name);
  }
  return snap;
}

inline void dump_snapshot(const TraceSnapshot& snap, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw TracerError("cannot open for write: " + path);
  out << snapshot_to_json(snap).dump(2) << "\n";
}

inline TraceSnapshot load_snapshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TracerError("cannot open snapshot: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw TracerError(std::string("malformed snapshot file ") + path + ": " + e.what());
  }
  return snapshot_from_json(j);
}

}  // namespace pipetune
