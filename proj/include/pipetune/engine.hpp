#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "pipetune/clock.hpp"
#include "pipetune/file_store.hpp"
#include "pipetune/pipeline_spec.hpp"
#include "pipetune/tracer.hpp"

namespace pipetune {

struct EngineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PipelineClosedError : EngineError {
  PipelineClosedError() : EngineError("CLOSED: next() called after close()") {}
};

// Payload content is synthetic; only the byte count and the originating file
// travel through the pipeline.
struct Element {
  int64_t payload_bytes = 0;
  int64_t provenance = -1;  // source file id

  friend bool operator==(const Element&, const Element&) = default;
};

namespace detail {

inline uint64_t mix_seed(uint64_t seed, const std::string& salt, uint64_t extra = 0) {
  uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
  for (char c : salt) h = (h ^ uint64_t(uint8_t(c))) * 0x100000001b3ULL;
  h ^= extra + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

// MPMC bounded queue with separate "producers finished" and "hard close"
// shutdown paths.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(size_t capacity) : capacity_(std::max<size_t>(1, capacity)) {}

  bool push(T value) {
    std::unique_lock<std::mutex> lock(mu_);
    not_full_.wait(lock, [&] { return items_.size() < capacity_ || closed_; });
    if (closed_) return false;
    items_.push_back(std::move(value));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock<std::mutex> lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty() || finished_ || closed_; });
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return value;
  }

  void finish() {
    std::lock_guard<std::mutex> lock(mu_);
    finished_ = true;
    not_empty_.notify_all();
  }

  void close() {
    std::lock_guard<std::mutex> lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  void reset() {
    std::lock_guard<std::mutex> lock(mu_);
    items_.clear();
    finished_ = false;
    closed_ = false;
  }

 private:
  const size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<T> items_;
  bool finished_ = false;
  bool closed_ = false;
};

}  // namespace detail

// Thread bookkeeping for leak checks and the worker census.
struct WorkerCensus {
  std::atomic<int64_t> live{0};
  std::mutex mu;
  std::map<std::string, int64_t> spawned;

  void on_spawn(const std::string& op) {
    live.fetch_add(1);
    std::lock_guard<std::mutex> lock(mu);
    spawned[op]++;
  }
  void on_exit() { live.fetch_sub(1); }
  int64_t spawned_for(const std::string& op) {
    std::lock_guard<std::mutex> lock(mu);
    auto it = spawned.find(op);
    return it == spawned.end() ? 0 : it->second;
  }
};

struct InstantiateOptions {
  uint64_t seed = 42;
  // Steady-state cache probe: a Cache declares itself complete after this
  // many elements instead of a full pass (0 disables).
  int64_t cache_probe_truncate = 0;
};

namespace detail {

struct EngineContext {
  Tracer* tracer = nullptr;
  uint64_t seed = 42;
  WorkerCensus* census = nullptr;
  InstantiateOptions options;

  void work(int op, int64_t cpu_ns) const {
    if (tracer) tracer->work(op, cpu_ns);
  }
};

class IteratorBase {
 public:
  IteratorBase(EngineContext* ctx, const OperatorNode* node, int op_idx)
      : ctx_(ctx), node_(node), op_idx_(op_idx) {}
  virtual ~IteratorBase() = default;

  std::optional<Element> next() {
    auto element = do_next();
    if (auto_yield_ && element.has_value() && ctx_->tracer)
      ctx_->tracer->yield(op_idx_, element->payload_bytes);
    return element;
  }

  virtual void start() {}
  virtual void shutdown() {}  // request stop, unblock waits; non-blocking
  virtual void join() {}
  virtual void reopen() {}    // reset stream state for a new Repeat epoch

  const OperatorNode& node() const { return *node_; }

 protected:
  virtual std::optional<Element> do_next() = 0;

  std::optional<Element> pull(IteratorBase& child) {
    if (ctx_->tracer) ctx_->tracer->pull_start(op_idx_);
    auto element = child.next();
    if (ctx_->tracer) ctx_->tracer->pull_end(op_idx_, element.has_value());
    return element;
  }

  void emit_yield(const Element& e) {
    if (ctx_->tracer) ctx_->tracer->yield(op_idx_, e.payload_bytes);
  }

  std::thread spawn_worker(std::function<void()> fn) {
    ctx_->census->on_spawn(node_->name);
    EngineContext* ctx = ctx_;
    return std::thread([ctx, fn = std::move(fn)] {
      fn();
      if (ctx->tracer) ctx->tracer->flush_this_thread();
      ctx->census->on_exit();
    });
  }

  EngineContext* ctx_;
  const OperatorNode* node_;
  int op_idx_;
  bool auto_yield_ = true;
};

// Reads records from a file partition (start, stride). With a parallelism
// knob it fans out into sub-readers feeding a queue, each with its own
// per-reader bandwidth bucket.
class SourceIterator : public IteratorBase {
 public:
  SourceIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                 std::shared_ptr<FileStore> store, int64_t part_start,
                 int64_t part_stride)
      : IteratorBase(ctx, node, op_idx),
        store_(std::move(store)),
        part_start_(part_start),
        part_stride_(part_stride),
        parallelism_(node->tunable_parallelism.value_or(1)),
        queue_(size_t(2 * parallelism_)) {
    if (parallelism_ > 1) auto_yield_ = false;
    reset_streams();
  }

  void start() override {
    if (ctx_->tracer)
      ctx_->tracer->record_parallelism(op_idx_, parallelism_);
    if (parallelism_ <= 1) return;
    active_producers_.store(parallelism_);
    for (int64_t w = 0; w < parallelism_; ++w) {
      workers_.push_back(spawn_worker([this, w] { reader_loop(w); }));
    }
  }

  void shutdown() override {
    stop_.store(true);
    queue_.close();
  }

  void join() override {
    for (auto& t : workers_)
      if (t.joinable()) t.join();
    workers_.clear();
  }

  void reopen() override {
    shutdown();
    join();
    stop_.store(false);
    queue_.reset();
    reset_streams();
    start();
  }

 protected:
  std::optional<Element> do_next() override {
    if (parallelism_ > 1) return queue_.pop();
    return read_record(streams_[0]);
  }

 private:
  struct Stream {
    int64_t next_file_slot = 0;   // index into the partition
    int64_t record_in_file = 0;
    std::unique_ptr<TokenBucket> reader_bucket;
    int64_t start = 0;
    int64_t stride = 1;
  };

  void reset_streams() {
    streams_.clear();
    const int64_t fan = std::max<int64_t>(1, parallelism_);
    for (int64_t w = 0; w < fan; ++w) {
      Stream s;
      s.start = part_start_ + part_stride_ * w;
      s.stride = part_stride_ * fan;
      s.reader_bucket = store_->make_reader_limiter();
      streams_.push_back(std::move(s));
    }
  }

  std::optional<Element> read_record(Stream& s) {
    const auto& files = store_->files();
    while (true) {
      const int64_t file_index = s.start + s.stride * s.next_file_slot;
      if (file_index >= int64_t(files.size())) return std::nullopt;
      if (s.record_in_file >= node_->params.records_per_file) {
        s.next_file_slot++;
        s.record_in_file = 0;
        continue;
      }
      const int64_t file_id = files[size_t(file_index)].id;
      const int64_t bytes = node_->params.bytes_per_record;
      store_->read(file_id, bytes, s.reader_bucket.get());
      if (ctx_->tracer) ctx_->tracer->read(op_idx_, bytes);
      s.record_in_file++;
      return Element{bytes, file_id};
    }
  }

  void reader_loop(int64_t w) {
    Stream& s = streams_[size_t(w)];
    while (!stop_.load(std::memory_order_relaxed)) {
      auto element = read_record(s);
      if (!element.has_value()) break;
      emit_yield(*element);
      if (!queue_.push(*element)) return;
    }
    if (active_producers_.fetch_sub(1) == 1) queue_.finish();
  }

  std::shared_ptr<FileStore> store_;
  int64_t part_start_;
  int64_t part_stride_;
  int64_t parallelism_;
  std::vector<Stream> streams_;
  detail::BoundedQueue<Element> queue_;
  std::vector<std::thread> workers_;
  std::atomic<bool> stop_{false};
  std::atomic<int64_t> active_producers_{0};
};

// Splits an element's spin cost across udf_internal_parallelism concurrent
// spinners, so one nominal worker occupies several cores at once.
class SpinGang {
 public:
  SpinGang(int64_t helpers, WorkerCensus* census, const std::string& op)
      : helpers_(helpers) {
    for (int64_t i = 0; i < helpers_; ++i) {
      census->on_spawn(op);
      threads_.emplace_back([this, census] {
        helper_loop();
        census->on_exit();
      });
    }
  }

  ~SpinGang() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    task_cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  // Runs `total_ns` of CPU split evenly across helpers plus the caller.
  void run(int64_t total_ns) {
    const int64_t share = total_ns / (helpers_ + 1);
    {
      std::lock_guard<std::mutex> lock(mu_);
      task_ns_ = share;
      pending_ = helpers_;
      ++generation_;
    }
    task_cv_.notify_all();
    busy_spin_ns(total_ns - share * helpers_);
    std::unique_lock<std::mutex> lock(mu_);
    done_cv_.wait(lock, [&] { return pending_ == 0; });
  }

 private:
  void helper_loop() {
    uint64_t seen = 0;
    while (true) {
      int64_t ns = 0;
      {
        std::unique_lock<std::mutex> lock(mu_);
        task_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        ns = task_ns_;
      }
      busy_spin_ns(ns);
      {
        std::lock_guard<std::mutex> lock(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  int64_t helpers_;
  std::mutex mu_;
  std::condition_variable task_cv_;
  std::condition_variable done_cv_;
  int64_t task_ns_ = 0;
  int64_t pending_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
  std::vector<std::thread> threads_;
};

class MapIterator : public IteratorBase {
 public:
  MapIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
              IteratorBase* child)
      : IteratorBase(ctx, node, op_idx),
        child_(child),
        parallel_(node->tunable_parallelism.has_value()),
        parallelism_(node->tunable_parallelism.value_or(1)),
        queue_(size_t(2 * parallelism_)) {
    if (parallel_) auto_yield_ = false;
  }

  void start() override {
    if (ctx_->tracer) ctx_->tracer->record_parallelism(op_idx_, parallelism_);
    if (!parallel_) return;
    active_producers_.store(parallelism_);
    for (int64_t w = 0; w < parallelism_; ++w)
      workers_.push_back(spawn_worker([this] { worker_loop(); }));
  }

  void shutdown() override {
    stop_.store(true);
    queue_.close();
  }

  void join() override {
    for (auto& t : workers_)
      if (t.joinable()) t.join();
    workers_.clear();
  }

  void reopen() override {
    if (parallel_) {
      shutdown();
      join();
      stop_.store(false);
      child_eos_ = false;
      queue_.reset();
    }
    child_->reopen();
    pending_outputs_.clear();
    if (parallel_) start();
  }

 protected:
  std::optional<Element> do_next() override {
    if (parallel_) return queue_.pop();
    if (!pending_outputs_.empty()) {
      Element e = pending_outputs_.back();
      pending_outputs_.pop_back();
      return e;
    }
    auto in = pull(*child_);
    if (!in.has_value()) return std::nullopt;
    process(*in, &pending_outputs_, nullptr);
    Element e = pending_outputs_.back();
    pending_outputs_.pop_back();
    return e;
  }

 private:
  // Spins the configured cost, reports it, and appends the fan-out elements.
  void process(const Element& in, std::vector<Element>* out, SpinGang* gang) {
    const int64_t cost_ns = int64_t(node_->params.cpu_cost_per_element_us * 1e3);
    if (cost_ns > 0) {
      if (gang)
        gang->run(cost_ns);
      else
        busy_spin_ns(cost_ns);
      ctx_->work(op_idx_, cost_ns);
    }
    const int64_t m = node_->params.input_output_ratio;
    const int64_t out_bytes = int64_t(
        std::llround(double(in.payload_bytes) * node_->params.byte_ratio / double(m)));
    for (int64_t i = 0; i < m; ++i) out->push_back({out_bytes, in.provenance});
  }

  void worker_loop() {
    const int64_t udf = node_->params.udf_internal_parallelism;
    std::unique_ptr<SpinGang> gang;
    if (udf > 1)
      gang = std::make_unique<SpinGang>(udf - 1, ctx_->census, node_->name);
    std::vector<Element> outputs;
    while (!stop_.load(std::memory_order_relaxed)) {
      std::optional<Element> in;
      {
        std::lock_guard<std::mutex> lock(child_mu_);
        if (child_eos_) break;
        in = pull(*child_);
        if (!in.has_value()) child_eos_ = true;
      }
      if (!in.has_value()) break;
      outputs.clear();
      process(*in, &outputs, gang.get());
      bool pushed = true;
      for (const auto& e : outputs) {
        emit_yield(e);
        if (!queue_.push(e)) {
          pushed = false;
          break;
        }
      }
      if (!pushed) break;
    }
    gang.reset();
    if (active_producers_.fetch_sub(1) == 1) queue_.finish();
  }

  IteratorBase* child_;
  bool parallel_;
  int64_t parallelism_;
  detail::BoundedQueue<Element> queue_;
  std::vector<Element> pending_outputs_;
  std::vector<std::thread> workers_;
  std::mutex child_mu_;
  bool child_eos_ = false;
  std::atomic<bool> stop_{false};
  std::atomic<int64_t> active_producers_{0};
};

class FilterIterator : public IteratorBase {
 public:
  FilterIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                 IteratorBase* child)
      : IteratorBase(ctx, node, op_idx),
        child_(child),
        rng_(mix_seed(ctx->seed, node->name)) {}

  void reopen() override { child_->reopen(); }

 protected:
  std::optional<Element> do_next() override {
    const double keep = node_->params.keep_probability;
    const int64_t cost_ns = int64_t(node_->params.cpu_cost_per_element_us * 1e3);
    while (true) {
      auto in = pull(*child_);
      if (!in.has_value()) return std::nullopt;
      if (cost_ns > 0) {
        busy_spin_ns(cost_ns);
        ctx_->work(op_idx_, cost_ns);
      }
      if (keep >= 1.0) return in;
      if (keep > 0.0 && uniform_(rng_) < keep) return in;
    }
  }

 private:
  IteratorBase* child_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Fixed-size reservoir with seeded sampling; adds no configured CPU cost.
class ShuffleIterator : public IteratorBase {
 public:
  ShuffleIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                  IteratorBase* child)
      : IteratorBase(ctx, node, op_idx),
        child_(child),
        rng_(mix_seed(ctx->seed, node->name, 0)) {}

  void reopen() override {
    child_->reopen();
    buffer_.clear();
    filled_ = false;
    ++epoch_;
    rng_.seed(mix_seed(ctx_->seed, node_->name, epoch_));
  }

 protected:
  std::optional<Element> do_next() override {
    if (!filled_) {
      while (int64_t(buffer_.size()) < node_->params.buffer_size) {
        auto in = pull(*child_);
        if (!in.has_value()) break;
        buffer_.push_back(*in);
      }
      filled_ = true;
    }
    if (buffer_.empty()) return std::nullopt;
    const size_t pick = size_t(rng_() % buffer_.size());
    Element out = buffer_[pick];
    auto refill = pull(*child_);
    if (refill.has_value()) {
      buffer_[pick] = *refill;
    } else {
      buffer_[pick] = buffer_.back();
      buffer_.pop_back();
    }
    return out;
  }

 private:
  IteratorBase* child_;
  std::vector<Element> buffer_;
  bool filled_ = false;
  uint64_t epoch_ = 0;
  std::mt19937_64 rng_;
};

class RepeatIterator : public IteratorBase {
 public:
  RepeatIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                 IteratorBase* child)
      : IteratorBase(ctx, node, op_idx), child_(child) {}

  void reopen() override {
    child_->reopen();
    epochs_done_ = 0;
  }

 protected:
  std::optional<Element> do_next() override {
    while (true) {
      auto in = pull(*child_);
      if (in.has_value()) return in;
      ++epochs_done_;
      const int64_t count = node_->params.count;
      if (count != kRepeatInfinite && epochs_done_ >= count) return std::nullopt;
      child_->reopen();
    }
  }

 private:
  IteratorBase* child_;
  int64_t epochs_done_ = 0;
};

class BatchIterator : public IteratorBase {
 public:
  BatchIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                IteratorBase* child)
      : IteratorBase(ctx, node, op_idx), child_(child) {}

  void reopen() override { child_->reopen(); }

 protected:
  std::optional<Element> do_next() override {
    Element batch{0, -1};
    int64_t gathered = 0;
    for (int64_t i = 0; i < node_->params.batch_size; ++i) {
      auto in = pull(*child_);
      if (!in.has_value()) break;
      if (gathered == 0) batch.provenance = in->provenance;
      batch.payload_bytes += in->payload_bytes;
      ++gathered;
    }
    if (gathered == 0) return std::nullopt;
    return batch;  // short final batch is emitted, not dropped
  }

 private:
  IteratorBase* child_;
};

class TakeIterator : public IteratorBase {
 public:
  TakeIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
               IteratorBase* child)
      : IteratorBase(ctx, node, op_idx), child_(child) {}

  void reopen() override {
    child_->reopen();
    taken_ = 0;
  }

 protected:
  std::optional<Element> do_next() override {
    if (taken_ >= node_->params.count) return std::nullopt;
    auto in = pull(*child_);
    if (!in.has_value()) return std::nullopt;
    ++taken_;
    return in;
  }

 private:
  IteratorBase* child_;
  int64_t taken_ = 0;
};

// First pass records elements; once the child is exhausted (or the probe
// truncation point is reached) subsequent epochs serve from memory and the
// subtree below is never reopened.
class CacheIterator : public IteratorBase {
 public:
  CacheIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                IteratorBase* child)
      : IteratorBase(ctx, node, op_idx), child_(child) {}

  void reopen() override {
    if (complete_) {
      serving_ = true;
      position_ = 0;
      return;
    }
    stored_.clear();
    child_->reopen();
  }

  bool complete() const { return complete_; }

 protected:
  std::optional<Element> do_next() override {
    if (serving_) {
      if (position_ >= stored_.size()) return std::nullopt;
      return stored_[position_++];
    }
    const int64_t truncate = ctx_->options.cache_probe_truncate;
    if (truncate > 0 && int64_t(stored_.size()) >= truncate) {
      complete_ = true;
      return std::nullopt;
    }
    auto in = pull(*child_);
    if (!in.has_value()) {
      complete_ = true;
      return std::nullopt;
    }
    stored_.push_back(*in);
    return in;
  }

 private:
  IteratorBase* child_;
  std::vector<Element> stored_;
  size_t position_ = 0;
  bool serving_ = false;
  bool complete_ = false;
};

class PrefetchIterator : public IteratorBase {
 public:
  PrefetchIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                   IteratorBase* child)
      : IteratorBase(ctx, node, op_idx),
        child_(child),
        queue_(size_t(node->params.buffer_size)) {
    auto_yield_ = false;
  }

  void start() override {
    stop_.store(false);
    worker_ = spawn_worker([this] {
      while (!stop_.load(std::memory_order_relaxed)) {
        auto in = pull(*child_);
        if (!in.has_value()) break;
        emit_yield(*in);
        if (!queue_.push(*in)) return;
      }
      queue_.finish();
    });
  }

  void shutdown() override {
    stop_.store(true);
    queue_.close();
  }

  void join() override {
    if (worker_.joinable()) worker_.join();
  }

  void reopen() override {
    shutdown();
    join();
    queue_.reset();
    child_->reopen();
    start();
  }

 protected:
  std::optional<Element> do_next() override { return queue_.pop(); }

 private:
  IteratorBase* child_;
  detail::BoundedQueue<Element> queue_;
  std::thread worker_;
  std::atomic<bool> stop_{false};
};

// Round-robins over cycle_length instances of the child subtree, each bound
// to a file partition. With a parallelism knob the live streams are serviced
// by a worker pool.
class InterleaveIterator : public IteratorBase {
 public:
  InterleaveIterator(EngineContext* ctx, const OperatorNode* node, int op_idx,
                     std::vector<IteratorBase*> streams)
      : IteratorBase(ctx, node, op_idx),
        streams_(std::move(streams)),
        parallelism_(node->tunable_parallelism.value_or(1)),
        queue_(size_t(2 * parallelism_)) {
    if (parallelism_ > 1) auto_yield_ = false;
    reset_live();
  }

  void start() override {
    if (ctx_->tracer) ctx_->tracer->record_parallelism(op_idx_, parallelism_);
    if (parallelism_ <= 1) return;
    const int64_t fan = std::min<int64_t>(parallelism_, int64_t(streams_.size()));
    active_producers_.store(fan);
    for (int64_t w = 0; w < fan; ++w)
      workers_.push_back(spawn_worker([this, w, fan] { worker_loop(w, fan); }));
  }

  void shutdown() override {
    stop_.store(true);
    queue_.close();
  }

  void join() override {
    for (auto& t : workers_)
      if (t.joinable()) t.join();
    workers_.clear();
  }

  void reopen() override {
    if (parallelism_ > 1) {
      shutdown();
      join();
      stop_.store(false);
      queue_.reset();
    }
    for (auto* s : streams_) s->reopen();
    reset_live();
    if (parallelism_ > 1) start();
  }

 protected:
  std::optional<Element> do_next() override {
    if (parallelism_ > 1) return queue_.pop();
    while (!live_.empty()) {
      if (rr_ >= live_.size()) rr_ = 0;
      auto element = pull(*live_[rr_]);
      if (element.has_value()) {
        ++rr_;
        return element;
      }
      live_.erase(live_.begin() + long(rr_));
    }
    return std::nullopt;
  }

 private:
  void reset_live() {
    live_ = streams_;
    rr_ = 0;
  }

  void worker_loop(int64_t w, int64_t fan) {
    // Each worker owns the streams congruent to its index.
    std::vector<IteratorBase*> mine;
    for (size_t i = size_t(w); i < streams_.size(); i += size_t(fan))
      mine.push_back(streams_[i]);
    size_t rr = 0;
    while (!stop_.load(std::memory_order_relaxed) && !mine.empty()) {
      if (rr >= mine.size()) rr = 0;
      auto element = pull(*mine[rr]);
      if (!element.has_value()) {
        mine.erase(mine.begin() + long(rr));
        continue;
      }
      ++rr;
      emit_yield(*element);
      if (!queue_.push(*element)) return;
    }
    if (active_producers_.fetch_sub(1) == 1) queue_.finish();
  }

  std::vector<IteratorBase*> streams_;
  std::vector<IteratorBase*> live_;
  size_t rr_ = 0;
  int64_t parallelism_;
  detail::BoundedQueue<Element> queue_;
  std::vector<std::thread> workers_;
  std::atomic<bool> stop_{false};
  std::atomic<int64_t> active_producers_{0};
};

}  // namespace detail

struct RunConfig {
  double seconds = 0.0;         // 0 = run to end of stream / element budget
  int64_t max_elements = 0;     // 0 = unlimited
  double warmup_fraction = 0.0; // fraction of `seconds` excluded from the rate
};

struct ThroughputReport {
  double minibatches_per_sec = 0.0;
  int64_t elements_consumed = 0;
  double wall_seconds = 0.0;
};

// Runtime instantiation of a PipelineSpec. One consumer drives next(); the
// handle may move between threads between calls.
class IteratorTree {
 public:
  static std::unique_ptr<IteratorTree> instantiate(
      const PipelineSpec& spec, const StoreRegistry& stores,
      std::shared_ptr<Tracer> tracer = nullptr,
      const InstantiateOptions& options = {}) {
    auto validation = validate_spec(spec);
    if (!validation.ok())
      throw EngineError("invalid spec: " + validation.violations.front());
    auto tree = std::unique_ptr<IteratorTree>(new IteratorTree());
    tree->spec_ = spec;
    tree->tracer_ = std::move(tracer);
    tree->ctx_.tracer = tree->tracer_.get();
    tree->ctx_.seed = options.seed;
    tree->ctx_.census = &tree->census_;
    tree->ctx_.options = options;
    tree->root_ = tree->build(spec.root_id, stores, 0, 1);
    for (auto& it : tree->iterators_) it->start();
    return tree;
  }

  ~IteratorTree() { close(); }

  std::optional<Element> next() {
    if (closed_) throw PipelineClosedError();
    return root_->next();
  }

  // Workers joined, counters flushed; next() afterwards reports CLOSED.
  void close() {
    if (closed_) return;
    closed_ = true;
    for (auto& it : iterators_) it->shutdown();
    for (auto& it : iterators_) it->join();
    if (tracer_) tracer_->flush_this_thread();
  }

  bool closed() const { return closed_; }

  // Pulls until the time/element budget is exhausted; the rate is computed
  // over the post-warmup window only.
  ThroughputReport run_benchmark(const RunConfig& config) {
    const int64_t t0 = steady_now_ns();
    const int64_t deadline =
        config.seconds > 0.0 ? t0 + int64_t(config.seconds * 1e9) : 0;
    const int64_t warmup_until =
        config.seconds > 0.0
            ? t0 + int64_t(config.seconds * config.warmup_fraction * 1e9)
            : t0;
    int64_t consumed = 0;
    int64_t warm_count = 0;
    int64_t warm_start = t0;
    bool warm_marked = config.warmup_fraction <= 0.0;
    while (true) {
      if (deadline != 0 && steady_now_ns() >= deadline) break;
      if (config.max_elements > 0 && consumed >= config.max_elements) break;
      auto element = next();
      if (!element.has_value()) break;
      ++consumed;
      if (!warm_marked) {
        const int64_t now = steady_now_ns();
        if (now >= warmup_until) {
          warm_marked = true;
          warm_count = consumed;
          warm_start = now;
        }
      }
    }
    const int64_t t1 = steady_now_ns();
    if (tracer_) tracer_->flush_this_thread();
    ThroughputReport report;
    report.elements_consumed = consumed;
    report.wall_seconds = double(t1 - t0) / 1e9;
    const int64_t rate_count = warm_marked ? consumed - warm_count : consumed;
    const double rate_window = double(t1 - (warm_marked ? warm_start : t0)) / 1e9;
    report.minibatches_per_sec =
        rate_window > 0.0 ? double(rate_count) / rate_window : 0.0;
    return report;
  }

  int64_t live_workers() const { return census_.live.load(); }
  int64_t workers_spawned(const std::string& op) { return census_.spawned_for(op); }
  const PipelineSpec& spec() const { return spec_; }
  Tracer* tracer() const { return tracer_.get(); }

 private:
  IteratorTree() = default;

  detail::IteratorBase* build(const std::string& name, const StoreRegistry& stores,
                              int64_t part_start, int64_t part_stride) {
    const OperatorNode* node = spec_.find(name);
    const int op_idx = tracer_ ? tracer_->op_index(name) : int(iterators_.size());

    if (node->kind == OperatorKind::kInterleave) {
      // Clone the child subtree once per cycle slot, partitioning files.
      const int64_t cycle = node->params.count;
      std::vector<detail::IteratorBase*> streams;
      for (int64_t j = 0; j < cycle; ++j)
        streams.push_back(build(node->children.front(), stores,
                                part_start + part_stride * j,
                                part_stride * cycle));
      return adopt(std::make_unique<detail::InterleaveIterator>(
          &ctx_, node, op_idx, std::move(streams)));
    }

    if (node->kind == OperatorKind::kSource) {
      auto it = stores.find(node->params.store_id);
      if (it == stores.end())
        throw EngineError("unknown store_id: " + node->params.store_id);
      return adopt(std::make_unique<detail::SourceIterator>(
          &ctx_, node, op_idx, it->second, part_start, part_stride));
    }

    detail::IteratorBase* child =
        build(node->children.front(), stores, part_start, part_stride);
    switch (node->kind) {
      case OperatorKind::kMap:
        return adopt(std::make_unique<detail::MapIterator>(&ctx_, node, op_idx, child));
      case OperatorKind::kFilter:
        return adopt(std::make_unique<detail::FilterIterator>(&ctx_, node, op_idx, child));
      case OperatorKind::kShuffle:
        return adopt(std::make_unique<detail::ShuffleIterator>(&ctx_, node, op_idx, child));
      case OperatorKind::kRepeat:
        return adopt(std::make_unique<detail::RepeatIterator>(&ctx_, node, op_idx, child));
      case OperatorKind::kBatch:
        return adopt(std::make_unique<detail::BatchIterator>(&ctx_, node, op_idx, child));
      case OperatorKind::kPrefetch:
        return adopt(std::make_unique<detail::PrefetchIterator>(&ctx_, node, op_idx, child));
      case OperatorKind::kCache:
        return adopt(std::make_unique<detail::CacheIterator>(&ctx_, node, op_idx, child));
      case OperatorKind::kTake:
        return adopt(std::make_unique<detail::TakeIterator>(&ctx_, node, op_idx, child));
      default:
        throw EngineError("unknown node kind for: " + name);
    }
  }

  detail::IteratorBase* adopt(std::unique_ptr<detail::IteratorBase> it) {
    iterators_.push_back(std::move(it));
    return iterators_.back().get();
  }

  PipelineSpec spec_;
  std::shared_ptr<Tracer> tracer_;
  detail::EngineContext ctx_;
  WorkerCensus census_;
  std::vector<std::unique_ptr<detail::IteratorBase>> iterators_;
  detail::IteratorBase* root_ = nullptr;
  bool closed_ = false;
};

struct TraceResult {
  TraceSnapshot snapshot;
  bool stable = false;
};

// Drives the tree until successive cumulative throughput estimates agree
// within `threshold`, or until max_seconds. A timeout returns the last
// snapshot with stable = false.
inline TraceResult trace_until_stable(IteratorTree& tree, double threshold,
                                      double min_seconds, double max_seconds,
                                      double cadence_seconds = 1.0) {
  Tracer* tracer = tree.tracer();
  if (tracer == nullptr)
    throw EngineError("trace_until_stable requires a traced tree");
  const int64_t t0 = steady_now_ns();
  int64_t next_check = t0 + int64_t(cadence_seconds * 1e9);
  double prev_estimate = -1.0;
  bool end_of_stream = false;
  while (true) {
    if (!end_of_stream && !tree.next().has_value()) end_of_stream = true;
    const int64_t now = steady_now_ns();
    if (!end_of_stream && now < next_check) continue;
    next_check = now + int64_t(cadence_seconds * 1e9);
    tracer->flush_this_thread();
    const double elapsed = double(now - t0) / 1e9;
    const double estimate = double(tracer->root_completions()) / std::max(elapsed, 1e-9);
    const bool converged =
        prev_estimate > 0.0 &&
        std::abs(estimate - prev_estimate) / prev_estimate < threshold;
    if ((converged && elapsed >= min_seconds) || end_of_stream)
      return {tracer->snapshot(/*allow_empty=*/true), converged || end_of_stream};
    if (elapsed >= max_seconds)
      return {tracer->snapshot(/*allow_empty=*/true), false};
    prev_estimate = estimate;
  }
}

}  // namespace pipetune
