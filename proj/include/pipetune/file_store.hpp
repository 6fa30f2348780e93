#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pipetune/clock.hpp"

namespace pipetune {

// Byte-granular token bucket. Refill is continuous (computed from elapsed
// time at each request); capacity bounds the burst. acquire() never fails, it
// returns how long the caller must sleep before its bytes are "served".
class TokenBucket {
 public:
  TokenBucket(double bytes_per_sec, double capacity_bytes)
      : rate_(bytes_per_sec),
        capacity_(capacity_bytes),
        tokens_(capacity_bytes),
        last_refill_ns_(steady_now_ns()) {}

  // Reserves `bytes` and returns the wait in nanoseconds until they are
  // available. Tokens may go negative: that is the queued debt of callers
  // already scheduled, which keeps aggregate throughput of any number of
  // concurrent readers at the configured rate.
  int64_t acquire(int64_t bytes) {
    std::lock_guard<std::mutex> lock(mu_);
    refill_locked();
    tokens_ -= double(bytes);
    if (tokens_ >= 0.0) return 0;
    return int64_t(std::ceil(-tokens_ / rate_ * 1e9));
  }

  // Empties the bucket (and forgives debt); used to measure steady-state
  // throughput without the startup burst.
  void drain() {
    std::lock_guard<std::mutex> lock(mu_);
    refill_locked();
    tokens_ = 0.0;
  }

  double rate() const { return rate_; }
  double capacity() const { return capacity_; }
  double tokens() const {
    std::lock_guard<std::mutex> lock(mu_);
    return std::min(tokens_, capacity_);
  }

 private:
  void refill_locked() {
    const int64_t now = steady_now_ns();
    tokens_ = std::min(capacity_, tokens_ + rate_ * double(now - last_refill_ns_) / 1e9);
    last_refill_ns_ = now;
  }

  mutable std::mutex mu_;
  double rate_;
  double capacity_;
  double tokens_;
  int64_t last_refill_ns_;
};

struct FileEntry {
  int64_t id = 0;
  int64_t size_bytes = 0;
};

struct SizeDistribution {
  enum class Kind { kConstant, kLognormal } kind = Kind::kConstant;
  double constant_bytes = 0.0;
  double mu = 0.0;     // lognormal location (of ln bytes)
  double sigma = 0.0;  // lognormal scale

  static SizeDistribution constant(double bytes) {
    return {Kind::kConstant, bytes, 0.0, 0.0};
  }
  static SizeDistribution lognormal(double mu, double sigma) {
    return {Kind::kLognormal, 0.0, mu, sigma};
  }
};

// Simulated blob/file store. Holds metadata only (no backing bytes); read()
// accounts bytes against the optional token buckets and blocks accordingly.
class FileStore {
 public:
  struct ServedChunk {
    double at_seconds;  // relative to store creation
    int64_t bytes;
  };

  FileStore(std::vector<FileEntry> files, uint64_t seed)
      : files_(std::move(files)), seed_(seed), created_ns_(steady_now_ns()) {
    for (size_t i = 0; i < files_.size(); ++i) index_by_id_[files_[i].id] = i;
  }

  static FileStore create(int64_t file_count, const SizeDistribution& dist,
                          uint64_t seed) {
    if (file_count < 1) throw std::invalid_argument("file_count must be >= 1");
    std::mt19937_64 rng(seed);
    std::vector<FileEntry> files;
    files.reserve(size_t(file_count));
    std::lognormal_distribution<double> lognorm(dist.mu, dist.sigma);
    for (int64_t i = 0; i < file_count; ++i) {
      int64_t size = 0;
      do {
        const double raw = dist.kind == SizeDistribution::Kind::kConstant
                               ? dist.constant_bytes
                               : lognorm(rng);
        size = int64_t(std::llround(raw));
      } while (size <= 0);  // nonpositive samples are resampled
      files.push_back({i, size});
    }
    return FileStore(std::move(files), seed);
  }

  const std::vector<FileEntry>& files() const { return files_; }
  uint64_t seed() const { return seed_; }

  int64_t total_bytes() const {
    int64_t total = 0;
    for (const auto& f : files_) total += f.size_bytes;
    return total;
  }

  int64_t file_size(int64_t file_id) const {
    auto it = index_by_id_.find(file_id);
    if (it == index_by_id_.end())
      throw std::runtime_error("unknown file: " + std::to_string(file_id));
    return files_[it->second].size_bytes;
  }

  // Global cap shared by all readers; per-reader cap applies to each
  // concurrent read stream separately (see make_reader_limiter).
  void set_bandwidth_limit(std::optional<double> bytes_per_sec,
                           double burst_seconds = 1.0) {
    std::lock_guard<std::mutex> lock(mu_);
    if (bytes_per_sec.has_value() && *bytes_per_sec > 0.0)
      global_bucket_ = std::make_unique<TokenBucket>(
          *bytes_per_sec, *bytes_per_sec * burst_seconds);
    else
      global_bucket_.reset();
    bandwidth_limit_ = bytes_per_sec;
  }

  void set_per_reader_limit(std::optional<double> bytes_per_sec) {
    std::lock_guard<std::mutex> lock(mu_);
    per_reader_limit_ = bytes_per_sec;
  }

  std::optional<double> bandwidth_limit() const {
    std::lock_guard<std::mutex> lock(mu_);
    return bandwidth_limit_;
  }
  std::optional<double> per_reader_limit() const {
    std::lock_guard<std::mutex> lock(mu_);
    return per_reader_limit_;
  }

  // Each concurrent read stream owns one of these.
  std::unique_ptr<TokenBucket> make_reader_limiter() const {
    std::lock_guard<std::mutex> lock(mu_);
    if (!per_reader_limit_.has_value()) return nullptr;
    return std::make_unique<TokenBucket>(*per_reader_limit_, *per_reader_limit_);
  }

  void drain_buckets() {
    std::lock_guard<std::mutex> lock(mu_);
    if (global_bucket_) global_bucket_->drain();
  }

  // Blocks until the bytes clear both buckets, then logs them as served.
  // Returns the number of bytes served (always nbytes; reads never fail for
  // capacity).
  int64_t read(int64_t file_id, int64_t nbytes,
               TokenBucket* reader_bucket = nullptr) {
    (void)file_size(file_id);  // throws on unknown file
    if (nbytes <= 0) return 0;
    int64_t wait_ns = 0;
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (global_bucket_) wait_ns = global_bucket_->acquire(nbytes);
    }
    if (reader_bucket) wait_ns = std::max(wait_ns, reader_bucket->acquire(nbytes));
    if (wait_ns > 0)
      std::this_thread::sleep_for(std::chrono::nanoseconds(wait_ns));
    {
      std::lock_guard<std::mutex> lock(mu_);
      bytes_served_ += nbytes;
      if (bandwidth_limit_.has_value())
        serving_log_.push_back(
            {double(steady_now_ns() - created_ns_) / 1e9, nbytes});
    }
    return nbytes;
  }

  int64_t bytes_served() const {
    std::lock_guard<std::mutex> lock(mu_);
    return bytes_served_;
  }

  // Chunk log, populated only while a global limit is set.
  std::vector<ServedChunk> serving_log() const {
    std::lock_guard<std::mutex> lock(mu_);
    return serving_log_;
  }

 private:
  std::vector<FileEntry> files_;
  std::map<int64_t, size_t> index_by_id_;
  uint64_t seed_ = 0;
  int64_t created_ns_ = 0;

  mutable std::mutex mu_;
  std::unique_ptr<TokenBucket> global_bucket_;
  std::optional<double> bandwidth_limit_;
  std::optional<double> per_reader_limit_;
  int64_t bytes_served_ = 0;
  std::vector<ServedChunk> serving_log_;
};

// Store descriptions bind to pipelines by store_id at run time.
using StoreRegistry = std::map<std::string, std::shared_ptr<FileStore>>;

// JSON wire format: {"files":[{"id","size"}...], "bandwidth": int|null}
inline nlohmann::json store_to_json(const FileStore& store) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : store.files())
    files.push_back({{"id", f.id}, {"size", f.size_bytes}});
  nlohmann::json j;
  j["files"] = std::move(files);
  const auto limit = store.bandwidth_limit();
  if (limit.has_value())
    j["bandwidth"] = int64_t(*limit);
  else
    j["bandwidth"] = nullptr;
  return j;
}

inline std::shared_ptr<FileStore> store_from_json(const nlohmann::json& j) {
  std::vector<FileEntry> files;
  for (const auto& jf : j.at("files"))
    files.push_back({jf.at("id").get<int64_t>(), jf.at("size").get<int64_t>()});
  auto store = std::make_shared<FileStore>(std::move(files), /*seed=*/0);
  if (j.contains("bandwidth") && !j.at("bandwidth").is_null())
    store->set_bandwidth_limit(double(j.at("bandwidth").get<int64_t>()));
  return store;
}

// Rescales a subsample of file sizes to estimate the full store size:
// (m/n) * sum of n sampled sizes.
inline double estimate_source_size(const std::vector<int64_t>& sampled_sizes,
                                   int64_t total_files) {
  if (sampled_sizes.empty())
    throw std::invalid_argument("estimate_source_size needs >= 1 sample");
  if (total_files < int64_t(sampled_sizes.size()))
    throw std::invalid_argument("total_files smaller than sample");
  double sum = 0.0;
  for (int64_t s : sampled_sizes) sum += double(s);
  return sum * double(total_files) / double(sampled_sizes.size());
}

}  // namespace pipetune
