#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pipetune/clock.hpp"
#include "pipetune/file_store.hpp"

namespace pipetune {

// Empirical parallelism -> bandwidth curve with piecewise-linear
// interpolation. The fit passes through every sample exactly; the knee is the
// minimal integer parallelism reaching knee_fraction of the maximum.
struct BandwidthCurve {
  struct Sample {
    int64_t parallelism = 0;
    double bytes_per_sec = 0.0;
  };

  std::vector<Sample> samples;  // sorted by parallelism
  double knee_fraction = 0.95;

  static BandwidthCurve from_samples(std::vector<Sample> samples,
                                     double knee_fraction = 0.95) {
    if (samples.empty())
      throw std::invalid_argument("bandwidth curve needs >= 1 sample");
    std::sort(samples.begin(), samples.end(),
              [](const Sample& a, const Sample& b) {
                return a.parallelism < b.parallelism;
              });
    return BandwidthCurve{std::move(samples), knee_fraction};
  }

  static BandwidthCurve flat(double bytes_per_sec) {
    return BandwidthCurve{{{1, bytes_per_sec}}, 0.95};
  }

  double max_bandwidth() const {
    double best = 0.0;
    for (const auto& s : samples) best = std::max(best, s.bytes_per_sec);
    return best;
  }

  // Linear between adjacent samples, clamped outside the sampled range.
  double interpolate(double parallelism) const {
    if (parallelism <= double(samples.front().parallelism))
      return samples.front().bytes_per_sec;
    if (parallelism >= double(samples.back().parallelism))
      return samples.back().bytes_per_sec;
    for (size_t i = 1; i < samples.size(); ++i) {
      const auto& lo = samples[i - 1];
      const auto& hi = samples[i];
      if (parallelism <= double(hi.parallelism)) {
        const double t = (parallelism - double(lo.parallelism)) /
                         double(hi.parallelism - lo.parallelism);
        return lo.bytes_per_sec + t * (hi.bytes_per_sec - lo.bytes_per_sec);
      }
    }
    return samples.back().bytes_per_sec;
  }

  int64_t knee() const {
    const double target = knee_fraction * max_bandwidth();
    for (int64_t p = samples.front().parallelism;
         p <= samples.back().parallelism; ++p) {
      if (interpolate(double(p)) >= target) return p;
    }
    return samples.back().parallelism;
  }
};

inline nlohmann::json curve_to_json(const BandwidthCurve& curve) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : curve.samples)
    samples.push_back({{"parallelism", s.parallelism}, {"bytes_per_sec", s.bytes_per_sec}});
  return nlohmann::json{{"samples", std::move(samples)},
                        {"knee_fraction", curve.knee_fraction},
                        {"knee", curve.knee()}};
}

inline BandwidthCurve curve_from_json(const nlohmann::json& j) {
  std::vector<BandwidthCurve::Sample> samples;
  for (const auto& js : j.at("samples"))
    samples.push_back({js.at("parallelism").get<int64_t>(),
                       js.at("bytes_per_sec").get<double>()});
  return BandwidthCurve::from_samples(std::move(samples),
                                      j.value("knee_fraction", 0.95));
}

// Runs one timed parallel-read trial per level against the store's buckets
// and fits the resulting curve. Buckets are drained before each trial so the
// startup burst does not inflate the measurement.
inline BandwidthCurve bench_bandwidth(FileStore& store,
                                      const std::vector<int64_t>& levels,
                                      double seconds_per_level = 0.4,
                                      int64_t chunk_bytes = 1 << 20) {
  if (levels.empty()) throw std::invalid_argument("empty parallelism level list");
  std::vector<BandwidthCurve::Sample> samples;
  for (int64_t level : levels) {
    if (level < 1) throw std::invalid_argument("parallelism level must be >= 1");
    store.drain_buckets();
    std::atomic<bool> stop{false};
    std::atomic<int64_t> bytes{0};
    std::vector<std::thread> readers;
    const int64_t t0 = steady_now_ns();
    for (int64_t r = 0; r < level; ++r) {
      readers.emplace_back([&, r] {
        auto reader_bucket = store.make_reader_limiter();
        const auto& files = store.files();
        size_t i = size_t(r) % files.size();
        while (!stop.load(std::memory_order_relaxed)) {
          const int64_t got = store.read(files[i].id, chunk_bytes, reader_bucket.get());
          bytes.fetch_add(got, std::memory_order_relaxed);
          i = (i + 1) % files.size();
        }
      });
    }
    std::this_thread::sleep_for(
        std::chrono::nanoseconds(int64_t(seconds_per_level * 1e9)));
    stop.store(true);
    for (auto& t : readers) t.join();
    const double elapsed = double(steady_now_ns() - t0) / 1e9;
    samples.push_back({level, double(bytes.load()) / elapsed});
  }
  return BandwidthCurve::from_samples(std::move(samples));
}

}  // namespace pipetune
