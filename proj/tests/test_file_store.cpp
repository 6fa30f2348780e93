#include <atomic>
#include <thread>

#include <catch2/catch_amalgamated.hpp>

#include "pipetune/bandwidth_curve.hpp"
#include "pipetune/clock.hpp"
#include "pipetune/file_store.hpp"

using namespace pipetune;

TEST_CASE("constant store matches the published synthetic sizing") {
  auto store = FileStore::create(1024, SizeDistribution::constant(144.0 * 1024 * 1024), 7);
  REQUIRE(store.files().size() == 1024);
  REQUIRE(store.total_bytes() == int64_t{154'618'822'656});
}

TEST_CASE("single one-byte file") {
  auto store = FileStore::create(1, SizeDistribution::constant(1.0), 3);
  REQUIRE(store.total_bytes() == 1);
}

TEST_CASE("lognormal stores are seed-deterministic") {
  auto a = FileStore::create(64, SizeDistribution::lognormal(18.0, 0.5), 11);
  auto b = FileStore::create(64, SizeDistribution::lognormal(18.0, 0.5), 11);
  auto c = FileStore::create(64, SizeDistribution::lognormal(18.0, 0.5), 12);
  REQUIRE(a.files()[0].size_bytes == b.files()[0].size_bytes);
  bool any_differs = false;
  for (size_t i = 0; i < a.files().size(); ++i) {
    REQUIRE(a.files()[i].size_bytes == b.files()[i].size_bytes);
    REQUIRE(a.files()[i].size_bytes > 0);
    if (a.files()[i].size_bytes != c.files()[i].size_bytes) any_differs = true;
  }
  REQUIRE(any_differs);
}

TEST_CASE("read of an unknown file fails") {
  auto store = FileStore::create(4, SizeDistribution::constant(1000.0), 1);
  REQUIRE_THROWS_WITH(store.read(99, 10),
                      Catch::Matchers::ContainsSubstring("unknown file"));
}

TEST_CASE("unlimited reads return immediately") {
  auto store = FileStore::create(4, SizeDistribution::constant(1e9), 1);
  const int64_t t0 = steady_now_ns();
  for (int i = 0; i < 100; ++i) store.read(0, 1 << 20);
  REQUIRE(double(steady_now_ns() - t0) / 1e9 < 0.5);
  REQUIRE(store.bytes_served() == 100 * (1 << 20));
}

TEST_CASE("token bucket enforces the rate once the burst is drained") {
  auto store = FileStore::create(4, SizeDistribution::constant(1e9), 1);
  store.set_bandwidth_limit(100e6);  // 100 MB/s
  store.drain_buckets();
  const int64_t bytes = 14'417'920;  // one resnet minibatch of records
  const int64_t t0 = steady_now_ns();
  store.read(0, bytes);
  const double elapsed = double(steady_now_ns() - t0) / 1e9;
  REQUIRE(elapsed >= double(bytes) / 100e6 * 0.95);
  REQUIRE(elapsed < double(bytes) / 100e6 * 2.0 + 0.05);
}

TEST_CASE("initial burst capacity serves one bucket for free") {
  auto store = FileStore::create(4, SizeDistribution::constant(1e9), 1);
  store.set_bandwidth_limit(100e6);
  const int64_t t0 = steady_now_ns();
  store.read(0, 50'000'000);  // under the 100 MB burst
  REQUIRE(double(steady_now_ns() - t0) / 1e9 < 0.1);
}

TEST_CASE("two concurrent readers share the global limit") {
  auto store = FileStore::create(4, SizeDistribution::constant(1e9), 1);
  const double limit = 200e6;
  store.set_bandwidth_limit(limit);
  store.drain_buckets();
  std::atomic<int64_t> served{0};
  const int64_t t0 = steady_now_ns();
  auto reader = [&](int file) {
    for (int i = 0; i < 50; ++i)
      served.fetch_add(store.read(file, 2 << 20));
  };
  std::thread a(reader, 0), b(reader, 1);
  a.join();
  b.join();
  const double elapsed = double(steady_now_ns() - t0) / 1e9;
  const double rate = double(served.load()) / elapsed;
  REQUIRE(rate <= limit * 1.05);
  REQUIRE(rate >= limit * 0.80);
}

TEST_CASE("served bytes obey capacity + rate * window on the serving log") {
  auto store = FileStore::create(2, SizeDistribution::constant(1e9), 1);
  const double limit = 50e6;
  store.set_bandwidth_limit(limit);
  for (int i = 0; i < 40; ++i) store.read(i % 2, 4 << 20);
  const auto log = store.serving_log();
  REQUIRE_FALSE(log.empty());
  for (size_t i = 0; i < log.size(); ++i) {
    int64_t bytes = 0;
    for (size_t j = i; j < log.size(); ++j) bytes += log[j].bytes;
    const double window = log.back().at_seconds - log[i].at_seconds;
    // capacity (1s of tokens) + B * window, plus one chunk of slack for the
    // chunk that straddles the window edge.
    REQUIRE(double(bytes) <= limit * 1.0 + limit * window + double(4 << 20));
  }
}

TEST_CASE("estimate_source_size rescales a subsample") {
  std::vector<int64_t> sample(10, 144'000'000);
  REQUIRE(estimate_source_size(sample, 1000) == Catch::Approx(1.44e11));
  REQUIRE_THROWS(estimate_source_size({}, 10));
  REQUIRE_THROWS(estimate_source_size(sample, 5));
}

TEST_CASE("store JSON round-trips") {
  auto store = FileStore::create(8, SizeDistribution::lognormal(12.0, 0.3), 5);
  store.set_bandwidth_limit(123e6);
  auto j = store_to_json(store);
  auto back = store_from_json(j);
  REQUIRE(back->files().size() == 8);
  REQUIRE(back->total_bytes() == store.total_bytes());
  REQUIRE(back->bandwidth_limit().has_value());
  REQUIRE(*back->bandwidth_limit() == Catch::Approx(123e6));
}

TEST_CASE("piecewise-linear curve interpolates samples exactly") {
  auto curve = BandwidthCurve::from_samples(
      {{1, 100e6}, {4, 400e6}, {2, 200e6}, {8, 400e6}, {16, 400e6}});
  // Samples sorted by parallelism and reproduced exactly.
  REQUIRE(curve.samples.front().parallelism == 1);
  for (const auto& s : curve.samples)
    REQUIRE(curve.interpolate(double(s.parallelism)) ==
            Catch::Approx(s.bytes_per_sec));
  // Linear between adjacent samples.
  REQUIRE(curve.interpolate(3.0) == Catch::Approx(300e6));
  REQUIRE(curve.interpolate(0.5) == Catch::Approx(100e6));
  REQUIRE(curve.interpolate(20.0) == Catch::Approx(400e6));
  REQUIRE(curve.max_bandwidth() == Catch::Approx(400e6));
  // knee: min integer parallelism with >= 0.95 * max.
  REQUIRE(curve.knee() == 4);
}

TEST_CASE("single-sample curve has knee 1") {
  auto curve = BandwidthCurve::from_samples({{1, 250e6}});
  REQUIRE(curve.knee() == 1);
  REQUIRE(curve.interpolate(64.0) == Catch::Approx(250e6));
}

TEST_CASE("bench_bandwidth finds the knee of a capped store") {
  auto store = FileStore::create(16, SizeDistribution::constant(1e9), 1);
  store.set_bandwidth_limit(400e6);
  store.set_per_reader_limit(100e6);
  auto curve = bench_bandwidth(store, {1, 2, 4, 8}, 0.3);
  REQUIRE(curve.samples.size() == 4);
  REQUIRE(curve.knee() == 4);
  REQUIRE(curve.max_bandwidth() == Catch::Approx(400e6).margin(40e6));
}

TEST_CASE("bench_bandwidth on an unlimited store is flat with knee 1") {
  auto store = FileStore::create(8, SizeDistribution::constant(1e9), 1);
  auto curve = bench_bandwidth(store, {1, 2, 4}, 0.15);
  REQUIRE(curve.knee() == 1);
}

TEST_CASE("bench_bandwidth rejects an empty level list") {
  auto store = FileStore::create(2, SizeDistribution::constant(1e6), 1);
  REQUIRE_THROWS(bench_bandwidth(store, {}));
}
