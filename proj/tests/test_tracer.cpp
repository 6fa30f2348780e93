#include <cstdio>
#include <thread>

#include <catch2/catch_amalgamated.hpp>

#include "pipetune/clock.hpp"
#include "pipetune/engine.hpp"
#include "pipetune/tracer.hpp"
#include "test_helpers.hpp"

using namespace pipetune;
using namespace testutil;

namespace {

PipelineSpec two_op_spec(double parent_cost_us, double child_cost_us) {
  PipelineSpec spec;
  spec.root_id = "parent";
  spec.nodes = {
      node("parent", OperatorKind::kMap, {"child"}, map_params(parent_cost_us), 1),
      node("child", OperatorKind::kMap, {"src"}, map_params(child_cost_us), 1),
      node("src", OperatorKind::kSource, {}, source_params("s", 200, 1000)),
  };
  return spec;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/pipetune_test_") + name + "_" +
         std::to_string(::getpid()) + ".json";
}

}  // namespace

TEST_CASE("work events attribute busy time to their operators") {
  auto spec = two_op_spec(1.0, 1.0);
  auto tracer = Tracer::create(spec, /*window_events=*/1);
  // One next() in which the parent spends 3 ms and the child 7 ms.
  tracer->attribute("parent", TraceEvent::pull_start());
  tracer->attribute("child", TraceEvent::work(7'000'000));
  tracer->attribute("child", TraceEvent::yield(500));
  tracer->attribute("parent", TraceEvent::pull_end(true));
  tracer->attribute("parent", TraceEvent::work(3'000'000));
  tracer->attribute("parent", TraceEvent::yield(500));
  tracer->flush_this_thread();
  auto snap = tracer->snapshot();
  REQUIRE(snap.at("parent").active_cpu_ns >= 3'000'000);
  REQUIRE(snap.at("child").active_cpu_ns >= 7'000'000);
  REQUIRE(snap.at("parent").arrivals == 1);
  REQUIRE(snap.at("child").completions == 1);
}

TEST_CASE("yield updates bytes and completions") {
  auto spec = two_op_spec(1.0, 1.0);
  auto tracer = Tracer::create(spec);
  tracer->attribute("child", TraceEvent::yield(112640));
  tracer->flush_this_thread();
  auto snap = tracer->snapshot(/*allow_empty=*/true);
  REQUIRE(snap.at("child").bytes_produced == 112640);
  REQUIRE(snap.at("child").completions == 1);
}

TEST_CASE("chunked reads sum to the file size") {
  auto spec = two_op_spec(1.0, 1.0);
  auto tracer = Tracer::create(spec);
  const int64_t total = 144'000'000;
  const int64_t chunk = 4096;
  for (int64_t done = 0; done < total; done += chunk)
    tracer->attribute("src", TraceEvent::read(std::min(chunk, total - done)));
  auto snap = tracer->snapshot(/*allow_empty=*/true);
  REQUIRE(snap.at("src").bytes_read == total);
}

TEST_CASE("unknown operator names fail fast") {
  auto spec = two_op_spec(1.0, 1.0);
  auto tracer = Tracer::create(spec);
  REQUIRE_THROWS_AS(tracer->attribute("ghost", TraceEvent::yield(1)),
                    TracerError);
}

TEST_CASE("snapshot without root completions is EMPTY_TRACE") {
  auto spec = two_op_spec(1.0, 1.0);
  auto tracer = Tracer::create(spec);
  REQUIRE_THROWS_WITH(tracer->snapshot(),
                      Catch::Matchers::ContainsSubstring("EMPTY_TRACE"));
  REQUIRE_NOTHROW(tracer->snapshot(/*allow_empty=*/true));
}

TEST_CASE("successive snapshots dominate counter-wise") {
  auto stores = make_store(4, 400'000);
  auto spec = chain_spec(100, 1000, 20.0, 10);
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  for (int i = 0; i < 5; ++i) tree->next();
  tracer->flush_this_thread();
  auto first = tracer->snapshot();
  for (int i = 0; i < 5; ++i) tree->next();
  tracer->flush_this_thread();
  auto second = tracer->snapshot();
  tree->close();
  for (const auto& [name, stats] : first.ops) {
    REQUIRE(second.at(name).completions >= stats.completions);
    REQUIRE(second.at(name).arrivals >= stats.arrivals);
    REQUIRE(second.at(name).active_cpu_ns >= stats.active_cpu_ns);
    REQUIRE(second.at(name).bytes_produced >= stats.bytes_produced);
  }
  REQUIRE(second.wall_seconds > first.wall_seconds);
}

TEST_CASE("engine attribution matches configured cost ratio within 15%") {
  // Two maps with a 1:4 cost ratio, >= 1000 elements.
  auto stores = make_store(4, 2'000'000);
  auto spec = two_op_spec(200.0, 800.0);
  spec.find("src")->params.records_per_file = 300;
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  while (tree->next().has_value()) {
  }
  tree->close();
  auto snap = tracer->snapshot();
  REQUIRE(snap.at("parent").completions >= 1000);
  const double ratio = double(snap.at("child").active_cpu_ns) /
                       double(snap.at("parent").active_cpu_ns);
  REQUIRE(ratio == Catch::Approx(4.0).epsilon(0.15));
}

TEST_CASE("single-consumer run: attributed CPU tracks busy wall within 10%") {
  auto stores = make_store(4, 1'000'000);
  // Sequential maps only (no knobs): everything runs on the consumer thread.
  PipelineSpec spec;
  spec.root_id = "m2";
  spec.nodes = {
      node("m2", OperatorKind::kMap, {"m1"}, map_params(500.0)),
      node("m1", OperatorKind::kMap, {"src"}, map_params(1500.0)),
      node("src", OperatorKind::kSource, {}, source_params("s", 150, 1000)),
  };
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  const int64_t t0 = steady_now_ns();
  while (tree->next().has_value()) {
  }
  const double busy_wall = double(steady_now_ns() - t0) / 1e9;
  tree->close();
  auto snap = tracer->snapshot();
  double total_cpu = 0.0;
  for (const auto& [name, s] : snap.ops) total_cpu += double(s.active_cpu_ns) / 1e9;
  REQUIRE(total_cpu == Catch::Approx(busy_wall).epsilon(0.10));
  REQUIRE(total_cpu <= busy_wall * 1.01);  // exclusivity: one worker
}

TEST_CASE("snapshot dump/load round-trips") {
  auto stores = make_store(4, 400'000);
  auto spec = chain_spec(100, 1000, 20.0, 10);
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  for (int i = 0; i < 8; ++i) tree->next();
  tree->close();
  auto snap = tracer->snapshot();
  const auto path = temp_path("snap");
  dump_snapshot(snap, path);
  auto loaded = load_snapshot(path);
  REQUIRE(loaded.wall_seconds == Catch::Approx(snap.wall_seconds));
  REQUIRE(loaded.spec == snap.spec);
  REQUIRE(loaded.ops == snap.ops);
  std::remove(path.c_str());
}

TEST_CASE("snapshot file missing a node entry names the node") {
  auto stores = make_store(4, 400'000);
  auto spec = chain_spec(100, 1000, 20.0, 10);
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  for (int i = 0; i < 4; ++i) tree->next();
  tree->close();
  auto j = snapshot_to_json(tracer->snapshot());
  j["ops"].erase("map");
  REQUIRE_THROWS_WITH(snapshot_from_json(j),
                      Catch::Matchers::ContainsSubstring("map"));
}

TEST_CASE("malformed snapshot file reports a parse error") {
  const auto path = temp_path("bad");
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  REQUIRE_THROWS_WITH(load_snapshot(path),
                      Catch::Matchers::ContainsSubstring("malformed"));
  std::remove(path.c_str());
}

TEST_CASE("large spec snapshots scale linearly in size") {
  PipelineSpec spec;
  spec.root_id = "stage0";
  std::string below = "src";
  spec.nodes.push_back(node("src", OperatorKind::kSource, {},
                            source_params("s", 10, 100)));
  for (int i = 199; i >= 0; --i) {
    const std::string name = "stage" + std::to_string(i);
    spec.nodes.insert(spec.nodes.begin(),
                      node(name, OperatorKind::kMap, {below}, map_params(0.0)));
    below = name;
  }
  spec.root_id = "stage0";
  auto tracer = Tracer::create(spec);
  tracer->attribute("stage0", TraceEvent::yield(1));
  auto small = snapshot_to_json(tracer->snapshot()).dump();
  // 200 ops serialize to well under 1 KB per op.
  REQUIRE(small.size() < 200 * 1024);
  REQUIRE(snapshot_from_json(nlohmann::json::parse(small)).ops.size() == 201);
}

TEST_CASE("trace_until_stable converges on a steady pipeline") {
  auto stores = make_store(64, 10'000'000);
  auto spec = chain_spec(4000, 1000, 50.0, 8);
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  auto result = trace_until_stable(*tree, 0.05, 1.0, 20.0, 0.5);
  tree->close();
  REQUIRE(result.stable);
  REQUIRE(result.snapshot.wall_seconds < 15.0);
  REQUIRE(result.snapshot.at("batch").completions > 0);
}

TEST_CASE("threshold of 100% returns after the first comparison") {
  auto stores = make_store(64, 10'000'000);
  auto spec = chain_spec(4000, 1000, 50.0, 8);
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  auto result = trace_until_stable(*tree, 1.0, 0.0, 30.0, 0.4);
  tree->close();
  REQUIRE(result.stable);
  REQUIRE(result.snapshot.wall_seconds < 2.5);
}

TEST_CASE("timeout returns the last snapshot with stable = false") {
  auto stores = make_store(64, 10'000'000);
  auto spec = chain_spec(4000, 1000, 50.0, 8);
  auto tracer = Tracer::create(spec);
  auto tree = IteratorTree::instantiate(spec, stores, tracer);
  // Impossible threshold, tiny budget.
  auto result = trace_until_stable(*tree, 1e-9, 0.0, 1.2, 0.3);
  tree->close();
  REQUIRE_FALSE(result.stable);
}
