#pragma once

#include <cstdint>
#include <string>

#include "pipetune/bench.hpp"
#include "pipetune/engine.hpp"
#include "pipetune/optimizer.hpp"
#include "pipetune/rewriter.hpp"

namespace pipetune {

struct EndToEndOptions {
  double trace_threshold = 0.05;
  double trace_min_seconds = 4.0;
  double trace_max_seconds = 12.0;
  double trace_cadence_seconds = 1.0;
  double measure_seconds = 30.0;
  double warmup_fraction = 0.3;   // must cover cache cold-start in the after-run
  int passes = 2;
  uint64_t seed = 42;
};

struct EndToEndResult {
  ThroughputReport before;
  ThroughputReport after;
  double speedup = 0.0;
  TuningPlan final_plan;
  PipelineSpec optimized;
};

// Measure, then trace -> plan -> rewrite (twice, re-tracing the rewritten
// pipeline so the second pass sees post-rewrite rates), then re-measure.
inline EndToEndResult end_to_end(const PipelineSpec& spec, const StoreRegistry& stores,
                                 const ResourceBudget& budget,
                                 const EndToEndOptions& options = {}) {
  EndToEndResult result;
  InstantiateOptions inst;
  inst.seed = options.seed;

  {
    for (const auto& [id, store] : stores) store->drain_buckets();
    auto tree = IteratorTree::instantiate(spec, stores, nullptr, inst);
    RunConfig run;
    run.seconds = options.measure_seconds;
    run.warmup_fraction = options.warmup_fraction;
    result.before = tree->run_benchmark(run);
    tree->close();
  }

  PipelineSpec current = spec;
  for (int pass = 0; pass < options.passes; ++pass) {
    for (const auto& [id, store] : stores) store->drain_buckets();
    auto tracer = Tracer::create(current);
    auto tree = IteratorTree::instantiate(current, stores, tracer, inst);
    auto traced = trace_until_stable(*tree, options.trace_threshold,
                                     options.trace_min_seconds,
                                     options.trace_max_seconds,
                                     options.trace_cadence_seconds);
    tree->close();
    result.final_plan = plan(traced.snapshot, budget, stores);
    current = apply_plan(current, result.final_plan);
  }
  result.optimized = current;

  {
    for (const auto& [id, store] : stores) store->drain_buckets();
    auto tree = IteratorTree::instantiate(result.optimized, stores, nullptr, inst);
    RunConfig run;
    run.seconds = options.measure_seconds;
    run.warmup_fraction = options.warmup_fraction;
    result.after = tree->run_benchmark(run);
    tree->close();
  }

  result.speedup = result.before.minibatches_per_sec > 0.0
                       ? result.after.minibatches_per_sec /
                             result.before.minibatches_per_sec
                       : 0.0;
  return result;
}

}  // namespace pipetune
