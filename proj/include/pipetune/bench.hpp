#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pipetune/engine.hpp"
#include "pipetune/optimizer.hpp"
#include "pipetune/rewriter.hpp"

namespace pipetune {

struct BenchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Presets. Parameters are desk-scale calibrations of the published workload
// shapes: record sizes and batch sizes are kept (110 KiB records, batch 128
// for the vision shape), per-element costs are sized so the suites converge
// on small machines.

struct Preset {
  PipelineSpec spec;
  StoreRegistry stores;
  std::string store_id;
};

struct PresetOverrides {
  std::optional<int64_t> files;
  std::optional<int64_t> records_per_file;
  std::optional<uint64_t> seed;
};

namespace detail {

inline OperatorNode make_node(std::string name, OperatorKind kind,
                              std::vector<std::string> children,
                              OperatorParams params = {},
                              std::optional<int64_t> parallelism = {}) {
  OperatorNode n;
  n.name = std::move(name);
  n.kind = kind;
  n.children = std::move(children);
  n.params = std::move(params);
  n.tunable_parallelism = parallelism;
  return n;
}

}  // namespace detail

inline Preset make_preset(const std::string& name,
                          const PresetOverrides& overrides = {}) {
  using detail::make_node;
  const uint64_t seed = overrides.seed.value_or(7);
  Preset preset;

  auto source_params = [](std::string store, int64_t records, int64_t bytes) {
    OperatorParams p;
    p.store_id = std::move(store);
    p.records_per_file = records;
    p.bytes_per_record = bytes;
    return p;
  };
  auto map_params = [](double cost_us, double ratio, bool random = false,
                       int64_t udf = 1, int64_t io_ratio = 1) {
    OperatorParams p;
    p.cpu_cost_per_element_us = cost_us;
    p.byte_ratio = ratio;
    p.is_random = random;
    p.udf_internal_parallelism = udf;
    p.input_output_ratio = io_ratio;
    return p;
  };
  auto count_params = [](int64_t count) {
    OperatorParams p;
    p.count = count;
    return p;
  };
  auto buffer_params = [](int64_t buffer) {
    OperatorParams p;
    p.buffer_size = buffer;
    return p;
  };
  auto batch_params = [](int64_t batch) {
    OperatorParams p;
    p.batch_size = batch;
    return p;
  };

  if (name == "resnet_shape") {
    // 1024 x 144 MiB record files, ~1200 images of 110 KiB each; decode
    // amplifies bytes 6x. Batch 128 puts the I/O load at 14.42 MB/minibatch.
    const int64_t files = overrides.files.value_or(1024);
    const int64_t records = overrides.records_per_file.value_or(1200);
    preset.store_id = "imagenet_synth";
    auto store = std::make_shared<FileStore>(
        FileStore::create(files, SizeDistribution::constant(144.0 * 1024 * 1024), seed));
    preset.stores[preset.store_id] = store;
    preset.spec.root_id = "repeat";
    preset.spec.nodes = {
        make_node("repeat", OperatorKind::kRepeat, {"batch"},
                  count_params(kRepeatInfinite)),
        make_node("batch", OperatorKind::kBatch, {"transpose"}, batch_params(128)),
        make_node("transpose", OperatorKind::kMap, {"crop"},
                  map_params(60.0, 1.0), 1),
        make_node("crop", OperatorKind::kMap, {"decode"},
                  map_params(30.0, 1.0, /*random=*/true), 1),
        make_node("decode", OperatorKind::kMap, {"shuffle"},
                  map_params(390.0, 6.0), 1),
        make_node("shuffle", OperatorKind::kShuffle, {"interleave"},
                  buffer_params(1024)),
        make_node("interleave", OperatorKind::kInterleave, {"records"},
                  count_params(4), 1),
        make_node("records", OperatorKind::kSource, {},
                  source_params(preset.store_id, records, 112640), 1),
    };
    return preset;
  }

  if (name == "rcnn_shape") {
    // COCO-sized store; the heavy augmentation UDF is random (cache only at
    // the source side) and internally parallel: one nominal worker occupies
    // about three cores.
    const int64_t files = overrides.files.value_or(256);
    const int64_t records = overrides.records_per_file.value_or(460);
    preset.store_id = "coco_synth";
    auto store = std::make_shared<FileStore>(
        FileStore::create(files, SizeDistribution::constant(80.0 * 1024 * 1024), seed));
    preset.stores[preset.store_id] = store;
    preset.spec.root_id = "repeat";
    preset.spec.nodes = {
        make_node("repeat", OperatorKind::kRepeat, {"batch"},
                  count_params(kRepeatInfinite)),
        make_node("batch", OperatorKind::kBatch, {"resize"}, batch_params(4)),
        make_node("resize", OperatorKind::kMap, {"augment"},
                  map_params(500.0, 1.0), 1),
        make_node("augment", OperatorKind::kMap, {"interleave"},
                  map_params(12000.0, 4.0, /*random=*/true, /*udf=*/3), 1),
        make_node("interleave", OperatorKind::kInterleave, {"records"},
                  count_params(2), 1),
        make_node("records", OperatorKind::kSource, {},
                  source_params(preset.store_id, records, 180224), 1),
    };
    return preset;
  }

  if (name == "ssd_shape") {
    // Same store as rcnn_shape but a fast CPU path, so it is the most
    // I/O-bound of the vision shapes. The filter drops under 1% of elements.
    const int64_t files = overrides.files.value_or(256);
    const int64_t records = overrides.records_per_file.value_or(460);
    preset.store_id = "coco_synth";
    auto store = std::make_shared<FileStore>(
        FileStore::create(files, SizeDistribution::constant(80.0 * 1024 * 1024), seed));
    preset.stores[preset.store_id] = store;
    preset.spec.root_id = "repeat";
    preset.spec.nodes = {
        make_node("repeat", OperatorKind::kRepeat, {"batch"},
                  count_params(kRepeatInfinite)),
        make_node("batch", OperatorKind::kBatch, {"crop"}, batch_params(4)),
        make_node("crop", OperatorKind::kMap, {"filter"},
                  map_params(150.0, 1.0, /*random=*/true), 1),
        make_node("filter", OperatorKind::kFilter, {"decode"},
                  [] {
                    OperatorParams p;
                    p.keep_probability = 0.99;
                    p.cpu_cost_per_element_us = 20.0;
                    return p;
                  }()),
        make_node("decode", OperatorKind::kMap, {"interleave"},
                  map_params(450.0, 3.0), 1),
        make_node("interleave", OperatorKind::kInterleave, {"records"},
                  count_params(2), 1),
        make_node("records", OperatorKind::kSource, {},
                  source_params(preset.store_id, records, 180224), 1),
    };
    return preset;
  }

  if (name == "text_shape") {
    // Tiny elements (a few microseconds of work each) to stress per-element
    // tracing overhead, as text pipelines do.
    const int64_t files = overrides.files.value_or(2);
    const int64_t records = overrides.records_per_file.value_or(200000);
    preset.store_id = "wmt_synth";
    auto store = std::make_shared<FileStore>(
        FileStore::create(files, SizeDistribution::constant(1024.0 * 1024 * 1024), seed));
    preset.stores[preset.store_id] = store;
    preset.spec.root_id = "repeat";
    preset.spec.nodes = {
        make_node("repeat", OperatorKind::kRepeat, {"batch"},
                  count_params(kRepeatInfinite)),
        make_node("batch", OperatorKind::kBatch, {"shuffle"}, batch_params(256)),
        make_node("shuffle", OperatorKind::kShuffle, {"filter"},
                  buffer_params(512)),
        make_node("filter", OperatorKind::kFilter, {"tokenize"},
                  [] {
                    OperatorParams p;
                    p.keep_probability = 0.995;
                    p.cpu_cost_per_element_us = 1.0;
                    return p;
                  }()),
        make_node("tokenize", OperatorKind::kMap, {"interleave"},
                  map_params(4.0, 2.0), 1),
        make_node("interleave", OperatorKind::kInterleave, {"records"},
                  count_params(2), 1),
        make_node("records", OperatorKind::kSource, {},
                  source_params(preset.store_id, records, 300)),
    };
    return preset;
  }

  if (name.rfind("linear_chain(", 0) == 0 && name.back() == ')') {
    const int64_t n = std::stoll(name.substr(13, name.size() - 14));
    if (n < 1) throw BenchError("linear_chain needs >= 1 op");
    const int64_t files = overrides.files.value_or(8);
    const int64_t records = overrides.records_per_file.value_or(1000);
    preset.store_id = "chain_synth";
    auto store = std::make_shared<FileStore>(
        FileStore::create(files, SizeDistribution::constant(4.0 * 1024 * 1024), seed));
    preset.stores[preset.store_id] = store;
    preset.spec.nodes.push_back(make_node(
        "records", OperatorKind::kSource, {}, source_params(preset.store_id, records, 4096)));
    std::string below = "records";
    for (int64_t i = 1; i < n; ++i) {
      const std::string map_name = "stage" + std::to_string(i);
      preset.spec.nodes.insert(
          preset.spec.nodes.begin(),
          make_node(map_name, OperatorKind::kMap, {below}, map_params(800.0, 1.0), 1));
      below = map_name;
    }
    preset.spec.root_id = below;
    return preset;
  }

  throw BenchError("unknown preset: " + name);
}

inline std::vector<std::string> preset_names() {
  return {"resnet_shape", "rcnn_shape", "ssd_shape", "text_shape", "linear_chain(n)"};
}

// ---------------------------------------------------------------------------
// Tuning loops.

struct TuneStep {
  int64_t step = 0;
  std::string chosen_node;  // knob incremented before this measurement
  double measured = 0.0;    // minibatches/sec over the post-warmup window
  double predicted = 0.0;   // capacity of the configuration as traced
  double lp_optimum = 0.0;  // LP optimum at the full core budget
};

struct TuneHistory {
  std::vector<TuneStep> steps;
  std::string diagnostic;
  PipelineSpec final_spec;
};

struct TuneOptions {
  double window_seconds = 5.0;  // desk-scale tracing window per step
  double warmup_fraction = 0.3;
  uint64_t seed = 42;
};

namespace detail {

struct WindowMeasurement {
  TraceSnapshot warm;
  TraceSnapshot end;
  double measured = 0.0;
};

// Runs the spec for one window and snapshots at the warmup boundary and the
// end, so rates and the measured throughput cover the same interval.
inline WindowMeasurement measure_window(const PipelineSpec& spec,
                                        const StoreRegistry& stores,
                                        const TuneOptions& options) {
  for (const auto& [id, store] : stores) store->drain_buckets();
  auto tracer = Tracer::create(spec);
  InstantiateOptions inst;
  inst.seed = options.seed;
  auto tree = IteratorTree::instantiate(spec, stores, tracer, inst);
  const int64_t t0 = steady_now_ns();
  const int64_t warm_at =
      t0 + int64_t(options.window_seconds * options.warmup_fraction * 1e9);
  const int64_t end_at = t0 + int64_t(options.window_seconds * 1e9);

  WindowMeasurement out;
  bool warm_taken = false;
  bool eos = false;
  while (true) {
    const int64_t now = steady_now_ns();
    if (!warm_taken && now >= warm_at) {
      tracer->flush_this_thread();
      out.warm = tracer->snapshot(/*allow_empty=*/true);
      warm_taken = true;
    }
    if (now >= end_at || eos) break;
    if (!tree->next().has_value()) eos = true;
  }
  tracer->flush_this_thread();
  if (!warm_taken) out.warm = tracer->snapshot(/*allow_empty=*/true);
  out.end = tracer->snapshot(/*allow_empty=*/true);
  tree->close();

  const double window = out.end.wall_seconds - out.warm.wall_seconds;
  const int64_t completed = out.end.at(spec.root_id).completions -
                            out.warm.at(spec.root_id).completions;
  out.measured = window > 0.0 ? double(completed) / window : 0.0;
  return out;
}

// LP optimum at the full budget from a traced model (no cache pass).
inline double lp_optimum_rate(const RateModel& model, const ResourceBudget& budget) {
  std::map<std::string, double> rates;
  std::set<std::string> sequential;
  for (const auto& [name, op] : model.ops) {
    if (!op.rate.is_finite() || op.steady_state_zero) continue;
    rates[name] = op.rate.value;
    if (!op.tunable) sequential.insert(name);
  }
  const double x_disk = disk_bound(model.io_bytes_per_minibatch, budget.disk).x_disk;
  if (rates.empty()) return x_disk;
  return std::min(solve_cpu_lp(rates, sequential, budget.cores).x_star, x_disk);
}

// All parallelism knobs to one, root prefetch present: the naive start.
inline PipelineSpec naive_configuration(const PipelineSpec& spec) {
  PipelineSpec out = spec;
  for (auto& n : out.nodes)
    if (n.tunable_parallelism.has_value()) n.tunable_parallelism = 1;
  if (out.find(out.root_id)->kind != OperatorKind::kPrefetch)
    out = insert_after(out, out.root_id, OperatorKind::kPrefetch, 2);
  return out;
}

inline std::map<std::string, int64_t> current_knobs(const PipelineSpec& spec) {
  std::map<std::string, int64_t> knobs;
  for (const auto& n : spec.nodes)
    if (n.tunable_parallelism.has_value()) knobs[n.name] = *n.tunable_parallelism;
  return knobs;
}

}  // namespace detail

// Iteratively removes bottlenecks: each step traces a short window, ranks
// operators by parallelism-scaled rate, and gives the slowest tunable one
// more worker. Starts from the naive configuration with prefetching. Row k
// records the knob incremented just before its measurement (row 0 is the
// baseline).
inline TuneHistory iterative_tune(const PipelineSpec& input,
                                  const StoreRegistry& stores,
                                  const ResourceBudget& budget, int64_t steps,
                                  const TuneOptions& options = {}) {
  TuneHistory history;
  PipelineSpec spec = detail::naive_configuration(input);
  if (detail::current_knobs(spec).empty()) {
    history.diagnostic = "no tunable ops";
    history.final_spec = spec;
    return history;
  }

  std::string pending_choice;
  for (int64_t step = 0; step <= steps; ++step) {
    if (step > 0)
      spec = set_parallelism(spec, pending_choice,
                             detail::current_knobs(spec).at(pending_choice) + 1);

    auto window = detail::measure_window(spec, stores, options);
    const RateModel model = build_rate_model(window.end, stores, &window.warm);
    TuneStep record;
    record.step = step;
    record.chosen_node = step > 0 ? pending_choice : "";
    record.measured = window.measured;
    record.predicted = predict_current_config(model, budget.disk);
    record.lp_optimum = detail::lp_optimum_rate(model, budget);
    history.steps.push_back(record);

    if (step == steps) break;
    const auto ranking = bottleneck_ranking(model, detail::current_knobs(spec));
    pending_choice.clear();
    for (const auto& name : ranking.ranked) {
      if (model.at(name).tunable) {
        pending_choice = name;
        break;
      }
    }
    if (pending_choice.empty()) {
      history.diagnostic = "no rankable tunable ops";
      break;
    }
  }

  history.final_spec = spec;
  return history;
}

// Uninformed baseline: each step parallelizes a uniformly random tunable op.
inline TuneHistory random_walk(const PipelineSpec& input, const StoreRegistry& stores,
                               const ResourceBudget& budget, int64_t steps,
                               uint64_t seed, const TuneOptions& options = {}) {
  TuneHistory history;
  PipelineSpec spec = detail::naive_configuration(input);
  const auto initial_knobs = detail::current_knobs(spec);
  if (initial_knobs.empty()) {
    history.diagnostic = "no tunable ops";
    history.final_spec = spec;
    return history;
  }
  std::vector<std::string> knob_names;
  for (const auto& [name, k] : initial_knobs) knob_names.push_back(name);
  std::mt19937_64 rng(seed);

  for (int64_t step = 0; step <= steps; ++step) {
    std::string chosen;
    if (step > 0) {
      chosen = knob_names[rng() % knob_names.size()];
      spec = set_parallelism(spec, chosen,
                             detail::current_knobs(spec).at(chosen) + 1);
    }
    auto window = detail::measure_window(spec, stores, options);
    const RateModel model = build_rate_model(window.end, stores, &window.warm);
    TuneStep record;
    record.step = step;
    record.chosen_node = chosen;
    record.measured = window.measured;
    record.predicted = predict_current_config(model, budget.disk);
    record.lp_optimum = detail::lp_optimum_rate(model, budget);
    history.steps.push_back(record);
  }
  history.final_spec = spec;
  return history;
}

// First step index whose measured rate reaches `target`; steps+1 if never.
inline int64_t steps_to_rate(const TuneHistory& history, double target) {
  for (const auto& s : history.steps)
    if (s.measured >= target) return s.step;
  return int64_t(history.steps.size());
}

// ---------------------------------------------------------------------------
// Disk sweep: per bandwidth level, plan against that budget (memory kept at
// zero so caching never masks the disk), apply, and measure.

struct DiskSweepPoint {
  double bandwidth_bytes_per_sec = 0.0;
  double predicted = 0.0;
  double measured = 0.0;
  std::string binding;
};

struct DiskSweepOptions {
  double calibration_seconds = 6.0;
  double measure_seconds = 14.0;
  double warmup_fraction = 0.35;
  uint64_t seed = 42;
};

inline std::vector<DiskSweepPoint> disk_sweep(const PipelineSpec& input,
                                              const StoreRegistry& stores,
                                              double cores,
                                              const std::vector<double>& levels,
                                              const DiskSweepOptions& options = {}) {
  // One calibration trace at unlimited bandwidth: CPU rates and the I/O cost
  // per minibatch do not depend on the bucket setting.
  for (const auto& [id, store] : stores) store->set_bandwidth_limit(std::nullopt);
  PipelineSpec naive = detail::naive_configuration(input);
  TuneOptions calib;
  calib.window_seconds = options.calibration_seconds;
  calib.warmup_fraction = 0.3;
  calib.seed = options.seed;
  auto window = detail::measure_window(naive, stores, calib);

  std::vector<DiskSweepPoint> points;
  for (double level : levels) {
    ResourceBudget budget = ResourceBudget::make(cores, 0, level);
    TuningPlan level_plan = plan(window.end, budget, stores, &window.warm);
    PipelineSpec tuned = apply_plan(naive, level_plan);

    for (const auto& [id, store] : stores) {
      store->set_bandwidth_limit(level);
      store->drain_buckets();
    }
    InstantiateOptions inst;
    inst.seed = options.seed;
    auto tree = IteratorTree::instantiate(tuned, stores, nullptr, inst);
    RunConfig run;
    run.seconds = options.measure_seconds;
    run.warmup_fraction = options.warmup_fraction;
    auto report = tree->run_benchmark(run);
    tree->close();

    DiskSweepPoint point;
    point.bandwidth_bytes_per_sec = level;
    point.predicted = level_plan.predicted_x;
    point.measured = report.minibatches_per_sec;
    point.binding = to_string(level_plan.binding);
    points.push_back(point);
  }
  for (const auto& [id, store] : stores) store->set_bandwidth_limit(std::nullopt);
  return points;
}

// ---------------------------------------------------------------------------
// Results files: one CSV row per step plus a JSON summary, deterministic
// field order (measured columns change run to run; structure does not).

struct BenchReport {
  std::string csv;
  nlohmann::json summary;
};

inline BenchReport report(const std::map<std::string, TuneHistory>& histories) {
  std::ostringstream csv;
  csv << "variant,step,node,measured,predicted,lp_optimum\n";
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& [variant, history] : histories) {
    for (const auto& s : history.steps) {
      csv << variant << "," << s.step << "," << s.chosen_node << ","
          << s.measured << "," << s.predicted << "," << s.lp_optimum << "\n";
    }
    nlohmann::json entry;
    entry["steps"] = history.steps.size();
    entry["diagnostic"] = history.diagnostic;
    if (!history.steps.empty()) {
      entry["final_measured"] = history.steps.back().measured;
      entry["final_predicted"] = history.steps.back().predicted;
      entry["final_lp_optimum"] = history.steps.back().lp_optimum;
    }
    summary[variant] = std::move(entry);
  }
  return {csv.str(), std::move(summary)};
}

inline void write_report(const BenchReport& rep, const std::string& csv_path,
                         const std::string& summary_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw BenchError("cannot write " + csv_path);
  csv << rep.csv;
  std::ofstream summary(summary_path);
  if (!summary) throw BenchError("cannot write " + summary_path);
  summary << rep.summary.dump(2) << "\n";
}

}  // namespace pipetune
