// pipetune — synthetic data-pipeline runtime with per-operator tracing, an
// operational-analysis rate model, and an automatic bottleneck optimizer.
//
// Exit codes: 0 success, 1 usage error, 2 validation error (bad spec, missing
// or malformed input file), 3 runtime error. Diagnostics go to stderr, data
// to stdout or files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pipetune/bench.hpp"
#include "pipetune/end_to_end.hpp"
#include "pipetune/engine.hpp"
#include "pipetune/optimizer.hpp"
#include "pipetune/rewriter.hpp"
#include "pipetune/tracer.hpp"

namespace {

using namespace pipetune;

struct ValidationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationFailure("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationFailure("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << text;
}

PipelineSpec load_spec(const std::string& path) {
  PipelineSpec spec;
  try {
    spec = spec_from_json(read_json_file(path));
  } catch (const ValidationFailure&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationFailure("bad pipeline spec " + path + ": " + e.what());
  }
  auto validation = validate_spec(spec);
  if (!validation.ok()) {
    std::ostringstream msg;
    msg << "invalid pipeline spec " << path << ":";
    for (const auto& v : validation.violations) msg << "\n  - " << v;
    throw ValidationFailure(msg.str());
  }
  return spec;
}

// Binds one store description to every source in the spec.
StoreRegistry load_stores(const PipelineSpec& spec, const std::string& store_path,
                          std::optional<double> bandwidth_mbps) {
  std::shared_ptr<FileStore> store;
  try {
    store = store_from_json(read_json_file(store_path));
  } catch (const ValidationFailure&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationFailure("bad store file " + store_path + ": " + e.what());
  }
  if (bandwidth_mbps.has_value())
    store->set_bandwidth_limit(*bandwidth_mbps > 0.0
                                   ? std::optional<double>(*bandwidth_mbps * 1e6)
                                   : std::nullopt);
  StoreRegistry stores;
  for (const auto& n : spec.nodes)
    if (n.kind == OperatorKind::kSource) stores[n.params.store_id] = store;
  if (stores.empty()) throw ValidationFailure("pipeline has no source operator");
  return stores;
}

ResourceBudget make_budget(double cores, double memory_gb,
                           std::optional<double> bandwidth_mbps,
                           const std::string& curve_path) {
  ResourceBudget budget;
  budget.cores = cores;
  budget.memory_bytes = int64_t(memory_gb * 1e9);
  if (!curve_path.empty())
    budget.disk = curve_from_json(read_json_file(curve_path));
  else if (bandwidth_mbps.has_value() && *bandwidth_mbps > 0.0)
    budget.disk = BandwidthCurve::flat(*bandwidth_mbps * 1e6);
  return budget;
}

void print_model_table(const RateModel& model, std::ostream& out) {
  out << "operator            V          R/core     bytes/elem   cardinality   materialized   cacheable\n";
  for (const OperatorNode* node : chain_from_root(model.spec)) {
    const auto& op = model.at(node->name);
    char line[256];
    auto card = [](const Cardinality& c) {
      if (c.is_unbounded()) return std::string("UNBOUNDED");
      if (!c.is_finite()) return std::string("UNKNOWN");
      char buf[32];
      snprintf(buf, sizeof(buf), "%.4g", c.value);
      return std::string(buf);
    };
    snprintf(line, sizeof(line), "%-18s  %-9s  %-9s  %-11s  %-12s  %-13s  %s",
             node->name.c_str(),
             op.visit_ratio ? std::to_string(*op.visit_ratio).substr(0, 8).c_str()
                            : "UNKNOWN",
             op.rate.is_finite() ? std::to_string(op.rate.value).substr(0, 8).c_str()
             : op.rate.is_infinite() ? "INF"
                                     : "UNKNOWN",
             op.bytes_per_element
                 ? std::to_string(int64_t(*op.bytes_per_element)).c_str()
                 : "UNKNOWN",
             card(op.cardinality).c_str(), card(op.materialized_bytes).c_str(),
             op.cacheable ? "yes" : "no");
    out << line << "\n";
  }
  out << "throughput " << model.x0 << " minibatches/s, io "
      << model.io_bytes_per_minibatch << " bytes/minibatch\n";
}

// Simple key=value config file; flags given on the command line win.
std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationFailure("cannot open config file: " + path);
  std::map<std::string, std::string> config;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) config[key] = value;
  }
  return config;
}

// Expands --config into argv entries placed right after the subcommand name;
// every option takes the last occurrence, so explicit flags override the
// config which overrides defaults.
std::vector<std::string> inject_config(const std::vector<std::string>& args,
                                       const std::vector<std::string>& subcommands) {
  std::string config_path;
  for (size_t i = 0; i + 1 < args.size(); ++i)
    if (args[i] == "--config") config_path = args[i + 1];
  for (const auto& a : args)
    if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
  if (config_path.empty()) return args;

  const auto config = load_config_file(config_path);
  std::vector<std::string> out;
  bool injected = false;
  for (const auto& a : args) {
    out.push_back(a);
    if (!injected &&
        std::find(subcommands.begin(), subcommands.end(), a) != subcommands.end()) {
      for (const auto& [k, v] : config) {
        out.push_back("--" + k);
        out.push_back(v);
      }
      injected = true;
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pipetune: trace, analyze, and auto-tune synthetic data pipelines"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  int exit_code = 0;
  std::function<void()> action;

  // Shared option storage.
  std::string spec_path, store_path, out_path, store_out, snap_path, plan_path;
  std::string rewrite_out, curve_path, out_dir, preset_name, config_path;
  double seconds = 10.0, warmup = 0.2, cores = 2.0, memory_gb = 0.0;
  double threshold = 0.05, min_seconds = 2.0, max_seconds = 30.0;
  double window_seconds = 5.0;
  std::optional<double> bandwidth_mbps;
  int64_t count = 0, steps = 10, files = 0, records = 0;
  uint64_t seed = 42;
  bool until_stable = false;
  std::vector<std::string> set_args, prefetch_after;
  std::vector<double> levels_mbps;
  std::string cache_after;

  auto add_store_opts = [&](CLI::App* cmd) {
    cmd->add_option("--store", store_path, "store description JSON")
        ->required()
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd->add_option("--bandwidth-mbps", bandwidth_mbps,
                    "token-bucket limit, MB/s (0 = unlimited)")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  };
  auto add_budget_opts = [&](CLI::App* cmd) {
    cmd->add_option("--cores", cores, "core budget for the optimizer")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd->add_option("--memory-gb", memory_gb, "memory budget for caching, GB")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd->add_option("--bandwidth-curve", curve_path,
                    "bandwidth curve JSON (overrides --bandwidth-mbps)")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  };
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "run seed")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  };
  app.add_option("--config", config_path, "key=value config file (flags win)");

  // gen ----------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "emit a preset pipeline spec and store");
  gen->add_option("--preset", preset_name, "resnet_shape|rcnn_shape|ssd_shape|text_shape|linear_chain(n)")
      ->required();
  gen->add_option("-o,--out", out_path, "pipeline spec output path")
      ->default_val("pipeline.json");
  gen->add_option("--store-out", store_out, "store output path")
      ->default_val("store.json");
  gen->add_option("--files", files, "override file count");
  gen->add_option("--records-per-file", records, "override records per file");
  add_seed(gen);
  gen->callback([&] {
    action = [&] {
      PresetOverrides overrides;
      if (files > 0) overrides.files = files;
      if (records > 0) overrides.records_per_file = records;
      overrides.seed = seed;
      Preset preset;
      try {
        preset = make_preset(preset_name, overrides);
      } catch (const BenchError& e) {
        throw ValidationFailure(e.what());
      }
      write_text_file(out_path, spec_to_json(preset.spec).dump(2) + "\n");
      write_text_file(store_out,
                      store_to_json(*preset.stores.at(preset.store_id)).dump(2) + "\n");
      std::cerr << "wrote " << out_path << " and " << store_out << "\n";
    };
  });

  // validate -------------------------------------------------------------
  auto* validate = app.add_subcommand("validate", "check a pipeline spec");
  validate->add_option("spec", spec_path, "pipeline spec JSON")->required();
  validate->callback([&] {
    action = [&] {
      (void)load_spec(spec_path);
      std::cout << "OK\n";
    };
  });

  // run -------------------------------------------------------------------
  auto* run = app.add_subcommand("run", "run a pipeline and report its rate");
  run->add_option("spec", spec_path)->required();
  add_store_opts(run);
  run->add_option("--seconds", seconds)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  run->add_option("--count", count, "element budget (0 = none)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  run->add_option("--warmup", warmup, "warmup fraction")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  add_seed(run);
  run->callback([&] {
    action = [&] {
      auto spec = load_spec(spec_path);
      auto stores = load_stores(spec, store_path, bandwidth_mbps);
      InstantiateOptions inst;
      inst.seed = seed;
      auto tree = IteratorTree::instantiate(spec, stores, nullptr, inst);
      RunConfig config;
      config.seconds = seconds;
      config.max_elements = count;
      config.warmup_fraction = warmup;
      auto report = tree->run_benchmark(config);
      tree->close();
      nlohmann::json j{{"minibatches_per_sec", report.minibatches_per_sec},
                       {"elements_consumed", report.elements_consumed},
                       {"wall_seconds", report.wall_seconds}};
      std::cout << j.dump(2) << "\n";
    };
  });

  // trace -----------------------------------------------------------------
  auto* trace = app.add_subcommand("trace", "run with tracing and dump a snapshot");
  trace->add_option("spec", spec_path)->required();
  add_store_opts(trace);
  trace->add_option("--seconds", seconds)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  trace->add_flag("--until-stable", until_stable,
                  "stop when successive throughput estimates converge");
  trace->add_option("--threshold", threshold)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  trace->add_option("--min-seconds", min_seconds)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  trace->add_option("-o,--out", out_path, "snapshot output (default stdout)");
  add_seed(trace);
  trace->callback([&] {
    action = [&] {
      auto spec = load_spec(spec_path);
      auto stores = load_stores(spec, store_path, bandwidth_mbps);
      auto tracer = Tracer::create(spec);
      InstantiateOptions inst;
      inst.seed = seed;
      auto tree = IteratorTree::instantiate(spec, stores, tracer, inst);
      TraceSnapshot snap;
      if (until_stable) {
        auto result = trace_until_stable(*tree, threshold, min_seconds, seconds);
        snap = result.snapshot;
        std::cerr << (result.stable ? "stable" : "not stable (timeout)") << "\n";
      } else {
        RunConfig config;
        config.seconds = seconds;
        tree->run_benchmark(config);
        snap = tracer->snapshot(/*allow_empty=*/true);
      }
      tree->close();
      const std::string text = snapshot_to_json(snap).dump(2) + "\n";
      if (out_path.empty())
        std::cout << text;
      else
        write_text_file(out_path, text);
    };
  });

  // analyze -----------------------------------------------------------------
  auto* analyze = app.add_subcommand("analyze", "rate model from a snapshot");
  analyze->add_option("snapshot", snap_path)->required();
  analyze->add_option("--store", store_path, "store JSON for materialization");
  analyze->callback([&] {
    action = [&] {
      TraceSnapshot snap;
      try {
        snap = snapshot_from_json(read_json_file(snap_path));
      } catch (const TracerError& e) {
        throw ValidationFailure(std::string(e.what()) + " (" + snap_path + ")");
      }
      StoreRegistry stores;
      if (!store_path.empty())
        stores = load_stores(snap.spec, store_path, std::nullopt);
      auto model = build_rate_model(snap, stores);
      std::cout << rate_model_to_json(model).dump(2) << "\n";
      print_model_table(model, std::cerr);
    };
  });

  // optimize ----------------------------------------------------------------
  auto* optimize = app.add_subcommand("optimize", "plan from a snapshot and budget");
  optimize->add_option("snapshot", snap_path)->required();
  optimize->add_option("--store", store_path, "store JSON for materialization");
  optimize->add_option("--bandwidth-mbps", bandwidth_mbps)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  add_budget_opts(optimize);
  optimize->add_option("-o,--out", out_path, "plan output (default stdout)");
  optimize->add_option("--rewrite-out", rewrite_out, "write the rewritten spec here");
  optimize->callback([&] {
    action = [&] {
      TraceSnapshot snap;
      try {
        snap = snapshot_from_json(read_json_file(snap_path));
      } catch (const TracerError& e) {
        throw ValidationFailure(std::string(e.what()) + " (" + snap_path + ")");
      }
      StoreRegistry stores;
      if (!store_path.empty())
        stores = load_stores(snap.spec, store_path, std::nullopt);
      auto budget = make_budget(cores, memory_gb, bandwidth_mbps, curve_path);
      auto tuning = plan(snap, budget, stores);
      const std::string text = plan_to_json(tuning).dump(2) + "\n";
      if (out_path.empty())
        std::cout << text;
      else
        write_text_file(out_path, text);
      if (!rewrite_out.empty()) {
        auto rewritten = apply_plan(snap.spec, tuning);
        write_text_file(rewrite_out, spec_to_json(rewritten).dump(2) + "\n");
        std::cerr << "wrote " << rewrite_out << "\n";
      }
    };
  });

  // rewrite -------------------------------------------------------------
  auto* rewrite = app.add_subcommand("rewrite", "apply graph edits to a spec");
  rewrite->add_option("spec", spec_path)->required();
  rewrite->add_option("--set", set_args, "name=parallelism (repeatable)");
  rewrite->add_option("--cache-after", cache_after, "insert a cache after this node");
  rewrite->add_option("--prefetch-after", prefetch_after,
                      "name:buffer, insert a prefetch (repeatable)");
  rewrite->add_option("--plan", plan_path, "apply a tuning plan JSON");
  rewrite->add_option("-o,--out", out_path, "output spec (default stdout)");
  rewrite->callback([&] {
    action = [&] {
      auto spec = load_spec(spec_path);
      try {
        if (!plan_path.empty())
          spec = apply_plan(spec, plan_from_json(read_json_file(plan_path)));
        for (const auto& s : set_args) {
          const auto eq = s.find('=');
          if (eq == std::string::npos)
            throw ValidationFailure("--set expects name=k, got: " + s);
          spec = set_parallelism(spec, s.substr(0, eq),
                                 std::stoll(s.substr(eq + 1)));
        }
        if (!cache_after.empty())
          spec = insert_after(spec, cache_after, OperatorKind::kCache);
        for (const auto& s : prefetch_after) {
          const auto colon = s.find(':');
          if (colon == std::string::npos)
            throw ValidationFailure("--prefetch-after expects name:buffer, got: " + s);
          spec = insert_after(spec, s.substr(0, colon), OperatorKind::kPrefetch,
                              std::stoll(s.substr(colon + 1)));
        }
      } catch (const RewriteError& e) {
        throw ValidationFailure(e.what());
      }
      const std::string text = spec_to_json(spec).dump(2) + "\n";
      if (out_path.empty())
        std::cout << text;
      else
        write_text_file(out_path, text);
    };
  });

  // bench -----------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "microbenchmark suites");
  bench->require_subcommand(1);
  auto add_bench_common = [&](CLI::App* cmd) {
    cmd->add_option("--preset", preset_name)->required();
    cmd->add_option("--out", out_dir, "output directory")->default_val("bench_out");
    cmd->add_option("--files", files, "override preset file count");
    cmd->add_option("--records-per-file", records, "override records per file");
    cmd->add_option("--window-seconds", window_seconds, "tracing window per step")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    add_budget_opts(cmd);
    cmd->add_option("--bandwidth-mbps", bandwidth_mbps)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd->add_option("--steps", steps)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    add_seed(cmd);
  };
  auto make_bench_preset = [&]() {
    PresetOverrides overrides;
    if (files > 0) overrides.files = files;
    if (records > 0) overrides.records_per_file = records;
    try {
      return make_preset(preset_name, overrides);
    } catch (const BenchError& e) {
      throw ValidationFailure(e.what());
    }
  };
  auto bench_budget = [&]() {
    return make_budget(cores, memory_gb, bandwidth_mbps, curve_path);
  };
  auto ensure_out_dir = [&]() {
    std::filesystem::create_directories(out_dir);
  };

  auto* bench_tune = bench->add_subcommand("tune", "iterative bottleneck tuning");
  add_bench_common(bench_tune);
  bench_tune->callback([&] {
    action = [&] {
      auto preset = make_bench_preset();
      if (bandwidth_mbps.has_value() && *bandwidth_mbps > 0.0)
        preset.stores.at(preset.store_id)->set_bandwidth_limit(*bandwidth_mbps * 1e6);
      TuneOptions options;
      options.window_seconds = window_seconds;
      options.seed = seed;
      auto history =
          iterative_tune(preset.spec, preset.stores, bench_budget(), steps, options);
      ensure_out_dir();
      auto rep = report({{"iterative", history}});
      write_report(rep, out_dir + "/history.csv", out_dir + "/summary.json");
      std::cout << rep.summary.dump(2) << "\n";
    };
  });

  auto* bench_walk = bench->add_subcommand("walk", "random-walk tuning baseline");
  add_bench_common(bench_walk);
  bench_walk->callback([&] {
    action = [&] {
      auto preset = make_bench_preset();
      if (bandwidth_mbps.has_value() && *bandwidth_mbps > 0.0)
        preset.stores.at(preset.store_id)->set_bandwidth_limit(*bandwidth_mbps * 1e6);
      TuneOptions options;
      options.window_seconds = window_seconds;
      options.seed = seed;
      auto history = random_walk(preset.spec, preset.stores, bench_budget(), steps,
                                 seed, options);
      ensure_out_dir();
      auto rep = report({{"random_walk", history}});
      write_report(rep, out_dir + "/history.csv", out_dir + "/summary.json");
      std::cout << rep.summary.dump(2) << "\n";
    };
  });

  auto* bench_disk = bench->add_subcommand("disk", "disk-bound prediction sweep");
  add_bench_common(bench_disk);
  bench_disk->add_option("--levels-mbps", levels_mbps, "bandwidth levels, MB/s")
      ->delimiter(',');
  bench_disk->callback([&] {
    action = [&] {
      auto preset = make_bench_preset();
      std::vector<double> levels;
      for (double mbps : levels_mbps) levels.push_back(mbps * 1e6);
      if (levels.empty()) levels = {50e6, 100e6, 200e6, 300e6};
      DiskSweepOptions options;
      options.seed = seed;
      auto points = disk_sweep(preset.spec, preset.stores, cores, levels, options);
      ensure_out_dir();
      std::ostringstream csv;
      csv << "bandwidth_mbps,predicted,measured,binding\n";
      for (const auto& p : points)
        csv << p.bandwidth_bytes_per_sec / 1e6 << "," << p.predicted << ","
            << p.measured << "," << p.binding << "\n";
      write_text_file(out_dir + "/disk_sweep.csv", csv.str());
      std::cout << csv.str();
    };
  });

  auto* bench_cache = bench->add_subcommand("cache", "cache-size estimate accuracy");
  add_bench_common(bench_cache);
  bench_cache->callback([&] {
    action = [&] {
      auto preset = make_bench_preset();
      const auto& store = preset.stores.at(preset.store_id);
      const double source_exact = double(store->total_bytes());
      ensure_out_dir();
      std::ostringstream csv;
      csv << "trace_seconds,source_exact,source_estimate,decoded_estimate\n";
      for (double trace_seconds : {2.0, 4.0, 8.0, double(window_seconds)}) {
        TuneOptions options;
        options.window_seconds = trace_seconds;
        options.warmup_fraction = 0.0;
        options.seed = seed;
        auto naive = detail::naive_configuration(preset.spec);
        auto window = detail::measure_window(naive, preset.stores, options);
        auto model = build_rate_model(window.end, preset.stores);
        double source_estimate = 0.0, decoded_estimate = 0.0;
        for (const auto& [name, op] : model.ops) {
          const auto* node = model.spec.find(name);
          if (node->kind == OperatorKind::kSource &&
              op.materialized_bytes.is_finite())
            source_estimate = op.materialized_bytes.value;
          if (node->kind == OperatorKind::kMap && node->params.byte_ratio > 1.0 &&
              op.materialized_bytes.is_finite())
            decoded_estimate = op.materialized_bytes.value;
        }
        csv << trace_seconds << "," << source_exact << "," << source_estimate
            << "," << decoded_estimate << "\n";
      }
      write_text_file(out_dir + "/cache_estimates.csv", csv.str());
      std::cout << csv.str();
    };
  });

  // end-to-end ----------------------------------------------------------
  auto* e2e = app.add_subcommand("end-to-end",
                                 "trace, optimize, rewrite, and re-measure");
  e2e->add_option("spec", spec_path)->required();
  add_store_opts(e2e);
  add_budget_opts(e2e);
  e2e->add_option("--seconds", seconds, "measurement window per side")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  e2e->add_option("--warmup", warmup)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  e2e->add_option("--plan-out", plan_path, "write the final plan here");
  e2e->add_option("--rewrite-out", rewrite_out, "write the optimized spec here");
  add_seed(e2e);
  e2e->callback([&] {
    action = [&] {
      auto spec = load_spec(spec_path);
      auto stores = load_stores(spec, store_path, bandwidth_mbps);
      auto budget = make_budget(cores, memory_gb, bandwidth_mbps, curve_path);
      EndToEndOptions options;
      options.measure_seconds = seconds;
      options.warmup_fraction = warmup;
      options.seed = seed;
      auto result = end_to_end(spec, stores, budget, options);
      nlohmann::json j{
          {"before_minibatches_per_sec", result.before.minibatches_per_sec},
          {"after_minibatches_per_sec", result.after.minibatches_per_sec},
          {"speedup", result.speedup},
          {"plan", plan_to_json(result.final_plan)}};
      std::cout << j.dump(2) << "\n";
      std::cerr << "speedup: " << result.speedup << "x\n";
      if (!plan_path.empty())
        write_text_file(plan_path, plan_to_json(result.final_plan).dump(2) + "\n");
      if (!rewrite_out.empty())
        write_text_file(rewrite_out, spec_to_json(result.optimized).dump(2) + "\n");
    };
  });

  // Parse (with config-file injection) and dispatch.
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = inject_config(args, {"gen", "validate", "run", "trace", "analyze",
                                "optimize", "rewrite", "bench", "end-to-end",
                                "tune", "walk", "disk", "cache"});
  } catch (const ValidationFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::vector<const char*> cargs = {argv[0]};
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(int(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (action) action();
  } catch (const ValidationFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    exit_code = 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    exit_code = 3;
  }
  return exit_code;
}
