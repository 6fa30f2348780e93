#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pipetune/bandwidth_curve.hpp"
#include "pipetune/rates.hpp"

namespace pipetune {

struct OptimizerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ResourceBudget {
  double cores = 1.0;
  int64_t memory_bytes = 0;
  std::optional<BandwidthCurve> disk;  // nullopt = unlimited

  static ResourceBudget make(double cores, int64_t memory_bytes,
                             std::optional<double> disk_bytes_per_sec = {}) {
    ResourceBudget b{cores, memory_bytes, std::nullopt};
    if (disk_bytes_per_sec.has_value())
      b.disk = BandwidthCurve::flat(*disk_bytes_per_sec);
    return b;
  }
};

enum class BindingConstraint { kCpu, kDisk, kSequential, kModelNone };

inline const char* to_string(BindingConstraint b) {
  switch (b) {
    case BindingConstraint::kCpu: return "CPU";
    case BindingConstraint::kDisk: return "DISK";
    case BindingConstraint::kSequential: return "SEQUENTIAL";
    case BindingConstraint::kModelNone: return "MODEL_NONE";
  }
  return "?";
}

struct TuningPlan {
  std::map<std::string, double> theta;  // fractional cores (effective)
  std::map<std::string, int64_t> integer_parallelism;  // knob-bearing ops
  std::optional<std::string> cache_site;
  std::map<std::string, int64_t> prefetch;  // producer node -> buffer size
  double predicted_x = 0.0;
  BindingConstraint binding = BindingConstraint::kModelNone;
  std::string binding_op;  // set when binding == kSequential
  std::vector<std::string> warnings;
};

struct LpSolution {
  double x_star = 0.0;
  std::map<std::string, double> theta;
  BindingConstraint binding = BindingConstraint::kCpu;
  std::string binding_op;
};

// Closed-form max-min allocation: all operators run at the common rate X,
// so theta_i = X / R_i and X* = min(min over sequential R_i, K / sum 1/R_i).
// When a sequential operator binds, the surplus cores stay unallocated.
inline LpSolution solve_cpu_lp(const std::map<std::string, double>& rates,
                               const std::set<std::string>& sequential,
                               double cores) {
  if (rates.empty()) throw OptimizerError("solve_cpu_lp: empty operator set");
  if (cores <= 0.0) throw OptimizerError("solve_cpu_lp: cores must be > 0");
  double inverse_sum = 0.0;
  double seq_min = std::numeric_limits<double>::infinity();
  std::string seq_min_op;
  for (const auto& [name, rate] : rates) {
    if (rate <= 0.0)
      throw OptimizerError("solve_cpu_lp: nonpositive rate for " + name);
    inverse_sum += 1.0 / rate;
    if (sequential.count(name) && rate < seq_min) {
      seq_min = rate;
      seq_min_op = name;
    }
  }
  LpSolution solution;
  const double x_cpu = cores / inverse_sum;
  if (seq_min < x_cpu) {
    solution.x_star = seq_min;
    solution.binding = BindingConstraint::kSequential;
    solution.binding_op = seq_min_op;
  } else {
    solution.x_star = x_cpu;
    solution.binding = BindingConstraint::kCpu;
  }
  for (const auto& [name, rate] : rates)
    solution.theta[name] = solution.x_star / rate;
  return solution;
}

struct DiskBound {
  double x_disk = std::numeric_limits<double>::infinity();
  int64_t min_source_parallelism = 1;
};

// X_disk = max bandwidth / io bytes per minibatch; the curve knee gives the
// minimal read parallelism that reaches it.
inline DiskBound disk_bound(double io_bytes_per_minibatch,
                            const std::optional<BandwidthCurve>& disk) {
  DiskBound bound;
  if (!disk.has_value() || io_bytes_per_minibatch <= 0.0) return bound;
  bound.x_disk = disk->max_bandwidth() / io_bytes_per_minibatch;
  bound.min_source_parallelism = disk->knee();
  return bound;
}

// Greedy (optimal for chains): the cacheable node closest to the root whose
// materialization fits in memory.
inline std::optional<std::string> place_cache(const RateModel& model,
                                              int64_t memory_bytes,
                                              const std::set<std::string>& closure) {
  for (const OperatorNode* node : chain_from_root(model.spec)) {
    const auto& op = model.at(node->name);
    if (!op.cacheable || closure.count(node->name)) continue;
    if (op.materialized_bytes.is_finite() &&
        op.materialized_bytes.value <= double(memory_bytes))
      return node->name;
  }
  return std::nullopt;
}

// Buffer sizes proportional to idleness: clamp(round(idle * parallelism),
// 1, 64) on every parallel-op output edge, and always >= 2 at the root.
inline std::map<std::string, int64_t> inject_prefetch(
    const TraceSnapshot& snap, const std::map<std::string, int64_t>& parallelism,
    const std::string& root) {
  std::map<std::string, int64_t> placements;
  auto idle_ratio = [&](const std::string& name, int64_t p) {
    const auto& stats = snap.at(name);
    const double window = snap.wall_seconds * 1e9 * double(std::max<int64_t>(p, 1));
    const double share =
        window > 0.0 ? double(stats.active_cpu_ns) / window : 0.0;
    return std::clamp(1.0 - share, 0.0, 1.0);
  };
  for (const auto& [name, p] : parallelism) {
    const int64_t buffer = std::clamp<int64_t>(
        int64_t(std::llround(idle_ratio(name, p) * double(p))), 1, 64);
    placements[name] = buffer;
  }
  // Root edge always buffered (>= 2) so the consumer overlaps the pipeline.
  const auto* root_node = snap.spec.find(root);
  if (root_node != nullptr && root_node->kind != OperatorKind::kPrefetch) {
    int64_t p = 1;
    if (auto it = parallelism.find(root); it != parallelism.end()) p = it->second;
    const int64_t buffer = std::clamp<int64_t>(
        int64_t(std::llround(idle_ratio(root, p) * double(p))), 1, 64);
    placements[root] = std::max<int64_t>(2, buffer);
  }
  return placements;
}

// Throughput of a plan: the slowest aggregate rate theta_i * R_i, capped by
// the disk bound.
inline double predict_throughput(const TuningPlan& plan, const RateModel& model,
                                 double x_disk = std::numeric_limits<double>::infinity()) {
  double x = x_disk;
  for (const auto& [name, theta] : plan.theta) {
    const auto& op = model.at(name);
    if (!op.rate.is_finite() || op.steady_state_zero) continue;
    x = std::min(x, theta * op.rate.value);
  }
  return x;
}

// Capacity of the configuration as traced: min over operators of
// parallelism * udf_workers * R_i (sequential operators at one core), capped
// by disk. This is the prediction a tuning step is judged against.
inline double predict_current_config(const RateModel& model,
                                     const std::optional<BandwidthCurve>& disk) {
  double x = disk_bound(model.io_bytes_per_minibatch, disk).x_disk;
  for (const auto& [name, op] : model.ops) {
    if (!op.rate.is_finite() || op.steady_state_zero) continue;
    const double cores =
        op.tunable ? double(op.parallelism_in_effect * op.udf_internal_parallelism)
                   : 1.0;
    x = std::min(x, cores * op.rate.value);
  }
  return x;
}

namespace detail {

struct PassResult {
  std::optional<std::string> cache_site;
  LpSolution lp;
  DiskBound disk;
  double effective_io = 0.0;
  bool lp_ran = false;
};

// The cache site and everything below it (the cache's children).
inline std::set<std::string> zeroed_by_cache(
    const PipelineSpec& spec, const std::optional<std::string>& site) {
  std::set<std::string> zeroed;
  if (!site.has_value()) return zeroed;
  bool below = false;
  for (const OperatorNode* node : chain_from_root(spec)) {
    if (node->name == *site) below = true;
    if (below) zeroed.insert(node->name);
  }
  return zeroed;
}

inline PassResult optimizer_pass(const RateModel& model,
                                 const ResourceBudget& budget,
                                 const std::set<std::string>& closure) {
  PassResult pass;
  // Caching first: operators at or below the cache site lose their
  // steady-state cost, which frees cores and all of the I/O (the source is
  // always under a chain cache site). A pipeline that already carries a
  // cache keeps it; chains want a single site.
  bool has_cache = false;
  bool source_cached = false;
  for (const auto& n : model.spec.nodes) {
    if (n.kind == OperatorKind::kCache) has_cache = true;
    if (n.kind == OperatorKind::kSource && model.at(n.name).steady_state_zero)
      source_cached = true;
  }
  if (!has_cache)
    pass.cache_site = place_cache(model, budget.memory_bytes, closure);
  const auto zeroed = zeroed_by_cache(model.spec, pass.cache_site);

  std::map<std::string, double> rates;
  std::set<std::string> sequential;
  for (const auto& [name, op] : model.ops) {
    if (!op.rate.is_finite() || op.steady_state_zero || zeroed.count(name))
      continue;
    // The LP runs in effective cores; udf fan-out is folded back into the
    // knob when integerizing.
    rates[name] = op.rate.value;
    if (!op.tunable) sequential.insert(name);
  }

  // Reads disappear once a cache sits above the source; a cold-start trace
  // of an already-cached pipeline still shows the fill-phase reads.
  pass.effective_io = pass.cache_site.has_value() || source_cached
                          ? 0.0
                          : model.io_bytes_per_minibatch;
  pass.disk = disk_bound(pass.effective_io, budget.disk);
  if (!rates.empty()) {
    pass.lp = solve_cpu_lp(rates, sequential, budget.cores);
    pass.lp_ran = true;
  }
  return pass;
}

}  // namespace detail

// Full planning pass: cache placement, effective-rate recomputation, the CPU
// LP, the disk bound, and prefetch injection. The pass sequence runs twice;
// without a re-trace the second pass confirms the first (live two-pass
// tuning re-traces between passes, see cli end-to-end).
inline TuningPlan plan(const TraceSnapshot& snapshot, const ResourceBudget& budget,
                       const StoreRegistry& stores,
                       const TraceSnapshot* early = nullptr) {
  const RateModel model = build_rate_model(snapshot, stores, early);
  const auto closure = randomness_closure(model.spec);

  TuningPlan result;
  result.warnings = model.warnings;

  detail::PassResult pass;
  for (int iteration = 0; iteration < 2; ++iteration)
    pass = detail::optimizer_pass(model, budget, closure);

  result.cache_site = pass.cache_site;
  const auto zeroed = detail::zeroed_by_cache(model.spec, pass.cache_site);

  for (const auto& [name, theta] : pass.lp.theta) result.theta[name] = theta;

  // Integer knobs: ceil of the effective cores divided by the udf fan-out,
  // with a hedging floor of one worker for every knob-bearing op. The disk
  // knee lower-bounds read parallelism while reads remain on the hot path.
  for (const OperatorNode* node : chain_from_root(model.spec)) {
    if (!node->tunable_parallelism.has_value()) continue;
    const auto& op = model.at(node->name);
    int64_t knob = 1;
    if (auto it = result.theta.find(node->name); it != result.theta.end()) {
      const double effective = it->second;
      knob = std::max<int64_t>(
          1, int64_t(std::ceil(effective /
                               double(std::max<int64_t>(1, op.udf_internal_parallelism)) -
                               1e-9)));
    }
    const bool reads_matter = pass.effective_io > 0.0 && !zeroed.count(node->name);
    if (reads_matter && (node->kind == OperatorKind::kInterleave ||
                         node->kind == OperatorKind::kSource))
      knob = std::max(knob, pass.disk.min_source_parallelism);
    result.integer_parallelism[node->name] = knob;
  }

  if (!pass.lp_ran) {
    result.predicted_x = pass.disk.x_disk;
    result.binding = std::isinf(pass.disk.x_disk) ? BindingConstraint::kModelNone
                                                  : BindingConstraint::kDisk;
  } else if (pass.disk.x_disk < pass.lp.x_star) {
    result.predicted_x = pass.disk.x_disk;
    result.binding = BindingConstraint::kDisk;
  } else {
    result.predicted_x = pass.lp.x_star;
    result.binding = pass.lp.binding;
    result.binding_op = pass.lp.binding_op;
  }

  // Prefetch buffers for every knob-bearing op edge plus the root.
  std::map<std::string, int64_t> parallel_ops;
  for (const auto& [name, p] : result.integer_parallelism) parallel_ops[name] = p;
  result.prefetch = inject_prefetch(snapshot, parallel_ops, model.spec.root_id);

  return result;
}

// ---------------------------------------------------------------------------
// Plan JSON.

inline nlohmann::json plan_to_json(const TuningPlan& plan) {
  nlohmann::json j;
  j["theta"] = plan.theta;
  j["parallelism"] = plan.integer_parallelism;
  j["cache_site"] = plan.cache_site.has_value() ? nlohmann::json(*plan.cache_site)
                                                : nlohmann::json(nullptr);
  j["prefetch"] = plan.prefetch;
  j["predicted_x"] = std::isinf(plan.predicted_x) ? nlohmann::json("INFINITE")
                                                  : nlohmann::json(plan.predicted_x);
  j["binding"] = to_string(plan.binding);
  if (!plan.binding_op.empty()) j["binding_op"] = plan.binding_op;
  j["warnings"] = plan.warnings;
  return j;
}

inline TuningPlan plan_from_json(const nlohmann::json& j) {
  TuningPlan plan;
  plan.theta = j.value("theta", std::map<std::string, double>{});
  plan.integer_parallelism =
      j.value("parallelism", std::map<std::string, int64_t>{});
  if (j.contains("cache_site") && !j.at("cache_site").is_null())
    plan.cache_site = j.at("cache_site").get<std::string>();
  plan.prefetch = j.value("prefetch", std::map<std::string, int64_t>{});
  if (j.contains("predicted_x") && j.at("predicted_x").is_number())
    plan.predicted_x = j.at("predicted_x").get<double>();
  else
    plan.predicted_x = std::numeric_limits<double>::infinity();
  const std::string binding = j.value("binding", "MODEL_NONE");
  if (binding == "CPU") plan.binding = BindingConstraint::kCpu;
  else if (binding == "DISK") plan.binding = BindingConstraint::kDisk;
  else if (binding == "SEQUENTIAL") plan.binding = BindingConstraint::kSequential;
  else plan.binding = BindingConstraint::kModelNone;
  plan.binding_op = j.value("binding_op", "");
  return plan;
}

}  // namespace pipetune
