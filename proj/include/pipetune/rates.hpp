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

#include "pipetune/file_store.hpp"
#include "pipetune/pipeline_spec.hpp"
#include "pipetune/tracer.hpp"

namespace pipetune {

struct RatesError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// UNBOUNDED and UNKNOWN are explicit states, never sentinel numbers.
struct Cardinality {
  enum class Kind { kFinite, kUnbounded, kUnknown };
  Kind kind = Kind::kUnknown;
  double value = 0.0;

  static Cardinality finite(double v) { return {Kind::kFinite, v}; }
  static Cardinality unbounded() { return {Kind::kUnbounded, 0.0}; }
  static Cardinality unknown() { return {Kind::kUnknown, 0.0}; }
  bool is_finite() const { return kind == Kind::kFinite; }
  bool is_unbounded() const { return kind == Kind::kUnbounded; }
};

struct Rate {
  enum class Kind { kFinite, kInfinite, kUnknown };
  Kind kind = Kind::kUnknown;
  double value = 0.0;  // minibatches per second per core

  static Rate finite(double v) { return {Kind::kFinite, v}; }
  static Rate infinite() { return {Kind::kInfinite, 0.0}; }
  static Rate unknown() { return {Kind::kUnknown, 0.0}; }
  bool is_finite() const { return kind == Kind::kFinite; }
  bool is_infinite() const { return kind == Kind::kInfinite; }
};

struct OperatorRates {
  std::optional<double> visit_ratio;      // V_i; nullopt = UNKNOWN
  Rate rate;                              // R_i
  std::optional<double> local_ratio;      // r_i = C_i / C_child
  Cardinality cardinality;                // n_i
  std::optional<double> bytes_per_element;  // b_i
  Cardinality materialized_bytes;         // n_i * b_i
  bool cacheable = false;
  bool steady_state_zero = false;  // below a cache: no steady-state cost
  // Mirrored from the spec for planning convenience.
  bool tunable = false;
  int64_t parallelism_in_effect = 1;
  int64_t udf_internal_parallelism = 1;
};

struct RateModel {
  PipelineSpec spec;
  std::map<std::string, OperatorRates> ops;
  double x0 = 0.0;                    // root minibatches/sec over the window
  double io_bytes_per_minibatch = 0.0;
  double wall_seconds = 0.0;
  std::vector<std::string> warnings;

  const OperatorRates& at(const std::string& name) const {
    auto it = ops.find(name);
    if (it == ops.end()) throw RatesError("rate model missing operator: " + name);
    return it->second;
  }
};

// Counter-wise difference of two snapshots of the same run; used to exclude
// cold-start windows from rate estimates.
inline TraceSnapshot snapshot_delta(const TraceSnapshot& early,
                                    const TraceSnapshot& late) {
  TraceSnapshot out = late;
  out.wall_seconds = late.wall_seconds - early.wall_seconds;
  if (out.wall_seconds <= 0.0)
    throw RatesError("snapshot delta has non-positive window");
  for (auto& [name, stats] : out.ops) {
    auto it = early.ops.find(name);
    if (it == early.ops.end()) continue;
    stats.arrivals -= it->second.arrivals;
    stats.completions -= it->second.completions;
    stats.active_cpu_ns -= it->second.active_cpu_ns;
    stats.bytes_produced -= it->second.bytes_produced;
    stats.bytes_read -= it->second.bytes_read;
  }
  return out;
}

// V_i: completions at i per root completion, via the chain recurrence
// V_i = (C_i / C_parent) * V_parent. Zero-completion parents make descendant
// ratios UNKNOWN (nullopt) rather than zero. Interleave instances share one
// stats slot per name, so merged streams arrive pre-summed.
inline std::map<std::string, std::optional<double>> visit_ratios(
    const TraceSnapshot& snap) {
  const int64_t root_completions = snap.at(snap.spec.root_id).completions;
  if (root_completions <= 0)
    throw RatesError("visit_ratios requires root completions > 0");
  std::map<std::string, std::optional<double>> ratios;
  const auto chain = chain_from_root(snap.spec);
  std::optional<double> parent_ratio = 1.0;
  int64_t parent_completions = root_completions;
  for (size_t i = 0; i < chain.size(); ++i) {
    const auto& name = chain[i]->name;
    const int64_t completions = snap.at(name).completions;
    if (i == 0) {
      ratios[name] = 1.0;
    } else if (!parent_ratio.has_value() || parent_completions <= 0 ||
               completions <= 0) {
      ratios[name] = std::nullopt;
    } else {
      ratios[name] = *parent_ratio *
                     (double(completions) / double(parent_completions));
    }
    parent_ratio = ratios[name];
    parent_completions = completions;
  }
  return ratios;
}

// R_i = (C_i / active_cpu_seconds_i) / V_i, minibatches per core-second.
// Zero-CPU operators are flagged infinite (never a bottleneck).
inline std::map<std::string, Rate> cpu_rates(
    const TraceSnapshot& snap,
    const std::map<std::string, std::optional<double>>& ratios) {
  std::map<std::string, Rate> rates;
  for (const auto& [name, stats] : snap.ops) {
    auto it = ratios.find(name);
    if (it == ratios.end() || !it->second.has_value()) {
      rates[name] = Rate::unknown();
      continue;
    }
    if (stats.active_cpu_ns <= 0) {
      rates[name] = Rate::infinite();
      continue;
    }
    const double cpu_seconds = double(stats.active_cpu_ns) / 1e9;
    rates[name] =
        Rate::finite(double(stats.completions) / cpu_seconds / *it->second);
  }
  return rates;
}

// Bytes read from storage per root minibatch.
inline double io_cost(const TraceSnapshot& snap) {
  const int64_t root_completions = snap.at(snap.spec.root_id).completions;
  if (root_completions <= 0)
    throw RatesError("io_cost requires root completions > 0");
  int64_t bytes = 0;
  for (const auto& [name, stats] : snap.ops) bytes += stats.bytes_read;
  return double(bytes) / double(root_completions);
}

// Nodes that may not be cached: every random map plus every ancestor (toward
// the root) of one.
inline std::set<std::string> randomness_closure(const PipelineSpec& spec) {
  std::set<std::string> closure;
  const auto chain = chain_from_root(spec);
  // Walk leaf-ward: a node is in the closure iff its leafward path from the
  // root passes a random map at or below it.
  for (size_t i = chain.size(); i-- > 0;) {
    const OperatorNode* n = chain[i];
    const bool random_here =
        n->kind == OperatorKind::kMap && n->params.is_random;
    const bool random_below =
        !n->children.empty() && closure.count(n->children.front()) > 0;
    if (random_here || random_below) closure.insert(n->name);
  }
  return closure;
}

struct MaterializationEntry {
  Cardinality cardinality;
  std::optional<double> bytes_per_element;
  Cardinality materialized_bytes;
  bool cacheable = false;
};

// Propagates cardinality and byte ratios from the source up to the root.
// Sources anchor at (sum of file sizes) * r_source, with r_source the
// records-per-produced-byte ratio from the trace, so the source-level
// materialization equals the store size exactly. Repeat and Take override
// the measured local ratio with their declared semantics; infinite repeats
// and random maps mark everything above them UNBOUNDED.
inline std::map<std::string, MaterializationEntry> materialization(
    const TraceSnapshot& snap, const StoreRegistry& stores) {
  std::map<std::string, MaterializationEntry> out;
  const auto closure = randomness_closure(snap.spec);
  auto chain = chain_from_root(snap.spec);
  std::reverse(chain.begin(), chain.end());  // leaf -> root

  Cardinality below = Cardinality::unknown();
  for (const OperatorNode* node : chain) {
    const auto& stats = snap.at(node->name);
    MaterializationEntry entry;
    if (stats.completions > 0)
      entry.bytes_per_element =
          double(stats.bytes_produced) / double(stats.completions);

    switch (node->kind) {
      case OperatorKind::kSource: {
        auto it = stores.find(node->params.store_id);
        if (it != stores.end() && entry.bytes_per_element.has_value() &&
            *entry.bytes_per_element > 0.0) {
          const double store_bytes = double(it->second->total_bytes());
          entry.cardinality =
              Cardinality::finite(store_bytes / *entry.bytes_per_element);
        } else {
          entry.cardinality = Cardinality::unknown();
        }
        break;
      }
      case OperatorKind::kRepeat: {
        if (node->params.count == kRepeatInfinite)
          entry.cardinality = Cardinality::unbounded();
        else if (below.is_finite())
          entry.cardinality =
              Cardinality::finite(below.value * double(node->params.count));
        else
          entry.cardinality = below;
        break;
      }
      case OperatorKind::kTake: {
        if (below.is_finite())
          entry.cardinality = Cardinality::finite(
              std::min(below.value, double(node->params.count)));
        else
          entry.cardinality = Cardinality::finite(double(node->params.count));
        break;
      }
      case OperatorKind::kMap: {
        if (node->params.is_random)
          entry.cardinality = Cardinality::unbounded();
        else if (below.is_finite()) {
          // Local measured input-output ratio; falls back to the declared
          // fan-out when the window saw no completions here.
          const auto& child_stats = snap.at(node->children.front());
          const double r =
              child_stats.completions > 0 && stats.completions > 0
                  ? double(stats.completions) / double(child_stats.completions)
                  : double(node->params.input_output_ratio);
          entry.cardinality = Cardinality::finite(below.value * r);
        } else
          entry.cardinality = below;
        break;
      }
      default: {
        if (below.is_finite()) {
          const auto& child_stats = snap.at(node->children.front());
          if (child_stats.completions > 0 && stats.completions > 0)
            entry.cardinality = Cardinality::finite(
                below.value * double(stats.completions) /
                double(child_stats.completions));
          else
            entry.cardinality = Cardinality::unknown();
        } else
          entry.cardinality = below;
        break;
      }
    }

    if (entry.cardinality.is_unbounded())
      entry.materialized_bytes = Cardinality::unbounded();
    else if (entry.cardinality.is_finite() && entry.bytes_per_element.has_value())
      entry.materialized_bytes = Cardinality::finite(
          entry.cardinality.value * *entry.bytes_per_element);
    else
      entry.materialized_bytes = Cardinality::unknown();

    entry.cacheable = entry.materialized_bytes.is_finite() &&
                      closure.count(node->name) == 0 &&
                      node->kind != OperatorKind::kCache &&
                      node->kind != OperatorKind::kPrefetch;
    out[node->name] = entry;
    below = entry.cardinality;
  }
  return out;
}

// Assembles the full operational model from a snapshot (optionally a delta
// against an earlier snapshot, excluding cold-start effects).
inline RateModel build_rate_model(const TraceSnapshot& snapshot,
                                  const StoreRegistry& stores,
                                  const TraceSnapshot* early = nullptr) {
  const TraceSnapshot snap =
      early != nullptr ? snapshot_delta(*early, snapshot) : snapshot;
  RateModel model;
  model.spec = snap.spec;
  model.wall_seconds = snap.wall_seconds;
  const auto ratios = visit_ratios(snap);
  const auto rates = cpu_rates(snap, ratios);
  const auto material = materialization(snap, stores);
  model.x0 = double(snap.at(snap.spec.root_id).completions) / snap.wall_seconds;
  model.io_bytes_per_minibatch = io_cost(snap);

  // Operators strictly below an existing Cache have no steady-state cost.
  std::set<std::string> below_cache;
  {
    const auto chain = chain_from_root(snap.spec);
    bool below = false;
    for (const OperatorNode* node : chain) {
      if (below) below_cache.insert(node->name);
      if (node->kind == OperatorKind::kCache) below = true;
    }
  }

  const auto chain = chain_from_root(snap.spec);
  for (size_t i = 0; i < chain.size(); ++i) {
    const OperatorNode* node = chain[i];
    OperatorRates op;
    op.visit_ratio = ratios.at(node->name);
    op.rate = rates.at(node->name);
    op.tunable = node->tunable_parallelism.has_value();
    op.parallelism_in_effect = snap.at(node->name).parallelism;
    op.udf_internal_parallelism =
        node->kind == OperatorKind::kMap ? node->params.udf_internal_parallelism : 1;
    if (i + 1 < chain.size()) {
      const auto& child = snap.at(chain[i + 1]->name);
      const auto& self = snap.at(node->name);
      if (child.completions > 0)
        op.local_ratio = double(self.completions) / double(child.completions);
    } else {
      op.local_ratio = 1.0;
    }
    const auto& m = material.at(node->name);
    op.cardinality = m.cardinality;
    op.bytes_per_element = m.bytes_per_element;
    op.materialized_bytes = m.materialized_bytes;
    op.cacheable = m.cacheable;
    op.steady_state_zero = below_cache.count(node->name) > 0;
    if (!op.visit_ratio.has_value())
      model.warnings.push_back("operator with zero completions: " + node->name);
    model.ops[node->name] = op;
  }
  return model;
}

// Ascending aggregate capacity theta_i * R_i. Sequential operators are
// pinned to one core; infinite-rate operators are excluded; ties break by
// name for determinism.
struct BottleneckRanking {
  std::vector<std::string> ranked;
  std::string diagnostic;
};

inline BottleneckRanking bottleneck_ranking(
    const RateModel& model, const std::map<std::string, int64_t>& parallelism) {
  struct Entry {
    double aggregate;
    std::string name;
  };
  std::vector<Entry> entries;
  size_t unknown_count = 0;
  for (const auto& [name, op] : model.ops) {
    if (op.rate.kind == Rate::Kind::kUnknown) {
      ++unknown_count;
      continue;
    }
    if (op.rate.is_infinite() || op.steady_state_zero) continue;
    auto it = parallelism.find(name);
    const int64_t p =
        op.tunable ? (it != parallelism.end() ? it->second : op.parallelism_in_effect)
                   : 1;
    entries.push_back(
        {double(p) * double(op.udf_internal_parallelism) * op.rate.value, name});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.aggregate != b.aggregate) return a.aggregate < b.aggregate;
    return a.name < b.name;
  });
  BottleneckRanking out;
  for (const auto& e : entries) out.ranked.push_back(e.name);
  if (out.ranked.empty() && unknown_count > 0)
    out.diagnostic = "all operators have unknown rates";
  return out;
}

// ---------------------------------------------------------------------------
// JSON view of the model (the analyze subcommand's output).

inline nlohmann::json cardinality_to_json(const Cardinality& c) {
  switch (c.kind) {
    case Cardinality::Kind::kFinite: return c.value;
    case Cardinality::Kind::kUnbounded: return "UNBOUNDED";
    case Cardinality::Kind::kUnknown: return "UNKNOWN";
  }
  return nullptr;
}

inline nlohmann::json rate_to_json(const Rate& r) {
  switch (r.kind) {
    case Rate::Kind::kFinite: return r.value;
    case Rate::Kind::kInfinite: return "INFINITE";
    case Rate::Kind::kUnknown: return "UNKNOWN";
  }
  return nullptr;
}

inline nlohmann::json rate_model_to_json(const RateModel& model) {
  nlohmann::json ops = nlohmann::json::object();
  for (const auto& [name, op] : model.ops) {
    nlohmann::json jo;
    jo["visit_ratio"] = op.visit_ratio.has_value()
                            ? nlohmann::json(*op.visit_ratio)
                            : nlohmann::json("UNKNOWN");
    jo["rate_per_core"] = rate_to_json(op.rate);
    jo["cardinality"] = cardinality_to_json(op.cardinality);
    jo["bytes_per_element"] = op.bytes_per_element.has_value()
                                  ? nlohmann::json(*op.bytes_per_element)
                                  : nlohmann::json("UNKNOWN");
    jo["materialized_bytes"] = cardinality_to_json(op.materialized_bytes);
    jo["cacheable"] = op.cacheable;
    jo["steady_state_zero"] = op.steady_state_zero;
    jo["parallelism"] = op.parallelism_in_effect;
    ops[name] = std::move(jo);
  }
  return nlohmann::json{{"throughput_minibatches_per_sec", model.x0},
                        {"io_bytes_per_minibatch", model.io_bytes_per_minibatch},
                        {"wall_seconds", model.wall_seconds},
                        {"ops", std::move(ops)},
                        {"warnings", model.warnings}};
}

}  // namespace pipetune
