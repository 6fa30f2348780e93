#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "pipetune/engine.hpp"
#include "pipetune/optimizer.hpp"
#include "pipetune/pipeline_spec.hpp"
#include "pipetune/rates.hpp"

namespace pipetune {

struct RewriteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Current knob value, or nullopt for NOT_TUNABLE. Unknown nodes are an error.
inline std::optional<int64_t> get_parallelism(const PipelineSpec& spec,
                                              const std::string& node) {
  const OperatorNode* n = spec.find(node);
  if (n == nullptr) throw RewriteError("unknown node: " + node);
  return n->tunable_parallelism;
}

// Returns an edited copy; the input spec is never touched.
inline PipelineSpec set_parallelism(const PipelineSpec& spec,
                                    const std::string& node, int64_t k) {
  if (k < 1) throw RewriteError("parallelism must be >= 1, got " + std::to_string(k));
  PipelineSpec out = spec;
  OperatorNode* n = out.find(node);
  if (n == nullptr) throw RewriteError("unknown node: " + node);
  if (!n->tunable_parallelism.has_value())
    throw RewriteError("NOT_TUNABLE: " + node);
  n->tunable_parallelism = k;
  return out;
}

// Splices a Cache or Prefetch between `node` and its parent (or above the
// root). Generated names are stable ("<node>__cache" / "<node>__prefetch");
// re-applying over an existing generated node updates it in place instead of
// stacking another copy.
inline PipelineSpec insert_after(const PipelineSpec& spec, const std::string& node,
                                 OperatorKind kind, int64_t buffer_size = 0) {
  if (kind != OperatorKind::kCache && kind != OperatorKind::kPrefetch)
    throw RewriteError("insert_after supports cache and prefetch only");
  const OperatorNode* target = spec.find(node);
  if (target == nullptr) throw RewriteError("unknown node: " + node);
  if (kind == OperatorKind::kCache) {
    const auto closure = randomness_closure(spec);
    if (closure.count(node))
      throw RewriteError("cannot cache at or above a random operator: " + node);
  }

  const std::string generated =
      node + (kind == OperatorKind::kCache ? "__cache" : "__prefetch");

  PipelineSpec out = spec;
  if (OperatorNode* existing = out.find(generated);
      existing != nullptr && existing->kind == kind) {
    if (kind == OperatorKind::kPrefetch) existing->params.buffer_size = buffer_size;
    return out;
  }

  OperatorNode inserted;
  inserted.name = generated;
  inserted.kind = kind;
  inserted.children = {node};
  if (kind == OperatorKind::kPrefetch) {
    if (buffer_size < 1) throw RewriteError("prefetch buffer must be >= 1");
    inserted.params.buffer_size = buffer_size;
  }

  if (out.root_id == node) {
    out.root_id = generated;
  } else {
    OperatorNode* parent = nullptr;
    for (auto& n : out.nodes)
      for (auto& c : n.children)
        if (c == node) parent = &n;
    if (parent == nullptr) throw RewriteError("node has no parent: " + node);
    for (auto& c : parent->children)
      if (c == node) c = generated;
  }
  out.nodes.push_back(std::move(inserted));

  auto validation = validate_spec(out);
  if (!validation.ok())
    throw RewriteError("insert produced invalid spec: " + validation.violations.front());
  return out;
}

// Applies parallelism settings, the optional cache insert, and all prefetch
// inserts as one atomic edit; any failure leaves the input untouched.
inline PipelineSpec apply_plan(const PipelineSpec& spec, const TuningPlan& plan) {
  PipelineSpec out = spec;
  for (const auto& [name, k] : plan.integer_parallelism) {
    const OperatorNode* n = out.find(name);
    if (n == nullptr) throw RewriteError("plan names missing node: " + name);
    if (!n->tunable_parallelism.has_value())
      throw RewriteError("plan sets parallelism on NOT_TUNABLE node: " + name);
    out = set_parallelism(out, name, k);
  }
  if (plan.cache_site.has_value())
    out = insert_after(out, *plan.cache_site, OperatorKind::kCache);
  for (const auto& [name, buffer] : plan.prefetch) {
    if (out.find(name) == nullptr)
      throw RewriteError("plan names missing node: " + name);
    out = insert_after(out, name, OperatorKind::kPrefetch, buffer);
  }
  auto validation = validate_spec(out);
  if (!validation.ok())
    throw RewriteError("plan produced invalid spec: " + validation.violations.front());
  return out;
}

// Removes user-supplied Cache nodes (they are treated as suggestions).
inline PipelineSpec strip_caches(const PipelineSpec& spec) {
  PipelineSpec out = spec;
  while (true) {
    const OperatorNode* cache = nullptr;
    for (const auto& n : out.nodes)
      if (n.kind == OperatorKind::kCache) cache = &n;
    if (cache == nullptr) break;
    const std::string name = cache->name;
    const std::string child = cache->children.front();
    if (out.root_id == name) {
      out.root_id = child;
    } else {
      for (auto& n : out.nodes)
        for (auto& c : n.children)
          if (c == name) c = child;
    }
    std::erase_if(out.nodes, [&](const OperatorNode& n) { return n.name == name; });
  }
  return out;
}

struct PickBestCandidateReport {
  std::string root;
  double predicted_x = 0.0;
  double measured_x = 0.0;
  TuningPlan plan;
};

struct PickBestResult {
  PipelineSpec chosen;  // optimized winner
  size_t chosen_index = 0;
  std::vector<PickBestCandidateReport> candidates;
};

// Traces and plans every candidate (with user caches stripped first) and
// returns the optimized variant with the highest predicted throughput.
// Candidates must agree on the root element byte shape, checked on a short
// probe run.
inline PickBestResult pick_best(const std::vector<PipelineSpec>& candidates,
                                const StoreRegistry& stores,
                                const ResourceBudget& budget,
                                double trace_seconds, uint64_t seed = 42) {
  if (candidates.empty()) throw RewriteError("pick_best needs >= 1 candidate");

  std::vector<PipelineSpec> stripped;
  for (const auto& c : candidates) stripped.push_back(strip_caches(c));

  // Signature probe: the first few root payload sizes must match.
  std::vector<std::vector<int64_t>> signatures;
  for (const auto& spec : stripped) {
    InstantiateOptions options;
    options.seed = seed;
    auto tree = IteratorTree::instantiate(spec, stores, nullptr, options);
    std::vector<int64_t> sig;
    for (int i = 0; i < 3; ++i) {
      auto e = tree->next();
      if (!e.has_value()) break;
      sig.push_back(e->payload_bytes);
    }
    tree->close();
    signatures.push_back(std::move(sig));
  }
  for (size_t i = 1; i < signatures.size(); ++i) {
    if (signatures[i] != signatures[0])
      throw RewriteError("candidate " + std::to_string(i) +
                         " output signature differs from candidate 0");
  }

  PickBestResult result;
  double best_predicted = -1.0;
  std::vector<TuningPlan> plans;
  for (size_t i = 0; i < stripped.size(); ++i) {
    const auto& spec = stripped[i];
    auto tracer = Tracer::create(spec);
    InstantiateOptions options;
    options.seed = seed;
    auto tree = IteratorTree::instantiate(spec, stores, tracer, options);
    auto traced = trace_until_stable(*tree, 0.05, trace_seconds / 2.0,
                                     trace_seconds, trace_seconds / 4.0);
    tree->close();
    TuningPlan candidate_plan = plan(traced.snapshot, budget, stores);
    PickBestCandidateReport report;
    report.root = spec.root_id;
    report.predicted_x = candidate_plan.predicted_x;
    report.measured_x = double(traced.snapshot.at(spec.root_id).completions) /
                        traced.snapshot.wall_seconds;
    report.plan = candidate_plan;
    result.candidates.push_back(std::move(report));
    plans.push_back(std::move(candidate_plan));
    if (result.candidates.back().predicted_x > best_predicted) {
      best_predicted = result.candidates.back().predicted_x;
      result.chosen_index = i;
    }
  }
  result.chosen = apply_plan(stripped[result.chosen_index], plans[result.chosen_index]);
  return result;
}

}  // namespace pipetune
