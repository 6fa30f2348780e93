#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pipetune/bench.hpp"
#include "pipetune/engine.hpp"
#include "pipetune/file_store.hpp"
#include "pipetune/pipeline_spec.hpp"

namespace testutil {

using namespace pipetune;

inline OperatorNode node(std::string name, OperatorKind kind,
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

inline OperatorParams source_params(std::string store, int64_t records,
                                    int64_t bytes) {
  OperatorParams p;
  p.store_id = std::move(store);
  p.records_per_file = records;
  p.bytes_per_record = bytes;
  return p;
}

inline OperatorParams map_params(double cost_us, double ratio = 1.0,
                                 bool random = false, int64_t udf = 1,
                                 int64_t io_ratio = 1) {
  OperatorParams p;
  p.cpu_cost_per_element_us = cost_us;
  p.byte_ratio = ratio;
  p.is_random = random;
  p.udf_internal_parallelism = udf;
  p.input_output_ratio = io_ratio;
  return p;
}

inline OperatorParams filter_params(double keep, double cost_us = 0.0) {
  OperatorParams p;
  p.keep_probability = keep;
  p.cpu_cost_per_element_us = cost_us;
  return p;
}

inline OperatorParams batch_params(int64_t size) {
  OperatorParams p;
  p.batch_size = size;
  return p;
}

inline OperatorParams buffer_params(int64_t size) {
  OperatorParams p;
  p.buffer_size = size;
  return p;
}

inline OperatorParams count_params(int64_t count) {
  OperatorParams p;
  p.count = count;
  return p;
}

// A store of `files` constant-size files plus a registry binding it to
// store id "s".
inline StoreRegistry make_store(int64_t files, int64_t bytes_per_file,
                                uint64_t seed = 1) {
  StoreRegistry stores;
  stores["s"] = std::make_shared<FileStore>(
      FileStore::create(files, SizeDistribution::constant(double(bytes_per_file)), seed));
  return stores;
}

// source -> map -> batch chain used across tests.
inline PipelineSpec chain_spec(int64_t records_per_file, int64_t bytes_per_record,
                               double map_cost_us, int64_t batch_size) {
  PipelineSpec spec;
  spec.root_id = "batch";
  spec.nodes = {
      node("batch", OperatorKind::kBatch, {"map"}, batch_params(batch_size)),
      node("map", OperatorKind::kMap, {"src"}, map_params(map_cost_us), 1),
      node("src", OperatorKind::kSource, {},
           source_params("s", records_per_file, bytes_per_record)),
  };
  return spec;
}

// Pulls the whole stream, returning payload sizes in order.
inline std::vector<int64_t> drain(IteratorTree& tree) {
  std::vector<int64_t> sizes;
  while (auto e = tree.next()) sizes.push_back(e->payload_bytes);
  return sizes;
}

// Hand-built snapshot for model-level tests (no engine run needed).
inline TraceSnapshot make_snapshot(const PipelineSpec& spec,
                                   std::map<std::string, OperatorStats> ops,
                                   double wall_seconds) {
  TraceSnapshot snap;
  snap.spec = spec;
  snap.wall_seconds = wall_seconds;
  for (const auto& n : spec.nodes) {
    if (ops.find(n.name) == ops.end()) ops[n.name] = OperatorStats{};
    ops[n.name].parallelism =
        std::max<int64_t>(ops[n.name].parallelism, n.tunable_parallelism.value_or(1));
  }
  snap.ops = std::move(ops);
  return snap;
}

inline OperatorStats stats(int64_t completions, double cpu_seconds = 0.0,
                           int64_t bytes_produced = 0, int64_t bytes_read = 0,
                           int64_t arrivals = -1) {
  OperatorStats s;
  s.completions = completions;
  s.active_cpu_ns = int64_t(cpu_seconds * 1e9);
  s.bytes_produced = bytes_produced;
  s.bytes_read = bytes_read;
  s.arrivals = arrivals >= 0 ? arrivals : completions;
  return s;
}

}  // namespace testutil
