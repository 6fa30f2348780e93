#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace pipetune {

enum class OperatorKind {
  kSource,
  kInterleave,
  kMap,
  kFilter,
  kShuffle,
  kRepeat,
  kBatch,
  kPrefetch,
  kCache,
  kTake,
};

inline const char* to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::kSource: return "source";
    case OperatorKind::kInterleave: return "interleave";
    case OperatorKind::kMap: return "map";
    case OperatorKind::kFilter: return "filter";
    case OperatorKind::kShuffle: return "shuffle";
    case OperatorKind::kRepeat: return "repeat";
    case OperatorKind::kBatch: return "batch";
    case OperatorKind::kPrefetch: return "prefetch";
    case OperatorKind::kCache: return "cache";
    case OperatorKind::kTake: return "take";
  }
  return "?";
}

inline std::optional<OperatorKind> kind_from_string(const std::string& s) {
  static const std::map<std::string, OperatorKind> table = {
      {"source", OperatorKind::kSource},   {"interleave", OperatorKind::kInterleave},
      {"map", OperatorKind::kMap},         {"filter", OperatorKind::kFilter},
      {"shuffle", OperatorKind::kShuffle}, {"repeat", OperatorKind::kRepeat},
      {"batch", OperatorKind::kBatch},     {"prefetch", OperatorKind::kPrefetch},
      {"cache", OperatorKind::kCache},     {"take", OperatorKind::kTake},
  };
  auto it = table.find(s);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

// Distinguished Repeat count for endless streams.
constexpr int64_t kRepeatInfinite = -1;

// Kind-specific parameters. One flat struct keeps serialization simple; only
// the fields of the node's kind are meaningful.
struct OperatorParams {
  // Source
  std::string store_id;
  int64_t records_per_file = 0;    // mean records unpacked per file
  int64_t bytes_per_record = 0;    // mean payload bytes per record
  // Map
  double cpu_cost_per_element_us = 0.0;
  double byte_ratio = 1.0;                // output bytes / input bytes
  int64_t input_output_ratio = 1;         // elements out per element in
  bool is_random = false;
  int64_t udf_internal_parallelism = 1;   // extra workers per nominal unit
  // Filter
  double keep_probability = 1.0;
  // Batch / Shuffle / Prefetch buffers
  int64_t batch_size = 0;
  int64_t buffer_size = 0;
  // Repeat / Take
  int64_t count = 0;

  friend bool operator==(const OperatorParams&, const OperatorParams&) = default;
};

struct OperatorNode {
  std::string name;
  OperatorKind kind = OperatorKind::kSource;
  std::vector<std::string> children;
  OperatorParams params;
  std::optional<int64_t> tunable_parallelism;

  friend bool operator==(const OperatorNode&, const OperatorNode&) = default;
};

struct PipelineSpec {
  std::string root_id;
  std::vector<OperatorNode> nodes;

  const OperatorNode* find(const std::string& name) const {
    for (const auto& n : nodes)
      if (n.name == name) return &n;
    return nullptr;
  }
  OperatorNode* find(const std::string& name) {
    for (auto& n : nodes)
      if (n.name == name) return &n;
    return nullptr;
  }

  // Parent of `name`, or nullptr for the root / unknown nodes.
  const OperatorNode* parent_of(const std::string& name) const {
    for (const auto& n : nodes)
      for (const auto& c : n.children)
        if (c == name) return &n;
    return nullptr;
  }

  friend bool operator==(const PipelineSpec&, const PipelineSpec&) = default;
};

struct ValidationResult {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

inline bool kind_may_be_tunable(OperatorKind kind) {
  return kind == OperatorKind::kMap || kind == OperatorKind::kInterleave ||
         kind == OperatorKind::kSource;
}

// Checks every structural and parameter invariant. Violations are data, not
// faults: the spec is never mutated and nothing throws.
inline ValidationResult validate_spec(const PipelineSpec& spec) {
  ValidationResult result;
  auto fail = [&](const std::string& msg) { result.violations.push_back(msg); };

  if (spec.nodes.empty()) {
    fail("pipeline has no nodes");
    return result;
  }

  std::map<std::string, const OperatorNode*> by_name;
  for (const auto& n : spec.nodes) {
    if (n.name.empty()) fail("node with empty name");
    if (!by_name.emplace(n.name, &n).second)
      fail("duplicate node name: " + n.name);
  }
  if (by_name.find(spec.root_id) == by_name.end()) {
    fail("root node not found: " + spec.root_id);
    return result;
  }

  // Tree shape: every node except the root has exactly one parent.
  std::map<std::string, int> parent_count;
  for (const auto& n : spec.nodes) {
    for (const auto& c : n.children) {
      if (by_name.find(c) == by_name.end())
        fail("node " + n.name + " references unknown child: " + c);
      else
        parent_count[c]++;
    }
  }
  for (const auto& n : spec.nodes) {
    const int parents = parent_count.count(n.name) ? parent_count.at(n.name) : 0;
    if (n.name == spec.root_id) {
      if (parents != 0) fail("root node " + n.name + " has a parent");
    } else if (parents == 0) {
      fail("node " + n.name + " is unreachable (no parent)");
    } else if (parents > 1) {
      fail("node " + n.name + " has multiple parents");
    }
  }

  // Reachability from the root (cycles leave nodes unreached or re-reached).
  std::set<std::string> seen;
  std::vector<const OperatorNode*> stack = {by_name.at(spec.root_id)};
  while (!stack.empty()) {
    const OperatorNode* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n->name).second) {
      fail("cycle detected at node " + n->name);
      break;
    }
    for (const auto& c : n->children)
      if (by_name.count(c)) stack.push_back(by_name.at(c));
  }

  for (const auto& n : spec.nodes) {
    const size_t expected_children = n.kind == OperatorKind::kSource ? 0 : 1;
    if (n.children.size() != expected_children)
      fail("node " + n.name + " (" + to_string(n.kind) + ") must have " +
           std::to_string(expected_children) + " children, has " +
           std::to_string(n.children.size()));

    const auto& p = n.params;
    switch (n.kind) {
      case OperatorKind::kSource:
        if (p.store_id.empty()) fail("source " + n.name + " has empty store_id");
        if (p.records_per_file < 1)
          fail("source " + n.name + " records_per_file must be >= 1");
        if (p.bytes_per_record < 1)
          fail("source " + n.name + " bytes_per_record must be >= 1");
        break;
      case OperatorKind::kInterleave:
        if (p.count < 1) fail("interleave " + n.name + " cycle length must be >= 1");
        break;
      case OperatorKind::kMap:
        if (p.byte_ratio <= 0.0) fail("map " + n.name + " byte_ratio must be > 0");
        if (p.cpu_cost_per_element_us < 0.0)
          fail("map " + n.name + " cpu_cost_per_element must be >= 0");
        if (p.input_output_ratio < 1)
          fail("map " + n.name + " input_output_ratio must be >= 1");
        if (p.udf_internal_parallelism < 1)
          fail("map " + n.name + " udf_internal_parallelism must be >= 1");
        break;
      case OperatorKind::kFilter:
        if (p.keep_probability < 0.0 || p.keep_probability > 1.0)
          fail("filter " + n.name + " keep_probability must be in [0,1]");
        if (p.cpu_cost_per_element_us < 0.0)
          fail("filter " + n.name + " cpu_cost_per_element must be >= 0");
        break;
      case OperatorKind::kBatch:
        if (p.batch_size < 1) fail("batch " + n.name + " batch_size must be >= 1");
        break;
      case OperatorKind::kShuffle:
        if (p.buffer_size < 1) fail("shuffle " + n.name + " buffer_size must be >= 1");
        break;
      case OperatorKind::kRepeat:
        if (p.count < 1 && p.count != kRepeatInfinite)
          fail("repeat " + n.name + " count must be a positive integer or infinite");
        break;
      case OperatorKind::kPrefetch:
        if (p.buffer_size < 1) fail("prefetch " + n.name + " buffer_size must be >= 1");
        break;
      case OperatorKind::kTake:
        if (p.count < 0) fail("take " + n.name + " count must be >= 0");
        break;
      case OperatorKind::kCache:
        break;
    }

    if (n.tunable_parallelism.has_value()) {
      if (!kind_may_be_tunable(n.kind))
        fail("sequential operator has parallelism knob: " + n.name);
      else if (*n.tunable_parallelism < 1)
        fail("node " + n.name + " parallelism must be >= 1");
    }
  }

  // A source knob is only meaningful when an interleave fans the source out.
  for (const auto& n : spec.nodes) {
    if (n.kind != OperatorKind::kSource || !n.tunable_parallelism.has_value())
      continue;
    bool under_interleave = false;
    const OperatorNode* cur = spec.parent_of(n.name);
    while (cur != nullptr) {
      if (cur->kind == OperatorKind::kInterleave) {
        under_interleave = true;
        break;
      }
      cur = spec.parent_of(cur->name);
    }
    if (!under_interleave)
      fail("source " + n.name + " has a parallelism knob but is not read via interleave");
  }

  return result;
}

// Chain order from root to leaf (chains are the supported topology; interleave
// fan-out happens at instantiation, not in the spec graph).
inline std::vector<const OperatorNode*> chain_from_root(const PipelineSpec& spec) {
  std::vector<const OperatorNode*> chain;
  const OperatorNode* cur = spec.find(spec.root_id);
  while (cur != nullptr) {
    chain.push_back(cur);
    cur = cur->children.empty() ? nullptr : spec.find(cur->children.front());
  }
  return chain;
}

// ---------------------------------------------------------------------------
// JSON wire format:
//   {"root": name, "nodes": [{"name","kind","children":[...],
//                             "params":{...}, "parallelism": int?}]}

inline nlohmann::json params_to_json(OperatorKind kind, const OperatorParams& p) {
  nlohmann::json j = nlohmann::json::object();
  switch (kind) {
    case OperatorKind::kSource:
      j["store_id"] = p.store_id;
      j["records_per_file"] = p.records_per_file;
      j["bytes_per_record"] = p.bytes_per_record;
      break;
    case OperatorKind::kInterleave:
      j["cycle_length"] = p.count;
      break;
    case OperatorKind::kMap:
      j["cpu_cost_per_element"] = p.cpu_cost_per_element_us;
      j["byte_ratio"] = p.byte_ratio;
      j["input_output_ratio"] = p.input_output_ratio;
      j["is_random"] = p.is_random;
      j["udf_internal_parallelism"] = p.udf_internal_parallelism;
      break;
    case OperatorKind::kFilter:
      j["keep_probability"] = p.keep_probability;
      j["cpu_cost_per_element"] = p.cpu_cost_per_element_us;
      break;
    case OperatorKind::kBatch:
      j["batch_size"] = p.batch_size;
      break;
    case OperatorKind::kShuffle:
      j["buffer_size"] = p.buffer_size;
      break;
    case OperatorKind::kRepeat:
      if (p.count == kRepeatInfinite)
        j["count"] = "infinite";
      else
        j["count"] = p.count;
      break;
    case OperatorKind::kPrefetch:
      j["buffer_size"] = p.buffer_size;
      break;
    case OperatorKind::kTake:
      j["count"] = p.count;
      break;
    case OperatorKind::kCache:
      break;
  }
  return j;
}

inline OperatorParams params_from_json(OperatorKind kind, const nlohmann::json& j) {
  OperatorParams p;
  switch (kind) {
    case OperatorKind::kSource:
      p.store_id = j.at("store_id").get<std::string>();
      p.records_per_file = j.at("records_per_file").get<int64_t>();
      p.bytes_per_record = j.at("bytes_per_record").get<int64_t>();
      break;
    case OperatorKind::kInterleave:
      p.count = j.at("cycle_length").get<int64_t>();
      break;
    case OperatorKind::kMap:
      p.cpu_cost_per_element_us = j.at("cpu_cost_per_element").get<double>();
      p.byte_ratio = j.at("byte_ratio").get<double>();
      p.input_output_ratio = j.value("input_output_ratio", int64_t{1});
      p.is_random = j.value("is_random", false);
      p.udf_internal_parallelism = j.value("udf_internal_parallelism", int64_t{1});
      break;
    case OperatorKind::kFilter:
      p.keep_probability = j.at("keep_probability").get<double>();
      p.cpu_cost_per_element_us = j.value("cpu_cost_per_element", 0.0);
      break;
    case OperatorKind::kBatch:
      p.batch_size = j.at("batch_size").get<int64_t>();
      break;
    case OperatorKind::kShuffle:
      p.buffer_size = j.at("buffer_size").get<int64_t>();
      break;
    case OperatorKind::kRepeat:
      if (j.at("count").is_string() && j.at("count").get<std::string>() == "infinite")
        p.count = kRepeatInfinite;
      else
        p.count = j.at("count").get<int64_t>();
      break;
    case OperatorKind::kPrefetch:
      p.buffer_size = j.at("buffer_size").get<int64_t>();
      break;
    case OperatorKind::kTake:
      p.count = j.at("count").get<int64_t>();
      break;
    case OperatorKind::kCache:
      break;
  }
  return p;
}

inline nlohmann::json spec_to_json(const PipelineSpec& spec) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : spec.nodes) {
    nlohmann::json jn;
    jn["name"] = n.name;
    jn["kind"] = to_string(n.kind);
    jn["children"] = n.children;
    jn["params"] = params_to_json(n.kind, n.params);
    if (n.tunable_parallelism.has_value())
      jn["parallelism"] = *n.tunable_parallelism;
    nodes.push_back(std::move(jn));
  }
  return nlohmann::json{{"root", spec.root_id}, {"nodes", std::move(nodes)}};
}

inline PipelineSpec spec_from_json(const nlohmann::json& j) {
  PipelineSpec spec;
  spec.root_id = j.at("root").get<std::string>();
  for (const auto& jn : j.at("nodes")) {
    OperatorNode n;
    n.name = jn.at("name").get<std::string>();
    const auto kind_str = jn.at("kind").get<std::string>();
    const auto kind = kind_from_string(kind_str);
    if (!kind.has_value())
      throw std::runtime_error("unknown node kind: " + kind_str);
    n.kind = *kind;
    if (jn.contains("children"))
      n.children = jn.at("children").get<std::vector<std::string>>();
    n.params = params_from_json(n.kind, jn.value("params", nlohmann::json::object()));
    if (jn.contains("parallelism") && !jn.at("parallelism").is_null())
      n.tunable_parallelism = jn.at("parallelism").get<int64_t>();
    spec.nodes.push_back(std::move(n));
  }
  return spec;
}

}  // namespace pipetune
