#pragma once

// Operator DAG: job-definition parsing, validation, backward-pass edges and
// decomposition into per-peer sub-graphs.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dagmesh/ids.hpp"
#include "dagmesh/tensor.hpp"

namespace dagmesh {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind { Placeholder, Variable, ParametricOp, NonParametricOp, LossFunction };

enum class OpClass {
  Placeholder,
  Variable,
  Conv,
  Add,
  Multiply,
  Pool,
  Concat,
  Linear,
  Matmul,
  Softmax,
  Gelu,
  CrossEntropy,
  Embedding,
  AttentionBlock,
  FfnBlock,
};

std::string_view to_string(OpKind kind);
std::string_view to_string(OpClass op_class);
/// Accepts the Table-2 spellings ("Parametric OP", "Loss Function", ...).
OpKind parse_op_kind(std::string_view text);
OpClass parse_op_class(std::string_view text);

using Kwargs = std::map<std::string, double>;

struct OptimizerConfig {
  std::string type = "sgd";
  double learning_rate = 0.0;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct OpNode {
  std::string name;
  OpKind kind = OpKind::NonParametricOp;
  OpClass op_class = OpClass::Add;
  std::vector<std::string> users;  // FP successors
  std::vector<std::string> args;   // FP data inputs, in operand order
  Kwargs kwargs;
  std::vector<Shape> input_shapes;
  Shape output_shape;
  std::optional<int> stage;  // pipeline cell index (1-based), optional
  std::optional<OptimizerConfig> optimizer;

  bool is_leaf() const { return kind == OpKind::Placeholder || kind == OpKind::Variable; }
  double kwarg(std::string_view key, double fallback) const;

  friend bool operator==(const OpNode&, const OpNode&) = default;
};

struct GraphMeta {
  std::string name;
  std::int64_t batch_size = 1;
  std::int64_t seq_len = 1;
  std::vector<std::string> outputs;
  std::optional<OptimizerConfig> optimizer;

  friend bool operator==(const GraphMeta&, const GraphMeta&) = default;
};

/// Validated, immutable operator DAG.
class Graph {
 public:
  /// Validates the node set and propagates shapes. Throws GraphError.
  static Graph build(std::vector<OpNode> nodes, GraphMeta meta = {});

  const OpNode& node(std::string_view name) const;
  bool contains(std::string_view name) const;
  const std::map<std::string, OpNode, std::less<>>& nodes() const { return nodes_; }
  /// Kahn order, ties broken by lexicographic name.
  const std::vector<std::string>& topo_order() const { return topo_; }
  std::size_t topo_index(std::string_view name) const;
  const GraphMeta& meta() const { return meta_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t edge_count() const;

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.nodes_ == b.nodes_ && a.meta_ == b.meta_;
  }

 private:
  std::map<std::string, OpNode, std::less<>> nodes_;
  std::vector<std::string> topo_;
  std::map<std::string, std::size_t, std::less<>> topo_index_;
  GraphMeta meta_;
};

Graph parse_job_definition(std::string_view text);
Graph load_job_file(const std::filesystem::path& path);
std::string serialize_job_definition(const Graph& g);
/// Compact JSON of a single node entry.
std::string serialize_node(const OpNode& n);

struct Edge {
  std::string from;
  std::string to;

  friend auto operator<=>(const Edge&, const Edge&) = default;
};

std::vector<Edge> forward_edges(const Graph& g);

struct BackwardView {
  std::vector<Edge> edges;  // sorted
  bool contains(std::string_view from, std::string_view to) const;
};

/// BP edge u->v for every FP edge v->u whose source v is not a Placeholder.
BackwardView derive_backward_view(const Graph& g);

using Placement = std::map<std::string, PeerId, std::less<>>;

/// One cell of a decomposition. Sets follow the Table-3 attribute semantics.
struct SubGraph {
  int id = 0;
  PeerId assigned_peer;
  std::set<std::string> nodes;
  std::set<std::string> inner_required;  // local nodes consumed by a local user
  std::set<std::string> outer_required;  // remote args plus locally hosted placeholder feeds
  std::set<std::string> outwards;        // local nodes with at least one remote user
  std::set<PeerId> compnode_users;       // remote peers consuming outputs of this cell

  friend bool operator==(const SubGraph&, const SubGraph&) = default;
};

/// One SubGraph per peer, ordered by peer id and numbered from 1.
std::vector<SubGraph> decompose(const Graph& g, const Placement& placement);

/// Remote peers hosting at least one user of `name`.
std::set<PeerId> node_compnode_users(const Graph& g, const Placement& placement, std::string_view name);

/// FLOPs of one node (matmul = 2mnk, elementwise = 1 per element, macro-ops
/// summed over their expansion).
double op_flops(const OpNode& n);

}  // namespace dagmesh
