#pragma once

// Reference executor: a peer runs the FP, BP and Update tasks of its sub-graph
// on real tensors. train_centralized is the single-process oracle.
//
// Arithmetic order is fixed so that distributed and centralized runs agree
// bit for bit: nodes run in topological order, the gradient contribution of
// user u to arg a is summed over arg positions in index order, and a node's
// output gradient sums its users' contributions in ascending user name.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dagmesh/dag_ir.hpp"
#include "dagmesh/ops.hpp"

namespace dagmesh {

class ExecutionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters of every parametric op and variable, by node name.
using ModelParams = std::map<std::string, ops::Params, std::less<>>;
using ValueMap = std::map<std::string, Tensor, std::less<>>;

ModelParams init_model(const Graph& g, std::uint64_t seed);

/// Seeded placeholder values for one batch. Token inputs of an embedding get
/// integer ids, label inputs of a loss get one-hot rows, anything else is
/// uniform in [-1, 1).
ValueMap make_batch(const Graph& g, std::uint64_t seed, std::int64_t batch);

/// Per-node optimizer override, else the job-wide one. Throws ExecutionError
/// when a node with parameters has neither.
double learning_rate(const Graph& g, const OpNode& n);

/// p <- p - lr * g for every tensor in `p`.
void sgd_update(ops::Params& p, const ops::Params& grads, double lr);

/// Sum of the loss-node values, in ascending node name.
double total_loss(const std::map<std::string, double>& losses);

struct CentralizedRun {
  ModelParams params;
  std::vector<double> losses;  // per batch, before the update
};

/// Single-process training: FP, BP and one SGD step per batch.
CentralizedRun train_centralized(const Graph& g, ModelParams params, std::int64_t batches, std::uint64_t seed);

/// Single-process forward passes only.
std::vector<double> infer_centralized(const Graph& g, const ModelParams& params, std::int64_t batches,
                                      std::uint64_t seed);

struct ValueMessage {
  std::int64_t batch;
  std::string node;
  PeerId to;
  Tensor value;
};

/// Gradient of the loss w.r.t. `node`'s output, contributed through `user`.
struct GradMessage {
  std::int64_t batch;
  std::string node;
  std::string user;
  PeerId to;
  Tensor grad;
};

struct TaskResult {
  std::vector<std::string> fired;  // nodes executed, in order
  double flops = 0.0;
  std::vector<ValueMessage> values;
  std::vector<GradMessage> grads;
};

class PeerExecutor {
 public:
  PeerExecutor(const Graph& g, SubGraph cell, Placement placement);

  const SubGraph& cell() const { return cell_; }
  PeerId peer() const { return cell_.assigned_peer; }

  /// Installs parameters for the local nodes; others in `params` are ignored.
  void load_params(const ModelParams& params);
  ModelParams local_params() const;
  /// Local nodes that carry parameters.
  std::vector<std::string> parametric_nodes() const;

  /// Starts a batch with the locally hosted placeholder feeds.
  void begin_batch(std::int64_t batch, const ValueMap& feeds);
  void receive_value(std::int64_t batch, const std::string& node, Tensor value);
  void receive_grad(std::int64_t batch, const std::string& node, const std::string& user, Tensor grad);

  /// Runs every FP node whose args are available; outputs with remote users
  /// are emitted once per destination peer.
  TaskResult fp_execute(std::int64_t batch);
  /// Runs every BP node whose user gradients are complete; gradients for
  /// remote args are emitted to the peer hosting the arg.
  TaskResult bp_execute(std::int64_t batch);
  /// Applies the optimizer with the gradients of `batch` and forgets the batch.
  void update_execute(std::int64_t batch);
  void drop_batch(std::int64_t batch);
  void drop_all_batches();

  bool fp_complete(std::int64_t batch) const;
  bool bp_complete(std::int64_t batch) const;
  /// Values of local loss nodes computed so far for `batch`.
  std::map<std::string, double> losses(std::int64_t batch) const;
  /// Cached FP value of a local node, if computed.
  const Tensor* value(std::int64_t batch, std::string_view node) const;

 private:
  struct BatchState {
    ValueMap values;
    std::set<std::string> fp_done;
    std::set<std::string> bp_done;
    std::set<std::string> sent;
    std::map<std::pair<std::string, std::string>, Tensor> contributions;  // (node, user)
    ModelParams param_grads;
  };

  BatchState& state(std::int64_t batch);
  const BatchState* find_state(std::int64_t batch) const;
  bool local(const std::string& name) const { return cell_.nodes.contains(name); }

  const Graph* graph_;
  SubGraph cell_;
  Placement placement_;
  std::vector<std::string> order_;  // local nodes, topological
  ModelParams params_;
  std::map<std::int64_t, BatchState> batches_;
};

}  // namespace dagmesh
