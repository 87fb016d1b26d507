#include "dagmesh/executor.hpp"

#include <algorithm>
#include <cmath>

#include "dagmesh/catalog.hpp"
#include "dagmesh/kernels.hpp"

namespace dagmesh {

namespace {

bool carries_params(const OpNode& n) {
  return n.op_class == OpClass::Variable || catalog::has_parameters(n.op_class);
}

std::vector<std::string> sorted_users(const OpNode& n) {
  std::vector<std::string> u = n.users;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  return u;
}

/// Distinct args of n in first-occurrence order.
std::vector<std::string> distinct_args(const OpNode& n) {
  std::vector<std::string> out;
  for (const auto& a : n.args)
    if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
  return out;
}

/// Contribution of n to arg `a`: input gradients summed over the positions of
/// `a` in index order.
Tensor contribution_to(const OpNode& n, const ops::Gradients& g, const std::string& a) {
  Tensor out;
  bool first = true;
  for (std::size_t i = 0; i < n.args.size(); ++i) {
    if (n.args[i] != a) continue;
    if (first) {
      out = g.inputs.at(i);
      first = false;
    } else {
      kernels::active().add(out.data.data(), g.inputs[i].data.data(), out.data.data(), out.size());
    }
  }
  return out;
}

/// dL/d(output of n) from its users' contributions, summed in ascending user name.
template <typename Lookup>
Tensor output_gradient(const OpNode& n, Lookup&& contribution) {
  if (n.kind == OpKind::LossFunction) return Tensor(n.output_shape, std::vector<double>(1, 1.0));
  const auto users = sorted_users(n);
  if (users.empty()) return Tensor(n.output_shape);
  Tensor g = contribution(users[0]);
  for (std::size_t i = 1; i < users.size(); ++i) {
    const Tensor& c = contribution(users[i]);
    kernels::active().add(g.data.data(), c.data.data(), g.data.data(), g.size());
  }
  return g;
}

std::vector<const Tensor*> gather_inputs(const OpNode& n, const ValueMap& values) {
  std::vector<const Tensor*> in;
  for (const auto& a : n.args) {
    auto it = values.find(a);
    if (it == values.end()) throw ExecutionError(n.name + ": missing input value '" + a + "'");
    in.push_back(&it->second);
  }
  return in;
}

const ops::Params& params_of(const ModelParams& p, const OpNode& n) {
  static const ops::Params kNone;
  auto it = p.find(n.name);
  if (it == p.end()) {
    if (carries_params(n)) throw ExecutionError(n.name + ": parameters not loaded");
    return kNone;
  }
  return it->second;
}

}  // namespace

ModelParams init_model(const Graph& g, std::uint64_t seed) {
  ModelParams p;
  for (const auto& [name, n] : g.nodes())
    if (carries_params(n)) p.emplace(name, ops::init_params(n, seed));
  return p;
}

ValueMap make_batch(const Graph& g, std::uint64_t seed, std::int64_t batch) {
  ValueMap out;
  const std::uint64_t base = ops::fnv1a(std::to_string(seed) + "/" + std::to_string(batch));
  for (const auto& [name, n] : g.nodes()) {
    if (n.kind != OpKind::Placeholder) continue;
    ops::Stream rng(ops::fnv1a(name, base));
    Tensor t(n.output_shape);
    const OpNode* embedding = nullptr;
    bool label = false;
    for (const auto& u : n.users) {
      const OpNode& user = g.node(u);
      if (user.op_class == OpClass::Embedding) embedding = &user;
      if (user.op_class == OpClass::CrossEntropy && user.args[0] == name) label = true;
    }
    if (embedding) {
      const double vocab = embedding->kwarg("vocab", 1.0);
      for (auto& v : t.data) v = std::floor(rng.uniform(0.0, vocab));
    } else if (label && !t.shape.empty()) {
      const auto cols = static_cast<std::size_t>(t.shape.back());
      for (std::size_t r = 0; r < t.size() / cols; ++r)
        t.data[r * cols + std::min(cols - 1, static_cast<std::size_t>(rng.uniform(0.0, double(cols))))] = 1.0;
    } else {
      for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

double learning_rate(const Graph& g, const OpNode& n) {
  if (n.optimizer) return n.optimizer->learning_rate;
  if (g.meta().optimizer) return g.meta().optimizer->learning_rate;
  throw ExecutionError(n.name + ": no optimizer configured for a node with parameters");
}

void sgd_update(ops::Params& p, const ops::Params& grads, double lr) {
  for (auto& [key, t] : p) {
    auto it = grads.find(key);
    if (it == grads.end()) throw ExecutionError("missing gradient for parameter '" + key + "'");
    if (it->second.shape != t.shape) throw ExecutionError("gradient shape mismatch for parameter '" + key + "'");
    kernels::active().axpy(-lr, it->second.data.data(), t.data.data(), t.size());
  }
}

double total_loss(const std::map<std::string, double>& losses) {
  double s = 0.0;
  for (const auto& [_, v] : losses) s += v;
  return s;
}

// ---------------------------------------------------------------------------
// Centralized oracle

namespace {

ValueMap forward_all(const Graph& g, const ModelParams& params, ValueMap values) {
  for (const auto& name : g.topo_order()) {
    const OpNode& n = g.node(name);
    if (n.kind == OpKind::Placeholder) continue;
    values[name] = ops::forward(n, gather_inputs(n, values), params_of(params, n));
  }
  return values;
}

double loss_of(const Graph& g, const ValueMap& values) {
  std::map<std::string, double> losses;
  for (const auto& [name, n] : g.nodes())
    if (n.kind == OpKind::LossFunction) losses[name] = values.at(name).data.at(0);
  return total_loss(losses);
}

}  // namespace

CentralizedRun train_centralized(const Graph& g, ModelParams params, std::int64_t batches, std::uint64_t seed) {
  CentralizedRun run;
  for (std::int64_t b = 0; b < batches; ++b) {
    const ValueMap values = forward_all(g, params, make_batch(g, seed, b));
    run.losses.push_back(loss_of(g, values));

    std::map<std::pair<std::string, std::string>, Tensor> contrib;  // (arg, user)
    ModelParams grads;
    const auto& order = g.topo_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const OpNode& n = g.node(*it);
      if (n.kind == OpKind::Placeholder) continue;
      const Tensor gy = output_gradient(n, [&](const std::string& u) -> const Tensor& {
        return contrib.at({n.name, u});
      });
      const ops::Gradients gr = ops::backward(n, gather_inputs(n, values), params_of(params, n), gy);
      for (const auto& a : distinct_args(n))
        if (g.node(a).kind != OpKind::Placeholder) contrib[{a, n.name}] = contribution_to(n, gr, a);
      if (carries_params(n)) grads[n.name] = gr.params;
    }
    for (auto& [name, p] : params) sgd_update(p, grads.at(name), learning_rate(g, g.node(name)));
  }
  run.params = std::move(params);
  return run;
}

std::vector<double> infer_centralized(const Graph& g, const ModelParams& params, std::int64_t batches,
                                      std::uint64_t seed) {
  std::vector<double> losses;
  for (std::int64_t b = 0; b < batches; ++b) losses.push_back(loss_of(g, forward_all(g, params, make_batch(g, seed, b))));
  return losses;
}

// ---------------------------------------------------------------------------
// Peer executor

PeerExecutor::PeerExecutor(const Graph& g, SubGraph cell, Placement placement)
    : graph_(&g), cell_(std::move(cell)), placement_(std::move(placement)) {
  for (const auto& name : g.topo_order())
    if (cell_.nodes.contains(name)) order_.push_back(name);
  for (const auto& name : cell_.nodes)
    if (!g.contains(name)) throw ExecutionError("sub-graph node '" + name + "' is not in the job");
}

void PeerExecutor::load_params(const ModelParams& params) {
  for (const auto& name : order_) {
    const OpNode& n = graph_->node(name);
    if (!carries_params(n)) continue;
    auto it = params.find(name);
    if (it == params.end()) throw ExecutionError(name + ": no parameters supplied");
    params_[name] = it->second;
  }
}

ModelParams PeerExecutor::local_params() const { return params_; }

std::vector<std::string> PeerExecutor::parametric_nodes() const {
  std::vector<std::string> out;
  for (const auto& name : order_)
    if (carries_params(graph_->node(name))) out.push_back(name);
  return out;
}

PeerExecutor::BatchState& PeerExecutor::state(std::int64_t batch) { return batches_[batch]; }

const PeerExecutor::BatchState* PeerExecutor::find_state(std::int64_t batch) const {
  auto it = batches_.find(batch);
  return it == batches_.end() ? nullptr : &it->second;
}

void PeerExecutor::begin_batch(std::int64_t batch, const ValueMap& feeds) {
  BatchState& s = state(batch);
  for (const auto& name : order_) {
    const OpNode& n = graph_->node(name);
    if (n.kind != OpKind::Placeholder) continue;
    auto it = feeds.find(name);
    if (it == feeds.end()) throw ExecutionError(name + ": no feed for hosted placeholder");
    if (it->second.shape != n.output_shape) throw ExecutionError(name + ": feed has the wrong shape");
    s.values[name] = it->second;
    s.fp_done.insert(name);
  }
}

void PeerExecutor::receive_value(std::int64_t batch, const std::string& node, Tensor value) {
  if (!cell_.outer_required.contains(node))
    throw ExecutionError("peer " + to_string(peer()) + " does not consume '" + node + "'");
  if (value.shape != graph_->node(node).output_shape) throw ExecutionError(node + ": received value has the wrong shape");
  state(batch).values[node] = std::move(value);
}

void PeerExecutor::receive_grad(std::int64_t batch, const std::string& node, const std::string& user, Tensor grad) {
  if (!local(node)) throw ExecutionError("peer " + to_string(peer()) + " does not host '" + node + "'");
  state(batch).contributions[{node, user}] = std::move(grad);
}

TaskResult PeerExecutor::fp_execute(std::int64_t batch) {
  TaskResult r;
  BatchState& s = state(batch);
  for (const auto& name : order_) {
    if (s.fp_done.contains(name)) continue;
    const OpNode& n = graph_->node(name);
    if (n.kind == OpKind::Placeholder) continue;  // fed by begin_batch
    const bool ready = std::all_of(n.args.begin(), n.args.end(), [&](const std::string& a) { return s.values.contains(a); });
    if (!ready) continue;
    s.values[name] = ops::forward(n, gather_inputs(n, s.values), params_of(params_, n));
    s.fp_done.insert(name);
    r.fired.push_back(name);
    r.flops += op_flops(n);
  }
  // Outputs leave once per destination, fed placeholders included.
  for (const auto& name : order_) {
    if (!cell_.outwards.contains(name) || !s.fp_done.contains(name) || !s.sent.insert(name).second) continue;
    for (PeerId to : node_compnode_users(*graph_, placement_, name)) r.values.push_back({batch, name, to, s.values[name]});
  }
  return r;
}

TaskResult PeerExecutor::bp_execute(std::int64_t batch) {
  TaskResult r;
  BatchState& s = state(batch);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const std::string& name = *it;
    const OpNode& n = graph_->node(name);
    if (n.kind == OpKind::Placeholder || s.bp_done.contains(name) || !s.fp_done.contains(name)) continue;
    const auto users = sorted_users(n);
    const bool ready = n.kind == OpKind::LossFunction ||
                       std::all_of(users.begin(), users.end(),
                                   [&](const std::string& u) { return s.contributions.contains({name, u}); });
    if (!ready) continue;
    const Tensor gy = output_gradient(n, [&](const std::string& u) -> const Tensor& {
      return s.contributions.at({name, u});
    });
    const ops::Gradients gr = ops::backward(n, gather_inputs(n, s.values), params_of(params_, n), gy);
    for (const auto& a : distinct_args(n)) {
      if (graph_->node(a).kind == OpKind::Placeholder) continue;
      Tensor c = contribution_to(n, gr, a);
      if (local(a))
        s.contributions[{a, name}] = std::move(c);
      else
        r.grads.push_back({batch, a, name, placement_.at(a), std::move(c)});
    }
    if (carries_params(n)) s.param_grads[name] = gr.params;
    s.bp_done.insert(name);
    r.fired.push_back(name);
    r.flops += op_flops(n);
  }
  return r;
}

void PeerExecutor::update_execute(std::int64_t batch) {
  BatchState& s = state(batch);
  for (auto& [name, p] : params_) {
    auto it = s.param_grads.find(name);
    if (it == s.param_grads.end()) throw ExecutionError(name + ": gradients missing at update");
    sgd_update(p, it->second, learning_rate(*graph_, graph_->node(name)));
  }
  batches_.erase(batch);
}

void PeerExecutor::drop_batch(std::int64_t batch) { batches_.erase(batch); }

void PeerExecutor::drop_all_batches() { batches_.clear(); }

bool PeerExecutor::fp_complete(std::int64_t batch) const {
  const BatchState* s = find_state(batch);
  if (!s) return false;
  return std::all_of(order_.begin(), order_.end(), [&](const std::string& n) { return s->fp_done.contains(n); });
}

bool PeerExecutor::bp_complete(std::int64_t batch) const {
  const BatchState* s = find_state(batch);
  if (!s) return false;
  return std::all_of(order_.begin(), order_.end(), [&](const std::string& n) {
    return graph_->node(n).kind == OpKind::Placeholder || s->bp_done.contains(n);
  });
}

std::map<std::string, double> PeerExecutor::losses(std::int64_t batch) const {
  std::map<std::string, double> out;
  const BatchState* s = find_state(batch);
  if (!s) return out;
  for (const auto& name : order_)
    if (graph_->node(name).kind == OpKind::LossFunction && s->values.contains(name))
      out[name] = s->values.at(name).data.at(0);
  return out;
}

const Tensor* PeerExecutor::value(std::int64_t batch, std::string_view node) const {
  const BatchState* s = find_state(batch);
  if (!s) return nullptr;
  auto it = s->values.find(node);
  return it == s->values.end() ? nullptr : &it->second;
}

}  // namespace dagmesh
