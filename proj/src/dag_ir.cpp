#include "dagmesh/dag_ir.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <queue>
#include <sstream>

#include "dagmesh/catalog.hpp"
#include "json.hpp"

namespace dagmesh {

using nlohmann::json;

namespace {

std::string normalize(std::string_view text) {
  std::string out;
  for (char ch : text)
    if (std::isalnum(static_cast<unsigned char>(ch))) out.push_back(static_cast<char>(std::tolower(ch)));
  return out;
}

struct OpClassName {
  OpClass cls;
  std::string_view name;
};

constexpr OpClassName kOpClassNames[] = {
    {OpClass::Placeholder, "placeholder"}, {OpClass::Variable, "variable"},
    {OpClass::Conv, "conv"},               {OpClass::Add, "add"},
    {OpClass::Multiply, "multiply"},       {OpClass::Pool, "pool"},
    {OpClass::Concat, "concat"},           {OpClass::Linear, "linear"},
    {OpClass::Matmul, "matmul"},           {OpClass::Softmax, "softmax"},
    {OpClass::Gelu, "gelu"},               {OpClass::CrossEntropy, "cross_entropy"},
    {OpClass::Embedding, "embedding"},     {OpClass::AttentionBlock, "attention_block"},
    {OpClass::FfnBlock, "ffn_block"},
};

}  // namespace

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Placeholder: return "Placeholder";
    case OpKind::Variable: return "Variable";
    case OpKind::ParametricOp: return "ParametricOp";
    case OpKind::NonParametricOp: return "NonParametricOp";
    case OpKind::LossFunction: return "LossFunction";
  }
  return "?";
}

std::string_view to_string(OpClass op_class) {
  for (const auto& e : kOpClassNames)
    if (e.cls == op_class) return e.name;
  return "?";
}

OpKind parse_op_kind(std::string_view text) {
  const std::string n = normalize(text);
  if (n == "placeholder") return OpKind::Placeholder;
  if (n == "variable") return OpKind::Variable;
  if (n == "parametricop" || n == "parametric") return OpKind::ParametricOp;
  if (n == "nonparametricop" || n == "nonparametric") return OpKind::NonParametricOp;
  if (n == "lossfunction" || n == "loss") return OpKind::LossFunction;
  throw GraphError("unknown node type '" + std::string(text) + "'");
}

OpClass parse_op_class(std::string_view text) {
  const std::string n = normalize(text);
  for (const auto& e : kOpClassNames)
    if (normalize(e.name) == n) return e.cls;
  throw GraphError("unknown op_class '" + std::string(text) + "'");
}

double OpNode::kwarg(std::string_view key, double fallback) const {
  auto it = kwargs.find(std::string(key));
  return it == kwargs.end() ? fallback : it->second;
}

// ---------------------------------------------------------------------------
// Validation

namespace {

using NodeMap = std::map<std::string, OpNode, std::less<>>;

void check_edges(const NodeMap& nodes) {
  for (const auto& [name, n] : nodes) {
    std::set<std::string> seen;
    for (const auto& u : n.users) {
      if (!seen.insert(u).second) throw GraphError(name + ": duplicate user '" + u + "'");
      if (!nodes.contains(u)) throw GraphError(name + ": dangling user reference '" + u + "'");
    }
    for (const auto& a : n.args)
      if (!nodes.contains(a)) throw GraphError(name + ": dangling arg reference '" + a + "'");
  }
  // x in args(y)  <=>  y in users(x)
  for (const auto& [name, n] : nodes) {
    for (const auto& a : n.args) {
      const auto& users = nodes.find(a)->second.users;
      if (std::find(users.begin(), users.end(), name) == users.end())
        throw GraphError("edge inconsistency: " + name + " lists " + a + " in args but " + a +
                         " does not list " + name + " in users");
    }
    for (const auto& u : n.users) {
      const auto& args = nodes.find(u)->second.args;
      if (std::find(args.begin(), args.end(), name) == args.end())
        throw GraphError("edge inconsistency: " + name + " lists " + u + " in users but " + u +
                         " does not list " + name + " in args");
    }
  }
}

void check_kinds(const NodeMap& nodes) {
  for (const auto& [name, n] : nodes) {
    const bool leaf_class = n.op_class == OpClass::Placeholder || n.op_class == OpClass::Variable;
    if (n.is_leaf()) {
      if (!n.args.empty()) throw GraphError(name + ": leaf node must not have args");
      const OpClass want = n.kind == OpKind::Placeholder ? OpClass::Placeholder : OpClass::Variable;
      if (n.op_class != want)
        throw GraphError(name + ": " + std::string(to_string(n.kind)) + " must use op_class '" +
                         std::string(to_string(want)) + "'");
      if (n.output_shape.empty()) throw GraphError(name + ": leaf node needs a declared shape");
      continue;
    }
    if (leaf_class) throw GraphError(name + ": op_class '" + std::string(to_string(n.op_class)) +
                                     "' requires a leaf type");
    if (n.args.empty()) throw GraphError(name + ": args must be nonempty for non-leaf nodes");
    const int arity = catalog::arity(n.op_class);
    const auto nargs = static_cast<int>(n.args.size());
    if ((arity > 0 && nargs != arity) || (arity == -2 && nargs > 2))
      throw GraphError(name + ": wrong number of args for " + std::string(to_string(n.op_class)));
    if (n.kind == OpKind::LossFunction) {
      if (!n.users.empty()) throw GraphError(name + ": loss function must be a sink");
      if (n.op_class != OpClass::CrossEntropy) throw GraphError(name + ": loss function must be cross_entropy");
    } else if (n.op_class == OpClass::CrossEntropy) {
      throw GraphError(name + ": cross_entropy must be typed LossFunction");
    }
    const bool parametric = catalog::has_parameters(n.op_class);
    if (parametric && n.kind != OpKind::ParametricOp)
      throw GraphError(name + ": op_class '" + std::string(to_string(n.op_class)) + "' has parameters; type must be ParametricOp");
    if (!parametric && n.kind == OpKind::ParametricOp)
      throw GraphError(name + ": op_class '" + std::string(to_string(n.op_class)) + "' has no parameters");
  }
}

std::string describe_cycle(const NodeMap& nodes) {
  std::map<std::string, int, std::less<>> color;  // 0 white, 1 grey, 2 black
  std::vector<std::string> stack;
  std::string found;
  std::function<bool(const std::string&)> dfs = [&](const std::string& v) {
    color[v] = 1;
    stack.push_back(v);
    auto users = nodes.find(v)->second.users;
    std::sort(users.begin(), users.end());
    for (const auto& u : users) {
      if (color[u] == 1) {
        auto it = std::find(stack.begin(), stack.end(), u);
        std::ostringstream os;
        for (; it != stack.end(); ++it) os << *it << " -> ";
        os << u;
        found = os.str();
        return true;
      }
      if (color[u] == 0 && dfs(u)) return true;
    }
    stack.pop_back();
    color[v] = 2;
    return false;
  };
  for (const auto& [name, n] : nodes)
    if (color[name] == 0 && dfs(name)) return found;
  return "?";
}

std::vector<std::string> topo_sort(const NodeMap& nodes) {
  std::map<std::string, std::size_t, std::less<>> indegree;
  for (const auto& [name, n] : nodes) indegree[name] = n.args.size();
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [name, d] : indegree)
    if (d == 0) ready.push(name);
  std::vector<std::string> order;
  while (!ready.empty()) {
    std::string v = ready.top();
    ready.pop();
    order.push_back(v);
    for (const auto& u : nodes.find(v)->second.users)
      if (--indegree[u] == 0) ready.push(u);
  }
  if (order.size() != nodes.size()) throw GraphError("cycle detected: " + describe_cycle(nodes));
  return order;
}

void check_reachability(const NodeMap& nodes, const std::vector<std::string>& topo,
                        const GraphMeta& meta) {
  std::set<std::string> outputs(meta.outputs.begin(), meta.outputs.end());
  for (const auto& o : outputs)
    if (!nodes.contains(o)) throw GraphError("meta.outputs references unknown node '" + o + "'");
  std::map<std::string, bool, std::less<>> reaches;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const OpNode& n = nodes.find(*it)->second;
    bool r = n.kind == OpKind::LossFunction || outputs.contains(n.name);
    for (const auto& u : n.users) r = r || reaches[u];
    reaches[n.name] = r;
    if (!n.users.empty() && !r)
      throw GraphError(n.name + ": does not reach any loss function or declared output");
  }
}

}  // namespace

Graph Graph::build(std::vector<OpNode> nodes, GraphMeta meta) {
  Graph g;
  g.meta_ = std::move(meta);
  for (auto& n : nodes) {
    if (n.name.empty()) throw GraphError("node with empty name");
    const std::string name = n.name;
    if (!g.nodes_.emplace(name, std::move(n)).second) throw GraphError("duplicate node name '" + name + "'");
  }
  check_edges(g.nodes_);
  check_kinds(g.nodes_);
  g.topo_ = topo_sort(g.nodes_);
  for (std::size_t i = 0; i < g.topo_.size(); ++i) g.topo_index_[g.topo_[i]] = i;

  for (const auto& name : g.topo_) {
    OpNode& n = g.nodes_.find(name)->second;
    if (n.is_leaf()) {
      n.input_shapes.clear();
      numel(n.output_shape);
      continue;
    }
    n.input_shapes.clear();
    for (const auto& a : n.args) n.input_shapes.push_back(g.nodes_.find(a)->second.output_shape);
    Shape inferred;
    try {
      inferred = catalog::infer_output_shape(n.op_class, n.input_shapes, n.kwargs);
    } catch (const GraphError& e) {
      throw GraphError(name + ": " + e.what());
    }
    if (!n.output_shape.empty() && n.output_shape != inferred)
      throw GraphError(name + ": declared shape " + shape_to_string(n.output_shape) +
                       " does not match inferred " + shape_to_string(inferred));
    n.output_shape = std::move(inferred);
  }
  check_reachability(g.nodes_, g.topo_, g.meta_);
  return g;
}

const OpNode& Graph::node(std::string_view name) const {
  auto it = nodes_.find(name);
  if (it == nodes_.end()) throw GraphError("unknown node '" + std::string(name) + "'");
  return it->second;
}

bool Graph::contains(std::string_view name) const { return nodes_.find(name) != nodes_.end(); }

std::size_t Graph::topo_index(std::string_view name) const {
  auto it = topo_index_.find(name);
  if (it == topo_index_.end()) throw GraphError("unknown node '" + std::string(name) + "'");
  return it->second;
}

std::size_t Graph::edge_count() const {
  std::size_t e = 0;
  for (const auto& [_, n] : nodes_) e += n.args.size();
  return e;
}

// ---------------------------------------------------------------------------
// Job-definition file

namespace {

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw GraphError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw GraphError(where + ": field '" + key + "' has the wrong type");
  }
}

OptimizerConfig parse_optimizer(const json& j, const std::string& where) {
  if (!j.is_object()) throw GraphError(where + ": optimizer must be an object");
  OptimizerConfig cfg;
  cfg.type = j.value("type", std::string("sgd"));
  if (cfg.type != "sgd") throw GraphError(where + ": unsupported optimizer '" + cfg.type + "'");
  cfg.learning_rate = field<double>(j, "lr", where + ".optimizer");
  return cfg;
}

json optimizer_json(const OptimizerConfig& cfg) { return {{"type", cfg.type}, {"lr", cfg.learning_rate}}; }

}  // namespace

Graph parse_job_definition(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw GraphError(std::string("job definition is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw GraphError("job definition must be a JSON object");
  if (!doc.contains("nodes") || !doc["nodes"].is_array()) throw GraphError("job definition needs a 'nodes' array");

  GraphMeta meta;
  if (doc.contains("meta")) {
    const json& m = doc["meta"];
    if (!m.is_object()) throw GraphError("'meta' must be an object");
    meta.name = m.value("name", std::string());
    meta.batch_size = m.value("batch_size", std::int64_t{1});
    meta.seq_len = m.value("seq_len", std::int64_t{1});
    if (m.contains("outputs")) meta.outputs = field<std::vector<std::string>>(m, "outputs", "meta");
    if (m.contains("optimizer")) meta.optimizer = parse_optimizer(m["optimizer"], "meta");
  }

  std::vector<OpNode> nodes;
  std::size_t index = 0;
  for (const json& e : doc["nodes"]) {
    const std::string where = "nodes[" + std::to_string(index++) + "]";
    if (!e.is_object()) throw GraphError(where + ": must be an object");
    OpNode n;
    n.name = field<std::string>(e, "name", where);
    const std::string w = where + " (" + n.name + ")";
    n.kind = parse_op_kind(field<std::string>(e, "type", w));
    if (e.contains("op_class")) {
      n.op_class = parse_op_class(field<std::string>(e, "op_class", w));
    } else if (n.is_leaf()) {
      n.op_class = n.kind == OpKind::Placeholder ? OpClass::Placeholder : OpClass::Variable;
    } else {
      throw GraphError(w + ": missing field 'op_class'");
    }
    if (e.contains("args")) n.args = field<std::vector<std::string>>(e, "args", w);
    if (e.contains("users")) n.users = field<std::vector<std::string>>(e, "users", w);
    if (e.contains("kwargs")) {
      const json& kw = e["kwargs"];
      if (!kw.is_object()) throw GraphError(w + ": kwargs must be an object");
      for (const auto& [k, v] : kw.items()) {
        if (!v.is_number()) throw GraphError(w + ": kwarg '" + k + "' must be a scalar number");
        n.kwargs[k] = v.get<double>();
      }
    }
    if (e.contains("shape")) n.output_shape = field<Shape>(e, "shape", w);
    if (e.contains("stage")) n.stage = field<int>(e, "stage", w);
    if (e.contains("optimizer")) n.optimizer = parse_optimizer(e["optimizer"], w);
    nodes.push_back(std::move(n));
  }
  return Graph::build(std::move(nodes), std::move(meta));
}

Graph load_job_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open job file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_job_definition(buf.str());
}

namespace {

json node_json(const OpNode& n) {
  json kw = json::object();
  for (const auto& [k, v] : n.kwargs) kw[k] = v;
  json e = {{"name", n.name},
            {"type", std::string(to_string(n.kind))},
            {"op_class", std::string(to_string(n.op_class))},
            {"args", n.args},
            {"kwargs", kw},
            {"users", n.users},
            {"shape", n.output_shape}};
  if (n.stage) e["stage"] = *n.stage;
  if (n.optimizer) e["optimizer"] = optimizer_json(*n.optimizer);
  return e;
}

}  // namespace

std::string serialize_node(const OpNode& n) { return node_json(n).dump(); }

std::string serialize_job_definition(const Graph& g) {
  json meta = {{"name", g.meta().name},
               {"batch_size", g.meta().batch_size},
               {"seq_len", g.meta().seq_len},
               {"outputs", g.meta().outputs}};
  if (g.meta().optimizer) meta["optimizer"] = optimizer_json(*g.meta().optimizer);
  json nodes = json::array();
  for (const auto& name : g.topo_order()) nodes.push_back(node_json(g.node(name)));
  return json{{"meta", meta}, {"nodes", nodes}}.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Edges, backward view, decomposition

std::vector<Edge> forward_edges(const Graph& g) {
  std::vector<Edge> edges;
  for (const auto& [name, n] : g.nodes())
    for (const auto& a : n.args) edges.push_back({a, name});
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

bool BackwardView::contains(std::string_view from, std::string_view to) const {
  return std::any_of(edges.begin(), edges.end(), [&](const Edge& e) { return e.from == from && e.to == to; });
}

BackwardView derive_backward_view(const Graph& g) {
  BackwardView view;
  for (const auto& fp : forward_edges(g))
    if (g.node(fp.from).kind != OpKind::Placeholder) view.edges.push_back({fp.to, fp.from});
  std::sort(view.edges.begin(), view.edges.end());
  return view;
}

std::vector<SubGraph> decompose(const Graph& g, const Placement& placement) {
  for (const auto& [name, peer] : placement)
    if (!g.contains(name)) throw GraphError("placement references unknown node '" + name + "'");
  std::map<PeerId, SubGraph> cells;
  for (const auto& [name, n] : g.nodes()) {
    auto it = placement.find(name);
    if (it == placement.end()) throw GraphError("node '" + name + "' is not covered by the placement");
    auto& cell = cells[it->second];
    cell.assigned_peer = it->second;
    cell.nodes.insert(name);
  }
  std::vector<SubGraph> out;
  int next_id = 1;
  for (auto& [peer, cell] : cells) {
    cell.id = next_id++;
    for (const auto& name : cell.nodes) {
      const OpNode& n = g.node(name);
      if (n.kind == OpKind::Placeholder) cell.outer_required.insert(name);
      for (const auto& a : n.args)
        if (!cell.nodes.contains(a)) cell.outer_required.insert(a);
      for (const auto& u : n.users) {
        const PeerId up = placement.find(u)->second;
        if (up == peer) {
          cell.inner_required.insert(name);
        } else {
          cell.outwards.insert(name);
          cell.compnode_users.insert(up);
        }
      }
    }
    out.push_back(std::move(cell));
  }
  return out;
}

std::set<PeerId> node_compnode_users(const Graph& g, const Placement& placement, std::string_view name) {
  const auto self = placement.find(name);
  if (self == placement.end()) throw GraphError("node '" + std::string(name) + "' is not placed");
  std::set<PeerId> peers;
  for (const auto& u : g.node(name).users) {
    auto it = placement.find(u);
    if (it == placement.end()) throw GraphError("node '" + u + "' is not placed");
    if (it->second != self->second) peers.insert(it->second);
  }
  return peers;
}

double op_flops(const OpNode& n) {
  double total = 0.0;
  for (const auto& c : catalog::expand(n)) total += catalog::primitive_flops(c);
  return total;
}

}  // namespace dagmesh
