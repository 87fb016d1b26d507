#pragma once

// Central-difference gradient oracle for a single op.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dagmesh/catalog.hpp"
#include "dagmesh/ops.hpp"

namespace dagmesh::testing {

struct OpCase {
  std::string label;
  OpClass cls;
  std::vector<Shape> inputs;
  Kwargs kwargs;
  std::vector<bool> differentiable;  // per input; empty means all
};

struct GradCheck {
  std::string label;
  double worst_rel = 0.0;  // max over tensors of max|fd - an| / max|an|
  std::string worst_where;
};

/// Builds a one-op graph so shapes are validated and propagated.
inline OpNode make_op_node(const OpCase& c) {
  std::vector<OpNode> nodes;
  OpNode op;
  op.name = "op";
  op.op_class = c.cls;
  op.kind = c.cls == OpClass::CrossEntropy       ? OpKind::LossFunction
            : catalog::has_parameters(c.cls)     ? OpKind::ParametricOp
                                                 : OpKind::NonParametricOp;
  op.kwargs = c.kwargs;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    OpNode in;
    in.name = "in" + std::to_string(i);
    in.kind = OpKind::Placeholder;
    in.op_class = OpClass::Placeholder;
    in.output_shape = c.inputs[i];
    in.users = {"op"};
    op.args.push_back(in.name);
    nodes.push_back(in);
  }
  nodes.push_back(op);
  GraphMeta meta;
  meta.outputs = {"op"};
  return Graph::build(nodes, meta).node("op");
}

/// Identically-zero gradients (e.g. the key bias under softmax shift
/// invariance) have no relative scale; they are compared absolutely.
inline double rel_error(const std::vector<double>& fd, const std::vector<double>& an) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    diff = std::max(diff, std::abs(fd[i] - an[i]));
    scale = std::max({scale, std::abs(an[i]), std::abs(fd[i])});
  }
  if (scale < 1e-9) return diff;
  return diff / scale;
}

/// Checks every input and parameter gradient of one op against central
/// differences of L = sum(w * forward(x)) with random weights w.
inline GradCheck check_gradients(const OpCase& c, std::uint64_t seed, double h = 1e-4) {
  const OpNode node = make_op_node(c);
  ops::Stream rng(seed);
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    Tensor t(c.inputs[i]);
    for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
    inputs.push_back(std::move(t));
  }
  if (c.cls == OpClass::Embedding) {
    const double vocab = node.kwarg("vocab", 1);
    for (auto& v : inputs[0].data) v = std::floor(rng.uniform(0.0, vocab));
  }
  if (c.cls == OpClass::CrossEntropy)  // soft labels that sum to one per row
    for (auto& v : inputs[0].data) v = rng.uniform(0.0, 1.0);
  ops::Params params = ops::init_params(node, seed + 1);
  for (auto& [_, t] : params)
    for (auto& v : t.data) v += rng.uniform(-0.1, 0.1);

  Tensor weights(node.output_shape);
  for (auto& v : weights.data) v = rng.uniform(-1.0, 1.0);

  auto ptrs = [&] {
    std::vector<const Tensor*> p;
    for (const auto& t : inputs) p.push_back(&t);
    return p;
  };
  auto objective = [&] {
    const Tensor y = ops::forward(node, ptrs(), params);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += weights.data[i] * y.data[i];
    return s;
  };
  auto numeric = [&](std::vector<double>& data) {
    std::vector<double> g(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = objective();
      data[i] = saved - h;
      const double down = objective();
      data[i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    return g;
  };

  const ops::Gradients an = ops::backward(node, ptrs(), params, weights);
  GradCheck out;
  out.label = c.label;
  auto record = [&](double e, const std::string& where) {
    if (e > out.worst_rel || out.worst_where.empty()) {
      out.worst_rel = std::max(out.worst_rel, e);
      out.worst_where = where;
    }
  };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!c.differentiable.empty() && !c.differentiable[i]) continue;
    record(rel_error(numeric(inputs[i].data), an.inputs.at(i).data), "input " + std::to_string(i));
  }
  for (auto& [name, t] : params) record(rel_error(numeric(t.data), an.params.at(name).data), name);
  return out;
}

/// One small case per op class.
inline std::vector<OpCase> catalog_cases() {
  return {
      {"conv", OpClass::Conv, {{2, 2, 5, 5}}, {{"out_channels", 3}, {"kernel", 3}, {"stride", 2}, {"padding", 1}}, {}},
      {"add", OpClass::Add, {{2, 3}, {2, 3}}, {}, {}},
      {"add-scalar", OpClass::Add, {{4}}, {{"value", 0.5}}, {}},
      {"multiply", OpClass::Multiply, {{2, 3}, {2, 3}}, {}, {}},
      {"multiply-scalar", OpClass::Multiply, {{4}}, {{"value", -1.5}}, {}},
      {"pool", OpClass::Pool, {{1, 2, 5, 4}}, {{"kernel", 2}}, {}},
      {"concat", OpClass::Concat, {{2, 3}, {2, 2, 2}}, {}, {}},
      {"linear", OpClass::Linear, {{3, 4}}, {{"out_features", 5}}, {}},
      {"matmul", OpClass::Matmul, {{2, 3, 4}, {2, 4, 2}}, {}, {}},
      {"softmax", OpClass::Softmax, {{3, 5}}, {}, {}},
      {"gelu", OpClass::Gelu, {{7}}, {}, {}},
      {"cross_entropy", OpClass::CrossEntropy, {{2, 4}, {2, 4}}, {{"weight", 1.0}}, {}},
      {"embedding", OpClass::Embedding, {{2, 3}}, {{"vocab", 5}, {"hidden", 4}}, {false}},
      {"attention_block", OpClass::AttentionBlock, {{2, 3, 4}}, {{"heads", 2}}, {}},
      {"ffn_block", OpClass::FfnBlock, {{2, 2, 3}}, {{"ffn_mult", 2}}, {}},
  };
}

}  // namespace dagmesh::testing
