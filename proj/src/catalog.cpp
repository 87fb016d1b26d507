#include "dagmesh/catalog.hpp"

#include <cmath>
#include <numeric>

namespace dagmesh::catalog {
namespace {

[[noreturn]] void fail(OpClass c, const std::string& what) {
  throw GraphError(std::string(to_string(c)) + ": " + what);
}

std::int64_t int_kwarg(const Kwargs& kw, const char* key, std::int64_t fallback) {
  auto it = kw.find(key);
  if (it == kw.end()) return fallback;
  double v = it->second;
  if (v != std::floor(v)) throw GraphError(std::string("kwarg '") + key + "' must be an integer");
  return static_cast<std::int64_t>(v);
}

std::int64_t required_int(OpClass c, const Kwargs& kw, const char* key) {
  if (!kw.contains(key)) fail(c, std::string("missing kwarg '") + key + "'");
  std::int64_t v = int_kwarg(kw, key, 0);
  if (v <= 0) fail(c, std::string("kwarg '") + key + "' must be positive");
  return v;
}

void expect_inputs(OpClass c, const std::vector<Shape>& in, std::size_t lo, std::size_t hi) {
  if (in.size() < lo || in.size() > hi)
    fail(c, "expected " + std::to_string(lo) + (lo == hi ? "" : ".." + std::to_string(hi)) +
                " inputs, got " + std::to_string(in.size()));
}

std::int64_t rows_of(const Shape& s) { return s.empty() ? 1 : numel(s) / s.back(); }

Shape with_last(Shape s, std::int64_t last) {
  s.back() = last;
  return s;
}

Constituent linear_part(const Shape& in, std::int64_t out_features, bool bias = true) {
  Constituent c{OpClass::Linear, {in}, with_last(in, out_features), {{"out_features", double(out_features)}}, 0};
  c.param_elements = in.back() * out_features + (bias ? out_features : 0);
  return c;
}

Constituent unary(OpClass cls, const Shape& s, Kwargs kw = {}) { return {cls, {s}, s, std::move(kw), 0}; }

}  // namespace

bool is_macro(OpClass c) { return c == OpClass::AttentionBlock || c == OpClass::FfnBlock; }

bool has_parameters(OpClass c) {
  switch (c) {
    case OpClass::Conv:
    case OpClass::Linear:
    case OpClass::Embedding:
    case OpClass::AttentionBlock:
    case OpClass::FfnBlock:
      return true;
    default:
      return false;
  }
}

int arity(OpClass c) {
  switch (c) {
    case OpClass::Placeholder:
    case OpClass::Variable:
      return 0;
    case OpClass::Add:
    case OpClass::Multiply:
      return -2;
    case OpClass::Concat:
      return -1;
    case OpClass::Matmul:
    case OpClass::CrossEntropy:
      return 2;
    default:
      return 1;
  }
}

Shape infer_output_shape(OpClass c, const std::vector<Shape>& in, const Kwargs& kw) {
  switch (c) {
    case OpClass::Placeholder:
    case OpClass::Variable:
      fail(c, "leaf shapes must be declared");
    case OpClass::Conv: {
      expect_inputs(c, in, 1, 1);
      const Shape& x = in[0];
      if (x.size() != 4) fail(c, "input must be [N,C,H,W], got " + shape_to_string(x));
      const auto out_ch = required_int(c, kw, "out_channels");
      const auto k = int_kwarg(kw, "kernel", 3);
      const auto stride = int_kwarg(kw, "stride", 1);
      const auto pad = int_kwarg(kw, "padding", 0);
      if (k <= 0 || stride <= 0 || pad < 0) fail(c, "invalid kernel/stride/padding");
      const auto ho = (x[2] + 2 * pad - k) / stride + 1;
      const auto wo = (x[3] + 2 * pad - k) / stride + 1;
      if (x[2] + 2 * pad < k || x[3] + 2 * pad < k) fail(c, "kernel larger than padded input");
      return {x[0], out_ch, ho, wo};
    }
    case OpClass::Add:
    case OpClass::Multiply:
      expect_inputs(c, in, 1, 2);
      if (in.size() == 2 && in[0] != in[1])
        fail(c, "operand shapes differ: " + shape_to_string(in[0]) + " vs " + shape_to_string(in[1]));
      return in[0];
    case OpClass::Pool: {
      expect_inputs(c, in, 1, 1);
      const Shape& x = in[0];
      if (x.size() != 4) fail(c, "input must be [N,C,H,W], got " + shape_to_string(x));
      const auto k = int_kwarg(kw, "kernel", 2);
      if (k <= 0 || x[2] < k || x[3] < k) fail(c, "invalid pooling window");
      return {x[0], x[1], x[2] / k, x[3] / k};
    }
    case OpClass::Concat: {
      if (in.empty()) fail(c, "needs at least one input");
      std::int64_t width = 0;
      for (const auto& s : in) {
        if (s.empty() || s[0] != in[0][0]) fail(c, "inputs must share the leading (batch) dimension");
        width += numel(s) / s[0];
      }
      return {in[0][0], width};
    }
    case OpClass::Linear:
      expect_inputs(c, in, 1, 1);
      if (in[0].empty()) fail(c, "input must have rank >= 1");
      return with_last(in[0], required_int(c, kw, "out_features"));
    case OpClass::Matmul: {
      expect_inputs(c, in, 2, 2);
      const Shape& a = in[0];
      const Shape& b = in[1];
      if (a.size() < 2 || a.size() != b.size()) fail(c, "operands must have equal rank >= 2");
      if (!std::equal(a.begin(), a.end() - 2, b.begin())) fail(c, "batch dimensions differ");
      if (a[a.size() - 1] != b[b.size() - 2])
        fail(c, "inner dimensions differ: " + shape_to_string(a) + " x " + shape_to_string(b));
      Shape out = a;
      out.back() = b.back();
      return out;
    }
    case OpClass::Softmax:
    case OpClass::Gelu:
      expect_inputs(c, in, 1, 1);
      if (in[0].empty()) fail(c, "input must have rank >= 1");
      return in[0];
    case OpClass::CrossEntropy:
      expect_inputs(c, in, 2, 2);
      if (in[0] != in[1])
        fail(c, "label and logits shapes differ: " + shape_to_string(in[0]) + " vs " + shape_to_string(in[1]));
      if (in[0].empty()) fail(c, "logits must have rank >= 1");
      return {1};
    case OpClass::Embedding: {
      expect_inputs(c, in, 1, 1);
      required_int(c, kw, "vocab");
      Shape out = in[0];
      out.push_back(required_int(c, kw, "hidden"));
      return out;
    }
    case OpClass::AttentionBlock: {
      expect_inputs(c, in, 1, 1);
      const Shape& x = in[0];
      if (x.size() != 3) fail(c, "input must be [batch, seq, hidden], got " + shape_to_string(x));
      const auto heads = int_kwarg(kw, "heads", 1);
      if (heads <= 0 || x[2] % heads != 0) fail(c, "heads must divide the hidden size");
      return x;
    }
    case OpClass::FfnBlock:
      expect_inputs(c, in, 1, 1);
      if (in[0].empty()) fail(c, "input must have rank >= 1");
      if (int_kwarg(kw, "ffn_mult", 4) <= 0) fail(c, "ffn_mult must be positive");
      return in[0];
  }
  fail(c, "unhandled op class");
}

std::vector<ParamSpec> param_specs(const OpNode& n) {
  const auto& in = n.input_shapes;
  switch (n.op_class) {
    case OpClass::Variable:
      return {{"value", n.output_shape}};
    case OpClass::Conv: {
      const auto k = int_kwarg(n.kwargs, "kernel", 3);
      const auto cout = n.output_shape[1];
      return {{"weight", {cout, in[0][1] * k * k}}, {"bias", {cout}}};
    }
    case OpClass::Linear: {
      const auto out = n.output_shape.back();
      return {{"weight", {in[0].back(), out}}, {"bias", {out}}};
    }
    case OpClass::Embedding:
      return {{"table", {int_kwarg(n.kwargs, "vocab", 0), n.output_shape.back()}}};
    case OpClass::AttentionBlock: {
      const auto h = in[0].back();
      std::vector<ParamSpec> p;
      for (const char* proj : {"q", "k", "v", "o"}) {
        p.push_back({std::string("w") + proj, {h, h}});
        p.push_back({std::string("b") + proj, {h}});
      }
      return p;
    }
    case OpClass::FfnBlock: {
      const auto h = in[0].back();
      const auto inner = h * int_kwarg(n.kwargs, "ffn_mult", 4);
      return {{"w1", {h, inner}}, {"b1", {inner}}, {"w2", {inner, h}}, {"b2", {h}}};
    }
    default:
      return {};
  }
}

std::int64_t param_elements(const OpNode& n) {
  std::int64_t total = 0;
  for (const auto& p : param_specs(n)) total += numel(p.shape);
  return total;
}

std::vector<Constituent> expand(const OpNode& n) {
  if (n.op_class == OpClass::AttentionBlock) {
    const Shape& x = n.input_shapes[0];
    const auto b = x[0], s = x[1], h = x[2];
    const auto heads = int_kwarg(n.kwargs, "heads", 1);
    const auto dh = h / heads;
    const Shape qh{b * heads, s, dh}, kt{b * heads, dh, s}, scores{b * heads, s, s};
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    return {
        linear_part(x, h),
        linear_part(x, h),
        linear_part(x, h),
        {OpClass::Matmul, {qh, kt}, scores, {}, 0},
        unary(OpClass::Multiply, scores, {{"value", inv_sqrt}}),
        unary(OpClass::Softmax, scores),
        {OpClass::Matmul, {scores, qh}, qh, {}, 0},
        linear_part(x, h),
        {OpClass::Add, {x, x}, x, {}, 0},
    };
  }
  if (n.op_class == OpClass::FfnBlock) {
    const Shape& x = n.input_shapes[0];
    const auto h = x.back();
    const auto inner = h * int_kwarg(n.kwargs, "ffn_mult", 4);
    const Shape mid = with_last(x, inner);
    return {
        linear_part(x, inner),
        unary(OpClass::Gelu, mid),
        linear_part(mid, h),
        {OpClass::Add, {x, x}, x, {}, 0},
    };
  }
  return {{n.op_class, n.input_shapes, n.output_shape, n.kwargs, param_elements(n)}};
}

double primitive_flops(const Constituent& c) {
  const auto out = static_cast<double>(numel(c.output_shape));
  switch (c.op_class) {
    case OpClass::Placeholder:
    case OpClass::Variable:
    case OpClass::Concat:
    case OpClass::Embedding:
      return 0.0;
    case OpClass::Conv: {
      // im2col + matmul: [Cout, C*k*k] x [C*k*k, Ho*Wo] per sample.
      const auto k = int_kwarg(c.kwargs, "kernel", 3);
      const double patch = static_cast<double>(c.input_shapes[0][1] * k * k);
      return 2.0 * out * patch;
    }
    case OpClass::Add:
    case OpClass::Multiply:
    case OpClass::Softmax:
    case OpClass::Gelu:
      return out;
    case OpClass::Pool: {
      const auto k = int_kwarg(c.kwargs, "kernel", 2);
      return out * static_cast<double>(k * k);
    }
    case OpClass::Linear: {
      const Shape& x = c.input_shapes[0];
      return 2.0 * static_cast<double>(rows_of(x)) * static_cast<double>(x.back()) *
             static_cast<double>(c.output_shape.back());
    }
    case OpClass::Matmul: {
      const Shape& a = c.input_shapes[0];
      return 2.0 * out * static_cast<double>(a.back());
    }
    case OpClass::CrossEntropy:
      return static_cast<double>(numel(c.input_shapes[1]));
    case OpClass::AttentionBlock:
    case OpClass::FfnBlock:
      break;
  }
  throw GraphError("primitive_flops called on a macro op");
}

}  // namespace dagmesh::catalog
