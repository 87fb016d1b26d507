#pragma once

// Shape, parameter and FLOP rules of each op class.

#include <string>
#include <vector>

#include "dagmesh/dag_ir.hpp"

namespace dagmesh::catalog {

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// A primitive the node decomposes into. Primitive nodes expand to themselves.
struct Constituent {
  OpClass op_class;
  std::vector<Shape> input_shapes;
  Shape output_shape;
  Kwargs kwargs;
  std::int64_t param_elements = 0;
};

bool is_macro(OpClass c);
bool has_parameters(OpClass c);
/// Number of args, or -1 when variadic (concat) / -2 when 1 or 2 (add, multiply).
int arity(OpClass c);

/// Throws GraphError when the inputs do not fit the op.
Shape infer_output_shape(OpClass c, const std::vector<Shape>& inputs, const Kwargs& kwargs);

std::vector<ParamSpec> param_specs(const OpNode& n);
std::int64_t param_elements(const OpNode& n);

std::vector<Constituent> expand(const OpNode& n);
double primitive_flops(const Constituent& c);

}  // namespace dagmesh::catalog
