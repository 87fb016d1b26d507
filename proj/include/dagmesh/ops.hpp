#pragma once

// Numeric forward and reverse-mode rules for every op class, on 64-bit
// tensors. Macro ops recompute their forward intermediates in backward.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dagmesh/dag_ir.hpp"
#include "dagmesh/tensor.hpp"

namespace dagmesh::ops {

/// Parameter tensors of one node, keyed by catalog parameter name.
using Params = std::map<std::string, Tensor>;

/// `inputs` follow the node's args order.
Tensor forward(const OpNode& n, const std::vector<const Tensor*>& inputs, const Params& params);

struct Gradients {
  std::vector<Tensor> inputs;  // one per arg, same shapes as the inputs
  Params params;
};

/// Given dL/d(output), returns dL/d(inputs) and dL/d(params).
Gradients backward(const OpNode& n, const std::vector<const Tensor*>& inputs, const Params& params,
                   const Tensor& grad_output);

/// Deterministic initial parameters for `n` derived from (seed, node name).
Params init_params(const OpNode& n, std::uint64_t seed);

/// Stable 64-bit FNV-1a hash, used to derive per-node random streams.
std::uint64_t fnv1a(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Uniform doubles in [lo, hi) from a seeded stream; identical on every platform.
class Stream {
 public:
  explicit Stream(std::uint64_t seed);
  double uniform(double lo, double hi);
  std::uint64_t next();

 private:
  std::uint64_t state_;
};

}  // namespace dagmesh::ops
