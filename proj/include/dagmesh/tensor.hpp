#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dagmesh {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor of 64-bit elements used by the reference executor.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(const Shape& s) { return Tensor(s); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Largest |a_i - b_i|; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dagmesh
