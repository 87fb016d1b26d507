#include "dagmesh/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dagmesh {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), 0.0) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (static_cast<std::int64_t>(data.size()) != numel(shape))
    throw std::invalid_argument("tensor data size does not match shape " + shape_to_string(shape));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("max_abs_diff: shape mismatch " + shape_to_string(a.shape) +
                                " vs " + shape_to_string(b.shape));
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace dagmesh
