#include "camlab/tensor.hpp"

#include "camlab/error.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/core.h>

namespace camlab {

std::string to_string(const Shape& s) { return fmt::format("({}, {}, {}, {})", s.n, s.c, s.h, s.w); }

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.size(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.size()) {
    throw ShapeError(fmt::format("tensor data length {} does not match shape {}", data_.size(),
                                 to_string(shape_)));
  }
}

Tensor Tensor::from_external(Shape shape, std::span<const double> data) {
  if (data.size() != shape.size()) {
    throw ShapeError(fmt::format("tensor data length {} does not match shape {}", data.size(),
                                 to_string(shape)));
  }
  auto bad = std::find_if(data.begin(), data.end(), [](double v) { return !std::isfinite(v); });
  if (bad != data.end()) {
    throw ValidationError(
        fmt::format("non-finite value at flat index {}", std::distance(data.begin(), bad)));
  }
  return Tensor(shape, std::vector<double>(data.begin(), data.end()));
}

Tensor Tensor::slice_sample(std::size_t n) const {
  Shape s = shape_;
  s.n = 1;
  auto src = sample(n);
  return Tensor(s, std::vector<double>(src.begin(), src.end()));
}

Tensor stack_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("cannot stack an empty batch");
  Shape s = parts.front().shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.c != s.c || ps.h != s.h || ps.w != s.w) {
      throw ShapeError(fmt::format("cannot stack {} with {}", to_string(ps), to_string(s)));
    }
    total += ps.n;
  }
  std::vector<double> data;
  data.reserve(total * s.sample());
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  s.n = total;
  return Tensor(s, std::move(data));
}

}  // namespace camlab
