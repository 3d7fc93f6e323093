#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace camlab {

struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  std::size_t sample() const { return c * h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense NCHW tensor of doubles, row-major with w fastest.
class Tensor {
 public:
  using ChannelMap = Eigen::Map<Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstChannelMap =
      Eigen::Map<const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Builds a tensor from untrusted data; rejects NaN/Inf and size mismatches.
  static Tensor from_external(Shape shape, std::span<const double> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index(n, c, y, x)];
  }
  double operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::span<double> sample(std::size_t n) {
    return std::span<double>(data_).subspan(n * shape_.sample(), shape_.sample());
  }
  std::span<const double> sample(std::size_t n) const {
    return std::span<const double>(data_).subspan(n * shape_.sample(), shape_.sample());
  }

  /// h x w view of one channel plane.
  ChannelMap channel(std::size_t n, std::size_t c) {
    return ChannelMap(data_.data() + index(n, c, 0, 0), static_cast<Eigen::Index>(shape_.h),
                      static_cast<Eigen::Index>(shape_.w));
  }
  ConstChannelMap channel(std::size_t n, std::size_t c) const {
    return ConstChannelMap(data_.data() + index(n, c, 0, 0), static_cast<Eigen::Index>(shape_.h),
                           static_cast<Eigen::Index>(shape_.w));
  }

  /// Copy of sample n as a batch of one.
  Tensor slice_sample(std::size_t n) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

/// Concatenates equally shaped tensors along the batch axis.
Tensor stack_batch(std::span<const Tensor> parts);

}  // namespace camlab
