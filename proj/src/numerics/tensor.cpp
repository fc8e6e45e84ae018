#include "deshadow/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "deshadow/errors.hpp"

namespace deshadow {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  require(axis < shape_.size(), "tensor axis out of range");
  return shape_[axis];
}

double Tensor::item() const {
  require(data_.size() == 1, "item() on a tensor with more than one element");
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ContractViolation("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw ContractViolation("shape mismatch in +=: " + shape_string(shape_) + " vs " +
                            shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ContractViolation("max_abs_diff shape mismatch: " + shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

Tensor transpose_last2(const Tensor& t) {
  if (t.rank() == 2) {
    const auto rows = t.dim(0), cols = t.dim(1);
    Tensor out({cols, rows});
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out.at(j, i) = t.at(i, j);
    return out;
  }
  require(t.rank() == 3, "transpose_last2 expects a rank-2 or rank-3 tensor");
  const auto c = t.dim(0), rows = t.dim(1), cols = t.dim(2);
  Tensor out({c, cols, rows});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out.at(k, j, i) = t.at(k, i, j);
  return out;
}

}  // namespace deshadow
