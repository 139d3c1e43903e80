#include "dmvton/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dmvton/errors.hpp"

namespace dmvton {

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) fail(Errc::kShape, "negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), numel_(numel_of(shape_)), defined_(true) {
  data_.assign(static_cast<size_t>(numel_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)), numel_(numel_of(shape_)), defined_(true) {
  if (static_cast<int64_t>(data_.size()) != numel_)
    fail(Errc::kShape, "tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
}

Tensor Tensor::meta(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = numel_of(t.shape_);
  t.meta_ = true;
  t.defined_ = true;
  return t;
}

int64_t Tensor::dim(int64_t i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) fail(Errc::kShape, "dim index out of range for " + shape_str(shape_));
  return shape_[static_cast<size_t>(i)];
}

double& Tensor::at(int64_t n, int64_t c, int64_t y, int64_t x) {
  return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
}

double Tensor::at(int64_t n, int64_t c, int64_t y, int64_t x) const {
  return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
}

double Tensor::item() const {
  if (numel_ != 1 || meta_) fail(Errc::kShape, "item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  if (numel_of(shape) != numel_)
    fail(Errc::kShape, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  if (meta_) return Tensor::meta(std::move(shape));
  return Tensor(std::move(shape), data_);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

bool equal(const Tensor& a, const Tensor& b) {
  return same_shape(a, b) && a.vec() == b.vec();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) fail(Errc::kShape, "max_abs_diff shape mismatch");
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dmvton
