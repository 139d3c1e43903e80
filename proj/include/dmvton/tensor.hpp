#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dmvton {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f64 array. A "meta" tensor carries only its shape and is
// used for shape/FLOP tracing without allocating or computing anything.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor meta(Shape shape);
  static Tensor scalar(double v) { return Tensor({1}, v); }

  bool defined() const { return defined_; }
  bool is_meta() const { return meta_; }
  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const;
  int64_t numel() const { return numel_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW accessors.
  double& at(int64_t n, int64_t c, int64_t y, int64_t x);
  double at(int64_t n, int64_t c, int64_t y, int64_t x) const;

  double item() const;
  bool all_finite() const;
  void fill(double v);
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  int64_t numel_ = 0;
  bool meta_ = false;
  bool defined_ = false;
};

bool same_shape(const Tensor& a, const Tensor& b);
// Exact elementwise comparison (bitwise for non-NaN values).
bool equal(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dmvton
