#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cdt {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major float32 array. Tensors are plain values: copying copies
// the data, and a const Tensor can be shared freely between threads.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, float value);
  static Tensor identity(std::size_t n);
  // Convenience for tests and fixtures: 2-D tensor from nested rows.
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D accessors; rank must be 2.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& operator[](std::size_t i) noexcept { return data_[i]; }

  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_.back() + c]; }
  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_.back() + c]; }

  std::span<const float> row(std::size_t r) const;
  std::span<float> row(std::size_t r);

  // Same data, new shape with the same element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;
  // Throws NumericError naming `what` when any element is NaN or Inf.
  const Tensor& require_finite(std::string_view what) const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// ---- arithmetic -----------------------------------------------------------
//
// Every reduction below runs in a fixed order with double accumulators, so a
// given input always produces bit-identical output.

// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] * [n x k]^T -> [m x n]
Tensor matmul_transposed(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor abs(const Tensor& a);
void add_inplace(Tensor& into, const Tensor& b);
// Adds a length-n vector to every row of an [m x n] tensor.
Tensor add_row_vector(const Tensor& a, const Tensor& v);

// Row-wise softmax over [q x k] scores. With `causal`, entries whose key
// index exceeds the query index are masked: they come out exactly 0 and do
// not take part in the normalization.
Tensor masked_softmax(const Tensor& scores, bool causal);
// General form: mask[i] == false excludes that entry. A row with no
// unmasked entry is a NumericError.
Tensor masked_softmax(const Tensor& scores, const std::vector<bool>& keep);

double l1_norm(const Tensor& t) noexcept;
double max_abs(const Tensor& t) noexcept;
// max|a - b| / max(max|b|, floor). Shapes must match.
double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8);

// Row-wise layer normalization over the last axis of a 2-D tensor.
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& bias, float eps);

// tanh approximation used by GPT-2.
float gelu(float x) noexcept;
Tensor gelu(const Tensor& x);

}  // namespace cdt
