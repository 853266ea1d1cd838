#include "cdt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "cdt/error.hpp"

namespace cdt {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " holds " +
                         std::to_string(shape_numel(shape_)) + " elements, got " + std::to_string(data_.size()));
  }
  require_finite("tensor data");
}

Tensor Tensor::filled(Shape shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::matrix");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
  return Tensor({values.size()}, std::vector<float>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("expected a 2-D tensor, got " + shape_to_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("expected a 2-D tensor, got " + shape_to_string(shape_));
  return shape_[1];
}

std::span<const float> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const float>(data_).subspan(r * c, c);
}

std::span<float> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<float>(data_).subspan(r * c, c);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

const Tensor& Tensor::require_finite(std::string_view what) const {
  if (!all_finite()) throw NumericError("non-finite value in " + std::string(what));
  return *this;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const float* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<float>(acc[j]);
  }
  return out;
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: cannot multiply " + shape_to_string(a.shape()) + " by transpose of " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b.data().data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * brow[p];
      out(i, j) = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](float x, float y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](float x, float y) { return x - y; });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return zip(a, b, "hadamard", [](float x, float y) { return x * y; });
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

Tensor abs(const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v = std::fabs(v);
  return out;
}

void add_inplace(Tensor& into, const Tensor& b) {
  require_same_shape(into, b, "add_inplace");
  auto o = into.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += y[i];
}

Tensor add_row_vector(const Tensor& a, const Tensor& v) {
  if (v.size() != a.cols()) {
    throw DimensionError("add_row_vector: vector " + shape_to_string(v.shape()) + " does not fit rows of " +
                         shape_to_string(a.shape()));
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += v[j];
  }
  return out;
}

Tensor masked_softmax(const Tensor& scores, const std::vector<bool>& keep) {
  if (keep.size() != scores.size()) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(keep.size()) + " entries for scores " +
                         shape_to_string(scores.shape()));
  }
  scores.require_finite("softmax scores");
  const std::size_t q = scores.rows(), k = scores.cols();
  Tensor out({q, k});
  for (std::size_t i = 0; i < q; ++i) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      if (keep[i * k + j]) mx = std::max(mx, scores(i, j));
    if (!std::isfinite(mx)) throw NumericError("masked_softmax: row " + std::to_string(i) + " is fully masked");
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (!keep[i * k + j]) continue;
      const double e = std::exp(static_cast<double>(scores(i, j)) - mx);
      out(i, j) = static_cast<float>(e);
      sum += e;
    }
    for (std::size_t j = 0; j < k; ++j)
      if (keep[i * k + j]) out(i, j) = static_cast<float>(out(i, j) / sum);
  }
  return out;
}

Tensor masked_softmax(const Tensor& scores, bool causal) {
  const std::size_t q = scores.rows(), k = scores.cols();
  std::vector<bool> keep(q * k, true);
  if (causal) {
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t j = i + 1; j < k; ++j) keep[i * k + j] = false;
  }
  return masked_softmax(scores, keep);
}

double l1_norm(const Tensor& t) noexcept {
  double s = 0.0;
  for (float v : t.data()) s += std::fabs(static_cast<double>(v));
  return s;
}

double max_abs(const Tensor& t) noexcept {
  double m = 0.0;
  for (float v : t.data()) m = std::max(m, std::fabs(static_cast<double>(v)));
  return m;
}

double relative_error(const Tensor& a, const Tensor& b, double floor) {
  require_same_shape(a, b, "relative_error");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    diff = std::max(diff, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return diff / std::max(max_abs(b), floor);
}

Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& bias, float eps) {
  const std::size_t n = x.cols();
  if (scale.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: parameters " + shape_to_string(scale.shape()) + "/" +
                         shape_to_string(bias.shape()) + " do not fit " + shape_to_string(x.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<float>((in[j] - mean) * inv * scale[j] + bias[j]);
  }
  return out;
}

float gelu(float x) noexcept {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
}

Tensor gelu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = gelu(v);
  return out;
}

}  // namespace cdt
