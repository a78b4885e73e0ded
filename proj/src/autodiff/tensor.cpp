#include "hted/autodiff/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>

#include <Eigen/Dense>

#include "hted/common/errors.hpp"

namespace hted::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

std::size_t shape_product(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor() : shape_{0} {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw StructuralError("tensor shape " + shape_string() + " does not match " +
                          std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return Tensor(Shape{rows, cols}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor(Shape{rows, cols}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }

std::size_t Tensor::cols() const noexcept {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  return 1;
}

std::span<const double> Tensor::row(std::size_t r) const {
  return std::span<const double>(data_).subspan(r * cols(), cols());
}

std::span<double> Tensor::row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

Tensor Tensor::row_vector(std::size_t r) const {
  auto v = row(r);
  return vector(std::vector<double>(v.begin(), v.end()));
}

Tensor Tensor::column_vector(std::size_t c) const {
  std::vector<double> out(rows());
  for (std::size_t r = 0; r < rows(); ++r) out[r] = at(r, c);
  return vector(std::move(out));
}

double Tensor::item() const {
  if (data_.size() != 1) throw StructuralError("item() on tensor of shape " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  // Branch-free so the scan vectorizes: a value is non-finite iff its exponent bits are all set.
  constexpr std::uint64_t kExponent = 0x7FF0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : data_) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExponent) == kExponent);
  return bad == 0;
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

Tensor Tensor::transposed() const {
  Tensor out(Shape{cols(), rows()});
  for (std::size_t r = 0; r < rows(); ++r)
    for (std::size_t c = 0; c < cols(); ++c) out.at(c, r) = at(r, c);
  return out;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << ']';
  return os.str();
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw StructuralError("dot of vectors with different lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double ab = dot(a, b);
  const double aa = dot(a, a);
  const double bb = dot(b, b);
  if (aa == 0.0 || bb == 0.0) return 0.0;
  // sqrt(aa * bb) == aa when a == b, so identical inputs give exactly 1.
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

Tensor operator+(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw StructuralError("add of " + a.shape_string() + " and " + b.shape_string());
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw StructuralError("sub of " + a.shape_string() + " and " + b.shape_string());
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw StructuralError("matmul of " + a.shape_string() + " and " + b.shape_string());
  }
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  Eigen::Map<const RowMatrix> ma(a.data(), a.rows(), a.cols());
  Eigen::Map<const RowMatrix> mb(b.data(), b.rows(), b.cols());
  Eigen::Map<RowMatrix> mo(out.data(), out.rows(), out.cols());
  mo.noalias() = ma * mb;
  return out;
}

Tensor matvec(const Tensor& m, std::span<const double> v) {
  if (m.rank() != 2 || m.cols() != v.size()) throw StructuralError("matvec of " + m.shape_string());
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), v);
  return Tensor::vector(std::move(out));
}

Tensor stack_columns(const std::vector<Tensor>& columns, std::size_t rows) {
  Tensor out = Tensor::zeros(rows, columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c].size() != rows) throw StructuralError("column length mismatch in stack_columns");
    for (std::size_t r = 0; r < rows; ++r) out.at(r, c) = columns[c][r];
  }
  return out;
}

double frobenius_norm(const Tensor& a) { return norm(a.values()); }

}  // namespace hted::ad
