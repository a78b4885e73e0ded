#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace hted::ad {

using Shape = std::vector<std::size_t>;

// Dense row-major array of doubles. Rank 0 is a scalar, rank 1 a vector,
// rank 2 a matrix; nothing in the artifact needs more.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  // Matrix view of any tensor: vectors are a single row, scalars 1x1.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const double* data() const noexcept { return data_.data(); }
  double* data() noexcept { return data_.data(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);
  Tensor row_vector(std::size_t r) const;
  Tensor column_vector(std::size_t c) const;

  double item() const;
  bool all_finite() const noexcept;
  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;

  std::string shape_string() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const Shape& shape) noexcept;

/// Bitwise equality of shape and every stored double.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double max_abs(std::span<const double> a);
/// Cosine similarity; exactly 1.0 when a == b.
double cosine(std::span<const double> a, std::span<const double> b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);

/// Matrix product of rank-2 tensors (a vector is treated as a column for matvec).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matvec(const Tensor& m, std::span<const double> v);

/// Stack equal-length vectors as the columns of a rows x n matrix.
Tensor stack_columns(const std::vector<Tensor>& columns, std::size_t rows);

double frobenius_norm(const Tensor& a);

}  // namespace hted::ad
