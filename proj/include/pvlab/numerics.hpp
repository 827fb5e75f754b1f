#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace pvlab {

// Dense row-major matrix of 32-bit floats. Reductions that consume it
// accumulate in double and round once on output.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  // Rows [begin, end) as a new matrix.
  Matrix slice_rows(std::size_t begin, std::size_t end) const;

  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

struct PcaProjection {
  Matrix components;  // k x d, orthonormal rows
  std::vector<float> mean;
  std::vector<float> explained_variance;  // nonincreasing
};

// a * b with 64-bit accumulation per output element.
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Row-wise softmax with max subtraction. -inf is accepted as a mask
// sentinel; NaN and +inf are rejected.
Matrix softmax_rows(const Matrix& logits);

double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> a);
double cosine(std::span<const float> a, std::span<const float> b);

PcaProjection pca_topk(const Matrix& rows, std::size_t k);
// Centers rows with the projection mean and maps them onto the components.
Matrix pca_project(const PcaProjection& projection, const Matrix& rows);

// Linear resampling along the row axis. With align_ends the first and last
// rows are preserved exactly and target index i maps to source coordinate
// i*(T-1)/(target_len-1).
Matrix interp_linear(const Matrix& values, std::size_t target_len, bool align_ends = true);

}  // namespace pvlab
