#include "pvlab/numerics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pvlab/errors.hpp"

namespace pvlab {

namespace {

using RowMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatF> view(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

Matrix from_double(const RowMatD& d) {
  Matrix out(static_cast<std::size_t>(d.rows()), static_cast<std::size_t>(d.cols()));
  Eigen::Map<RowMatF>(out.data().data(), d.rows(), d.cols()) = d.cast<float>();
  if (!out.all_finite()) throw NumericError("matrix product produced a non-finite entry");
  return out;
}

std::string dims(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged row list");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) throw ShapeError("row slice out of range");
  return Matrix(end - begin, cols_,
                std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                   data_.begin() + static_cast<std::ptrdiff_t>(end * cols_)));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + dims(a) + " * " + dims(b));
  RowMatD prod = view(a).cast<double>() * view(b).cast<double>();
  return from_double(prod);
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + dims(a) + " * " + dims(b) + "^T");
  RowMatD prod = view(a).cast<double>() * view(b).cast<double>().transpose();
  return from_double(prod);
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: " + dims(a) + "^T * " + dims(b));
  RowMatD prod = view(a).cast<double>().transpose() * view(b).cast<double>();
  return from_double(prod);
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    double max_v = -std::numeric_limits<double>::infinity();
    for (float v : in) {
      if (std::isnan(v) || v == std::numeric_limits<float>::infinity()) {
        throw NumericError("softmax_rows: row " + std::to_string(r) + " has a NaN or +inf entry");
      }
      max_v = std::max(max_v, static_cast<double>(v));
    }
    if (max_v == -std::numeric_limits<double>::infinity()) {
      throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " is entirely masked");
    }
    double denom = 0.0;
    for (float v : in) denom += std::exp(static_cast<double>(v) - max_v);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) {
      dst[c] = static_cast<float>(std::exp(static_cast<double>(in[c]) - max_v) / denom);
    }
  }
  return out;
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const float> a, std::span<const float> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw UndefinedSimilarityError("cosine: zero vector");
  if (std::equal(a.begin(), a.end(), b.begin(), b.end())) return 1.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

PcaProjection pca_topk(const Matrix& rows, std::size_t k) {
  const std::size_t n = rows.rows();
  const std::size_t d = rows.cols();
  if (n < 2) throw ShapeError("pca_topk: need at least 2 rows");
  if (k == 0 || k > std::min(n, d)) {
    throw ShapeError("pca_topk: k=" + std::to_string(k) + " out of range for " + dims(rows));
  }
  RowMatD x = view(rows).cast<double>();
  Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    // Eigen's tridiagonal QR gives up after 30 sweeps per dimension.
    throw ConvergenceError("pca_topk: symmetric eigensolver did not converge", 30 * d);
  }
  // Eigen sorts ascending; walk from the back.
  PcaProjection out;
  out.components = Matrix(k, d);
  out.mean.resize(d);
  for (std::size_t j = 0; j < d; ++j) out.mean[j] = static_cast<float>(mean(static_cast<Eigen::Index>(j)));
  for (std::size_t i = 0; i < k; ++i) {
    const auto col = static_cast<Eigen::Index>(d - 1 - i);
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    // Deterministic sign: largest-magnitude coordinate positive.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t j = 0; j < d; ++j) out.components(i, j) = static_cast<float>(v(static_cast<Eigen::Index>(j)));
    out.explained_variance.push_back(static_cast<float>(std::max(0.0, solver.eigenvalues()(col))));
  }
  return out;
}

Matrix pca_project(const PcaProjection& projection, const Matrix& rows) {
  if (rows.cols() != projection.mean.size()) throw ShapeError("pca_project: dimension mismatch");
  Matrix centered = rows;
  for (std::size_t r = 0; r < centered.rows(); ++r) {
    auto row = centered.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] -= projection.mean[c];
  }
  return matmul_nt(centered, projection.components);
}

Matrix interp_linear(const Matrix& values, std::size_t target_len, bool align_ends) {
  const std::size_t t = values.rows();
  if (t < 2) throw ShapeError("interp_linear: need at least 2 source rows");
  if (target_len < 2) throw ShapeError("interp_linear: target length must be at least 2");
  const std::size_t d = values.cols();
  Matrix out(target_len, d);
  for (std::size_t i = 0; i < target_len; ++i) {
    double src = 0.0;
    if (align_ends) {
      src = static_cast<double>(i) * static_cast<double>(t - 1) / static_cast<double>(target_len - 1);
    } else {
      src = (static_cast<double>(i) + 0.5) * static_cast<double>(t) / static_cast<double>(target_len) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(t - 1));
    }
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo >= t - 1) lo = t - 1;
    const double w = src - static_cast<double>(lo);
    auto dst = out.row(i);
    auto a = values.row(lo);
    if (w == 0.0) {
      std::copy(a.begin(), a.end(), dst.begin());
      continue;
    }
    auto b = values.row(lo + 1);
    for (std::size_t c = 0; c < d; ++c) {
      dst[c] = static_cast<float>((1.0 - w) * a[c] + w * b[c]);
    }
  }
  return out;
}

}  // namespace pvlab
