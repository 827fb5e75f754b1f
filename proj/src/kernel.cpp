#include "kernel.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "pvlab/errors.hpp"

namespace pvlab::detail {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

MatD to_double(const Matrix& m) {
  MatD out(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
  const float* src = m.data().data();
  double* dst = out.data();
  for (std::size_t i = 0; i < m.size(); ++i) dst[i] = src[i];
  return out;
}

RowVecD to_row(const Matrix& m) {
  RowVecD out(static_cast<Eigen::Index>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i) out(static_cast<Eigen::Index>(i)) = m.data()[i];
  return out;
}

Matrix to_float(const Eigen::Ref<const MatD>& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto dst = out.row(static_cast<std::size_t>(r));
    for (Eigen::Index c = 0; c < m.cols(); ++c) dst[static_cast<std::size_t>(c)] = static_cast<float>(m(r, c));
  }
  return out;
}

Matrix to_float(const MatD& m) { return to_float(Eigen::Ref<const MatD>(m)); }

void rmsnorm_forward(const MatD& x, const RowVecD& gain, double eps, MatD& y, VecD& inv_rms) {
  const auto d = static_cast<double>(x.cols());
  inv_rms.resize(x.rows());
  y.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double ms = x.row(r).squaredNorm() / d;
    const double s = 1.0 / std::sqrt(ms + eps);
    inv_rms(r) = s;
    y.row(r) = (x.row(r) * s).cwiseProduct(gain);
  }
}

MatD rmsnorm_backward(const MatD& x, const RowVecD& gain, const VecD& inv_rms, const MatD& dy,
                      RowVecD& dgain) {
  const auto d = static_cast<double>(x.cols());
  MatD dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double s = inv_rms(r);
    dgain += dy.row(r).cwiseProduct(x.row(r)) * s;
    const RowVecD gdy = dy.row(r).cwiseProduct(gain);
    const double proj = gdy.dot(x.row(r));
    dx.row(r) = gdy * s - x.row(r) * (s * s * s * proj / d);
  }
  return dx;
}

RopeTable rope_table(std::size_t positions, std::size_t head_dim, double base) {
  const std::size_t pairs = head_dim / 2;
  RopeTable t;
  t.cos.resize(static_cast<Eigen::Index>(positions), static_cast<Eigen::Index>(pairs));
  t.sin.resize(static_cast<Eigen::Index>(positions), static_cast<Eigen::Index>(pairs));
  for (std::size_t i = 0; i < pairs; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    for (std::size_t p = 0; p < positions; ++p) {
      const double angle = static_cast<double>(p) * freq;
      t.cos(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = std::cos(angle);
      t.sin(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = std::sin(angle);
    }
  }
  return t;
}

void rope_rotate(MatD& m, std::size_t row0, std::size_t rows, std::size_t heads,
                 std::size_t head_dim, const RopeTable& table, bool inverse) {
  const std::size_t pairs = head_dim / 2;
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t p = 0; p < rows; ++p) {
    double* row = m.data() + (row0 + p) * static_cast<std::size_t>(m.cols());
    for (std::size_t h = 0; h < heads; ++h) {
      double* blk = row + h * head_dim;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double c = table.cos(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i));
        const double s = sign * table.sin(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i));
        const double a = blk[2 * i];
        const double b = blk[2 * i + 1];
        blk[2 * i] = a * c - b * s;
        blk[2 * i + 1] = a * s + b * c;
      }
    }
  }
}

void head_logits(const Eigen::Ref<const MatD>& q, const Eigen::Ref<const MatD>& k,
                 const HeadAttentionSpec& spec, MatD& logits) {
  const Eigen::Index t = q.rows();
  logits.noalias() = q * k.transpose();
  for (Eigen::Index i = 0; i < t; ++i) {
    const Eigen::Index lo =
        spec.window == 0 ? 0 : std::max<Eigen::Index>(0, i - static_cast<Eigen::Index>(spec.window) + 1);
    double* row = logits.data() + i * t;
    for (Eigen::Index j = 0; j < lo; ++j) row[j] = kNegInf;
    for (Eigen::Index j = lo; j <= i; ++j) {
      double s = row[j] * spec.qk_scale;
      if (static_cast<std::size_t>(j) < spec.initial_k) s *= spec.initial_scale;
      if (spec.alibi_slope != 0.0) s -= spec.alibi_slope * static_cast<double>(i - j);
      if (spec.key_scale != nullptr) s *= (*spec.key_scale)[static_cast<std::size_t>(j)];
      if (spec.key_mask != nullptr && (*spec.key_mask)[static_cast<std::size_t>(j)] != 0) s = kNegInf;
      row[j] = s;
    }
    for (Eigen::Index j = i + 1; j < t; ++j) row[j] = kNegInf;
  }
}

void masked_softmax(MatD& logits) {
  const Eigen::Index t = logits.cols();
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double* row = logits.data() + i * t;
    double max_v = kNegInf;
    for (Eigen::Index j = 0; j < t; ++j) max_v = std::max(max_v, row[j]);
    if (max_v == kNegInf) {
      throw DegenerateRowError("attention row " + std::to_string(i + 1) + " has no visible key");
    }
    double denom = 0.0;
    for (Eigen::Index j = 0; j < t; ++j) {
      const double e = row[j] == kNegInf ? 0.0 : std::exp(row[j] - max_v);
      row[j] = e;
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (Eigen::Index j = 0; j < t; ++j) row[j] *= inv;
  }
}

void head_attention_forward(const Eigen::Ref<const MatD>& q, const Eigen::Ref<const MatD>& k,
                            const Eigen::Ref<const MatD>& v, const HeadAttentionSpec& spec,
                            MatD& probs, Eigen::Ref<MatD> out) {
  head_logits(q, k, spec, probs);
  masked_softmax(probs);
  out.noalias() = probs * v;
}

void head_attention_backward(const Eigen::Ref<const MatD>& q, const Eigen::Ref<const MatD>& k,
                             const Eigen::Ref<const MatD>& v, const MatD& probs,
                             const Eigen::Ref<const MatD>& dout, double qk_scale,
                             Eigen::Ref<MatD> dq, Eigen::Ref<MatD> dk, Eigen::Ref<MatD> dv) {
  dv.noalias() = probs.transpose() * dout;
  MatD dp = dout * v.transpose();
  // dS = P o (dP - rowsum(dP o P))
  for (Eigen::Index i = 0; i < dp.rows(); ++i) {
    const double inner = dp.row(i).dot(probs.row(i));
    dp.row(i) = probs.row(i).cwiseProduct(dp.row(i).array().matrix() - RowVecD::Constant(dp.cols(), inner));
  }
  dq.noalias() = dp * k * qk_scale;
  dk.noalias() = dp.transpose() * q * qk_scale;
}

}  // namespace pvlab::detail
