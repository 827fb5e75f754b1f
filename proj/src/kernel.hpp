#pragma once

// Double-precision building blocks shared by the forward pass, the
// training backward pass and the offline attention recomputation.

#include <Eigen/Dense>

#include <cstddef>
#include <vector>

#include "pvlab/numerics.hpp"

namespace pvlab::detail {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecD = Eigen::VectorXd;
using RowVecD = Eigen::RowVectorXd;

MatD to_double(const Matrix& m);
RowVecD to_row(const Matrix& m);
Matrix to_float(const MatD& m);
Matrix to_float(const Eigen::Ref<const MatD>& m);

void rmsnorm_forward(const MatD& x, const RowVecD& gain, double eps, MatD& y, VecD& inv_rms);
// Returns dx; accumulates into dgain.
MatD rmsnorm_backward(const MatD& x, const RowVecD& gain, const VecD& inv_rms, const MatD& dy,
                      RowVecD& dgain);

// cos/sin of position * base^(-2i/dh) for positions 0..T-1 and pairs i.
struct RopeTable {
  MatD cos;  // T x dh/2
  MatD sin;
};
RopeTable rope_table(std::size_t positions, std::size_t head_dim, double base);

// Rotates interleaved pairs of every head block in rows [row0, row0+T).
// inverse applies the transpose rotation (used for gradients).
void rope_rotate(MatD& m, std::size_t row0, std::size_t rows, std::size_t heads,
                 std::size_t head_dim, const RopeTable& table, bool inverse);

struct HeadAttentionSpec {
  std::size_t window = 0;  // 0 = unrestricted causal
  double alibi_slope = 0.0;
  double qk_scale = 1.0;  // 1/sqrt(dh) times logit scale
  double initial_scale = 1.0;
  std::size_t initial_k = 0;
  // Optional per-key multiplicative edits and masks from logit interventions;
  // indexed by 0-based key position, empty when unused.
  const std::vector<double>* key_scale = nullptr;
  const std::vector<char>* key_mask = nullptr;
};

// Fills logits (T x T, -inf outside support) for one head.
void head_logits(const Eigen::Ref<const MatD>& q, const Eigen::Ref<const MatD>& k,
                 const HeadAttentionSpec& spec, MatD& logits);
// In-place row softmax over the causal support; rows fully masked throw.
void masked_softmax(MatD& logits);

// Plain causal attention for training: probs T x T, out T x dh.
void head_attention_forward(const Eigen::Ref<const MatD>& q, const Eigen::Ref<const MatD>& k,
                            const Eigen::Ref<const MatD>& v, const HeadAttentionSpec& spec,
                            MatD& probs, Eigen::Ref<MatD> out);
void head_attention_backward(const Eigen::Ref<const MatD>& q, const Eigen::Ref<const MatD>& k,
                             const Eigen::Ref<const MatD>& v, const MatD& probs,
                             const Eigen::Ref<const MatD>& dout, double qk_scale,
                             Eigen::Ref<MatD> dq, Eigen::Ref<MatD> dk, Eigen::Ref<MatD> dv);

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace pvlab::detail
