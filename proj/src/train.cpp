#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "kernel.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/model.hpp"

namespace pvlab {

using detail::MatD;
using detail::RowVecD;
using detail::VecD;

namespace {

struct LayerParamsD {
  RowVecD attn_norm, ffn_norm;
  MatD wq, wk, wv, wo, w_gate, w_up, w_down;
};

struct LayerCache {
  MatD x_in, a, q, k, v, o, x_mid, b, gate, up, act;
  VecD inv1, inv2;
  std::vector<MatD> probs;  // [seq * heads + head]
};

struct LayerGrads {
  RowVecD attn_norm, ffn_norm;
  MatD wq, wk, wv, wo, w_gate, w_up, w_down;
};

void store(std::vector<Matrix>& out, std::size_t& idx, const MatD& m) {
  out[idx++] = detail::to_float(m);
}

void store_row(std::vector<Matrix>& out, std::size_t& idx, const RowVecD& r) {
  Matrix m(1, static_cast<std::size_t>(r.size()));
  for (Eigen::Index i = 0; i < r.size(); ++i) m.data()[static_cast<std::size_t>(i)] = static_cast<float>(r(i));
  out[idx++] = std::move(m);
}

}  // namespace

double loss_and_gradients(const TransformerModel& model,
                          const std::vector<std::span<const Token>>& sequences,
                          std::vector<Matrix>* gradients) {
  const ModelConfig& cfg = model.config;
  if (sequences.empty()) throw ShapeError("loss_and_gradients: no sequences");
  const std::size_t len = sequences.front().size();
  if (len < 2) throw ShapeError("loss_and_gradients: sequences need at least 2 tokens");
  for (const auto& s : sequences) {
    if (s.size() != len) throw ShapeError("loss_and_gradients: ragged batch");
  }
  const std::size_t t = len - 1;
  const std::size_t nseq = sequences.size();
  const auto rows = static_cast<Eigen::Index>(t * nseq);
  const std::size_t d = cfg.dim;
  const std::size_t dh = cfg.head_dim();
  const double eps = cfg.norm_eps;
  const double qk_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<LayerParamsD> params(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& w = model.layers[l];
    params[l] = {detail::to_row(w.attn_norm), detail::to_row(w.ffn_norm), detail::to_double(w.wq),
                 detail::to_double(w.wk),     detail::to_double(w.wv),      detail::to_double(w.wo),
                 detail::to_double(w.w_gate), detail::to_double(w.w_up),    detail::to_double(w.w_down)};
  }
  // Tied models read the embedding directly so a stale mirror cannot leak in.
  const MatD unembed = cfg.tie_embeddings ? MatD(detail::to_double(model.embedding).transpose())
                                          : detail::to_double(model.unembedding);
  const RowVecD final_gain = detail::to_row(model.final_norm);

  MatD x(rows, static_cast<Eigen::Index>(d));
  std::vector<Token> targets(static_cast<std::size_t>(rows));
  for (std::size_t s = 0; s < nseq; ++s) {
    for (std::size_t i = 0; i < t; ++i) {
      const Token tok = sequences[s][i];
      const Token nxt = sequences[s][i + 1];
      if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab || nxt < 0 ||
          static_cast<std::size_t>(nxt) >= cfg.vocab) {
        throw ShapeError("loss_and_gradients: token outside vocabulary");
      }
      auto src = model.embedding.row(static_cast<std::size_t>(tok));
      const auto r = static_cast<Eigen::Index>(s * t + i);
      for (std::size_t c = 0; c < d; ++c) x(r, static_cast<Eigen::Index>(c)) = src[c];
      targets[s * t + i] = nxt;
    }
  }

  detail::RopeTable rope;
  if (cfg.pe == PeKind::RoPE) rope = detail::rope_table(t, dh, cfg.rope_base);
  auto spec_for = [&](std::size_t h) {
    detail::HeadAttentionSpec spec;
    spec.window = cfg.attn == AttnKind::Window ? cfg.window : 0;
    spec.alibi_slope = cfg.pe == PeKind::ALiBi ? alibi_slope(h, cfg.heads) : 0.0;
    spec.qk_scale = qk_scale;
    return spec;
  };

  std::vector<LayerCache> caches(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto& c = caches[l];
    const auto& w = params[l];
    c.x_in = x;
    detail::rmsnorm_forward(x, w.attn_norm, eps, c.a, c.inv1);
    c.q.noalias() = c.a * w.wq;
    c.k.noalias() = c.a * w.wk;
    c.v.noalias() = c.a * w.wv;
    c.o.resize(rows, static_cast<Eigen::Index>(d));
    c.probs.resize(nseq * cfg.heads);
    for (std::size_t s = 0; s < nseq; ++s) {
      if (cfg.pe == PeKind::RoPE) {
        detail::rope_rotate(c.q, s * t, t, cfg.heads, dh, rope, false);
        detail::rope_rotate(c.k, s * t, t, cfg.heads, dh, rope, false);
      }
      const auto r0 = static_cast<Eigen::Index>(s * t);
      const auto tr = static_cast<Eigen::Index>(t);
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * dh);
        const auto w0 = static_cast<Eigen::Index>(dh);
        detail::head_attention_forward(c.q.block(r0, c0, tr, w0), c.k.block(r0, c0, tr, w0),
                                       c.v.block(r0, c0, tr, w0), spec_for(h),
                                       c.probs[s * cfg.heads + h], c.o.block(r0, c0, tr, w0));
      }
    }
    x.noalias() += c.o * w.wo;
    c.x_mid = x;
    detail::rmsnorm_forward(x, w.ffn_norm, eps, c.b, c.inv2);
    c.gate.noalias() = c.b * w.w_gate;
    c.up.noalias() = c.b * w.w_up;
    c.act.resize(c.gate.rows(), c.gate.cols());
    for (Eigen::Index i = 0; i < c.gate.size(); ++i) {
      const double gi = c.gate.data()[i];
      c.act.data()[i] = gi * detail::sigmoid(gi) * c.up.data()[i];
    }
    x.noalias() += c.act * w.w_down;
  }

  MatD xn;
  VecD inv_f;
  detail::rmsnorm_forward(x, final_gain, eps, xn, inv_f);
  MatD logits = xn * unembed;
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto row = logits.row(r);
    const double mx = row.maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) denom += std::exp(row(j) - mx);
    const double lse = mx + std::log(denom);
    loss -= row(targets[static_cast<std::size_t>(r)]) - lse;
    if (gradients != nullptr) {
      for (Eigen::Index j = 0; j < row.size(); ++j) row(j) = std::exp(row(j) - lse) * inv_n;
      row(targets[static_cast<std::size_t>(r)]) -= inv_n;
    }
  }
  loss *= inv_n;
  if (gradients == nullptr) return loss;

  // Backward. logits now holds dL/dlogits.
  const MatD& dlogits = logits;
  MatD d_unembed = xn.transpose() * dlogits;
  MatD dxn = dlogits * unembed.transpose();
  RowVecD d_final = RowVecD::Zero(static_cast<Eigen::Index>(d));
  MatD dx = detail::rmsnorm_backward(x, final_gain, inv_f, dxn, d_final);

  std::vector<LayerGrads> grads(cfg.layers);
  for (std::size_t li = cfg.layers; li-- > 0;) {
    auto& c = caches[li];
    const auto& w = params[li];
    auto& gr = grads[li];
    gr.attn_norm = RowVecD::Zero(static_cast<Eigen::Index>(d));
    gr.ffn_norm = RowVecD::Zero(static_cast<Eigen::Index>(d));

    gr.w_down.noalias() = c.act.transpose() * dx;
    MatD dact = dx * w.w_down.transpose();
    MatD dgate(dact.rows(), dact.cols());
    MatD dup(dact.rows(), dact.cols());
    for (Eigen::Index i = 0; i < dact.size(); ++i) {
      const double gi = c.gate.data()[i];
      const double sg = detail::sigmoid(gi);
      const double silu = gi * sg;
      dup.data()[i] = dact.data()[i] * silu;
      dgate.data()[i] = dact.data()[i] * c.up.data()[i] * sg * (1.0 + gi * (1.0 - sg));
    }
    gr.w_gate.noalias() = c.b.transpose() * dgate;
    gr.w_up.noalias() = c.b.transpose() * dup;
    MatD db = dgate * w.w_gate.transpose();
    db.noalias() += dup * w.w_up.transpose();
    MatD dx_mid = dx + detail::rmsnorm_backward(c.x_mid, w.ffn_norm, c.inv2, db, gr.ffn_norm);

    gr.wo.noalias() = c.o.transpose() * dx_mid;
    MatD dout = dx_mid * w.wo.transpose();
    MatD dq(rows, static_cast<Eigen::Index>(d));
    MatD dk(rows, static_cast<Eigen::Index>(d));
    MatD dv(rows, static_cast<Eigen::Index>(d));
    for (std::size_t s = 0; s < nseq; ++s) {
      const auto r0 = static_cast<Eigen::Index>(s * t);
      const auto tr = static_cast<Eigen::Index>(t);
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * dh);
        const auto w0 = static_cast<Eigen::Index>(dh);
        detail::head_attention_backward(c.q.block(r0, c0, tr, w0), c.k.block(r0, c0, tr, w0),
                                        c.v.block(r0, c0, tr, w0), c.probs[s * cfg.heads + h],
                                        dout.block(r0, c0, tr, w0), qk_scale,
                                        dq.block(r0, c0, tr, w0), dk.block(r0, c0, tr, w0),
                                        dv.block(r0, c0, tr, w0));
      }
      if (cfg.pe == PeKind::RoPE) {
        detail::rope_rotate(dq, s * t, t, cfg.heads, dh, rope, true);
        detail::rope_rotate(dk, s * t, t, cfg.heads, dh, rope, true);
      }
    }
    gr.wq.noalias() = c.a.transpose() * dq;
    gr.wk.noalias() = c.a.transpose() * dk;
    gr.wv.noalias() = c.a.transpose() * dv;
    MatD da = dq * w.wq.transpose();
    da.noalias() += dk * w.wk.transpose();
    da.noalias() += dv * w.wv.transpose();
    dx = dx_mid + detail::rmsnorm_backward(c.x_in, w.attn_norm, c.inv1, da, gr.attn_norm);
  }

  MatD d_embed = MatD::Zero(static_cast<Eigen::Index>(cfg.vocab), static_cast<Eigen::Index>(d));
  for (std::size_t s = 0; s < nseq; ++s) {
    for (std::size_t i = 0; i < t; ++i) {
      const auto r = static_cast<Eigen::Index>(s * t + i);
      d_embed.row(sequences[s][i]) += dx.row(r);
    }
  }
  if (cfg.tie_embeddings) d_embed += d_unembed.transpose();

  const auto names = model.parameters();
  gradients->assign(names.size(), Matrix());
  std::size_t idx = 0;
  store(*gradients, idx, d_embed);
  for (const auto& gr : grads) {
    store_row(*gradients, idx, gr.attn_norm);
    store(*gradients, idx, gr.wq);
    store(*gradients, idx, gr.wk);
    store(*gradients, idx, gr.wv);
    store(*gradients, idx, gr.wo);
    store_row(*gradients, idx, gr.ffn_norm);
    store(*gradients, idx, gr.w_gate);
    store(*gradients, idx, gr.w_up);
    store(*gradients, idx, gr.w_down);
  }
  store_row(*gradients, idx, d_final);
  if (!cfg.tie_embeddings) store(*gradients, idx, d_unembed);
  return loss;
}

double learning_rate(const TrainConfig& config, std::size_t step) {
  if (config.warmup > 0 && step < config.warmup) {
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup);
  }
  const std::size_t decay_steps = config.steps > config.warmup ? config.steps - config.warmup : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - std::min(step, config.warmup)) / static_cast<double>(decay_steps));
  return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainResult train(TransformerModel model, std::span<const Token> corpus, const TrainConfig& config,
                  const TrainProgress& progress) {
  const ModelConfig& cfg = model.config;
  cfg.validate();
  const std::size_t seq_len = cfg.context + 1;
  if (config.batch == 0) throw ConfigError("train: batch must be positive");
  if (corpus.size() < seq_len) {
    throw DataError("train: corpus of " + std::to_string(corpus.size()) +
                    " tokens cannot fill one sequence of " + std::to_string(seq_len));
  }
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> offset(0, corpus.size() - seq_len);

  auto params = model.parameters();
  std::vector<std::vector<double>> m1(params.size()), m2(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m1[i].assign(params[i].second->size(), 0.0);
    m2[i].assign(params[i].second->size(), 0.0);
  }

  TrainResult result;
  std::vector<Matrix> grads;
  std::vector<std::span<const Token>> batch(config.batch);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto& s : batch) s = corpus.subspan(offset(rng), seq_len);
    const double loss = loss_and_gradients(model, batch, &grads);
    if (!std::isfinite(loss)) {
      throw TrainingError("train: loss diverged at step " + std::to_string(step), step);
    }
    double sq = 0.0;
    for (const auto& g : grads) {
      for (float v : g.data()) sq += static_cast<double>(v) * v;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
      throw TrainingError("train: gradient diverged at step " + std::to_string(step), step);
    }
    const double clip = (config.grad_clip > 0.0 && norm > config.grad_clip) ? config.grad_clip / norm : 1.0;
    const double lr = learning_rate(config, step);
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step + 1));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool decay = params[i].first.find("norm") == std::string::npos;
      auto w = params[i].second->data();
      auto g = grads[i].data();
      auto& mm = m1[i];
      auto& vv = m2[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        mm[j] = config.beta1 * mm[j] + (1.0 - config.beta1) * gj;
        vv[j] = config.beta2 * vv[j] + (1.0 - config.beta2) * gj * gj;
        const double update = (mm[j] / bc1) / (std::sqrt(vv[j] / bc2) + config.adam_eps);
        double wj = w[j];
        if (decay) wj -= lr * config.weight_decay * wj;
        wj -= lr * update;
        w[j] = static_cast<float>(wj);
      }
    }
    if (cfg.tie_embeddings) {
      for (std::size_t r = 0; r < cfg.vocab; ++r) {
        for (std::size_t c = 0; c < cfg.dim; ++c) model.unembedding(c, r) = model.embedding(r, c);
      }
    }
    result.loss_curve.push_back(loss);
    if (progress) progress(step, loss, lr);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace pvlab
