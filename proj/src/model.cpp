#include "pvlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "kernel.hpp"
#include "pvlab/errors.hpp"

namespace pvlab {

using detail::MatD;
using detail::RowVecD;
using detail::VecD;

// ---------------------------------------------------------------------------
// Config

std::string to_string(PeKind kind) {
  switch (kind) {
    case PeKind::NoPE: return "nope";
    case PeKind::RoPE: return "rope";
    case PeKind::ALiBi: return "alibi";
  }
  return "?";
}

std::string to_string(AttnKind kind) { return kind == AttnKind::Full ? "full" : "window"; }

PeKind parse_pe_kind(const std::string& text) {
  if (text == "nope") return PeKind::NoPE;
  if (text == "rope") return PeKind::RoPE;
  if (text == "alibi") return PeKind::ALiBi;
  throw ConfigError("unknown positional encoding '" + text + "' (expected nope|rope|alibi)");
}

AttnKind parse_attn_kind(const std::string& text) {
  if (text == "full") return AttnKind::Full;
  if (text == "window") return AttnKind::Window;
  throw ConfigError("unknown attention kind '" + text + "' (expected full|window)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (layers == 0) fail("layers must be positive");
  if (heads == 0 || dim == 0) fail("heads and dim must be positive");
  if (dim % heads != 0) fail("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (vocab < 2) fail("vocab must be at least 2");
  if (context == 0) fail("context must be positive");
  if (pe == PeKind::RoPE) {
    if (!(rope_base > 0.0)) fail("rope base must be positive");
    if (head_dim() % 2 != 0) fail("rope needs an even head dimension");
  }
  if (attn == AttnKind::Window && (window < 1 || window > context)) {
    fail("window " + std::to_string(window) + " must lie in [1, context]");
  }
  if (!(norm_eps > 0.0f)) fail("norm_eps must be positive");
}

// ---------------------------------------------------------------------------
// Parameters and initialization

std::vector<std::pair<std::string, Matrix*>> TransformerModel::parameters() {
  std::vector<std::pair<std::string, Matrix*>> out;
  out.emplace_back("embedding", &embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& w = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", &w.attn_norm);
    out.emplace_back(p + "wq", &w.wq);
    out.emplace_back(p + "wk", &w.wk);
    out.emplace_back(p + "wv", &w.wv);
    out.emplace_back(p + "wo", &w.wo);
    out.emplace_back(p + "ffn_norm", &w.ffn_norm);
    out.emplace_back(p + "w_gate", &w.w_gate);
    out.emplace_back(p + "w_up", &w.w_up);
    out.emplace_back(p + "w_down", &w.w_down);
  }
  out.emplace_back("final_norm", &final_norm);
  if (!config.tie_embeddings) out.emplace_back("unembedding", &unembedding);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> TransformerModel::parameters() const {
  auto mut = const_cast<TransformerModel*>(this)->parameters();
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.reserve(mut.size());
  for (auto& [name, ptr] : mut) out.emplace_back(name, ptr);
  return out;
}

namespace {

void fill_truncated_normal(Matrix& m, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, sigma);
  for (float& v : m.data()) {
    double x = 0.0;
    do {
      x = normal(rng);
    } while (std::abs(x) > 2.0 * sigma);
    v = static_cast<float>(x);
  }
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  }
  return out;
}

}  // namespace

TransformerModel build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.dim;
  const std::size_t f = config.ffn_dim;
  constexpr double kSigma = 0.02;
  const double out_sigma = kSigma / std::sqrt(2.0 * static_cast<double>(config.layers));

  TransformerModel model;
  model.config = config;
  model.embedding = Matrix(config.vocab, d);
  fill_truncated_normal(model.embedding, kSigma, rng);
  model.layers.resize(config.layers);
  for (auto& w : model.layers) {
    w.attn_norm = Matrix(1, d, 1.0f);
    w.ffn_norm = Matrix(1, d, 1.0f);
    w.wq = Matrix(d, d);
    w.wk = Matrix(d, d);
    w.wv = Matrix(d, d);
    w.wo = Matrix(d, d);
    w.w_gate = Matrix(d, f);
    w.w_up = Matrix(d, f);
    w.w_down = Matrix(f, d);
    fill_truncated_normal(w.wq, kSigma, rng);
    fill_truncated_normal(w.wk, kSigma, rng);
    fill_truncated_normal(w.wv, kSigma, rng);
    fill_truncated_normal(w.wo, out_sigma, rng);
    fill_truncated_normal(w.w_gate, kSigma, rng);
    fill_truncated_normal(w.w_up, kSigma, rng);
    fill_truncated_normal(w.w_down, out_sigma, rng);
  }
  model.final_norm = Matrix(1, d, 1.0f);
  if (config.tie_embeddings) {
    model.unembedding = transpose(model.embedding);
  } else {
    model.unembedding = Matrix(d, config.vocab);
    fill_truncated_normal(model.unembedding, kSigma, rng);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Attention helpers

double alibi_slope(std::size_t head, std::size_t heads) {
  // head is 0-based; slope_h = 2^(-8h/H) for h = 1..H.
  return std::pow(2.0, -8.0 * static_cast<double>(head + 1) / static_cast<double>(heads));
}

double effective_rope_base(const ModelConfig& config, const AttentionAdjust& adjust,
                           std::size_t seq_len) {
  return adjust.rope_base ? adjust.rope_base(seq_len) : config.rope_base;
}

namespace {

std::size_t effective_window(const ModelConfig& config, const AttentionAdjust& adjust) {
  if (adjust.window) return *adjust.window;
  return config.attn == AttnKind::Window ? config.window : 0;
}

detail::HeadAttentionSpec head_spec(const ModelConfig& config, const AttentionAdjust& adjust,
                                    std::size_t head) {
  detail::HeadAttentionSpec spec;
  spec.window = effective_window(config, adjust);
  spec.alibi_slope = config.pe == PeKind::ALiBi ? alibi_slope(head, config.heads) : 0.0;
  spec.qk_scale = adjust.logit_scale / std::sqrt(static_cast<double>(config.head_dim()));
  spec.initial_scale = adjust.initial_scale;
  spec.initial_k = adjust.initial_scale == 1.0 ? 0 : adjust.initial_k;
  return spec;
}

}  // namespace

Matrix attention_logits(const ModelConfig& config, std::size_t head, const Matrix& queries,
                        const Matrix& keys, const AttentionAdjust& adjust) {
  const std::size_t dh = config.head_dim();
  if (queries.cols() != dh || keys.cols() != dh || queries.rows() != keys.rows()) {
    throw ShapeError("attention_logits: queries/keys must both be T x head_dim");
  }
  if (head >= config.heads) throw ShapeError("attention_logits: head out of range");
  const std::size_t t = queries.rows();
  MatD q = detail::to_double(queries);
  MatD k = detail::to_double(keys);
  if (config.pe == PeKind::RoPE) {
    const auto table = detail::rope_table(t, dh, effective_rope_base(config, adjust, t));
    detail::rope_rotate(q, 0, t, 1, dh, table, false);
    detail::rope_rotate(k, 0, t, 1, dh, table, false);
  }
  MatD logits;
  detail::head_logits(q, k, head_spec(config, adjust, head), logits);
  Matrix out(t, t);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<float>(logits.data()[i]);
  return out;
}

Matrix attention_probabilities(const ModelConfig& config, std::size_t head,
                               const Matrix& queries, const Matrix& keys,
                               const AttentionAdjust& adjust) {
  const std::size_t dh = config.head_dim();
  if (queries.cols() != dh || keys.cols() != dh || queries.rows() != keys.rows()) {
    throw ShapeError("attention_probabilities: queries/keys must both be T x head_dim");
  }
  const std::size_t t = queries.rows();
  MatD q = detail::to_double(queries);
  MatD k = detail::to_double(keys);
  if (config.pe == PeKind::RoPE) {
    const auto table = detail::rope_table(t, dh, effective_rope_base(config, adjust, t));
    detail::rope_rotate(q, 0, t, 1, dh, table, false);
    detail::rope_rotate(k, 0, t, 1, dh, table, false);
  }
  MatD probs;
  detail::head_logits(q, k, head_spec(config, adjust, head), probs);
  detail::masked_softmax(probs);
  return detail::to_float(probs);
}

// ---------------------------------------------------------------------------
// Intervention resolution

namespace {

// h' = a * h + b per position, composed across interventions.
struct StreamEdit {
  bool active = false;
  std::vector<double> a;
  std::vector<char> touched;
  MatD b;

  void ensure(std::size_t t, std::size_t width) {
    if (active) return;
    active = true;
    a.assign(t, 1.0);
    touched.assign(t, 0);
    b = MatD::Zero(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(width));
  }

  // Compose a new (a2, b2) on top of the existing edit at one position.
  void apply(std::size_t pos, double a2, const RowVecD& b2) {
    touched[pos] = 1;
    a[pos] *= a2;
    b.row(static_cast<Eigen::Index>(pos)) *= a2;
    b.row(static_cast<Eigen::Index>(pos)) += b2;
  }

  void run(MatD& m, std::size_t col0) const {
    if (!active) return;
    const auto width = b.cols();
    for (Eigen::Index r = 0; r < b.rows(); ++r) {
      if (touched[static_cast<std::size_t>(r)] == 0) continue;
      auto blk = m.row(r).segment(static_cast<Eigen::Index>(col0), width);
      blk = blk * a[static_cast<std::size_t>(r)] + b.row(r);
    }
  }
};

struct LayerEdits {
  std::vector<StreamEdit> value, query, key;  // per head
  StreamEdit output;
  std::vector<double> key_scale;  // logit interventions, per key
  std::vector<char> key_mask;
};

RowVecD row_of(const Matrix& m, std::size_t r) {
  RowVecD out(static_cast<Eigen::Index>(m.cols()));
  for (std::size_t c = 0; c < m.cols(); ++c) out(static_cast<Eigen::Index>(c)) = m(r, c);
  return out;
}

// (a, b) for one intervention at one slot. component is the sample-free
// vector for Positional*/Semantic (p or m), payload the replacement row.
std::pair<double, RowVecD> affine_for(Component comp, const InterventionAction& action,
                                      const RowVecD* component_vec, const RowVecD* payload,
                                      Eigen::Index width) {
  const RowVecD zero = RowVecD::Zero(width);
  if (comp == Component::Whole) {
    if (std::holds_alternative<RemoveAction>(action)) return {0.0, zero};
    if (const auto* s = std::get_if<ScaleAction>(&action)) return {s->factor, zero};
    return {0.0, *payload};
  }
  const RowVecD& x = *component_vec;
  if (comp == Component::SemanticVector) {
    // x is p; semantic part c = h - p.
    if (std::holds_alternative<RemoveAction>(action)) return {0.0, x};
    if (const auto* s = std::get_if<ScaleAction>(&action)) {
      return {s->factor, x * (1.0 - static_cast<double>(s->factor))};
    }
    return {0.0, x + *payload};
  }
  if (std::holds_alternative<RemoveAction>(action)) return {1.0, -x};
  if (const auto* s = std::get_if<ScaleAction>(&action)) {
    return {1.0, x * (static_cast<double>(s->factor) - 1.0)};
  }
  return {1.0, *payload - x};
}

const Matrix& component_matrix(const PositionalDecomposition& dec, Component comp,
                               std::size_t layer) {
  return comp == Component::PositionalBasis ? dec.basis(layer) : dec.positional(layer);
}

std::vector<LayerEdits> resolve_interventions(const ModelConfig& cfg,
                                              const std::vector<InterventionSpec>& interventions,
                                              std::size_t t) {
  std::vector<LayerEdits> edits(cfg.layers);
  const std::size_t dh = cfg.head_dim();
  for (auto& e : edits) {
    e.value.resize(cfg.heads);
    e.query.resize(cfg.heads);
    e.key.resize(cfg.heads);
  }
  for (std::size_t n = 0; n < interventions.size(); ++n) {
    const auto& iv = interventions[n];
    const std::string tag = "intervention #" + std::to_string(n) + ": ";
    if (iv.positions.empty() || iv.layers.empty()) continue;
    if (iv.positions.begin < 1 || iv.positions.end - 1 > t) {
      throw InterventionError(tag + "position range [" + std::to_string(iv.positions.begin) + ", " +
                              std::to_string(iv.positions.end) + ") exceeds sequence length " +
                              std::to_string(t));
    }
    if (iv.layers.begin < 1 || iv.layers.end - 1 > cfg.layers) {
      throw InterventionError(tag + "layer range out of bounds");
    }
    const std::size_t npos = iv.positions.end - iv.positions.begin;
    const auto* replace = std::get_if<ReplaceAction>(&iv.action);
    if (replace != nullptr) {
      if (!replace->payload) throw InterventionError(tag + "replace without payload");
      if (replace->payload->rows() != npos) {
        throw InterventionError(tag + "replace payload has " + std::to_string(replace->payload->rows()) +
                                " rows for " + std::to_string(npos) + " positions");
      }
    }

    if (iv.target == InterventionTarget::AttentionLogits) {
      if (iv.component != Component::Whole) {
        throw InterventionError(tag + "attention logits only support the whole component");
      }
      if (replace != nullptr) throw InterventionError(tag + "attention logits cannot be replaced");
      for (std::size_t l = iv.layers.begin; l < iv.layers.end; ++l) {
        auto& e = edits[l - 1];
        if (e.key_scale.empty()) {
          e.key_scale.assign(t, 1.0);
          e.key_mask.assign(t, 0);
        }
        for (std::size_t pos = iv.positions.begin; pos < iv.positions.end; ++pos) {
          if (const auto* s = std::get_if<ScaleAction>(&iv.action)) {
            e.key_scale[pos - 1] *= s->factor;
          } else {
            e.key_mask[pos - 1] = 1;
          }
        }
      }
      continue;
    }

    // Streams this intervention touches, with the decomposition stream id
    // each one resolves against.
    struct Slot {
      StreamId id;
      std::size_t width;
    };
    std::vector<Slot> slots;
    if (iv.target == InterventionTarget::LayerOutput) {
      slots.push_back({{StreamKind::LayerOutput, 0}, cfg.dim});
    } else {
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        if (iv.target == InterventionTarget::AttentionValue) {
          slots.push_back({{StreamKind::Value, h}, dh});
        } else {
          slots.push_back({{StreamKind::Query, h}, dh});
          slots.push_back({{StreamKind::Key, h}, dh});
        }
      }
    }
    if (replace != nullptr) {
      const std::size_t w = replace->payload->cols();
      const bool ok = iv.target == InterventionTarget::LayerOutput ? w == cfg.dim
                                                                    : (w == cfg.dim || w == dh);
      if (!ok) throw InterventionError(tag + "replace payload width " + std::to_string(w) + " mismatches stream");
    }

    for (const auto& slot : slots) {
      const PositionalDecomposition* dec = nullptr;
      if (iv.component != Component::Whole) {
        if (!iv.decomposition) {
          throw InterventionError(tag + "component removal needs a decomposition for " + to_string(slot.id));
        }
        dec = iv.decomposition->find(slot.id);
        if (dec == nullptr) {
          throw InterventionError(tag + "decomposition lacks stream " + to_string(slot.id));
        }
        if (dec->dim() != slot.width || dec->layers() != cfg.layers) {
          throw InterventionError(tag + "decomposition shape mismatches model for " + to_string(slot.id));
        }
        if (dec->positions() < iv.positions.end - 1) {
          throw InterventionError(tag + "decomposition covers " + std::to_string(dec->positions()) +
                                  " positions, intervention needs " + std::to_string(iv.positions.end - 1));
        }
      }
      for (std::size_t l = iv.layers.begin; l < iv.layers.end; ++l) {
        auto& e = edits[l - 1];
        StreamEdit* se = nullptr;
        switch (slot.id.kind) {
          case StreamKind::LayerOutput: se = &e.output; break;
          case StreamKind::Value: se = &e.value[slot.id.head]; break;
          case StreamKind::Query: se = &e.query[slot.id.head]; break;
          case StreamKind::Key: se = &e.key[slot.id.head]; break;
        }
        se->ensure(t, slot.width);
        for (std::size_t pos = iv.positions.begin; pos < iv.positions.end; ++pos) {
          RowVecD comp_vec;
          if (dec != nullptr) comp_vec = row_of(component_matrix(*dec, iv.component, l), pos - 1);
          RowVecD payload;
          if (replace != nullptr) {
            const Matrix& pm = *replace->payload;
            const std::size_t r = pos - iv.positions.begin;
            payload = row_of(pm, r);
            if (pm.cols() != slot.width) {
              payload = payload.segment(static_cast<Eigen::Index>(slot.id.head * dh),
                                        static_cast<Eigen::Index>(dh)).eval();
            }
          }
          auto [a, b] = affine_for(iv.component, iv.action, dec ? &comp_vec : nullptr,
                                   replace ? &payload : nullptr, static_cast<Eigen::Index>(slot.width));
          se->apply(pos - 1, a, b);
        }
      }
    }
  }
  return edits;
}

struct LayerWeightsD {
  RowVecD attn_norm, ffn_norm;
  MatD wq, wk, wv, wo, w_gate, w_up, w_down;
};

LayerWeightsD to_double(const LayerWeights& w) {
  return {detail::to_row(w.attn_norm), detail::to_row(w.ffn_norm), detail::to_double(w.wq),
          detail::to_double(w.wk), detail::to_double(w.wv), detail::to_double(w.wo),
          detail::to_double(w.w_gate), detail::to_double(w.w_up), detail::to_double(w.w_down)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward

ForwardTrace forward(const TransformerModel& model, std::span<const Token> tokens,
                     const std::vector<InterventionSpec>& interventions,
                     const CaptureFlags& capture, const ForwardHooks& hooks) {
  const ModelConfig& cfg = model.config;
  const std::size_t t = tokens.size();
  if (t == 0) throw ShapeError("forward: empty token sequence");
  const std::size_t d = cfg.dim;
  const std::size_t dh = cfg.head_dim();
  const double eps = cfg.norm_eps;

  auto edits = resolve_interventions(cfg, interventions, t);

  MatD x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < t; ++i) {
    const Token tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab) {
      throw ShapeError("forward: token id " + std::to_string(tok) + " outside vocabulary");
    }
    auto src = model.embedding.row(static_cast<std::size_t>(tok));
    for (std::size_t c = 0; c < d; ++c) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = src[c];
  }

  ForwardTrace trace;
  detail::RopeTable rope;
  if (cfg.pe == PeKind::RoPE) {
    rope = detail::rope_table(t, dh, effective_rope_base(cfg, hooks.attention, t));
  }

  MatD a, q, k, v, o(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d)), probs, b, g, u;
  VecD inv;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerWeightsD w = to_double(model.layers[l]);
    const LayerEdits& e = edits[l];
    detail::rmsnorm_forward(x, w.attn_norm, eps, a, inv);
    q.noalias() = a * w.wq;
    k.noalias() = a * w.wk;
    v.noalias() = a * w.wv;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      e.value[h].run(v, h * dh);
      e.query[h].run(q, h * dh);
      e.key[h].run(k, h * dh);
    }
    if (capture.qkv) {
      auto split = [&](const MatD& m) {
        std::vector<Matrix> heads;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
          heads.push_back(detail::to_float(MatD(m.middleCols(static_cast<Eigen::Index>(h * dh),
                                                             static_cast<Eigen::Index>(dh)))));
        }
        return heads;
      };
      trace.queries.push_back(split(q));
      trace.keys.push_back(split(k));
      trace.values.push_back(split(v));
    }
    if (cfg.pe == PeKind::RoPE) {
      detail::rope_rotate(q, 0, t, cfg.heads, dh, rope, false);
      detail::rope_rotate(k, 0, t, cfg.heads, dh, rope, false);
    }
    if (capture.attention) trace.attention.emplace_back();
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      auto spec = head_spec(cfg, hooks.attention, h);
      if (!e.key_scale.empty()) {
        spec.key_scale = &e.key_scale;
        spec.key_mask = &e.key_mask;
      }
      const auto cols = static_cast<Eigen::Index>(h * dh);
      const auto width = static_cast<Eigen::Index>(dh);
      detail::head_attention_forward(q.middleCols(cols, width), k.middleCols(cols, width),
                                     v.middleCols(cols, width), spec, probs,
                                     o.middleCols(cols, width));
      if (capture.attention) trace.attention.back().push_back(detail::to_float(probs));
    }
    x.noalias() += o * w.wo;

    detail::rmsnorm_forward(x, w.ffn_norm, eps, b, inv);
    g.noalias() = b * w.w_gate;
    u.noalias() = b * w.w_up;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      const double gi = g.data()[i];
      g.data()[i] = gi * detail::sigmoid(gi) * u.data()[i];
    }
    x.noalias() += g * w.w_down;

    if (hooks.layer_output) {
      hooks.layer_output(l + 1, HiddenRows{x.data(), t, d});
    }
    e.output.run(x, 0);
    if (capture.layer_outputs) trace.layer_outputs.push_back(detail::to_float(x));
  }

  if (capture.logits) {
    MatD xn;
    detail::rmsnorm_forward(x, detail::to_row(model.final_norm), eps, xn, inv);
    const MatD unembed = model.config.tie_embeddings ? MatD(detail::to_double(model.embedding).transpose())
                                                     : detail::to_double(model.unembedding);
    MatD logits = xn * unembed;
    trace.logits = detail::to_float(logits);
  }
  return trace;
}

}  // namespace pvlab
