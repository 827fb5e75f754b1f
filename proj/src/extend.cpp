#include "pvlab/extend.hpp"

#include <cmath>
#include <sstream>

#include "pvlab/decompose.hpp"
#include "pvlab/errors.hpp"

namespace pvlab {

std::string to_string(ExtensionMethod m) {
  switch (m) {
    case ExtensionMethod::None: return "none";
    case ExtensionMethod::AttentionScaling: return "attention-scaling";
    case ExtensionMethod::InitialScaling: return "initial-scaling";
    case ExtensionMethod::DynamicNTK: return "dynamic-ntk";
    case ExtensionMethod::PositionalVectorReplacement: return "pvr";
    case ExtensionMethod::AttentionWindowExtension: return "awe";
  }
  return "?";
}

ExtensionMethod parse_extension_method(const std::string& text) {
  for (auto m : {ExtensionMethod::None, ExtensionMethod::AttentionScaling, ExtensionMethod::InitialScaling,
                 ExtensionMethod::DynamicNTK, ExtensionMethod::PositionalVectorReplacement,
                 ExtensionMethod::AttentionWindowExtension}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown extension method '" + text +
                    "' (expected none, attention-scaling, initial-scaling, dynamic-ntk, pvr, awe)");
}

std::string describe(const ExtensionSpec& s) {
  std::ostringstream out;
  out << to_string(s.method);
  switch (s.method) {
    case ExtensionMethod::None: break;
    case ExtensionMethod::AttentionScaling: out << "(lambda=" << s.lambda << ")"; break;
    case ExtensionMethod::InitialScaling: out << "(lambda=" << s.lambda << ",k=" << s.initial_k << ")"; break;
    case ExtensionMethod::DynamicNTK: out << "(target=" << s.target_len << ")"; break;
    case ExtensionMethod::PositionalVectorReplacement:
      out << "(layer=" << s.layer << ",r=" << s.r << ",alpha=" << s.alpha << ")";
      break;
    case ExtensionMethod::AttentionWindowExtension: out << "(r=" << s.r << ",lambda=" << s.lambda << ")"; break;
  }
  return out.str();
}

double dynamic_ntk_base(double base, std::size_t head_dim, std::size_t context, std::size_t target_len,
                        std::size_t seq_len) {
  if (seq_len <= context) return base;
  const double factor = static_cast<double>(target_len) / static_cast<double>(context);
  const double grow = factor * static_cast<double>(seq_len) / static_cast<double>(context) - (factor - 1.0);
  const double d = static_cast<double>(head_dim);
  return base * std::pow(grow, d / (d - 2.0));
}

ExtendedModel::ExtendedModel(const TransformerModel& model, ExtensionSpec spec)
    : model_(&model), spec_(std::move(spec)) {
  const ModelConfig& cfg = model.config;
  const auto need_positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive and finite");
  };
  switch (spec_.method) {
    case ExtensionMethod::None: break;
    case ExtensionMethod::AttentionScaling:
      need_positive(spec_.lambda, "lambda");
      hooks_.attention.logit_scale = spec_.lambda;
      break;
    case ExtensionMethod::InitialScaling:
      need_positive(spec_.lambda, "lambda");
      hooks_.attention.initial_scale = spec_.lambda;
      hooks_.attention.initial_k = spec_.initial_k;
      break;
    case ExtensionMethod::DynamicNTK: {
      if (cfg.pe != PeKind::RoPE) throw CapabilityError("dynamic NTK needs a RoPE model");
      if (spec_.target_len < cfg.context) throw ConfigError("dynamic NTK target must be at least the context");
      if (cfg.head_dim() <= 2) throw ConfigError("dynamic NTK needs head_dim > 2");
      const double base = cfg.rope_base;
      const std::size_t dh = cfg.head_dim(), c = cfg.context, target = spec_.target_len;
      hooks_.attention.rope_base = [=](std::size_t t) { return dynamic_ntk_base(base, dh, c, target, t); };
      break;
    }
    case ExtensionMethod::AttentionWindowExtension: {
      if (cfg.attn != AttnKind::Window) throw CapabilityError("attention window extension needs a window model");
      if (!(spec_.r >= 1.0)) throw ConfigError("r must be >= 1");
      if (!(spec_.lambda >= 1.0)) throw ConfigError("lambda must be >= 1");
      hooks_.attention.window = static_cast<std::size_t>(std::floor(spec_.r * static_cast<double>(cfg.window)));
      hooks_.attention.logit_scale = spec_.lambda;
      break;
    }
    case ExtensionMethod::PositionalVectorReplacement: {
      const auto& dec = spec_.decomposition;
      if (!dec) throw CapabilityError("positional vector replacement needs a layer-output decomposition");
      if (dec->stream.kind != StreamKind::LayerOutput) {
        throw CapabilityError("positional vector replacement needs the layer-output stream, got " +
                              to_string(dec->stream));
      }
      if (spec_.layer < 1 || spec_.layer > cfg.layers || spec_.layer > dec->layers()) {
        throw ConfigError("replacement layer " + std::to_string(spec_.layer) + " out of range");
      }
      if (!(spec_.r >= 1.0)) throw ConfigError("r must be >= 1");
      if (!(spec_.alpha >= 1.0)) throw ConfigError("alpha must be >= 1");
      const std::size_t c = cfg.context, k = spec_.initial_k;
      if (dec->positions() < c || dec->dim() != cfg.dim) {
        throw CapabilityError("decomposition must cover positions 1.." + std::to_string(c) + " at width " +
                              std::to_string(cfg.dim));
      }
      if (k + 2 > c) throw ConfigError("initial_k leaves fewer than 2 positions to interpolate");
      const Matrix& p = dec->positional(spec_.layer);
      const Matrix source = p.slice_rows(k, c);
      // Affine index map anchored at position k+1: new position t reads the
      // source at k+1 + (t-k-1)/r, so r = 1 is the identity.
      const auto len = static_cast<std::size_t>(std::floor(spec_.r * static_cast<double>(c - k - 1))) + 1;
      interpolated_ = interp_linear(source, len, true);
      max_length_ = k + len;
      const std::size_t layer = spec_.layer;
      const double alpha = spec_.alpha;
      const std::size_t bank = p.rows();
      const std::size_t limit = *max_length_;
      // Shared ownership keeps the bank and interpolant alive in copies.
      auto dec_ref = dec;
      auto hat = std::make_shared<const Matrix>(interpolated_);
      hooks_.layer_output = [=](std::size_t l, HiddenRows h) {
        if (l != layer) return;
        if (h.rows > limit) {
          throw ExtensionExhaustedError("position " + std::to_string(h.rows) + " exceeds the replacement range of " +
                                        std::to_string(limit) + " positions");
        }
        const Matrix& orig = dec_ref->positional(layer);
        for (std::size_t t = k + 1; t <= h.rows; ++t) {
          auto row = h.row(t - 1);
          const auto sub = orig.row(std::min(t, bank) - 1);
          const auto add = hat->row(t - k - 1);
          for (std::size_t c2 = 0; c2 < row.size(); ++c2) {
            row[c2] = (row[c2] - static_cast<double>(sub[c2])) + alpha * static_cast<double>(add[c2]);
          }
        }
      };
      break;
    }
  }
}

ForwardTrace ExtendedModel::forward(std::span<const Token> tokens, const std::vector<InterventionSpec>& interventions,
                                    const CaptureFlags& capture) const {
  return pvlab::forward(*model_, tokens, interventions, capture, hooks_);
}

PerplexityResult ExtendedModel::perplexity(std::span<const Token> tokens, const PerplexityOptions& options,
                                           const std::vector<InterventionSpec>& interventions) const {
  return pvlab::perplexity(*model_, tokens, options, interventions, hooks_);
}

ExtendedModel attention_scaling(const TransformerModel& model, double lambda) {
  ExtensionSpec s;
  s.method = ExtensionMethod::AttentionScaling;
  s.lambda = lambda;
  return {model, s};
}

ExtendedModel initial_scaling(const TransformerModel& model, double lambda, std::size_t initial_k) {
  ExtensionSpec s;
  s.method = ExtensionMethod::InitialScaling;
  s.lambda = lambda;
  s.initial_k = initial_k;
  return {model, s};
}

ExtendedModel dynamic_ntk(const TransformerModel& model, std::size_t target_len) {
  ExtensionSpec s;
  s.method = ExtensionMethod::DynamicNTK;
  s.target_len = target_len;
  return {model, s};
}

ExtendedModel positional_vector_replacement(const TransformerModel& model,
                                            std::shared_ptr<const PositionalDecomposition> decomposition,
                                            std::size_t layer, double r, double alpha, std::size_t initial_k) {
  ExtensionSpec s;
  s.method = ExtensionMethod::PositionalVectorReplacement;
  s.decomposition = std::move(decomposition);
  s.layer = layer;
  s.r = r;
  s.alpha = alpha;
  s.initial_k = initial_k;
  return {model, s};
}

ExtendedModel attention_window_extension(const TransformerModel& model, double r, double lambda) {
  ExtensionSpec s;
  s.method = ExtensionMethod::AttentionWindowExtension;
  s.r = r;
  s.lambda = lambda;
  return {model, s};
}

double windowed_ppl(const ExtendedModel& model, std::span<const Token> corpus, std::size_t length,
                    std::size_t samples, std::uint64_t seed) {
  const auto nll = position_nll(model.model(), corpus, length, samples, seed, {}, model.hooks());
  double sum = 0.0;
  for (double v : nll) sum += v;
  return std::exp(sum / static_cast<double>(nll.size()));
}

LayerSweep replacement_layer_sweep(const TransformerModel& model,
                                   std::shared_ptr<const PositionalDecomposition> decomposition,
                                   const std::vector<std::size_t>& candidates, double r, double alpha,
                                   std::span<const Token> eval_corpus, std::size_t length, std::size_t samples,
                                   std::uint64_t seed) {
  if (candidates.empty()) throw ConfigError("replacement_layer_sweep: no candidate layers");
  LayerSweep out;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t layer : candidates) {
    const auto wrapped = positional_vector_replacement(model, decomposition, layer, r, alpha);
    const double ppl = windowed_ppl(wrapped, eval_corpus, length, samples, seed);
    out.points.push_back({layer, ppl});
    // Ties go to the shallower layer so the result ignores candidate order.
    if (ppl < best || (ppl == best && layer < out.best_layer)) {
      best = ppl;
      out.best_layer = layer;
    }
  }
  return out;
}

std::vector<InterpolationRatio> ratio_per_layer(const PositionalDecomposition& orig,
                                                const PositionalDecomposition& extended,
                                                const std::vector<std::size_t>& layers, std::size_t context) {
  std::vector<InterpolationRatio> out;
  for (std::size_t l : layers) out.push_back(effective_interpolation_ratio(orig, extended, l, context));
  return out;
}

}  // namespace pvlab
