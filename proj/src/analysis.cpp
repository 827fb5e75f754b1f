#include "pvlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "pvlab/errors.hpp"

namespace pvlab {

namespace {

double distance(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Linear-interpolated quantile of an unsorted sample.
double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ShapeError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

// ---------------------------------------------------------------------------
// PCA

PcaPositions pca_positions(const PositionalDecomposition& dec, std::size_t layer, std::size_t k) {
  const Matrix& p = dec.positional(layer);
  bool all_equal = true;
  for (std::size_t r = 1; r < p.rows() && all_equal; ++r) {
    all_equal = std::equal(p.row(r).begin(), p.row(r).end(), p.row(0).begin());
  }
  if (all_equal) {
    throw ConvergenceError("pca_positions: every positional vector of layer " + std::to_string(layer) +
                               " is identical; nothing to project",
                           0);
  }
  const auto proj = pca_topk(p, k);
  return {layer, pca_project(proj, p), proj.explained_variance};
}

PcaSeparation pca_separation(const Matrix& coords, std::size_t initial, std::size_t late_from,
                             double percentile) {
  if (initial < 2 || initial > coords.rows() || late_from < 1 || late_from + 1 > coords.rows()) {
    throw ShapeError("pca_separation: position groups out of range");
  }
  PcaSeparation out;
  out.initial_min = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < initial; ++i) {
    for (std::size_t j = i + 1; j < initial; ++j) {
      out.initial_min = std::min(out.initial_min, distance(coords.row(i), coords.row(j)));
    }
  }
  std::vector<double> late;
  for (std::size_t i = late_from - 1; i < coords.rows(); ++i) {
    for (std::size_t j = i + 1; j < coords.rows(); ++j) late.push_back(distance(coords.row(i), coords.row(j)));
  }
  out.late_percentile = quantile(std::move(late), percentile);
  return out;
}

double nearest_neighbor_cv(const Matrix& coords) {
  if (coords.rows() < 3) throw ShapeError("nearest_neighbor_cv: need at least 3 points");
  std::vector<double> nn(coords.rows(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    for (std::size_t j = 0; j < coords.rows(); ++j) {
      if (i != j) nn[i] = std::min(nn[i], distance(coords.row(i), coords.row(j)));
    }
  }
  const double mean = std::accumulate(nn.begin(), nn.end(), 0.0) / static_cast<double>(nn.size());
  double var = 0.0;
  for (double v : nn) var += (v - mean) * (v - mean);
  var /= static_cast<double>(nn.size());
  if (mean == 0.0) throw UndefinedSimilarityError("nearest_neighbor_cv: all points coincide");
  return std::sqrt(var) / mean;
}

// ---------------------------------------------------------------------------
// Distinct counts

DistinctCountRow distinct_count(const PositionalDecomposition& dec, std::size_t layer, std::size_t window,
                                double threshold, std::optional<std::size_t> reference) {
  if (window == 0) throw ConfigError("distinct_count: window must be positive");
  const Matrix& p = dec.positional(layer);
  const std::size_t t = p.rows();
  DistinctCountRow row;
  row.layer = layer;
  row.trf = std::min(window * layer, t);
  row.reference = reference.value_or(std::min(window * dec.layers() + window / 2, t));
  if (row.reference < 1 || row.reference > t) throw ShapeError("distinct_count: reference outside positions");
  if (t <= window * layer || row.reference <= window * layer) {
    row.saturated = true;
    row.distinct_count = t;
    return row;
  }
  const auto ref = p.row(row.reference - 1);
  for (std::size_t i = 0; i < t; ++i) {
    if (cosine(p.row(i), ref) < threshold) ++row.distinct_count;
  }
  return row;
}

DistinctCountCurve distinct_count_curve(const PositionalDecomposition& dec, std::size_t window,
                                        double threshold) {
  DistinctCountCurve curve;
  curve.threshold = threshold;
  for (std::size_t l = 1; l <= dec.layers(); ++l) curve.rows.push_back(distinct_count(dec, l, window, threshold));
  return curve;
}

// ---------------------------------------------------------------------------
// Ablation

std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::Original: return "original";
    case AblationVariant::WoValue: return "wo_value";
    case AblationVariant::WoPositionalVector: return "wo_positional_vector";
    case AblationVariant::WoPositionalBasis: return "wo_positional_basis";
    case AblationVariant::WoSemanticVector: return "wo_semantic_vector";
  }
  return "?";
}

namespace {

struct AblationRun {
  Matrix p_avg;  // T x D, layer-averaged positional vectors
  double ppl = 0.0;
};

AblationRun run_ablation(const TransformerModel& model, std::span<const Token> corpus,
                         const std::vector<std::size_t>& starts,
                         const std::vector<InterventionSpec>& interventions) {
  const std::size_t c = model.config.context;
  const std::size_t d = model.config.dim;
  const std::size_t layers = model.config.layers;
  std::vector<double> acc(c * d, 0.0);
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t s0 : starts) {
    const auto window = corpus.subspan(s0, c + 1);
    const auto input = window.first(c);
    const auto trace = forward(model, input, interventions);
    for (const auto& h : trace.layer_outputs) {
      const auto src = h.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
    }
    // Score every position including the final one against the token after
    // the window.
    const auto scored = token_nll(trace.logits, window.first(c));
    for (double v : scored) nll += v;
    count += scored.size();
    const auto last = trace.logits.row(c - 1);
    double mx = last[0];
    for (float v : last) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (float v : last) z += std::exp(static_cast<double>(v) - mx);
    nll += mx + std::log(z) - last[static_cast<std::size_t>(window[c])];
    ++count;
  }
  AblationRun run;
  run.p_avg = Matrix(c, d);
  const double scale = 1.0 / (static_cast<double>(starts.size()) * static_cast<double>(layers));
  for (std::size_t i = 0; i < acc.size(); ++i) run.p_avg.data()[i] = static_cast<float>(acc[i] * scale);
  run.ppl = std::exp(nll / static_cast<double>(count));
  return run;
}

}  // namespace

std::vector<AblationResult> ablation_study(const TransformerModel& model,
                                           std::shared_ptr<const DecompositionSet> values,
                                           std::span<const Token> eval_corpus, const AblationOptions& options) {
  const ModelConfig& cfg = model.config;
  const std::size_t c = cfg.context;
  if (!values) throw CapabilityError("ablation_study: no value decompositions supplied");
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const auto* dec = values->find({StreamKind::Value, h});
    if (dec == nullptr) throw CapabilityError("ablation_study: missing value decomposition for head " + std::to_string(h));
    if (dec->positions() < c) throw CapabilityError("ablation_study: value decomposition shorter than the context");
  }
  std::vector<AblationGroup> groups = options.groups;
  if (groups.empty()) {
    groups.push_back({"initial", {1, 5}});
    groups.push_back({"secondary", {5, c / 8 + 1}});
  }
  const IndexRange layers = options.layers.value_or(IndexRange{2, cfg.layers + 1});
  const std::size_t late_from = options.late_from == 0 ? c / 8 + 1 : options.late_from;
  if (late_from > c) throw ConfigError("ablation_study: late positions start beyond the context");

  // Windows of C+1 tokens so the last position is scored too.
  const auto starts = sample_windows(eval_corpus.size(), c + 1, options.samples, options.seed);
  const AblationRun clean = run_ablation(model, eval_corpus, starts, {});

  std::vector<AblationResult> out;
  out.push_back({AblationVariant::Original, "all", {1, 1}, 1.0, clean.ppl});
  for (AblationVariant variant : options.variants) {
    if (variant == AblationVariant::Original) continue;
    for (const auto& group : groups) {
      InterventionSpec iv;
      iv.target = InterventionTarget::AttentionValue;
      iv.action = RemoveAction{};
      iv.positions = group.positions;
      iv.layers = layers;
      iv.decomposition = values;
      switch (variant) {
        case AblationVariant::WoValue: iv.component = Component::Whole; break;
        case AblationVariant::WoPositionalVector: iv.component = Component::PositionalVector; break;
        case AblationVariant::WoPositionalBasis: iv.component = Component::PositionalBasis; break;
        case AblationVariant::WoSemanticVector: iv.component = Component::SemanticVector; break;
        case AblationVariant::Original: break;
      }
      const AblationRun run = run_ablation(model, eval_corpus, starts, {iv});
      double sim = 0.0;
      for (std::size_t t = late_from; t <= c; ++t) sim += cosine(clean.p_avg.row(t - 1), run.p_avg.row(t - 1));
      sim /= static_cast<double>(c - late_from + 1);
      out.push_back({variant, group.name, group.positions, sim, run.ppl});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention maps

std::string to_string(AttentionSetting s) {
  switch (s) {
    case AttentionSetting::Original: return "original";
    case AttentionSetting::WoSemanticVector: return "wo_semantic_vector";
    case AttentionSetting::WoPositionalVector: return "wo_positional_vector";
    case AttentionSetting::WoPositionalBasis: return "wo_positional_basis";
  }
  return "?";
}

double sink_strength(const Matrix& map, std::size_t sink_keys, std::size_t queries_from) {
  const std::size_t n = map.rows();
  if (n < queries_from || sink_keys == 0 || sink_keys > map.cols()) {
    throw ShapeError("sink_strength: map too small for the sink definition");
  }
  double total = 0.0;
  for (std::size_t i = queries_from - 1; i < n; ++i) {
    for (std::size_t j = 0; j < sink_keys; ++j) total += map(i, j);
  }
  return total / static_cast<double>(n - queries_from + 1);
}

double decay_slope(const Matrix& map, std::size_t sink_keys) {
  const std::size_t n = map.rows();
  const std::size_t max_dist = n / 2;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t j = sink_keys + 1; j < i; ++j) {
      const std::size_t dist = i - j;
      if (dist < 8 || dist > max_dist) continue;
      const float a = map(i - 1, j - 1);
      if (!(a > 0.0f)) continue;
      pts.emplace_back(static_cast<double>(dist), std::log(static_cast<double>(a)));
    }
    if (pts.size() < 2) continue;
    double mx = 0.0, my = 0.0;
    for (auto& [x, y] : pts) {
      mx += x;
      my += y;
    }
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    for (auto& [x, y] : pts) {
      sxy += (x - mx) * (y - my);
      sxx += (x - mx) * (x - mx);
    }
  }
  return sxx == 0.0 ? 0.0 : sxy / sxx;
}

namespace {

Matrix strip(const Matrix& h, const PositionalDecomposition* dec, std::size_t layer, AttentionSetting setting,
             std::size_t n) {
  Matrix out = h.slice_rows(0, n);
  if (setting == AttentionSetting::Original) return out;
  const Matrix& comp = setting == AttentionSetting::WoPositionalBasis ? dec->basis(layer) : dec->positional(layer);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    const auto c = comp.row(r);
    for (std::size_t i = 0; i < row.size(); ++i) {
      row[i] = setting == AttentionSetting::WoSemanticVector ? c[i] : row[i] - c[i];
    }
  }
  return out;
}

}  // namespace

AttentionProfile attention_component_maps(const ModelConfig& config, const BankSet& banks,
                                          const DecompositionSet& decompositions, std::size_t layer,
                                          std::optional<std::size_t> head, AttentionSetting setting,
                                          const AttentionMapOptions& options) {
  if (layer < 1 || layer > config.layers) throw ShapeError("attention_component_maps: layer out of range");
  std::vector<std::size_t> heads;
  if (head) {
    if (*head >= config.heads) throw ShapeError("attention_component_maps: head out of range");
    heads.push_back(*head);
  } else {
    heads.resize(config.heads);
    std::iota(heads.begin(), heads.end(), std::size_t{0});
  }
  std::size_t n = 0;
  std::vector<double> acc;
  std::size_t count = 0;
  for (std::size_t h : heads) {
    const auto qi = banks.find({StreamKind::Query, h});
    const auto ki = banks.find({StreamKind::Key, h});
    if (qi == banks.end() || ki == banks.end()) {
      throw CapabilityError("attention_component_maps: no query/key bank for head " + std::to_string(h));
    }
    const auto& qs = qi->second.retained();
    const auto& ks = ki->second.retained();
    const PositionalDecomposition* qd = nullptr;
    const PositionalDecomposition* kd = nullptr;
    if (setting != AttentionSetting::Original) {
      qd = &decompositions.at({StreamKind::Query, h});
      kd = &decompositions.at({StreamKind::Key, h});
    }
    if (n == 0) {
      n = options.first_n == 0 ? qi->second.positions() : std::min(options.first_n, qi->second.positions());
      acc.assign(n * n, 0.0);
    }
    if ((qd != nullptr && qd->positions() < n) || (kd != nullptr && kd->positions() < n)) {
      throw CapabilityError("attention_component_maps: decomposition shorter than the map");
    }
    for (std::size_t s = 0; s < qs.size(); ++s) {
      const Matrix q = strip(qs[s][layer - 1], qd, layer, setting, n);
      const Matrix k = strip(ks[s][layer - 1], kd, layer, setting, n);
      const Matrix probs = attention_probabilities(config, h, q, k);
      const auto src = probs.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
      ++count;
    }
  }
  if (count == 0) throw CapabilityError("attention_component_maps: banks hold no samples");
  AttentionProfile out;
  out.setting = setting;
  out.layer = layer;
  out.head = head;
  out.map = Matrix(n, n);
  for (std::size_t i = 0; i < acc.size(); ++i) out.map.data()[i] = static_cast<float>(acc[i] / static_cast<double>(count));
  out.sink_strength = sink_strength(out.map, options.sink_keys, options.sink_queries_from);
  out.decay_slope = decay_slope(out.map, options.sink_keys);
  out.uniform_baseline = static_cast<double>(options.sink_keys) / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Extrapolation

std::vector<double> position_nll(const TransformerModel& model, std::span<const Token> corpus,
                                 std::size_t length, std::size_t samples, std::uint64_t seed,
                                 const std::vector<InterventionSpec>& interventions, const ForwardHooks& hooks) {
  if (length < 2) throw ConfigError("position_nll: length must be at least 2");
  const auto starts = sample_windows(corpus.size(), length, samples, seed);
  CaptureFlags capture;
  capture.layer_outputs = false;
  std::vector<double> acc(length - 1, 0.0);
  for (std::size_t s0 : starts) {
    const auto window = corpus.subspan(s0, length);
    const auto trace = forward(model, window, interventions, capture, hooks);
    const auto nll = token_nll(trace.logits, window);
    for (std::size_t i = 0; i < nll.size(); ++i) acc[i] += nll[i];
  }
  for (double& v : acc) v /= static_cast<double>(starts.size());
  return acc;
}

ExtrapolationCurves extrapolation_curves(const PositionalDecomposition& dec, std::span<const double> nll_by_position,
                                         std::size_t context, std::vector<std::size_t> layers) {
  const std::size_t t = dec.positions();
  if (t <= context) throw ConfigError("extrapolation_curves: decomposition must extend beyond the context");
  if (nll_by_position.size() <= context) throw ConfigError("extrapolation_curves: NLL curve must extend beyond the context");
  if (layers.empty()) {
    for (std::size_t l = dec.layers() > 1 ? 2 : 1; l <= dec.layers(); ++l) layers.push_back(l);
  }
  ExtrapolationCurves out;
  out.context = context;
  out.layers = layers;
  for (double v : nll_by_position) out.ppl.push_back(std::exp(v));
  double within = 0.0, beyond = 0.0;
  for (std::size_t i = 0; i < nll_by_position.size(); ++i) (i < context ? within : beyond) += nll_by_position[i];
  out.within_ppl = std::exp(within / static_cast<double>(context));
  out.beyond_ppl = std::exp(beyond / static_cast<double>(nll_by_position.size() - context));

  out.max_sim_by_layer.assign(dec.layers(), {});
  for (std::size_t l = 1; l <= dec.layers(); ++l) {
    const Matrix& p = dec.positional(l);
    auto& curve = out.max_sim_by_layer[l - 1];
    curve.resize(t);
    for (std::size_t i = 0; i < t; ++i) {
      double best = -1.0;
      for (std::size_t j = 0; j < context; ++j) best = std::max(best, cosine(p.row(j), p.row(i)));
      curve[i] = best;
    }
  }
  out.max_sim.assign(t, 0.0);
  for (std::size_t l : layers) {
    if (l < 1 || l > dec.layers()) throw ShapeError("extrapolation_curves: layer out of range");
    for (std::size_t i = 0; i < t; ++i) out.max_sim[i] += out.max_sim_by_layer[l - 1][i];
  }
  for (double& v : out.max_sim) v /= static_cast<double>(layers.size());
  double sum = 0.0;
  for (std::size_t i = context; i < t; ++i) sum += out.max_sim[i];
  out.beyond_max_sim = sum / static_cast<double>(t - context);
  return out;
}

Matrix ood_logit_similarity(const PositionalDecomposition& dec, const TransformerModel& model, bool apply_final_norm) {
  const ModelConfig& cfg = model.config;
  const Matrix& p = dec.positional(dec.layers());
  if (p.cols() != cfg.dim) throw ShapeError("ood_logit_similarity: decomposition width differs from the model");
  Matrix x = p;
  if (apply_final_norm) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto row = x.row(r);
      double ms = 0.0;
      for (float v : row) ms += static_cast<double>(v) * v;
      const double s = 1.0 / std::sqrt(ms / static_cast<double>(row.size()) + cfg.norm_eps);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<float>(row[c] * s * model.final_norm.data()[c]);
    }
  }
  Matrix logits = cfg.tie_embeddings ? matmul_nt(x, model.embedding) : matmul(x, model.unembedding);
  const std::size_t t = logits.rows();
  Matrix sim(t, t);
  for (std::size_t i = 0; i < t; ++i) {
    sim(i, i) = 1.0f;
    for (std::size_t j = i + 1; j < t; ++j) {
      const auto v = static_cast<float>(cosine(logits.row(i), logits.row(j)));
      sim(i, j) = v;
      sim(j, i) = v;
    }
  }
  return sim;
}

// ---------------------------------------------------------------------------
// Effective interpolation ratio

InterpolationRatio effective_interpolation_ratio(const Matrix& p_orig, const Matrix& p_scaled, std::size_t context,
                                                 std::size_t epsilon) {
  if (p_orig.cols() != p_scaled.cols()) throw ShapeError("effective_interpolation_ratio: banks differ in width");
  const std::size_t t = p_scaled.rows();
  if (context < 1 || context > p_orig.rows()) throw ShapeError("effective_interpolation_ratio: context outside bank");
  InterpolationRatio out;
  out.mapping.resize(t);
  for (std::size_t s = 0; s < t; ++s) {
    double best = -2.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < p_orig.rows(); ++i) {
      const double c = cosine(p_orig.row(i), p_scaled.row(s));
      if (c > best) {
        best = c;
        arg = i;
      }
    }
    out.mapping[s] = arg + 1;
  }
  std::size_t exact = 0, near = 0;
  for (std::size_t s = 1; s <= t; ++s) {
    const std::size_t f = out.mapping[s - 1];
    if (f == context) exact = s;
    const std::size_t gap = f > context ? f - context : context - f;
    if (gap <= epsilon) near = s;
  }
  if (exact != 0) {
    out.matched = true;
    out.ratio = static_cast<double>(exact) / static_cast<double>(context);
  } else if (near != 0) {
    out.matched = true;
    out.approximate = true;
    out.ratio = static_cast<double>(near) / static_cast<double>(context);
  } else {
    out.approximate = true;
  }
  return out;
}

InterpolationRatio effective_interpolation_ratio(const PositionalDecomposition& orig,
                                                 const PositionalDecomposition& scaled, std::size_t layer,
                                                 std::size_t context) {
  return effective_interpolation_ratio(orig.positional(layer), scaled.positional(layer), context);
}

double interpolation_similarity(const PositionalDecomposition& orig, const PositionalDecomposition& scaled,
                                const std::vector<std::size_t>& layers) {
  if (layers.empty()) throw ConfigError("interpolation_similarity: no layers");
  double total = 0.0;
  for (std::size_t l : layers) {
    const Matrix& a = orig.positional(l);
    const Matrix& b = scaled.positional(l);
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("interpolation_similarity: shape mismatch");
    double sum = 0.0;
    for (std::size_t s = 0; s < b.rows(); ++s) {
      double best = -1.0;
      for (std::size_t i = 0; i < a.rows(); ++i) best = std::max(best, cosine(a.row(i), b.row(s)));
      sum += best;
    }
    total += sum / static_cast<double>(b.rows());
  }
  return total / static_cast<double>(layers.size());
}

// ---------------------------------------------------------------------------
// Synthetic single-head experiment

std::vector<std::size_t> default_synthetic_positions(std::size_t length) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i <= std::min<std::size_t>(32, length); ++i) out.push_back(i);
  for (std::size_t p = 32; p < length;) {
    const std::size_t a = p + p / 2;  // 48, 96, ...
    const std::size_t b = 2 * p;  // 64, 128, ...
    if (a < length) out.push_back(a);
    if (b <= length) out.push_back(b);
    p = b;
  }
  if (out.back() != length) out.push_back(length);
  return out;
}

namespace {

std::vector<double> vocab_first_dim(std::size_t vocab, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> e(vocab);
  for (auto& v : e) v = normal(rng);
  return e;
}

}  // namespace

SyntheticHead synthetic_head(const SyntheticOptions& options) {
  if (options.heads == 0 || options.dim % options.heads != 0 || options.dim < 2) {
    throw ConfigError("synthetic_head: dim must be a multiple of heads and at least 2");
  }
  std::mt19937_64 rng(options.seed);
  const auto e1 = vocab_first_dim(options.vocab, rng);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  SyntheticHead h;
  h.embedding = Matrix(options.vocab, options.dim);
  for (std::size_t v = 0; v < options.vocab; ++v) {
    h.embedding(v, 0) = static_cast<float>(e1[v]);
    h.embedding(v, 1) = 1.0f;
    for (std::size_t c = 2; c < options.dim; ++c) h.embedding(v, c) = normal(rng);
  }
  const std::size_t dh = options.dim / options.heads;
  h.wq = Matrix(dh, options.dim);
  h.wk = Matrix(dh, options.dim);
  h.wv = Matrix(dh, options.dim);
  for (std::size_t r = 0; r < dh; ++r) {
    h.wq(r, 1) = 1.0f;
    h.wk(r, 0) = 1.0f;
    h.wv(r, 0) = 1.0f;
  }
  return h;
}

SyntheticCurve synthetic_preference_experiment(const SyntheticOptions& options) {
  if (options.n_seqs < 100) throw ConfigError("synthetic experiment needs at least 100 sequences");
  if (options.length < 2 || options.vocab < 2) throw ConfigError("synthetic experiment: length and vocab must be >= 2");
  if (options.pe == PeKind::ALiBi) throw ConfigError("synthetic experiment supports nope and rope only");
  std::mt19937_64 rng(options.seed);
  const auto e1 = vocab_first_dim(options.vocab, rng);
  std::vector<std::size_t> positions = options.positions.empty() ? default_synthetic_positions(options.length)
                                                                 : options.positions;
  for (std::size_t p : positions) {
    if (p < 1 || p > options.length) throw ConfigError("synthetic experiment: position outside sequence");
  }
  SyntheticCurve out;
  out.positions = positions;
  out.vocab_mean = std::accumulate(e1.begin(), e1.end(), 0.0) / static_cast<double>(e1.size());
  std::vector<double> sum(positions.size(), 0.0), sq(positions.size(), 0.0);

  // Sequences come from a separate stream so the vocabulary table is
  // shared with synthetic_head for the same seed.
  std::mt19937_64 seq_rng(options.sequence_seed.value_or(options.seed ^ 0x9e3779b97f4a7c15ULL));
  std::uniform_int_distribution<std::size_t> pick(0, options.vocab - 1);
  const std::size_t max_pos = *std::max_element(positions.begin(), positions.end());
  std::vector<double> e(max_pos), pw(max_pos), pwe(max_pos), pe(max_pos);
  for (std::size_t s = 0; s < options.n_seqs; ++s) {
    double w_acc = 0.0, we_acc = 0.0, e_acc = 0.0;
    for (std::size_t j = 0; j < max_pos; ++j) {
      e[j] = e1[pick(seq_rng)];
      // Logit e_j for every query under NoPE: softmax weights are exp(e_j).
      const double w = std::exp(e[j]);
      w_acc += w;
      we_acc += w * e[j];
      e_acc += e[j];
      pw[j] = w_acc;
      pwe[j] = we_acc;
      pe[j] = e_acc;
    }
    for (std::size_t k = 0; k < positions.size(); ++k) {
      const std::size_t i = positions[k];
      double val = 0.0;
      if (options.uniform_attention) {
        val = pe[i - 1] / static_cast<double>(i);
      } else if (options.pe == PeKind::NoPE) {
        val = pwe[i - 1] / pw[i - 1];
      } else {
        double num = 0.0, den = 0.0;
        for (std::size_t j = 1; j <= i; ++j) {
          const double a = e[j - 1] * std::cos(static_cast<double>(i - j) * options.rope_frequency);
          const double w = std::exp(a);
          num += w * e[j - 1];
          den += w;
        }
        val = num / den;
      }
      sum[k] += val;
      sq[k] += val * val;
    }
  }
  const auto n = static_cast<double>(options.n_seqs);
  for (std::size_t k = 0; k < positions.size(); ++k) {
    const double mean = sum[k] / n;
    const double var = std::max(0.0, (sq[k] / n - mean * mean) * n / (n - 1.0));
    out.mean.push_back(mean);
    out.std_error.push_back(std::sqrt(var / n));
  }
  return out;
}

}  // namespace pvlab
