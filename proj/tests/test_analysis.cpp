#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "pvlab/analysis.hpp"
#include "pvlab/decompose.hpp"
#include "pvlab/errors.hpp"

using namespace pvlab;

namespace {

// One-sample bank so p equals the given rows exactly.
PositionalDecomposition from_rows(const std::vector<Matrix>& layers, std::size_t context,
                                  StreamId id = {StreamKind::LayerOutput, 0}) {
  HiddenStateBank bank(id, layers.size(), layers[0].rows(), layers[0].cols(), false);
  bank.add(layers);
  return decompose(bank, context);
}

Matrix basis_rows(std::size_t n, std::size_t d) {
  Matrix m(n, d);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

ModelConfig tiny(PeKind pe = PeKind::NoPE) {
  ModelConfig c;
  c.layers = 3;
  c.heads = 2;
  c.dim = 16;
  c.ffn_dim = 32;
  c.vocab = 40;
  c.context = 16;
  c.pe = pe;
  return c;
}

std::vector<Token> corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Token> out(n);
  for (auto& t : out) t = static_cast<Token>(rng() % 40);
  return out;
}

// Scale all non-norm parameters so attention is far from uniform.
TransformerModel sharpened(const ModelConfig& cfg, std::uint64_t seed) {
  auto model = build_model(cfg, seed);
  for (auto& lw : model.layers) {
    for (Matrix* m : {&lw.wq, &lw.wk}) {
      for (auto& v : m->storage()) v *= 4.0f;
    }
  }
  return model;
}

}  // namespace

TEST_CASE("pca collapses identical tail positions") {
  Matrix p(12, 6, 0.0f);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 6; ++c) p(i, c) = 3.0f * nd(rng);
  for (std::size_t i = 4; i < 12; ++i)
    for (std::size_t c = 0; c < 6; ++c) p(i, c) = 0.5f;
  auto dec = from_rows({p}, 12);
  auto pca = pca_positions(dec, 1);
  REQUIRE(pca.coords.rows() == 12);
  for (std::size_t i = 4; i < 12; ++i) {
    for (std::size_t j = i + 1; j < 12; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < 2; ++k) d += std::pow(pca.coords(i, k) - pca.coords(j, k), 2.0);
      CHECK(std::sqrt(d) <= 1e-5);
    }
  }
  auto sep = pca_separation(pca.coords, 4, 5);
  CHECK(sep.initial_min > 1e-2);
  CHECK(sep.late_percentile <= 1e-5);
}

TEST_CASE("pca on identical vectors raises convergence error") {
  auto dec = from_rows({Matrix(6, 3, 1.0f)}, 6);
  CHECK_THROWS_AS(pca_positions(dec, 1), ConvergenceError);
}

TEST_CASE("nearest-neighbour spread is zero on an even grid") {
  Matrix g(6, 2);
  for (std::size_t i = 0; i < 6; ++i) g(i, 0) = static_cast<float>(i);
  CHECK(nearest_neighbor_cv(g) == doctest::Approx(0.0));
  g(5, 0) = 9.0f;
  CHECK(nearest_neighbor_cv(g) > 0.3);
}

TEST_CASE("distinct count on constructed banks") {
  SUBCASE("shared vector") {
    auto dec = from_rows({Matrix(20, 4, 1.0f)}, 8);
    auto row = distinct_count(dec, 1, 4);
    CHECK(row.distinct_count == 0);
    CHECK(row.trf == 4);
    CHECK_FALSE(row.saturated);
  }
  SUBCASE("seven orthogonal heads") {
    Matrix p(20, 9);
    for (std::size_t t = 0; t < 20; ++t) p(t, 0) = 1.0f;
    for (std::size_t t = 0; t < 7; ++t) {
      p(t, 0) = 0.0f;
      p(t, t + 1) = 2.0f;
    }
    auto dec = from_rows({p}, 8);
    // oracle: direct cosine against the chosen reference
    auto row = distinct_count(dec, 1, 8);
    std::size_t oracle = 0;
    for (std::size_t t = 0; t < 20; ++t) oracle += cosine(p.row(t), p.row(row.reference - 1)) < 0.99 ? 1 : 0;
    CHECK(oracle == 7);
    CHECK(row.distinct_count == 7);
    CHECK(row.reference == 12);
  }
  SUBCASE("saturated when the field covers the bank") {
    auto dec = from_rows({Matrix(8, 2, 1.0f), Matrix(8, 2, 1.0f)}, 8);
    auto row = distinct_count(dec, 2, 4);
    CHECK(row.saturated);
    CHECK(row.trf == 8);
  }
  SUBCASE("zero vector") {
    Matrix p(20, 3, 1.0f);
    p(2, 0) = p(2, 1) = p(2, 2) = 0.0f;
    auto dec = from_rows({p}, 8);
    CHECK_THROWS_AS(distinct_count(dec, 1, 4), UndefinedSimilarityError);
  }
}

TEST_CASE("distinct count does not depend on the outside reference") {
  // Window-like bank: vectors change through position 6, constant after.
  std::mt19937_64 rng(11);
  std::normal_distribution<float> nd;
  Matrix p(30, 5);
  for (std::size_t t = 0; t < 30; ++t)
    for (std::size_t c = 0; c < 5; ++c) p(t, c) = t < 6 ? nd(rng) : 1.0f + 0.1f * static_cast<float>(c);
  auto dec = from_rows({p, p}, 12);
  for (std::size_t l = 1; l <= 2; ++l) {
    auto a = distinct_count(dec, l, 3, 0.99, 10);
    auto b = distinct_count(dec, l, 3, 0.99, 27);
    CHECK(std::max(a.distinct_count, b.distinct_count) - std::min(a.distinct_count, b.distinct_count) <= 1);
  }
  auto curve = distinct_count_curve(dec, 3, 0.99);
  REQUIRE(curve.rows.size() == 2);
  CHECK(curve.rows[1].trf == 6);
}

TEST_CASE("sink and decay metrics on fixed maps") {
  const std::size_t n = 32;
  Matrix uniform(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) uniform(i, j) = 1.0f / static_cast<float>(i + 1);
  double expected = 0.0;
  for (std::size_t i = 9; i <= n; ++i) expected += 4.0 / static_cast<double>(i);
  expected /= static_cast<double>(n - 8);
  CHECK(sink_strength(uniform, 4, 9) == doctest::Approx(expected).epsilon(1e-6));
  CHECK(decay_slope(uniform, 4) == doctest::Approx(0.0).epsilon(1e-9));

  // Exponential decay with a per-row constant: the within-row fit is exact.
  Matrix decay(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) z += std::exp(-0.1 * static_cast<double>(i - j));
    for (std::size_t j = 0; j <= i; ++j) decay(i, j) = static_cast<float>(std::exp(-0.1 * static_cast<double>(i - j)) / z);
  }
  CHECK(decay_slope(decay, 4) == doctest::Approx(-0.1).epsilon(1e-5));
  CHECK_THROWS_AS(sink_strength(Matrix(4, 4), 4, 9), ShapeError);
}

TEST_CASE("uniform queries and keys give the uniform attention profile") {
  ModelConfig cfg = tiny();
  BankSet banks;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    for (StreamKind kind : {StreamKind::Query, StreamKind::Key}) {
      HiddenStateBank bank({kind, h}, cfg.layers, 24, cfg.dim / cfg.heads, true);
      for (int s = 0; s < 3; ++s) bank.add(std::vector<Matrix>(cfg.layers, Matrix(24, cfg.dim / cfg.heads, 0.3f)));
      banks.emplace(StreamId{kind, h}, bank);
    }
  }
  auto prof = attention_component_maps(cfg, banks, {}, 2, std::nullopt, AttentionSetting::Original);
  REQUIRE(prof.map.rows() == 24);
  for (std::size_t i = 0; i < 24; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 24; ++j) {
      row += prof.map(i, j);
      if (j <= i) CHECK(prof.map(i, j) == doctest::Approx(1.0 / static_cast<double>(i + 1)).epsilon(1e-6));
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(prof.decay_slope == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(prof.uniform_baseline == doctest::Approx(4.0 / 24.0));
  CHECK_THROWS_AS(attention_component_maps(cfg, banks, {}, 2, 0, AttentionSetting::WoPositionalBasis),
                  CapabilityError);
}

TEST_CASE("original-setting maps reproduce the forward attention") {
  for (PeKind pe : {PeKind::NoPE, PeKind::RoPE, PeKind::ALiBi}) {
    ModelConfig cfg = tiny(pe);
    auto model = sharpened(cfg, 5);
    auto toks = corpus(2000, 9);
    BankOptions opts;
    opts.samples = 6;
    opts.seed = 4;
    opts.qkv = true;
    opts.retain = true;
    auto banks = collect_bank(model, toks, opts);
    const std::size_t layer = 2, head = 1;
    auto prof = attention_component_maps(cfg, banks, {}, layer, head, AttentionSetting::Original);

    Matrix oracle(cfg.context, cfg.context);
    CaptureFlags cap;
    cap.attention = true;
    for (std::size_t s0 : sample_windows(toks.size(), cfg.context, 6, 4)) {
      auto tr = forward(model, std::span<const Token>(toks).subspan(s0, cfg.context), {}, cap);
      const Matrix& a = tr.attention[layer - 1][head];
      for (std::size_t i = 0; i < a.size(); ++i) oracle.storage()[i] += a.data()[i] / 6.0f;
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < oracle.size(); ++i)
      worst = std::max(worst, std::abs(static_cast<double>(oracle.data()[i]) - prof.map.data()[i]));
    CHECK(worst <= 1e-4);

    auto decs = decompose(banks, cfg.context);
    auto stripped = attention_component_maps(cfg, banks, decs, layer, head, AttentionSetting::WoPositionalBasis);
    for (std::size_t i = 0; i < cfg.context; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < cfg.context; ++j) row += stripped.map(i, j);
      CHECK(row == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
}

TEST_CASE("extrapolation curves") {
  std::mt19937_64 rng(21);
  std::normal_distribution<float> nd;
  std::vector<Matrix> layers;
  for (int l = 0; l < 3; ++l) {
    Matrix p(12, 4);
    for (auto& v : p.storage()) v = nd(rng);
    layers.push_back(p);
  }
  auto dec = from_rows(layers, 4);
  std::vector<double> nll(11);
  for (std::size_t i = 0; i < nll.size(); ++i) nll[i] = 0.1 * static_cast<double>(i + 1);
  auto curves = extrapolation_curves(dec, nll, 4);
  CHECK(curves.layers == std::vector<std::size_t>{2, 3});
  for (std::size_t t = 0; t < 4; ++t) CHECK(curves.max_sim[t] == 1.0);
  for (std::size_t t = 4; t < 12; ++t) CHECK(curves.max_sim[t] <= 1.0);
  CHECK(curves.within_ppl == doctest::Approx(std::exp(0.25)));
  CHECK(curves.beyond_ppl == doctest::Approx(std::exp(0.8)));
  // Oracle for one beyond position of layer 3.
  double best = -1.0;
  for (std::size_t j = 0; j < 4; ++j) best = std::max(best, cosine(layers[2].row(j), layers[2].row(9)));
  CHECK(curves.max_sim_by_layer[2][9] == doctest::Approx(best).epsilon(1e-12));
  CHECK_THROWS_AS(extrapolation_curves(from_rows(layers, 12), nll, 12), ConfigError);
}

TEST_CASE("logit similarity of positional vectors") {
  ModelConfig cfg = tiny();
  auto model = build_model(cfg, 2);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd;
  std::vector<Matrix> layers;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Matrix p(24, cfg.dim);
    for (auto& v : p.storage()) v = nd(rng);
    layers.push_back(p);
  }
  for (bool norm : {true, false}) {
    auto sim = ood_logit_similarity(from_rows(layers, 16), model, norm);
    REQUIRE(sim.rows() == 24);
    for (std::size_t i = 0; i < 24; ++i) {
      CHECK(sim(i, i) == 1.0f);
      for (std::size_t j = 0; j < 24; ++j) CHECK(sim(i, j) == sim(j, i));
    }
  }
  // Every position shares one vector: all ones.
  Matrix same(24, cfg.dim);
  for (std::size_t t = 0; t < 24; ++t)
    for (std::size_t c = 0; c < cfg.dim; ++c) same(t, c) = layers[0](0, c);
  auto sim = ood_logit_similarity(from_rows(std::vector<Matrix>(cfg.layers, same), 16), model);
  for (float v : sim.data()) CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));
}

TEST_CASE("effective interpolation ratio on orthogonal banks") {
  const std::size_t c = 8;
  SUBCASE("identity") {
    Matrix p = basis_rows(16, 16);
    auto r = effective_interpolation_ratio(p, p, c);
    CHECK(r.ratio == 1.0);
    CHECK(r.matched);
    CHECK_FALSE(r.approximate);
  }
  for (std::size_t factor : {2, 4}) {
    CAPTURE(factor);
    const std::size_t t = c * factor;
    Matrix orig = basis_rows(t, t);
    Matrix scaled(t, t);
    for (std::size_t s = 1; s <= t; ++s) scaled(s - 1, (s + factor - 1) / factor - 1) = 1.0f;
    auto r = effective_interpolation_ratio(orig, scaled, c);
    CHECK(r.ratio == static_cast<double>(factor));
    // oracle mapping by direct enumeration
    for (std::size_t s = 1; s <= t; ++s) CHECK(r.mapping[s - 1] == (s + factor - 1) / factor);
    // cosine is scale-free
    Matrix big = scaled;
    for (auto& v : big.storage()) v *= 7.5f;
    auto r2 = effective_interpolation_ratio(orig, big, c);
    CHECK(r2.ratio == r.ratio);
    CHECK(r2.mapping == r.mapping);
  }
  SUBCASE("fallback when nothing hits C") {
    Matrix orig = basis_rows(16, 16);
    Matrix scaled(16, 16);
    for (std::size_t s = 0; s < 16; ++s) scaled(s, s < 12 ? (s < 6 ? s : 6) : 11) = 1.0f;
    auto r = effective_interpolation_ratio(orig, scaled, c);
    CHECK(r.approximate);
    CHECK(r.matched);
    CHECK(r.ratio == 12.0 / 8.0);
  }
  SUBCASE("no match at all") {
    Matrix orig = basis_rows(16, 16);
    Matrix scaled(16, 16);
    for (std::size_t s = 0; s < 16; ++s) scaled(s, 0) = 1.0f;
    auto r = effective_interpolation_ratio(orig, scaled, c);
    CHECK_FALSE(r.matched);
  }
  SUBCASE("ties go to the smallest index") {
    Matrix orig(4, 2, 1.0f);
    auto r = effective_interpolation_ratio(orig, orig, 2);
    for (auto f : r.mapping) CHECK(f == 1);
  }
  SUBCASE("zero vector") {
    Matrix orig = basis_rows(4, 4);
    Matrix scaled = orig;
    scaled(2, 2) = 0.0f;
    CHECK_THROWS_AS(effective_interpolation_ratio(orig, scaled, 2), UndefinedSimilarityError);
  }
}

TEST_CASE("ablation study no-op and capability checks") {
  ModelConfig cfg = tiny();
  auto model = build_model(cfg, 8);
  auto toks = corpus(4000, 2);
  BankOptions opts;
  opts.samples = 16;
  opts.layer_outputs = false;
  opts.qkv = true;
  auto decs = std::make_shared<DecompositionSet>(decompose(collect_bank(model, toks, opts), cfg.context));

  AblationOptions ao;
  ao.samples = 8;
  ao.groups = {{"none", {3, 3}}, {"initial", {1, 5}}};
  auto rows = ablation_study(model, decs, toks, ao);
  REQUIRE(rows.size() == 1 + 4 * 2);
  CHECK(rows[0].variant == AblationVariant::Original);
  const double clean = rows[0].ppl;
  for (const auto& r : rows) {
    CHECK(r.sim >= -1.0);
    CHECK(r.sim <= 1.0);
    if (r.group == "none") {
      CHECK(r.sim == 1.0);
      CHECK(r.ppl == clean);
    }
  }
  // Whole-value removal on the initial tokens must change something.
  bool moved = false;
  for (const auto& r : rows) moved |= r.variant == AblationVariant::WoValue && r.group == "initial" && r.sim < 1.0;
  CHECK(moved);

  auto partial = std::make_shared<DecompositionSet>();
  partial->streams.emplace(StreamId{StreamKind::Value, 0}, decs->at({StreamKind::Value, 0}));
  CHECK_THROWS_AS(ablation_study(model, partial, toks, ao), CapabilityError);
  CHECK_THROWS_AS(ablation_study(model, nullptr, toks, ao), CapabilityError);
}

TEST_CASE("position nll averages aligned windows") {
  ModelConfig cfg = tiny();
  auto model = build_model(cfg, 3);
  auto toks = corpus(1000, 6);
  auto nll = position_nll(model, toks, 20, 5, 1);
  REQUIRE(nll.size() == 19);
  std::vector<double> oracle(19, 0.0);
  for (std::size_t s0 : sample_windows(toks.size(), 20, 5, 1)) {
    auto w = std::span<const Token>(toks).subspan(s0, 20);
    auto v = token_nll(forward(model, w).logits, w);
    for (std::size_t i = 0; i < 19; ++i) oracle[i] += v[i] / 5.0;
  }
  for (std::size_t i = 0; i < 19; ++i) CHECK(nll[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
}

TEST_CASE("synthetic head construction") {
  SyntheticOptions o;
  o.vocab = 50;
  auto h = synthetic_head(o);
  const std::size_t dh = o.dim / o.heads;
  for (std::size_t v = 0; v < o.vocab; ++v) {
    auto x = h.embedding.row(v);
    double qk = 0.0;
    for (std::size_t r = 0; r < dh; ++r) qk += dot(h.wq.row(r), x) * dot(h.wk.row(r), x);
    CHECK(qk == doctest::Approx(static_cast<double>(dh) * x[0]).epsilon(1e-6));
    CHECK(dot(h.wv.row(0), x) == doctest::Approx(x[0]));
  }
}

TEST_CASE("synthetic experiment identities") {
  SyntheticOptions o;
  o.n_seqs = 400;
  o.length = 64;
  o.vocab = 256;
  SUBCASE("uniform attention stays at the vocabulary mean") {
    o.uniform_attention = true;
    auto c = synthetic_preference_experiment(o);
    for (std::size_t k = 0; k < c.positions.size(); ++k) {
      CHECK(std::abs(c.mean[k] - c.vocab_mean) <= 3.0 / std::sqrt(static_cast<double>(c.positions[k] * o.n_seqs)) + 1e-12);
    }
  }
  SUBCASE("first position is its own value") {
    auto c = synthetic_preference_experiment(o);
    REQUIRE(c.positions[0] == 1);
    CHECK(std::abs(c.mean[0] - c.vocab_mean) <= 3.0 / std::sqrt(400.0) * 1.2);
  }
  SUBCASE("rope with a tiny frequency tracks nope") {
    o.pe = PeKind::RoPE;
    o.rope_frequency = 0.0;
    auto r = synthetic_preference_experiment(o);
    o.pe = PeKind::NoPE;
    auto n = synthetic_preference_experiment(o);
    for (std::size_t k = 0; k < r.mean.size(); ++k) CHECK(r.mean[k] == doctest::Approx(n.mean[k]).epsilon(1e-9));
  }
  CHECK_THROWS_AS(synthetic_preference_experiment(SyntheticOptions{.n_seqs = 10}), ConfigError);
}

TEST_CASE("default synthetic positions") {
  auto p = default_synthetic_positions(1024);
  CHECK(p.front() == 1);
  CHECK(p.back() == 1024);
  CHECK(std::find(p.begin(), p.end(), 512) != p.end());
  CHECK(std::is_sorted(p.begin(), p.end()));
  CHECK(std::adjacent_find(p.begin(), p.end()) == p.end());
}
