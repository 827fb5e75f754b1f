#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "pvlab/decompose.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/extend.hpp"

using namespace pvlab;

namespace {

ModelConfig tiny(PeKind pe = PeKind::NoPE, AttnKind attn = AttnKind::Full, std::size_t window = 0) {
  ModelConfig c;
  c.layers = 3;
  c.heads = 2;
  c.dim = 16;
  c.ffn_dim = 32;
  c.vocab = 40;
  c.context = 16;
  c.pe = pe;
  c.attn = attn;
  c.window = window;
  return c;
}

// head_dim 1, so q_i * k_j is the raw logit.
ModelConfig scalar_heads(AttnKind attn = AttnKind::Full, std::size_t window = 0) {
  ModelConfig c = tiny(PeKind::NoPE, attn, window);
  c.dim = 2;
  c.ffn_dim = 4;
  return c;
}

std::vector<Token> tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Token> out(n);
  for (auto& t : out) t = static_cast<Token>(rng() % 40);
  return out;
}

std::vector<double> softmax(std::vector<double> v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double z = 0.0;
  for (double& x : v) z += (x = std::exp(x - mx));
  for (double& x : v) x /= z;
  return v;
}

Matrix column(std::initializer_list<float> v) {
  Matrix m(v.size(), 1);
  std::size_t i = 0;
  for (float x : v) m(i++, 0) = x;
  return m;
}

void check_identical(const ForwardTrace& a, const ForwardTrace& b) {
  REQUIRE(a.layer_outputs.size() == b.layer_outputs.size());
  for (std::size_t l = 0; l < a.layer_outputs.size(); ++l) CHECK(a.layer_outputs[l] == b.layer_outputs[l]);
  CHECK(a.logits == b.logits);
}

}  // namespace

TEST_CASE("identity parameters leave the forward bit-identical") {
  const auto toks = tokens(16, 1);
  SUBCASE("scaling") {
    auto model = build_model(tiny(), 3);
    const auto clean = forward(model, toks);
    check_identical(attention_scaling(model, 1.0).forward(toks), clean);
    check_identical(initial_scaling(model, 1.0).forward(toks), clean);
  }
  SUBCASE("window extension") {
    auto model = build_model(tiny(PeKind::NoPE, AttnKind::Window, 4), 3);
    check_identical(attention_window_extension(model, 1.0, 1.0).forward(toks), forward(model, toks));
  }
  SUBCASE("dynamic ntk inside the window") {
    auto model = build_model(tiny(PeKind::RoPE), 3);
    auto wrapped = dynamic_ntk(model, 32);
    check_identical(wrapped.forward(toks), forward(model, toks));
    const auto shorter = std::span<const Token>(toks).first(9);
    check_identical(wrapped.forward(shorter), forward(model, shorter));
    check_identical(dynamic_ntk(model, 16).forward(toks), forward(model, toks));
  }
  SUBCASE("no-op interventions compose") {
    auto model = build_model(tiny(), 3);
    auto wrapped = attention_scaling(model, 1.3);
    InterventionSpec iv;
    iv.target = InterventionTarget::LayerOutput;
    iv.positions = {2, 2};
    iv.layers = {1, 4};
    check_identical(wrapped.forward(toks, {iv}), wrapped.forward(toks));
  }
}

TEST_CASE("attention scaling on a three-token instance") {
  const auto cfg = scalar_heads();
  const Matrix q = column({1, 1, 1});
  const Matrix k = column({1, 2, 3});
  auto model = build_model(cfg, 0);
  const auto adjust = attention_scaling(model, 2.0).hooks().attention;
  const Matrix p = attention_probabilities(cfg, 0, q, k, adjust);
  const auto want = softmax({2, 4, 6});
  for (std::size_t j = 0; j < 3; ++j) CHECK(p(2, j) == doctest::Approx(want[j]).epsilon(1e-6));
  const auto row2 = softmax({2, 4});
  CHECK(p(1, 0) == doctest::Approx(row2[0]).epsilon(1e-6));

  const auto init = initial_scaling(model, 2.0, 1).hooks().attention;
  const Matrix pi = attention_probabilities(cfg, 0, q, k, init);
  const auto want_i = softmax({2, 2, 3});
  for (std::size_t j = 0; j < 3; ++j) CHECK(pi(2, j) == doctest::Approx(want_i[j]).epsilon(1e-6));
}

TEST_CASE("attention scaling equals a lower softmax temperature") {
  for (PeKind pe : {PeKind::NoPE, PeKind::RoPE}) {
    auto cfg = tiny(pe);
    std::mt19937_64 rng(5);
    std::normal_distribution<float> nd;
    Matrix q(10, cfg.head_dim()), k(10, cfg.head_dim());
    for (auto& v : q.storage()) v = nd(rng);
    for (auto& v : k.storage()) v = nd(rng);
    auto model = build_model(cfg, 0);
    for (double lambda : {0.5, 1.7, 3.0}) {
      const Matrix base = attention_logits(cfg, 1, q, k);
      const Matrix p = attention_probabilities(cfg, 1, q, k, attention_scaling(model, lambda).hooks().attention);
      for (std::size_t i = 0; i < 10; ++i) {
        std::vector<double> row;
        for (std::size_t j = 0; j <= i; ++j) row.push_back(lambda * base(i, j));
        const auto want = softmax(row);
        for (std::size_t j = 0; j <= i; ++j) CHECK(p(i, j) == doctest::Approx(want[j]).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("attention scaling leaves the alibi bias unscaled") {
  auto cfg = tiny(PeKind::ALiBi);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> nd;
  Matrix q(6, cfg.head_dim()), k(6, cfg.head_dim());
  for (auto& v : q.storage()) v = nd(rng);
  for (auto& v : k.storage()) v = nd(rng);
  auto model = build_model(cfg, 0);
  const Matrix p = attention_probabilities(cfg, 1, q, k, attention_scaling(model, 2.0).hooks().attention);
  const double slope = alibi_slope(1, cfg.heads);
  std::vector<double> row;
  for (std::size_t j = 0; j < 6; ++j) row.push_back(2.0 * dot(q.row(5), k.row(j)) / std::sqrt(8.0) - slope * static_cast<double>(5 - j));
  const auto want = softmax(row);
  for (std::size_t j = 0; j < 6; ++j) CHECK(p(5, j) == doctest::Approx(want[j]).epsilon(1e-6));
}

TEST_CASE("window extension widens the mask and scales logits") {
  const auto cfg = scalar_heads(AttnKind::Window, 2);
  auto model = build_model(cfg, 0);
  const Matrix q = column({0.5f, 0.5f, 0.5f, 0.5f, 0.5f});
  const Matrix k = column({1.0f, -2.0f, 0.4f, 1.5f, 3.0f});
  const auto adjust = attention_window_extension(model, 2.0, 1.5).hooks().attention;
  const Matrix p = attention_probabilities(cfg, 0, q, k, adjust);
  CHECK(p(4, 0) == 0.0f);
  const auto want = softmax({1.5 * 0.5 * -2.0, 1.5 * 0.5 * 0.4, 1.5 * 0.5 * 1.5, 1.5 * 0.5 * 3.0});
  for (std::size_t j = 1; j < 5; ++j) CHECK(p(4, j) == doctest::Approx(want[j - 1]).epsilon(1e-6));

  CHECK_THROWS_AS(attention_window_extension(build_model(tiny(), 0), 2.0, 1.0), CapabilityError);
  CHECK_THROWS_AS(attention_window_extension(model, 0.5, 1.0), ConfigError);
  CHECK_THROWS_AS(attention_window_extension(model, 2.0, 0.9), ConfigError);
}

TEST_CASE("window extension keeps every row argmax") {
  auto cfg = tiny(PeKind::NoPE, AttnKind::Window, 4);
  auto model = build_model(cfg, 9);
  for (auto& lw : model.layers)
    for (auto& v : lw.wq.storage()) v *= 3.0f;
  const auto toks = tokens(24, 4);
  CaptureFlags cap;
  cap.attention = true;
  const auto a = attention_window_extension(model, 2.0, 1.0).forward(toks, {}, cap);
  for (double lambda : {1.2, 2.5}) {
    const auto b = attention_window_extension(model, 2.0, lambda).forward(toks, {}, cap);
    // First layer only: later layers see different inputs.
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Matrix& x = a.attention[0][h];
      const Matrix& y = b.attention[0][h];
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto rx = x.row(i), ry = y.row(i);
        CHECK(std::max_element(rx.begin(), rx.end()) - rx.begin() == std::max_element(ry.begin(), ry.end()) - ry.begin());
      }
    }
  }
}

TEST_CASE("dynamic ntk base and angles") {
  CHECK(dynamic_ntk_base(10000.0, 8, 16, 32, 16) == 10000.0);
  // factor 2, seq 32: base * (2*2 - 1)^(8/6)
  CHECK(dynamic_ntk_base(10000.0, 8, 16, 32, 32) == doctest::Approx(10000.0 * std::pow(3.0, 8.0 / 6.0)));
  const std::size_t dh = 8, c = 16, target = 32;
  const double base = 10000.0;
  const double nb = dynamic_ntk_base(base, dh, c, target, target);
  const double low = 2.0 * static_cast<double>(dh / 2 - 1) / static_cast<double>(dh);
  CHECK(static_cast<double>(target) * std::pow(nb, -low) <= static_cast<double>(c) * std::pow(base, -low));
  CHECK_THROWS_AS(dynamic_ntk(build_model(tiny(), 0), 32), CapabilityError);
  CHECK_THROWS_AS(dynamic_ntk(build_model(tiny(PeKind::RoPE), 0), 8), ConfigError);

  auto model = build_model(tiny(PeKind::RoPE), 2);
  const auto toks = tokens(32, 8);
  CHECK_FALSE(dynamic_ntk(model, 32).forward(toks).logits == forward(model, toks).logits);
}

TEST_CASE("replacement interpolant is the affine index map") {
  // p[t] = t * e1 for every t.
  const std::size_t c = 16;
  Matrix p(c, 3);
  for (std::size_t t = 1; t <= c; ++t) p(t - 1, 0) = static_cast<float>(t);
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, 1, c, 3, false);
  bank.add({p});
  auto dec = std::make_shared<PositionalDecomposition>(decompose(bank, c));
  ModelConfig cfg = tiny();
  cfg.dim = 3;
  cfg.heads = 1;
  cfg.layers = 1;
  auto model = build_model(cfg, 0);
  for (double r : {1.0, 2.0, 4.0}) {
    auto w = positional_vector_replacement(model, dec, 1, r, 1.0);
    const Matrix& hat = w.interpolated();
    REQUIRE(w.max_length().has_value());
    CHECK(*w.max_length() == 4 + static_cast<std::size_t>(r * 11) + 1);
    for (std::size_t j = 0; j < hat.rows(); ++j) {
      // new position 5 + j reads source position 5 + j / r
      CHECK(hat(j, 0) == doctest::Approx(5.0 + static_cast<double>(j) / r).epsilon(1e-6));
    }
  }
  auto w2 = positional_vector_replacement(model, dec, 1, 2.0, 1.0);
  for (std::size_t k = 0; k <= 11; ++k) CHECK(w2.interpolated()(2 * k, 0) == static_cast<float>(5 + k));
}

TEST_CASE("replacement is exact on a position-deterministic model") {
  // Every token shares one embedding, so hidden states depend on position only.
  ModelConfig cfg = tiny();
  auto model = build_model(cfg, 4);
  for (std::size_t v = 1; v < cfg.vocab; ++v)
    for (std::size_t c = 0; c < cfg.dim; ++c) model.embedding(v, c) = model.embedding(0, c);
  const auto corpus = tokens(4000, 2);
  BankOptions opts;
  opts.samples = 8;
  auto banks = collect_bank(model, corpus, opts);
  auto dec = std::make_shared<PositionalDecomposition>(decompose(banks.at({StreamKind::LayerOutput, 0}), cfg.context));
  const auto toks = tokens(16, 7);
  for (std::size_t layer : {1, 2, 3}) {
    check_identical(positional_vector_replacement(model, dec, layer, 1.0, 1.0).forward(toks), forward(model, toks));
  }
  auto w = positional_vector_replacement(model, dec, 2, 2.0, 1.1);
  const auto longer = tokens(*w.max_length(), 3);
  CHECK_NOTHROW(w.forward(longer));
  const auto too_long = tokens(*w.max_length() + 1, 3);
  CHECK_THROWS_AS(w.forward(too_long), ExtensionExhaustedError);
  // first four positions are untouched
  const auto a = w.forward(toks);
  const auto b = forward(model, toks);
  for (std::size_t t = 0; t < 4; ++t) CHECK(a.layer_outputs[1].row(t)[0] == b.layer_outputs[1].row(t)[0]);
}

TEST_CASE("replacement validation") {
  ModelConfig cfg = tiny();
  auto model = build_model(cfg, 4);
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, 3, 16, 16, false);
  bank.add(std::vector<Matrix>(3, Matrix(16, 16, 1.0f)));
  auto dec = std::make_shared<PositionalDecomposition>(decompose(bank, 16));
  CHECK_THROWS_AS(positional_vector_replacement(model, dec, 0, 2.0, 1.0), ConfigError);
  CHECK_THROWS_AS(positional_vector_replacement(model, dec, 4, 2.0, 1.0), ConfigError);
  CHECK_THROWS_AS(positional_vector_replacement(model, dec, 1, 0.5, 1.0), ConfigError);
  CHECK_THROWS_AS(positional_vector_replacement(model, dec, 1, 2.0, 0.9), ConfigError);
  CHECK_THROWS_AS(positional_vector_replacement(model, nullptr, 1, 2.0, 1.0), CapabilityError);
  HiddenStateBank vb({StreamKind::Value, 0}, 3, 16, 16, false);
  vb.add(std::vector<Matrix>(3, Matrix(16, 16, 1.0f)));
  auto vdec = std::make_shared<PositionalDecomposition>(decompose(vb, 16));
  CHECK_THROWS_AS(positional_vector_replacement(model, vdec, 1, 2.0, 1.0), CapabilityError);
}

TEST_CASE("layer sweep") {
  ModelConfig cfg = tiny();
  auto model = build_model(cfg, 4);
  const auto corpus = tokens(6000, 5);
  BankOptions opts;
  opts.samples = 16;
  auto dec = std::make_shared<PositionalDecomposition>(
      decompose(collect_bank(model, corpus, opts).at({StreamKind::LayerOutput, 0}), cfg.context));
  const auto one = replacement_layer_sweep(model, dec, {2}, 1.5, 1.0, corpus, 20, 6, 1);
  const double direct = windowed_ppl(positional_vector_replacement(model, dec, 2, 1.5, 1.0), corpus, 20, 6, 1);
  CHECK(one.points.at(0).ppl == direct);
  CHECK(one.best_layer == 2);
  const auto fwd = replacement_layer_sweep(model, dec, {1, 2, 3}, 1.5, 1.0, corpus, 20, 6, 1);
  const auto rev = replacement_layer_sweep(model, dec, {3, 2, 1}, 1.5, 1.0, corpus, 20, 6, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(fwd.points[i].ppl == rev.points[2 - i].ppl);
  CHECK(fwd.best_layer == rev.best_layer);
}

TEST_CASE("ratio per layer") {
  // Layer 1 maps with ratio 2, layer 2 with ratio 1.5 (three of every two).
  const std::size_t c = 8, t = 16;
  std::vector<Matrix> orig(2, Matrix(t, t)), ext(2, Matrix(t, t));
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < t; ++i) orig[l](i, i) = 1.0f;
  for (std::size_t s = 1; s <= t; ++s) {
    ext[0](s - 1, (s + 1) / 2 - 1) = 1.0f;
    ext[1](s - 1, std::min<std::size_t>(t, (2 * s + 2) / 3) - 1) = 1.0f;
  }
  HiddenStateBank ob({StreamKind::LayerOutput, 0}, 2, t, t, false), eb({StreamKind::LayerOutput, 0}, 2, t, t, false);
  ob.add(orig);
  eb.add(ext);
  const auto od = decompose(ob, c), ed = decompose(eb, c);
  const auto ratios = ratio_per_layer(od, ed, {1, 2}, c);
  CHECK(ratios[0].ratio == 2.0);
  CHECK(ratios[1].ratio == 1.5);
  const auto same = ratio_per_layer(od, od, {1, 2}, c);
  for (const auto& r : same) CHECK(r.ratio == 1.0);
}

TEST_CASE("method names round trip") {
  for (auto m : {ExtensionMethod::None, ExtensionMethod::AttentionScaling, ExtensionMethod::InitialScaling,
                 ExtensionMethod::DynamicNTK, ExtensionMethod::PositionalVectorReplacement,
                 ExtensionMethod::AttentionWindowExtension}) {
    CHECK(parse_extension_method(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_extension_method("yarn"), ConfigError);
}
