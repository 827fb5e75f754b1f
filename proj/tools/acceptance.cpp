// Acceptance run: one PASS/FAIL line per criterion.
//   1-7   exact property checks against hand-written oracles
//   8-16  directional checks on trained desk-scale presets
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pvlab/analysis.hpp"
#include "pvlab/config.hpp"
#include "pvlab/decompose.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/extend.hpp"
#include "pvlab/pipeline.hpp"

using namespace pvlab;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Pinned tolerances

namespace tol {
constexpr double kIdentity = 1e-6;  // h = p + c, naive means
constexpr double kBasisSum = 1e-5;  // sum_t m
constexpr double kDecomposeSeconds = 1.0;
constexpr double kAttention = 1e-6;
constexpr double kGradient = 1e-3;
constexpr std::size_t kGradientWeights = 10;
constexpr double kInterp = 1e-5;  // relative to the ramp scale

constexpr std::size_t kPcaInitial = 4;
constexpr double kPcaPercentile = 0.9;
constexpr double kDistinctSlack = 0.25;
constexpr double kAblationInitialSim = 0.5;
constexpr double kAblationInitialPpl = 10.0;
constexpr double kAblationSecondarySim = 0.8;
constexpr double kAblationSecondaryPpl = 2.0;
constexpr double kSinkOverBaseline = 5.0;
constexpr double kSinkDrop = 0.5;
constexpr double kSlopeDrop = 0.5;
constexpr double kWindowPplSlack = 0.2;
constexpr double kWindowMaxSim = 0.95;
constexpr double kNopeBlowup = 10.0;
constexpr double kNopeMaxSim = 0.8;
constexpr double kRatioLow = 1.5;
constexpr double kRatioHigh = 3.5;
constexpr double kInitialVsFull = 0.25;
constexpr double kExtendGain = 5.0;
constexpr double kExtendWithin = 2.0;
constexpr double kExplode = 1e3;
constexpr double kLateIncrement = 0.1;
constexpr double kMcSigmas = 4.0;
constexpr double kSyntheticSeconds = 60.0;
}  // namespace tol

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string num(double v) { return fmt("%.4g", v); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. decomposition identities

Outcome decomposition_identities() {
  const std::size_t layers = 4, t = 256, d = 64, n = 64, ctx = 64;
  std::mt19937_64 rng(101);
  std::normal_distribution<float> nd(0.5f, 2.0f);
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, layers, t, d, true);
  std::vector<std::vector<Matrix>> samples;
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<Matrix> one;
    for (std::size_t l = 0; l < layers; ++l) {
      Matrix m(t, d);
      // Position-dependent offset so p is not trivially zero.
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < d; ++c) m(i, c) = nd(rng) + std::sin(0.1f * static_cast<float>(i * (c + 1)));
      one.push_back(std::move(m));
    }
    samples.push_back(one);
  }
  for (const auto& s : samples) bank.add(s);

  const auto t0 = std::chrono::steady_clock::now();
  const auto dec = decompose(bank, ctx);
  const auto sem = semantic_vectors(bank, dec);
  const double elapsed = seconds_since(t0);

  double worst_naive = 0.0, worst_recon = 0.0, worst_sum = 0.0;
  bool exact = true;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> u(d, 0.0);
    std::vector<double> p(t * d, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t s = 0; s < n; ++s) acc += samples[s][l](i, c);
        p[i * d + c] = acc / static_cast<double>(n);
      }
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t i = 0; i < ctx; ++i) u[c] += p[i * d + c];
      u[c] /= static_cast<double>(ctx);
      worst_naive = std::max(worst_naive, std::abs(dec.u[l][c] - u[c]));
    }
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        worst_naive = std::max(worst_naive, std::abs(dec.p[l](i, c) - p[i * d + c]));
        exact = exact && dec.p[l](i, c) == dec.u[l][c] + dec.m[l](i, c);
        for (std::size_t s = 0; s < n; ++s)
          worst_recon = std::max(worst_recon,
                                 std::abs(static_cast<double>(samples[s][l](i, c)) - dec.p[l](i, c) - sem[s][l](i, c)));
      }
    for (std::size_t c = 0; c < d; ++c) {
      double sum = 0.0;
      for (std::size_t i = 0; i < ctx; ++i) sum += dec.m[l](i, c);
      worst_sum = std::max(worst_sum, std::abs(sum));
    }
  }
  Outcome o;
  o.pass = worst_naive <= tol::kIdentity && worst_recon <= tol::kIdentity && exact && worst_sum <= tol::kBasisSum &&
           elapsed < tol::kDecomposeSeconds;
  o.detail = "naive " + num(worst_naive) + ", h-p-c " + num(worst_recon) + ", p==u+m " + (exact ? "yes" : "no") +
             ", sum m " + num(worst_sum) + ", " + fmt("%.3fs", elapsed);
  return o;
}

// ---------------------------------------------------------------------------
// 2. attention oracles

ModelConfig small_config(PeKind pe, AttnKind attn, std::size_t window) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 8;
  c.ffn_dim = 16;
  c.vocab = 20;
  c.context = 6;
  c.pe = pe;
  c.attn = attn;
  c.window = window;
  return c;
}

void inflate(TransformerModel& m, float factor) {
  for (auto& [name, p] : m.parameters()) {
    if (name.find("norm") != std::string::npos) continue;
    for (auto& v : p->storage()) v *= factor;
  }
}

std::vector<Token> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Token> out(n);
  for (auto& t : out) t = static_cast<Token>(rng() % vocab);
  return out;
}

// Softmax over visible keys, written out directly.
std::vector<std::vector<double>> oracle_attention(const ModelConfig& cfg, std::size_t head, const Matrix& q,
                                                  const Matrix& k, double lambda, double initial_scale,
                                                  std::size_t initial_k) {
  const std::size_t t = q.rows(), dh = q.cols();
  std::vector<std::vector<double>> a(t, std::vector<double>(t, 0.0));
  const double slope = cfg.pe == PeKind::ALiBi ? std::pow(2.0, -8.0 * static_cast<double>(head + 1) / static_cast<double>(cfg.heads)) : 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> logit(t, -std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j <= i; ++j) {
      if (cfg.attn == AttnKind::Window && i - j >= cfg.window) continue;
      double dot = 0.0;
      if (cfg.pe == PeKind::RoPE) {
        // Pairs (2p, 2p+1) as complex numbers rotated by position * theta_p.
        std::complex<double> acc = 0.0;
        for (std::size_t p = 0; p < dh / 2; ++p) {
          const double theta = std::pow(cfg.rope_base, -2.0 * static_cast<double>(p) / static_cast<double>(dh));
          const std::complex<double> zq(q(i, 2 * p), q(i, 2 * p + 1)), zk(k(j, 2 * p), k(j, 2 * p + 1));
          acc += zq * std::polar(1.0, theta * static_cast<double>(i)) *
                 std::conj(zk * std::polar(1.0, theta * static_cast<double>(j)));
        }
        dot = acc.real();
      } else {
        for (std::size_t c = 0; c < dh; ++c) dot += static_cast<double>(q(i, c)) * k(j, c);
      }
      double s = lambda * dot / std::sqrt(static_cast<double>(dh));
      if (j < initial_k) s *= initial_scale;
      s -= slope * static_cast<double>(i - j);
      logit[j] = s;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logit) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t j = 0; j < t; ++j) z += std::isinf(logit[j]) ? 0.0 : std::exp(logit[j] - mx);
    for (std::size_t j = 0; j < t; ++j) a[i][j] = std::isinf(logit[j]) ? 0.0 : std::exp(logit[j] - mx) / z;
  }
  return a;
}

Outcome attention_oracles() {
  struct Case {
    const char* name;
    ModelConfig cfg;
  };
  const std::vector<Case> cases{{"full", small_config(PeKind::NoPE, AttnKind::Full, 0)},
                                {"window", small_config(PeKind::NoPE, AttnKind::Window, 3)},
                                {"rope", small_config(PeKind::RoPE, AttnKind::Full, 0)},
                                {"alibi", small_config(PeKind::ALiBi, AttnKind::Full, 0)}};
  CaptureFlags capture;
  capture.qkv = true;
  capture.attention = true;
  double worst = 0.0;
  bool argmax_ok = true;
  std::size_t checked = 0;
  for (const auto& c : cases) {
    auto model = build_model(c.cfg, 17);
    inflate(model, 6.0f);
    for (std::size_t len : {1u, 4u, 6u}) {
      const auto toks = random_tokens(len, c.cfg.vocab, 31 + len);
      struct Variant {
        double lambda, init;
        std::size_t k;
        ExtendedModel wrap;
      };
      std::vector<Variant> variants{{1.0, 1.0, 0, attention_scaling(model, 1.0)},
                                    {1.7, 1.0, 0, attention_scaling(model, 1.7)},
                                    {0.6, 1.0, 0, attention_scaling(model, 0.6)},
                                    {1.0, 2.5, 2, initial_scaling(model, 2.5, 2)},
                                    {1.0, 0.4, 4, initial_scaling(model, 0.4, 4)}};
      for (const auto& v : variants) {
        const auto tr = v.wrap.forward(toks, {}, capture);
        for (std::size_t l = 0; l < c.cfg.layers; ++l)
          for (std::size_t h = 0; h < c.cfg.heads; ++h) {
            const auto want = oracle_attention(c.cfg, h, tr.queries[l][h], tr.keys[l][h], v.lambda, v.init, v.k);
            const Matrix& got = tr.attention[l][h];
            for (std::size_t i = 0; i < len; ++i)
              for (std::size_t j = 0; j < len; ++j) worst = std::max(worst, std::abs(got(i, j) - want[i][j]));
            ++checked;
          }
      }
    }
    if (c.cfg.pe == PeKind::ALiBi) continue;  // the bias is not scaled, so argmax may move
    // Argmax of each row under lambda, on identical queries and keys.
    std::mt19937_64 rng(5);
    std::normal_distribution<float> nd(0.0f, 2.0f);
    const std::size_t dh = c.cfg.head_dim();
    for (int rep = 0; rep < 50; ++rep) {
      Matrix q(6, dh), k(6, dh);
      for (auto& x : q.storage()) x = nd(rng);
      for (auto& x : k.storage()) x = nd(rng);
      const Matrix base = attention_probabilities(c.cfg, 0, q, k);
      for (double lambda : {0.3, 1.5, 4.0}) {
        const Matrix sc = attention_probabilities(c.cfg, 0, q, k, attention_scaling(model, lambda).hooks().attention);
        for (std::size_t i = 0; i < 6; ++i) {
          const auto a = base.row(i), b = sc.row(i);
          argmax_ok = argmax_ok && std::max_element(a.begin(), a.end()) - a.begin() ==
                                       std::max_element(b.begin(), b.end()) - b.begin();
        }
      }
    }
  }
  return {worst <= tol::kAttention && argmax_ok,
          std::to_string(checked) + " head maps, max |err| " + num(worst) + ", argmax " + (argmax_ok ? "kept" : "moved")};
}

// ---------------------------------------------------------------------------
// 3. gradient check

Outcome gradient_check() {
  ModelConfig cfg = small_config(PeKind::RoPE, AttnKind::Full, 0);
  cfg.dim = 16;
  cfg.ffn_dim = 32;
  cfg.vocab = 40;
  cfg.context = 16;
  auto model = build_model(cfg, 23);
  inflate(model, 8.0f);
  const auto toks = random_tokens(34, cfg.vocab, 23);
  const std::vector<std::span<const Token>> seqs{std::span<const Token>(toks.data(), 17),
                                                std::span<const Token>(toks.data() + 17, 17)};
  std::vector<Matrix> grads;
  loss_and_gradients(model, seqs, &grads);
  auto params = model.parameters();
  std::mt19937_64 rng(77);
  std::size_t checked = 0, attempts = 0;
  double worst = 0.0;
  while (checked < tol::kGradientWeights && attempts < 10000) {
    ++attempts;
    const std::size_t pi = rng() % params.size();
    Matrix& w = *params[pi].second;
    const std::size_t ei = rng() % w.size();
    const double g = grads[pi].data()[ei];
    if (std::abs(g) < 1e-4) continue;  // relative error is meaningless near zero
    const float orig = w.data()[ei];
    const float h = std::max(1e-3f, std::abs(orig) * 1e-2f);
    w.data()[ei] = orig + h;
    const double up = static_cast<double>(w.data()[ei]) - orig;
    const double lp = loss_and_gradients(model, seqs, nullptr);
    w.data()[ei] = orig - h;
    const double dn = orig - static_cast<double>(w.data()[ei]);
    const double lm = loss_and_gradients(model, seqs, nullptr);
    w.data()[ei] = orig;
    const double fd = (lp - lm) / (up + dn);
    worst = std::max(worst, std::abs(fd - g) / std::abs(g));
    ++checked;
  }
  return {checked == tol::kGradientWeights && worst < tol::kGradient,
          std::to_string(checked) + " weights, max rel err " + num(worst)};
}

// ---------------------------------------------------------------------------
// 4. identity wrappers

bool same_trace(const ForwardTrace& a, const ForwardTrace& b) {
  return a.layer_outputs == b.layer_outputs && a.logits == b.logits;
}

Outcome identity_wrappers() {
  std::vector<std::string> bad;
  std::size_t checked = 0;
  const auto check = [&](const std::string& name, const ForwardTrace& a, const ForwardTrace& b) {
    ++checked;
    if (!same_trace(a, b)) bad.push_back(name);
  };
  ModelConfig cfg = small_config(PeKind::NoPE, AttnKind::Full, 0);
  cfg.layers = 3;
  cfg.dim = 16;
  cfg.ffn_dim = 32;
  cfg.vocab = 40;
  cfg.context = 16;
  const auto toks = random_tokens(16, cfg.vocab, 3);
  for (PeKind pe : {PeKind::NoPE, PeKind::RoPE, PeKind::ALiBi}) {
    ModelConfig c = cfg;
    c.pe = pe;
    const auto model = build_model(c, 5);
    const auto clean = forward(model, toks);
    check("lambda=1 " + to_string(pe), attention_scaling(model, 1.0).forward(toks), clean);
    check("initial lambda=1 " + to_string(pe), initial_scaling(model, 1.0).forward(toks), clean);
    if (pe == PeKind::RoPE) check("ntk target=C", dynamic_ntk(model, c.context).forward(toks), clean);
  }
  {
    ModelConfig c = cfg;
    c.attn = AttnKind::Window;
    c.window = 4;
    const auto model = build_model(c, 5);
    check("awe r=1", attention_window_extension(model, 1.0, 1.0).forward(toks), forward(model, toks));
  }
  {
    // One shared embedding row: hidden states depend on position only.
    auto model = build_model(cfg, 4);
    for (std::size_t v = 1; v < cfg.vocab; ++v)
      for (std::size_t c = 0; c < cfg.dim; ++c) model.embedding(v, c) = model.embedding(0, c);
    BankOptions opts;
    opts.samples = 8;
    const auto corpus = random_tokens(4000, cfg.vocab, 2);
    const auto banks = collect_bank(model, corpus, opts);
    const auto dec =
        std::make_shared<PositionalDecomposition>(decompose(banks.at({StreamKind::LayerOutput, 0}), cfg.context));
    for (std::size_t layer = 1; layer <= cfg.layers; ++layer)
      check("pvr r=1 layer " + std::to_string(layer),
            positional_vector_replacement(model, dec, layer, 1.0, 1.0).forward(toks), forward(model, toks));
  }
  std::string detail = std::to_string(checked) + " wrappers bit-identical";
  if (!bad.empty()) {
    detail = "differs:";
    for (const auto& b : bad) detail += " [" + b + "]";
  }
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// 5. interpolation ratio on orthogonal banks

Outcome interpolation_ratio_oracle() {
  const std::size_t c = 16;
  std::string detail;
  bool ok = true;
  for (std::size_t r : {1u, 2u, 4u}) {
    const std::size_t t = c * r;
    Matrix orig(t, t), scaled(t, t);
    for (std::size_t s = 0; s < t; ++s) orig(s, s) = 1.0f;
    // Position s of the extended run reproduces original position ceil(s / r).
    for (std::size_t s = 1; s <= t; ++s) scaled(s - 1, (s + r - 1) / r - 1) = 1.0f;
    // Oracle: f(s) = argmax_t cos; ratio = max{s : f(s) = C} / C.
    std::size_t last = 0;
    for (std::size_t s = 1; s <= t; ++s)
      if ((s + r - 1) / r == c) last = s;
    const double want = static_cast<double>(last) / static_cast<double>(c);
    const auto got = effective_interpolation_ratio(orig, scaled, c);
    ok = ok && got.ratio == want && want == static_cast<double>(r) && got.matched && !got.approximate;
    detail += (detail.empty() ? "" : ", ") + ("r=" + std::to_string(r) + " -> " + num(got.ratio));
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 6. linear interpolation on ramps

Outcome interp_ramps() {
  double worst = 0.0;
  bool ends = true;
  for (std::size_t n : {2u, 5u, 16u, 64u}) {
    for (std::size_t target : {2u, 3u, 7u, 31u, 128u, 255u}) {
      // Ramp row i = a + b * i per column.
      Matrix src(n, 3);
      const double a[3] = {0.0, -3.25, 10.0}, b[3] = {1.0, 0.5, -2.0};
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) src(i, c) = static_cast<float>(a[c] + b[c] * static_cast<double>(i));
      const Matrix out = interp_linear(src, target);
      for (std::size_t i = 0; i < target; ++i) {
        const double x = static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(target - 1);
        for (std::size_t c = 0; c < 3; ++c) {
          const double want = a[c] + b[c] * x;
          const double scale = std::abs(a[c]) + std::abs(b[c]) * static_cast<double>(n);
          worst = std::max(worst, std::abs(out(i, c) - want) / scale);
        }
      }
      for (std::size_t c = 0; c < 3; ++c) ends = ends && out(0, c) == src(0, c) && out(target - 1, c) == src(n - 1, c);
    }
  }
  // Replacement interpolant: new position k+1+j reads source k+1+j/r.
  const std::size_t c = 16, k = 4;
  Matrix p(c, 3);
  for (std::size_t t = 1; t <= c; ++t) p(t - 1, 0) = static_cast<float>(t);
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, 1, c, 3, false);
  bank.add({p});
  const auto dec = std::make_shared<PositionalDecomposition>(decompose(bank, c));
  ModelConfig cfg = small_config(PeKind::NoPE, AttnKind::Full, 0);
  cfg.dim = 3;
  cfg.heads = 1;
  cfg.layers = 1;
  cfg.context = c;
  const auto model = build_model(cfg, 0);
  double worst_pvr = 0.0;
  for (double r : {1.0, 2.0, 3.0, 4.0}) {
    const auto w = positional_vector_replacement(model, dec, 1, r, 1.0, k);
    const Matrix& hat = w.interpolated();
    for (std::size_t j = 0; j < hat.rows(); ++j)
      worst_pvr = std::max(worst_pvr, std::abs(hat(j, 0) - (static_cast<double>(k + 1) + static_cast<double>(j) / r)) /
                                          static_cast<double>(c));
  }
  return {worst <= tol::kInterp && worst_pvr <= tol::kInterp && ends,
          "ramp rel err " + num(worst) + ", replacement rel err " + num(worst_pvr) + ", ends " + (ends ? "exact" : "moved")};
}

// ---------------------------------------------------------------------------
// 7. containers

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome container_round_trip(const fs::path& scratch) {
  fs::create_directories(scratch);
  bool ok = true;
  std::string detail;
  {
    ModelConfig cfg = small_config(PeKind::RoPE, AttnKind::Window, 4);
    cfg.tie_embeddings = true;
    auto model = build_model(cfg, 9);
    const auto path = scratch / "model.ckpt";
    save_checkpoint(model, path);
    const auto back = load_checkpoint(path);
    bool same = back.config == model.config;
    const auto a = model.parameters();
    const auto b = back.parameters();
    same = same && a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i) same = a[i].first == b[i].first && *a[i].second == *b[i].second;
    save_checkpoint(back, scratch / "model2.ckpt");
    same = same && slurp(path) == slurp(scratch / "model2.ckpt");
    ok = ok && same;
    detail += std::string("checkpoint ") + (same ? "exact" : "differs");
  }
  {
    ModelConfig cfg = small_config(PeKind::NoPE, AttnKind::Full, 0);
    const auto model = build_model(cfg, 11);
    BankOptions opts;
    opts.samples = 6;
    opts.length = 12;
    opts.qkv = true;
    const auto banks = collect_bank(model, random_tokens(2000, cfg.vocab, 4), opts);
    const auto set = decompose(banks, cfg.context);
    save_decomposition(set, scratch / "dec.bin");
    const auto back = load_decomposition(scratch / "dec.bin");
    bool same = back.streams.size() == set.streams.size();
    for (const auto& [id, d] : set.streams) {
      const auto* e = back.find(id);
      same = same && e != nullptr && e->context == d.context && e->samples == d.samples && e->p == d.p &&
             e->u == d.u && e->m == d.m;
    }
    ok = ok && same;
    detail += std::string(", decomposition ") + (same ? "exact" : "differs");
  }
  return {ok, detail};
}

}  // namespace

namespace {

// ---------------------------------------------------------------------------
// Trained presets

struct Preset {
  std::unique_ptr<Pipeline> pipeline;
  TransformerModel model;
  std::shared_ptr<const DecompositionSet> decs;

  const ModelConfig& config() const { return model.config; }
  std::size_t context() const { return model.config.context; }
  std::span<const Token> eval() const { return pipeline->corpus().split.eval; }
  const PositionalDecomposition& outputs() const { return decs->at({StreamKind::LayerOutput, 0}); }
  std::shared_ptr<const PositionalDecomposition> outputs_ptr() const {
    return std::shared_ptr<const PositionalDecomposition>(decs, &outputs());
  }
};

class Presets {
 public:
  Presets(fs::path dir, std::optional<fs::path> cache) : dir_(std::move(dir)), cache_(std::move(cache)) {}

  const Preset& get(const std::string& name) {
    auto it = loaded_.find(name);
    if (it != loaded_.end()) return it->second;
    auto cfg = load_run_config(dir_ / (name + ".cfg"));
    if (cache_) cfg.cache_dir = *cache_;
    std::fprintf(stderr, "preset %s: training or fetching from cache\n", name.c_str());
    Preset p;
    p.pipeline = std::make_unique<Pipeline>(cfg);
    p.model = load_checkpoint(p.pipeline->train());
    p.pipeline->bank();
    p.decs = std::make_shared<DecompositionSet>(load_decomposition(p.pipeline->decompose()));
    return loaded_.emplace(name, std::move(p)).first->second;
  }

 private:
  fs::path dir_;
  std::optional<fs::path> cache_;
  std::map<std::string, Preset> loaded_;
};

// Preset names, one file each under the runs directory.
const std::string kNope = "desk-nope";
const std::string kWide = "desk-window32";
const std::string kNarrow = "desk-window5";

// Evaluation windows; tuning uses a different sampler seed than reporting.
constexpr std::size_t kEvalSamples = 64;
constexpr std::uint64_t kEvalSeed = 5;
constexpr std::uint64_t kTuneSeed = 17;
constexpr std::size_t kTuneSamples = 32;

Matrix project2(const Matrix& rows) { return pca_project(pca_topk(rows, 2), rows); }

// ---------------------------------------------------------------------------
// 8. layer-1 positional vectors

Outcome pca_initial_tokens(Presets& presets) {
  const auto& p = presets.get(kNope);
  const std::size_t c = p.context();
  const auto& dec = p.outputs();
  const Matrix first = project2(dec.positional(1).slice_rows(0, c));
  const auto sep = pca_separation(first, tol::kPcaInitial, c / 4 + 1, tol::kPcaPercentile);
  const std::size_t mid = std::max<std::size_t>(2, p.config().layers / 2);
  const double cv1 = nearest_neighbor_cv(first);
  const double cvm = nearest_neighbor_cv(project2(dec.positional(mid).slice_rows(0, c)));
  return {sep.initial_min > sep.late_percentile && cvm < cv1,
          "initial min " + num(sep.initial_min) + " vs late p90 " + num(sep.late_percentile) + ", nn cv layer 1 " +
              num(cv1) + " vs layer " + std::to_string(mid) + " " + num(cvm)};
}

// ---------------------------------------------------------------------------
// 9. distinct positional vectors under window attention

Outcome distinct_growth(Presets& presets) {
  const auto& p = presets.get(kWide);
  const std::size_t w = p.config().window;
  const auto curve = distinct_count_curve(p.outputs(), w, 0.99);
  bool ok = true;
  std::size_t prev = 0;
  std::string counts;
  for (const auto& row : curve.rows) {
    counts += (counts.empty() ? "" : " ") + std::to_string(row.distinct_count);
    if (row.saturated) {
      ok = ok && row.distinct_count + 1 >= p.outputs().positions();
      continue;
    }
    const double inc = static_cast<double>(row.distinct_count) - static_cast<double>(prev);
    ok = ok && std::abs(inc - static_cast<double>(w)) <= tol::kDistinctSlack * static_cast<double>(w);
    prev = row.distinct_count;
  }
  return {ok, "W=" + std::to_string(w) + ", counts by layer " + counts};
}

// ---------------------------------------------------------------------------
// 10. ablation of the initial positional basis

Outcome ablation(Presets& presets) {
  const auto& p = presets.get(kNope);
  AblationOptions opts;
  opts.variants = {AblationVariant::WoPositionalBasis};
  opts.samples = kEvalSamples;
  opts.seed = kEvalSeed;
  const auto rows = ablation_study(p.model, p.decs, p.eval(), opts);
  const double clean = rows.front().ppl;
  const AblationResult* init = nullptr;
  const AblationResult* second = nullptr;
  for (const auto& r : rows) {
    if (r.group == "initial") init = &r;
    if (r.group == "secondary") second = &r;
  }
  const bool ok = init->sim < tol::kAblationInitialSim && init->ppl >= tol::kAblationInitialPpl * clean &&
                  second->sim > tol::kAblationSecondarySim && second->ppl < tol::kAblationSecondaryPpl * clean;
  return {ok, "clean ppl " + num(clean) + "; initial sim " + num(init->sim) + " ppl x" + num(init->ppl / clean) +
                  "; secondary sim " + num(second->sim) + " ppl x" + num(second->ppl / clean)};
}

// ---------------------------------------------------------------------------
// 11. attention sinks and long-term decay

Outcome sinks(Presets& presets) {
  const auto& p = presets.get(kNope);
  const auto& cfg = p.config();
  BankOptions opts;
  opts.samples = kEvalSamples;
  opts.length = cfg.context;
  opts.seed = kEvalSeed;
  opts.qkv = true;
  opts.retain = true;
  opts.layer_outputs = false;
  const auto banks = collect_bank(p.model, p.eval(), opts);
  const auto decs = decompose(banks, cfg.context);
  // The strongest sink head is the one the criterion describes.
  AttentionProfile best;
  double best_ratio = -1.0;
  for (std::size_t l = 1; l <= cfg.layers; ++l)
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      auto o = attention_component_maps(cfg, banks, decs, l, h, AttentionSetting::Original);
      if (o.sink_strength / o.uniform_baseline > best_ratio) {
        best_ratio = o.sink_strength / o.uniform_baseline;
        best = std::move(o);
      }
    }
  const auto wo = attention_component_maps(cfg, banks, decs, best.layer, best.head, AttentionSetting::WoPositionalBasis);
  const bool ok = best_ratio >= tol::kSinkOverBaseline && best.decay_slope < 0.0 &&
                  wo.sink_strength <= tol::kSinkDrop * best.sink_strength &&
                  std::abs(wo.decay_slope) <= tol::kSlopeDrop * std::abs(best.decay_slope);
  return {ok, "layer " + std::to_string(best.layer) + " head " + std::to_string(*best.head) + ": sink " +
                  num(best.sink_strength) + " (x" + num(best_ratio) + " uniform), slope " + num(best.decay_slope) +
                  "; without basis sink " + num(wo.sink_strength) + ", slope " + num(wo.decay_slope)};
}

// ---------------------------------------------------------------------------
// 12. direct extrapolation

ExtrapolationCurves extrapolation(const Preset& p) {
  const std::size_t c = p.context();
  const auto nll = position_nll(p.model, p.eval(), 4 * c, kEvalSamples, kEvalSeed);
  return extrapolation_curves(p.outputs(), nll, c);
}

Outcome direct_extrapolation(Presets& presets) {
  const auto w = extrapolation(presets.get(kNarrow));
  const auto n = extrapolation(presets.get(kNope));
  const bool window_ok = w.beyond_ppl <= (1.0 + tol::kWindowPplSlack) * w.within_ppl && w.beyond_max_sim >= tol::kWindowMaxSim;
  const bool nope_ok = n.beyond_ppl >= tol::kNopeBlowup * n.within_ppl && n.beyond_max_sim < tol::kNopeMaxSim;
  return {window_ok && nope_ok, "small window: ppl x" + num(w.beyond_ppl / w.within_ppl) + ", max sim " +
                                    num(w.beyond_max_sim) + "; nope: ppl x" + num(n.beyond_ppl / n.within_ppl) +
                                    ", max sim " + num(n.beyond_max_sim)};
}

// ---------------------------------------------------------------------------
// 13. interpolation by attention scaling

// Layer-output decomposition of a wrapped model on windows of `length`.
PositionalDecomposition wrapped_outputs(const Preset& p, const ExtendedModel& em, std::size_t length) {
  const auto& cfg = p.pipeline->config();
  BankOptions opts;
  opts.samples = cfg.data.samples;
  opts.length = length;
  opts.seed = cfg.data.sampler_seed;
  const auto banks = collect_bank(p.model, p.eval(), opts, {}, em.hooks());
  return decompose(banks.at({StreamKind::LayerOutput, 0}), p.context());
}

struct MeanRatio {
  double mean = 0.0;
  std::size_t unmatched = 0;
};

// Mean effective ratio over layers 2..L against the unextended vectors on
// the same length. Layers with no position mapping near C are counted, not
// averaged.
MeanRatio mean_ratio(const Preset& p, const PositionalDecomposition& ext) {
  const std::size_t t = ext.positions();
  MeanRatio out;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 2; l <= p.config().layers; ++l) {
    const auto r = effective_interpolation_ratio(p.outputs().positional(l).slice_rows(0, t), ext.positional(l), p.context());
    if (!r.matched) {
      ++out.unmatched;
      continue;
    }
    sum += r.ratio;
    ++n;
  }
  out.mean = n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

const std::vector<double> kLambdaGrid{1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.8, 2.0};

template <class Make>
double tune_lambda(const Preset& p, std::size_t length, Make make) {
  double best = kLambdaGrid.front(), best_ppl = std::numeric_limits<double>::infinity();
  for (double lambda : kLambdaGrid) {
    const double ppl = windowed_ppl(make(lambda), p.eval(), length, kTuneSamples, kTuneSeed);
    if (ppl < best_ppl) {
      best_ppl = ppl;
      best = lambda;
    }
  }
  return best;
}

Outcome interpolation_ratio(Presets& presets) {
  const auto& p = presets.get(kNope);
  const std::size_t len = 2 * p.context();
  const double la = tune_lambda(p, len, [&](double l) { return attention_scaling(p.model, l); });
  const double li = tune_lambda(p, len, [&](double l) { return initial_scaling(p.model, l); });
  const auto a = mean_ratio(p, wrapped_outputs(p, attention_scaling(p.model, la), len));
  const auto i = mean_ratio(p, wrapped_outputs(p, initial_scaling(p.model, li), len));
  const double ra = a.mean, ri = i.mean;
  const bool ok = a.unmatched == 0 && i.unmatched == 0 && ra >= tol::kRatioLow && ra <= tol::kRatioHigh &&
                  std::abs(ri - ra) <= tol::kInitialVsFull * ra;
  return {ok, "attention scaling lambda " + num(la) + " ratio " + num(ra) + " (" + std::to_string(a.unmatched) +
                  " layers unmatched); initial scaling lambda " + num(li) + " ratio " + num(ri) + " (" +
                  std::to_string(i.unmatched) + " layers unmatched)"};
}

// ---------------------------------------------------------------------------
// 14. positional vector replacement and attention window extension

Outcome extension_methods(Presets& presets) {
  std::string detail;
  bool ok = true;
  {
    const auto& p = presets.get(kNope);
    const std::size_t c = p.context();
    const auto dec = p.outputs_ptr();
    const double within = windowed_ppl(ExtendedModel(p.model, {}), p.eval(), c, kEvalSamples, kEvalSeed);
    // Longest input r = 2 supports, capped at 2C.
    const std::size_t len = std::min(2 * c, *positional_vector_replacement(p.model, dec, 1, 2.0, 1.0).max_length());
    const double plain = windowed_ppl(ExtendedModel(p.model, {}), p.eval(), len, kEvalSamples, kEvalSeed);
    std::size_t best_layer = 1;
    double best_alpha = 1.0, best_ppl = std::numeric_limits<double>::infinity();
    for (std::size_t layer = 1; layer <= p.config().layers; ++layer)
      for (double alpha : {1.0, 1.1, 1.2, 1.3}) {
        const double ppl = windowed_ppl(positional_vector_replacement(p.model, dec, layer, 2.0, alpha), p.eval(), len,
                                        kTuneSamples, kTuneSeed);
        if (ppl < best_ppl) {
          best_ppl = ppl;
          best_layer = layer;
          best_alpha = alpha;
        }
      }
    const double pvr = windowed_ppl(positional_vector_replacement(p.model, dec, best_layer, 2.0, best_alpha), p.eval(),
                                    len, kEvalSamples, kEvalSeed);
    ok = ok && plain >= tol::kExtendGain * pvr && pvr <= tol::kExtendWithin * within;
    detail += "pvr(layer " + std::to_string(best_layer) + ", alpha " + num(best_alpha) + ") at " + std::to_string(len) +
              ": " + num(plain) + " -> " + num(pvr) + " (within " + num(within) + ")";
  }
  {
    const auto& p = presets.get(kWide);
    const std::size_t c = p.context();
    const double within = windowed_ppl(ExtendedModel(p.model, {}), p.eval(), c, kEvalSamples, kEvalSeed);
    const double plain = windowed_ppl(ExtendedModel(p.model, {}), p.eval(), 2 * c, kEvalSamples, kEvalSeed);
    const double l2 = tune_lambda(p, 2 * c, [&](double l) { return attention_window_extension(p.model, 2.0, l); });
    const double awe = windowed_ppl(attention_window_extension(p.model, 2.0, l2), p.eval(), 2 * c, kEvalSamples, kEvalSeed);
    ok = ok && plain >= tol::kExtendGain * awe && awe <= tol::kExtendWithin * within;
    detail += "; awe(r 2, lambda " + num(l2) + ") at " + std::to_string(2 * c) + ": " + num(plain) + " -> " + num(awe) +
              " (within " + num(within) + ")";
    const double l4 = tune_lambda(p, 4 * c, [&](double l) { return attention_window_extension(p.model, 4.0, l); });
    const auto em = attention_window_extension(p.model, 4.0, l4);
    std::string curve;
    double prev = 0.0;
    bool calm = true;
    for (std::size_t k = 1; k <= 4; ++k) {
      const double ppl = windowed_ppl(em, p.eval(), k * c, kEvalSamples, kEvalSeed);
      calm = calm && std::isfinite(ppl) && ppl <= tol::kExplode * within && (k == 1 || ppl <= tol::kExtendWithin * prev);
      prev = ppl;
      curve += (curve.empty() ? "" : " ") + num(ppl);
    }
    ok = ok && calm;
    detail += "; awe(r 4, lambda " + num(l4) + ") C..4C: " + curve;
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 15. synthetic single-head preference

struct SyntheticCheck {
  bool increasing = true;
  double early = 0.0, late = 0.0;
  double worst_band = 0.0;  // |mean - oracle| / combined standard error
};

double at(const SyntheticCurve& c, std::size_t pos) {
  const auto it = std::find(c.positions.begin(), c.positions.end(), pos);
  if (it == c.positions.end()) throw ShapeError("synthetic curve lacks position " + std::to_string(pos));
  return c.mean[static_cast<std::size_t>(it - c.positions.begin())];
}

SyntheticCheck check_synthetic(const SyntheticCurve& run, const SyntheticCurve& oracle) {
  SyntheticCheck s;
  for (std::size_t t = 2; t < 16; ++t) s.increasing = s.increasing && at(run, t + 1) > at(run, t);
  s.early = at(run, 16) - at(run, 2);
  s.late = at(run, 1024) - at(run, 512);
  for (std::size_t k = 0; k < run.positions.size(); ++k) {
    const double se = std::hypot(run.std_error[k], oracle.std_error[k]);
    if (se > 0.0) s.worst_band = std::max(s.worst_band, std::abs(run.mean[k] - oracle.mean[k]) / se);
  }
  return s;
}

Outcome synthetic_preference() {
  bool ok = true;
  std::string detail;
  for (PeKind pe : {PeKind::NoPE, PeKind::RoPE}) {
    SyntheticOptions o;
    o.pe = pe;
    o.seed = 11;
    const auto t0 = std::chrono::steady_clock::now();
    const auto run = synthetic_preference_experiment(o);
    const double elapsed = seconds_since(t0);
    SyntheticOptions big = o;
    big.n_seqs *= 10;
    big.sequence_seed = 12;  // same vocabulary, fresh sequences
    const auto oracle = synthetic_preference_experiment(big);
    const auto s = check_synthetic(run, oracle);
    const bool good = s.increasing && s.early > 0.0 && std::abs(s.late) < tol::kLateIncrement * s.early &&
                      s.worst_band <= tol::kMcSigmas && elapsed < tol::kSyntheticSeconds;
    ok = ok && good;
    detail += (detail.empty() ? "" : "; ") + to_string(pe) + ": " + (s.increasing ? "increasing" : "not increasing") +
              ", late/early " + num(s.late / s.early) + ", band " + num(s.worst_band) + " se, " + fmt("%.1fs", elapsed);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 16. replacement layer and per-layer ratio

Outcome replacement_layers(Presets& presets) {
  const auto& p = presets.get(kNope);
  const std::size_t c = p.context(), layers = p.config().layers;
  const auto dec = p.outputs_ptr();
  const std::size_t len = std::min(2 * c, *positional_vector_replacement(p.model, dec, 1, 2.0, 1.0).max_length());
  std::vector<std::size_t> candidates;
  for (std::size_t l = 1; l <= layers; ++l) candidates.push_back(l);
  const auto sweep = replacement_layer_sweep(p.model, dec, candidates, 2.0, 1.0, p.eval(), len, kEvalSamples, kEvalSeed);
  const bool interior = sweep.best_layer != 1 && sweep.best_layer != layers;
  std::string detail = "sweep ppl";
  for (const auto& pt : sweep.points) detail += " " + num(pt.ppl);
  detail += " (best layer " + std::to_string(sweep.best_layer) + ")";

  // Ratio at each layer after replacing the best layer, for two alphas.
  const std::size_t from = sweep.best_layer;
  std::vector<std::size_t> after;
  for (std::size_t l = from; l <= layers; ++l) after.push_back(l);
  bool monotone = true;
  std::vector<std::vector<double>> curves;
  for (double alpha : {1.0, 1.3}) {
    const auto em = positional_vector_replacement(p.model, dec, from, 2.0, alpha);
    const auto ext = wrapped_outputs(p, em, len);
    PositionalDecomposition orig = p.outputs();
    for (auto& m : orig.p) m = m.slice_rows(0, len);
    const auto ratios = ratio_per_layer(orig, ext, after, c);
    detail += "; alpha " + num(alpha) + " ratios";
    curves.emplace_back();
    for (std::size_t k = 0; k < ratios.size(); ++k) {
      // An unmatched layer has no ratio to compare, so the claim fails there.
      const double r = ratios[k].matched ? ratios[k].ratio : std::numeric_limits<double>::quiet_NaN();
      detail += " " + (ratios[k].matched ? num(r) : std::string("unmatched"));
      monotone = monotone && ratios[k].matched && (k == 0 || r <= curves.back()[k - 1]);
      curves.back().push_back(r);
    }
  }
  // Larger alpha stays at or above the smaller one past the replaced layer.
  bool slower = true;
  for (std::size_t k = 1; k < curves[0].size(); ++k) slower = slower && curves[1][k] >= curves[0][k];
  return {interior && monotone && slower, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pvlab acceptance checks"};
  std::string runs = "runs";
  std::optional<std::string> cache;
  std::string scratch = (fs::temp_directory_path() / "pvlab_acceptance").string();
  std::vector<int> only;
  app.add_option("--runs", runs, "directory holding the preset configurations");
  app.add_option("--cache", cache, "artifact cache (default: PVLAB_CACHE or the presets' own)");
  app.add_option("--scratch", scratch, "scratch directory for container round trips");
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 16));
  CLI11_PARSE(app, argc, argv);

  Presets presets(runs, cache ? std::optional<fs::path>(*cache) : std::nullopt);
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, decomposition_identities},
      {2, attention_oracles},
      {3, gradient_check},
      {4, identity_wrappers},
      {5, interpolation_ratio_oracle},
      {6, interp_ramps},
      {7, [&] { return container_round_trip(scratch); }},
      {8, [&] { return pca_initial_tokens(presets); }},
      {9, [&] { return distinct_growth(presets); }},
      {10, [&] { return ablation(presets); }},
      {11, [&] { return sinks(presets); }},
      {12, [&] { return direct_extrapolation(presets); }},
      {13, [&] { return interpolation_ratio(presets); }},
      {14, [&] { return extension_methods(presets); }},
      {15, synthetic_preference},
      {16, [&] { return replacement_layers(presets); }},
  };
  int failed = 0;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %2d: %s  %s  [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
