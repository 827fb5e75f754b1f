#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "pvlab/decompose.hpp"
#include "pvlab/errors.hpp"

using namespace pvlab;

namespace {

std::vector<Matrix> random_sample(std::size_t layers, std::size_t t, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> nd(0.5f, 2.0f);
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix m(t, d);
    for (auto& v : m.storage()) v = nd(rng);
    out.push_back(m);
  }
  return out;
}

ModelConfig tiny() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 8;
  c.ffn_dim = 16;
  c.vocab = 30;
  c.context = 8;
  return c;
}

std::vector<Token> corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Token> out(n);
  for (auto& t : out) t = static_cast<Token>(rng() % 30);
  return out;
}

}  // namespace

TEST_CASE("constant bank decomposes to zero basis and semantics") {
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, 2, 5, 3, true);
  std::vector<Matrix> sample(2, Matrix(5, 3, 0.75f));
  for (int i = 0; i < 3; ++i) bank.add(sample);
  auto dec = decompose(bank, 5);
  for (std::size_t l = 1; l <= 2; ++l) {
    CHECK(dec.positional(l) == Matrix(5, 3, 0.75f));
    CHECK(dec.basis(l) == Matrix(5, 3, 0.0f));
  }
  for (auto& s : semantic_vectors(bank, dec))
    for (auto& c : s) CHECK(c == Matrix(5, 3, 0.0f));
}

TEST_CASE("antisymmetric samples give zero positional vector") {
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, 1, 1, 2, true);
  bank.add({Matrix::from_rows({{1.5f, -2.0f}})});
  bank.add({Matrix::from_rows({{-1.5f, 2.0f}})});
  auto dec = decompose(bank, 1);
  CHECK(dec.p[0] == Matrix(1, 2, 0.0f));
  auto c = semantic_vectors(bank, dec);
  CHECK(c[0][0] == Matrix::from_rows({{1.5f, -2.0f}}));
  CHECK(c[1][0] == Matrix::from_rows({{-1.5f, 2.0f}}));
}

TEST_CASE("decomposition matches a naive per-slot mean") {
  std::mt19937_64 rng(4);
  const std::size_t layers = 3, t = 5, d = 2, n = 3, ctx = 4;
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, layers, t, d, true);
  std::vector<std::vector<Matrix>> samples;
  for (std::size_t s = 0; s < n; ++s) {
    samples.push_back(random_sample(layers, t, d, rng));
    bank.add(samples.back());
  }
  auto dec = decompose(bank, ctx);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t c = 0; c < d; ++c) {
      double u = 0;
      for (std::size_t i = 0; i < ctx; ++i) {
        double p = 0;
        for (std::size_t s = 0; s < n; ++s) p += samples[s][l](i, c);
        u += p / n;
      }
      u /= ctx;
      CHECK(std::abs(dec.u[l][c] - u) <= 1e-6);
      for (std::size_t i = 0; i < t; ++i) {
        double p = 0;
        for (std::size_t s = 0; s < n; ++s) p += samples[s][l](i, c);
        p /= n;
        CHECK(std::abs(dec.p[l](i, c) - p) <= 1e-6);
        CHECK(std::abs(dec.m[l](i, c) - (p - u)) <= 1e-6);
        CHECK(dec.p[l](i, c) == dec.u[l][c] + dec.m[l](i, c));
      }
      double msum = 0;
      for (std::size_t i = 0; i < ctx; ++i) msum += dec.m[l](i, c);
      CHECK(std::abs(msum) <= 1e-5);
    }
  }
  CHECK_THROWS_AS(decompose(bank, 6), ShapeError);
}

TEST_CASE("semantic vectors reconstruct and centre") {
  std::mt19937_64 rng(8);
  HiddenStateBank bank({StreamKind::Value, 1}, 2, 6, 4, true);
  for (int s = 0; s < 7; ++s) bank.add(random_sample(2, 6, 4, rng));
  auto dec = decompose(bank, 6);
  auto c = semantic_vectors(bank, dec);
  const auto& h = bank.retained();
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < 24; ++i) {
      double mean = 0;
      for (std::size_t s = 0; s < 7; ++s) {
        CHECK(std::abs(h[s][l].data()[i] - (dec.p[l].data()[i] + c[s][l].data()[i])) <= 1e-6);
        mean += c[s][l].data()[i];
      }
      CHECK(std::abs(mean / 7) <= 1e-5);
    }
  HiddenStateBank one({StreamKind::LayerOutput, 0}, 1, 3, 2, true);
  one.add(random_sample(1, 3, 2, rng));
  auto c1 = semantic_vectors(one, decompose(one, 3));
  // p is canonicalized to u + m, which can move it one rounding step of
  // max(|u|, |m|) off the sample.
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(c1[0][0].data()[i]) <= 1e-6f);
  HiddenStateBank streaming({StreamKind::LayerOutput, 0}, 1, 3, 2, false);
  streaming.add(random_sample(1, 3, 2, rng));
  CHECK_THROWS_AS(semantic_vectors(streaming, decompose(streaming, 3)), CapabilityError);
}

TEST_CASE("bank rejects mismatched samples") {
  HiddenStateBank bank({StreamKind::LayerOutput, 0}, 1, 3, 2, false);
  CHECK_THROWS_AS(bank.add({Matrix(4, 2)}), ShapeError);
  CHECK_THROWS_AS(bank.add({Matrix(3, 2), Matrix(3, 2)}), ShapeError);
}

TEST_CASE("sample order does not matter") {
  std::mt19937_64 rng(2);
  std::vector<std::vector<Matrix>> samples;
  for (int s = 0; s < 40; ++s) samples.push_back(random_sample(2, 4, 3, rng));
  HiddenStateBank a({StreamKind::LayerOutput, 0}, 2, 4, 3, false), b = a;
  for (auto& s : samples) a.add(s);
  std::shuffle(samples.begin(), samples.end(), rng);
  for (auto& s : samples) b.add(s);
  auto da = decompose(a, 4), db = decompose(b, 4);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(da.p[l].data()[i] - db.p[l].data()[i]) <= 1e-6);
}

TEST_CASE("collect_bank sums individual traces") {
  auto m = build_model(tiny(), 3);
  auto toks = corpus(400, 1);
  BankOptions opt;
  opt.samples = 1;
  opt.qkv = true;
  opt.retain = true;
  opt.seed = 11;
  auto banks = collect_bank(m, toks, opt);
  auto starts = sample_windows(toks.size(), 8, 1, 11);
  CaptureFlags cap;
  cap.qkv = true;
  auto tr = forward(m, std::span<const Token>(toks).subspan(starts[0], 8), {}, cap);
  const auto& out = banks.at({StreamKind::LayerOutput, 0});
  for (std::size_t l = 1; l <= 2; ++l) {
    auto s = out.sum(l);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == tr.layer_outputs[l - 1].data()[i]);
    auto k = banks.at({StreamKind::Key, 1}).sum(l);
    for (std::size_t i = 0; i < k.size(); ++i) CHECK(k[i] == tr.keys[l - 1][1].data()[i]);
  }
  CHECK(banks.size() == 1 + 3 * 2);

  opt.samples = 4;
  opt.qkv = false;
  auto four = collect_bank(m, toks, opt);
  auto st = sample_windows(toks.size(), 8, 4, 11);
  std::vector<double> want(64, 0.0);
  for (auto s0 : st) {
    auto t2 = forward(m, std::span<const Token>(toks).subspan(s0, 8));
    for (std::size_t i = 0; i < 64; ++i) want[i] += t2.layer_outputs[1].data()[i];
  }
  auto got = four.at({StreamKind::LayerOutput, 0}).sum(2);
  for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-6);

  opt.seed = 12;
  auto other = collect_bank(m, toks, opt);
  auto og = other.at({StreamKind::LayerOutput, 0}).sum(2);
  bool differs = false;
  for (std::size_t i = 0; i < 64; ++i) differs |= og[i] != got[i];
  CHECK(differs);

  opt.workers = 3;
  opt.seed = 11;
  auto threaded = collect_bank(m, toks, opt);
  auto tg = threaded.at({StreamKind::LayerOutput, 0}).sum(2);
  for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(tg[i] - got[i]) <= 1e-9);

  opt.samples = 51;
  CHECK_THROWS_WITH_AS(collect_bank(m, toks, opt), doctest::Contains("only 50"), DataError);
}

TEST_CASE("sample windows are disjoint and seeded") {
  auto a = sample_windows(1000, 10, 100, 5);
  std::sort(a.begin(), a.end());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == i * 10);
  CHECK(sample_windows(1000, 10, 5, 1) != sample_windows(1000, 10, 5, 2));
  CHECK(sample_windows(1000, 10, 5, 1) == sample_windows(1000, 10, 5, 1));
}

TEST_CASE("halving the bank spreads the mean estimates") {
  // Variance of p across disjoint half-banks shrinks as N doubles.
  auto m = build_model(tiny(), 5);
  auto toks = corpus(8 * 512, 3);
  auto spread = [&](std::size_t n) {
    BankOptions opt;
    opt.samples = 2 * n;
    opt.retain = true;
    opt.seed = 3;
    auto bank = collect_bank(m, toks, opt).at({StreamKind::LayerOutput, 0});
    const auto& samples = bank.retained();
    std::vector<double> diffs;
    for (std::size_t i = 0; i < 64; ++i) {
      double a = 0, b = 0;
      for (std::size_t s = 0; s < n; ++s) {
        a += samples[s][1].data()[i];
        b += samples[n + s][1].data()[i];
      }
      diffs.push_back(std::pow((a - b) / static_cast<double>(n), 2));
    }
    return diffs;
  };
  auto small = spread(32);
  auto large = spread(128);
  std::vector<double> ratio;
  for (std::size_t i = 0; i < small.size(); ++i) ratio.push_back(large[i] / small[i]);
  std::nth_element(ratio.begin(), ratio.begin() + 32, ratio.end());
  CHECK(ratio[32] < 1.0);
}

TEST_CASE("decomposition container round trip") {
  std::mt19937_64 rng(6);
  BankSet banks;
  for (StreamId id : {StreamId{StreamKind::LayerOutput, 0}, StreamId{StreamKind::Query, 1}}) {
    HiddenStateBank b(id, 2, 6, id.kind == StreamKind::LayerOutput ? 4 : 2, false);
    for (int s = 0; s < 3; ++s) b.add(random_sample(2, 6, id.kind == StreamKind::LayerOutput ? 4 : 2, rng));
    banks.emplace(id, b);
  }
  auto set = decompose(banks, 4);
  auto path = std::filesystem::temp_directory_path() / "pvlab_test_dec.bin";
  save_decomposition(set, path);
  auto back = load_decomposition(path);
  REQUIRE(back.streams.size() == 2);
  for (const auto& [id, dec] : set.streams) {
    const auto& other = back.at(id);
    CHECK(other.context == dec.context);
    CHECK(other.samples == dec.samples);
    CHECK(other.p == dec.p);
    CHECK(other.u == dec.u);
    CHECK(other.m == dec.m);
  }
  CHECK_THROWS_AS(back.at({StreamKind::Key, 0}), CapabilityError);
  std::filesystem::remove(path);
}
