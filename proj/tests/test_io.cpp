#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "pvlab/corpus.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/report.hpp"
#include "pvlab/tokenizer.hpp"

using namespace pvlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pvlab_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void put(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

// Minimal XML check: balanced tags, quoted attributes, no stray '<'.
bool well_formed(const std::string& xml) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  while ((i = xml.find('<', i)) != std::string::npos) {
    const auto end = xml.find('>', i);
    if (end == std::string::npos) return false;
    std::string tag = xml.substr(i + 1, end - i - 1);
    i = end + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;
    if (std::count(tag.begin(), tag.end(), '"') % 2 != 0) return false;
    if (tag.find('<') != std::string::npos) return false;
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
    } else if (tag.back() != '/') {
      stack.push_back(tag.substr(0, tag.find_first_of(" \n\t")));
    }
  }
  return stack.empty();
}

}  // namespace

TEST_CASE("byte tokenizer maps ASCII to byte values and round-trips") {
  ByteLevelTokenizer tok;
  CHECK(tok.encode("abc") == std::vector<Token>{97, 98, 99});
  const std::string text = synthetic_text(1 << 20, 4) + "caf\xc3\xa9 \xe2\x82\xac \xf0\x9f\x98\x80";
  const auto ids = tok.encode(text);
  for (Token t : ids) CHECK_UNARY(t >= 0 && t < 256);
  CHECK(tok.decode(ids) == text);
  CHECK_THROWS_AS(tok.decode(std::vector<Token>{300}), DataError);
}

TEST_CASE("utf8 offsets point at the first bad byte") {
  CHECK_FALSE(utf8_error_offset("plain ascii").has_value());
  CHECK_FALSE(utf8_error_offset("\xc3\xa9\xe2\x82\xac").has_value());
  CHECK(utf8_error_offset("ab\xff") == std::optional<std::size_t>(2));
  CHECK(utf8_error_offset("a\xc0\x80") == std::optional<std::size_t>(1));  // overlong NUL
  CHECK(utf8_error_offset("xy\xed\xa0\x80") == std::optional<std::size_t>(2));  // surrogate
  CHECK(utf8_error_offset("\xe2\x82") == std::optional<std::size_t>(0));  // truncated
  CHECK(utf8_error_offset("\xf4\x90\x80\x80") == std::optional<std::size_t>(0));  // > U+10FFFF
}

TEST_CASE("bpe learns merges, encodes greedily and round-trips through a file") {
  const std::string text = synthetic_text(40000, 2);
  const auto bpe = GreedyBpeTokenizer::train(text, 300);
  CHECK(bpe.vocab_size() == 300);
  for (int b = 0; b < 256; ++b) CHECK(bpe.pieces()[static_cast<std::size_t>(b)] == std::string(1, static_cast<char>(b)));
  const auto ids = bpe.encode(text);
  CHECK(ids.size() < text.size());
  CHECK(bpe.decode(ids) == text);

  // Hand example: the only repeated pair "ab" is learned first.
  const auto small = GreedyBpeTokenizer::train("ab ab ab", 257);
  CHECK(small.pieces()[256] == "ab");
  CHECK(small.encode("abab") == std::vector<Token>{256, 256});
  CHECK(small.encode("ba") == std::vector<Token>{98, 97});

  const auto dir = scratch_dir("bpe");
  bpe.save(dir / "v.txt");
  const auto loaded = GreedyBpeTokenizer::load(dir / "v.txt");
  CHECK(loaded.pieces() == bpe.pieces());
  CHECK(loaded.encode(text) == ids);

  put(dir / "bad.txt", "something else\n");
  CHECK_THROWS_AS(GreedyBpeTokenizer::load(dir / "bad.txt"), FormatError);
  CHECK_THROWS_AS(GreedyBpeTokenizer(std::vector<std::string>{"a"}), ConfigError);
}

TEST_CASE("ingest_corpus reads files in sorted path order") {
  const auto dir = scratch_dir("ingest");
  put(dir / "b.txt", "second");
  put(dir / "a.txt", "first");
  ByteLevelTokenizer tok;
  const auto one = ingest_corpus({dir / "b.txt", dir / "a.txt"}, tok);
  const auto two = ingest_corpus({dir / "a.txt", dir / "b.txt"}, tok);
  CHECK(one.tokens == two.tokens);
  CHECK(tok.decode(one.tokens) == "firstsecond");
  CHECK(one.doc_starts == std::vector<std::size_t>{0, 5});
  CHECK(one.sources == two.sources);
  CHECK(one.sources.front() == (dir / "a.txt").string());
}

TEST_CASE("invalid UTF-8 is a data error carrying the byte offset") {
  const auto dir = scratch_dir("utf8");
  put(dir / "ok.txt", "fine");
  put(dir / "z.txt", "good text\xfe more");
  ByteLevelTokenizer tok;
  try {
    ingest_corpus({dir / "ok.txt", dir / "z.txt"}, tok);
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(e.offset() == std::optional<std::size_t>(9));
    CHECK(std::string(e.what()).find("z.txt") != std::string::npos);
  }
  CHECK_THROWS_AS(ingest_corpus({dir / "missing.txt"}, tok), DataError);
  CHECK_THROWS_AS(ingest_corpus({}, tok), ConfigError);
}

TEST_CASE("generated prose is deterministic ASCII and splits at the tail") {
  const auto a = synthetic_text(5000, 9), b = synthetic_text(5000, 9), c = synthetic_text(5000, 10);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.size() == 5000);
  for (char ch : a) CHECK_UNARY(static_cast<unsigned char>(ch) < 128);

  ByteLevelTokenizer tok;
  const auto corpus = ingest_text(a, tok);
  const auto split = split_corpus(corpus, 0.95);
  CHECK(split.train.size() == 4750);
  CHECK(split.eval.size() == 250);
  CHECK(std::equal(split.eval.begin(), split.eval.end(), corpus.tokens.begin() + 4750));
  CHECK_THROWS_AS(split_corpus(corpus, 1.0), ConfigError);
}

TEST_CASE("csv follows RFC 4180 and round-trips") {
  CsvTable t({"name", "value", "count"});
  t.add_row({std::string("plain"), 0.1, 3LL});
  t.add_row({std::string("comma, \"quoted\"\nline"), -2.5e-300, -7LL});
  t.add_row({std::string(""), 1.0 / 3.0, 0LL});
  const std::string text = t.str();
  CHECK(text.substr(0, 18) == "name,value,count\r\n");
  CHECK(text.find("\"comma, \"\"quoted\"\"\nline\"") != std::string::npos);

  const auto rows = parse_csv(text);
  REQUIRE(rows.size() == 4);
  CHECK(rows[1] == std::vector<std::string>{"plain", "0.1", "3"});
  CHECK(rows[2][0] == "comma, \"quoted\"\nline");
  CHECK(std::stod(rows[2][1]) == -2.5e-300);
  CHECK(std::stod(rows[3][1]) == 1.0 / 3.0);
  CHECK(rows[3][0].empty());
  CHECK_THROWS_AS(t.add_row({1LL}), ShapeError);
  CHECK_THROWS_AS(parse_csv("\"open"), FormatError);
}

TEST_CASE("doubles print in the shortest form that reads back exactly") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = n(rng);
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_double(2.0) == "2");
}

TEST_CASE("svg figures are well-formed") {
  SvgPlot plot("a <title> & more", "x", "y");
  plot.add(Series{"line", {1, 2, 3}, {1, 4, 9}, false, {}});
  plot.add(Series{"dots", {1, 2, 3}, {2, 3, 5}, true, {0.0, 0.5, 1.0}});
  plot.hline(2.0, "ref").vline(2.0, "C").log_y();
  const std::string svg = plot.str();
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("&lt;title&gt; &amp; more") != std::string::npos);
  CHECK(well_formed(svg));

  Matrix m(3, 3, 1.0f);
  m(1, 2) = 5.0f;
  const std::string heat = svg_heatmap(m, "heat", true);
  CHECK(well_formed(heat));
  CHECK(svg.find("version=\"1.1\"") != std::string::npos);

  SvgPlot empty("empty", "x", "y");
  CHECK(well_formed(empty.str()));
}
