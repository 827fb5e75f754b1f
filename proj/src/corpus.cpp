#include "pvlab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "pvlab/errors.hpp"

namespace pvlab {

Corpus ingest_text(std::string_view text, const Tokenizer& tokenizer, std::string source) {
  if (const auto bad = utf8_error_offset(text)) {
    throw DataError("invalid UTF-8 in " + source, *bad);
  }
  Corpus c;
  c.doc_starts.push_back(0);
  c.sources.push_back(std::move(source));
  c.tokens = tokenizer.encode(text);
  return c;
}

Corpus ingest_corpus(std::vector<std::filesystem::path> paths, const Tokenizer& tokenizer) {
  if (paths.empty()) throw ConfigError("ingest_corpus: no input files");
  std::sort(paths.begin(), paths.end());
  Corpus out;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read corpus file '" + path.string() + "'");
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Corpus doc = ingest_text(text, tokenizer, path.string());
    out.doc_starts.push_back(out.tokens.size());
    out.sources.push_back(path.string());
    out.tokens.insert(out.tokens.end(), doc.tokens.begin(), doc.tokens.end());
  }
  return out;
}

std::string synthetic_text(std::size_t bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  static const char* onsets[] = {"b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w",
                                 "st", "tr", "pl", "sh", "th", "ch", "gr", "br", ""};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai", "y"};
  static const char* codas[] = {"", "", "", "n", "r", "s", "t", "l", "nd", "ng", "st", "m"};
  const auto pick = [&](auto& arr) {
    return arr[std::uniform_int_distribution<std::size_t>(0, std::size(arr) - 1)(rng)];
  };

  constexpr std::size_t kWords = 1200;
  std::vector<std::string> lexicon;
  while (lexicon.size() < kWords) {
    const std::size_t syl = 1 + std::uniform_int_distribution<std::size_t>(0, 2)(rng) / 2 +
                            (lexicon.size() > 200 ? 1 : 0);
    std::string w;
    for (std::size_t s = 0; s < syl; ++s) w += std::string(pick(onsets)) + pick(vowels) + pick(codas);
    if (std::find(lexicon.begin(), lexicon.end(), w) == lexicon.end()) lexicon.push_back(w);
  }
  std::vector<double> zipf(kWords);
  for (std::size_t i = 0; i < kWords; ++i) zipf[i] = 1.0 / std::pow(static_cast<double>(i + 1), 1.05);
  std::discrete_distribution<std::size_t> unigram(zipf.begin(), zipf.end());
  // Each word prefers a handful of successors.
  std::vector<std::vector<std::size_t>> follow(kWords);
  for (auto& f : follow)
    for (int k = 0; k < 6; ++k) f.push_back(unigram(rng));

  // Paragraphs stay on one topic and keep returning to a few names coined
  // for that paragraph, so earlier context matters beyond the last word.
  constexpr std::size_t kTopics = 64, kTopicWords = 24, kNames = 3;
  std::vector<std::vector<std::size_t>> topics(kTopics);
  for (auto& t : topics)
    for (std::size_t k = 0; k < kTopicWords; ++k) t.push_back(unigram(rng));

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::string out;
  out.reserve(bytes + 128);
  std::size_t sentences_left = 0;
  const std::vector<std::size_t>* topic = nullptr;
  std::vector<std::string> names;
  while (out.size() < bytes) {
    if (sentences_left == 0) {
      if (!out.empty()) out += "\n\n";
      sentences_left = 3 + std::uniform_int_distribution<std::size_t>(0, 5)(rng);
      topic = &topics[std::uniform_int_distribution<std::size_t>(0, kTopics - 1)(rng)];
      names.clear();
      for (std::size_t k = 0; k < kNames; ++k) {
        std::string n;
        const std::size_t syl = 2 + std::uniform_int_distribution<std::size_t>(0, 1)(rng);
        for (std::size_t s = 0; s < syl; ++s) n += std::string(pick(onsets)) + pick(vowels) + pick(codas);
        if (n.empty()) n = "o";
        n[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(n[0])));
        names.push_back(n);
      }
    }
    const std::size_t len = 4 + std::uniform_int_distribution<std::size_t>(0, 10)(rng);
    std::size_t w = unigram(rng);
    for (std::size_t i = 0; i < len; ++i) {
      const double roll = unit(rng);
      std::string word;
      if (roll < 0.15) {
        word = names[std::uniform_int_distribution<std::size_t>(0, kNames - 1)(rng)];
      } else {
        if (roll < 0.45) w = (*topic)[std::uniform_int_distribution<std::size_t>(0, kTopicWords - 1)(rng)];
        word = lexicon[w];
        if (i == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
        w = unit(rng) < 0.6 ? follow[w][std::uniform_int_distribution<std::size_t>(0, 5)(rng)] : unigram(rng);
      }
      if (i > 0) out += (unit(rng) < 0.08 && i + 1 < len) ? ", " : " ";
      out += word;
    }
    out += unit(rng) < 0.1 ? "?" : ".";
    if (--sentences_left > 0) out += ' ';
  }
  out.resize(bytes);
  return out;
}

CorpusSplit split_corpus(const Corpus& corpus, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must be in (0, 1)");
  const auto cut = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(corpus.tokens.size())));
  CorpusSplit s;
  s.train.assign(corpus.tokens.begin(), corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
  s.eval.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut), corpus.tokens.end());
  return s;
}

}  // namespace pvlab
