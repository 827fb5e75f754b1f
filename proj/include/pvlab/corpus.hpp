#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pvlab/tokenizer.hpp"

namespace pvlab {

struct Corpus {
  std::vector<Token> tokens;
  std::vector<std::size_t> doc_starts;  // token index where each document begins
  std::vector<std::string> sources;  // one per document
};

// Reads the files in sorted path order. Invalid UTF-8 raises DataError
// carrying the byte offset inside the offending file.
Corpus ingest_corpus(std::vector<std::filesystem::path> paths, const Tokenizer& tokenizer);
Corpus ingest_text(std::string_view text, const Tokenizer& tokenizer, std::string source = "<text>");

// Deterministic English-like prose: a Zipfian lexicon of syllable words with
// bigram preferences, sentences and paragraphs. Each paragraph has a topic
// vocabulary and a few recurring names. ASCII only.
std::string synthetic_text(std::size_t bytes, std::uint64_t seed);

struct CorpusSplit {
  std::vector<Token> train;
  std::vector<Token> eval;
};

// The last (1 - train_fraction) of the stream is held out.
CorpusSplit split_corpus(const Corpus& corpus, double train_fraction);

}  // namespace pvlab
