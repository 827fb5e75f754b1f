#include "pvlab/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "pvlab/errors.hpp"

namespace pvlab {

std::optional<std::size_t> utf8_error_offset(std::string_view s) {
  std::size_t i = 0;
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  while (i < s.size()) {
    const unsigned char c = byte(i);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return i;
    }
    if (i + len > s.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      if ((byte(i + k) & 0xC0) != 0x80) return i;
      cp = (cp << 6) | (byte(i + k) & 0x3F);
    }
    // Overlong forms, surrogates and values past U+10FFFF.
    static constexpr std::uint32_t min_cp[5] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < min_cp[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    i += len;
  }
  return std::nullopt;
}

std::vector<Token> ByteLevelTokenizer::encode(std::string_view text) const {
  std::vector<Token> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<Token>(static_cast<unsigned char>(text[i]));
  return out;
}

std::string ByteLevelTokenizer::decode(std::span<const Token> ids) const {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) throw DataError("byte tokenizer: id " + std::to_string(ids[i]) + " out of range at index " + std::to_string(i));
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

GreedyBpeTokenizer::GreedyBpeTokenizer(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
  if (pieces_.size() < 256) throw ConfigError("bpe vocabulary must start with the 256 single bytes");
  for (std::size_t b = 0; b < 256; ++b) {
    if (pieces_[b].size() != 1 || static_cast<unsigned char>(pieces_[b][0]) != b) {
      throw ConfigError("bpe vocabulary entry " + std::to_string(b) + " is not the matching single byte");
    }
  }
  trie_.emplace_back();
  for (std::size_t id = 0; id < pieces_.size(); ++id) {
    if (pieces_[id].empty()) throw ConfigError("bpe vocabulary has an empty piece");
    std::uint32_t node = 0;
    for (char ch : pieces_[id]) {
      const auto c = static_cast<unsigned char>(ch);
      auto& next = trie_[node].next;
      auto it = std::find_if(next.begin(), next.end(), [c](const auto& e) { return e.first == c; });
      if (it == next.end()) {
        trie_.emplace_back();
        trie_[node].next.emplace_back(c, static_cast<std::uint32_t>(trie_.size() - 1));
        node = static_cast<std::uint32_t>(trie_.size() - 1);
      } else {
        node = it->second;
      }
    }
    if (trie_[node].id >= 0) throw ConfigError("bpe vocabulary repeats a piece");
    trie_[node].id = static_cast<std::int32_t>(id);
  }
}

std::vector<Token> GreedyBpeTokenizer::encode(std::string_view text) const {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::uint32_t node = 0;
    std::int32_t best = -1;
    std::size_t best_len = 0;
    for (std::size_t j = i; j < text.size(); ++j) {
      const auto c = static_cast<unsigned char>(text[j]);
      const auto& next = trie_[node].next;
      auto it = std::find_if(next.begin(), next.end(), [c](const auto& e) { return e.first == c; });
      if (it == next.end()) break;
      node = it->second;
      if (trie_[node].id >= 0) {
        best = trie_[node].id;
        best_len = j - i + 1;
      }
    }
    out.push_back(static_cast<Token>(best));
    i += best_len;
  }
  return out;
}

std::string GreedyBpeTokenizer::decode(std::span<const Token> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= pieces_.size()) {
      throw DataError("bpe tokenizer: id " + std::to_string(ids[i]) + " out of range at index " + std::to_string(i));
    }
    out += pieces_[static_cast<std::size_t>(ids[i])];
  }
  return out;
}

namespace {

// Words are a run of non-space bytes with any leading spaces attached, so
// merges never cross word boundaries.
std::map<std::string, std::size_t> word_counts(std::string_view text) {
  std::map<std::string, std::size_t> counts;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    while (j < text.size() && text[j] == ' ') ++j;
    while (j < text.size() && text[j] != ' ' && text[j] != '\n') ++j;
    if (j == i) ++j;  // lone newline
    ++counts[std::string(text.substr(i, j - i))];
    i = j;
  }
  return counts;
}

}  // namespace

GreedyBpeTokenizer GreedyBpeTokenizer::train(std::string_view text, std::size_t vocab_size) {
  if (vocab_size < 256) throw ConfigError("bpe vocab size must be at least 256");
  std::vector<std::string> pieces;
  for (int b = 0; b < 256; ++b) pieces.emplace_back(1, static_cast<char>(b));

  struct Word {
    std::vector<std::uint32_t> ids;
    std::size_t count;
  };
  std::vector<Word> words;
  for (const auto& [w, n] : word_counts(text)) {
    Word word{{}, n};
    for (char c : w) word.ids.push_back(static_cast<unsigned char>(c));
    words.push_back(std::move(word));
  }
  while (pieces.size() < vocab_size) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> pairs;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) pairs[{w.ids[i], w.ids[i + 1]}] += w.count;
    }
    if (pairs.empty()) break;
    // Most frequent pair; ties go to the smallest pair of ids (map order).
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    if (best->second < 2) break;
    const auto [a, b] = best->first;
    const auto id = static_cast<std::uint32_t>(pieces.size());
    pieces.push_back(pieces[a] + pieces[b]);
    for (auto& w : words) {
      std::vector<std::uint32_t> merged;
      merged.reserve(w.ids.size());
      for (std::size_t i = 0; i < w.ids.size(); ++i) {
        if (i + 1 < w.ids.size() && w.ids[i] == a && w.ids[i + 1] == b) {
          merged.push_back(id);
          ++i;
        } else {
          merged.push_back(w.ids[i]);
        }
      }
      w.ids = std::move(merged);
    }
  }
  return GreedyBpeTokenizer(std::move(pieces));
}

void GreedyBpeTokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "pvlab-bpe 1 " << pieces_.size() << '\n';
  static constexpr char hex[] = "0123456789abcdef";
  for (const auto& p : pieces_) {
    for (char ch : p) {
      const auto c = static_cast<unsigned char>(ch);
      out << hex[c >> 4] << hex[c & 15];
    }
    out << '\n';
  }
}

GreedyBpeTokenizer GreedyBpeTokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::string magic, version;
  std::size_t n = 0;
  in >> magic >> version >> n;
  if (magic != "pvlab-bpe" || version != "1") throw FormatError("bad bpe vocabulary header in '" + path.string() + "'", 0);
  std::vector<std::string> pieces;
  std::string line;
  std::getline(in, line);
  while (pieces.size() < n && std::getline(in, line)) {
    if (line.size() % 2 != 0 || line.empty()) {
      throw FormatError("bad bpe piece on line " + std::to_string(pieces.size() + 2), 0);
    }
    std::string piece;
    for (std::size_t i = 0; i < line.size(); i += 2) {
      piece.push_back(static_cast<char>(std::stoi(line.substr(i, 2), nullptr, 16)));
    }
    pieces.push_back(std::move(piece));
  }
  if (pieces.size() != n) throw FormatError("bpe vocabulary truncated", 0);
  return GreedyBpeTokenizer(std::move(pieces));
}

}  // namespace pvlab
