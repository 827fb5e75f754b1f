#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pvlab/model.hpp"

namespace pvlab {

// Offset of the first byte that breaks UTF-8 well-formedness, if any.
std::optional<std::size_t> utf8_error_offset(std::string_view bytes);

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<Token> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const Token> ids) const = 0;
};

class ByteLevelTokenizer final : public Tokenizer {
 public:
  std::string kind() const override { return "byte"; }
  std::size_t vocab_size() const override { return 256; }
  std::vector<Token> encode(std::string_view text) const override;
  std::string decode(std::span<const Token> ids) const override;
};

// Byte-pair vocabulary applied by greedy longest match. Ids 0..255 are the
// single bytes; merged tokens follow in the order they were learned.
class GreedyBpeTokenizer final : public Tokenizer {
 public:
  explicit GreedyBpeTokenizer(std::vector<std::string> pieces);

  // Learns vocab_size - 256 merges from the text.
  static GreedyBpeTokenizer train(std::string_view text, std::size_t vocab_size);
  static GreedyBpeTokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::string kind() const override { return "bpe"; }
  std::size_t vocab_size() const override { return pieces_.size(); }
  std::vector<Token> encode(std::string_view text) const override;
  std::string decode(std::span<const Token> ids) const override;
  const std::vector<std::string>& pieces() const { return pieces_; }

 private:
  struct Node {
    std::int32_t id = -1;
    std::vector<std::pair<unsigned char, std::uint32_t>> next;
  };
  std::vector<std::string> pieces_;
  std::vector<Node> trie_;
};

}  // namespace pvlab
