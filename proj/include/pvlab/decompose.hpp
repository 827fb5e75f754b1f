#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "pvlab/model.hpp"
#include "pvlab/positional.hpp"

namespace pvlab {

// Per-layer, per-position accumulation of one captured stream over N
// samples of identical length T.
class HiddenStateBank {
 public:
  HiddenStateBank() = default;
  HiddenStateBank(StreamId stream, std::size_t layers, std::size_t positions, std::size_t dim,
                  bool retain);

  // layers[l] is the T x d state of one sample at layer l+1.
  void add(const std::vector<Matrix>& layers);
  // Appends another bank's samples after this one's.
  void merge(const HiddenStateBank& other);
  // Rebuilds a non-retaining bank from stored per-layer sums.
  static HiddenStateBank from_sums(StreamId stream, std::size_t positions, std::size_t dim,
                                   std::size_t samples, std::vector<std::vector<double>> sums);

  const StreamId& stream() const { return stream_; }
  std::size_t samples() const { return samples_; }
  std::size_t layers() const { return sums_.size(); }
  std::size_t positions() const { return positions_; }
  std::size_t dim() const { return dim_; }
  bool retains_samples() const { return retain_; }

  // Row-major T x d running sum of layer l (1-based).
  std::span<const double> sum(std::size_t layer) const;
  // [sample][layer] T x d; throws CapabilityError when retention is off.
  const std::vector<std::vector<Matrix>>& retained() const;

 private:
  StreamId stream_;
  std::size_t positions_ = 0;
  std::size_t dim_ = 0;
  std::size_t samples_ = 0;
  bool retain_ = false;
  std::vector<std::vector<double>> sums_;
  std::vector<std::vector<Matrix>> retained_;
};

using BankSet = std::map<StreamId, HiddenStateBank>;

struct BankOptions {
  std::size_t samples = 1024;
  std::size_t length = 0;  // 0 selects the model context
  std::uint64_t seed = 0;
  bool layer_outputs = true;
  bool qkv = false;
  bool retain = false;
  std::size_t workers = 1;
};

// Start offsets of N disjoint windows of `length` tokens, chosen by the
// seeded sampler. Throws DataError naming the achievable N.
std::vector<std::size_t> sample_windows(std::size_t corpus_size, std::size_t length,
                                        std::size_t samples, std::uint64_t seed);

BankSet collect_bank(const TransformerModel& model, std::span<const Token> corpus,
                     const BankOptions& options,
                     const std::vector<InterventionSpec>& interventions = {},
                     const ForwardHooks& hooks = {});

// u is averaged over positions 1..context. Throws ShapeError when
// context exceeds the bank length.
PositionalDecomposition decompose(const HiddenStateBank& bank, std::size_t context);
DecompositionSet decompose(const BankSet& banks, std::size_t context);

// c[s][l] = h[s][l] - p[l].
std::vector<std::vector<Matrix>> semantic_vectors(const HiddenStateBank& bank,
                                                  const PositionalDecomposition& decomposition);

// Bank sums only (retained samples are not stored). Each double sum is
// written as a float pair (high part, remainder).
void save_bank(const BankSet& banks, const std::filesystem::path& path);
BankSet load_bank(const std::filesystem::path& path);

void save_decomposition(const DecompositionSet& set, const std::filesystem::path& path);
DecompositionSet load_decomposition(const std::filesystem::path& path);

}  // namespace pvlab
