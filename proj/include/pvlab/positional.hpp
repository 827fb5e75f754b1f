#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "pvlab/numerics.hpp"

namespace pvlab {

// Which captured stream a bank or decomposition describes. Query/Key/Value
// streams are per attention head and taken before any rotary rotation.
enum class StreamKind { LayerOutput, Query, Key, Value };

struct StreamId {
  StreamKind kind = StreamKind::LayerOutput;
  std::size_t head = 0;

  auto operator<=>(const StreamId&) const = default;
};

std::string to_string(StreamKind kind);
std::string to_string(const StreamId& id);
StreamKind parse_stream_kind(const std::string& text);

// Mean-based decomposition of one stream, stored per layer:
//   p[l,t] = mean over samples of h[l,t]
//   u[l]   = mean over t in 1..C of p[l,t]
//   m[l,t] = p[l,t] - u[l]
// Layer indices in accessors are 1-based.
struct PositionalDecomposition {
  StreamId stream;
  std::size_t context = 0;
  std::size_t samples = 0;
  std::vector<Matrix> p;
  std::vector<std::vector<float>> u;
  std::vector<Matrix> m;

  std::size_t layers() const { return p.size(); }
  std::size_t positions() const { return p.empty() ? 0 : p.front().rows(); }
  std::size_t dim() const { return p.empty() ? 0 : p.front().cols(); }

  const Matrix& positional(std::size_t layer) const;
  const Matrix& basis(std::size_t layer) const;
  const std::vector<float>& mean_vector(std::size_t layer) const;
};

struct DecompositionSet {
  std::map<StreamId, PositionalDecomposition> streams;

  const PositionalDecomposition* find(const StreamId& id) const;
  const PositionalDecomposition& at(const StreamId& id) const;
};

}  // namespace pvlab
