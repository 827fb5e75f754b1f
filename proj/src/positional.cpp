#include "pvlab/positional.hpp"

#include "pvlab/errors.hpp"

namespace pvlab {

std::string to_string(StreamKind kind) {
  switch (kind) {
    case StreamKind::LayerOutput: return "output";
    case StreamKind::Query: return "query";
    case StreamKind::Key: return "key";
    case StreamKind::Value: return "value";
  }
  return "?";
}

std::string to_string(const StreamId& id) {
  if (id.kind == StreamKind::LayerOutput) return "output";
  return to_string(id.kind) + "." + std::to_string(id.head);
}

StreamKind parse_stream_kind(const std::string& text) {
  if (text == "output") return StreamKind::LayerOutput;
  if (text == "query") return StreamKind::Query;
  if (text == "key") return StreamKind::Key;
  if (text == "value") return StreamKind::Value;
  throw ConfigError("unknown stream kind '" + text + "'");
}

namespace {
void check_layer(std::size_t layer, std::size_t layers) {
  if (layer < 1 || layer > layers) {
    throw ShapeError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(layers) + "]");
  }
}
}  // namespace

const Matrix& PositionalDecomposition::positional(std::size_t layer) const {
  check_layer(layer, p.size());
  return p[layer - 1];
}

const Matrix& PositionalDecomposition::basis(std::size_t layer) const {
  check_layer(layer, m.size());
  return m[layer - 1];
}

const std::vector<float>& PositionalDecomposition::mean_vector(std::size_t layer) const {
  check_layer(layer, u.size());
  return u[layer - 1];
}

const PositionalDecomposition* DecompositionSet::find(const StreamId& id) const {
  auto it = streams.find(id);
  return it == streams.end() ? nullptr : &it->second;
}

const PositionalDecomposition& DecompositionSet::at(const StreamId& id) const {
  const auto* d = find(id);
  if (d == nullptr) throw CapabilityError("no decomposition for stream " + to_string(id));
  return *d;
}

}  // namespace pvlab
