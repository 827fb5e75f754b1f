#include <cstdio>
#include <string>

#include "container.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/model.hpp"

namespace pvlab {

namespace {

const std::string kMagic = "PVLAB1\n";

std::string exact(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::size_t parse_count(const detail::Container& c, const std::string& key) {
  const std::string& v = c.value(key);
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw FormatError("checkpoint header '" + key + "' is not a count: '" + v + "'", 0);
  }
}

double parse_real(const detail::Container& c, const std::string& key) {
  const std::string& v = c.value(key);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw FormatError("checkpoint header '" + key + "' is not a number: '" + v + "'", 0);
  }
}

}  // namespace

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path) {
  const ModelConfig& cfg = model.config;
  detail::Container c;
  c.header = {
      {"format", "pvlab-checkpoint"},
      {"layers", std::to_string(cfg.layers)},
      {"heads", std::to_string(cfg.heads)},
      {"dim", std::to_string(cfg.dim)},
      {"ffn_dim", std::to_string(cfg.ffn_dim)},
      {"vocab", std::to_string(cfg.vocab)},
      {"context", std::to_string(cfg.context)},
      {"pe", to_string(cfg.pe)},
      {"rope_base", exact(cfg.rope_base, 17)},
      {"attn", to_string(cfg.attn)},
      {"window", std::to_string(cfg.window)},
      {"tie_embeddings", cfg.tie_embeddings ? "1" : "0"},
      {"norm_eps", exact(cfg.norm_eps, 9)},
  };
  for (const auto& [name, m] : model.parameters()) c.tensors.emplace_back(name, *m);
  detail::write_container(path, kMagic, c);
}

TransformerModel load_checkpoint(const std::filesystem::path& path) {
  const detail::Container c = detail::read_container(path, kMagic);
  ModelConfig cfg;
  cfg.layers = parse_count(c, "layers");
  cfg.heads = parse_count(c, "heads");
  cfg.dim = parse_count(c, "dim");
  cfg.ffn_dim = parse_count(c, "ffn_dim");
  cfg.vocab = parse_count(c, "vocab");
  cfg.context = parse_count(c, "context");
  cfg.window = parse_count(c, "window");
  cfg.rope_base = parse_real(c, "rope_base");
  cfg.norm_eps = static_cast<float>(parse_real(c, "norm_eps"));
  cfg.tie_embeddings = c.value("tie_embeddings") == "1";
  try {
    cfg.pe = parse_pe_kind(c.value("pe"));
    cfg.attn = parse_attn_kind(c.value("attn"));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header invalid: ") + e.what(), 0);
  }

  // Shape template from a zero-initialized model with the same config.
  TransformerModel model;
  model.config = cfg;
  model.embedding = Matrix(cfg.vocab, cfg.dim);
  model.layers.resize(cfg.layers);
  for (auto& w : model.layers) {
    w.attn_norm = Matrix(1, cfg.dim);
    w.ffn_norm = Matrix(1, cfg.dim);
    w.wq = w.wk = w.wv = w.wo = Matrix(cfg.dim, cfg.dim);
    w.w_gate = w.w_up = Matrix(cfg.dim, cfg.ffn_dim);
    w.w_down = Matrix(cfg.ffn_dim, cfg.dim);
  }
  model.final_norm = Matrix(1, cfg.dim);
  model.unembedding = Matrix(cfg.dim, cfg.vocab);

  for (auto& [name, dst] : model.parameters()) {
    const Matrix& src = c.tensor(name);
    if (src.rows() != dst->rows() || src.cols() != dst->cols()) {
      throw FormatError("tensor '" + name + "' is " + std::to_string(src.rows()) + "x" +
                            std::to_string(src.cols()) + ", header implies " + std::to_string(dst->rows()) +
                            "x" + std::to_string(dst->cols()),
                        0);
    }
    *dst = src;
  }
  if (cfg.tie_embeddings) {
    for (std::size_t r = 0; r < cfg.vocab; ++r) {
      for (std::size_t col = 0; col < cfg.dim; ++col) model.unembedding(col, r) = model.embedding(r, col);
    }
  }
  return model;
}

}  // namespace pvlab
