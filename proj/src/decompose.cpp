#include "pvlab/decompose.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <thread>

#include "container.hpp"
#include "pvlab/errors.hpp"

namespace pvlab {

HiddenStateBank::HiddenStateBank(StreamId stream, std::size_t layers, std::size_t positions,
                                 std::size_t dim, bool retain)
    : stream_(stream), positions_(positions), dim_(dim), retain_(retain),
      sums_(layers, std::vector<double>(positions * dim, 0.0)) {}

void HiddenStateBank::add(const std::vector<Matrix>& layers) {
  if (layers.size() != sums_.size()) throw ShapeError("bank: sample has wrong layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Matrix& h = layers[l];
    if (h.rows() != positions_ || h.cols() != dim_) {
      throw ShapeError("bank: all samples must share T x d (" + std::to_string(positions_) + " x " +
                       std::to_string(dim_) + "), got " + std::to_string(h.rows()) + " x " +
                       std::to_string(h.cols()));
    }
    auto& s = sums_[l];
    const auto src = h.data();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += src[i];
  }
  if (retain_) retained_.push_back(layers);
  ++samples_;
}

void HiddenStateBank::merge(const HiddenStateBank& other) {
  if (other.stream_ != stream_ || other.positions_ != positions_ || other.dim_ != dim_ ||
      other.sums_.size() != sums_.size() || other.retain_ != retain_) {
    throw ShapeError("bank merge: incompatible banks");
  }
  for (std::size_t l = 0; l < sums_.size(); ++l) {
    for (std::size_t i = 0; i < sums_[l].size(); ++i) sums_[l][i] += other.sums_[l][i];
  }
  retained_.insert(retained_.end(), other.retained_.begin(), other.retained_.end());
  samples_ += other.samples_;
}

HiddenStateBank HiddenStateBank::from_sums(StreamId stream, std::size_t positions, std::size_t dim,
                                           std::size_t samples, std::vector<std::vector<double>> sums) {
  HiddenStateBank b(stream, sums.size(), positions, dim, false);
  for (std::size_t l = 0; l < sums.size(); ++l) {
    if (sums[l].size() != positions * dim) throw ShapeError("bank: stored sum has the wrong size");
  }
  b.sums_ = std::move(sums);
  b.samples_ = samples;
  return b;
}

std::span<const double> HiddenStateBank::sum(std::size_t layer) const {
  if (layer < 1 || layer > sums_.size()) throw ShapeError("bank: layer out of range");
  return sums_[layer - 1];
}

const std::vector<std::vector<Matrix>>& HiddenStateBank::retained() const {
  if (!retain_) throw CapabilityError("bank for " + to_string(stream_) + " did not retain per-sample states");
  return retained_;
}

std::vector<std::size_t> sample_windows(std::size_t corpus_size, std::size_t length,
                                        std::size_t samples, std::uint64_t seed) {
  if (length == 0) throw ConfigError("sample_windows: length must be positive");
  const std::size_t available = corpus_size / length;
  if (available < samples) {
    throw DataError("corpus of " + std::to_string(corpus_size) + " tokens holds only " +
                    std::to_string(available) + " disjoint windows of " + std::to_string(length) +
                    " tokens; requested " + std::to_string(samples));
  }
  std::vector<std::size_t> slots(available);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates; std::shuffle's algorithm is implementation-defined.
  for (std::size_t i = 0; i < samples; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, available - 1);
    std::swap(slots[i], slots[pick(rng)]);
  }
  std::vector<std::size_t> out(samples);
  for (std::size_t i = 0; i < samples; ++i) out[i] = slots[i] * length;
  return out;
}

namespace {

BankSet empty_banks(const ModelConfig& cfg, std::size_t length, const BankOptions& options) {
  BankSet banks;
  if (options.layer_outputs) {
    StreamId id{StreamKind::LayerOutput, 0};
    banks.emplace(id, HiddenStateBank(id, cfg.layers, length, cfg.dim, options.retain));
  }
  if (options.qkv) {
    for (auto kind : {StreamKind::Query, StreamKind::Key, StreamKind::Value}) {
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        StreamId id{kind, h};
        banks.emplace(id, HiddenStateBank(id, cfg.layers, length, cfg.head_dim(), options.retain));
      }
    }
  }
  return banks;
}

void accumulate(BankSet& banks, ForwardTrace&& trace, std::size_t layers) {
  for (auto& [id, bank] : banks) {
    if (id.kind == StreamKind::LayerOutput) {
      bank.add(trace.layer_outputs);
      continue;
    }
    auto& src = id.kind == StreamKind::Query ? trace.queries
                : id.kind == StreamKind::Key ? trace.keys
                                             : trace.values;
    std::vector<Matrix> per_layer;
    per_layer.reserve(layers);
    for (std::size_t l = 0; l < layers; ++l) per_layer.push_back(std::move(src[l][id.head]));
    bank.add(per_layer);
  }
}

}  // namespace

BankSet collect_bank(const TransformerModel& model, std::span<const Token> corpus,
                     const BankOptions& options, const std::vector<InterventionSpec>& interventions,
                     const ForwardHooks& hooks) {
  const ModelConfig& cfg = model.config;
  const std::size_t length = options.length == 0 ? cfg.context : options.length;
  if (options.samples == 0) throw ConfigError("collect_bank: need at least one sample");
  if (!options.layer_outputs && !options.qkv) throw ConfigError("collect_bank: no stream requested");
  const auto starts = sample_windows(corpus.size(), length, options.samples, options.seed);

  CaptureFlags capture;
  capture.layer_outputs = options.layer_outputs;
  capture.qkv = options.qkv;
  capture.logits = false;

  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, starts.size());
  std::vector<BankSet> shards(workers);
  auto run_shard = [&](std::size_t w) {
    BankSet local = empty_banks(cfg, length, options);
    // Contiguous shards so the merged sample order matches the sampler's.
    const std::size_t begin = starts.size() * w / workers;
    const std::size_t end = starts.size() * (w + 1) / workers;
    for (std::size_t i = begin; i < end; ++i) {
      accumulate(local, forward(model, corpus.subspan(starts[i], length), interventions, capture, hooks),
                 cfg.layers);
    }
    shards[w] = std::move(local);
  };
  if (workers == 1) {
    run_shard(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          run_shard(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  BankSet out = std::move(shards[0]);
  for (std::size_t w = 1; w < workers; ++w) {
    for (auto& [id, bank] : out) bank.merge(shards[w].at(id));
  }
  return out;
}

PositionalDecomposition decompose(const HiddenStateBank& bank, std::size_t context) {
  if (bank.samples() == 0) throw ShapeError("decompose: empty bank");
  if (context == 0 || context > bank.positions()) {
    throw ShapeError("decompose: context " + std::to_string(context) + " outside bank length " +
                     std::to_string(bank.positions()));
  }
  const std::size_t t = bank.positions();
  const std::size_t d = bank.dim();
  const double inv_n = 1.0 / static_cast<double>(bank.samples());
  PositionalDecomposition out;
  out.stream = bank.stream();
  out.context = context;
  out.samples = bank.samples();
  for (std::size_t l = 1; l <= bank.layers(); ++l) {
    const auto sums = bank.sum(l);
    Matrix p(t, d);
    for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] = static_cast<float>(sums[i] * inv_n);
    std::vector<double> acc(d, 0.0);
    for (std::size_t r = 0; r < context; ++r) {
      for (std::size_t c = 0; c < d; ++c) acc[c] += p(r, c);
    }
    std::vector<float> u(d);
    for (std::size_t c = 0; c < d; ++c) u[c] = static_cast<float>(acc[c] / static_cast<double>(context));
    Matrix m(t, d);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        m(r, c) = p(r, c) - u[c];
        // Canonicalize so p == u + m holds exactly in float; moves p by at
        // most one ulp.
        p(r, c) = u[c] + m(r, c);
      }
    }
    out.p.push_back(std::move(p));
    out.u.push_back(std::move(u));
    out.m.push_back(std::move(m));
  }
  return out;
}

DecompositionSet decompose(const BankSet& banks, std::size_t context) {
  DecompositionSet set;
  for (const auto& [id, bank] : banks) set.streams.emplace(id, decompose(bank, context));
  return set;
}

std::vector<std::vector<Matrix>> semantic_vectors(const HiddenStateBank& bank,
                                                  const PositionalDecomposition& decomposition) {
  const auto& samples = bank.retained();
  if (decomposition.layers() != bank.layers() || decomposition.positions() != bank.positions() ||
      decomposition.dim() != bank.dim()) {
    throw ShapeError("semantic_vectors: decomposition does not match bank");
  }
  std::vector<std::vector<Matrix>> out;
  out.reserve(samples.size());
  for (const auto& sample : samples) {
    std::vector<Matrix> layers;
    layers.reserve(sample.size());
    for (std::size_t l = 0; l < sample.size(); ++l) {
      Matrix c = sample[l];
      const Matrix& p = decomposition.p[l];
      for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= p.data()[i];
      layers.push_back(std::move(c));
    }
    out.push_back(std::move(layers));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

const std::string kDecMagic = "PVDEC1\n";
const std::string kBankMagic = "PVBNK1\n";

std::size_t header_count(const detail::Container& c, const std::string& key) {
  const std::string& v = c.value(key);
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw FormatError("decomposition header '" + key + "' is not a count: '" + v + "'", 0);
  }
}

StreamId parse_stream(const std::string& text) {
  const auto dot = text.find('.');
  try {
    if (dot == std::string::npos) return {parse_stream_kind(text), 0};
    return {parse_stream_kind(text.substr(0, dot)), static_cast<std::size_t>(std::stoul(text.substr(dot + 1)))};
  } catch (const std::exception&) {
    throw FormatError("decomposition: bad stream name '" + text + "'", 0);
  }
}

}  // namespace

void save_bank(const BankSet& banks, const std::filesystem::path& path) {
  detail::Container c;
  c.header.emplace_back("format", "pvlab-bank");
  std::string names;
  for (const auto& [id, bank] : banks) {
    const std::string s = to_string(id);
    names += (names.empty() ? "" : " ") + s;
    c.header.emplace_back(s + ".samples", std::to_string(bank.samples()));
    c.header.emplace_back(s + ".layers", std::to_string(bank.layers()));
    for (std::size_t l = 1; l <= bank.layers(); ++l) {
      const auto sum = bank.sum(l);
      Matrix hi(bank.positions(), bank.dim()), lo(bank.positions(), bank.dim());
      for (std::size_t i = 0; i < sum.size(); ++i) {
        const float h = static_cast<float>(sum[i]);
        hi.data()[i] = h;
        lo.data()[i] = static_cast<float>(sum[i] - static_cast<double>(h));
      }
      const std::string tag = s + "." + std::to_string(l);
      c.tensors.emplace_back(tag + ".hi", std::move(hi));
      c.tensors.emplace_back(tag + ".lo", std::move(lo));
    }
  }
  c.header.emplace_back("streams", names);
  detail::write_container(path, kBankMagic, c);
}

BankSet load_bank(const std::filesystem::path& path) {
  const auto c = detail::read_container(path, kBankMagic);
  if (c.value("format") != "pvlab-bank") throw FormatError("not a bank container", 0);
  BankSet out;
  const std::string names = c.value("streams");
  std::size_t pos = 0;
  while (pos < names.size()) {
    std::size_t next = names.find(' ', pos);
    if (next == std::string::npos) next = names.size();
    const std::string s = names.substr(pos, next - pos);
    pos = next + 1;
    if (s.empty()) continue;
    const StreamId id = parse_stream(s);
    const std::size_t samples = header_count(c, s + ".samples");
    const std::size_t layers = header_count(c, s + ".layers");
    std::vector<std::vector<double>> sums;
    std::size_t rows = 0, cols = 0;
    for (std::size_t l = 1; l <= layers; ++l) {
      const std::string tag = s + "." + std::to_string(l);
      const Matrix& hi = c.tensor(tag + ".hi");
      const Matrix& lo = c.tensor(tag + ".lo");
      if (lo.rows() != hi.rows() || lo.cols() != hi.cols() || (l > 1 && (hi.rows() != rows || hi.cols() != cols))) {
        throw FormatError("bank: inconsistent tensor shapes for " + tag, 0);
      }
      rows = hi.rows();
      cols = hi.cols();
      std::vector<double> sum(rows * cols);
      for (std::size_t i = 0; i < sum.size(); ++i) {
        sum[i] = static_cast<double>(hi.data()[i]) + static_cast<double>(lo.data()[i]);
      }
      sums.push_back(std::move(sum));
    }
    out.emplace(id, HiddenStateBank::from_sums(id, rows, cols, samples, std::move(sums)));
  }
  return out;
}

void save_decomposition(const DecompositionSet& set, const std::filesystem::path& path) {
  detail::Container c;
  c.header.emplace_back("format", "pvlab-decomposition");
  std::string names;
  for (const auto& [id, dec] : set.streams) {
    const std::string s = to_string(id);
    names += (names.empty() ? "" : " ") + s;
    c.header.emplace_back(s + ".context", std::to_string(dec.context));
    c.header.emplace_back(s + ".samples", std::to_string(dec.samples));
    c.header.emplace_back(s + ".layers", std::to_string(dec.layers()));
    for (std::size_t l = 0; l < dec.layers(); ++l) {
      const std::string tag = s + "." + std::to_string(l + 1);
      c.tensors.emplace_back(tag + ".p", dec.p[l]);
      c.tensors.emplace_back(tag + ".u", Matrix(1, dec.u[l].size(), dec.u[l]));
      c.tensors.emplace_back(tag + ".m", dec.m[l]);
    }
  }
  c.header.emplace_back("streams", names);
  detail::write_container(path, kDecMagic, c);
}

DecompositionSet load_decomposition(const std::filesystem::path& path) {
  const auto c = detail::read_container(path, kDecMagic);
  if (c.value("format") != "pvlab-decomposition") throw FormatError("not a decomposition container", 0);
  DecompositionSet set;
  std::string names = c.value("streams");
  std::size_t pos = 0;
  while (pos < names.size()) {
    std::size_t next = names.find(' ', pos);
    if (next == std::string::npos) next = names.size();
    const std::string s = names.substr(pos, next - pos);
    pos = next + 1;
    if (s.empty()) continue;
    PositionalDecomposition dec;
    dec.stream = parse_stream(s);
    dec.context = header_count(c, s + ".context");
    dec.samples = header_count(c, s + ".samples");
    const std::size_t layers = header_count(c, s + ".layers");
    for (std::size_t l = 1; l <= layers; ++l) {
      const std::string tag = s + "." + std::to_string(l);
      const Matrix& p = c.tensor(tag + ".p");
      const Matrix& u = c.tensor(tag + ".u");
      const Matrix& m = c.tensor(tag + ".m");
      if (u.rows() != 1 || u.cols() != p.cols() || m.rows() != p.rows() || m.cols() != p.cols() ||
          (!dec.p.empty() && (p.rows() != dec.p.front().rows() || p.cols() != dec.p.front().cols()))) {
        throw FormatError("decomposition: inconsistent tensor shapes for " + tag, 0);
      }
      dec.p.push_back(p);
      dec.u.push_back(u.storage());
      dec.m.push_back(m);
    }
    if (dec.context > dec.positions()) throw FormatError("decomposition: context exceeds positions for " + s, 0);
    set.streams.emplace(dec.stream, std::move(dec));
  }
  return set;
}

}  // namespace pvlab
