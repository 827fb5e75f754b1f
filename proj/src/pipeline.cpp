#include "pvlab/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "json.hpp"
#include "pvlab/analysis.hpp"
#include "pvlab/decompose.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/report.hpp"

namespace pvlab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string to_hex(const unsigned char* md, unsigned int n) {
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < n; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// Writes through a temporary name so an interrupted run never leaves a
// truncated artifact under its final name.
template <typename F>
void write_atomic(const fs::path& path, F&& write) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  write(tmp);
  fs::rename(tmp, path);
}

PositionalDecomposition first_rows(const PositionalDecomposition& dec, std::size_t n) {
  PositionalDecomposition out = dec;
  for (auto& p : out.p) p = p.slice_rows(0, n);
  for (auto& m : out.m) m = m.slice_rows(0, n);
  return out;
}

std::vector<std::size_t> layer_list(std::size_t layers, std::optional<std::size_t> layer) {
  if (layer) {
    if (*layer < 1 || *layer > layers) {
      throw ConfigError("layer " + std::to_string(*layer) + " is outside [1, " + std::to_string(layers) + "]");
    }
    return {*layer};
  }
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l <= layers; ++l) out.push_back(l);
  return out;
}

std::string layer_tag(std::optional<std::size_t> layer) {
  return layer ? "layer" + std::to_string(*layer) : "all";
}

ExtendedModel make_extended(const TransformerModel& model, const ExtensionPoint& pt, std::size_t initial_k,
                            std::size_t eval_length, std::shared_ptr<const PositionalDecomposition> dec) {
  switch (pt.method) {
    case ExtensionMethod::None:
      return ExtendedModel(model, ExtensionSpec{});
    case ExtensionMethod::AttentionScaling:
      return attention_scaling(model, pt.lambda);
    case ExtensionMethod::InitialScaling:
      return initial_scaling(model, pt.lambda, initial_k);
    case ExtensionMethod::DynamicNTK:
      return dynamic_ntk(model, pt.target ? pt.target : eval_length);
    case ExtensionMethod::PositionalVectorReplacement:
      return positional_vector_replacement(model, std::move(dec), pt.layer, pt.r, pt.alpha, initial_k);
    case ExtensionMethod::AttentionWindowExtension:
      return attention_window_extension(model, pt.r, pt.lambda);
  }
  throw ConfigError("unknown extension method");
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  if (EVP_Digest(data.data(), data.size(), md, &n, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  return to_hex(md, n);
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path.string() + "' for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &n);
  return to_hex(md, n);
}

fs::path resolve_cache_dir(const RunConfig& config) {
  if (const char* env = std::getenv("PVLAB_CACHE"); env && *env) return fs::path(env);
  if (config.cache_dir) return *config.cache_dir;
  return config.output_dir / "cache";
}

std::string describe(const ExtensionPoint& p) {
  const auto f = [](double v) { return format_double(v); };
  switch (p.method) {
    case ExtensionMethod::None:
      return "";
    case ExtensionMethod::AttentionScaling:
    case ExtensionMethod::InitialScaling:
      return "lambda=" + f(p.lambda);
    case ExtensionMethod::DynamicNTK:
      return "target=" + std::to_string(p.target);
    case ExtensionMethod::PositionalVectorReplacement:
      return "layer=" + std::to_string(p.layer) + ";r=" + f(p.r) + ";alpha=" + f(p.alpha);
    case ExtensionMethod::AttentionWindowExtension:
      return "r=" + f(p.r) + ";lambda=" + f(p.lambda);
  }
  return "";
}

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)) {
  validate(config_);
  cache_dir_ = resolve_cache_dir(config_);
}

StageRecord& Pipeline::record(const std::string& name, const Key& key, bool hit) {
  for (auto& s : stages_) {
    if (s.name == name && s.key == key.hash) return s;
  }
  stages_.push_back(StageRecord{name, key.hash, "ok", hit, key.path, ""});
  return stages_.back();
}

fs::path Pipeline::output_path(const std::string& experiment, const std::string& params, const std::string& ext) const {
  return config_.output_dir / (experiment + "_" + config_.name + "_" + params + "." + ext);
}

const CorpusData& Pipeline::corpus() {
  if (corpus_) return *corpus_;
  const auto& d = config_.data;
  CorpusData out;

  std::string raw;  // only needed to learn a BPE vocabulary
  const auto read_raw = [&] {
    if (d.paths.empty()) return synthetic_text(d.synthetic_bytes, d.synthetic_seed);
    auto paths = d.paths;
    std::sort(paths.begin(), paths.end());
    std::string all;
    for (const auto& p : paths) {
      std::ifstream in(p, std::ios::binary);
      if (!in) throw DataError("cannot read corpus file '" + p.string() + "'");
      all.append(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return all;
  };

  std::string tokenizer_id = "byte";
  if (d.tokenizer == "byte") {
    out.tokenizer = std::make_shared<ByteLevelTokenizer>();
  } else {
    std::shared_ptr<GreedyBpeTokenizer> bpe;
    if (d.vocab_file) {
      bpe = std::make_shared<GreedyBpeTokenizer>(GreedyBpeTokenizer::load(*d.vocab_file));
    } else {
      raw = read_raw();
      const Key key{sha256_hex("vocab\n" + std::to_string(d.vocab_size) + "\n" + sha256_hex(raw)), {}};
      const fs::path path = cache_dir_ / ("vocab-" + key.hash.substr(0, 16) + ".txt");
      const bool hit = fs::exists(path);
      if (!hit) {
        const auto learned = GreedyBpeTokenizer::train(raw, d.vocab_size);
        write_atomic(path, [&](const fs::path& tmp) { learned.save(tmp); });
      }
      bpe = std::make_shared<GreedyBpeTokenizer>(GreedyBpeTokenizer::load(path));
      record("vocab", Key{key.hash, path}, hit);
    }
    std::string pieces;
    for (const auto& p : bpe->pieces()) pieces += sha256_hex(p) + "\n";
    tokenizer_id = "bpe:" + sha256_hex(pieces);
    out.tokenizer = bpe;
  }

  if (d.paths.empty()) {
    if (raw.empty()) raw = read_raw();
    out.corpus = ingest_text(raw, *out.tokenizer, "synthetic:" + std::to_string(d.synthetic_seed));
  } else {
    out.corpus = ingest_corpus(d.paths, *out.tokenizer);
  }
  if (out.corpus.tokens.empty()) throw DataError("corpus is empty");
  out.split = split_corpus(out.corpus, d.train_fraction);

  const auto& t = out.corpus.tokens;
  const std::string_view bytes(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(Token));
  out.hash = sha256_hex("corpus\n" + tokenizer_id + "\n" + format_double(d.train_fraction) + "\n" +
                        sha256_hex(bytes));
  stages_.push_back(StageRecord{"corpus", out.hash, "ok", false, {}, ""});
  corpus_ = std::move(out);
  return *corpus_;
}

Pipeline::Key Pipeline::train_key() {
  const auto& c = corpus();
  const std::string h = sha256_hex("train\n" + canonical_section(config_, "model") +
                                   canonical_section(config_, "train") + "vocab=" +
                                   std::to_string(c.tokenizer->vocab_size()) + "\n" + c.hash);
  return {h, cache_dir_ / ("ckpt-" + h.substr(0, 16) + ".ckpt")};
}

fs::path Pipeline::train(bool build) {
  const Key key = train_key();
  if (fs::exists(key.path)) {
    record("train", key, true);
    return key.path;
  }
  if (!build) {
    throw ValidationError("missing artifact: checkpoint " + key.path.string() + " for run '" + config_.name +
                          "' (run the train stage first)");
  }
  const auto& c = corpus();
  ModelConfig mc = config_.model;
  mc.vocab = c.tokenizer->vocab_size();
  const std::size_t every = std::max<std::size_t>(1, config_.train.steps / 20);
  auto result = pvlab::train(build_model(mc, config_.init_seed), c.split.train, config_.train,
                             [&](std::size_t step, double loss, double lr) {
                               if (step % every == 0 || step + 1 == config_.train.steps) {
                                 std::cerr << config_.name << ": step " << step << " loss " << loss << " lr " << lr
                                           << "\n";
                               }
                             });
  write_atomic(key.path, [&](const fs::path& tmp) { save_checkpoint(result.model, tmp); });
  model_ = std::move(result.model);
  record("train", key, false);
  return key.path;
}

const TransformerModel& Pipeline::model() {
  if (!model_) model_ = load_checkpoint(train(false));
  return *model_;
}

Pipeline::Key Pipeline::bank_key() {
  const Key ckpt = train_key();
  if (!fs::exists(ckpt.path)) train(false);
  const auto& d = config_.data;
  const std::string h =
      sha256_hex("bank\n" + sha256_file(ckpt.path) + "\n" + corpus().hash + "\nsamples=" + std::to_string(d.samples) +
                 "\nlength=" + std::to_string(config_.bank_length()) + "\nseed=" + std::to_string(d.sampler_seed));
  return {h, cache_dir_ / ("bank-" + h.substr(0, 16) + ".bank")};
}

fs::path Pipeline::bank(bool build) {
  const Key key = bank_key();
  if (fs::exists(key.path)) {
    record("bank", key, true);
    return key.path;
  }
  if (!build) {
    throw ValidationError("missing artifact: hidden-state bank " + key.path.string() + " for run '" +
                          config_.name + "' (run the bank stage first)");
  }
  BankOptions o;
  o.samples = config_.data.samples;
  o.length = config_.bank_length();
  o.seed = config_.data.sampler_seed;
  o.layer_outputs = true;
  o.qkv = true;
  const BankSet banks = collect_bank(model(), corpus().split.eval, o);
  write_atomic(key.path, [&](const fs::path& tmp) { save_bank(banks, tmp); });
  record("bank", key, false);
  return key.path;
}

Pipeline::Key Pipeline::decompose_key() {
  const Key b = bank_key();
  if (!fs::exists(b.path)) bank(false);
  const std::string h =
      sha256_hex("decompose\n" + sha256_file(b.path) + "\ncontext=" + std::to_string(config_.model.context));
  return {h, cache_dir_ / ("dec-" + h.substr(0, 16) + ".dec")};
}

fs::path Pipeline::decompose(bool build) {
  const Key key = decompose_key();
  if (fs::exists(key.path)) {
    record("decompose", key, true);
    return key.path;
  }
  if (!build) {
    throw ValidationError("missing artifact: decomposition " + key.path.string() + " for run '" + config_.name +
                          "' (run the decompose stage first)");
  }
  const DecompositionSet set = pvlab::decompose(load_bank(bank_key().path), config_.model.context);
  write_atomic(key.path, [&](const fs::path& tmp) { save_decomposition(set, tmp); });
  record("decompose", key, false);
  return key.path;
}

std::shared_ptr<const DecompositionSet> Pipeline::decomposition() {
  if (!decomposition_) {
    fs::path path;
    try {
      path = decompose(false);
    } catch (const ValidationError& e) {
      throw ValidationError("missing artifact: decomposition for run '" + config_.name + "' is not cached; " + e.what());
    }
    decomposition_ = std::make_shared<DecompositionSet>(load_decomposition(path));
  }
  return decomposition_;
}

std::vector<fs::path> Pipeline::analyze(const std::string& which, std::optional<std::size_t> layer) {
  const auto& names = analysis_names();
  if (std::find(names.begin(), names.end(), which) == names.end()) {
    throw ConfigError("unknown analysis '" + which + "'");
  }
  const std::size_t C = config_.model.context;
  fs::create_directories(config_.output_dir);

  if (which == "synthetic") {
    const auto& a = config_.analysis;
    const std::string params = "n" + std::to_string(a.synthetic_seqs) + "-T" + std::to_string(a.synthetic_length);
    CsvTable csv({"pe", "position", "mean", "std_error"});
    SvgPlot plot("Synthetic head: averaged first output element", "position", "mean");
    for (PeKind pe : {PeKind::NoPE, PeKind::RoPE}) {
      SyntheticOptions o;
      o.n_seqs = a.synthetic_seqs;
      o.length = a.synthetic_length;
      o.pe = pe;
      o.seed = a.synthetic_seed;
      const auto curve = synthetic_preference_experiment(o);
      Series s{to_string(pe), {}, {}, false, {}};
      for (std::size_t i = 0; i < curve.positions.size(); ++i) {
        csv.add_row({to_string(pe), static_cast<long long>(curve.positions[i]), curve.mean[i], curve.std_error[i]});
        s.x.push_back(static_cast<double>(curve.positions[i]));
        s.y.push_back(curve.mean[i]);
      }
      plot.add(std::move(s));
      plot.hline(curve.vocab_mean, "vocabulary mean");
    }
    const auto c = output_path("synthetic", params, "csv"), g = output_path("synthetic", params, "svg");
    csv.write(c);
    plot.write(g);
    stages_.push_back(StageRecord{"analyze:synthetic", "", "ok", false, c, ""});
    return {c, g};
  }

  const auto& model = this->model();
  const auto decs = decomposition();
  const auto& dec = decs->at({StreamKind::LayerOutput, 0});
  const auto& mc = model.config;
  const auto layers = layer_list(mc.layers, layer);
  const auto& eval = corpus().split.eval;
  const auto& a = config_.analysis;
  std::string params = layer_tag(layer);
  std::optional<CsvTable> csv;
  std::string svg;

  if (which == "pca") {
    const auto within = first_rows(dec, C);
    csv.emplace(std::vector<std::string>{"layer", "position", "pc1", "pc2"});
    SvgPlot plot("Positional vectors, first two principal components", "PC1", "PC2");
    for (std::size_t l : layers) {
      const auto pca = pca_positions(within, l, 2);
      Series s{"layer " + std::to_string(l), {}, {}, true, {}};
      for (std::size_t t = 0; t < pca.coords.rows(); ++t) {
        csv->add_row({static_cast<long long>(l), static_cast<long long>(t + 1), static_cast<double>(pca.coords(t, 0)),
                      static_cast<double>(pca.coords(t, 1))});
        s.x.push_back(pca.coords(t, 0));
        s.y.push_back(pca.coords(t, 1));
        s.color_value.push_back(static_cast<double>(t + 1));
      }
      const auto sep = pca_separation(pca.coords, 4, C / 4 + 1);
      const std::string tag = "pca.layer" + std::to_string(l) + ".";
      metrics_[tag + "initial_min"] = sep.initial_min;
      metrics_[tag + "late_p90"] = sep.late_percentile;
      metrics_[tag + "nn_cv"] = nearest_neighbor_cv(pca.coords);
      plot.add(std::move(s));
    }
    svg = plot.str();
  } else if (which == "distinct-count") {
    if (mc.attn != AttnKind::Window) throw CapabilityError("distinct-count needs a window-attention model");
    csv.emplace(std::vector<std::string>{"layer", "distinct_count", "trf", "reference", "saturated"});
    SvgPlot plot("Distinct positional vectors per layer", "layer", "count");
    Series count{"distinct count", {}, {}, false, {}}, trf{"TRF", {}, {}, false, {}};
    for (std::size_t l : layers) {
      const auto row = distinct_count(dec, l, mc.window, a.threshold);
      csv->add_row({static_cast<long long>(l), static_cast<long long>(row.distinct_count),
                    static_cast<long long>(row.trf), static_cast<long long>(row.reference),
                    static_cast<long long>(row.saturated)});
      count.x.push_back(static_cast<double>(l));
      count.y.push_back(static_cast<double>(row.distinct_count));
      trf.x.push_back(static_cast<double>(l));
      trf.y.push_back(static_cast<double>(row.trf));
      metrics_["distinct.layer" + std::to_string(l)] = static_cast<double>(row.distinct_count);
    }
    plot.add(std::move(count)).add(std::move(trf));
    svg = plot.str();
  } else if (which == "ablation") {
    AblationOptions o;
    o.samples = a.ablation_samples;
    o.seed = a.eval_seed;
    if (layer) o.layers = IndexRange{*layer, *layer + 1};
    const auto rows = ablation_study(model, decs, eval, o);
    csv.emplace(std::vector<std::string>{"variant", "group", "begin", "end", "sim", "ppl"});
    SvgPlot plot("Ablation: perplexity by removed component", "variant", "ppl");
    plot.log_y();
    std::map<std::string, Series> by_group;
    std::map<std::string, double> variant_x;
    for (const auto& r : rows) {
      csv->add_row({to_string(r.variant), r.group, static_cast<long long>(r.range.begin),
                    static_cast<long long>(r.range.end), r.sim, r.ppl});
      const std::string v = to_string(r.variant);
      if (!variant_x.count(v)) variant_x[v] = static_cast<double>(variant_x.size());
      auto& s = by_group[r.group];
      s.label = r.group;
      s.points = true;
      s.x.push_back(variant_x[v]);
      s.y.push_back(r.ppl);
      metrics_["ablation." + v + "." + r.group + ".sim"] = r.sim;
      metrics_["ablation." + v + "." + r.group + ".ppl"] = r.ppl;
    }
    for (auto& [g, s] : by_group) plot.add(std::move(s));
    svg = plot.str();
  } else if (which == "attention") {
    BankOptions o;
    o.samples = a.attention_samples;
    o.length = C;
    o.seed = a.eval_seed;
    o.layer_outputs = false;
    o.qkv = true;
    o.retain = true;
    const BankSet qb = collect_bank(model, eval, o);
    const DecompositionSet qd = pvlab::decompose(qb, C);
    csv.emplace(std::vector<std::string>{"layer", "setting", "sink_strength", "decay_slope", "uniform_baseline"});
    SvgPlot plot("Attention sink strength by layer", "layer", "sink strength");
    std::optional<Matrix> map;
    for (AttentionSetting s : {AttentionSetting::Original, AttentionSetting::WoSemanticVector,
                               AttentionSetting::WoPositionalVector, AttentionSetting::WoPositionalBasis}) {
      Series line{to_string(s), {}, {}, false, {}};
      for (std::size_t l : layers) {
        const auto prof = attention_component_maps(mc, qb, qd, l, std::nullopt, s);
        csv->add_row({static_cast<long long>(l), to_string(s), prof.sink_strength, prof.decay_slope,
                      prof.uniform_baseline});
        line.x.push_back(static_cast<double>(l));
        line.y.push_back(prof.sink_strength);
        const std::string tag = "attention.layer" + std::to_string(l) + "." + to_string(s) + ".";
        metrics_[tag + "sink"] = prof.sink_strength;
        metrics_[tag + "slope"] = prof.decay_slope;
        if (layer && s == AttentionSetting::Original) map = prof.map;
      }
      plot.add(std::move(line));
    }
    svg = map ? svg_heatmap(*map, "Attention map, layer " + std::to_string(*layer), true) : plot.str();
  } else if (which == "extrapolation") {
    const std::size_t T = config_.bank_length();
    if (T <= C) throw ConfigError("extrapolation needs [data] length > context");
    params += "-T" + std::to_string(T);
    const auto nll = position_nll(model, eval, T, a.eval_samples, a.eval_seed);
    const auto curves =
        extrapolation_curves(dec, nll, C, layer ? std::vector<std::size_t>{*layer} : std::vector<std::size_t>{});
    csv.emplace(std::vector<std::string>{"position", "ppl", "max_sim"});
    SvgPlot plot("Direct extrapolation", "position", "value");
    plot.log_y();
    Series ppl{"ppl", {}, {}, false, {}}, sim{"max_sim", {}, {}, false, {}};
    for (std::size_t t = 0; t < curves.ppl.size(); ++t) {
      // Entry t is the prediction made at position t + 1.
      const double x = static_cast<double>(t + 1);
      csv->add_row({static_cast<long long>(t + 1), curves.ppl[t], curves.max_sim[t]});
      ppl.x.push_back(x);
      ppl.y.push_back(curves.ppl[t]);
      sim.x.push_back(x);
      sim.y.push_back(curves.max_sim[t]);
    }
    plot.add(std::move(ppl)).add(std::move(sim)).vline(static_cast<double>(C), "C");
    metrics_["extrapolation.within_ppl"] = curves.within_ppl;
    metrics_["extrapolation.beyond_ppl"] = curves.beyond_ppl;
    metrics_["extrapolation.beyond_max_sim"] = curves.beyond_max_sim;
    svg = plot.str();
  } else if (which == "ood-logits") {
    const Matrix s = ood_logit_similarity(dec, model);
    csv.emplace(std::vector<std::string>{"position_i", "position_j", "similarity"});
    double within = 0, cross = 0;
    std::size_t nw = 0, nc = 0;
    for (std::size_t i = 0; i < s.rows(); ++i) {
      for (std::size_t j = 0; j < s.cols(); ++j) {
        csv->add_row({static_cast<long long>(i + 1), static_cast<long long>(j + 1), static_cast<double>(s(i, j))});
        if (j < C && i < C && i != j) {
          within += s(i, j);
          ++nw;
        } else if (j < C && i >= C) {
          cross += s(i, j);
          ++nc;
        }
      }
    }
    if (nw) metrics_["ood.within_mean"] = within / static_cast<double>(nw);
    if (nc) metrics_["ood.beyond_to_within_mean"] = cross / static_cast<double>(nc);
    svg = svg_heatmap(s, "Logit similarity of positional vectors", false);
  }

  const auto c = output_path(which, params, "csv"), g = output_path(which, params, "svg");
  csv->write(c);
  write_text(g, svg);
  stages_.push_back(StageRecord{"analyze:" + which, "", "ok", false, c, ""});
  return {c, g};
}

std::vector<ExtensionPoint> Pipeline::extension_grid() const {
  const auto& x = config_.extend;
  std::vector<ExtensionPoint> out{ExtensionPoint{}};
  for (const auto& name : x.methods) {
    const ExtensionMethod m = parse_extension_method(name);
    ExtensionPoint p;
    p.method = m;
    switch (m) {
      case ExtensionMethod::None:
        break;
      case ExtensionMethod::AttentionScaling:
      case ExtensionMethod::InitialScaling:
        for (double l : x.lambda) {
          p.lambda = l;
          out.push_back(p);
        }
        break;
      case ExtensionMethod::DynamicNTK:
        for (std::size_t t : x.target) {
          p.target = t ? t : config_.eval_length();
          out.push_back(p);
        }
        break;
      case ExtensionMethod::PositionalVectorReplacement:
        for (std::size_t l : x.layer)
          for (double r : x.r)
            for (double al : x.alpha) {
              p.layer = l;
              p.r = r;
              p.alpha = al;
              out.push_back(p);
            }
        break;
      case ExtensionMethod::AttentionWindowExtension:
        for (double r : x.r)
          for (double l : x.lambda) {
            p.r = r;
            p.lambda = l;
            out.push_back(p);
          }
        break;
    }
  }
  return out;
}

std::vector<fs::path> Pipeline::extend_eval(const std::vector<ExtensionPoint>& points) {
  const auto decs = decomposition();  // checked first: ratios and PVR both need it
  const auto& model = this->model();
  const auto& eval = corpus().split.eval;
  const std::size_t C = config_.model.context;
  const std::size_t L = model.config.layers;
  const std::size_t Le = config_.eval_length();
  const auto& x = config_.extend;
  const auto orig = std::make_shared<const PositionalDecomposition>(decs->at({StreamKind::LayerOutput, 0}));

  CsvTable summary({"method", "params", "eval_length", "ppl"});
  CsvTable ratios({"method", "params", "layer", "ratio", "approximate", "matched"});
  SvgPlot plot("Perplexity after context-window extension", "configuration", "ppl");
  plot.log_y();

  const double within = windowed_ppl(ExtendedModel(model, ExtensionSpec{}), eval, C, x.eval_samples, x.eval_seed);
  metrics_["extend.within_ppl"] = within;
  plot.hline(within, "within window");

  std::map<std::string, Series> series;
  std::vector<std::size_t> all_layers;
  for (std::size_t l = 1; l <= L; ++l) all_layers.push_back(l);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& pt = points[i];
    const ExtendedModel em = make_extended(model, pt, x.initial_k, Le, orig);
    std::size_t length = Le;
    if (em.max_length() && *em.max_length() < length) length = *em.max_length();
    const double ppl = windowed_ppl(em, eval, length, x.eval_samples, x.eval_seed);
    const std::string method = to_string(pt.method), params = describe(pt);
    summary.add_row({method, params, static_cast<long long>(length), ppl});
    metrics_["extend." + method + (params.empty() ? "" : "(" + params + ")") + ".ppl"] = ppl;

    BankOptions o;
    o.samples = config_.data.samples;
    o.length = length;
    o.seed = config_.data.sampler_seed;
    const BankSet b = collect_bank(model, eval, o, {}, em.hooks());
    const auto ext = pvlab::decompose(b.at({StreamKind::LayerOutput, 0}), C);
    const auto rs = ratio_per_layer(*orig, ext, all_layers, C);
    for (std::size_t l = 0; l < rs.size(); ++l) {
      ratios.add_row({method, params, static_cast<long long>(l + 1), rs[l].ratio,
                      static_cast<long long>(rs[l].approximate), static_cast<long long>(rs[l].matched)});
    }
    auto& s = series[method];
    s.label = method;
    s.points = true;
    s.x.push_back(static_cast<double>(i));
    s.y.push_back(ppl);
  }
  for (auto& [m, s] : series) plot.add(std::move(s));

  fs::create_directories(config_.output_dir);
  const std::string params = "T" + std::to_string(Le);
  const auto c1 = output_path("extend", params, "csv"), c2 = output_path("extend-ratio", params, "csv"),
             g = output_path("extend", params, "svg");
  summary.write(c1);
  ratios.write(c2);
  plot.write(g);
  stages_.push_back(StageRecord{"extend", "", "ok", false, c1, ""});
  return {c1, c2, g};
}

ExperimentReport run_experiment(const RunConfig& config) {
  ExperimentReport rep;
  rep.config_hash = sha256_hex(canonical_text(config));
  Pipeline p(config);

  const auto& a = config.analysis.which;
  const bool needs_model =
      !config.extend.methods.empty() || std::any_of(a.begin(), a.end(), [](const auto& w) { return w != "synthetic"; });
  const auto stage = [&](const std::string& name, auto&& fn) {
    if (rep.failed_stage) return;
    try {
      fn();
    } catch (const std::exception& e) {
      rep.failed_stage = name;
      rep.error = e.what();
    }
  };
  const auto add_outputs = [&](const std::vector<fs::path>& files) {
    for (const auto& f : files) (f.extension() == ".svg" ? rep.svg_files : rep.csv_files).push_back(f);
  };
  if (needs_model) {
    stage("corpus", [&] { p.corpus(); });
    stage("train", [&] { p.train(true); });
    stage("bank", [&] { p.bank(true); });
    stage("decompose", [&] { p.decompose(true); });
  }
  for (const auto& w : a) stage("analyze:" + w, [&] { add_outputs(p.analyze(w)); });
  if (!config.extend.methods.empty()) stage("extend", [&] { add_outputs(p.extend_eval(p.extension_grid())); });

  rep.stages = p.stages();
  if (rep.failed_stage) rep.stages.push_back(StageRecord{*rep.failed_stage, "", "failed", false, {}, rep.error});
  rep.metrics = p.metrics();

  nlohmann::ordered_json m;
  m["name"] = config.name;
  m["version"] = kVersion;
  m["compiler"] = __VERSION__;
  m["config_hash"] = rep.config_hash;
  m["config"] = canonical_text(config);
  m["seeds"] = {{"init", config.init_seed},
                {"train", config.train.seed},
                {"corpus", config.data.synthetic_seed},
                {"sampler", config.data.sampler_seed},
                {"analysis", config.analysis.eval_seed},
                {"synthetic", config.analysis.synthetic_seed},
                {"extend", config.extend.eval_seed}};
  m["cache_dir"] = p.cache_dir().string();
  auto stages = nlohmann::ordered_json::array();
  for (const auto& s : rep.stages) {
    nlohmann::ordered_json j{{"name", s.name}, {"status", s.status}, {"cache_hit", s.cache_hit}};
    if (!s.key.empty()) j["key"] = s.key;
    if (!s.artifact.empty()) j["artifact"] = s.artifact.string();
    if (!s.error.empty()) j["error"] = s.error;
    stages.push_back(std::move(j));
  }
  m["stages"] = std::move(stages);
  auto names = [](const std::vector<fs::path>& files) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& f : files) arr.push_back(f.filename().string());
    return arr;
  };
  m["csv"] = names(rep.csv_files);
  m["svg"] = names(rep.svg_files);
  m["metrics"] = rep.metrics;
  m["failed_stage"] = rep.failed_stage ? nlohmann::ordered_json(*rep.failed_stage) : nlohmann::ordered_json();
  if (rep.failed_stage) m["error"] = rep.error;
  rep.manifest = config.output_dir / ("manifest_" + config.name + ".json");
  write_text(rep.manifest, m.dump(2) + "\n");
  return rep;
}

}  // namespace pvlab
