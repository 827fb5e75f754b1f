#include "pvlab/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "pvlab/errors.hpp"
#include "pvlab/extend.hpp"
#include "pvlab/report.hpp"

namespace pvlab {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string where(const std::string& section, const std::string& key, std::size_t line) {
  std::string w = "[" + section + "] " + key;
  if (line) w += " (line " + std::to_string(line) + ")";
  return w;
}

std::uint64_t to_u64(const std::string& v, const std::string& at) {
  std::uint64_t out = 0;
  const auto t = trim(v);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) {
    throw ConfigError(at + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& v, const std::string& at) { return static_cast<std::size_t>(to_u64(v, at)); }

double to_double(const std::string& v, const std::string& at) {
  double out = 0;
  const auto t = trim(v);
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) {
    throw ConfigError(at + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v, const std::string& at) {
  const auto t = trim(v);
  if (t == "true" || t == "yes" || t == "1" || t == "on") return true;
  if (t == "false" || t == "no" || t == "0" || t == "off") return false;
  throw ConfigError(at + ": expected true or false, got '" + v + "'");
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& v, const std::string& at, F convert) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(convert(item, at));
  return out;
}

std::filesystem::path resolve(const std::string& v, const std::filesystem::path& base) {
  std::filesystem::path p(trim(v));
  if (p.is_relative() && !base.empty()) p = base / p;
  return p.lexically_normal();
}

void set_key(RunConfig& c, const std::string& section, const std::string& key, const std::string& value,
             std::size_t line, const std::filesystem::path& base) {
  const std::string at = where(section, key, line);
  const auto unknown = [&] { throw ConfigError("unknown key " + at); };
  const auto& v = value;
  if (section == "run") {
    if (key == "name") {
      c.name = trim(v);
    } else if (key == "output_dir") {
      c.output_dir = resolve(v, base);
    } else if (key == "cache_dir") {
      c.cache_dir = resolve(v, base);
    } else {
      unknown();
    }
  } else if (section == "model") {
    auto& m = c.model;
    if (key == "layers") m.layers = to_size(v, at);
    else if (key == "heads") m.heads = to_size(v, at);
    else if (key == "dim") m.dim = to_size(v, at);
    else if (key == "ffn_dim") m.ffn_dim = to_size(v, at);
    else if (key == "context") m.context = to_size(v, at);
    else if (key == "rope_base") m.rope_base = to_double(v, at);
    else if (key == "window") m.window = to_size(v, at);
    else if (key == "tie_embeddings") m.tie_embeddings = to_bool(v, at);
    else if (key == "norm_eps") m.norm_eps = static_cast<float>(to_double(v, at));
    else if (key == "init_seed") c.init_seed = to_u64(v, at);
    else if (key == "pe") {
      try {
        m.pe = parse_pe_kind(trim(v));
      } catch (const Error& e) {
        throw ConfigError(at + ": " + e.what());
      }
    } else if (key == "attention") {
      try {
        m.attn = parse_attn_kind(trim(v));
      } catch (const Error& e) {
        throw ConfigError(at + ": " + e.what());
      }
    } else {
      unknown();
    }
  } else if (section == "train") {
    auto& t = c.train;
    if (key == "steps") t.steps = to_size(v, at);
    else if (key == "batch") t.batch = to_size(v, at);
    else if (key == "warmup") t.warmup = to_size(v, at);
    else if (key == "lr") t.lr = to_double(v, at);
    else if (key == "min_lr") t.min_lr = to_double(v, at);
    else if (key == "beta1") t.beta1 = to_double(v, at);
    else if (key == "beta2") t.beta2 = to_double(v, at);
    else if (key == "adam_eps") t.adam_eps = to_double(v, at);
    else if (key == "weight_decay") t.weight_decay = to_double(v, at);
    else if (key == "grad_clip") t.grad_clip = to_double(v, at);
    else if (key == "seed") t.seed = to_u64(v, at);
    else unknown();
  } else if (section == "data") {
    auto& d = c.data;
    if (key == "paths") {
      d.paths.clear();
      for (const auto& item : split_list(v)) d.paths.push_back(resolve(item, base));
    } else if (key == "synthetic_bytes") d.synthetic_bytes = to_size(v, at);
    else if (key == "synthetic_seed") d.synthetic_seed = to_u64(v, at);
    else if (key == "tokenizer") d.tokenizer = trim(v);
    else if (key == "vocab_size") d.vocab_size = to_size(v, at);
    else if (key == "vocab_file") d.vocab_file = resolve(v, base);
    else if (key == "train_fraction") d.train_fraction = to_double(v, at);
    else if (key == "sampler_seed") d.sampler_seed = to_u64(v, at);
    else if (key == "samples") d.samples = to_size(v, at);
    else if (key == "length") d.length = to_size(v, at);
    else unknown();
  } else if (section == "analysis") {
    auto& a = c.analysis;
    if (key == "which") a.which = split_list(v);
    else if (key == "eval_samples") a.eval_samples = to_size(v, at);
    else if (key == "eval_seed") a.eval_seed = to_u64(v, at);
    else if (key == "threshold") a.threshold = to_double(v, at);
    else if (key == "attention_samples") a.attention_samples = to_size(v, at);
    else if (key == "ablation_samples") a.ablation_samples = to_size(v, at);
    else if (key == "synthetic_seqs") a.synthetic_seqs = to_size(v, at);
    else if (key == "synthetic_length") a.synthetic_length = to_size(v, at);
    else if (key == "synthetic_seed") a.synthetic_seed = to_u64(v, at);
    else unknown();
  } else if (section == "extend") {
    auto& x = c.extend;
    if (key == "methods") x.methods = split_list(v);
    else if (key == "lambda") x.lambda = to_list<double>(v, at, to_double);
    else if (key == "r") x.r = to_list<double>(v, at, to_double);
    else if (key == "alpha") x.alpha = to_list<double>(v, at, to_double);
    else if (key == "layer") x.layer = to_list<std::size_t>(v, at, to_size);
    else if (key == "target") x.target = to_list<std::size_t>(v, at, to_size);
    else if (key == "initial_k") x.initial_k = to_size(v, at);
    else if (key == "eval_length") x.eval_length = to_size(v, at);
    else if (key == "eval_samples") x.eval_samples = to_size(v, at);
    else if (key == "eval_seed") x.eval_seed = to_u64(v, at);
    else unknown();
  } else {
    throw ConfigError("unknown section [" + section + "]" + (line ? " (line " + std::to_string(line) + ")" : ""));
  }
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ",") + s;
  return out;
}

template <typename T>
std::string join_numbers(const std::vector<T>& items) {
  std::vector<std::string> s;
  for (const auto& v : items) {
    if constexpr (std::is_floating_point_v<T>) {
      s.push_back(format_double(v));
    } else {
      s.push_back(std::to_string(v));
    }
  }
  return join(s);
}

}  // namespace

IniDocument parse_ini(const std::string& text, const std::string& source) {
  IniDocument doc;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    const std::string at = source + ":" + std::to_string(line);
    if (s[0] == '[') {
      if (s.back() != ']' || s.size() < 3) throw ConfigError(at + ": malformed section header");
      section = trim(s.substr(1, s.size() - 2));
      doc[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(at + ": expected key = value");
    if (section.empty()) throw ConfigError(at + ": key outside any section");
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError(at + ": empty key");
    auto& sec = doc[section];
    if (sec.count(key)) throw ConfigError(at + ": duplicate key '" + key + "' in [" + section + "]");
    sec[key] = IniEntry{trim(s.substr(eq + 1)), line};
  }
  return doc;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto next = text.find(',', pos);
    if (next == std::string::npos) next = text.size();
    auto item = trim(text.substr(pos, next - pos));
    if (!item.empty()) out.push_back(std::move(item));
    pos = next + 1;
  }
  return out;
}

const std::vector<std::string>& analysis_names() {
  static const std::vector<std::string> names{"pca",        "distinct-count", "ablation", "attention",
                                              "extrapolation", "ood-logits",  "synthetic"};
  return names;
}

RunConfig run_config_from_ini(const IniDocument& doc, const std::filesystem::path& base_dir) {
  RunConfig c;
  // Small defaults for the model; a config normally spells these out.
  c.model.layers = 4;
  c.model.heads = 4;
  c.model.dim = 64;
  c.model.ffn_dim = 256;
  c.model.context = 64;
  for (const auto& [section, entries] : doc) {
    static const char* known[] = {"run", "model", "train", "data", "analysis", "extend"};
    if (std::find(std::begin(known), std::end(known), section) == std::end(known)) {
      throw ConfigError("unknown section [" + section + "]");
    }
    for (const auto& [key, entry] : entries) set_key(c, section, key, entry.value, entry.line, base_dir);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_ini(parse_ini(ss.str(), path.string()), path.parent_path());
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  set_key(config, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
          trim(assignment.substr(eq + 1)), 0, std::filesystem::current_path());
}

void validate(const RunConfig& c) {
  if (c.name.empty()) throw ConfigError("[run] name must not be empty");
  for (char ch : c.name) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.')) {
      throw ConfigError("[run] name may hold only letters, digits, '-' and '.'");
    }
  }
  if (c.data.tokenizer != "byte" && c.data.tokenizer != "bpe") {
    throw ConfigError("[data] tokenizer must be byte or bpe, got '" + c.data.tokenizer + "'");
  }
  if (c.data.tokenizer == "bpe" && !c.data.vocab_file && c.data.vocab_size < 257) {
    throw ConfigError("[data] vocab_size must exceed 256 for bpe");
  }
  for (const auto& p : c.data.paths) {
    if (!std::filesystem::is_regular_file(p)) throw ConfigError("[data] paths: '" + p.string() + "' does not exist");
  }
  if (c.data.vocab_file && !std::filesystem::is_regular_file(*c.data.vocab_file)) {
    throw ConfigError("[data] vocab_file: '" + c.data.vocab_file->string() + "' does not exist");
  }
  if (c.data.paths.empty() && c.data.synthetic_bytes == 0) throw ConfigError("[data] synthetic_bytes must be positive");
  if (!(c.data.train_fraction > 0.0 && c.data.train_fraction < 1.0)) {
    throw ConfigError("[data] train_fraction must be in (0, 1)");
  }
  if (c.data.samples == 0) throw ConfigError("[data] samples must be positive");
  if (c.bank_length() < c.model.context) throw ConfigError("[data] length must be at least the model context");

  ModelConfig m = c.model;
  m.vocab = 256;  // placeholder: the tokenizer fixes the real vocabulary
  m.validate();
  if (c.train.batch == 0) throw ConfigError("[train] batch must be positive");
  if (!(c.train.lr > 0.0) || c.train.min_lr < 0.0 || c.train.min_lr > c.train.lr) {
    throw ConfigError("[train] need lr > 0 and 0 <= min_lr <= lr");
  }

  for (const auto& w : c.analysis.which) {
    const auto& names = analysis_names();
    if (std::find(names.begin(), names.end(), w) == names.end()) {
      throw ConfigError("[analysis] which: unknown analysis '" + w + "'");
    }
  }
  if (c.analysis.eval_samples == 0) throw ConfigError("[analysis] eval_samples must be positive");
  if (!(c.analysis.threshold > 0.0 && c.analysis.threshold <= 1.0)) {
    throw ConfigError("[analysis] threshold must be in (0, 1]");
  }

  const auto& x = c.extend;
  if (x.lambda.empty() || x.r.empty() || x.alpha.empty() || x.layer.empty() || x.target.empty()) {
    throw ConfigError("[extend] grids must not be empty");
  }
  for (const auto& name : x.methods) {
    try {
      parse_extension_method(name);
    } catch (const Error& e) {
      throw ConfigError(std::string("[extend] methods: ") + e.what());
    }
  }
  for (double v : x.lambda)
    if (!(v > 0.0)) throw ConfigError("[extend] lambda values must be positive");
  for (double v : x.r)
    if (!(v >= 1.0)) throw ConfigError("[extend] r values must be at least 1");
  for (double v : x.alpha)
    if (!(v >= 1.0)) throw ConfigError("[extend] alpha values must be at least 1");
  for (std::size_t v : x.layer)
    if (v < 1 || v > c.model.layers) throw ConfigError("[extend] layer values must be in [1, layers]");
  if (x.eval_samples == 0) throw ConfigError("[extend] eval_samples must be positive");
  if (c.eval_length() <= c.model.context && !x.methods.empty()) {
    throw ConfigError("[extend] eval_length must exceed the model context");
  }
}

std::string canonical_section(const RunConfig& c, const std::string& section) {
  std::ostringstream o;
  const auto kv = [&](const std::string& k, const std::string& v) { o << k << '=' << v << '\n'; };
  const auto num = [](double v) { return format_double(v); };
  if (section == "model") {
    const auto& m = c.model;
    kv("attention", to_string(m.attn));
    kv("context", std::to_string(m.context));
    kv("dim", std::to_string(m.dim));
    kv("ffn_dim", std::to_string(m.ffn_dim));
    kv("heads", std::to_string(m.heads));
    kv("init_seed", std::to_string(c.init_seed));
    kv("layers", std::to_string(m.layers));
    kv("norm_eps", num(m.norm_eps));
    kv("pe", to_string(m.pe));
    kv("rope_base", num(m.rope_base));
    kv("tie_embeddings", m.tie_embeddings ? "true" : "false");
    kv("window", std::to_string(m.window));
  } else if (section == "train") {
    const auto& t = c.train;
    kv("adam_eps", num(t.adam_eps));
    kv("batch", std::to_string(t.batch));
    kv("beta1", num(t.beta1));
    kv("beta2", num(t.beta2));
    kv("grad_clip", num(t.grad_clip));
    kv("lr", num(t.lr));
    kv("min_lr", num(t.min_lr));
    kv("seed", std::to_string(t.seed));
    kv("steps", std::to_string(t.steps));
    kv("warmup", std::to_string(t.warmup));
    kv("weight_decay", num(t.weight_decay));
  } else if (section == "data") {
    const auto& d = c.data;
    std::vector<std::string> paths;
    for (const auto& p : d.paths) paths.push_back(p.string());
    std::sort(paths.begin(), paths.end());
    kv("length", std::to_string(c.bank_length()));
    kv("paths", join(paths));
    kv("sampler_seed", std::to_string(d.sampler_seed));
    kv("samples", std::to_string(d.samples));
    kv("synthetic_bytes", d.paths.empty() ? std::to_string(d.synthetic_bytes) : "-");
    kv("synthetic_seed", d.paths.empty() ? std::to_string(d.synthetic_seed) : "-");
    kv("tokenizer", d.tokenizer);
    kv("train_fraction", num(d.train_fraction));
    kv("vocab_file", d.vocab_file ? d.vocab_file->string() : "-");
    kv("vocab_size", d.tokenizer == "bpe" ? std::to_string(d.vocab_size) : "-");
  } else if (section == "analysis") {
    const auto& a = c.analysis;
    kv("ablation_samples", std::to_string(a.ablation_samples));
    kv("attention_samples", std::to_string(a.attention_samples));
    kv("eval_samples", std::to_string(a.eval_samples));
    kv("eval_seed", std::to_string(a.eval_seed));
    kv("synthetic_length", std::to_string(a.synthetic_length));
    kv("synthetic_seed", std::to_string(a.synthetic_seed));
    kv("synthetic_seqs", std::to_string(a.synthetic_seqs));
    kv("threshold", num(a.threshold));
    kv("which", join(a.which));
  } else if (section == "extend") {
    const auto& x = c.extend;
    kv("alpha", join_numbers(x.alpha));
    kv("eval_length", std::to_string(c.eval_length()));
    kv("eval_samples", std::to_string(x.eval_samples));
    kv("eval_seed", std::to_string(x.eval_seed));
    kv("initial_k", std::to_string(x.initial_k));
    kv("lambda", join_numbers(x.lambda));
    kv("layer", join_numbers(x.layer));
    kv("methods", join(x.methods));
    kv("r", join_numbers(x.r));
    kv("target", join_numbers(x.target));
  } else {
    throw ConfigError("canonical_section: unknown section '" + section + "'");
  }
  return o.str();
}

std::string canonical_text(const RunConfig& c) {
  std::string out = "[run]\nname=" + c.name + "\n";
  for (const char* s : {"model", "train", "data", "analysis", "extend"}) {
    out += std::string("[") + s + "]\n" + canonical_section(c, s);
  }
  return out;
}

}  // namespace pvlab
