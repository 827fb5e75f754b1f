#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pvlab/model.hpp"

namespace pvlab {

// ---------------------------------------------------------------------------
// INI text: [section] headers, `key = value` lines, full-line comments
// starting with '#' or ';'. Keys are unique within a section.

struct IniEntry {
  std::string value;
  std::size_t line = 0;
};

using IniSection = std::map<std::string, IniEntry>;
using IniDocument = std::map<std::string, IniSection>;

IniDocument parse_ini(const std::string& text, const std::string& source = "<config>");

// Comma-separated list with surrounding whitespace trimmed; empty items are
// dropped.
std::vector<std::string> split_list(const std::string& text);

// ---------------------------------------------------------------------------
// Run configuration

struct DataSection {
  std::vector<std::filesystem::path> paths;  // empty: generated prose
  std::size_t synthetic_bytes = 6'000'000;
  std::uint64_t synthetic_seed = 1;
  std::string tokenizer = "byte";  // byte | bpe
  std::size_t vocab_size = 512;  // bpe only
  std::optional<std::filesystem::path> vocab_file;  // bpe: load instead of training
  double train_fraction = 0.95;
  std::uint64_t sampler_seed = 3;
  std::size_t samples = 256;  // N for hidden-state banks
  std::size_t length = 0;  // T for banks, 0: 4C
};

struct AnalysisSection {
  std::vector<std::string> which;
  std::size_t eval_samples = 64;
  std::uint64_t eval_seed = 5;
  double threshold = 0.99;
  std::size_t attention_samples = 64;
  std::size_t ablation_samples = 64;
  std::size_t synthetic_seqs = 2000;
  std::size_t synthetic_length = 1024;
  std::uint64_t synthetic_seed = 11;
};

struct ExtendSection {
  std::vector<std::string> methods;
  // Grids; each method expands over the parameters it uses.
  std::vector<double> lambda{1.0};
  std::vector<double> r{2.0};
  std::vector<double> alpha{1.0};
  std::vector<std::size_t> layer{2};
  std::vector<std::size_t> target{0};  // 0: eval length
  std::size_t initial_k = 4;
  std::size_t eval_length = 0;  // 0: 2C
  std::size_t eval_samples = 32;
  std::uint64_t eval_seed = 7;
};

struct RunConfig {
  std::string name = "run";
  std::filesystem::path output_dir = "out";
  std::optional<std::filesystem::path> cache_dir;
  ModelConfig model;
  std::uint64_t init_seed = 7;
  TrainConfig train;
  DataSection data;
  AnalysisSection analysis;
  ExtendSection extend;

  std::size_t bank_length() const { return data.length ? data.length : 4 * model.context; }
  std::size_t eval_length() const { return extend.eval_length ? extend.eval_length : 2 * model.context; }
};

// Known analysis names, in pipeline order.
const std::vector<std::string>& analysis_names();

// Relative paths are resolved against `base_dir`. Throws ConfigError with
// the line number for unknown sections/keys and malformed values.
RunConfig run_config_from_ini(const IniDocument& doc, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// `section.key=value` override, parsed exactly like the file.
void apply_override(RunConfig& config, const std::string& assignment);

// Throws ConfigError: missing paths, empty grids, bad ranges, model shape.
void validate(const RunConfig& config);

// Canonical text of one section ("model", "train", "data", "analysis",
// "extend"); the content hashes are taken over these.
std::string canonical_section(const RunConfig& config, const std::string& section);
std::string canonical_text(const RunConfig& config);

}  // namespace pvlab
