#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pvlab/config.hpp"
#include "pvlab/corpus.hpp"
#include "pvlab/extend.hpp"
#include "pvlab/model.hpp"
#include "pvlab/tokenizer.hpp"

namespace pvlab {

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

// PVLAB_CACHE wins over [run] cache_dir, which wins over <output_dir>/cache.
std::filesystem::path resolve_cache_dir(const RunConfig& config);

struct StageRecord {
  std::string name;
  std::string key;  // content hash the artifact is filed under
  std::string status;  // ok | failed
  bool cache_hit = false;
  std::filesystem::path artifact;
  std::string error;
};

struct ExtensionPoint {
  ExtensionMethod method = ExtensionMethod::None;
  double lambda = 1.0;
  double r = 1.0;
  double alpha = 1.0;
  std::size_t layer = 0;
  std::size_t target = 0;
};

// Parameters a method actually reads, as "key=value" pairs.
std::string describe(const ExtensionPoint& point);

struct ExperimentReport {
  std::string config_hash;
  std::vector<StageRecord> stages;
  std::vector<std::filesystem::path> csv_files;
  std::vector<std::filesystem::path> svg_files;
  std::map<std::string, double> metrics;
  std::optional<std::string> failed_stage;
  std::string error;
  std::filesystem::path manifest;
};

struct CorpusData {
  std::shared_ptr<const Tokenizer> tokenizer;
  Corpus corpus;
  CorpusSplit split;
  std::string hash;  // tokenizer identity + token stream
};

// One pipeline over a validated config. Each stage looks its upstream
// artifacts up in the content-addressed cache and raises ValidationError
// naming any that is missing; with build == false the stage's own artifact
// must already be cached too.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config);

  const RunConfig& config() const { return config_; }
  const std::filesystem::path& cache_dir() const { return cache_dir_; }

  const CorpusData& corpus();
  std::filesystem::path train(bool build = true);
  std::filesystem::path bank(bool build = true);
  std::filesystem::path decompose(bool build = true);

  // Writes exactly one CSV and one SVG into the output directory and
  // returns their paths (CSV first).
  std::vector<std::filesystem::path> analyze(const std::string& which, std::optional<std::size_t> layer = {});
  // Perplexity and per-layer interpolation ratio of every point: two CSVs
  // (summary, per-layer ratio) and one SVG.
  std::vector<std::filesystem::path> extend_eval(const std::vector<ExtensionPoint>& points);
  // Cartesian expansion of the [extend] grids, with the unextended model first.
  std::vector<ExtensionPoint> extension_grid() const;

  const std::vector<StageRecord>& stages() const { return stages_; }
  const std::map<std::string, double>& metrics() const { return metrics_; }

  // Name of an output file, <experiment>_<model>_<params>.<ext>.
  std::filesystem::path output_path(const std::string& experiment, const std::string& params,
                                    const std::string& ext) const;

 private:
  struct Key {
    std::string hash;
    std::filesystem::path path;
  };
  Key train_key();
  Key bank_key();
  Key decompose_key();
  const TransformerModel& model();
  std::shared_ptr<const DecompositionSet> decomposition();
  StageRecord& record(const std::string& name, const Key& key, bool hit);

  RunConfig config_;
  std::filesystem::path cache_dir_;
  std::optional<CorpusData> corpus_;
  std::optional<TransformerModel> model_;
  std::shared_ptr<const DecompositionSet> decomposition_;
  std::vector<StageRecord> stages_;
  std::map<std::string, double> metrics_;
};

// Runs corpus -> train -> bank -> decompose -> analyses -> extensions. A
// stage error stops the run; the report (and manifest) marks the failed
// stage and keeps everything produced before it.
ExperimentReport run_experiment(const RunConfig& config);

}  // namespace pvlab
