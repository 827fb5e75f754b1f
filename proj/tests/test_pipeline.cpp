#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "pvlab/config.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/pipeline.hpp"
#include "pvlab/report.hpp"

using namespace pvlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pvlab_pipe_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTiny = R"(
# small enough to train in a second
[run]
name = tiny
output_dir = out

[model]
layers = 2
heads = 2
dim = 16
ffn_dim = 32
context = 16
pe = nope
attention = window
window = 4

[train]
steps = 12
batch = 4
warmup = 2
seed = 1

[data]
synthetic_bytes = 60000
samples = 16
length = 48

[analysis]
which = pca, distinct-count, extrapolation
eval_samples = 4

[extend]
methods = attention-scaling, awe
lambda = 1.1, 1.2
r = 2
eval_samples = 4
)";

RunConfig tiny_config(const fs::path& dir) {
  unsetenv("PVLAB_CACHE");
  return run_config_from_ini(parse_ini(kTiny), dir);
}

}  // namespace

TEST_CASE("ini parsing: sections, comments, lists and errors with line numbers") {
  const auto doc = parse_ini("; c\n[a]\nx = 1, 2 ,3\n\n# c\n[b]\ny=hello world\n");
  CHECK(doc.at("a").at("x").value == "1, 2 ,3");
  CHECK(doc.at("a").at("x").line == 3);
  CHECK(doc.at("b").at("y").value == "hello world");
  CHECK(split_list(doc.at("a").at("x").value) == std::vector<std::string>{"1", "2", "3"});
  CHECK(split_list(" , ,") .empty());

  CHECK_THROWS_AS(parse_ini("x = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_ini("[a]\nx = 1\nx = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_ini("[a\n"), ConfigError);
  CHECK_THROWS_AS(parse_ini("[a]\njunk\n"), ConfigError);
  try {
    parse_ini("[a]\nok = 1\nbroken\n", "f.cfg");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("f.cfg:3") != std::string::npos);
  }
}

TEST_CASE("run config: values, overrides and validation") {
  const auto dir = scratch_dir("cfg");
  auto c = tiny_config(dir);
  CHECK(c.model.layers == 2);
  CHECK(c.model.attn == AttnKind::Window);
  CHECK(c.output_dir == dir / "out");
  CHECK(c.extend.lambda == std::vector<double>{1.1, 1.2});
  CHECK(c.bank_length() == 48);
  CHECK(c.eval_length() == 32);
  CHECK_NOTHROW(validate(c));

  apply_override(c, "train.seed=9");
  CHECK(c.train.seed == 9);
  CHECK_THROWS_AS(apply_override(c, "train.nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "bogus.seed=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "train.steps=-3"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "noequals"), ConfigError);

  auto bad = tiny_config(dir);
  bad.extend.lambda.clear();
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = tiny_config(dir);
  bad.data.paths = {dir / "does-not-exist.txt"};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = tiny_config(dir);
  bad.analysis.which = {"histogram"};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = tiny_config(dir);
  bad.extend.methods = {"yarn"};
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = tiny_config(dir);
  bad.model.heads = 3;
  CHECK_THROWS_AS(validate(bad), ConfigError);

  CHECK_THROWS_AS(run_config_from_ini(parse_ini("[modle]\nlayers = 2\n")), ConfigError);
  CHECK_THROWS_AS(run_config_from_ini(parse_ini("[model]\nlayer = 2\n")), ConfigError);
  CHECK_THROWS_AS(run_config_from_ini(parse_ini("[model]\npe = sinusoid\n")), ConfigError);
}

TEST_CASE("canonical text ignores spelling and tracks values") {
  const auto dir = scratch_dir("canon");
  auto a = tiny_config(dir);
  auto b = run_config_from_ini(parse_ini(std::string(kTiny) + "\n"), dir);
  b.train.lr = a.train.lr;  // same value, set explicitly
  CHECK(canonical_text(a) == canonical_text(b));
  b.train.seed = 2;
  CHECK(canonical_section(a, "train") != canonical_section(b, "train"));
  CHECK(canonical_section(a, "model") == canonical_section(b, "model"));
}

TEST_CASE("sha256 matches the published test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const auto dir = scratch_dir("sha");
  std::ofstream(dir / "f", std::ios::binary) << "abc";
  CHECK(sha256_file(dir / "f") == sha256_hex("abc"));
}

TEST_CASE("cache directory precedence") {
  const auto dir = scratch_dir("cachedir");
  auto c = tiny_config(dir);
  CHECK(resolve_cache_dir(c) == dir / "out" / "cache");
  c.cache_dir = dir / "c2";
  CHECK(resolve_cache_dir(c) == dir / "c2");
  setenv("PVLAB_CACHE", (dir / "env").c_str(), 1);
  CHECK(resolve_cache_dir(c) == dir / "env");
  unsetenv("PVLAB_CACHE");
}

TEST_CASE("pipeline runs end to end, reruns from cache and reproduces CSVs byte for byte") {
  const auto dir = scratch_dir("e2e");
  const auto cfg = tiny_config(dir);
  const auto first = run_experiment(cfg);
  REQUIRE_FALSE(first.failed_stage.has_value());
  CHECK(first.csv_files.size() == 5);  // three analyses + extension summary and ratios
  CHECK(first.svg_files.size() == 4);
  for (const auto& s : first.stages) CHECK_FALSE(s.cache_hit);
  std::vector<std::string> contents;
  for (const auto& f : first.csv_files) contents.push_back(slurp(f));

  const auto second = run_experiment(cfg);
  REQUIRE_FALSE(second.failed_stage.has_value());
  for (const auto& s : second.stages) {
    if (s.name == "train" || s.name == "bank" || s.name == "decompose") CHECK(s.cache_hit);
  }
  REQUIRE(second.csv_files == first.csv_files);
  for (std::size_t i = 0; i < contents.size(); ++i) CHECK(slurp(second.csv_files[i]) == contents[i]);

  // File names follow <experiment>_<model>_<params> and headers are fixed.
  CHECK(first.csv_files[0].filename() == "pca_tiny_all.csv");
  CHECK(parse_csv(contents[0])[0] == std::vector<std::string>{"layer", "position", "pc1", "pc2"});
  CHECK(first.csv_files[1].filename() == "distinct-count_tiny_all.csv");
  CHECK(parse_csv(contents[1])[0] ==
        std::vector<std::string>{"layer", "distinct_count", "trf", "reference", "saturated"});
  CHECK(first.csv_files[3].filename() == "extend_tiny_T32.csv");
  const auto ext = parse_csv(contents[3]);
  CHECK(ext[0] == std::vector<std::string>{"method", "params", "eval_length", "ppl"});
  CHECK(ext.size() == 1 + 1 + 2 + 2);  // header, none, two lambdas, awe x two lambdas

  const auto manifest = nlohmann::json::parse(slurp(first.manifest));
  CHECK(manifest["config_hash"] == first.config_hash);
  CHECK(manifest["failed_stage"].is_null());
  CHECK(manifest["seeds"]["train"] == 1);
  CHECK(manifest["csv"].size() == 5);
}

TEST_CASE("changing the corpus or a seed invalidates downstream caches only") {
  const auto dir = scratch_dir("invalidate");
  auto cfg = tiny_config(dir);
  cfg.analysis.which.clear();
  cfg.extend.methods.clear();
  Pipeline base(cfg);
  const auto ckpt = base.train(true);
  const auto bank = base.bank(true);

  auto reseeded = cfg;
  reseeded.data.sampler_seed = 99;
  Pipeline p2(reseeded);
  CHECK(p2.train(false) == ckpt);  // training does not read the sampler seed
  CHECK_THROWS_AS(p2.bank(false), ValidationError);

  auto other = cfg;
  other.data.synthetic_seed = 2;
  Pipeline p3(other);
  CHECK_THROWS_AS(p3.train(false), ValidationError);
  CHECK_THROWS_AS(p3.bank(false), ValidationError);
  CHECK(Pipeline(cfg).bank(false) == bank);

  // Mutating a corpus file changes every downstream key.
  std::ofstream(dir / "doc.txt") << synthetic_text(30000, 5);
  auto filecfg = cfg;
  filecfg.data.paths = {dir / "doc.txt"};
  Pipeline p4(filecfg);
  const auto k1 = p4.train(true);
  std::ofstream(dir / "doc.txt", std::ios::app) << " more";
  Pipeline p5(filecfg);
  CHECK_THROWS_AS(p5.train(false), ValidationError);
  CHECK(fs::exists(k1));
}

TEST_CASE("empty experiment lists give a manifest and nothing else") {
  const auto dir = scratch_dir("empty");
  auto cfg = tiny_config(dir);
  cfg.analysis.which.clear();
  cfg.extend.methods.clear();
  const auto rep = run_experiment(cfg);
  CHECK_FALSE(rep.failed_stage.has_value());
  CHECK(rep.csv_files.empty());
  CHECK(rep.svg_files.empty());
  CHECK(rep.stages.empty());
  CHECK(fs::exists(rep.manifest));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(cfg.output_dir)) files += e.is_regular_file();
  CHECK(files == 1);
}

TEST_CASE("a failing stage is marked and earlier outputs are kept") {
  const auto dir = scratch_dir("fail");
  auto cfg = tiny_config(dir);
  cfg.model.attn = AttnKind::Full;  // distinct-count needs window attention
  cfg.model.window = 0;
  cfg.analysis.which = {"pca", "distinct-count", "extrapolation"};
  cfg.extend.methods.clear();
  const auto rep = run_experiment(cfg);
  REQUIRE(rep.failed_stage.has_value());
  CHECK(*rep.failed_stage == "analyze:distinct-count");
  CHECK(rep.csv_files.size() == 1);
  CHECK(fs::exists(rep.csv_files[0]));
  const auto manifest = nlohmann::json::parse(slurp(rep.manifest));
  CHECK(manifest["failed_stage"] == "analyze:distinct-count");
  CHECK(manifest["stages"].back()["status"] == "failed");
}

TEST_CASE("stages refuse to run without their upstream artifacts") {
  const auto dir = scratch_dir("deps");
  auto cfg = tiny_config(dir);
  Pipeline p(cfg);
  try {
    p.extend_eval({ExtensionPoint{}});
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("decomposition") != std::string::npos);
  }
  CHECK_THROWS_AS(p.analyze("pca"), ValidationError);
  CHECK_THROWS_AS(p.decompose(true), ValidationError);
  p.train(true);
  CHECK_THROWS_AS(p.decompose(true), ValidationError);
  p.bank(true);
  CHECK_NOTHROW(p.decompose(true));
  const auto files = p.analyze("distinct-count", 2);
  REQUIRE(files.size() == 2);
  CHECK(files[0].filename() == "distinct-count_tiny_layer2.csv");
  CHECK(files[1].filename() == "distinct-count_tiny_layer2.svg");
  CHECK(parse_csv(slurp(files[0])).size() == 2);
}

TEST_CASE("extension grid expands only the parameters each method reads") {
  const auto dir = scratch_dir("grid");
  auto cfg = tiny_config(dir);
  cfg.extend.methods = {"initial-scaling", "pvr", "dynamic-ntk"};
  cfg.extend.layer = {1, 2};
  cfg.extend.r = {2, 3};
  cfg.extend.alpha = {1.0};
  Pipeline p(cfg);
  const auto grid = p.extension_grid();
  REQUIRE(grid.size() == 1 + 2 + 4 + 1);
  CHECK(grid[0].method == ExtensionMethod::None);
  CHECK(describe(grid[1]) == "lambda=1.1");
  CHECK(describe(grid[3]) == "layer=1;r=2;alpha=1");
  CHECK(grid.back().target == 32);
}

TEST_CASE("shipped run configurations load and validate") {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(PVLAB_RUNS_DIR)) {
    if (e.path().extension() != ".cfg") continue;
    CAPTURE(e.path().string());
    RunConfig cfg;
    CHECK_NOTHROW(cfg = load_run_config(e.path()));
    CHECK_NOTHROW(validate(cfg));
    ++n;
  }
  CHECK(n >= 13);
}
