// Command-line front end: one subcommand per pipeline stage.
//   exit 0 success, 1 validation / usage error, 2 runtime error

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pvlab/config.hpp"
#include "pvlab/errors.hpp"
#include "pvlab/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.set, "override, section.key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "training seed ([train] seed)");
  cmd->add_option("--output", c.output, "output directory ([run] output_dir)");
}

pvlab::RunConfig load(const Common& c) {
  auto cfg = pvlab::load_run_config(c.config);
  for (const auto& s : c.set) pvlab::apply_override(cfg, s);
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.output) {
    // Keep reading the cache the config points at.
    if (!cfg.cache_dir) cfg.cache_dir = cfg.output_dir / "cache";
    cfg.output_dir = *c.output;
  }
  return cfg;
}

void say(const std::string& what, const std::filesystem::path& path) { std::cout << what << ' ' << path.string() << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pvlab: positional-vector laboratory"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common common;
  std::optional<std::size_t> steps, samples, length, layer, target;
  std::optional<double> lambda, r, alpha;
  std::string which, method;

  auto* train = app.add_subcommand("train", "train (or fetch from cache) the configured model");
  add_common(train, common);
  train->add_option("--steps", steps, "optimizer steps");

  auto* bank = app.add_subcommand("bank", "collect hidden-state banks from a trained model");
  add_common(bank, common);
  bank->add_option("--samples", samples, "number of windows N");
  bank->add_option("--length", length, "window length T");

  auto* decompose = app.add_subcommand("decompose", "decompose a cached bank into positional vectors");
  add_common(decompose, common);
  decompose->add_option("--samples", samples, "number of windows N");
  decompose->add_option("--length", length, "window length T");

  auto* analyze = app.add_subcommand("analyze", "run one analysis over the cached decomposition");
  add_common(analyze, common);
  analyze->add_option("--which", which, "analysis name")->required()->check(CLI::IsMember(pvlab::analysis_names()));
  analyze->add_option("--layer", layer, "restrict to one layer");

  auto* extend = app.add_subcommand("extend-eval", "evaluate one context-window extension");
  add_common(extend, common);
  extend->add_option("--method", method, "none, attention-scaling, initial-scaling, dynamic-ntk, pvr, awe")
      ->required();
  extend->add_option("--lambda", lambda, "logit scale");
  extend->add_option("--r", r, "extension ratio");
  extend->add_option("--alpha", alpha, "replacement scale");
  extend->add_option("--layer", layer, "replacement layer");
  extend->add_option("--target", target, "dynamic-NTK target length");
  extend->add_option("--length", length, "evaluation length");

  auto* report = app.add_subcommand("report", "run the whole configured pipeline and write a manifest");
  add_common(report, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto cfg = load(common);
    if (steps) cfg.train.steps = *steps;
    if (samples) cfg.data.samples = *samples;
    if (*bank || *decompose) {
      if (length) cfg.data.length = *length;
    }
    if (*extend && length) cfg.extend.eval_length = *length;

    if (*report) {
      const auto rep = pvlab::run_experiment(cfg);
      for (const auto& f : rep.csv_files) say("csv", f);
      for (const auto& f : rep.svg_files) say("svg", f);
      say("manifest", rep.manifest);
      if (rep.failed_stage) {
        std::cerr << "error: stage " << *rep.failed_stage << " failed: " << rep.error << '\n';
        return 2;
      }
      return 0;
    }

    pvlab::Pipeline p(cfg);
    if (*train) {
      say("checkpoint", p.train(true));
    } else if (*bank) {
      say("bank", p.bank(true));
    } else if (*decompose) {
      say("decomposition", p.decompose(true));
    } else if (*analyze) {
      const auto files = p.analyze(which, layer);
      say("csv", files[0]);
      say("svg", files[1]);
    } else if (*extend) {
      pvlab::ExtensionPoint pt;
      const auto& x = cfg.extend;
      pt.method = pvlab::parse_extension_method(method);
      pt.lambda = lambda.value_or(x.lambda.front());
      pt.r = r.value_or(x.r.front());
      pt.alpha = alpha.value_or(x.alpha.front());
      pt.layer = layer.value_or(x.layer.front());
      pt.target = target.value_or(x.target.front());
      if (pt.target == 0) pt.target = cfg.eval_length();
      std::vector<pvlab::ExtensionPoint> points{pvlab::ExtensionPoint{}};
      if (pt.method != pvlab::ExtensionMethod::None) points.push_back(pt);
      const auto files = p.extend_eval(points);
      say("csv", files[0]);
      say("csv", files[1]);
      say("svg", files[2]);
    }
    for (const auto& s : p.stages()) {
      if (s.cache_hit) std::cerr << "cache hit: " << s.name << ' ' << s.artifact.string() << '\n';
    }
    return 0;
  } catch (const pvlab::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const pvlab::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
