#include <algorithm>
#include <cmath>
#include <string>

#include "pvlab/errors.hpp"
#include "pvlab/model.hpp"

namespace pvlab {

std::vector<double> token_nll(const Matrix& logits, std::span<const Token> tokens) {
  if (logits.rows() != tokens.size()) throw ShapeError("token_nll: logits/tokens length mismatch");
  std::vector<double> out;
  if (tokens.size() < 2) return out;
  out.reserve(tokens.size() - 1);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    auto row = logits.row(i);
    double mx = row[0];
    for (float v : row) mx = std::max(mx, static_cast<double>(v));
    double denom = 0.0;
    for (float v : row) denom += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(denom);
    out.push_back(lse - static_cast<double>(row[static_cast<std::size_t>(tokens[i + 1])]));
  }
  return out;
}

PerplexityResult perplexity(const TransformerModel& model, std::span<const Token> tokens,
                            const PerplexityOptions& options,
                            const std::vector<InterventionSpec>& interventions,
                            const ForwardHooks& hooks) {
  if (tokens.size() < 2) throw ShapeError("perplexity: need at least 2 tokens");
  const std::size_t requested = options.eval_window == 0 ? model.config.context : options.eval_window;
  const std::size_t window = std::min(tokens.size(), requested);
  if (window < 2) throw ConfigError("perplexity: evaluation window must cover at least 2 tokens");
  std::int64_t stride = options.stride.value_or(static_cast<std::int64_t>(std::max<std::size_t>(1, window / 2)));
  if (stride <= 0) throw ConfigError("perplexity: stride must be positive, got " + std::to_string(stride));
  if (static_cast<std::size_t>(stride) > window) {
    throw ConfigError("perplexity: stride " + std::to_string(stride) + " exceeds window " + std::to_string(window));
  }

  CaptureFlags capture;
  capture.layer_outputs = false;
  capture.logits = true;

  PerplexityResult result;
  std::size_t prev_end = 0;
  for (std::size_t begin = 0;; begin += static_cast<std::size_t>(stride)) {
    const std::size_t end = std::min(begin + window, tokens.size());
    const auto chunk = tokens.subspan(begin, end - begin);
    const auto trace = forward(model, chunk, interventions, capture, hooks);
    const auto nll = token_nll(trace.logits, chunk);
    // nll[i] scores chunk[i + 1], i.e. stream index begin + i + 1.
    for (std::size_t j = std::max(prev_end, begin + 1); j < end; ++j) {
      result.nll.push_back(nll[j - begin - 1]);
      result.window_position.push_back(j - begin + 1);
    }
    prev_end = end;
    if (end == tokens.size()) break;
  }
  double sum = 0.0;
  for (double v : result.nll) sum += v;
  result.mean_nll = sum / static_cast<double>(result.nll.size());
  result.ppl = std::exp(result.mean_nll);
  return result;
}

}  // namespace pvlab
