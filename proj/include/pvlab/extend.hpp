#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pvlab/analysis.hpp"
#include "pvlab/model.hpp"
#include "pvlab/positional.hpp"

namespace pvlab {

enum class ExtensionMethod {
  None,
  AttentionScaling,
  InitialScaling,
  DynamicNTK,
  PositionalVectorReplacement,
  AttentionWindowExtension,
};

std::string to_string(ExtensionMethod m);
ExtensionMethod parse_extension_method(const std::string& text);

struct ExtensionSpec {
  ExtensionMethod method = ExtensionMethod::None;
  double lambda = 1.0;  // scaling methods and AWE
  std::size_t initial_k = 4;  // initial scaling and PVR
  std::size_t target_len = 0;  // dynamic NTK
  std::size_t layer = 4;  // PVR, 1-based
  double r = 1.0;  // PVR and AWE
  double alpha = 1.0;  // PVR
  std::shared_ptr<const PositionalDecomposition> decomposition;  // PVR, layer-output stream
  std::string note;
};

// Short human-readable form, e.g. "pvr(layer=2,r=2,alpha=1.1)".
std::string describe(const ExtensionSpec& spec);

// A model plus the hooks that realise one extension method. Holds a
// reference to the model; the model must outlive the wrapper.
class ExtendedModel {
 public:
  ExtendedModel(const TransformerModel& model, ExtensionSpec spec);

  const TransformerModel& model() const { return *model_; }
  const ExtensionSpec& spec() const { return spec_; }
  const ForwardHooks& hooks() const { return hooks_; }
  // Longest input the wrapper accepts; empty when unbounded.
  std::optional<std::size_t> max_length() const { return max_length_; }
  // Interpolated positional vectors used by PVR (rows are positions
  // initial_k+1 .. max_length), empty otherwise.
  const Matrix& interpolated() const { return interpolated_; }

  ForwardTrace forward(std::span<const Token> tokens, const std::vector<InterventionSpec>& interventions = {},
                       const CaptureFlags& capture = {}) const;
  PerplexityResult perplexity(std::span<const Token> tokens, const PerplexityOptions& options = {},
                              const std::vector<InterventionSpec>& interventions = {}) const;

 private:
  const TransformerModel* model_;
  ExtensionSpec spec_;
  ForwardHooks hooks_;
  std::optional<std::size_t> max_length_;
  Matrix interpolated_;
};

ExtendedModel attention_scaling(const TransformerModel& model, double lambda);
ExtendedModel initial_scaling(const TransformerModel& model, double lambda, std::size_t initial_k = 4);
ExtendedModel dynamic_ntk(const TransformerModel& model, std::size_t target_len);
ExtendedModel positional_vector_replacement(const TransformerModel& model,
                                            std::shared_ptr<const PositionalDecomposition> decomposition,
                                            std::size_t layer, double r, double alpha,
                                            std::size_t initial_k = 4);
ExtendedModel attention_window_extension(const TransformerModel& model, double r, double lambda);

// Rotary base the dynamic-NTK rule selects for a sequence of seq_len tokens.
double dynamic_ntk_base(double base, std::size_t head_dim, std::size_t context, std::size_t target_len,
                        std::size_t seq_len);

// exp(mean NLL) over N disjoint windows of `length` tokens.
double windowed_ppl(const ExtendedModel& model, std::span<const Token> corpus, std::size_t length,
                    std::size_t samples, std::uint64_t seed);

struct LayerSweepPoint {
  std::size_t layer = 0;
  double ppl = 0.0;
};

struct LayerSweep {
  std::vector<LayerSweepPoint> points;  // in candidate order
  std::size_t best_layer = 0;
};

LayerSweep replacement_layer_sweep(const TransformerModel& model,
                                   std::shared_ptr<const PositionalDecomposition> decomposition,
                                   const std::vector<std::size_t>& candidates, double r, double alpha,
                                   std::span<const Token> eval_corpus, std::size_t length, std::size_t samples,
                                   std::uint64_t seed);

// Effective interpolation ratio of each listed layer.
std::vector<InterpolationRatio> ratio_per_layer(const PositionalDecomposition& orig,
                                                const PositionalDecomposition& extended,
                                                const std::vector<std::size_t>& layers, std::size_t context);

}  // namespace pvlab
