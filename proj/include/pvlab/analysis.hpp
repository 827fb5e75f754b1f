#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pvlab/decompose.hpp"
#include "pvlab/model.hpp"
#include "pvlab/positional.hpp"

namespace pvlab {

// ---------------------------------------------------------------------------
// PCA of positional vectors

struct PcaPositions {
  std::size_t layer = 0;
  Matrix coords;  // T x k, row t-1 is position t
  std::vector<float> explained_variance;
};

// Throws ConvergenceError when every positional vector is identical.
PcaPositions pca_positions(const PositionalDecomposition& dec, std::size_t layer, std::size_t k = 2);

// Minimum pairwise distance among positions [1, initial] against the
// given percentile of pairwise distances among positions >= late_from.
struct PcaSeparation {
  double initial_min = 0.0;
  double late_percentile = 0.0;
};
PcaSeparation pca_separation(const Matrix& coords, std::size_t initial, std::size_t late_from,
                             double percentile = 0.9);

// Coefficient of variation of nearest-neighbour distances among rows.
double nearest_neighbor_cv(const Matrix& coords);

// ---------------------------------------------------------------------------
// Distinct positional vectors under window attention

struct DistinctCountRow {
  std::size_t layer = 0;
  std::size_t distinct_count = 0;
  std::size_t trf = 0;  // min(W * layer, T)
  std::size_t reference = 0;  // 1-based reference position
  bool saturated = false;  // no reference outside the receptive field
};

struct DistinctCountCurve {
  double threshold = 0.99;
  std::vector<DistinctCountRow> rows;
};

// Reference position defaults to min(W*L + W/2, T) with L the number of
// layers in the decomposition.
DistinctCountRow distinct_count(const PositionalDecomposition& dec, std::size_t layer, std::size_t window,
                                double threshold = 0.99, std::optional<std::size_t> reference = {});
DistinctCountCurve distinct_count_curve(const PositionalDecomposition& dec, std::size_t window,
                                        double threshold = 0.99);

// ---------------------------------------------------------------------------
// Ablation of value components

enum class AblationVariant { Original, WoValue, WoPositionalVector, WoPositionalBasis, WoSemanticVector };
std::string to_string(AblationVariant v);

struct AblationGroup {
  std::string name;
  IndexRange positions;
};

struct AblationOptions {
  std::vector<AblationGroup> groups;  // empty: initial [1,5) and secondary [5, C/8+1)
  std::vector<AblationVariant> variants{AblationVariant::WoValue, AblationVariant::WoPositionalVector,
                                        AblationVariant::WoPositionalBasis,
                                        AblationVariant::WoSemanticVector};
  std::optional<IndexRange> layers;  // default [2, L+1)
  std::size_t late_from = 0;  // 0: C/8 + 1
  std::size_t samples = 64;
  std::uint64_t seed = 0;
};

struct AblationResult {
  AblationVariant variant = AblationVariant::Original;
  std::string group;
  IndexRange range;
  double sim = 1.0;
  double ppl = 0.0;
};

// First row is the unmodified model. Value decompositions must cover every
// head; missing streams raise CapabilityError.
std::vector<AblationResult> ablation_study(const TransformerModel& model,
                                           std::shared_ptr<const DecompositionSet> values,
                                           std::span<const Token> eval_corpus,
                                           const AblationOptions& options = {});

// ---------------------------------------------------------------------------
// Attention maps from decomposed queries and keys

enum class AttentionSetting { Original, WoSemanticVector, WoPositionalVector, WoPositionalBasis };
std::string to_string(AttentionSetting s);

struct AttentionProfile {
  AttentionSetting setting = AttentionSetting::Original;
  std::size_t layer = 0;
  std::optional<std::size_t> head;  // empty: averaged over heads
  Matrix map;  // n x n averaged attention
  double sink_strength = 0.0;
  double decay_slope = 0.0;
  double uniform_baseline = 0.0;  // 4 / n
};

struct AttentionMapOptions {
  std::size_t first_n = 0;  // 0: whole bank length
  std::size_t sink_keys = 4;
  std::size_t sink_queries_from = 9;  // queries > 8
};

// Banks must retain per-sample queries and keys; decompositions must hold
// the matching streams when a component is stripped.
AttentionProfile attention_component_maps(const ModelConfig& config, const BankSet& banks,
                                          const DecompositionSet& decompositions, std::size_t layer,
                                          std::optional<std::size_t> head, AttentionSetting setting,
                                          const AttentionMapOptions& options = {});

// Mean key mass on keys [1, sink_keys] from queries >= sink_queries_from.
double sink_strength(const Matrix& map, std::size_t sink_keys = 4, std::size_t queries_from = 9);
// Within-row least-squares slope of log attention against distance over
// distances [8, n/2], keys beyond the sink columns.
double decay_slope(const Matrix& map, std::size_t sink_keys = 4);

// ---------------------------------------------------------------------------
// Beyond the context window

// Mean next-token NLL per position over `samples` windows of `length`
// tokens; entry t-1 scores the prediction of token t+1 from positions 1..t.
std::vector<double> position_nll(const TransformerModel& model, std::span<const Token> corpus,
                                 std::size_t length, std::size_t samples, std::uint64_t seed,
                                 const std::vector<InterventionSpec>& interventions = {},
                                 const ForwardHooks& hooks = {});

struct ExtrapolationCurves {
  std::size_t context = 0;
  std::vector<double> ppl;  // per position
  std::vector<double> max_sim;  // per position, mean over the chosen layers
  std::vector<std::vector<double>> max_sim_by_layer;  // [layer-1][position]
  std::vector<std::size_t> layers;  // layers included in max_sim
  double within_ppl = 0.0;  // exp(mean NLL) over positions <= C
  double beyond_ppl = 0.0;  // over positions > C
  double beyond_max_sim = 0.0;  // mean over positions > C
};

// layers empty: all layers >= 2 (layer 1 when the model has one layer).
ExtrapolationCurves extrapolation_curves(const PositionalDecomposition& dec,
                                         std::span<const double> nll_by_position, std::size_t context,
                                         std::vector<std::size_t> layers = {});

// Cosine matrix between unembedded last-layer positional vectors.
Matrix ood_logit_similarity(const PositionalDecomposition& dec, const TransformerModel& model,
                            bool apply_final_norm = true);

// ---------------------------------------------------------------------------
// Effective interpolation ratio

struct InterpolationRatio {
  double ratio = 0.0;
  bool approximate = false;  // fallback used, no exact hit on C
  bool matched = false;  // false when nothing maps near C
  std::vector<std::size_t> mapping;  // f(t) for t = 1..T', 1-based
};

InterpolationRatio effective_interpolation_ratio(const Matrix& p_orig, const Matrix& p_scaled,
                                                 std::size_t context, std::size_t epsilon = 2);
InterpolationRatio effective_interpolation_ratio(const PositionalDecomposition& orig,
                                                 const PositionalDecomposition& scaled, std::size_t layer,
                                                 std::size_t context);

// Mean over positions of max cosine against the original vectors, averaged
// over the given layers.
double interpolation_similarity(const PositionalDecomposition& orig, const PositionalDecomposition& scaled,
                                const std::vector<std::size_t>& layers);

// ---------------------------------------------------------------------------
// Synthetic single-head preference experiment

struct SyntheticOptions {
  std::size_t heads = 2;
  std::size_t dim = 16;
  std::size_t vocab = 1024;
  std::size_t n_seqs = 2000;
  std::size_t length = 1024;
  PeKind pe = PeKind::NoPE;
  double rope_frequency = 1e-4;
  bool uniform_attention = false;
  std::uint64_t seed = 0;
  // Seed of the sequence stream; empty derives it from seed. The vocabulary
  // table always follows seed.
  std::optional<std::uint64_t> sequence_seed;
  // 1-based positions to report; empty: 1..32, a log-spaced tail and length.
  std::vector<std::size_t> positions;
};

struct SyntheticCurve {
  std::vector<std::size_t> positions;
  std::vector<double> mean;  // averaged first output element
  std::vector<double> std_error;
  double vocab_mean = 0.0;  // mean of the first embedding dimension
};

SyntheticCurve synthetic_preference_experiment(const SyntheticOptions& options);

struct SyntheticHead {
  Matrix embedding;  // V x D: column 0 ~ N(0,1), column 1 == 1
  Matrix wq, wk, wv;  // D_H x D, as written in the construction
};
SyntheticHead synthetic_head(const SyntheticOptions& options);

std::vector<std::size_t> default_synthetic_positions(std::size_t length);

}  // namespace pvlab
