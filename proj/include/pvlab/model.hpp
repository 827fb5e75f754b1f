#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pvlab/numerics.hpp"
#include "pvlab/positional.hpp"

namespace pvlab {

using Token = std::int32_t;

enum class PeKind { NoPE, RoPE, ALiBi };
enum class AttnKind { Full, Window };

std::string to_string(PeKind kind);
std::string to_string(AttnKind kind);
PeKind parse_pe_kind(const std::string& text);
AttnKind parse_attn_kind(const std::string& text);

struct ModelConfig {
  std::size_t layers = 8;
  std::size_t heads = 8;
  std::size_t dim = 256;
  std::size_t ffn_dim = 1024;
  std::size_t vocab = 4096;
  std::size_t context = 256;
  PeKind pe = PeKind::NoPE;
  double rope_base = 10000.0;
  AttnKind attn = AttnKind::Full;
  std::size_t window = 0;
  bool tie_embeddings = false;
  float norm_eps = 1e-5f;

  std::size_t head_dim() const { return dim / heads; }
  // Throws ConfigError.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Matrix attn_norm;  // 1 x D
  Matrix wq, wk, wv, wo;  // D x D, row-vector convention: x * W
  Matrix ffn_norm;  // 1 x D
  Matrix w_gate, w_up;  // D x F
  Matrix w_down;  // F x D
};

struct TransformerModel {
  ModelConfig config;
  Matrix embedding;  // V x D
  std::vector<LayerWeights> layers;
  Matrix final_norm;  // 1 x D
  Matrix unembedding;  // D x V

  // Stable, ordered list of every parameter tensor. With tied embeddings
  // the unembedding is omitted (it mirrors embedding^T).
  std::vector<std::pair<std::string, Matrix*>> parameters();
  std::vector<std::pair<std::string, const Matrix*>> parameters() const;
};

TransformerModel build_model(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Interventions

enum class InterventionTarget { AttentionValue, KeyAndQuery, AttentionLogits, LayerOutput };
enum class Component { Whole, PositionalVector, PositionalBasis, SemanticVector };

struct RemoveAction {};
struct ScaleAction {
  float factor = 1.0f;
};
// Payload rows map to positions [range.begin, range.end). Width must be D
// for layer outputs; for per-head streams either D (heads concatenated) or
// D_H (applied to every head).
struct ReplaceAction {
  std::shared_ptr<const Matrix> payload;
};
using InterventionAction = std::variant<RemoveAction, ScaleAction, ReplaceAction>;

// Half-open [begin, end) with 1-based indices. begin == end is empty.
struct IndexRange {
  std::size_t begin = 1;
  std::size_t end = 1;

  bool empty() const { return end <= begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
};

struct InterventionSpec {
  InterventionTarget target = InterventionTarget::LayerOutput;
  Component component = Component::Whole;
  InterventionAction action = RemoveAction{};
  IndexRange positions;
  IndexRange layers;
  std::shared_ptr<const DecompositionSet> decomposition;
};

// ---------------------------------------------------------------------------
// Forward pass

struct CaptureFlags {
  bool layer_outputs = true;
  bool qkv = false;
  bool attention = false;
  bool logits = true;
};

struct ForwardTrace {
  std::vector<Matrix> layer_outputs;  // [layer] T x D
  std::vector<std::vector<Matrix>> queries;  // [layer][head] T x D_H, pre-rotation
  std::vector<std::vector<Matrix>> keys;
  std::vector<std::vector<Matrix>> values;
  std::vector<std::vector<Matrix>> attention;  // [layer][head] T x T
  Matrix logits;  // T x V
};

// Attention-side adjustments used by the context-window extension methods.
// Defaults leave the model untouched.
struct AttentionAdjust {
  double logit_scale = 1.0;
  double initial_scale = 1.0;
  std::size_t initial_k = 4;
  std::optional<std::size_t> window;
  // Maps the current sequence length to the rotary base.
  std::function<double(std::size_t)> rope_base;
};

// Mutable view over a T x D block of double-precision hidden states.
struct HiddenRows {
  double* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::span<double> row(std::size_t r) const { return {data + r * cols, cols}; }
};

// Called on a layer's output before it feeds the next layer. Layer is
// 1-based.
using LayerOutputHook = std::function<void(std::size_t layer, HiddenRows hidden)>;

struct ForwardHooks {
  AttentionAdjust attention;
  LayerOutputHook layer_output;
};

ForwardTrace forward(const TransformerModel& model, std::span<const Token> tokens,
                     const std::vector<InterventionSpec>& interventions = {},
                     const CaptureFlags& capture = {}, const ForwardHooks& hooks = {});

double alibi_slope(std::size_t head, std::size_t heads);
double effective_rope_base(const ModelConfig& config, const AttentionAdjust& adjust,
                           std::size_t seq_len);

// Pre-softmax logits of one head, with rotation, bias, scaling and masking
// applied exactly as in the forward pass. Masked entries are -inf.
// Queries and keys are pre-rotation, T x D_H. head is 0-based.
Matrix attention_logits(const ModelConfig& config, std::size_t head, const Matrix& queries,
                        const Matrix& keys, const AttentionAdjust& adjust = {});
Matrix attention_probabilities(const ModelConfig& config, std::size_t head,
                               const Matrix& queries, const Matrix& keys,
                               const AttentionAdjust& adjust = {});

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch = 16;
  std::size_t warmup = 100;
  double lr = 3e-3;
  double min_lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  TransformerModel model;
  std::vector<double> loss_curve;
};

using TrainProgress = std::function<void(std::size_t step, double loss, double lr)>;

double learning_rate(const TrainConfig& config, std::size_t step);

// Mean next-token cross-entropy over sequences of C+1 tokens; fills
// gradients (same order as parameters()) when non-null.
double loss_and_gradients(const TransformerModel& model,
                          const std::vector<std::span<const Token>>& sequences,
                          std::vector<Matrix>* gradients);

TrainResult train(TransformerModel model, std::span<const Token> corpus, const TrainConfig& config,
                  const TrainProgress& progress = {});

// ---------------------------------------------------------------------------
// Perplexity

struct PerplexityOptions {
  std::size_t eval_window = 0;  // 0 selects C
  std::optional<std::int64_t> stride;  // defaults to eval_window / 2
};

struct PerplexityResult {
  std::vector<double> nll;  // one per scored token, stream order
  std::vector<std::size_t> window_position;  // 1-based position inside its window
  double mean_nll = 0.0;
  double ppl = 0.0;
};

PerplexityResult perplexity(const TransformerModel& model, std::span<const Token> tokens,
                            const PerplexityOptions& options = {},
                            const std::vector<InterventionSpec>& interventions = {},
                            const ForwardHooks& hooks = {});

// Per-token negative log-likelihood of tokens[1..T-1] given the prefix,
// from logits of a single forward pass.
std::vector<double> token_nll(const Matrix& logits, std::span<const Token> tokens);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path);
TransformerModel load_checkpoint(const std::filesystem::path& path);

}  // namespace pvlab
