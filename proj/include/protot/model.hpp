#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protot/common.hpp"
#include "protot/mixer.hpp"

namespace protot {

/// Decoder hyper-parameters. JSON keys follow the short names (h, L, R, ...).
struct ModelConfig {
  int hidden = 256;
  int layers = 6;
  int prototypes = 32;
  int ctx = 256;
  int vocab_size = 16000;
  double ffn_ratio = 2.7;
  double dropout = 0.1;
  std::vector<int> conv_layers{0, 1};
  bool tie_embeddings = true;
  double rms_eps = 1e-6;

  int value_dim() const { return hidden / 2; }
  int ffn_dim() const;
  bool has_conv(int layer) const;
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are ignored so a combined
  /// model+training config file can be passed as is.
  static ModelConfig from_json(const nlohmann::json& j);
};

/// SwiGLU feed-forward: down(silu(gate x) * up x).
template <typename Scalar>
struct FfnParams {
  Matrix<Scalar> gate;  // ffn x h
  Matrix<Scalar> up;    // ffn x h
  Matrix<Scalar> down;  // h x ffn
};

template <typename Scalar>
struct Block {
  Vector<Scalar> mixer_norm;
  MixerParams<Scalar> mixer;
  Vector<Scalar> ffn_norm;
  FfnParams<Scalar> ffn;
};

struct ParameterCount {
  std::int64_t unique = 0;
  /// Sum over modules with a tied LM head counted as its own module.
  std::int64_t per_module = 0;
};

template <typename Scalar>
struct LanguageModel {
  ModelConfig config;
  Matrix<Scalar> embedding;  // vocab x h, also the LM head when tied
  Matrix<Scalar> head;       // vocab x h, empty when tied
  std::vector<Block<Scalar>> blocks;
  Vector<Scalar> final_norm;

  static LanguageModel init(const ModelConfig& config, Rng& rng);
  LanguageModel zeros_like() const;
  const Matrix<Scalar>& output_weights() const { return config.tie_embeddings ? embedding : head; }
  ParameterCount parameter_count() const;

  /// Every tensor as (name, flat span, decay group, shape), in a fixed order.
  std::vector<ParamView<Scalar>> parameters();

  template <typename Other>
  LanguageModel<Other> cast() const;
};

/// Per-layer runtime edits; empty vector = none.
template <typename Scalar>
using LayerControls = std::vector<MixerControls<Scalar>>;

template <typename Scalar>
struct ForwardOptions {
  const NoDeduce<LayerControls<Scalar>>* controls = nullptr;
  bool capture = false;
  /// Training mode: dropout masks are drawn from this generator.
  Rng* dropout_rng = nullptr;
};

template <typename Scalar>
struct ForwardResult {
  Matrix<Scalar> logits;  // T x vocab
  std::vector<GateWeights<Scalar>> gates;
};

template <typename Scalar>
struct ModelCache;

/// Next-token scores for every prefix of `tokens`.
template <typename Scalar>
ForwardResult<Scalar> forward(const LanguageModel<Scalar>& model, std::span<const TokenId> tokens,
                              const ForwardOptions<Scalar>& options = {});

/// Mean next-token cross-entropy (nats) over positions 0..T-2.
template <typename Scalar>
double loss(const LanguageModel<Scalar>& model, std::span<const TokenId> tokens,
            const NoDeduce<LayerControls<Scalar>>* controls = nullptr);

/// Forward + backward of the mean next-token cross-entropy. Gradients are
/// scaled by `scale` and added to `grads`. Returns the unscaled loss.
template <typename Scalar>
double loss_and_backward(const LanguageModel<Scalar>& model, std::span<const TokenId> tokens,
                         LanguageModel<Scalar>& grads, Rng* dropout_rng = nullptr,
                         double scale = 1.0);

/// Recurrent generation state: one mixer cache per layer.
template <typename Scalar>
struct ModelState {
  std::vector<MixerState<Scalar>> layers;
  std::int64_t position = 0;

  static ModelState zeros(const LanguageModel<Scalar>& model);
};

/// Gate rows produced by one recurrent step, one entry per layer.
template <typename Scalar>
struct StepGates {
  std::vector<Vector<Scalar>> write;
  std::vector<Vector<Scalar>> read;
};

/// Feeds one token through every layer in O(1) and returns its next-token scores.
template <typename Scalar>
Vector<Scalar> step(const LanguageModel<Scalar>& model, ModelState<Scalar>& state, TokenId token,
                    const NoDeduce<LayerControls<Scalar>>* controls = nullptr,
                    NoDeduce<StepGates<Scalar>>* gates = nullptr);

struct SamplingStrategy {
  enum class Kind { kGreedy, kTopK } kind = Kind::kGreedy;
  int top_k = 40;
  double temperature = 1.0;
};

struct GenerateOptions {
  int max_new = 50;
  SamplingStrategy strategy;
  std::uint64_t seed = 0;
  /// Upper bound on prompt + generated length; the recurrent path has no
  /// context limit of its own.
  std::int64_t length_cap = 1 << 20;
  std::int64_t stop_token = -1;
};

template <typename Scalar>
struct Generation {
  std::vector<TokenId> tokens;  // prompt followed by the continuation
  std::vector<StepGates<Scalar>> gates;  // per generated token, when requested
};

template <typename Scalar>
Generation<Scalar> generate(const LanguageModel<Scalar>& model, std::span<const TokenId> prompt,
                            const GenerateOptions& options,
                            const NoDeduce<LayerControls<Scalar>>* controls = nullptr,
                            bool capture = false);

/// exp(mean next-token cross-entropy) over windows of ctx+1 tokens starting
/// every `stride` tokens (stride <= 0 means ctx, i.e. non-overlapping).
template <typename Scalar>
double perplexity(const LanguageModel<Scalar>& model, std::span<const TokenId> stream,
                  int stride = 0);

}  // namespace protot
