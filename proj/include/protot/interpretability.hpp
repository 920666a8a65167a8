#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protot/model.hpp"
#include "protot/tokenizer.hpp"

namespace protot {

/// Gate weights of one sequence at every layer. Stored in double regardless of
/// the model precision.
struct ActivationTrace {
  std::int64_t seq_id = 0;
  std::vector<TokenId> tokens;
  bool truncated = false;
  std::vector<GateWeights<double>> layers;
  /// Column sums of each layer's write matrix (length R).
  std::vector<Vector<double>> write_mass;

  nlohmann::json to_json() const;
  static ActivationTrace from_json(const nlohmann::json& j);
};

/// One trace per sequence; sequences longer than ctx keep their first ctx
/// tokens and are flagged. `first_id` numbers the traces.
template <typename Scalar>
std::vector<ActivationTrace> capture(const LanguageModel<Scalar>& model,
                                     const std::vector<std::vector<TokenId>>& sequences,
                                     std::int64_t first_id = 0,
                                     const NoDeduce<LayerControls<Scalar>>* controls = nullptr);

void write_traces_jsonl(const std::filesystem::path& path, const std::vector<ActivationTrace>& traces);
std::vector<ActivationTrace> read_traces_jsonl(const std::filesystem::path& path);

struct TopSequence {
  std::int64_t seq_id = 0;
  double mass = 0;
  std::vector<TokenId> tokens;
  std::vector<double> write;
  std::vector<double> read;
};

struct TopToken {
  TokenId token = 0;
  double weight = 0;
  std::int64_t seq_id = 0;
  std::int64_t position = 0;
};

struct PrototypeReport {
  int layer = 0;
  int k = 0;
  double half_life = 0;
  std::vector<TopSequence> top_sequences;
  std::vector<TopToken> top_tokens;
  /// Fewer traces than requested.
  bool short_list = false;

  /// Token strings are included when a vocabulary is given.
  nlohmann::json to_json(const BpeVocab* vocab = nullptr) const;
};

/// The n traces with the largest write mass on (layer, k), ties to the lower
/// sequence id. Each kept sequence contributes its `tokens_per_sequence`
/// highest-write tokens to top_tokens.
PrototypeReport top_sequences(const std::vector<ActivationTrace>& traces, int layer, int k, std::size_t n,
                              double half_life = 0, std::size_t tokens_per_sequence = 3);

// ---------------------------------------------------------------------------
// Routing statistics. Each takes one activation vector per input and averages
// over inputs; all-zero inputs are skipped and counted.

struct MetricResult {
  double value = 0;
  std::int64_t used = 0;
  std::int64_t skipped = 0;
};

/// max_p |a_p| / mean_p |a_p|.
MetricResult l1_sparsity(const std::vector<std::vector<double>>& acts);
/// (1/P)(P + 1 - 2 sum_p (P + 1 - p) a_(p) / sum_p a_p) over ascending a_(p).
MetricResult gini(const std::vector<std::vector<double>>& acts);
/// Shannon entropy (nats) of |a| / sum |a|.
MetricResult entropy(const std::vector<std::vector<double>>& acts);

struct MiResult {
  double value = 0;
  bool degenerate = false;  // fewer than two token classes after pooling
};

/// Plug-in I(token; binned activation) in nats. Activations go into `bins`
/// quantile bins (tied values share a bin); tokens seen fewer than
/// `min_count` times are pooled into one class.
MiResult mutual_information(std::span<const TokenId> tokens, std::span<const double> acts, int bins = 10,
                            int min_count = 5);

/// 1 - distinct / total; nullopt for an empty pool.
std::optional<double> repetition_score(std::span<const TokenId> pool);
std::optional<double> repetition_score(const PrototypeReport& report);

/// Pearson correlation of mid-ranks; nullopt when either series is constant.
std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys);

/// Per-token write rows of a layer as metric inputs.
std::vector<std::vector<double>> layer_rows(const std::vector<ActivationTrace>& traces, int layer);
/// Write weights of prototype k, one vector per trace.
std::vector<std::vector<double>> prototype_columns(const std::vector<ActivationTrace>& traces, int layer, int k);

/// Spearman correlation between per-prototype half-lives and the repetition
/// score of each prototype's top-n report.
std::optional<double> half_life_repetition(const std::vector<ActivationTrace>& traces, int layer,
                                           const std::vector<double>& half_lives, std::size_t n_top = 10);

// ---------------------------------------------------------------------------
// Interventions

enum class InterventionMode { kNone, kReinit, kMaskWrite, kMaskRead };
InterventionMode parse_intervention_mode(std::string_view name);
const char* intervention_mode_name(InterventionMode mode);

struct InterventionSpec {
  int layer = 0;
  int k = 0;
  InterventionMode mode = InterventionMode::kNone;
  std::uint64_t seed = 0;
};

/// A modified model for evaluation. The base model is never touched: reinit
/// edits a private copy, masks are runtime controls.
template <typename Scalar>
class InterventionView {
 public:
  InterventionView(const LanguageModel<Scalar>& base, const InterventionSpec& spec);

  const LanguageModel<Scalar>& model() const { return modified_ ? *modified_ : *base_; }
  const LayerControls<Scalar>* controls() const { return controls_.empty() ? nullptr : &controls_; }
  const InterventionSpec& spec() const { return spec_; }

 private:
  const LanguageModel<Scalar>* base_;
  std::optional<LanguageModel<Scalar>> modified_;
  LayerControls<Scalar> controls_;
  InterventionSpec spec_;
};

struct ProbabilityDelta {
  TokenId target = 0;
  double p_base = 0;
  double p_mod = 0;
  double delta_pp = 0;   // (p_mod - p_base) * 100
  double delta_rel = 0;  // (p_mod - p_base) / p_base * 100
  bool below_floor = false;
  bool truncated = false;

  nlohmann::json to_json() const;
};

/// Next-token scores after `context`, truncated from the left to ctx.
template <typename Scalar>
Vector<double> final_logits(const LanguageModel<Scalar>& model, std::span<const TokenId> context,
                            const NoDeduce<LayerControls<Scalar>>* controls = nullptr,
                            bool* truncated = nullptr);

/// `target` must encode to exactly one id.
template <typename Scalar>
ProbabilityDelta probability_delta(const LanguageModel<Scalar>& base, const InterventionView<Scalar>& view,
                                   const BpeVocab& vocab, std::string_view context, std::string_view target,
                                   double floor = 0.01);

/// All R channels of every layer masked on one side.
template <typename Scalar>
LayerControls<Scalar> mask_all(const LanguageModel<Scalar>& model, bool write_side);

// ---------------------------------------------------------------------------
// Static snapshot: one block per report, token spans shaded by write weight.

void write_html_snapshot(const std::filesystem::path& path, const std::vector<PrototypeReport>& reports,
                         const BpeVocab& vocab);

}  // namespace protot
