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

struct PerturbationPair {
  std::string original;
  std::string perturbed;
  std::string category;
};

/// Surface-noise categories and the three intervention tags.
bool is_noise_category(std::string_view c);
bool is_intervention_category(std::string_view c);

/// One {"original", "perturbed", "category"} object per line. Categories are
/// not checked here; evaluation skips unknown ones.
std::vector<PerturbationPair> read_pairs_jsonl(const std::filesystem::path& path);

struct NextTokenDistribution {
  Vector<double> probs;
  bool truncated = false;
};

template <typename Scalar>
NextTokenDistribution next_token_distribution(const LanguageModel<Scalar>& model, std::span<const TokenId> ids,
                                              const NoDeduce<LayerControls<Scalar>>* controls = nullptr);
template <typename Scalar>
NextTokenDistribution next_token_distribution(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                                              std::string_view text);

/// Base-2 Jensen-Shannon divergence, in [0, 1].
double js_divergence(std::span<const double> p, std::span<const double> q);

struct PmrResult {
  double js_base = 0;
  double js_clamped = 0;
  double pmr = 0;
  bool skipped = false;  // js_base == 0
};

/// Runs x with capture, then x' with every layer's write and read rows
/// replaced by x's rows, right-aligned. `clamped_gates` receives the gates
/// actually used on x'.
template <typename Scalar>
PmrResult pmr(const LanguageModel<Scalar>& model, std::span<const TokenId> x, std::span<const TokenId> x_prime,
              NoDeduce<std::vector<GateWeights<Scalar>>>* source_gates = nullptr,
              NoDeduce<std::vector<GateWeights<Scalar>>>* clamped_gates = nullptr);

template <typename Scalar>
PmrResult pmr(const LanguageModel<Scalar>& model, const BpeVocab& vocab, const PerturbationPair& pair);

/// (b - c) / b; throws DomainError for b == 0.
double pmr_value(double js_base, double js_clamped);

struct InterventionMetrics {
  double js = 0;
  double overlap = 0;
  std::optional<double> spearman;  // undefined when either side is constant on the union
  bool top1_invariant = false;
};

/// Top-k sets break ties towards the lower token id.
InterventionMetrics intervention_metrics(std::span<const double> p, std::span<const double> q, int k_top = 10);

struct CategoryStats {
  std::string category;
  std::int64_t n = 0;
  double js_mean = 0;

  bool has_pmr = false;
  double pmr_mean = 0, pmr_std = 0, pmr_positive = 0;
  double js_base_mean = 0, js_clamped_mean = 0;
  std::int64_t pmr_excluded = 0;

  bool has_intervention = false;
  double overlap_mean = 0, spearman_mean = 0, top1_mean = 0;
  std::int64_t spearman_undefined = 0;
};

struct RobustnessReport {
  enum class Kind { kPerturbation, kPmr, kIntervention } kind = Kind::kPerturbation;
  std::vector<CategoryStats> categories;  // sorted by name
  std::int64_t skipped = 0;               // unknown category or empty text

  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

template <typename Scalar>
RobustnessReport perturbation_eval(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                                   const std::vector<PerturbationPair>& pairs);

template <typename Scalar>
RobustnessReport pmr_eval(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                          const std::vector<PerturbationPair>& pairs);

/// Pairs without an intervention tag are skipped.
template <typename Scalar>
RobustnessReport intervention_eval(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                                   const std::vector<PerturbationPair>& pairs, int k_top = 10);

}  // namespace protot
