#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "protot/common.hpp"
#include "protot/model.hpp"
#include "protot/tokenizer.hpp"

namespace protot {

struct TrainConfig {
  double peak_lr = 2.0e-3;
  int batch_size = 32;
  int epochs = 10;
  double warmup_frac = 0.02;
  double final_lr_frac = 0.1;
  std::array<double, 2> adam_betas{0.9, 0.999};
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  int precision = 32;
  /// When positive, overrides epochs * steps_per_epoch as the schedule length.
  std::int64_t max_steps = 0;
  /// Extra validation every this many steps (0: only at epoch ends).
  std::int64_t eval_every = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Same key rules as ModelConfig::from_json.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Linear warmup over ceil(warmup_frac * total) steps, then cosine decay from
/// peak to final_lr_frac * peak at step == total.
double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Data

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);
Split parse_split(std::string_view name);

/// Fractions of documents routed to train and val; the rest go to test.
struct SplitRatios {
  double train = 0.94;
  double val = 0.05;
};

/// Deterministic assignment from the document's content hash.
Split split_of(std::string_view document, const SplitRatios& ratios = {});

struct DocumentSet {
  std::vector<std::string> documents;
  std::int64_t skipped_records = 0;  // empty JSONL lines / empty texts
};

/// `.jsonl` files hold one {"text": ...} record per line; any other file is
/// plain text with documents separated by blank lines.
DocumentSet read_documents(const std::vector<std::filesystem::path>& paths);

struct PackedDataset {
  int ctx = 0;
  /// Each block has ctx + 1 ids; consecutive blocks are disjoint slices.
  std::vector<std::vector<TokenId>> train, val, test;
  std::array<std::int64_t, 3> documents{};
  std::int64_t tokens = 0;
  std::int64_t dropped_tokens = 0;
  std::int64_t skipped_records = 0;
  std::uint64_t vocab_hash = 0;

  const std::vector<std::vector<TokenId>>& blocks(Split s) const;
  std::uint64_t hash() const;

  nlohmann::json to_json() const;
  static PackedDataset from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static PackedDataset load(const std::filesystem::path& path);
};

/// Tokenizes, appends eos after every document, concatenates per split and cuts
/// ctx + 1 blocks, dropping each split's remainder.
PackedDataset pack(const DocumentSet& docs, const BpeVocab& vocab, int ctx,
                   const SplitRatios& ratios = {});

PackedDataset ingest(const std::vector<std::filesystem::path>& paths, const BpeVocab& vocab, int ctx,
                     const SplitRatios& ratios = {});

// ---------------------------------------------------------------------------
// Optimizer

template <typename Scalar>
double global_grad_norm(LanguageModel<Scalar>& grads);

/// AdamW with decoupled weight decay restricted to Decay::kApply tensors.
template <typename Scalar>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const LanguageModel<Scalar>& model, const TrainConfig& cfg);

  void step(LanguageModel<Scalar>& model, LanguageModel<Scalar>& grads, double lr);

  std::int64_t steps() const { return steps_; }
  LanguageModel<Scalar>& first_moment() { return m_; }
  LanguageModel<Scalar>& second_moment() { return v_; }
  void set_steps(std::int64_t s) { steps_ = s; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0;
  std::int64_t steps_ = 0;
  LanguageModel<Scalar> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Position in the training run; enough to continue bit-identically.
struct TrainProgress {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::int64_t batch_in_epoch = 0;
  Rng dropout_rng;
};

template <typename Scalar>
struct Checkpoint {
  LanguageModel<Scalar> model;
  AdamW<Scalar> optimizer;
  TrainConfig train_config;
  TrainProgress progress;
  std::uint64_t vocab_hash = 0;
};

/// Writes to a temporary file and renames, so a crash never leaves a torn file.
template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Scalar>& ckpt);

/// Throws IoError on unreadable, truncated or corrupt files and on format
/// version or precision mismatch. Nothing is returned unless the whole file
/// validates.
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

/// Reads only the manifest (dtype, configs, step, hashes).
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);

/// Hash of the file's tensor payload, recorded in the manifest.
std::uint64_t checkpoint_hash(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training loop

struct EvalPoint {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0;  // mean over steps since the previous eval point
  double val_ppl = 0;     // NaN without validation blocks
  std::vector<double> alpha;
};

struct TrainReport {
  std::vector<double> step_losses;
  std::vector<EvalPoint> evals;
  std::int64_t steps = 0;
  std::int64_t total_steps = 0;
  std::string stop_reason;

  /// step, lr, train_loss, val_ppl, alpha_0..alpha_{L-1}
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainCallbacks {
  std::function<void(std::int64_t step, double loss, double lr)> on_step;
  /// Returning true stops the run after this evaluation.
  std::function<bool(const EvalPoint&)> on_eval;
};

/// Raised when the loss or gradient is not finite; `checkpoint` holds the
/// last good state when a checkpoint directory was configured.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, std::filesystem::path checkpoint)
      : NumericalError(what), checkpoint(std::move(checkpoint)) {}
  std::filesystem::path checkpoint;
};

template <typename Scalar>
class Trainer {
 public:
  Trainer(LanguageModel<Scalar> model, TrainConfig cfg, std::uint64_t vocab_hash = 0);
  /// Continues from a saved state.
  explicit Trainer(Checkpoint<Scalar> ckpt);

  /// Runs until the schedule ends, `stop_after` steps have been taken in this
  /// call, or a callback asks to stop. When `checkpoint_dir` is set, last.ckpt
  /// is written at every eval point and at the end.
  TrainReport run(const PackedDataset& data, const TrainCallbacks& callbacks = {},
                  std::optional<std::filesystem::path> checkpoint_dir = std::nullopt,
                  std::int64_t stop_after = -1);

  /// Mean next-token perplexity over a split's blocks (NaN when empty).
  double evaluate(const PackedDataset& data, Split split) const;

  const LanguageModel<Scalar>& model() const { return model_; }
  LanguageModel<Scalar>& model() { return model_; }
  const TrainProgress& progress() const { return progress_; }
  Checkpoint<Scalar> snapshot() const;

  static std::int64_t steps_per_epoch(std::size_t blocks, int batch_size);

 private:
  std::vector<std::size_t> epoch_order(std::size_t blocks, std::int64_t epoch) const;

  LanguageModel<Scalar> model_;
  TrainConfig cfg_;
  AdamW<Scalar> optimizer_;
  TrainProgress progress_;
  std::uint64_t vocab_hash_ = 0;
};

/// Mean perplexity over blocks: exp of the mean next-token loss.
template <typename Scalar>
double block_perplexity(const LanguageModel<Scalar>& model,
                        const std::vector<std::vector<TokenId>>& blocks);

}  // namespace protot
