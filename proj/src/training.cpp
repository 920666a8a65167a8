#include "protot/training.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace protot {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian arrays");

void TrainConfig::validate() const {
  if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(warmup_frac > 0 && warmup_frac < 1)) throw ConfigError("warmup_frac must be in (0, 1)");
  if (!(final_lr_frac > 0 && final_lr_frac <= 1)) throw ConfigError("final_lr_frac must be in (0, 1]");
  for (double b : adam_betas)
    if (!(b >= 0 && b < 1)) throw ConfigError("adam_betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  if (max_steps < 0 || eval_every < 0) throw ConfigError("max_steps and eval_every must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"peak_lr", peak_lr},       {"batch_size", batch_size},
          {"epochs", epochs},         {"warmup_frac", warmup_frac},
          {"final_lr_frac", final_lr_frac}, {"adam_betas", adam_betas},
          {"adam_eps", adam_eps},     {"weight_decay", weight_decay},
          {"grad_clip_norm", grad_clip_norm}, {"seed", seed},
          {"precision", precision},   {"max_steps", max_steps},
          {"eval_every", eval_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.final_lr_frac = j.value("final_lr_frac", c.final_lr_frac);
    c.adam_betas = j.value("adam_betas", c.adam_betas);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
    c.seed = j.value("seed", c.seed);
    c.precision = j.value("precision", c.precision);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.eval_every = j.value("eval_every", c.eval_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0) throw ConfigError("lr_at: total_steps must be positive");
  if (step < 0 || step > total_steps) throw DomainError("lr_at: step outside [0, total_steps]");
  const auto warmup = static_cast<std::int64_t>(std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = total_steps == warmup
                              ? 1.0
                              : static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  const double f = cfg.final_lr_frac;
  return cfg.peak_lr * (f + (1 - f) * 0.5 * (1 + std::cos(M_PI * progress)));
}

// ---------------------------------------------------------------------------
// Data

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DomainError("unknown split '" + std::string(name) + "' (train, val, test)");
}

Split split_of(std::string_view document, const SplitRatios& ratios) {
  // splitmix64 finalizer: raw FNV high bits barely move for near-identical documents.
  std::uint64_t h = fnv1a(document);
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  h ^= h >> 31;
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  if (u < ratios.train) return Split::kTrain;
  if (u < ratios.train + ratios.val) return Split::kVal;
  return Split::kTest;
}

namespace {

bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n\v\f") == std::string_view::npos;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed reading " + path.string());
  return ss.str();
}

}  // namespace

DocumentSet read_documents(const std::vector<std::filesystem::path>& paths) {
  DocumentSet out;
  for (const auto& path : paths) {
    const std::string content = slurp(path);
    std::istringstream lines(content);
    std::string line;
    std::int64_t lineno = 0;
    if (path.extension() == ".jsonl") {
      while (std::getline(lines, line)) {
        ++lineno;
        if (blank(line)) {
          ++out.skipped_records;
          continue;
        }
        nlohmann::json rec;
        try {
          rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
          throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": not valid JSON");
        }
        if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string())
          throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": record has no \"text\" string");
        std::string text = rec["text"].get<std::string>();
        if (text.empty())
          ++out.skipped_records;
        else
          out.documents.push_back(std::move(text));
      }
    } else {
      std::string doc;
      while (std::getline(lines, line)) {
        if (blank(line)) {
          if (!doc.empty()) out.documents.push_back(std::move(doc));
          doc.clear();
        } else {
          doc += line;
          doc += '\n';
        }
      }
      if (!doc.empty()) out.documents.push_back(std::move(doc));
    }
  }
  if (out.documents.empty()) throw ConfigError("no documents found in the input files");
  return out;
}

const std::vector<std::vector<TokenId>>& PackedDataset::blocks(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    default: return test;
  }
}

std::uint64_t PackedDataset::hash() const {
  std::uint64_t h = fnv1a(std::to_string(ctx));
  for (const auto* split : {&train, &val, &test}) {
    h = fnv1a("|", h);
    for (const auto& b : *split)
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(b.data()), b.size() * sizeof(TokenId)), h);
  }
  return h;
}

nlohmann::json PackedDataset::to_json() const {
  return {{"ctx", ctx},
          {"vocab_hash", hex64(vocab_hash)},
          {"documents", documents},
          {"tokens", tokens},
          {"dropped_tokens", dropped_tokens},
          {"skipped_records", skipped_records},
          {"train", train},
          {"val", val},
          {"test", test}};
}

PackedDataset PackedDataset::from_json(const nlohmann::json& j) {
  try {
    PackedDataset d;
    d.ctx = j.at("ctx").get<int>();
    d.vocab_hash = std::stoull(j.at("vocab_hash").get<std::string>(), nullptr, 16);
    d.documents = j.at("documents").get<std::array<std::int64_t, 3>>();
    d.tokens = j.at("tokens").get<std::int64_t>();
    d.dropped_tokens = j.at("dropped_tokens").get<std::int64_t>();
    d.skipped_records = j.at("skipped_records").get<std::int64_t>();
    d.train = j.at("train").get<std::vector<std::vector<TokenId>>>();
    d.val = j.at("val").get<std::vector<std::vector<TokenId>>>();
    d.test = j.at("test").get<std::vector<std::vector<TokenId>>>();
    for (const auto* split : {&d.train, &d.val, &d.test})
      for (const auto& b : *split)
        if (b.size() != static_cast<std::size_t>(d.ctx) + 1)
          throw ConfigError("dataset block of length " + std::to_string(b.size()) + ", expected ctx + 1");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ConfigError("malformed dataset: bad vocab_hash");
  }
}

void PackedDataset::save(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << to_json().dump();
  if (!f) throw IoError("write failed: " + path.string());
}

PackedDataset PackedDataset::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

PackedDataset pack(const DocumentSet& docs, const BpeVocab& vocab, int ctx, const SplitRatios& ratios) {
  if (ctx < 2) throw ConfigError("ctx must be >= 2");
  PackedDataset out;
  out.ctx = ctx;
  out.skipped_records = docs.skipped_records;
  out.vocab_hash = vocab.hash();
  std::array<std::vector<TokenId>, 3> streams;
  for (const auto& doc : docs.documents) {
    const Split s = split_of(doc, ratios);
    auto& stream = streams[static_cast<std::size_t>(s)];
    const auto ids = vocab.encode(doc);
    stream.insert(stream.end(), ids.begin(), ids.end());
    stream.push_back(vocab.eos());
    ++out.documents[static_cast<std::size_t>(s)];
    out.tokens += static_cast<std::int64_t>(ids.size()) + 1;
  }
  if (out.tokens == 0) throw ConfigError("corpus produced no tokens");
  const std::size_t len = static_cast<std::size_t>(ctx) + 1;
  for (std::size_t s = 0; s < 3; ++s) {
    auto& dst = s == 0 ? out.train : s == 1 ? out.val : out.test;
    const auto& stream = streams[s];
    for (std::size_t at = 0; at + len <= stream.size(); at += len)
      dst.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(at),
                       stream.begin() + static_cast<std::ptrdiff_t>(at + len));
    out.dropped_tokens += static_cast<std::int64_t>(stream.size() % len);
  }
  return out;
}

PackedDataset ingest(const std::vector<std::filesystem::path>& paths, const BpeVocab& vocab, int ctx,
                     const SplitRatios& ratios) {
  return pack(read_documents(paths), vocab, ctx, ratios);
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename Scalar>
double global_grad_norm(LanguageModel<Scalar>& grads) {
  double sq = 0;
  for (const auto& view : grads.parameters())
    for (Scalar g : view.data) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

template <typename Scalar>
AdamW<Scalar>::AdamW(const LanguageModel<Scalar>& model, const TrainConfig& cfg)
    : beta1_(cfg.adam_betas[0]),
      beta2_(cfg.adam_betas[1]),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay),
      m_(model.zeros_like()),
      v_(model.zeros_like()) {}

template <typename Scalar>
void AdamW<Scalar>::step(LanguageModel<Scalar>& model, LanguageModel<Scalar>& grads, double lr) {
  ++steps_;
  const double bc1 = 1 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1 - std::pow(beta2_, static_cast<double>(steps_));
  auto params = model.parameters();
  auto g = grads.parameters();
  auto m = m_.parameters();
  auto v = v_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool decay = params[i].decay == Decay::kApply && weight_decay_ > 0;
    auto p = params[i].data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[i].data[j]);
      const double mj = beta1_ * static_cast<double>(m[i].data[j]) + (1 - beta1_) * gj;
      const double vj = beta2_ * static_cast<double>(v[i].data[j]) + (1 - beta2_) * gj * gj;
      m[i].data[j] = static_cast<Scalar>(mj);
      v[i].data[j] = static_cast<Scalar>(vj);
      double pj = static_cast<double>(p[j]);
      if (decay) pj -= lr * weight_decay_ * pj;
      pj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_);
      p[j] = static_cast<Scalar>(pj);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'P', 'R', 'O', 'T', 'O', 'C', 'K', 'P'};

std::string rng_state(const Rng& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

Rng parse_rng(const std::string& s) {
  Rng rng;
  std::istringstream ss(s);
  ss >> rng;
  if (!ss) throw IoError("checkpoint RNG state is corrupt");
  return rng;
}

struct RawCheckpoint {
  nlohmann::json manifest;
  std::string payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t manifest_size = 0;
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path.string() + " is not a checkpoint file");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in) throw IoError("checkpoint " + path.string() + " is truncated");
  if (version != kCheckpointVersion)
    throw IoError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                  " but this build reads version " + std::to_string(kCheckpointVersion));
  in.read(reinterpret_cast<char*>(&manifest_size), sizeof manifest_size);
  if (!in || manifest_size > (1u << 30)) throw IoError("checkpoint " + path.string() + " has a corrupt header");
  std::string text(manifest_size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_size));
  if (!in) throw IoError("checkpoint " + path.string() + " is truncated");
  RawCheckpoint raw;
  try {
    raw.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw IoError("checkpoint " + path.string() + " has a corrupt manifest");
  }
  if (with_payload) {
    std::ostringstream ss;
    ss << in.rdbuf();
    raw.payload = ss.str();
  }
  return raw;
}

template <typename Scalar>
void add_tensors(nlohmann::json& table, std::string& payload, const std::string& prefix,
                 LanguageModel<Scalar>& model) {
  for (const auto& view : model.parameters()) {
    table.push_back({{"name", prefix + view.name},
                     {"shape", view.shape},
                     {"offset", payload.size()},
                     {"count", view.data.size()}});
    payload.append(reinterpret_cast<const char*>(view.data.data()), view.data.size_bytes());
  }
}

template <typename Scalar>
void read_tensors(const nlohmann::json& table, const std::string& payload, const std::string& prefix,
                  LanguageModel<Scalar>& model) {
  std::unordered_map<std::string, const nlohmann::json*> by_name;
  for (const auto& t : table) by_name[t.at("name").get<std::string>()] = &t;
  for (auto& view : model.parameters()) {
    auto it = by_name.find(prefix + view.name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor " + prefix + view.name);
    const nlohmann::json& t = *it->second;
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (count != view.data.size() || t.at("shape").get<std::vector<std::int64_t>>() != view.shape)
      throw IoError("checkpoint tensor " + prefix + view.name + " has the wrong shape");
    if (offset + view.data.size_bytes() > payload.size())
      throw IoError("checkpoint tensor " + prefix + view.name + " lies outside the payload");
    std::memcpy(view.data.data(), payload.data() + offset, view.data.size_bytes());
  }
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Scalar>& ckpt) {
  auto model = ckpt.model;
  auto opt = ckpt.optimizer;
  std::string payload;
  nlohmann::json table = nlohmann::json::array();
  add_tensors(table, payload, "", model);
  add_tensors(table, payload, "adam_m/", opt.first_moment());
  add_tensors(table, payload, "adam_v/", opt.second_moment());

  const nlohmann::json manifest = {
      {"format_version", kCheckpointVersion},
      {"dtype", dtype_name<Scalar>()},
      {"model_config", ckpt.model.config.to_json()},
      {"train_config", ckpt.train_config.to_json()},
      {"step", ckpt.progress.step},
      {"epoch", ckpt.progress.epoch},
      {"batch_in_epoch", ckpt.progress.batch_in_epoch},
      {"optimizer_steps", opt.steps()},
      {"rng_state", rng_state(ckpt.progress.dropout_rng)},
      {"vocab_hash", hex64(ckpt.vocab_hash)},
      {"payload_bytes", payload.size()},
      {"payload_hash", hex64(fnv1a(payload))},
      {"tensors", table},
  };
  const std::string text = manifest.dump();
  const std::uint64_t size = text.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
    out.write(reinterpret_cast<const char*>(&size), sizeof size);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path, true);
  const auto& m = raw.manifest;
  try {
    const auto dtype = m.at("dtype").get<std::string>();
    if (dtype != dtype_name<Scalar>())
      throw IoError("checkpoint " + path.string() + " stores " + dtype + " tensors, expected " +
                    dtype_name<Scalar>());
    if (m.at("payload_bytes").get<std::size_t>() != raw.payload.size())
      throw IoError("checkpoint " + path.string() + " is truncated");
    if (m.at("payload_hash").get<std::string>() != hex64(fnv1a(raw.payload)))
      throw IoError("checkpoint " + path.string() + " failed its payload checksum");

    Checkpoint<Scalar> ck;
    ModelConfig mc;
    TrainConfig tc;
    try {
      mc = ModelConfig::from_json(m.at("model_config"));
      tc = TrainConfig::from_json(m.at("train_config"));
    } catch (const ConfigError& e) {
      throw IoError("checkpoint " + path.string() + " has an invalid config: " + e.what());
    }
    Rng scratch(0);
    ck.model = LanguageModel<Scalar>::init(mc, scratch);
    ck.train_config = tc;
    ck.optimizer = AdamW<Scalar>(ck.model, tc);
    read_tensors(m.at("tensors"), raw.payload, "", ck.model);
    read_tensors(m.at("tensors"), raw.payload, "adam_m/", ck.optimizer.first_moment());
    read_tensors(m.at("tensors"), raw.payload, "adam_v/", ck.optimizer.second_moment());
    ck.optimizer.set_steps(m.at("optimizer_steps").get<std::int64_t>());
    ck.progress.step = m.at("step").get<std::int64_t>();
    ck.progress.epoch = m.at("epoch").get<std::int64_t>();
    ck.progress.batch_in_epoch = m.at("batch_in_epoch").get<std::int64_t>();
    ck.progress.dropout_rng = parse_rng(m.at("rng_state").get<std::string>());
    ck.vocab_hash = std::stoull(m.at("vocab_hash").get<std::string>(), nullptr, 16);
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + path.string() + " has a malformed manifest: " + e.what());
  }
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path) {
  return read_raw(path, false).manifest;
}

std::uint64_t checkpoint_hash(const std::filesystem::path& path) {
  return fnv1a(slurp(path));
}

// ---------------------------------------------------------------------------
// Training loop

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path.string());
  const std::size_t layers = evals.empty() ? 0 : evals.front().alpha.size();
  out << "step,lr,train_loss,val_ppl";
  for (std::size_t l = 0; l < layers; ++l) out << ",alpha_" << l;
  out << '\n' << std::setprecision(10);
  for (const auto& e : evals) {
    out << e.step << ',' << e.lr << ',' << e.train_loss << ',' << e.val_ppl;
    for (double a : e.alpha) out << ',' << a;
    out << '\n';
  }
  if (!out) throw IoError("failed writing report " + path.string());
}

template <typename Scalar>
double block_perplexity(const LanguageModel<Scalar>& model,
                        const std::vector<std::vector<TokenId>>& blocks) {
  if (blocks.empty()) return std::nan("");
  double total = 0;
  for (const auto& b : blocks) total += loss(model, b);
  return std::exp(total / static_cast<double>(blocks.size()));
}

template <typename Scalar>
Trainer<Scalar>::Trainer(LanguageModel<Scalar> model, TrainConfig cfg, std::uint64_t vocab_hash)
    : model_(std::move(model)), cfg_(cfg), optimizer_(model_, cfg_), vocab_hash_(vocab_hash) {
  cfg_.validate();
  progress_.dropout_rng.seed(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
}

template <typename Scalar>
Trainer<Scalar>::Trainer(Checkpoint<Scalar> ckpt)
    : model_(std::move(ckpt.model)),
      cfg_(ckpt.train_config),
      optimizer_(std::move(ckpt.optimizer)),
      progress_(std::move(ckpt.progress)),
      vocab_hash_(ckpt.vocab_hash) {}

template <typename Scalar>
Checkpoint<Scalar> Trainer<Scalar>::snapshot() const {
  return {model_, optimizer_, cfg_, progress_, vocab_hash_};
}

template <typename Scalar>
std::int64_t Trainer<Scalar>::steps_per_epoch(std::size_t blocks, int batch_size) {
  return static_cast<std::int64_t>((blocks + static_cast<std::size_t>(batch_size) - 1) /
                                   static_cast<std::size_t>(batch_size));
}

template <typename Scalar>
std::vector<std::size_t> Trainer<Scalar>::epoch_order(std::size_t blocks, std::int64_t epoch) const {
  std::vector<std::size_t> order(blocks);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg_.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(epoch) + 1);
  // Fisher-Yates with raw draws so the order does not depend on the standard library.
  for (std::size_t i = blocks; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

template <typename Scalar>
double Trainer<Scalar>::evaluate(const PackedDataset& data, Split split) const {
  return block_perplexity(model_, data.blocks(split));
}

template <typename Scalar>
TrainReport Trainer<Scalar>::run(const PackedDataset& data, const TrainCallbacks& callbacks,
                                 std::optional<std::filesystem::path> checkpoint_dir,
                                 std::int64_t stop_after) {
  const auto& train = data.train;
  if (train.empty()) throw ConfigError("no training blocks; the corpus is smaller than one context");
  for (const auto& b : train)
    if (static_cast<int>(b.size()) > model_.config.ctx + 1)
      throw ConfigError("training blocks are longer than the model context");
  if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);

  const std::int64_t spe = steps_per_epoch(train.size(), cfg_.batch_size);
  const std::int64_t total = cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * spe;
  TrainReport report;
  report.total_steps = total;
  LanguageModel<Scalar> grads = model_.zeros_like();
  std::vector<std::size_t> order;
  std::int64_t order_epoch = -1;
  double pending_loss = 0;
  std::int64_t pending_steps = 0;
  std::int64_t taken = 0;

  auto diverge = [&](const std::string& why) {
    std::filesystem::path saved;
    if (checkpoint_dir) {
      saved = *checkpoint_dir / "last_good.ckpt";
      save_checkpoint(saved, snapshot());
    }
    throw DivergenceError("training diverged at step " + std::to_string(progress_.step + 1) + ": " + why,
                          saved);
  };

  while (progress_.step < total) {
    if (stop_after >= 0 && taken >= stop_after) {
      report.stop_reason = "paused";
      break;
    }
    if (order_epoch != progress_.epoch) {
      order = epoch_order(train.size(), progress_.epoch);
      order_epoch = progress_.epoch;
    }
    const std::size_t begin = static_cast<std::size_t>(progress_.batch_in_epoch * cfg_.batch_size);
    const std::size_t end = std::min(begin + static_cast<std::size_t>(cfg_.batch_size), train.size());
    for (auto& view : grads.parameters()) std::fill(view.data.begin(), view.data.end(), Scalar(0));

    const Rng rng_before = progress_.dropout_rng;
    double batch_loss = 0;
    try {
      for (std::size_t i = begin; i < end; ++i)
        batch_loss += loss_and_backward(model_, train[order[i]], grads, &progress_.dropout_rng,
                                        1.0 / static_cast<double>(end - begin));
    } catch (const NumericalError& e) {
      progress_.dropout_rng = rng_before;
      diverge(e.what());
    }
    batch_loss /= static_cast<double>(end - begin);
    const double norm = global_grad_norm(grads);
    if (!std::isfinite(batch_loss) || !std::isfinite(norm)) {
      progress_.dropout_rng = rng_before;
      diverge("non-finite loss or gradient");
    }
    if (cfg_.grad_clip_norm > 0 && norm > cfg_.grad_clip_norm) {
      const auto scale = static_cast<Scalar>(cfg_.grad_clip_norm / norm);
      for (auto& view : grads.parameters())
        for (auto& g : view.data) g *= scale;
    }
    const double lr = lr_at(progress_.step + 1, total, cfg_);
    optimizer_.step(model_, grads, lr);

    ++progress_.step;
    ++progress_.batch_in_epoch;
    ++taken;
    pending_loss += batch_loss;
    ++pending_steps;
    report.step_losses.push_back(batch_loss);
    if (callbacks.on_step) callbacks.on_step(progress_.step, batch_loss, lr);

    const bool epoch_end = progress_.batch_in_epoch == spe;
    if (epoch_end) {
      ++progress_.epoch;
      progress_.batch_in_epoch = 0;
    }
    if (epoch_end || progress_.step == total || (cfg_.eval_every > 0 && progress_.step % cfg_.eval_every == 0)) {
      EvalPoint point;
      point.step = progress_.step;
      point.epoch = progress_.epoch;
      point.lr = lr;
      point.train_loss = pending_loss / static_cast<double>(pending_steps);
      point.val_ppl = evaluate(data, Split::kVal);
      for (const auto& b : model_.blocks) point.alpha.push_back(static_cast<double>(b.mixer.alpha));
      pending_loss = 0;
      pending_steps = 0;
      report.evals.push_back(point);
      if (checkpoint_dir) save_checkpoint(*checkpoint_dir / "last.ckpt", snapshot());
      if (callbacks.on_eval && callbacks.on_eval(point)) {
        report.stop_reason = "stopped by callback";
        break;
      }
    }
  }
  if (report.stop_reason.empty()) report.stop_reason = "schedule complete";
  report.steps = progress_.step;
  return report;
}

#define PROTOT_INSTANTIATE_TRAINING(S)                                                            \
  template double global_grad_norm<S>(LanguageModel<S>&);                                         \
  template class AdamW<S>;                                                                        \
  template class Trainer<S>;                                                                      \
  template void save_checkpoint<S>(const std::filesystem::path&, const Checkpoint<S>&);           \
  template Checkpoint<S> load_checkpoint<S>(const std::filesystem::path&);                        \
  template double block_perplexity<S>(const LanguageModel<S>&, const std::vector<std::vector<TokenId>>&);

PROTOT_INSTANTIATE_TRAINING(float)
PROTOT_INSTANTIATE_TRAINING(double)

}  // namespace protot
