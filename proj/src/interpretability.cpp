#include "protot/interpretability.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

namespace protot {

namespace {

using nlohmann::json;

json matrix_json(const Matrix<double>& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] = m(i, j);
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix<double> matrix_from_json(const json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  const Eigen::Index cols = rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size());
  Matrix<double> m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != cols) throw ConfigError("ragged gate matrix in trace");
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(i), c) = rows[i][c];
  }
  return m;
}

void fill_mass(ActivationTrace& t) {
  t.write_mass.clear();
  for (const auto& g : t.layers) t.write_mass.push_back(g.write.colwise().sum().transpose());
}

void check_layer_k(const std::vector<ActivationTrace>& traces, int layer, int k) {
  if (traces.empty()) return;
  const auto& t = traces.front();
  if (layer < 0 || layer >= static_cast<int>(t.layers.size()))
    throw DomainError("layer " + std::to_string(layer) + " out of range [0, " +
                      std::to_string(t.layers.size()) + ")");
  const auto channels = t.layers[layer].write.cols();
  if (k < 0 || k >= channels)
    throw DomainError("prototype " + std::to_string(k) + " out of range [0, " + std::to_string(channels) + ")");
}

std::vector<double> midranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = r;
    i = j + 1;
  }
  return ranks;
}

template <typename F>
MetricResult average_over(const std::vector<std::vector<double>>& acts, F&& f) {
  MetricResult r;
  double sum = 0;
  for (const auto& a : acts) {
    double total = 0;
    for (double v : a) total += std::abs(v);
    if (a.empty() || total == 0) {
      ++r.skipped;
      continue;
    }
    sum += f(a, total);
    ++r.used;
  }
  r.value = r.used ? sum / static_cast<double>(r.used) : 0.0;
  return r;
}

std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

json ActivationTrace::to_json() const {
  json layers_j = json::array();
  for (const auto& g : layers) layers_j.push_back({{"write", matrix_json(g.write)}, {"read", matrix_json(g.read)}});
  return {{"seq_id", seq_id}, {"tokens", tokens}, {"truncated", truncated}, {"layers", layers_j}};
}

ActivationTrace ActivationTrace::from_json(const json& j) {
  try {
    ActivationTrace t;
    t.seq_id = j.at("seq_id").get<std::int64_t>();
    t.tokens = j.at("tokens").get<std::vector<TokenId>>();
    t.truncated = j.value("truncated", false);
    for (const auto& l : j.at("layers")) {
      GateWeights<double> g{matrix_from_json(l.at("write")), matrix_from_json(l.at("read"))};
      if (g.write.rows() != static_cast<Eigen::Index>(t.tokens.size()) || g.read.rows() != g.write.rows())
        throw ConfigError("trace " + std::to_string(t.seq_id) + ": gate rows do not match token count");
      t.layers.push_back(std::move(g));
    }
    fill_mass(t);
    return t;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed trace: ") + e.what());
  }
}

template <typename Scalar>
std::vector<ActivationTrace> capture(const LanguageModel<Scalar>& model,
                                     const std::vector<std::vector<TokenId>>& sequences, std::int64_t first_id,
                                     const NoDeduce<LayerControls<Scalar>>* controls) {
  std::vector<ActivationTrace> out;
  out.reserve(sequences.size());
  const auto ctx = static_cast<std::size_t>(model.config.ctx);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    ActivationTrace t;
    t.seq_id = first_id + static_cast<std::int64_t>(s);
    t.truncated = sequences[s].size() > ctx;
    t.tokens.assign(sequences[s].begin(), sequences[s].begin() + std::min(ctx, sequences[s].size()));
    ForwardOptions<Scalar> opts;
    opts.controls = controls;
    opts.capture = true;
    auto res = forward(model, std::span<const TokenId>(t.tokens), opts);
    for (const auto& g : res.gates)
      t.layers.push_back({g.write.template cast<double>(), g.read.template cast<double>()});
    fill_mass(t);
    out.push_back(std::move(t));
  }
  return out;
}

void write_traces_jsonl(const std::filesystem::path& path, const std::vector<ActivationTrace>& traces) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  for (const auto& t : traces) f << t.to_json().dump() << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<ActivationTrace> read_traces_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<ActivationTrace> out;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(ActivationTrace::from_json(j));
  }
  return out;
}

// ---------------------------------------------------------------------------

json PrototypeReport::to_json(const BpeVocab* vocab) const {
  auto text = [&](TokenId id) -> json {
    if (!vocab || id < 0 || id >= vocab->size()) return nullptr;
    return bytes_to_printable(vocab->token_bytes(id));
  };
  json seqs = json::array();
  for (const auto& s : top_sequences) {
    json entry = {{"seq_id", s.seq_id}, {"mass", s.mass}, {"tokens", s.tokens}, {"write", s.write}, {"read", s.read}};
    if (vocab) {
      json pieces = json::array();
      for (TokenId id : s.tokens) pieces.push_back(text(id));
      entry["text"] = pieces;
    }
    seqs.push_back(std::move(entry));
  }
  json toks = json::array();
  for (const auto& t : top_tokens) {
    json entry = {{"token", t.token}, {"weight", t.weight}, {"seq_id", t.seq_id}, {"position", t.position}};
    if (vocab) entry["text"] = text(t.token);
    toks.push_back(std::move(entry));
  }
  return {{"layer", layer},       {"k", k},           {"half_life", half_life},
          {"short", short_list},  {"top_sequences", seqs}, {"top_tokens", toks}};
}

PrototypeReport top_sequences(const std::vector<ActivationTrace>& traces, int layer, int k, std::size_t n,
                              double half_life, std::size_t tokens_per_sequence) {
  check_layer_k(traces, layer, k);
  PrototypeReport rep;
  rep.layer = layer;
  rep.k = k;
  rep.half_life = half_life;
  rep.short_list = traces.size() < n;

  std::vector<std::size_t> order(traces.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ma = traces[a].write_mass[layer](k), mb = traces[b].write_mass[layer](k);
    if (ma != mb) return ma > mb;
    return traces[a].seq_id < traces[b].seq_id;
  });
  order.resize(std::min(n, order.size()));

  for (std::size_t idx : order) {
    const auto& t = traces[idx];
    const auto& g = t.layers[layer];
    TopSequence s;
    s.seq_id = t.seq_id;
    s.mass = t.write_mass[layer](k);
    s.tokens = t.tokens;
    s.write.resize(t.tokens.size());
    s.read.resize(t.tokens.size());
    for (std::size_t i = 0; i < t.tokens.size(); ++i) {
      s.write[i] = g.write(static_cast<Eigen::Index>(i), k);
      s.read[i] = g.read(static_cast<Eigen::Index>(i), k);
    }
    std::vector<std::size_t> pos(t.tokens.size());
    std::iota(pos.begin(), pos.end(), 0);
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return s.write[a] > s.write[b]; });
    for (std::size_t i = 0; i < std::min(tokens_per_sequence, pos.size()); ++i)
      rep.top_tokens.push_back({t.tokens[pos[i]], s.write[pos[i]], t.seq_id, static_cast<std::int64_t>(pos[i])});
    rep.top_sequences.push_back(std::move(s));
  }
  return rep;
}

// ---------------------------------------------------------------------------

MetricResult l1_sparsity(const std::vector<std::vector<double>>& acts) {
  return average_over(acts, [](const std::vector<double>& a, double total) {
    double mx = 0;
    for (double v : a) mx = std::max(mx, std::abs(v));
    return mx / (total / static_cast<double>(a.size()));
  });
}

MetricResult gini(const std::vector<std::vector<double>>& acts) {
  return average_over(acts, [](const std::vector<double>& a, double total) {
    std::vector<double> s(a.size());
    std::transform(a.begin(), a.end(), s.begin(), [](double v) { return std::abs(v); });
    std::sort(s.begin(), s.end());
    const double P = static_cast<double>(s.size());
    double weighted = 0;
    for (std::size_t p = 0; p < s.size(); ++p) weighted += (P - static_cast<double>(p)) * s[p];
    return (P + 1 - 2 * weighted / total) / P;
  });
}

MetricResult entropy(const std::vector<std::vector<double>>& acts) {
  return average_over(acts, [](const std::vector<double>& a, double total) {
    double h = 0;
    for (double v : a) {
      const double p = std::abs(v) / total;
      if (p > 0) h -= p * std::log(p);
    }
    return h;
  });
}

MiResult mutual_information(std::span<const TokenId> tokens, std::span<const double> acts, int bins,
                            int min_count) {
  if (tokens.size() != acts.size())
    throw DomainError("mutual_information: " + std::to_string(tokens.size()) + " tokens but " +
                      std::to_string(acts.size()) + " activations");
  if (bins < 2) throw DomainError("mutual_information: need at least 2 bins");
  const std::size_t n = tokens.size();
  if (n == 0) return {0.0, true};

  std::unordered_map<TokenId, std::int64_t> counts;
  for (TokenId t : tokens) ++counts[t];
  // Frequent tokens get classes 0..m-1, the pooled rare class is m.
  std::map<TokenId, int> cls;
  for (const auto& [t, c] : counts)
    if (c >= min_count) cls.emplace(t, 0);
  int next = 0;
  for (auto& [t, c] : cls) c = next++;
  const int pooled = next;
  bool any_rare = false;
  std::vector<int> tc(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = cls.find(tokens[i]);
    tc[i] = it == cls.end() ? pooled : it->second;
    any_rare |= it == cls.end();
  }
  const int classes = next + (any_rare ? 1 : 0);
  if (classes < 2) return {0.0, true};

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return acts[a] < acts[b]; });
  std::vector<int> bc(n);
  std::size_t first = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (r > 0 && acts[order[r]] != acts[order[r - 1]]) first = r;
    bc[order[r]] = static_cast<int>(std::min<std::size_t>(first * bins / n, bins - 1));
  }

  const int ncls = pooled + 1;
  std::vector<double> joint(static_cast<std::size_t>(ncls) * bins, 0.0), pt(ncls, 0.0), pb(bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    joint[static_cast<std::size_t>(tc[i]) * bins + bc[i]] += 1;
    pt[tc[i]] += 1;
    pb[bc[i]] += 1;
  }
  const double N = static_cast<double>(n);
  double mi = 0;
  for (int t = 0; t < ncls; ++t)
    for (int b = 0; b < bins; ++b) {
      const double c = joint[static_cast<std::size_t>(t) * bins + b];
      if (c > 0) mi += c / N * std::log(c * N / (pt[t] * pb[b]));
    }
  return {std::max(mi, 0.0), false};
}

std::optional<double> repetition_score(std::span<const TokenId> pool) {
  if (pool.empty()) return std::nullopt;
  std::vector<TokenId> sorted(pool.begin(), pool.end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = std::unique(sorted.begin(), sorted.end()) - sorted.begin();
  return 1.0 - static_cast<double>(distinct) / static_cast<double>(pool.size());
}

std::optional<double> repetition_score(const PrototypeReport& report) {
  std::vector<TokenId> pool;
  for (const auto& t : report.top_tokens) pool.push_back(t.token);
  return repetition_score(std::span<const TokenId>(pool));
}

std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size())
    throw DomainError("spearman: series lengths differ (" + std::to_string(xs.size()) + " vs " +
                      std::to_string(ys.size()) + ")");
  if (xs.size() < 2) return std::nullopt;
  const auto rx = midranks(xs), ry = midranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<std::vector<double>> layer_rows(const std::vector<ActivationTrace>& traces, int layer) {
  check_layer_k(traces, layer, 0);
  std::vector<std::vector<double>> rows;
  for (const auto& t : traces) {
    const auto& w = t.layers[layer].write;
    for (Eigen::Index i = 0; i < w.rows(); ++i) rows.emplace_back(w.row(i).data(), w.row(i).data() + w.cols());
  }
  return rows;
}

std::vector<std::vector<double>> prototype_columns(const std::vector<ActivationTrace>& traces, int layer, int k) {
  check_layer_k(traces, layer, k);
  std::vector<std::vector<double>> cols;
  for (const auto& t : traces) {
    const auto& w = t.layers[layer].write;
    std::vector<double> c(w.rows());
    for (Eigen::Index i = 0; i < w.rows(); ++i) c[i] = w(i, k);
    cols.push_back(std::move(c));
  }
  return cols;
}

std::optional<double> half_life_repetition(const std::vector<ActivationTrace>& traces, int layer,
                                           const std::vector<double>& half_lives, std::size_t n_top) {
  if (traces.empty()) return std::nullopt;
  check_layer_k(traces, layer, 0);
  const auto channels = static_cast<std::size_t>(traces.front().layers[layer].write.cols());
  if (half_lives.size() != channels)
    throw DomainError("expected " + std::to_string(channels) + " half-lives, got " +
                      std::to_string(half_lives.size()));
  std::vector<double> hl, rep;
  for (std::size_t k = 0; k < channels; ++k) {
    auto r = repetition_score(top_sequences(traces, layer, static_cast<int>(k), n_top));
    if (!r) continue;
    hl.push_back(half_lives[k]);
    rep.push_back(*r);
  }
  return spearman(hl, rep);
}

// ---------------------------------------------------------------------------

InterventionMode parse_intervention_mode(std::string_view name) {
  if (name == "none") return InterventionMode::kNone;
  if (name == "reinit") return InterventionMode::kReinit;
  if (name == "mask_write") return InterventionMode::kMaskWrite;
  if (name == "mask_read") return InterventionMode::kMaskRead;
  throw DomainError("unknown intervention mode '" + std::string(name) +
                    "' (expected none, reinit, mask_write or mask_read)");
}

const char* intervention_mode_name(InterventionMode mode) {
  switch (mode) {
    case InterventionMode::kNone: return "none";
    case InterventionMode::kReinit: return "reinit";
    case InterventionMode::kMaskWrite: return "mask_write";
    case InterventionMode::kMaskRead: return "mask_read";
  }
  return "none";
}

template <typename Scalar>
InterventionView<Scalar>::InterventionView(const LanguageModel<Scalar>& base, const InterventionSpec& spec)
    : base_(&base), spec_(spec) {
  const int L = static_cast<int>(base.blocks.size());
  if (spec.layer < 0 || spec.layer >= L)
    throw DomainError("layer " + std::to_string(spec.layer) + " out of range [0, " + std::to_string(L) + ")");
  const int R = base.blocks[spec.layer].mixer.channels();
  if (spec.k < 0 || spec.k >= R)
    throw DomainError("prototype " + std::to_string(spec.k) + " out of range [0, " + std::to_string(R) + ")");

  switch (spec.mode) {
    case InterventionMode::kNone: break;
    case InterventionMode::kReinit: {
      modified_ = base;
      auto& P = modified_->blocks[spec.layer].mixer.prototypes;
      Rng rng(spec.seed);
      auto row = P.row(spec.k);
      fill_normal(row, 1.0 / std::sqrt(static_cast<double>(P.cols())), rng);
      break;
    }
    case InterventionMode::kMaskWrite:
    case InterventionMode::kMaskRead:
      controls_.resize(static_cast<std::size_t>(L));
      apply_channel_mask(controls_[spec.layer], R, spec.k, spec.mode == InterventionMode::kMaskWrite);
      break;
  }
}

json ProbabilityDelta::to_json() const {
  return {{"target", target},       {"p_base", p_base},           {"p_mod", p_mod},
          {"delta_pp", delta_pp},   {"delta_rel", delta_rel},     {"below_floor", below_floor},
          {"truncated", truncated}};
}

template <typename Scalar>
Vector<double> final_logits(const LanguageModel<Scalar>& model, std::span<const TokenId> context,
                            const NoDeduce<LayerControls<Scalar>>* controls, bool* truncated) {
  if (context.empty()) throw DomainError("empty context");
  const auto ctx = static_cast<std::size_t>(model.config.ctx);
  const bool cut = context.size() > ctx;
  if (cut) context = context.subspan(context.size() - ctx);
  if (truncated) *truncated = cut;
  ForwardOptions<Scalar> opts;
  opts.controls = controls;
  auto res = forward(model, context, opts);
  return res.logits.row(res.logits.rows() - 1).transpose().template cast<double>();
}

template <typename Scalar>
ProbabilityDelta probability_delta(const LanguageModel<Scalar>& base, const InterventionView<Scalar>& view,
                                   const BpeVocab& vocab, std::string_view context, std::string_view target,
                                   double floor) {
  const auto target_ids = vocab.encode(target);
  if (target_ids.size() != 1)
    throw DomainError("target '" + std::string(target) + "' encodes to " + std::to_string(target_ids.size()) +
                      " tokens; a single-token target is required");
  const auto ids = vocab.encode(context);
  auto prob = [&](const LanguageModel<Scalar>& m, const LayerControls<Scalar>* controls, bool* cut) {
    const Vector<double> z = final_logits(m, std::span<const TokenId>(ids), controls, cut);
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    return std::exp(z(target_ids[0]) - lse);
  };
  ProbabilityDelta d;
  d.target = target_ids[0];
  d.p_base = prob(base, nullptr, &d.truncated);
  d.p_mod = prob(view.model(), view.controls(), nullptr);
  d.delta_pp = (d.p_mod - d.p_base) * 100.0;
  d.delta_rel = d.p_base > 0 ? (d.p_mod - d.p_base) / d.p_base * 100.0 : 0.0;
  d.below_floor = d.p_base < floor;
  return d;
}

template <typename Scalar>
LayerControls<Scalar> mask_all(const LanguageModel<Scalar>& model, bool write_side) {
  LayerControls<Scalar> c(model.blocks.size());
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const int R = model.blocks[l].mixer.channels();
    for (int k = 0; k < R; ++k) apply_channel_mask(c[l], R, k, write_side);
  }
  return c;
}

// ---------------------------------------------------------------------------

void write_html_snapshot(const std::filesystem::path& path, const std::vector<PrototypeReport>& reports,
                         const BpeVocab& vocab) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>prototype snapshot</title>\n"
       "<style>body{font-family:sans-serif;margin:2em}pre{white-space:pre-wrap;line-height:1.8}"
       "span.t{border-radius:3px}h2{font-size:1.1em;margin-top:2em}</style></head><body>\n";
  for (const auto& r : reports) {
    f << "<h2>layer " << r.layer << ", prototype " << r.k;
    if (r.half_life > 0) f << " (half-life " << r.half_life << ")";
    f << "</h2>\n";
    if (auto rep = repetition_score(r)) f << "<p>repetition " << *rep << "</p>\n";
    for (const auto& s : r.top_sequences) {
      double mx = 0;
      for (double w : s.write) mx = std::max(mx, w);
      f << "<pre>";
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        const double a = mx > 0 ? s.write[i] / mx : 0.0;
        const TokenId id = s.tokens[i];
        const std::string piece = id >= 0 && id < vocab.size() ? vocab.token_bytes(id) : std::string("?");
        f << "<span class=\"t\" title=\"" << s.write[i] << "\" style=\"background:rgba(230,120,20," << a << ")\">"
          << html_escape(piece) << "</span>";
      }
      f << "</pre>\n";
    }
  }
  f << "</body></html>\n";
  if (!f) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------

#define PROTOT_INSTANTIATE_INTERP(S)                                                                         \
  template std::vector<ActivationTrace> capture<S>(const LanguageModel<S>&,                                  \
                                                   const std::vector<std::vector<TokenId>>&, std::int64_t,    \
                                                   const LayerControls<S>*);                                  \
  template class InterventionView<S>;                                                                        \
  template Vector<double> final_logits<S>(const LanguageModel<S>&, std::span<const TokenId>,                 \
                                          const LayerControls<S>*, bool*);                                   \
  template ProbabilityDelta probability_delta<S>(const LanguageModel<S>&, const InterventionView<S>&,        \
                                                 const BpeVocab&, std::string_view, std::string_view, double); \
  template LayerControls<S> mask_all<S>(const LanguageModel<S>&, bool);

PROTOT_INSTANTIATE_INTERP(float)
PROTOT_INSTANTIATE_INTERP(double)

}  // namespace protot
