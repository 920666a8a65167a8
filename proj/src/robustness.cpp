#include "protot/robustness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "protot/interpretability.hpp"

namespace protot {

namespace {

using nlohmann::json;

constexpr std::array<std::string_view, 7> kNoise{"abbreviation", "contraction", "morphology", "punctuation",
                                                  "spelling",     "synonym",     "typo"};
constexpr std::array<std::string_view, 3> kIntervention{"gender", "negation", "number"};

std::span<const TokenId> tail(std::span<const TokenId> ids, int ctx, bool* truncated) {
  const bool cut = ids.size() > static_cast<std::size_t>(ctx);
  if (truncated) *truncated = cut;
  return cut ? ids.subspan(ids.size() - static_cast<std::size_t>(ctx)) : ids;
}

Vector<double> softmax(const Vector<double>& z) {
  const double mx = z.maxCoeff();
  Vector<double> e = (z.array() - mx).exp().matrix();
  return e / e.sum();
}

std::vector<std::size_t> top_k(std::span<const double> p, int k) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] != p[b] ? p[a] > p[b] : a < b; });
  idx.resize(kk);
  return idx;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

bool usable(const PerturbationPair& p, bool intervention) {
  if (p.original.empty() || p.perturbed.empty()) return false;
  return intervention ? is_intervention_category(p.category)
                      : is_noise_category(p.category) || is_intervention_category(p.category);
}

}  // namespace

bool is_noise_category(std::string_view c) { return std::find(kNoise.begin(), kNoise.end(), c) != kNoise.end(); }

bool is_intervention_category(std::string_view c) {
  return std::find(kIntervention.begin(), kIntervention.end(), c) != kIntervention.end();
}

std::vector<PerturbationPair> read_pairs_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<PerturbationPair> out;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("original").get<std::string>(), j.at("perturbed").get<std::string>(),
                     j.at("category").get<std::string>()});
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <typename Scalar>
NextTokenDistribution next_token_distribution(const LanguageModel<Scalar>& model, std::span<const TokenId> ids,
                                              const NoDeduce<LayerControls<Scalar>>* controls) {
  NextTokenDistribution d;
  d.probs = softmax(final_logits(model, ids, controls, &d.truncated));
  return d;
}

template <typename Scalar>
NextTokenDistribution next_token_distribution(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                                              std::string_view text) {
  const auto ids = vocab.encode(text);
  return next_token_distribution(model, std::span<const TokenId>(ids));
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    throw DomainError("js_divergence: lengths differ (" + std::to_string(p.size()) + " vs " +
                      std::to_string(q.size()) + ")");
  double js = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    const double a = p[i] > 0 ? p[i] * std::log2(p[i] / m) : 0.0;
    const double b = q[i] > 0 ? q[i] * std::log2(q[i] / m) : 0.0;
    js += 0.5 * (a + b);  // a + b keeps js(p, q) == js(q, p) bitwise
  }
  return std::clamp(js, 0.0, 1.0);
}

double pmr_value(double js_base, double js_clamped) {
  if (js_base == 0) throw DomainError("PMR undefined for js_base == 0");
  return (js_base - js_clamped) / js_base;
}

template <typename Scalar>
PmrResult pmr(const LanguageModel<Scalar>& model, std::span<const TokenId> x, std::span<const TokenId> x_prime,
              NoDeduce<std::vector<GateWeights<Scalar>>>* source_gates,
              NoDeduce<std::vector<GateWeights<Scalar>>>* clamped_gates) {
  if (x.empty() || x_prime.empty()) throw DomainError("pmr: both texts must tokenize to at least one id");
  x = tail(x, model.config.ctx, nullptr);
  x_prime = tail(x_prime, model.config.ctx, nullptr);

  ForwardOptions<Scalar> opts;
  opts.capture = true;
  auto src = forward(model, x, opts);
  auto last = [](const ForwardResult<Scalar>& r) {
    return softmax(r.logits.row(r.logits.rows() - 1).transpose().template cast<double>());
  };
  const Vector<double> p = last(src);
  const Vector<double> q = last(forward(model, x_prime));

  LayerControls<Scalar> controls(model.blocks.size());
  for (std::size_t l = 0; l < controls.size(); ++l) {
    controls[l].clamp = &src.gates[l];
    controls[l].clamp_offset = static_cast<std::int64_t>(x.size()) - static_cast<std::int64_t>(x_prime.size());
  }
  ForwardOptions<Scalar> copts;
  copts.controls = &controls;
  copts.capture = clamped_gates != nullptr;
  auto clamped = forward(model, x_prime, copts);
  const Vector<double> qc = last(clamped);

  PmrResult r;
  r.js_base = js_divergence(std::span<const double>(p.data(), p.size()), std::span<const double>(q.data(), q.size()));
  r.js_clamped =
      js_divergence(std::span<const double>(p.data(), p.size()), std::span<const double>(qc.data(), qc.size()));
  r.skipped = r.js_base == 0;
  if (!r.skipped) r.pmr = pmr_value(r.js_base, r.js_clamped);
  if (clamped_gates) *clamped_gates = std::move(clamped.gates);
  if (source_gates) *source_gates = std::move(src.gates);
  return r;
}

template <typename Scalar>
PmrResult pmr(const LanguageModel<Scalar>& model, const BpeVocab& vocab, const PerturbationPair& pair) {
  const auto x = vocab.encode(pair.original);
  const auto xp = vocab.encode(pair.perturbed);
  return pmr(model, std::span<const TokenId>(x), std::span<const TokenId>(xp));
}

InterventionMetrics intervention_metrics(std::span<const double> p, std::span<const double> q, int k_top) {
  if (k_top < 1) throw DomainError("k_top must be positive");
  InterventionMetrics m;
  m.js = js_divergence(p, q);
  const auto tp = top_k(p, k_top), tq = top_k(q, k_top);
  std::vector<std::size_t> sp(tp), sq(tq);
  std::sort(sp.begin(), sp.end());
  std::sort(sq.begin(), sq.end());
  std::vector<std::size_t> common, uni;
  std::set_intersection(sp.begin(), sp.end(), sq.begin(), sq.end(), std::back_inserter(common));
  std::set_union(sp.begin(), sp.end(), sq.begin(), sq.end(), std::back_inserter(uni));
  m.overlap = tp.empty() ? 0.0 : static_cast<double>(common.size()) / static_cast<double>(tp.size());
  std::vector<double> pu, qu;
  for (std::size_t i : uni) {
    pu.push_back(p[i]);
    qu.push_back(q[i]);
  }
  m.spearman = spearman(pu, qu);
  m.top1_invariant = !tp.empty() && tp[0] == tq[0];
  return m;
}

// ---------------------------------------------------------------------------

json RobustnessReport::to_json() const {
  json cats = json::array();
  for (const auto& c : categories) {
    json j = {{"category", c.category}, {"n", c.n}, {"js_mean", c.js_mean}};
    if (c.has_pmr) {
      j["pmr_mean"] = c.pmr_mean;
      j["pmr_std"] = c.pmr_std;
      j["pmr_positive"] = c.pmr_positive;
      j["js_base_mean"] = c.js_base_mean;
      j["js_clamped_mean"] = c.js_clamped_mean;
      j["pmr_excluded"] = c.pmr_excluded;
    }
    if (c.has_intervention) {
      j["overlap_mean"] = c.overlap_mean;
      j["spearman_mean"] = c.spearman_mean;
      j["top1_mean"] = c.top1_mean;
      j["spearman_undefined"] = c.spearman_undefined;
    }
    cats.push_back(std::move(j));
  }
  const char* kinds[] = {"perturbation", "pmr", "intervention"};
  return {{"kind", kinds[static_cast<int>(kind)]}, {"categories", cats}, {"skipped", skipped}};
}

void RobustnessReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f.precision(10);
  switch (kind) {
    case Kind::kPerturbation:
      f << "category,n,js\n";
      for (const auto& c : categories) f << c.category << ',' << c.n << ',' << c.js_mean << '\n';
      break;
    case Kind::kPmr:
      f << "category,n,js_base,js_clamped,pmr_mean,pmr_std,pmr_pos,excluded\n";
      for (const auto& c : categories)
        f << c.category << ',' << c.n << ',' << c.js_base_mean << ',' << c.js_clamped_mean << ',' << c.pmr_mean
          << ',' << c.pmr_std << ',' << c.pmr_positive << ',' << c.pmr_excluded << '\n';
      break;
    case Kind::kIntervention:
      f << "category,n,js,ov,sp,t1\n";
      for (const auto& c : categories)
        f << c.category << ',' << c.n << ',' << c.js_mean << ',' << c.overlap_mean << ',' << c.spearman_mean << ','
          << c.top1_mean << '\n';
      break;
  }
  if (!f) throw IoError("write failed: " + path.string());
}

template <typename Scalar>
RobustnessReport perturbation_eval(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                                   const std::vector<PerturbationPair>& pairs) {
  if (pairs.empty()) throw DomainError("no perturbation pairs");
  RobustnessReport rep;
  std::map<std::string, std::vector<double>> js;
  for (const auto& pair : pairs) {
    if (!usable(pair, false)) {
      ++rep.skipped;
      continue;
    }
    const auto p = next_token_distribution(model, vocab, pair.original).probs;
    const auto q = next_token_distribution(model, vocab, pair.perturbed).probs;
    js[pair.category].push_back(
        js_divergence(std::span<const double>(p.data(), p.size()), std::span<const double>(q.data(), q.size())));
  }
  for (const auto& [cat, v] : js) rep.categories.push_back({cat, static_cast<std::int64_t>(v.size()), mean(v)});
  return rep;
}

template <typename Scalar>
RobustnessReport pmr_eval(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                          const std::vector<PerturbationPair>& pairs) {
  if (pairs.empty()) throw DomainError("no perturbation pairs");
  RobustnessReport rep;
  rep.kind = RobustnessReport::Kind::kPmr;
  struct Acc {
    std::vector<double> js_base, js_clamped, pmr;
    std::int64_t excluded = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& pair : pairs) {
    if (!usable(pair, false)) {
      ++rep.skipped;
      continue;
    }
    const auto r = pmr(model, vocab, pair);
    auto& a = acc[pair.category];
    a.js_base.push_back(r.js_base);
    a.js_clamped.push_back(r.js_clamped);
    if (r.skipped)
      ++a.excluded;
    else
      a.pmr.push_back(r.pmr);
  }
  for (const auto& [cat, a] : acc) {
    CategoryStats c;
    c.category = cat;
    c.n = static_cast<std::int64_t>(a.js_base.size());
    c.js_mean = mean(a.js_base);
    c.has_pmr = true;
    c.js_base_mean = c.js_mean;
    c.js_clamped_mean = mean(a.js_clamped);
    c.pmr_mean = mean(a.pmr);
    c.pmr_std = sample_std(a.pmr);
    c.pmr_positive = a.pmr.empty() ? 0.0
                                   : static_cast<double>(std::count_if(a.pmr.begin(), a.pmr.end(),
                                                                       [](double v) { return v > 0; })) /
                                         static_cast<double>(a.pmr.size());
    c.pmr_excluded = a.excluded;
    rep.categories.push_back(std::move(c));
  }
  return rep;
}

template <typename Scalar>
RobustnessReport intervention_eval(const LanguageModel<Scalar>& model, const BpeVocab& vocab,
                                   const std::vector<PerturbationPair>& pairs, int k_top) {
  if (pairs.empty()) throw DomainError("no intervention pairs");
  RobustnessReport rep;
  rep.kind = RobustnessReport::Kind::kIntervention;
  struct Acc {
    std::vector<double> js, ov, sp, t1;
    std::int64_t undefined = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& pair : pairs) {
    if (!usable(pair, true)) {
      ++rep.skipped;
      continue;
    }
    const auto p = next_token_distribution(model, vocab, pair.original).probs;
    const auto q = next_token_distribution(model, vocab, pair.perturbed).probs;
    const auto m = intervention_metrics(std::span<const double>(p.data(), p.size()),
                                        std::span<const double>(q.data(), q.size()), k_top);
    auto& a = acc[pair.category];
    a.js.push_back(m.js);
    a.ov.push_back(m.overlap);
    a.t1.push_back(m.top1_invariant ? 1.0 : 0.0);
    if (m.spearman)
      a.sp.push_back(*m.spearman);
    else
      ++a.undefined;
  }
  for (const auto& [cat, a] : acc) {
    CategoryStats c;
    c.category = cat;
    c.n = static_cast<std::int64_t>(a.js.size());
    c.js_mean = mean(a.js);
    c.has_intervention = true;
    c.overlap_mean = mean(a.ov);
    c.spearman_mean = mean(a.sp);
    c.top1_mean = mean(a.t1);
    c.spearman_undefined = a.undefined;
    rep.categories.push_back(std::move(c));
  }
  return rep;
}

#define PROTOT_INSTANTIATE_ROBUSTNESS(S)                                                                            \
  template NextTokenDistribution next_token_distribution<S>(const LanguageModel<S>&, std::span<const TokenId>,      \
                                                            const LayerControls<S>*);                               \
  template NextTokenDistribution next_token_distribution<S>(const LanguageModel<S>&, const BpeVocab&,               \
                                                            std::string_view);                                      \
  template PmrResult pmr<S>(const LanguageModel<S>&, std::span<const TokenId>, std::span<const TokenId>,            \
                            std::vector<GateWeights<S>>*, std::vector<GateWeights<S>>*);                            \
  template PmrResult pmr<S>(const LanguageModel<S>&, const BpeVocab&, const PerturbationPair&);                     \
  template RobustnessReport perturbation_eval<S>(const LanguageModel<S>&, const BpeVocab&,                          \
                                                 const std::vector<PerturbationPair>&);                             \
  template RobustnessReport pmr_eval<S>(const LanguageModel<S>&, const BpeVocab&,                                   \
                                        const std::vector<PerturbationPair>&);                                      \
  template RobustnessReport intervention_eval<S>(const LanguageModel<S>&, const BpeVocab&,                          \
                                                 const std::vector<PerturbationPair>&, int);

PROTOT_INSTANTIATE_ROBUSTNESS(float)
PROTOT_INSTANTIATE_ROBUSTNESS(double)

}  // namespace protot
