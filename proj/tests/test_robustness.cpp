#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "protot/robustness.hpp"

using namespace protot;

namespace {

std::vector<double> random_simplex(std::size_t n, Rng& rng, double zero_prob = 0.0) {
  std::exponential_distribution<double> e(1.0);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> v(n);
  double s = 0;
  for (auto& x : v) {
    x = u(rng) < zero_prob ? 0.0 : e(rng);
    s += x;
  }
  if (s == 0) {
    v[0] = 1;
    s = 1;
  }
  for (auto& x : v) x /= s;
  return v;
}

ModelConfig small_config() {
  ModelConfig c;
  c.hidden = 8;
  c.layers = 2;
  c.prototypes = 4;
  c.ctx = 16;
  c.vocab_size = 300;
  c.dropout = 0;
  return c;
}

LanguageModel<double> small_model(std::uint64_t seed) {
  Rng rng(seed);
  auto m = LanguageModel<double>::init(small_config(), rng);
  fill_normal(m.embedding, 0.5, rng);
  return m;
}

const BpeVocab& toy_vocab() {
  static const BpeVocab v = BpeVocab::train(
      std::vector<std::string>{"the cat sat on the mat", "the dog did not sit", "she said he was here"}, 290);
  return v;
}

}  // namespace

TEST(JsDivergence, ClosedForms) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  EXPECT_EQ(js_divergence(p, p), 0.0);
  const std::vector<double> a{0.5, 0.5, 0, 0}, b{0, 0, 0.25, 0.75};
  EXPECT_NEAR(js_divergence(a, b), 1.0, 1e-15);
  const std::vector<double> one{1, 0}, half{0.5, 0.5};
  const double expected = 0.5 * std::log2(1 / 0.75) + 0.5 * (0.5 * std::log2(0.5 / 0.75) + 0.5 * std::log2(0.5 / 0.25));
  EXPECT_NEAR(js_divergence(one, half), expected, 1e-15);
  EXPECT_NEAR(expected, 0.3113, 1e-4);
  EXPECT_THROW(js_divergence(p, one), DomainError);
}

TEST(JsDivergence, SymmetryBoundsAndOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_simplex(2 + trial % 30, rng, 0.2);
    const auto q = random_simplex(p.size(), rng, 0.2);
    const double js = js_divergence(p, q);
    EXPECT_EQ(js, js_divergence(q, p));
    EXPECT_GE(js, 0.0);
    EXPECT_LE(js, 1.0);
    EXPECT_NEAR(js, oracle::js_divergence(p, q), 1e-12);
  }
}

TEST(InterventionMetricsTest, Identity) {
  Rng rng(3);
  const auto p = random_simplex(50, rng);
  const auto m = intervention_metrics(p, p, 10);
  EXPECT_EQ(m.js, 0.0);
  EXPECT_EQ(m.overlap, 1.0);
  ASSERT_TRUE(m.spearman.has_value());
  EXPECT_NEAR(*m.spearman, 1.0, 1e-12);
  EXPECT_TRUE(m.top1_invariant);
}

TEST(InterventionMetricsTest, SwapTopTwo) {
  std::vector<double> p(20);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(p.size() - i);
  double s = 0;
  for (double x : p) s += x;
  for (auto& x : p) x /= s;
  auto q = p;
  std::swap(q[0], q[1]);
  const auto m = intervention_metrics(p, q, 10);
  EXPECT_EQ(m.overlap, 1.0);
  EXPECT_FALSE(m.top1_invariant);
  EXPECT_LT(*m.spearman, 1.0);
}

TEST(InterventionMetricsTest, DisjointTopSets) {
  std::vector<double> p(40, 0.0), q(40, 0.0);
  for (int i = 0; i < 10; ++i) {
    p[i] = 0.1;
    q[20 + i] = 0.1;
  }
  const auto m = intervention_metrics(p, q, 10);
  EXPECT_EQ(m.overlap, 0.0);
  EXPECT_NEAR(m.js, 1.0, 1e-15);
  EXPECT_FALSE(m.top1_invariant);
  EXPECT_THROW(intervention_metrics(p, q, 0), DomainError);
}

TEST(NextToken, DistributionProperties) {
  const auto m = small_model(1);
  const auto d = next_token_distribution(m, toy_vocab(), "the cat sat");
  EXPECT_NEAR(d.probs.sum(), 1.0, 1e-12);
  EXPECT_GE(d.probs.minCoeff(), 0.0);
  EXPECT_FALSE(d.truncated);
  const auto again = next_token_distribution(m, toy_vocab(), "the cat sat");
  EXPECT_EQ((again.probs - d.probs).cwiseAbs().maxCoeff(), 0.0);
  const auto long_d = next_token_distribution(m, toy_vocab(), "the cat sat on the mat the dog did not sit she said");
  EXPECT_TRUE(long_d.truncated);
  EXPECT_THROW(next_token_distribution(m, toy_vocab(), ""), DomainError);
}

TEST(Pmr, IdentityAndClampRows) {
  const auto m = small_model(2);
  Rng rng(5);
  std::uniform_int_distribution<TokenId> tok(0, 289);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<TokenId> x(3 + trial % 7), xp(2 + (trial * 3) % 9);
    for (auto& t : x) t = tok(rng);
    for (auto& t : xp) t = tok(rng);
    std::vector<GateWeights<double>> src, clamped;
    const auto r = pmr(m, std::span<const TokenId>(x), std::span<const TokenId>(xp), &src, &clamped);
    ASSERT_FALSE(r.skipped);
    EXPECT_NEAR(r.pmr, (r.js_base - r.js_clamped) / r.js_base, 1e-12);
    const auto n = static_cast<Eigen::Index>(x.size()), np = static_cast<Eigen::Index>(xp.size());
    for (std::size_t l = 0; l < src.size(); ++l)
      for (Eigen::Index i = 0; i < np; ++i) {
        const Eigen::Index s = i + n - np;
        if (s < 0) continue;
        EXPECT_EQ(clamped[l].write.row(i), src[l].write.row(s));
        EXPECT_EQ(clamped[l].read.row(i), src[l].read.row(s));
      }
  }
}

TEST(Pmr, SameInputSkippedAndErrors) {
  const auto m = small_model(3);
  const std::vector<TokenId> x{1, 2, 3};
  const auto r = pmr(m, std::span<const TokenId>(x), std::span<const TokenId>(x));
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.js_base, 0.0);
  EXPECT_EQ(r.js_clamped, 0.0);
  EXPECT_THROW(pmr(m, std::span<const TokenId>(x), std::span<const TokenId>()), DomainError);
  EXPECT_NEAR(pmr_value(0.4, 0.3), 0.25, 1e-15);
  EXPECT_THROW(pmr_value(0.0, 0.1), DomainError);
}

TEST(Evaluation, PerturbationReport) {
  const auto m = small_model(4);
  const std::vector<PerturbationPair> pairs{
      {"the cat sat", "the cat sat", "typo"},      {"the dog did", "the dog did", "typo"},
      {"the cat sat", "teh cat sat", "spelling"},  {"she said", "she said", "unknown"},
      {"", "x", "typo"},
  };
  const auto rep = perturbation_eval(m, toy_vocab(), pairs);
  EXPECT_EQ(rep.skipped, 2);
  ASSERT_EQ(rep.categories.size(), 2u);
  EXPECT_EQ(rep.categories[0].category, "spelling");
  EXPECT_EQ(rep.categories[1].category, "typo");
  EXPECT_EQ(rep.categories[1].n, 2);
  EXPECT_EQ(rep.categories[1].js_mean, 0.0);
  const auto p = next_token_distribution(m, toy_vocab(), "the cat sat").probs;
  const auto q = next_token_distribution(m, toy_vocab(), "teh cat sat").probs;
  EXPECT_NEAR(rep.categories[0].js_mean,
              oracle::js_divergence(std::vector<double>(p.data(), p.data() + p.size()),
                        std::vector<double>(q.data(), q.data() + q.size())),
              1e-12);
  EXPECT_THROW(perturbation_eval(m, toy_vocab(), {}), DomainError);
}

TEST(Evaluation, PmrAndInterventionReports) {
  const auto m = small_model(5);
  const std::vector<PerturbationPair> pairs{
      {"the cat sat", "the cat sat", "typo"},
      {"the cat sat", "teh cat sat", "typo"},
      {"the dog did not sit", "the dog did sit", "negation"},
      {"she said", "he said", "gender"},
  };
  const auto pr = pmr_eval(m, toy_vocab(), pairs);
  EXPECT_EQ(pr.kind, RobustnessReport::Kind::kPmr);
  const auto& typo = pr.categories.back();
  EXPECT_EQ(typo.category, "typo");
  EXPECT_EQ(typo.n, 2);
  EXPECT_EQ(typo.pmr_excluded, 1);
  const auto one = pmr(m, toy_vocab(), pairs[1]);
  EXPECT_NEAR(typo.pmr_mean, one.pmr, 1e-15);
  EXPECT_EQ(typo.pmr_positive, one.pmr > 0 ? 1.0 : 0.0);

  const auto ir = intervention_eval(m, toy_vocab(), pairs, 10);
  EXPECT_EQ(ir.skipped, 2);
  ASSERT_EQ(ir.categories.size(), 2u);
  EXPECT_TRUE(ir.categories[0].has_intervention);

  const auto dir = std::filesystem::temp_directory_path();
  ir.write_csv(dir / "protot_ir.csv");
  std::ifstream f(dir / "protot_ir.csv");
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "category,n,js,ov,sp,t1");
  const auto j = pr.to_json();
  EXPECT_EQ(j["kind"], "pmr");
  EXPECT_TRUE(j["categories"][0].contains("pmr_std"));
  EXPECT_FALSE(perturbation_eval(m, toy_vocab(), pairs).to_json()["categories"][0].contains("pmr_std"));
}

TEST(Evaluation, ReadPairs) {
  const auto path = std::filesystem::temp_directory_path() / "protot_pairs.jsonl";
  std::ofstream(path) << "{\"original\": \"a\", \"perturbed\": \"b\", \"category\": \"typo\"}\n\n"
                         "{\"original\": \"c\", \"perturbed\": \"d\", \"category\": \"gender\"}\n";
  const auto pairs = read_pairs_jsonl(path);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[1].category, "gender");
  std::ofstream(path) << "{\"original\": \"a\"}\n";
  EXPECT_THROW(read_pairs_jsonl(path), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_pairs_jsonl(path), IoError);
}
