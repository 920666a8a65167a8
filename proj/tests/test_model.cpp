#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "protot/model.hpp"

using namespace protot;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden = 8;
  c.layers = 2;
  c.prototypes = 4;
  c.ctx = 16;
  c.vocab_size = 11;
  return c;
}

template <typename Scalar>
LanguageModel<Scalar> tiny_model(std::uint64_t seed, ModelConfig c = tiny_config()) {
  Rng rng(seed);
  auto m = LanguageModel<Scalar>::init(c, rng);
  // Larger embeddings than the default init so every path carries signal.
  fill_normal(m.embedding, 0.5, rng);
  for (auto& b : m.blocks) {
    fill_normal(b.mixer_norm, 0.3, rng);
    b.mixer_norm.array() += 1;
    if (b.mixer.has_conv()) fill_normal(b.mixer.conv_kernel, 0.5, rng);
  }
  return m;
}

std::vector<TokenId> random_tokens(int n, int vocab, Rng& rng) {
  std::uniform_int_distribution<TokenId> d(0, vocab - 1);
  std::vector<TokenId> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = d(rng);
  return t;
}

}  // namespace

TEST(ModelConfigTest, JsonRoundTripAndDefaults) {
  ModelConfig c;
  EXPECT_EQ(c.ffn_dim(), 691);
  EXPECT_EQ(c.value_dim(), 128);
  const auto j = c.to_json();
  EXPECT_EQ(j["h"], 256);
  EXPECT_EQ(j["L"], 6);
  EXPECT_EQ(j["R"], 32);
  const auto d = ModelConfig::from_json({{"h", 64}, {"peak_lr", 1e-3}});
  EXPECT_EQ(d.hidden, 64);
  EXPECT_EQ(d.layers, 6);
  EXPECT_THROW(ModelConfig::from_json({{"h", 7}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_json({{"ctx", 1}}), ConfigError);
  EXPECT_THROW(ModelConfig::from_json({{"L", "six"}}), ConfigError);
}

TEST(ModelInit, ParameterCount) {
  Rng rng(0);
  const auto m = LanguageModel<float>::init(ModelConfig{}, rng);
  const auto count = m.parameter_count();
  // vocab*h embedding + per layer (2 norms, R*h protos, value, query, output,
  // R gammas, 3 scalars, optional conv, 3 ffn maps) + final norm.
  const std::int64_t h = 256, R = 32, V = 16000, dv = 128, f = 691;
  std::int64_t expect = V * h + h;
  for (int l = 0; l < 6; ++l)
    expect += 2 * h + R * h + dv * h + (l > 0 ? h * h : 0) + h * dv + R + 3 + (l < 2 ? 5 * dv : 0) + 3 * h * f;
  EXPECT_EQ(count.unique, expect);
  EXPECT_EQ(count.per_module, expect + V * h);
  EXPECT_NEAR(static_cast<double>(count.per_module) / 12205266.0, 1.0, 0.02);
}

TEST(ModelInit, InitialLossNearLogVocab) {
  Rng rng(1);
  ModelConfig c;
  c.layers = 2;
  c.ctx = 32;
  const auto m = LanguageModel<float>::init(c, rng);
  const auto t = random_tokens(32, c.vocab_size, rng);
  EXPECT_NEAR(loss(m, t), std::log(16000.0), 0.1);
}

TEST(ModelForward, Errors) {
  const auto m = tiny_model<double>(2);
  std::vector<TokenId> too_long(17, 1);
  EXPECT_THROW(forward(m, too_long), DomainError);
  EXPECT_THROW(forward(m, std::vector<TokenId>{1, 11}), DomainError);
  EXPECT_THROW(forward(m, std::vector<TokenId>{}), DomainError);
  EXPECT_THROW(loss(m, std::vector<TokenId>{3}), DomainError);
}

TEST(ModelForward, Causal) {
  const auto m = tiny_model<double>(3);
  Rng rng(3);
  const auto t = random_tokens(16, 11, rng);
  const auto base = forward(m, t).logits;
  for (int j = 0; j < 16; ++j) {
    auto t2 = t;
    t2[j] = (t2[j] + 1) % 11;
    const auto l2 = forward(m, t2).logits;
    EXPECT_TRUE((l2.topRows(j).array() == base.topRows(j).array()).all()) << j;
  }
}

TEST(ModelForward, CaptureReturnsEveryLayer) {
  const auto m = tiny_model<double>(4);
  ForwardOptions<double> o;
  o.capture = true;
  const auto r = forward(m, std::vector<TokenId>{1, 2, 3}, o);
  ASSERT_EQ(r.gates.size(), 2u);
  EXPECT_EQ(r.gates[1].write.rows(), 3);
  EXPECT_NEAR(r.gates[1].read.row(2).sum(), 1.0, 1e-12);
}

TEST(ModelForward, AlphaZeroMakesPositionsIndependent) {
  auto m = tiny_model<double>(5);
  for (auto& b : m.blocks) b.mixer.alpha = 0;
  const std::vector<TokenId> a{1, 2, 3, 4}, b{7, 9, 0, 4};
  const auto la = forward(m, a).logits, lb = forward(m, b).logits;
  EXPECT_TRUE((la.row(3).array() == lb.row(3).array()).all());
  // Different matrix shapes may round differently, so this one is not bitwise.
  EXPECT_LT((forward(m, std::vector<TokenId>{4}).logits.row(0) - la.row(3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ModelForward, ResidualIdentityIsEmbeddingUnembedding) {
  auto m = tiny_model<double>(6);
  for (auto& b : m.blocks) {
    b.mixer.alpha = 0;
    b.ffn.down.setZero();
  }
  const std::vector<TokenId> t{3, 5};
  const auto logits = forward(m, t).logits;
  for (int i = 0; i < 2; ++i) {
    const Vector<double> e = m.embedding.row(t[i]).transpose();
    const double inv = 1.0 / std::sqrt(e.squaredNorm() / 8 + 1e-6);
    const Vector<double> expect = m.embedding * (e.cwiseProduct(m.final_norm) * inv);
    EXPECT_LT((logits.row(i).transpose() - expect).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(ModelForward, TiedWeights) {
  auto m = tiny_model<double>(7);
  const std::vector<TokenId> t{1, 2, 3};
  const auto before = forward(m, t).logits;
  m.embedding.row(2).array() += 0.5;
  const auto after = forward(m, t).logits;
  EXPECT_NE(before(0, 2), after(0, 2));  // output score of token 2 at a position not reading it
  EXPECT_FALSE((before.row(1).array() == after.row(1).array()).all());
  EXPECT_EQ(m.head.size(), 0);
}

TEST(ModelLoss, UniformAndShiftInvariance) {
  auto m = tiny_model<double>(8);
  m.embedding.setZero();  // every logit 0
  EXPECT_NEAR(loss(m, std::vector<TokenId>{1, 2, 3, 4}), std::log(11.0), 1e-12);
  EXPECT_NEAR(perplexity(m, std::vector<TokenId>{1, 2, 3, 4, 5, 6}), 11.0, 1e-9);

  const auto m2 = tiny_model<double>(9);
  const std::vector<TokenId> t{1, 2, 3, 4, 5};
  Matrix<double> logits = forward(m2, t).logits;
  auto ce = [&](const Matrix<double>& l) {
    double s = 0;
    for (int i = 0; i < 4; ++i) {
      const double mx = l.row(i).maxCoeff();
      s += mx + std::log((l.row(i).array() - mx).exp().sum()) - l(i, t[i + 1]);
    }
    return s / 4;
  };
  EXPECT_NEAR(ce(logits), loss(m2, t), 1e-12);
  logits.row(2).array() += 123.0;
  EXPECT_NEAR(ce(logits), loss(m2, t), 1e-6);
}

TEST(ModelBackward, FullStackFiniteDifferences) {
  for (bool tied : {true, false}) {
    ModelConfig c = tiny_config();
    c.tie_embeddings = tied;
    auto m = tiny_model<double>(10, c);
    Rng rng(10);
    if (!tied) fill_normal(m.head, 0.5, rng);
    const auto t = random_tokens(7, 11, rng);  // T = 6 positions
    auto grads = m.zeros_like();
    loss_and_backward(m, t, grads);
    auto params = m.parameters();
    auto gviews = grads.parameters();
    ASSERT_EQ(params.size(), gviews.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto fd = oracle::finite_difference(params[i].data, [&] { return loss(m, t); });
      EXPECT_LT(oracle::relative_error(fd, gviews[i].data), 1e-4)
          << params[i].name << (tied ? " tied" : " untied");
    }
  }
}

TEST(ModelBackward, GradientScaleAndAccumulation) {
  const auto m = tiny_model<double>(11);
  const std::vector<TokenId> t{1, 5, 2, 7};
  auto g1 = m.zeros_like(), g2 = m.zeros_like();
  loss_and_backward(m, t, g1);
  loss_and_backward(m, t, g2, nullptr, 0.5);
  loss_and_backward(m, t, g2, nullptr, 0.5);
  EXPECT_LT((g1.embedding - g2.embedding).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(ModelBackward, DropoutChangesLossOnlyInTraining) {
  ModelConfig c = tiny_config();
  c.dropout = 0.5;
  const auto m = tiny_model<double>(12, c);
  const std::vector<TokenId> t{1, 5, 2, 7, 3};
  auto g = m.zeros_like();
  Rng a(1), b(1);
  const double l1 = loss_and_backward(m, t, g, &a);
  const double l2 = loss_and_backward(m, t, g, &b);
  EXPECT_EQ(l1, l2);
  EXPECT_NE(l1, loss(m, t));
  EXPECT_NEAR(loss_and_backward(m, t, g), loss(m, t), 1e-14);
}

TEST(ModelStep, MatchesParallelForward) {
  const auto m = tiny_model<double>(13);
  Rng rng(13);
  const auto t = random_tokens(16, 11, rng);
  const auto logits = forward(m, t).logits;
  auto state = ModelState<double>::zeros(m);
  for (int i = 0; i < 16; ++i) {
    const Vector<double> s = step(m, state, t[i]);
    EXPECT_LT((s.transpose() - logits.row(i)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ModelStep, FloatParity) {
  Rng rng(14);
  ModelConfig c;
  c.hidden = 64;
  c.layers = 3;
  c.vocab_size = 50;
  c.ctx = 64;
  const auto m = LanguageModel<float>::init(c, rng);
  const auto t = random_tokens(64, 50, rng);
  const auto logits = forward(m, t).logits;
  auto state = ModelState<float>::zeros(m);
  for (int i = 0; i < 64; ++i)
    EXPECT_LT((step(m, state, t[i]).transpose() - logits.row(i)).cwiseAbs().maxCoeff(), 1e-4f);
}

TEST(ModelGenerate, GreedyDeterministicAndConsistent) {
  const auto m = tiny_model<double>(15);
  GenerateOptions o;
  o.max_new = 8;
  const std::vector<TokenId> prompt{1, 2};
  const auto a = generate(m, prompt, o), b = generate(m, prompt, o);
  EXPECT_EQ(a.tokens, b.tokens);
  ASSERT_EQ(a.tokens.size(), 10u);
  // Each greedy pick is the argmax of the parallel forward over the prefix.
  for (std::size_t i = 2; i < a.tokens.size(); ++i) {
    const auto logits = forward(m, std::span<const TokenId>(a.tokens).first(i)).logits;
    Eigen::Index arg;
    logits.row(static_cast<Eigen::Index>(i) - 1).maxCoeff(&arg);
    EXPECT_EQ(a.tokens[i], arg);
  }
}

TEST(ModelGenerate, TopKSeededAndBeyondContext) {
  const auto m = tiny_model<double>(16);
  GenerateOptions o;
  o.max_new = 40;  // ctx is 16; the recurrent path is unbounded
  o.strategy.kind = SamplingStrategy::Kind::kTopK;
  o.strategy.top_k = 3;
  o.seed = 99;
  const std::vector<TokenId> prompt{4};
  const auto a = generate(m, prompt, o, nullptr, true);
  EXPECT_EQ(a.tokens, generate(m, prompt, o).tokens);
  EXPECT_EQ(a.tokens.size(), 41u);
  EXPECT_EQ(a.gates.size(), 40u);
  o.seed = 100;
  EXPECT_NE(a.tokens, generate(m, prompt, o).tokens);
}

TEST(ModelGenerate, Errors) {
  const auto m = tiny_model<double>(17);
  GenerateOptions o;
  EXPECT_THROW(generate(m, std::vector<TokenId>{}, o), DomainError);
  o.length_cap = 10;
  o.max_new = 10;
  EXPECT_THROW(generate(m, std::vector<TokenId>{1}, o), DomainError);
}

TEST(ModelCast, RoundTrip) {
  const auto m = tiny_model<double>(18);
  const auto f = m.cast<float>();
  const std::vector<TokenId> t{1, 2, 3, 4};
  EXPECT_NEAR(loss(f, t), loss(m, t), 1e-5);
}
