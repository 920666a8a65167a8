#include "protot/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <type_traits>

namespace protot {

int ModelConfig::ffn_dim() const { return static_cast<int>(std::lround(ffn_ratio * hidden)); }

bool ModelConfig::has_conv(int layer) const {
  return std::find(conv_layers.begin(), conv_layers.end(), layer) != conv_layers.end();
}

void ModelConfig::validate() const {
  if (hidden <= 0 || hidden % 2 != 0) throw ConfigError("h must be positive and even");
  if (layers < 1) throw ConfigError("L must be >= 1");
  if (prototypes < 1) throw ConfigError("R must be >= 1");
  if (ctx < 2) throw ConfigError("ctx must be >= 2");
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (ffn_ratio <= 0) throw ConfigError("ffn_ratio must be positive");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  if (rms_eps <= 0) throw ConfigError("rms_eps must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"h", hidden},          {"L", layers},
          {"R", prototypes},      {"ctx", ctx},
          {"vocab_size", vocab_size}, {"ffn_ratio", ffn_ratio},
          {"dropout", dropout},   {"conv_layers", conv_layers},
          {"d_v", value_dim()},   {"tie_embeddings", tie_embeddings},
          {"rms_eps", rms_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.hidden = j.value("h", c.hidden);
    c.layers = j.value("L", c.layers);
    c.prototypes = j.value("R", c.prototypes);
    c.ctx = j.value("ctx", c.ctx);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.dropout = j.value("dropout", c.dropout);
    c.conv_layers = j.value("conv_layers", c.conv_layers);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.rms_eps = j.value("rms_eps", c.rms_eps);
    if (j.contains("d_v") && j.at("d_v").get<int>() != c.value_dim())
      throw ConfigError("d_v must equal h/2");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
void rms_forward(const Matrix<Scalar>& x, const Vector<Scalar>& gain, double eps,
                 Matrix<Scalar>& out, Vector<Scalar>& inv_rms) {
  const Eigen::Index rows = x.rows();
  out.resize(rows, x.cols());
  inv_rms.resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Scalar ms = x.row(i).squaredNorm() / static_cast<Scalar>(x.cols());
    inv_rms(i) = Scalar(1) / std::sqrt(ms + static_cast<Scalar>(eps));
    out.row(i) = (x.row(i).array() * inv_rms(i)) * gain.transpose().array();
  }
}

// Returns dL/dx and accumulates dL/dgain.
template <typename Scalar>
Matrix<Scalar> rms_backward(const Matrix<Scalar>& x, const Vector<Scalar>& gain,
                            const Vector<Scalar>& inv_rms, const Matrix<Scalar>& grad,
                            Vector<Scalar>& grad_gain) {
  Matrix<Scalar> dx(x.rows(), x.cols());
  const Scalar width = static_cast<Scalar>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowVector<Scalar> normed = x.row(i) * inv_rms(i);
    grad_gain.array() += (grad.row(i).array() * normed.array()).transpose();
    const RowVector<Scalar> d_normed = (grad.row(i).array() * gain.transpose().array()).matrix();
    const Scalar proj = d_normed.dot(normed) / width;
    dx.row(i) = inv_rms(i) * (d_normed - proj * normed);
  }
  return dx;
}

template <typename Scalar>
void dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng* rng, Matrix<Scalar>& mask) {
  if (!rng || p <= 0) {
    mask.resize(0, 0);
    return;
  }
  mask.resize(rows, cols);
  std::bernoulli_distribution keep(1.0 - p);
  const Scalar scale = static_cast<Scalar>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) mask(i, j) = keep(*rng) ? scale : Scalar(0);
}

template <typename Scalar>
void apply_mask(Matrix<Scalar>& m, const Matrix<Scalar>& mask) {
  if (mask.size() != 0) m.array() *= mask.array();
}

template <typename Scalar>
Vector<Scalar> log_softmax_row(const Eigen::Ref<const RowVector<Scalar>>& logits) {
  const Scalar mx = logits.maxCoeff();
  const Scalar lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).transpose().matrix();
}

void check_tokens(std::span<const TokenId> tokens, int vocab_size) {
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || tokens[i] >= vocab_size)
      throw DomainError("token id " + std::to_string(tokens[i]) + " at position " +
                        std::to_string(i) + " outside [0, " + std::to_string(vocab_size) + ")");
}

}  // namespace

template <typename Scalar>
struct BlockCache {
  Matrix<Scalar> input;
  Matrix<Scalar> mixer_in;
  Vector<Scalar> mixer_inv_rms;
  MixerCache<Scalar> mixer;
  Matrix<Scalar> mixer_drop;
  Matrix<Scalar> middle;
  Matrix<Scalar> ffn_in;
  Vector<Scalar> ffn_inv_rms;
  Matrix<Scalar> gate_pre;
  Matrix<Scalar> up;
  Matrix<Scalar> hidden;  // silu(gate) * up, after dropout
  Matrix<Scalar> hidden_drop;
  Matrix<Scalar> ffn_drop;
};

template <typename Scalar>
struct ModelCache {
  Matrix<Scalar> embed_drop;
  std::vector<BlockCache<Scalar>> blocks;
  Matrix<Scalar> final_in;
  Vector<Scalar> final_inv_rms;
  Matrix<Scalar> final_out;
};

template <typename Scalar>
LanguageModel<Scalar> LanguageModel<Scalar>::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  LanguageModel m;
  m.config = config;
  const int h = config.hidden;
  m.embedding.resize(config.vocab_size, h);
  fill_normal(m.embedding, 0.02, rng);
  if (!config.tie_embeddings) {
    m.head.resize(config.vocab_size, h);
    fill_normal(m.head, 0.02, rng);
  }
  const int ffn = config.ffn_dim();
  for (int l = 0; l < config.layers; ++l) {
    Block<Scalar> b;
    b.mixer_norm = Vector<Scalar>::Ones(h);
    b.mixer = init_mixer<Scalar>(h, config.prototypes, l, rng, config.has_conv(l));
    b.ffn_norm = Vector<Scalar>::Ones(h);
    b.ffn.gate.resize(ffn, h);
    fill_normal(b.ffn.gate, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    b.ffn.up.resize(ffn, h);
    fill_normal(b.ffn.up, 1.0 / std::sqrt(static_cast<double>(h)), rng);
    b.ffn.down.resize(h, ffn);
    fill_normal(b.ffn.down, 1.0 / std::sqrt(static_cast<double>(ffn)), rng);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = Vector<Scalar>::Ones(h);
  return m;
}

template <typename Scalar>
LanguageModel<Scalar> LanguageModel<Scalar>::zeros_like() const {
  LanguageModel z;
  z.config = config;
  z.embedding = Matrix<Scalar>::Zero(embedding.rows(), embedding.cols());
  z.head = Matrix<Scalar>::Zero(head.rows(), head.cols());
  for (const auto& b : blocks) {
    Block<Scalar> zb;
    zb.mixer_norm = Vector<Scalar>::Zero(b.mixer_norm.size());
    zb.mixer = b.mixer.zeros_like();
    zb.ffn_norm = Vector<Scalar>::Zero(b.ffn_norm.size());
    zb.ffn.gate = Matrix<Scalar>::Zero(b.ffn.gate.rows(), b.ffn.gate.cols());
    zb.ffn.up = Matrix<Scalar>::Zero(b.ffn.up.rows(), b.ffn.up.cols());
    zb.ffn.down = Matrix<Scalar>::Zero(b.ffn.down.rows(), b.ffn.down.cols());
    z.blocks.push_back(std::move(zb));
  }
  z.final_norm = Vector<Scalar>::Zero(final_norm.size());
  return z;
}

template <typename Scalar>
std::vector<ParamView<Scalar>> LanguageModel<Scalar>::parameters() {
  std::vector<ParamView<Scalar>> out;
  auto add = [&out](std::string name, std::span<Scalar> data, Decay decay,
                    std::vector<std::int64_t> shape) {
    out.push_back({std::move(name), data, decay, std::move(shape)});
  };
  auto flat = [](auto& m) { return std::span<Scalar>(m.data(), static_cast<std::size_t>(m.size())); };
  auto shape = [](const auto& m) {
    return std::vector<std::int64_t>{static_cast<std::int64_t>(m.rows()),
                                     static_cast<std::int64_t>(m.cols())};
  };
  add("embedding", flat(embedding), Decay::kNone, shape(embedding));
  if (!config.tie_embeddings) add("head", flat(head), Decay::kApply, shape(head));
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "mixer_norm", flat(b.mixer_norm), Decay::kNone, {b.mixer_norm.size()});
    b.mixer.visit(p + "mixer.", add);
    add(p + "ffn_norm", flat(b.ffn_norm), Decay::kNone, {b.ffn_norm.size()});
    add(p + "ffn.gate", flat(b.ffn.gate), Decay::kApply, shape(b.ffn.gate));
    add(p + "ffn.up", flat(b.ffn.up), Decay::kApply, shape(b.ffn.up));
    add(p + "ffn.down", flat(b.ffn.down), Decay::kApply, shape(b.ffn.down));
  }
  add("final_norm", flat(final_norm), Decay::kNone, {final_norm.size()});
  return out;
}

template <typename Scalar>
ParameterCount LanguageModel<Scalar>::parameter_count() const {
  ParameterCount count;
  for (const auto& view : const_cast<LanguageModel*>(this)->parameters())
    count.unique += static_cast<std::int64_t>(view.data.size());
  count.per_module = count.unique;
  if (config.tie_embeddings) count.per_module += embedding.size();
  return count;
}

template <typename Scalar>
template <typename Other>
LanguageModel<Other> LanguageModel<Scalar>::cast() const {
  LanguageModel<Other> m;
  m.config = config;
  m.embedding = embedding.template cast<Other>();
  m.head = head.template cast<Other>();
  for (const auto& b : blocks) {
    Block<Other> ob;
    ob.mixer_norm = b.mixer_norm.template cast<Other>();
    ob.mixer.layer_index = b.mixer.layer_index;
    ob.mixer.prototypes = b.mixer.prototypes.template cast<Other>();
    ob.mixer.value_map = b.mixer.value_map.template cast<Other>();
    ob.mixer.read_query_map = b.mixer.read_query_map.template cast<Other>();
    ob.mixer.output_map = b.mixer.output_map.template cast<Other>();
    ob.mixer.gamma = b.mixer.gamma.template cast<Other>();
    ob.mixer.log_tau_write = static_cast<Other>(b.mixer.log_tau_write);
    ob.mixer.log_tau_read = static_cast<Other>(b.mixer.log_tau_read);
    ob.mixer.alpha = static_cast<Other>(b.mixer.alpha);
    ob.mixer.conv_kernel = b.mixer.conv_kernel.template cast<Other>();
    ob.ffn_norm = b.ffn_norm.template cast<Other>();
    ob.ffn.gate = b.ffn.gate.template cast<Other>();
    ob.ffn.up = b.ffn.up.template cast<Other>();
    ob.ffn.down = b.ffn.down.template cast<Other>();
    m.blocks.push_back(std::move(ob));
  }
  m.final_norm = final_norm.template cast<Other>();
  return m;
}

namespace {

template <typename Scalar>
Matrix<Scalar> forward_impl(const LanguageModel<Scalar>& model, std::span<const TokenId> tokens,
                            const ForwardOptions<Scalar>& options,
                            std::type_identity_t<std::vector<GateWeights<Scalar>>*> gates,
                            std::type_identity_t<ModelCache<Scalar>*> cache) {
  const auto& cfg = model.config;
  const auto steps = static_cast<Eigen::Index>(tokens.size());
  if (steps < 1) throw DomainError("forward: empty token sequence");
  if (steps > cfg.ctx)
    throw DomainError("forward: sequence length " + std::to_string(steps) + " exceeds ctx " +
                      std::to_string(cfg.ctx));
  check_tokens(tokens, cfg.vocab_size);
  if (options.controls && !options.controls->empty() &&
      options.controls->size() != model.blocks.size())
    throw DomainError("forward: need one MixerControls per layer");

  ModelCache<Scalar> local;
  ModelCache<Scalar>& c = cache ? *cache : local;
  Rng* rng = options.dropout_rng;
  const double p = cfg.dropout;

  Matrix<Scalar> x(steps, cfg.hidden);
  for (Eigen::Index i = 0; i < steps; ++i) x.row(i) = model.embedding.row(tokens[i]);
  dropout_mask(steps, cfg.hidden, p, rng, c.embed_drop);
  apply_mask(x, c.embed_drop);

  c.blocks.resize(model.blocks.size());
  if (gates) gates->resize(model.blocks.size());
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& b = model.blocks[l];
    auto& bc = c.blocks[l];
    const MixerControls<Scalar>* ctl =
        options.controls && !options.controls->empty() ? &(*options.controls)[l] : nullptr;

    bc.input = x;
    rms_forward(x, b.mixer_norm, cfg.rms_eps, bc.mixer_in, bc.mixer_inv_rms);
    Matrix<Scalar> mixed = mixer_forward_parallel(b.mixer, bc.mixer_in, ctl,
                                                  gates ? &(*gates)[l] : nullptr, &bc.mixer);
    dropout_mask(steps, cfg.hidden, p, rng, bc.mixer_drop);
    apply_mask(mixed, bc.mixer_drop);
    x += mixed;

    bc.middle = x;
    rms_forward(x, b.ffn_norm, cfg.rms_eps, bc.ffn_in, bc.ffn_inv_rms);
    bc.gate_pre.noalias() = bc.ffn_in * b.ffn.gate.transpose();
    bc.up.noalias() = bc.ffn_in * b.ffn.up.transpose();
    bc.hidden = bc.gate_pre.unaryExpr([](Scalar u) { return u * sigmoid(u); }).cwiseProduct(bc.up);
    dropout_mask(steps, bc.hidden.cols(), p, rng, bc.hidden_drop);
    apply_mask(bc.hidden, bc.hidden_drop);
    Matrix<Scalar> ffn_out;
    ffn_out.noalias() = bc.hidden * b.ffn.down.transpose();
    dropout_mask(steps, cfg.hidden, p, rng, bc.ffn_drop);
    apply_mask(ffn_out, bc.ffn_drop);
    x += ffn_out;
  }

  c.final_in = x;
  rms_forward(x, model.final_norm, cfg.rms_eps, c.final_out, c.final_inv_rms);
  Matrix<Scalar> logits;
  logits.noalias() = c.final_out * model.output_weights().transpose();
  return logits;
}

}  // namespace

template <typename Scalar>
ForwardResult<Scalar> forward(const LanguageModel<Scalar>& model, std::span<const TokenId> tokens,
                              const ForwardOptions<Scalar>& options) {
  ForwardResult<Scalar> r;
  r.logits = forward_impl(model, tokens, options, options.capture ? &r.gates : nullptr, nullptr);
  return r;
}

template <typename Scalar>
double loss(const LanguageModel<Scalar>& model, std::span<const TokenId> tokens,
            const NoDeduce<LayerControls<Scalar>>* controls) {
  if (tokens.size() < 2) throw DomainError("loss: need at least 2 tokens");
  ForwardOptions<Scalar> opts;
  opts.controls = controls;
  const auto inputs = tokens.first(tokens.size() - 1);
  const Matrix<Scalar> logits = forward_impl(model, inputs, opts, nullptr, nullptr);
  double total = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i)
    total -= static_cast<double>(log_softmax_row<Scalar>(logits.row(i))(tokens[i + 1]));
  return total / static_cast<double>(logits.rows());
}

template <typename Scalar>
double loss_and_backward(const LanguageModel<Scalar>& model, std::span<const TokenId> tokens,
                         LanguageModel<Scalar>& grads, Rng* dropout_rng, double scale) {
  if (tokens.size() < 2) throw DomainError("loss: need at least 2 tokens");
  const auto& cfg = model.config;
  ModelCache<Scalar> c;
  ForwardOptions<Scalar> opts;
  opts.dropout_rng = dropout_rng;
  const auto inputs = tokens.first(tokens.size() - 1);
  const Matrix<Scalar> logits = forward_impl(model, inputs, opts, nullptr, &c);
  const Eigen::Index steps = logits.rows();

  double total = 0;
  Matrix<Scalar> d_logits(steps, logits.cols());
  const Scalar unit = static_cast<Scalar>(scale / static_cast<double>(steps));
  for (Eigen::Index i = 0; i < steps; ++i) {
    const Vector<Scalar> logp = log_softmax_row<Scalar>(logits.row(i));
    const TokenId target = tokens[i + 1];
    total -= static_cast<double>(logp(target));
    d_logits.row(i) = logp.array().exp().transpose() * unit;
    d_logits(i, target) -= unit;
  }
  if (!std::isfinite(total)) throw NumericalError("loss is not finite");

  Matrix<Scalar>& d_head = cfg.tie_embeddings ? grads.embedding : grads.head;
  d_head.noalias() += d_logits.transpose() * c.final_out;
  Matrix<Scalar> d_final;
  d_final.noalias() = d_logits * model.output_weights();
  Matrix<Scalar> dx = rms_backward(c.final_in, model.final_norm, c.final_inv_rms, d_final,
                                   grads.final_norm);

  for (std::size_t li = model.blocks.size(); li-- > 0;) {
    const auto& b = model.blocks[li];
    auto& gb = grads.blocks[li];
    const auto& bc = c.blocks[li];

    // FFN branch.
    Matrix<Scalar> d_ffn_out = dx;
    apply_mask(d_ffn_out, bc.ffn_drop);
    gb.ffn.down.noalias() += d_ffn_out.transpose() * bc.hidden;
    Matrix<Scalar> d_hidden;
    d_hidden.noalias() = d_ffn_out * b.ffn.down;
    apply_mask(d_hidden, bc.hidden_drop);
    const Matrix<Scalar> sig = bc.gate_pre.unaryExpr([](Scalar u) { return sigmoid(u); });
    const Matrix<Scalar> silu = bc.gate_pre.cwiseProduct(sig);
    const Matrix<Scalar> d_up = d_hidden.cwiseProduct(silu);
    const Matrix<Scalar> d_gate =
        d_hidden.cwiseProduct(bc.up)
            .cwiseProduct((sig.array() * (Scalar(1) + bc.gate_pre.array() * (Scalar(1) - sig.array())))
                              .matrix());
    gb.ffn.gate.noalias() += d_gate.transpose() * bc.ffn_in;
    gb.ffn.up.noalias() += d_up.transpose() * bc.ffn_in;
    Matrix<Scalar> d_ffn_in;
    d_ffn_in.noalias() = d_gate * b.ffn.gate;
    d_ffn_in.noalias() += d_up * b.ffn.up;
    dx += rms_backward(bc.middle, b.ffn_norm, bc.ffn_inv_rms, d_ffn_in, gb.ffn_norm);

    // Mixer branch.
    Matrix<Scalar> d_mixed = dx;
    apply_mask(d_mixed, bc.mixer_drop);
    const Matrix<Scalar> d_mixer_in = mixer_backward(b.mixer, bc.mixer, d_mixed, gb.mixer);
    dx += rms_backward(bc.input, b.mixer_norm, bc.mixer_inv_rms, d_mixer_in, gb.mixer_norm);
  }

  apply_mask(dx, c.embed_drop);
  for (Eigen::Index i = 0; i < steps; ++i) grads.embedding.row(inputs[i]) += dx.row(i);
  return total / static_cast<double>(steps);
}

template <typename Scalar>
ModelState<Scalar> ModelState<Scalar>::zeros(const LanguageModel<Scalar>& model) {
  ModelState s;
  for (const auto& b : model.blocks) s.layers.push_back(MixerState<Scalar>::zeros(b.mixer));
  return s;
}

template <typename Scalar>
Vector<Scalar> step(const LanguageModel<Scalar>& model, ModelState<Scalar>& state, TokenId token,
                    const NoDeduce<LayerControls<Scalar>>* controls, NoDeduce<StepGates<Scalar>>* gates) {
  const auto& cfg = model.config;
  if (token < 0 || token >= cfg.vocab_size)
    throw DomainError("step: token id " + std::to_string(token) + " out of range");
  if (state.layers.size() != model.blocks.size())
    throw DomainError("step: state has the wrong number of layers");
  const auto eps = static_cast<Scalar>(cfg.rms_eps);
  auto rms = [eps](const Vector<Scalar>& v, const Vector<Scalar>& gain) {
    const Scalar inv = Scalar(1) / std::sqrt(v.squaredNorm() / static_cast<Scalar>(v.size()) + eps);
    return Vector<Scalar>((v.array() * inv) * gain.array());
  };

  if (gates) {
    gates->write.resize(model.blocks.size());
    gates->read.resize(model.blocks.size());
  }
  Vector<Scalar> x = model.embedding.row(token).transpose();
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& b = model.blocks[l];
    const MixerControls<Scalar>* ctl =
        controls && !controls->empty() ? &(*controls)[l] : nullptr;
    x += mixer_step_recurrent(b.mixer, state.layers[l], rms(x, b.mixer_norm), ctl,
                              gates ? &gates->write[l] : nullptr,
                              gates ? &gates->read[l] : nullptr);
    const Vector<Scalar> n = rms(x, b.ffn_norm);
    const Vector<Scalar> g = b.ffn.gate * n;
    const Vector<Scalar> u = b.ffn.up * n;
    const Vector<Scalar> hdn = g.unaryExpr([](Scalar v) { return v * sigmoid(v); }).cwiseProduct(u);
    x += b.ffn.down * hdn;
  }
  ++state.position;
  return model.output_weights() * rms(x, model.final_norm);
}

template <typename Scalar>
Generation<Scalar> generate(const LanguageModel<Scalar>& model, std::span<const TokenId> prompt,
                            const GenerateOptions& options, const NoDeduce<LayerControls<Scalar>>* controls,
                            bool capture) {
  if (prompt.empty()) throw DomainError("generate: empty prompt");
  if (static_cast<std::int64_t>(prompt.size()) + options.max_new > options.length_cap)
    throw DomainError("generate: prompt + max_new exceeds the configured length cap");
  if (options.strategy.kind == SamplingStrategy::Kind::kTopK &&
      (options.strategy.top_k < 1 || options.strategy.temperature <= 0))
    throw DomainError("generate: top-k needs k >= 1 and temperature > 0");

  Generation<Scalar> out;
  out.tokens.assign(prompt.begin(), prompt.end());
  ModelState<Scalar> state = ModelState<Scalar>::zeros(model);
  Rng rng(options.seed);
  Vector<Scalar> logits;
  for (std::size_t i = 0; i < prompt.size(); ++i) logits = step(model, state, prompt[i], controls);

  for (int n = 0; n < options.max_new; ++n) {
    TokenId next = 0;
    if (options.strategy.kind == SamplingStrategy::Kind::kGreedy) {
      Eigen::Index arg;
      logits.maxCoeff(&arg);
      next = static_cast<TokenId>(arg);
    } else {
      const int k = std::min<int>(options.strategy.top_k, static_cast<int>(logits.size()));
      std::vector<TokenId> order(static_cast<std::size_t>(logits.size()));
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + k, order.end(),
                        [&logits](TokenId a, TokenId b) {
                          return logits(a) > logits(b) || (logits(a) == logits(b) && a < b);
                        });
      std::vector<double> weights(static_cast<std::size_t>(k));
      const double top = static_cast<double>(logits(order[0]));
      for (int i = 0; i < k; ++i)
        weights[i] = std::exp((static_cast<double>(logits(order[i])) - top) /
                              options.strategy.temperature);
      std::discrete_distribution<int> pick(weights.begin(), weights.end());
      next = order[static_cast<std::size_t>(pick(rng))];
    }
    out.tokens.push_back(next);
    if (next == options.stop_token) break;
    if (n + 1 < options.max_new || capture) {
      StepGates<Scalar> g;
      logits = step(model, state, next, controls, capture ? &g : nullptr);
      if (capture) out.gates.push_back(std::move(g));
    }
  }
  return out;
}

template <typename Scalar>
double perplexity(const LanguageModel<Scalar>& model, std::span<const TokenId> stream, int stride) {
  if (stream.size() < 2) throw DomainError("perplexity: need at least 2 tokens");
  const std::size_t ctx = static_cast<std::size_t>(model.config.ctx);
  const std::size_t hop = stride <= 0 ? ctx : std::min<std::size_t>(static_cast<std::size_t>(stride), ctx);
  double total = 0;
  std::size_t count = 0;
  std::size_t scored_until = 0;  // targets [1, scored_until) are already counted
  for (std::size_t start = 0; start + 1 < stream.size(); start += hop) {
    const std::size_t len = std::min(ctx + 1, stream.size() - start);
    const auto window = stream.subspan(start, len);
    const Matrix<Scalar> logits =
        forward_impl(model, window.first(len - 1), ForwardOptions<Scalar>{}, nullptr, nullptr);
    for (std::size_t i = 0; i + 1 < len; ++i) {
      const std::size_t target = start + i + 1;
      if (target < scored_until) continue;
      total -= static_cast<double>(log_softmax_row<Scalar>(logits.row(static_cast<Eigen::Index>(i)))(
          window[i + 1]));
      ++count;
    }
    scored_until = start + len;
    if (start + len >= stream.size()) break;
  }
  return std::exp(total / static_cast<double>(count));
}

#define PROTOT_INSTANTIATE_MODEL(S)                                                               \
  template struct LanguageModel<S>;                                                               \
  template struct ModelState<S>;                                                                  \
  template ForwardResult<S> forward<S>(const LanguageModel<S>&, std::span<const TokenId>,         \
                                       const ForwardOptions<S>&);                                 \
  template double loss<S>(const LanguageModel<S>&, std::span<const TokenId>,                      \
                          const LayerControls<S>*);                                               \
  template double loss_and_backward<S>(const LanguageModel<S>&, std::span<const TokenId>,         \
                                       LanguageModel<S>&, Rng*, double);                          \
  template Vector<S> step<S>(const LanguageModel<S>&, ModelState<S>&, TokenId,                    \
                             const LayerControls<S>*, StepGates<S>*);                             \
  template Generation<S> generate<S>(const LanguageModel<S>&, std::span<const TokenId>,           \
                                     const GenerateOptions&, const LayerControls<S>*, bool);      \
  template double perplexity<S>(const LanguageModel<S>&, std::span<const TokenId>, int);

PROTOT_INSTANTIATE_MODEL(float)
PROTOT_INSTANTIATE_MODEL(double)

template LanguageModel<double> LanguageModel<float>::cast<double>() const;
template LanguageModel<float> LanguageModel<double>::cast<float>() const;
template LanguageModel<float> LanguageModel<float>::cast<float>() const;
template LanguageModel<double> LanguageModel<double>::cast<double>() const;

}  // namespace protot
