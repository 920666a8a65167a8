#include "protot/mixer.hpp"

#include <cmath>
#include <sstream>

namespace protot {

namespace {

template <typename Scalar>
void softmax_rows(const Matrix<Scalar>& logits, Matrix<Scalar>& out) {
  out.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Scalar mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
}

template <typename Scalar>
Vector<Scalar> softmax(const Vector<Scalar>& logits) {
  Vector<Scalar> p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

template <typename Scalar>
void check_finite(const Matrix<Scalar>& m, int layer, const char* what) {
  if (m.allFinite()) return;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (!m.row(i).allFinite()) {
      std::ostringstream msg;
      msg << "non-finite " << what << " at layer " << layer << ", position " << i;
      throw NumericalError(msg.str());
    }
  }
}

template <typename Scalar>
Matrix<Scalar> causal_conv(const Matrix<Scalar>& raw, const Matrix<Scalar>& kernel) {
  const Eigen::Index steps = raw.rows();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(steps, raw.cols());
  for (Eigen::Index j = 0; j < steps; ++j) {
    for (int t = 0; t < kConvWidth; ++t) {
      const Eigen::Index src = j - (kConvWidth - 1) + t;
      if (src < 0) continue;
      out.row(j).array() += kernel.row(t).array() * raw.row(src).array();
    }
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> softmax_backward(const Matrix<Scalar>& probs, const Matrix<Scalar>& grad) {
  Matrix<Scalar> out(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const Scalar dot = probs.row(i).dot(grad.row(i));
    out.row(i) = probs.row(i).array() * (grad.row(i).array() - dot);
  }
  return out;
}

}  // namespace

template <typename Scalar>
Vector<Scalar> MixerParams<Scalar>::decay() const {
  return (Scalar(1) / (Scalar(1) + (-gamma.array()).exp())).matrix();
}

template <typename Scalar>
MixerParams<Scalar> MixerParams<Scalar>::zeros_like() const {
  MixerParams z;
  z.layer_index = layer_index;
  z.prototypes = Matrix<Scalar>::Zero(prototypes.rows(), prototypes.cols());
  z.value_map = Matrix<Scalar>::Zero(value_map.rows(), value_map.cols());
  z.read_query_map = Matrix<Scalar>::Zero(read_query_map.rows(), read_query_map.cols());
  z.output_map = Matrix<Scalar>::Zero(output_map.rows(), output_map.cols());
  z.gamma = Vector<Scalar>::Zero(gamma.size());
  z.log_tau_write = 0;
  z.log_tau_read = 0;
  z.alpha = 0;
  z.conv_kernel = Matrix<Scalar>::Zero(conv_kernel.rows(), conv_kernel.cols());
  return z;
}

template <typename Scalar>
MixerParams<Scalar> init_mixer(int hidden, int channels, int layer_index, Rng& rng,
                               std::optional<bool> with_conv) {
  if (hidden <= 0 || hidden % 2 != 0)
    throw ConfigError("init_mixer: hidden size must be positive and even, got " +
                      std::to_string(hidden));
  if (channels < 1) throw ConfigError("init_mixer: need at least one prototype");
  if (layer_index < 0) throw ConfigError("init_mixer: negative layer index");

  const int value_dim = hidden / 2;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(hidden));
  MixerParams<Scalar> p;
  p.layer_index = layer_index;
  p.prototypes.resize(channels, hidden);
  fill_normal(p.prototypes, stddev, rng);
  p.value_map.resize(value_dim, hidden);
  fill_normal(p.value_map, stddev, rng);
  if (layer_index != 0) {
    p.read_query_map.resize(hidden, hidden);
    fill_normal(p.read_query_map, stddev, rng);
  }
  p.output_map.resize(hidden, value_dim);
  fill_normal(p.output_map, stddev, rng);

  p.gamma.resize(channels);
  for (int k = 0; k < channels; ++k) {
    const double frac = channels == 1 ? 0.0 : static_cast<double>(k) / (channels - 1);
    const double beta = 0.5 + 0.49 * frac;
    p.gamma(k) = static_cast<Scalar>(std::log(beta / (1.0 - beta)));
  }
  p.log_tau_write = 0;
  p.log_tau_read = static_cast<Scalar>(layer_index == 0 ? std::log(3.0) : 0.0);
  p.alpha = 1;

  if (with_conv.value_or(layer_index < 2)) {
    // Starts as the identity on the current token.
    p.conv_kernel = Matrix<Scalar>::Zero(kConvWidth, value_dim);
    p.conv_kernel.row(kConvWidth - 1).setOnes();
  }
  return p;
}

template <typename Scalar>
void apply_channel_mask(MixerControls<Scalar>& controls, int channels, int k, bool write_side) {
  if (k < 0 || k >= channels)
    throw DomainError("prototype index " + std::to_string(k) + " out of range [0, " +
                      std::to_string(channels) + ")");
  auto& mask = write_side ? controls.mask_write : controls.mask_read;
  if (mask.empty()) mask.assign(static_cast<std::size_t>(channels), false);
  mask[static_cast<std::size_t>(k)] = true;
}

template <typename Scalar>
Vector<Scalar> write_weights(const MixerParams<Scalar>& params, const Vector<Scalar>& x) {
  if (!x.allFinite()) throw NumericalError("write_weights: non-finite input");
  Vector<Scalar> logits = (params.prototypes * x) / params.tau_write();
  return softmax(logits);
}

template <typename Scalar>
Vector<Scalar> read_weights(const MixerParams<Scalar>& params, const Vector<Scalar>& x) {
  if (!x.allFinite()) throw NumericalError("read_weights: non-finite input");
  Vector<Scalar> logits;
  if (params.shared_routing())
    logits = params.prototypes * x;
  else
    logits = params.prototypes * (params.read_query_map * x);
  logits /= params.tau_read();
  return softmax(logits);
}

template <typename Scalar>
Matrix<Scalar> mixer_forward_parallel(const MixerParams<Scalar>& params, const Matrix<Scalar>& x,
                                      const NoDeduce<MixerControls<Scalar>>* controls,
                                      NoDeduce<GateWeights<Scalar>>* capture, NoDeduce<MixerCache<Scalar>>* cache) {
  const Eigen::Index steps = x.rows();
  const int channels = params.channels();
  const int value_dim = params.value_dim();
  if (steps < 1) throw DomainError("mixer_forward_parallel: empty sequence");
  if (x.cols() != params.hidden()) throw DomainError("mixer_forward_parallel: width mismatch");
  check_finite(x, params.layer_index, "mixer input");

  MixerCache<Scalar> local;
  MixerCache<Scalar>& c = cache ? *cache : local;
  c.input = x;
  c.raw_values.noalias() = x * params.value_map.transpose();
  c.values = params.has_conv() ? causal_conv(c.raw_values, params.conv_kernel) : c.raw_values;

  Matrix<Scalar> raw_write;
  raw_write.noalias() = x * params.prototypes.transpose();
  c.write_logits = raw_write / params.tau_write();
  softmax_rows(c.write_logits, c.write_softmax);
  if (params.shared_routing()) {
    c.read_query.resize(0, 0);
    c.read_logits = raw_write / params.tau_read();
  } else {
    c.read_query.noalias() = x * params.read_query_map.transpose();
    Matrix<Scalar> raw_read;
    raw_read.noalias() = c.read_query * params.prototypes.transpose();
    c.read_logits = raw_read / params.tau_read();
  }
  softmax_rows(c.read_logits, c.read_softmax);

  c.write = c.write_softmax;
  c.read = c.read_softmax;
  c.clamped_rows.assign(static_cast<std::size_t>(steps), false);
  if (controls && controls->clamp) {
    const auto& src = *controls->clamp;
    for (Eigen::Index i = 0; i < steps; ++i) {
      const Eigen::Index s = i + controls->clamp_offset;
      if (s < 0 || s >= src.write.rows()) continue;
      c.write.row(i) = src.write.row(s);
      c.read.row(i) = src.read.row(s);
      c.clamped_rows[static_cast<std::size_t>(i)] = true;
    }
  }
  c.masked_write.assign(static_cast<std::size_t>(channels), false);
  c.masked_read.assign(static_cast<std::size_t>(channels), false);
  if (controls) {
    for (int k = 0; k < channels; ++k) {
      if (!controls->mask_write.empty() && controls->mask_write[k]) {
        c.write.col(k).setZero();
        c.masked_write[static_cast<std::size_t>(k)] = true;
      }
      if (!controls->mask_read.empty() && controls->mask_read[k]) {
        c.read.col(k).setZero();
        c.masked_read[static_cast<std::size_t>(k)] = true;
      }
    }
  }

  const Vector<Scalar> beta = params.decay();
  const Scalar guard = kDenominatorGuard<Scalar>;
  Matrix<Scalar> sums = Matrix<Scalar>::Zero(channels, value_dim);
  Vector<Scalar> mass = Vector<Scalar>::Zero(channels);
  c.prefix_mean.resize(steps, static_cast<Eigen::Index>(channels) * value_dim);
  c.mass.resize(steps, channels);
  c.mixed = Matrix<Scalar>::Zero(steps, value_dim);
  for (Eigen::Index i = 0; i < steps; ++i) {
    // Read the strict past, then fold position i in.
    for (int k = 0; k < channels; ++k) {
      auto pm = c.prefix_mean.row(i).segment(static_cast<Eigen::Index>(k) * value_dim, value_dim);
      if (mass(k) > 0)
        pm = sums.row(k) / (mass(k) + guard);
      else
        pm.setZero();
      c.mixed.row(i) += c.read(i, k) * pm;
    }
    c.mass.row(i) = mass.transpose();
    for (int k = 0; k < channels; ++k) {
      sums.row(k) = beta(k) * (sums.row(k) + c.write(i, k) * c.values.row(i));
      mass(k) = beta(k) * (mass(k) + c.write(i, k));
    }
  }

  c.projected.noalias() = c.mixed * params.output_map.transpose();
  Matrix<Scalar> y = params.alpha * c.projected;
  check_finite(y, params.layer_index, "mixer output");
  if (capture) {
    capture->write = c.write;
    capture->read = c.read;
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> mixer_backward(const MixerParams<Scalar>& params, const MixerCache<Scalar>& c,
                              const Matrix<Scalar>& grad_out, MixerParams<Scalar>& grads) {
  const Eigen::Index steps = c.input.rows();
  const int channels = params.channels();
  const int value_dim = params.value_dim();
  const Scalar guard = kDenominatorGuard<Scalar>;
  const Vector<Scalar> beta = params.decay();

  grads.alpha += grad_out.cwiseProduct(c.projected).sum();
  const Matrix<Scalar> d_projected = params.alpha * grad_out;
  grads.output_map.noalias() += d_projected.transpose() * c.mixed;
  Matrix<Scalar> d_mixed;
  d_mixed.noalias() = d_projected * params.output_map;

  Matrix<Scalar> d_write = Matrix<Scalar>::Zero(steps, channels);
  Matrix<Scalar> d_read = Matrix<Scalar>::Zero(steps, channels);
  Matrix<Scalar> d_values = Matrix<Scalar>::Zero(steps, value_dim);
  Vector<Scalar> d_beta = Vector<Scalar>::Zero(channels);
  Matrix<Scalar> g_sums = Matrix<Scalar>::Zero(channels, value_dim);
  Vector<Scalar> g_mass = Vector<Scalar>::Zero(channels);
  RowVector<Scalar> sums_before(value_dim);

  for (Eigen::Index i = steps - 1; i >= 0; --i) {
    const auto v = c.values.row(i);
    // Transition S(i) -> S(i+1); g_sums holds dL/dS(i+1).
    for (int k = 0; k < channels; ++k) {
      const Scalar z = c.mass(i, k);
      const auto pm = c.prefix_mean.row(i).segment(static_cast<Eigen::Index>(k) * value_dim, value_dim);
      if (z > 0)
        sums_before = pm * (z + guard);
      else
        sums_before.setZero();
      const Scalar w = c.write(i, k);
      d_beta(k) += g_sums.row(k).dot(sums_before + w * v) + g_mass(k) * (z + w);
      d_write(i, k) += beta(k) * (g_sums.row(k).dot(v) + g_mass(k));
      d_values.row(i) += (beta(k) * w) * g_sums.row(k);
    }
    // Local use of PM(i), then carry to dL/dS(i).
    for (int k = 0; k < channels; ++k) {
      const Scalar z = c.mass(i, k);
      const auto pm = c.prefix_mean.row(i).segment(static_cast<Eigen::Index>(k) * value_dim, value_dim);
      d_read(i, k) = pm.dot(d_mixed.row(i));
      g_sums.row(k) *= beta(k);
      g_mass(k) *= beta(k);
      if (z > 0) {
        const Scalar r = c.read(i, k);
        const Scalar inv = Scalar(1) / (z + guard);
        g_sums.row(k) += (r * inv) * d_mixed.row(i);
        g_mass(k) -= r * inv * pm.dot(d_mixed.row(i));
      }
    }
  }

  // Masked entries and clamped rows are constants.
  for (Eigen::Index i = 0; i < steps; ++i) {
    if (c.clamped_rows[static_cast<std::size_t>(i)]) {
      d_write.row(i).setZero();
      d_read.row(i).setZero();
    }
  }
  for (int k = 0; k < channels; ++k) {
    if (c.masked_write[static_cast<std::size_t>(k)]) d_write.col(k).setZero();
    if (c.masked_read[static_cast<std::size_t>(k)]) d_read.col(k).setZero();
  }

  grads.gamma.array() += d_beta.array() * beta.array() * (Scalar(1) - beta.array());

  const Matrix<Scalar> d_write_logits = softmax_backward(c.write_softmax, d_write);
  const Matrix<Scalar> d_read_logits = softmax_backward(c.read_softmax, d_read);
  grads.log_tau_write -= d_write_logits.cwiseProduct(c.write_logits).sum();
  grads.log_tau_read -= d_read_logits.cwiseProduct(c.read_logits).sum();
  Matrix<Scalar> d_raw_write = d_write_logits / params.tau_write();
  const Matrix<Scalar> d_raw_read = d_read_logits / params.tau_read();

  Matrix<Scalar> d_input = Matrix<Scalar>::Zero(steps, params.hidden());
  if (params.shared_routing()) {
    d_raw_write += d_raw_read;
  } else {
    Matrix<Scalar> d_query;
    d_query.noalias() = d_raw_read * params.prototypes;
    grads.prototypes.noalias() += d_raw_read.transpose() * c.read_query;
    grads.read_query_map.noalias() += d_query.transpose() * c.input;
    d_input.noalias() += d_query * params.read_query_map;
  }
  grads.prototypes.noalias() += d_raw_write.transpose() * c.input;
  d_input.noalias() += d_raw_write * params.prototypes;

  Matrix<Scalar> d_raw_values;
  if (params.has_conv()) {
    d_raw_values = Matrix<Scalar>::Zero(steps, value_dim);
    for (Eigen::Index j = 0; j < steps; ++j) {
      for (int t = 0; t < kConvWidth; ++t) {
        const Eigen::Index src = j - (kConvWidth - 1) + t;
        if (src < 0) continue;
        grads.conv_kernel.row(t).array() += d_values.row(j).array() * c.raw_values.row(src).array();
        d_raw_values.row(src).array() += params.conv_kernel.row(t).array() * d_values.row(j).array();
      }
    }
  } else {
    d_raw_values = std::move(d_values);
  }
  grads.value_map.noalias() += d_raw_values.transpose() * c.input;
  d_input.noalias() += d_raw_values * params.value_map;
  return d_input;
}

template <typename Scalar>
MixerState<Scalar> MixerState<Scalar>::zeros(const MixerParams<Scalar>& params) {
  MixerState s;
  s.numerators = Matrix<Scalar>::Zero(params.channels(), params.value_dim());
  s.denominators = Vector<Scalar>::Zero(params.channels());
  if (params.has_conv()) s.conv_buffer = Matrix<Scalar>::Zero(kConvWidth - 1, params.value_dim());
  return s;
}

template <typename Scalar>
void MixerState<Scalar>::reset() {
  numerators.setZero();
  denominators.setZero();
  conv_buffer.setZero();
  conv_head = 0;
  position = 0;
}

template <typename Scalar>
Vector<Scalar> mixer_step_recurrent(const MixerParams<Scalar>& params, MixerState<Scalar>& state,
                                    const Vector<Scalar>& x, const NoDeduce<MixerControls<Scalar>>* controls,
                                    NoDeduce<Vector<Scalar>>* write_out, NoDeduce<Vector<Scalar>>* read_out) {
  const int channels = params.channels();
  const int value_dim = params.value_dim();
  if (x.size() != params.hidden()) throw DomainError("mixer_step_recurrent: width mismatch");
  if (state.numerators.rows() != channels || state.numerators.cols() != value_dim)
    throw DomainError("mixer_step_recurrent: state does not match parameters");

  Vector<Scalar> write = write_weights(params, x);
  Vector<Scalar> read = read_weights(params, x);
  if (controls && controls->clamp) {
    const std::int64_t s = state.position + controls->clamp_offset;
    if (s >= 0 && s < controls->clamp->write.rows()) {
      write = controls->clamp->write.row(s).transpose();
      read = controls->clamp->read.row(s).transpose();
    }
  }
  if (controls) {
    for (int k = 0; k < channels; ++k) {
      if (!controls->mask_write.empty() && controls->mask_write[k]) write(k) = 0;
      if (!controls->mask_read.empty() && controls->mask_read[k]) read(k) = 0;
    }
  }

  const Scalar guard = kDenominatorGuard<Scalar>;
  RowVector<Scalar> mixed = RowVector<Scalar>::Zero(value_dim);
  for (int k = 0; k < channels; ++k) {
    const Scalar z = state.denominators(k);
    if (z > 0) {
      RowVector<Scalar> pm = state.numerators.row(k) / (z + guard);
      mixed += read(k) * pm;
    }
  }
  Vector<Scalar> y = params.alpha * (params.output_map * mixed.transpose());

  RowVector<Scalar> raw = (params.value_map * x).transpose();
  RowVector<Scalar> value = raw;
  if (params.has_conv()) {
    value = RowVector<Scalar>::Zero(value_dim);
    for (int t = 0; t < kConvWidth - 1; ++t)
      value.array() += params.conv_kernel.row(t).array() *
                       state.conv_buffer.row((state.conv_head + t) % (kConvWidth - 1)).array();
    value.array() += params.conv_kernel.row(kConvWidth - 1).array() * raw.array();
    state.conv_buffer.row(state.conv_head) = raw;
    state.conv_head = (state.conv_head + 1) % (kConvWidth - 1);
  }
  const Vector<Scalar> beta = params.decay();
  for (int k = 0; k < channels; ++k) {
    state.numerators.row(k) = beta(k) * (state.numerators.row(k) + write(k) * value);
    state.denominators(k) = beta(k) * (state.denominators(k) + write(k));
  }
  ++state.position;

  if (!y.allFinite())
    throw NumericalError("non-finite mixer output at layer " + std::to_string(params.layer_index) +
                         ", position " + std::to_string(state.position - 1));
  if (write_out) *write_out = std::move(write);
  if (read_out) *read_out = std::move(read);
  return y;
}

double half_life(double gamma) {
  // ln(sigmoid(g)) = -log1p(exp(-g)), stable for large |g|.
  const double log_beta = gamma >= 0 ? -std::log1p(std::exp(-gamma))
                                     : gamma - std::log1p(std::exp(gamma));
  return -std::log(2.0) / log_beta;
}

#define PROTOT_INSTANTIATE_MIXER(S)                                                             \
  template struct MixerParams<S>;                                                               \
  template struct MixerState<S>;                                                                \
  template MixerParams<S> init_mixer<S>(int, int, int, Rng&, std::optional<bool>);              \
  template void apply_channel_mask<S>(MixerControls<S>&, int, int, bool);                       \
  template Vector<S> write_weights<S>(const MixerParams<S>&, const Vector<S>&);                 \
  template Vector<S> read_weights<S>(const MixerParams<S>&, const Vector<S>&);                  \
  template Matrix<S> mixer_forward_parallel<S>(const MixerParams<S>&, const Matrix<S>&,         \
                                               const MixerControls<S>*, GateWeights<S>*,        \
                                               MixerCache<S>*);                                 \
  template Matrix<S> mixer_backward<S>(const MixerParams<S>&, const MixerCache<S>&,             \
                                       const Matrix<S>&, MixerParams<S>&);                      \
  template Vector<S> mixer_step_recurrent<S>(const MixerParams<S>&, MixerState<S>&,             \
                                             const Vector<S>&, const MixerControls<S>*,         \
                                             Vector<S>*, Vector<S>*);

PROTOT_INSTANTIATE_MIXER(float)
PROTOT_INSTANTIATE_MIXER(double)

}  // namespace protot
