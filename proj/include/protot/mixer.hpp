#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "protot/common.hpp"

namespace protot {

/// Added to the gate-mass denominator in single precision, where long
/// low-decay channels can underflow. Zero in double precision.
template <typename Scalar>
constexpr Scalar kDenominatorGuard = sizeof(Scalar) == 4 ? Scalar(1e-9) : Scalar(0);

inline constexpr int kConvWidth = 5;

/// Learnable quantities of one prototype-mixer layer.
///
/// Linear maps are stored out x in and applied to row-major sequences as
/// X * W^T. Temperatures are kept in log space so they stay positive.
template <typename Scalar>
struct MixerParams {
  int layer_index = 0;
  Matrix<Scalar> prototypes;      // R x h
  Matrix<Scalar> value_map;       // d_v x h
  Matrix<Scalar> read_query_map;  // h x h, empty with shared routing
  Matrix<Scalar> output_map;      // h x d_v
  Vector<Scalar> gamma;           // R, decay logits
  Scalar log_tau_write = 0;
  Scalar log_tau_read = 0;
  Scalar alpha = 1;
  Matrix<Scalar> conv_kernel;  // kConvWidth x d_v, last row multiplies the current token

  int hidden() const { return static_cast<int>(prototypes.cols()); }
  int channels() const { return static_cast<int>(prototypes.rows()); }
  int value_dim() const { return static_cast<int>(value_map.rows()); }
  bool shared_routing() const { return read_query_map.size() == 0; }
  bool has_conv() const { return conv_kernel.size() != 0; }
  Scalar tau_write() const { return std::exp(log_tau_write); }
  Scalar tau_read() const { return std::exp(log_tau_read); }
  /// beta_k = sigmoid(gamma_k).
  Vector<Scalar> decay() const;

  /// Same shapes, all zeros (gradient accumulator).
  MixerParams zeros_like() const;

  /// Visits every tensor as a flat span, in a fixed order.
  template <typename F>
  void visit(const std::string& prefix, F&& f);
};

/// Fresh parameters. Maps and prototypes ~ N(0, 1/sqrt(h)); beta spread evenly
/// over [0.5, 0.99]; tau_write = 1; tau_read = 3 with shared routing (layer 0)
/// else 1; alpha = 1. Layer 0 uses shared routing. `with_conv` defaults to
/// layers 0 and 1.
template <typename Scalar>
MixerParams<Scalar> init_mixer(int hidden, int channels, int layer_index, Rng& rng,
                               std::optional<bool> with_conv = std::nullopt);

/// Per-position gate rows: T x R each, rows on the simplex unless masked.
template <typename Scalar>
struct GateWeights {
  Matrix<Scalar> write;
  Matrix<Scalar> read;
};

/// Runtime edits applied during a forward pass. Parameters are never touched.
template <typename Scalar>
struct MixerControls {
  std::vector<bool> mask_write;  // empty or size R
  std::vector<bool> mask_read;
  /// Gate rows copied over this sequence's own rows. Position i takes source
  /// row i + clamp_offset when that row exists.
  const GateWeights<Scalar>* clamp = nullptr;
  std::int64_t clamp_offset = 0;

  bool empty() const { return mask_write.empty() && mask_read.empty() && clamp == nullptr; }
};

/// Throws DomainError unless 0 <= k < channels.
template <typename Scalar>
void apply_channel_mask(MixerControls<Scalar>& controls, int channels, int k, bool write_side);

/// Activations kept by the parallel forward for the backward pass.
template <typename Scalar>
struct MixerCache {
  Matrix<Scalar> input;           // T x h
  Matrix<Scalar> raw_values;      // T x d_v, before the local convolution
  Matrix<Scalar> values;          // T x d_v
  Matrix<Scalar> write_logits;    // T x R, already divided by tau_write
  Matrix<Scalar> write_softmax;   // T x R
  Matrix<Scalar> write;           // T x R, after clamps and masks
  Matrix<Scalar> read_query;      // T x h, empty with shared routing
  Matrix<Scalar> read_logits;
  Matrix<Scalar> read_softmax;
  Matrix<Scalar> read;
  std::vector<bool> clamped_rows;
  std::vector<bool> masked_write;
  std::vector<bool> masked_read;
  Matrix<Scalar> prefix_mean;     // T x (R * d_v), channel-major within a row
  Matrix<Scalar> mass;            // T x R, Z_k(i)
  Matrix<Scalar> mixed;           // T x d_v, sum_k read * PM_k
  Matrix<Scalar> projected;       // T x h, mixed * U^T
};

/// softmax_k((x . P_k) / tau_write).
template <typename Scalar>
Vector<Scalar> write_weights(const MixerParams<Scalar>& params, const Vector<Scalar>& x);

/// softmax_k((W x . P_k) / tau_read); W is the identity with shared routing.
template <typename Scalar>
Vector<Scalar> read_weights(const MixerParams<Scalar>& params, const Vector<Scalar>& x);

/// Whole-sequence forward. Matrix products run over all positions at once and
/// the discounted prefix sums are a single linear pass over T.
template <typename Scalar>
Matrix<Scalar> mixer_forward_parallel(const MixerParams<Scalar>& params, const Matrix<Scalar>& x,
                                      const NoDeduce<MixerControls<Scalar>>* controls = nullptr,
                                      NoDeduce<GateWeights<Scalar>>* capture = nullptr,
                                      NoDeduce<MixerCache<Scalar>>* cache = nullptr);

/// Accumulates parameter gradients into `grads` and returns dL/dX.
template <typename Scalar>
Matrix<Scalar> mixer_backward(const MixerParams<Scalar>& params, const MixerCache<Scalar>& cache,
                              const Matrix<Scalar>& grad_out, MixerParams<Scalar>& grads);

/// O(1) recurrent cache for one generation stream.
template <typename Scalar>
struct MixerState {
  Matrix<Scalar> numerators;    // R x d_v
  Vector<Scalar> denominators;  // R
  Matrix<Scalar> conv_buffer;   // (kConvWidth - 1) x d_v ring, empty without conv
  int conv_head = 0;
  std::int64_t position = 0;

  static MixerState zeros(const MixerParams<Scalar>& params);
  void reset();
};

/// Reads from the state, then writes the current token into it.
template <typename Scalar>
Vector<Scalar> mixer_step_recurrent(const MixerParams<Scalar>& params, MixerState<Scalar>& state,
                                    const Vector<Scalar>& x,
                                    const NoDeduce<MixerControls<Scalar>>* controls = nullptr,
                                    NoDeduce<Vector<Scalar>>* write_out = nullptr,
                                    NoDeduce<Vector<Scalar>>* read_out = nullptr);

/// Steps for a channel's contribution to halve: -ln 2 / ln(sigmoid(gamma)).
double half_life(double gamma);

template <typename Scalar>
template <typename F>
void MixerParams<Scalar>::visit(const std::string& prefix, F&& f) {
  auto flat = [](auto& m) { return std::span<Scalar>(m.data(), static_cast<std::size_t>(m.size())); };
  auto shape = [](const auto& m) {
    return std::vector<std::int64_t>{static_cast<std::int64_t>(m.rows()),
                                     static_cast<std::int64_t>(m.cols())};
  };
  f(prefix + "prototypes", flat(prototypes), Decay::kNone, shape(prototypes));
  f(prefix + "value_map", flat(value_map), Decay::kApply, shape(value_map));
  if (!shared_routing())
    f(prefix + "read_query_map", flat(read_query_map), Decay::kApply, shape(read_query_map));
  f(prefix + "output_map", flat(output_map), Decay::kApply, shape(output_map));
  f(prefix + "gamma", flat(gamma), Decay::kNone, std::vector<std::int64_t>{gamma.size()});
  f(prefix + "log_tau_write", std::span<Scalar>(&log_tau_write, 1), Decay::kNone,
    std::vector<std::int64_t>{1});
  f(prefix + "log_tau_read", std::span<Scalar>(&log_tau_read, 1), Decay::kNone,
    std::vector<std::int64_t>{1});
  f(prefix + "alpha", std::span<Scalar>(&alpha, 1), Decay::kNone, std::vector<std::int64_t>{1});
  if (has_conv()) f(prefix + "conv_kernel", flat(conv_kernel), Decay::kApply, shape(conv_kernel));
}

}  // namespace protot
