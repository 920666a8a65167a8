#pragma once

// Independent reference implementations used as test oracles. They follow the
// definitions directly (explicit sums, no recurrences, no Eigen) so they share
// no code path with the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <vector>

#include "protot/mixer.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const protot::Matrix<double>& m) {
  Mat out(m.rows(), std::vector<double>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - mx);
  for (auto& v : e) v /= s;
  return e;
}

inline std::vector<double> matvec(const Mat& w, const std::vector<double>& x) {
  std::vector<double> y(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += w[i][j] * x[j];
  return y;
}

struct MixerOut {
  Mat y;
  Mat write, read;
  std::vector<Mat> prefix_mean;  // [i][k][d]
};

// y_i = alpha * U sum_k read_ik PM_k(i), PM_k(i) = sum_{j<i} beta^{i-j} w_jk v_j / sum_{j<i} beta^{i-j} w_jk.
inline MixerOut mixer(const protot::MixerParams<double>& p, const protot::Matrix<double>& xin) {
  const Mat x = to_mat(xin);
  const Mat P = to_mat(p.prototypes), V = to_mat(p.value_map), U = to_mat(p.output_map);
  const std::size_t T = x.size(), R = P.size(), dv = V.size();
  const double tw = std::exp(p.log_tau_write), tr = std::exp(p.log_tau_read);
  std::vector<double> beta(R);
  for (std::size_t k = 0; k < R; ++k) beta[k] = 1.0 / (1.0 + std::exp(-p.gamma(k)));

  Mat raw(T), v(T);
  for (std::size_t i = 0; i < T; ++i) raw[i] = matvec(V, x[i]);
  for (std::size_t i = 0; i < T; ++i) {
    if (!p.has_conv()) {
      v[i] = raw[i];
      continue;
    }
    v[i].assign(dv, 0.0);
    for (int t = 0; t < protot::kConvWidth; ++t) {
      const long j = static_cast<long>(i) - (protot::kConvWidth - 1) + t;
      if (j < 0) continue;
      for (std::size_t d = 0; d < dv; ++d) v[i][d] += p.conv_kernel(t, d) * raw[j][d];
    }
  }

  MixerOut out;
  out.write.resize(T);
  out.read.resize(T);
  for (std::size_t i = 0; i < T; ++i) {
    std::vector<double> lw = matvec(P, x[i]);
    std::vector<double> q = p.shared_routing() ? x[i] : matvec(to_mat(p.read_query_map), x[i]);
    std::vector<double> lr = matvec(P, q);
    for (auto& z : lw) z /= tw;
    for (auto& z : lr) z /= tr;
    out.write[i] = softmax(lw);
    out.read[i] = softmax(lr);
  }

  out.y.assign(T, std::vector<double>(U.size(), 0.0));
  out.prefix_mean.resize(T);
  for (std::size_t i = 0; i < T; ++i) {
    std::vector<double> mixed(dv, 0.0);
    out.prefix_mean[i].assign(R, std::vector<double>(dv, 0.0));
    for (std::size_t k = 0; k < R; ++k) {
      double num_mass = 0;
      std::vector<double> num(dv, 0.0);
      for (std::size_t j = 0; j < i; ++j) {
        const double c = std::pow(beta[k], static_cast<double>(i - j)) * out.write[j][k];
        num_mass += c;
        for (std::size_t d = 0; d < dv; ++d) num[d] += c * v[j][d];
      }
      if (num_mass > 0)
        for (std::size_t d = 0; d < dv; ++d) out.prefix_mean[i][k][d] = num[d] / num_mass;
      for (std::size_t d = 0; d < dv; ++d) mixed[d] += out.read[i][k] * out.prefix_mean[i][k][d];
    }
    const std::vector<double> proj = matvec(U, mixed);
    for (std::size_t d = 0; d < proj.size(); ++d) out.y[i][d] = p.alpha * proj[d];
  }
  return out;
}

// Central differences of f over every entry of `data`.
inline std::vector<double> finite_difference(std::span<double> data, const std::function<double()>& f,
                                             double step = 1e-5) {
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double keep = data[i];
    data[i] = keep + step;
    const double up = f();
    data[i] = keep - step;
    const double down = f();
    data[i] = keep;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor): relative error of the whole tensor.
inline double relative_error(const std::vector<double>& a, std::span<const double> b,
                             double floor = 1e-8) {
  double diff = 0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

// ---------------------------------------------------------------------------
// Routing and distribution metrics

// Mean absolute difference form of the Gini coefficient.
inline double gini(const std::vector<double>& a) {
  double diff = 0, sum = 0;
  for (double x : a) {
    sum += x;
    for (double y : a) diff += std::abs(x - y);
  }
  return diff / (2 * static_cast<double>(a.size()) * sum);
}

inline double l1_sparsity(const std::vector<double>& a) {
  double mx = 0, sum = 0;
  for (double x : a) {
    mx = std::max(mx, std::abs(x));
    sum += std::abs(x);
  }
  return mx / (sum / static_cast<double>(a.size()));
}

inline double entropy(const std::vector<double>& a) {
  double sum = 0, h = 0;
  for (double x : a) sum += std::abs(x);
  for (double x : a)
    if (x != 0) h -= std::abs(x) / sum * std::log(std::abs(x) / sum);
  return h;
}

// Bin = (number of strictly smaller values) * bins / n.
inline double mutual_information(const std::vector<protot::TokenId>& tokens, const std::vector<double>& acts,
                                 int bins, int min_count) {
  const std::size_t n = tokens.size();
  std::map<protot::TokenId, int> count;
  for (auto t : tokens) ++count[t];
  std::map<std::pair<long, int>, double> joint;
  std::map<long, double> pt;
  std::map<int, double> pb;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t less = 0;
    for (double v : acts) less += v < acts[i];
    const int b = std::min<int>(static_cast<int>(less * bins / n), bins - 1);
    const long t = count[tokens[i]] >= min_count ? tokens[i] : -1000000;
    joint[{t, b}] += 1.0 / n;
    pt[t] += 1.0 / n;
    pb[b] += 1.0 / n;
  }
  double mi = 0;
  for (const auto& [key, p] : joint) mi += p * std::log(p / (pt[key.first] * pb[key.second]));
  return mi;
}

// Midrank from counts: #smaller + (#equal + 1) / 2, then Pearson.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, eq = 0;
      for (double w : v) {
        less += w < v[i];
        eq += w == v[i];
      }
      r[i] = less + (eq + 1) / 2;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// Entropy form: H(m) - (H(p) + H(q)) / 2, base 2.
inline double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  auto h = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v)
      if (x > 0) s -= x * std::log2(x);
    return s;
  };
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return h(m) - 0.5 * (h(p) + h(q));
}

}  // namespace oracle
