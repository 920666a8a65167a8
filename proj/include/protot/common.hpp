#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

namespace protot {

// Sequences are stored one position per row.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Keeps nullptr arguments from breaking template argument deduction.
template <typename T>
using NoDeduce = std::type_identity_t<T>;

using TokenId = std::int32_t;
using Rng = std::mt19937_64;

/// Invalid configuration (bad sizes, empty corpora, ...). CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside an operation's domain. CLI exit code 1.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite activations or losses.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable/unwritable files and corrupt containers. CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameter-group tag used by the optimizer for selective weight decay.
enum class Decay { kNone, kApply };

/// Flat, named view of one parameter tensor.
template <typename Scalar>
struct ParamView {
  std::string name;
  std::span<Scalar> data;
  Decay decay;
  std::vector<std::int64_t> shape;
};

/// 64-bit FNV-1a, used for content hashes in manifests and caches.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v);

/// Draw every entry of `m` from N(0, stddev).
template <typename Derived>
void fill_normal(Eigen::MatrixBase<Derived>& m, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<typename Derived::Scalar>(dist(rng));
}

template <typename Scalar>
constexpr const char* dtype_name() {
  if constexpr (sizeof(Scalar) == 4)
    return "f32";
  else
    return "f64";
}

}  // namespace protot
