#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gw {

using Scalar = double;
using Index = Eigen::Index;
using Array = Eigen::ArrayXd;
using Shape = std::vector<Index>;

// Row-major views over flat storage. All tensors store data in C order.
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

struct GwError : std::runtime_error {
  explicit GwError(const std::string& msg) : std::runtime_error(msg) {}
};

// Nonconforming shapes, bad axes, bad extents.
struct ShapeError : GwError {
  explicit ShapeError(const std::string& msg) : GwError(msg) {}
};

// Bad values (NaN inputs, out-of-range targets, domain violations).
struct ValueError : GwError {
  explicit ValueError(const std::string& msg) : GwError(msg) {}
};

// File I/O and format problems (bad magic, truncation, version mismatch).
struct IoError : GwError {
  explicit IoError(const std::string& msg) : GwError(msg) {}
};

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

std::string to_string(const Shape& s);

/// Deterministic random source. Every component that draws random numbers
/// owns (or is handed) one of these; there is no global generator.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  Scalar uniform(Scalar lo, Scalar hi) {
    return std::uniform_real_distribution<Scalar>(lo, hi)(eng_);
  }
  Scalar normal(Scalar mean = 0.0, Scalar stddev = 1.0) {
    return std::normal_distribution<Scalar>(mean, stddev)(eng_);
  }
  bool bernoulli(Scalar p) { return std::bernoulli_distribution(p)(eng_); }
  // Uniform integer in [0, n).
  std::int64_t below(std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(eng_);
  }

  void fill_uniform(Array& a, Scalar lo, Scalar hi) {
    std::uniform_real_distribution<Scalar> d(lo, hi);
    for (Index i = 0; i < a.size(); ++i) a[i] = d(eng_);
  }
  void fill_normal(Array& a, Scalar mean, Scalar stddev) {
    std::normal_distribution<Scalar> d(mean, stddev);
    for (Index i = 0; i < a.size(); ++i) a[i] = d(eng_);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(static_cast<std::int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace gw
