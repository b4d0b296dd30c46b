#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace oodlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct ZeroMatrixError : std::runtime_error {
  explicit ZeroMatrixError(const std::string& what) : std::runtime_error(what) {}
};
struct BadRankError : std::runtime_error {
  explicit BadRankError(const std::string& what) : std::runtime_error(what) {}
};
struct DimMismatchError : std::runtime_error {
  explicit DimMismatchError(const std::string& what) : std::runtime_error(what) {}
};
struct BadSplitError : std::runtime_error {
  explicit BadSplitError(const std::string& what) : std::runtime_error(what) {}
};
struct BadProportionError : std::runtime_error {
  explicit BadProportionError(const std::string& what) : std::runtime_error(what) {}
};
struct EmptySuiteError : std::runtime_error {
  explicit EmptySuiteError(const std::string& what) : std::runtime_error(what) {}
};
struct ShapeMismatchError : std::runtime_error {
  explicit ShapeMismatchError(const std::string& what) : std::runtime_error(what) {}
};
struct MissingTruthError : std::runtime_error {
  explicit MissingTruthError(const std::string& what) : std::runtime_error(what) {}
};
struct BadFractionError : std::runtime_error {
  explicit BadFractionError(const std::string& what) : std::runtime_error(what) {}
};
struct EmptyPopulationError : std::runtime_error {
  explicit EmptyPopulationError(const std::string& what) : std::runtime_error(what) {}
};
struct BadSweepError : std::runtime_error {
  explicit BadSweepError(const std::string& what) : std::runtime_error(what) {}
};
struct MissingTraceError : std::runtime_error {
  explicit MissingTraceError(const std::string& what) : std::runtime_error(what) {}
};
struct EmptyFlagSetError : std::runtime_error {
  explicit EmptyFlagSetError(const std::string& what) : std::runtime_error(what) {}
};
struct DegenerateGapError : std::runtime_error {
  explicit DegenerateGapError(const std::string& what) : std::runtime_error(what) {}
};
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};
struct NotConvergedError : std::runtime_error {
  explicit NotConvergedError(const std::string& what) : std::runtime_error(what) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Deterministic random source. std::mt19937_64 is bit-specified by the
// standard; the distributions in <random> are not, so the transforms from
// raw 64-bit draws to doubles live here and never change.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1): top 53 bits of one engine draw.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the cached second value keeps the
  // draw count even and the stream reproducible.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  // Uniform integer in [0, n) by rejection, avoiding modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw BadRankError("Rng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = eng_();
    while (x >= limit) x = eng_();
    return x % n;
  }

  Matrix gaussian_matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = gaussian();
    return m;
  }

  Vector gaussian_vector(Index n) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = gaussian();
    return v;
  }

  // Fisher-Yates; the loop order is part of the contract.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  std::uint64_t raw() { return eng_(); }

  // Derives an independent stream for substream `index` without consuming
  // draws from this engine (splitmix64 over the pair).
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace oodlab
