#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace octattn {

// Everything numeric runs in 64-bit floats; the gradient tolerances in the
// test suites are not attainable in single precision.
using Scalar = double;
using Index = Eigen::Index;

using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using Vec3 = Eigen::Vector3d;

using CoordMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, 3, Eigen::RowMajor>;
using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<Index>;

inline Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Deterministic random stream. std::mt19937_64 output is fully specified by
// the standard; the double construction below avoids the
// implementation-defined std::uniform_real_distribution, so sequences are
// reproducible across platforms and compilers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // uniform in (0, 1), never exactly 0 or 1
  Scalar uniform01() {
    return (static_cast<Scalar>(eng_() >> 11) + 0.5) * 0x1.0p-53;
  }

  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform01(); }

  // standard Gumbel noise, g = -ln(-ln(u))
  Scalar gumbel() { return -std::log(-std::log(uniform01())); }

  // Box-Muller (std::normal_distribution is implementation-defined)
  Scalar normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    Scalar u1 = uniform01();
    Scalar u2 = uniform01();
    Scalar r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * EIGEN_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * EIGEN_PI * u2);
  }

  // uniform integer in [0, n)
  Index below(Index n) { return static_cast<Index>(eng_() % static_cast<std::uint64_t>(n)); }

  // decorrelated child stream for a named purpose
  Rng fork(std::uint64_t tag) { return Rng(splitmix64(eng_() ^ splitmix64(tag))); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  Scalar spare_ = 0;
};

inline Matrix uniform_matrix(Rng& rng, Index rows, Index cols, Scalar bound) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

}  // namespace octattn
