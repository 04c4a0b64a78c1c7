#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace dul {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Row-major storage, used where rows are samples that get written to disk.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ErrorKind {
  kInsufficientSamples,
  kInvalidCovariance,
  kInvalidScale,
  kInvalidRange,
  kDimensionMismatch,
  kNumericalFailure,
  kSingularSystem,
  kTrainingDiverged,
  kDegenerateClassifier,
  kProbeFailure,
  kUsage,
  kData,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInsufficientSamples: return "insufficient-samples";
    case ErrorKind::kInvalidCovariance: return "invalid-covariance";
    case ErrorKind::kInvalidScale: return "invalid-scale";
    case ErrorKind::kInvalidRange: return "invalid-range";
    case ErrorKind::kDimensionMismatch: return "dimension-mismatch";
    case ErrorKind::kNumericalFailure: return "numerical-failure";
    case ErrorKind::kSingularSystem: return "singular-system";
    case ErrorKind::kTrainingDiverged: return "training-diverged";
    case ErrorKind::kDegenerateClassifier: return "degenerate-classifier";
    case ErrorKind::kProbeFailure: return "probe-failure";
    case ErrorKind::kUsage: return "usage";
    case ErrorKind::kData: return "data";
  }
  return "unknown";
}

/// Every failure raised by the library. `step` carries the sampler step or
/// SGD update count where one is meaningful, -1 otherwise.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, long step = -1)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind),
        step_(step) {}

  ErrorKind kind() const noexcept { return kind_; }
  long step() const noexcept { return step_; }

 private:
  ErrorKind kind_;
  long step_;
};

using Rng = std::mt19937_64;

namespace seeds {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a, 64 bit. Stable across platforms and compilers.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t combine(std::uint64_t seed, std::uint64_t value) {
  return splitmix64(seed ^ splitmix64(value));
}

inline std::uint64_t combine(std::uint64_t seed, std::string_view tag) {
  return combine(seed, fnv1a(tag));
}

/// Derives a child stream seed from a base seed and any mix of integer and
/// string tags: derive(base, "universality", 128, 3, "gmm").
template <typename... Tags>
std::uint64_t derive(std::uint64_t base, const Tags&... tags) {
  std::uint64_t s = splitmix64(base);
  ((s = combine(s, tags)), ...);
  return s;
}

}  // namespace seeds

inline Vector standard_normal(Eigen::Index d, Rng& rng) {
  std::normal_distribution<double> normal;
  Vector z(d);
  for (Eigen::Index j = 0; j < d; ++j) z[j] = normal(rng);
  return z;
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

}  // namespace dul
