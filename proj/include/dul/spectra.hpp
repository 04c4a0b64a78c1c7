#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dul/core.hpp"
#include "dul/sampler.hpp"

namespace dul {

enum class SpectrumSource { kCovariance, kGram };

inline const char* to_string(SpectrumSource s) {
  return s == SpectrumSource::kCovariance ? "covariance" : "gram";
}

struct SpectrumReport {
  Vector eigenvalues;  // descending, >= 0
  SpectrumSource source = SpectrumSource::kCovariance;
  Eigen::Index n = 0;
  Eigen::Index d = 0;
  int class_id = -1;  // -1 for a whole mixture
  int step = -1;      // sampler step for through-sampling snapshots
  std::string label;

  Eigen::Index size() const { return eigenvalues.size(); }
};

struct PowerLawFit {
  double exponent = 0.0;       // a in lambda_i ~ C i^a
  double log_prefactor = 0.0;  // log C
  int i_lo = 1;                // 1-based, inclusive
  int i_hi = 1;
  double residual = 0.0;  // RMS of log-log residuals
};

/// Eigenvalues below this are floored when taking logs for plots.
inline constexpr double kLogFloor = 1e-12;

namespace spectra_detail {

inline Vector descending_eigenvalues(const Matrix& sym) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
  if (eig.info() != Eigen::Success) throw Error(ErrorKind::kNumericalFailure, "eigensolver failed");
  Vector v = eig.eigenvalues().reverse();
  return v.cwiseMax(0.0);
}

}  // namespace spectra_detail

/// Eigenvalues of the biased empirical covariance (centered) or of the
/// second-moment matrix X^T X / n (uncentered).
inline SpectrumReport covariance_spectrum(const Eigen::Ref<const RowMatrix>& samples, bool centered = true,
                                          int class_id = -1) {
  const Eigen::Index n = samples.rows();
  if (n < 2) throw Error(ErrorKind::kInsufficientSamples, "covariance spectrum needs n >= 2");
  Matrix xc = samples;
  if (centered) xc.rowwise() -= samples.colwise().mean();
  Matrix cov = (xc.transpose() * xc) / static_cast<double>(n);
  SpectrumReport r;
  r.eigenvalues = spectra_detail::descending_eigenvalues(0.5 * (cov + cov.transpose()));
  r.source = SpectrumSource::kCovariance;
  r.n = n;
  r.d = samples.cols();
  r.class_id = class_id;
  return r;
}

/// The min(n, d) leading eigenvalues of X X^T, taken from whichever of X X^T
/// and X^T X is smaller (the rest are zero).
inline SpectrumReport gram_spectrum(const Eigen::Ref<const RowMatrix>& samples, bool centered = false) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (n < 1) throw Error(ErrorKind::kInsufficientSamples, "gram spectrum needs n >= 1");
  Matrix x = samples;
  if (centered) x.rowwise() -= samples.colwise().mean();
  SpectrumReport r;
  r.eigenvalues = n <= d ? spectra_detail::descending_eigenvalues(x * x.transpose())
                         : spectra_detail::descending_eigenvalues(x.transpose() * x);
  r.source = SpectrumSource::kGram;
  r.n = n;
  r.d = d;
  return r;
}

/// Least squares of log lambda_i on log i over 1-based [i_lo, i_hi].
inline PowerLawFit fit_power_law(const SpectrumReport& report, int i_lo, int i_hi) {
  if (i_lo < 1 || i_hi > report.size() || i_hi - i_lo < 1) {
    throw Error(ErrorKind::kInvalidRange, "fit range [" + std::to_string(i_lo) + ", " + std::to_string(i_hi) +
                                              "] invalid for spectrum of length " + std::to_string(report.size()));
  }
  const int m = i_hi - i_lo + 1;
  Vector lx(m), ly(m);
  for (int j = 0; j < m; ++j) {
    const double v = report.eigenvalues[i_lo - 1 + j];
    if (!(v > 0.0)) {
      throw Error(ErrorKind::kInvalidRange, "nonpositive eigenvalue at index " + std::to_string(i_lo + j));
    }
    lx[j] = std::log(static_cast<double>(i_lo + j));
    ly[j] = std::log(v);
  }
  const double mx = lx.mean();
  const double my = ly.mean();
  Vector cx = lx.array() - mx;
  Vector cy = ly.array() - my;
  PowerLawFit fit;
  fit.exponent = cx.dot(cy) / cx.squaredNorm();
  fit.log_prefactor = my - fit.exponent * mx;
  fit.i_lo = i_lo;
  fit.i_hi = i_hi;
  Vector resid = ly - (fit.log_prefactor + fit.exponent * lx.array()).matrix();
  fit.residual = std::sqrt(resid.squaredNorm() / m);
  return fit;
}

/// Default range 10..min(1000, length), skipping the spiked head.
inline PowerLawFit fit_power_law(const SpectrumReport& report) {
  const int len = static_cast<int>(report.size());
  return fit_power_law(report, std::min(10, std::max(1, len - 1)), std::min(1000, len));
}

struct SpectrumComparison {
  double max_relative_gap = 0.0;  // over the top K, relative to the first report
  double ks_distance = 0.0;
  int top_k = 0;                  // K actually used
  bool truncated = false;         // reports differed in length
};

inline SpectrumComparison compare_spectra(const SpectrumReport& a, const SpectrumReport& b, int top_k = 50) {
  if (a.source != b.source) throw Error(ErrorKind::kData, "cannot compare covariance and gram spectra");
  SpectrumComparison out;
  const Eigen::Index len = std::min(a.size(), b.size());
  out.truncated = a.size() != b.size();
  out.top_k = static_cast<int>(std::min<Eigen::Index>(top_k, len));
  for (int i = 0; i < out.top_k; ++i) {
    const double ref = a.eigenvalues[i];
    const double diff = std::abs(b.eigenvalues[i] - ref);
    double gap = ref > 0.0 ? diff / ref : (diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    out.max_relative_gap = std::max(out.max_relative_gap, gap);
  }
  // Two-sample KS statistic between the empirical eigenvalue distributions.
  std::vector<double> sa(a.eigenvalues.data(), a.eigenvalues.data() + a.size());
  std::vector<double> sb(b.eigenvalues.data(), b.eigenvalues.data() + b.size());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::size_t i = 0, j = 0;
  while (i < sa.size() && j < sb.size()) {
    const double v = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] <= v) ++i;
    while (j < sb.size() && sb[j] <= v) ++j;
    const double fa = static_cast<double>(i) / static_cast<double>(sa.size());
    const double fb = static_cast<double>(j) / static_cast<double>(sb.size());
    out.ks_distance = std::max(out.ks_distance, std::abs(fa - fb));
  }
  return out;
}

inline std::vector<SpectrumReport> spectrum_through_sampling(const std::vector<Snapshot>& snapshots,
                                                             bool centered = false) {
  std::vector<SpectrumReport> out;
  for (const auto& s : snapshots) {
    if (!out.empty() && (s.samples.rows() != out.front().n || s.samples.cols() != out.front().d)) {
      throw Error(ErrorKind::kDimensionMismatch, "snapshots differ in shape");
    }
    SpectrumReport r = gram_spectrum(s.samples, centered);
    r.step = s.step;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace dul
