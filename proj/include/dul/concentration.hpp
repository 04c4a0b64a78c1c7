#pragma once

// Empirical checks of concentration-of-measure tail bounds for Lipschitz
// observables, step-Lipschitz estimates of the sampler, norm contraction
// summaries, and moment diagnostics of labeled data.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dul/core.hpp"
#include "dul/dataset.hpp"
#include "dul/sampler.hpp"

namespace dul {

/// Tail bound P(|f(x) - E f(x)| > s) <= C exp(-(s / (L sigma))^2) + c exp(-c' d)
/// for L-Lipschitz f.
struct ConcentrationBound {
  double C = 2.0;
  double c = 0.0;
  double c_prime = 0.0;
  double sigma = 1.0;
  double d = 1.0;

  void validate() const {
    if (!(C >= 0.0 && c >= 0.0 && c_prime >= 0.0)) throw Error(ErrorKind::kInvalidRange, "C, c, c' must be >= 0");
    if (!(sigma > 0.0)) throw Error(ErrorKind::kInvalidRange, "sigma must be > 0");
  }

  double value(double s, double lipschitz) const {
    const double u = s / (lipschitz * sigma);
    return C * std::exp(-u * u) + c * std::exp(-c_prime * d);
  }
};

/// Bound of a source pushed through a map that is L-Lipschitz except on an
/// event of probability c_tilde exp(-c_hat d).
inline ConcentrationBound push_forward(const ConcentrationBound& b, double map_lipschitz, double c_tilde = 0.0,
                                       double c_hat = std::numeric_limits<double>::infinity()) {
  ConcentrationBound out = b;
  out.c = b.c + c_tilde;
  out.c_prime = std::min(b.c_prime, c_hat);
  if (out.c == 0.0) out.c_prime = b.c_prime;
  out.sigma = map_lipschitz * b.sigma;
  return out;
}

/// Bound of (x, y) drawn from the product of two concentrated laws.
inline ConcentrationBound product_bound(const ConcentrationBound& a, const ConcentrationBound& b) {
  ConcentrationBound out;
  out.C = a.C + b.C;
  out.c = a.c + b.c;
  out.c_prime = std::min(a.c_prime, b.c_prime);
  out.d = a.d;
  out.sigma = std::max(a.sigma, b.sigma);
  return out;
}

enum class ProbeFamily { kLinearUnit, kNorm, kSoftReluProjection, kCustom };

inline const char* to_string(ProbeFamily f) {
  switch (f) {
    case ProbeFamily::kLinearUnit: return "linear_unit";
    case ProbeFamily::kNorm: return "norm";
    case ProbeFamily::kSoftReluProjection: return "soft_relu_projection";
    case ProbeFamily::kCustom: return "custom";
  }
  return "unknown";
}

/// A scalar observable with a declared Lipschitz constant. Only the built-in
/// families are certified.
struct LipschitzProbe {
  std::function<double(const Vector&)> eval;
  double lipschitz = 1.0;
  ProbeFamily family = ProbeFamily::kCustom;
  bool certified = false;
  std::string name;

  static LipschitzProbe linear_unit(const Vector& direction) {
    Vector v = direction.normalized();
    return {[v](const Vector& x) { return v.dot(x); }, 1.0, ProbeFamily::kLinearUnit, true, "linear_unit"};
  }
  static LipschitzProbe norm() {
    return {[](const Vector& x) { return x.norm(); }, 1.0, ProbeFamily::kNorm, true, "norm"};
  }
  /// softplus(v^T x); softplus' lies in (0, 1).
  static LipschitzProbe soft_relu_projection(const Vector& direction) {
    Vector v = direction.normalized();
    return {[v](const Vector& x) {
              const double u = v.dot(x);
              return u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
            },
            1.0, ProbeFamily::kSoftReluProjection, true, "soft_relu_projection"};
  }
  static LipschitzProbe custom(std::function<double(const Vector&)> f, double lipschitz, std::string name) {
    return {std::move(f), lipschitz, ProbeFamily::kCustom, false, std::move(name)};
  }

  /// factor * f, declared factor * L. Keeps the certification of f.
  LipschitzProbe scaled(double factor) const {
    auto f = eval;
    return {[f, factor](const Vector& x) { return factor * f(x); }, std::abs(factor) * lipschitz, family,
            certified, name + "*" + std::to_string(factor)};
  }
};

struct WilsonInterval {
  double lo = 0.0;
  double hi = 1.0;
};

inline WilsonInterval wilson_interval(long successes, long n, double z = 1.959963984540054) {
  if (n <= 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double center = (p + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn)) / (1 + z2 / nn);
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

struct TailReport {
  std::string probe;
  bool certified = false;
  double lipschitz = 1.0;
  long n = 0;
  double mean = 0.0;  // sample mean, standing in for E f
  std::vector<double> thresholds;
  std::vector<double> survival;
  std::vector<double> ci_lo;
  std::vector<double> ci_hi;
  std::vector<double> bound;
  std::vector<bool> violation;  // lower CI above the bound

  int violations() const { return static_cast<int>(std::count(violation.begin(), violation.end(), true)); }
  /// bound - survival at each threshold.
  std::vector<double> margin() const {
    std::vector<double> m(bound.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = bound[i] - survival[i];
    return m;
  }
};

using TailBoundFn = std::function<double(double s)>;

/// Survival of |f - mean(f)| on the s grid against an arbitrary bound.
inline TailReport evaluate_tails(const Eigen::Ref<const RowMatrix>& samples, const LipschitzProbe& probe,
                                 const TailBoundFn& bound, const std::vector<double>& s_grid) {
  const Eigen::Index n = samples.rows();
  std::vector<double> values(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = probe.eval(samples.row(i).transpose());
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::kProbeFailure, "probe " + probe.name + " returned a non-finite value");
    }
    values[static_cast<std::size_t>(i)] = v;
  }
  TailReport r;
  r.probe = probe.name;
  r.certified = probe.certified;
  r.lipschitz = probe.lipschitz;
  r.n = n;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  std::vector<double> dev(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) dev[i] = std::abs(values[i] - r.mean);
  std::sort(dev.begin(), dev.end());
  std::vector<double> grid = s_grid;
  std::sort(grid.begin(), grid.end());
  for (double s : grid) {
    const long above = static_cast<long>(dev.end() - std::upper_bound(dev.begin(), dev.end(), s));
    const auto ci = wilson_interval(above, n);
    const double b = bound(s);
    r.thresholds.push_back(s);
    r.survival.push_back(static_cast<double>(above) / static_cast<double>(n));
    r.ci_lo.push_back(ci.lo);
    r.ci_hi.push_back(ci.hi);
    r.bound.push_back(b);
    r.violation.push_back(ci.lo > b);
  }
  return r;
}

inline TailReport tail_check(const Eigen::Ref<const RowMatrix>& samples, const LipschitzProbe& probe,
                             const ConcentrationBound& bound, const std::vector<double>& s_grid) {
  if (samples.rows() < 1000) {
    throw Error(ErrorKind::kInsufficientSamples, "tail_check needs at least 1000 draws");
  }
  bound.validate();
  const double lip = probe.lipschitz;
  return evaluate_tails(samples, probe, [&](double s) { return bound.value(s, lip); }, s_grid);
}

/// Draws `n` samples from a black-box source and checks them.
using SampleSource = std::function<RowMatrix(Eigen::Index n, std::uint64_t seed)>;

inline TailReport tail_check(const SampleSource& source, const LipschitzProbe& probe, const ConcentrationBound& bound,
                             Eigen::Index n, const std::vector<double>& s_grid, std::uint64_t seed = 0) {
  return tail_check(source(n, seed), probe, bound, s_grid);
}

/// Checks tails of sampler output against 2 exp(-s^2 / (2 L_f^2)) + 2 N c1 exp(-c2 d).
/// L_f is each probe's declared constant, read as the Lipschitz constant of
/// the probe composed with the sampler (as a map of its Gaussian inputs).
inline std::vector<TailReport> composite_tail_check(const Eigen::Ref<const RowMatrix>& samples,
                                                    const std::vector<LipschitzProbe>& probes, int n_steps,
                                                    double c1, double c2, const std::vector<double>& s_grid) {
  const double d = static_cast<double>(samples.cols());
  std::vector<TailReport> out;
  for (const auto& p : probes) {
    const double lf = p.lipschitz;
    out.push_back(evaluate_tails(
        samples, p,
        [=](double s) { return 2.0 * std::exp(-s * s / (2.0 * lf * lf)) + 2.0 * n_steps * c1 * std::exp(-c2 * d); },
        s_grid));
  }
  return out;
}

struct StepLipschitzEstimate {
  double max_norm = 0.0;             // over base points
  std::vector<double> per_point;     // one per base point
};

/// Upper estimate of the operator norm of the Jacobian of sampler step i,
/// injected noise frozen. The Jacobian is assembled column by column from
/// central differences at base points drawn from the step-i marginal.
inline StepLipschitzEstimate estimate_step_lipschitz(const SamplerConfig& cfg, const Denoiser& denoise,
                                                     Eigen::Index d, int step, int n_probes,
                                                     double epsilon_rel = 1e-5) {
  cfg.validate();
  if (step < 0 || step >= cfg.schedule.size()) throw Error(ErrorKind::kInvalidRange, "step out of range", step);
  if (n_probes < 1) throw Error(ErrorKind::kInvalidRange, "n_probes must be >= 1");
  const double eps = epsilon_rel * cfg.schedule.at(step);
  StepLipschitzEstimate out;
  for (int p = 0; p < n_probes; ++p) {
    // Base point: run a fresh trajectory up to step i.
    Rng rng(seeds::derive(cfg.seed, "lipschitz", step, p));
    Vector x = cfg.schedule.at(0) * standard_normal(d, rng);
    for (int i = 0; i < step; ++i) x = sample_step(x, i, cfg, denoise, rng);
    const Vector noise = draw_step_noise(d, cfg, rng);
    Matrix jac(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
      Vector e = Vector::Zero(d);
      e[j] = eps;
      Vector plus = sample_step_with_noise(x + e, step, cfg, denoise, noise).next;
      Vector minus = sample_step_with_noise(x - e, step, cfg, denoise, noise).next;
      jac.col(j) = (plus - minus) / (2.0 * eps);
    }
    if (!jac.allFinite()) throw Error(ErrorKind::kNumericalFailure, "non-finite Jacobian estimate", step);
    Eigen::JacobiSVD<Matrix> svd(jac);
    const double norm = svd.singularValues()[0];
    out.per_point.push_back(norm);
    out.max_norm = std::max(out.max_norm, norm);
  }
  return out;
}

struct ContractionSummary {
  /// Over trajectories, for step i: ||x^(i)|| - ||x^(i+1)||.
  std::vector<double> mean_decrease;
  std::vector<double> var_decrease;
  double decreasing_fraction = 0.0;              // every step, ties count as decreasing
  double decreasing_fraction_after_first = 0.0;  // steps i >= 1
  long trajectories = 0;
};

inline ContractionSummary contraction_report(const std::vector<TrajectoryRecord>& records) {
  if (records.empty()) throw Error(ErrorKind::kData, "contraction_report needs at least one record");
  const std::size_t steps = records.front().step_norms.size();
  if (steps < 2) throw Error(ErrorKind::kData, "records carry no step norms");
  ContractionSummary s;
  s.trajectories = static_cast<long>(records.size());
  s.mean_decrease.assign(steps - 1, 0.0);
  s.var_decrease.assign(steps - 1, 0.0);
  long dec = 0, dec_after = 0, total_after = 0;
  for (const auto& r : records) {
    if (r.step_norms.size() != steps) throw Error(ErrorKind::kData, "records differ in length");
    for (std::size_t i = 0; i + 1 < steps; ++i) {
      const double diff = r.step_norms[i] - r.step_norms[i + 1];
      s.mean_decrease[i] += diff;
      s.var_decrease[i] += diff * diff;
      if (diff >= 0.0) {
        ++dec;
        if (i >= 1) ++dec_after;
      }
      if (i >= 1) ++total_after;
    }
  }
  const double m = static_cast<double>(records.size());
  for (std::size_t i = 0; i + 1 < steps; ++i) {
    s.mean_decrease[i] /= m;
    s.var_decrease[i] = std::max(0.0, s.var_decrease[i] / m - s.mean_decrease[i] * s.mean_decrease[i]);
  }
  s.decreasing_fraction = static_cast<double>(dec) / (m * static_cast<double>(steps - 1));
  s.decreasing_fraction_after_first =
      total_after > 0 ? static_cast<double>(dec_after) / static_cast<double>(total_after) : 1.0;
  return s;
}

/// Per-class contraction summaries; records[c] holds class c's trajectories.
inline std::vector<ContractionSummary> contraction_by_class(
    const std::vector<std::vector<TrajectoryRecord>>& records) {
  std::vector<ContractionSummary> out;
  for (const auto& r : records) out.push_back(contraction_report(r));
  return out;
}

struct ClassDiagnostics {
  int class_id = 0;
  long n = 0;
  double mean_norm = 0.0;
  std::vector<double> k_hat;  // k_hat[q-1], q = 1..q_max
  double var_quadratic_identity = 0.0;
  double var_quadratic_projection_max = 0.0;
  double gram_condition = 0.0;  // s_min / s_max of X X^T (0 when n > d)
  bool gram_singular = false;
};

/// Moment and conditioning diagnostics per class. Directions and random
/// projections are drawn from `seed`.
inline std::vector<ClassDiagnostics> assumption_diagnostics(const LabeledDataset& data, int n_directions,
                                                            int q_max = 6, std::uint64_t seed = 0,
                                                            int n_projections = 4) {
  const Eigen::Index d = data.dimension();
  std::vector<ClassDiagnostics> out;
  Rng rng(seeds::derive(seed, "diagnostics"));
  std::vector<Vector> directions;
  for (int k = 0; k < n_directions; ++k) directions.push_back(standard_normal(d, rng).normalized());
  // Random orthogonal projections onto a d/2-dimensional subspace: symmetric, unit operator norm.
  std::vector<Matrix> projections;
  for (int k = 0; k < n_projections; ++k) {
    Matrix g(d, std::max<Eigen::Index>(1, d / 2));
    for (Eigen::Index j = 0; j < g.cols(); ++j) g.col(j) = standard_normal(d, rng);
    Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ() * Matrix::Identity(d, g.cols());
    projections.push_back(q * q.transpose());
  }
  auto variance = [](const Vector& v) {
    const double m = v.mean();
    return (v.array() - m).square().mean();
  };
  for (int c = 0; c < data.num_classes(); ++c) {
    RowMatrix x = data.class_samples(c);
    ClassDiagnostics diag;
    diag.class_id = c;
    diag.n = x.rows();
    if (x.rows() == 0) {
      out.push_back(diag);
      continue;
    }
    Vector mu = x.colwise().mean().transpose();
    diag.mean_norm = mu.norm();
    RowMatrix centered = x.rowwise() - mu.transpose();
    diag.k_hat.assign(static_cast<std::size_t>(q_max), 0.0);
    for (const auto& v : directions) {
      Vector proj = centered * v;
      for (int q = 1; q <= q_max; ++q) {
        const double moment = proj.array().abs().pow(q).mean();
        diag.k_hat[static_cast<std::size_t>(q - 1)] =
            std::max(diag.k_hat[static_cast<std::size_t>(q - 1)], moment * std::pow(static_cast<double>(d), q / 2.0));
      }
    }
    diag.var_quadratic_identity = variance(x.rowwise().squaredNorm());
    for (const auto& p : projections) {
      Vector quad = ((x * p).array() * x.array()).rowwise().sum();
      diag.var_quadratic_projection_max = std::max(diag.var_quadratic_projection_max, variance(quad));
    }
    // X X^T has rank <= d, so for n > d only s_max needs a solve (on X^T X).
    const bool wide = x.rows() <= d;
    Matrix gram = wide ? Matrix(x * x.transpose()) : Matrix(x.transpose() * x);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
    const double s_max = eig.eigenvalues().maxCoeff();
    const double s_min = wide ? std::max(0.0, eig.eigenvalues().minCoeff()) : 0.0;
    diag.gram_condition = s_max > 0.0 ? s_min / s_max : 0.0;
    diag.gram_singular = diag.gram_condition <= 1e-10;
    out.push_back(std::move(diag));
  }
  return out;
}

/// ||x||_p computed with max-abs scaling so large p cannot overflow.
inline double lp_norm(const Eigen::Ref<const Vector>& x, double p) {
  const double m = x.cwiseAbs().maxCoeff();
  if (m == 0.0) return 0.0;
  return m * std::pow((x.cwiseAbs() / m).array().pow(p).sum(), 1.0 / p);
}

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges
  std::vector<long> counts;
};

struct NormSummary {
  int class_id = 0;
  double p = 2.0;
  double mean = 0.0;
  double sd = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> quantile_levels{0.05, 0.25, 0.5, 0.75, 0.95};
  std::vector<double> quantiles;
  Histogram histogram;
};

inline Histogram make_histogram(const std::vector<double>& sorted, int bins) {
  Histogram h;
  const double lo = sorted.front();
  const double hi = sorted.back();
  if (hi == lo) {
    h.edges = {lo, hi};
    h.counts = {static_cast<long>(sorted.size())};
    return h;
  }
  const double width = (hi - lo) / bins;
  for (int b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + b * width);
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double v : sorted) {
    int b = std::min(bins - 1, static_cast<int>((v - lo) / width));
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

/// Linear-interpolated quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double level) {
  const double pos = level * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(sorted.size() - 1, lo + 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::vector<NormSummary> norm_distributions(const LabeledDataset& data,
                                                   const std::vector<double>& p_list = {2.0, 4.0, 10.0},
                                                   int bins = 20) {
  std::vector<NormSummary> out;
  for (int c = 0; c < data.num_classes(); ++c) {
    RowMatrix x = data.class_samples(c);
    if (x.rows() == 0) continue;
    for (double p : p_list) {
      std::vector<double> v(static_cast<std::size_t>(x.rows()));
      for (Eigen::Index i = 0; i < x.rows(); ++i) v[static_cast<std::size_t>(i)] = lp_norm(x.row(i).transpose(), p);
      NormSummary s;
      s.class_id = c;
      s.p = p;
      const double n = static_cast<double>(v.size());
      s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
      double ss = 0.0;
      for (double e : v) ss += (e - s.mean) * (e - s.mean);
      s.sd = std::sqrt(ss / n);
      std::sort(v.begin(), v.end());
      s.min = v.front();
      s.max = v.back();
      for (double q : s.quantile_levels) s.quantiles.push_back(quantile_sorted(v, q));
      s.histogram = make_histogram(v, bins);
      out.push_back(std::move(s));
    }
  }
  return out;
}

// --- JSON ------------------------------------------------------------------

inline nlohmann::json to_json(const TailReport& r) {
  std::vector<int> flags(r.violation.begin(), r.violation.end());
  return {{"probe", r.probe},       {"certified", r.certified}, {"lipschitz", r.lipschitz},
          {"n", r.n},               {"mean", r.mean},           {"thresholds", r.thresholds},
          {"survival", r.survival}, {"ci_lo", r.ci_lo},         {"ci_hi", r.ci_hi},
          {"bound", r.bound},       {"margin", r.margin()},     {"violation", flags},
          {"violations", r.violations()}};
}

inline nlohmann::json to_json(const ContractionSummary& s) {
  return {{"trajectories", s.trajectories},
          {"decreasing_fraction", s.decreasing_fraction},
          {"decreasing_fraction_after_first", s.decreasing_fraction_after_first},
          {"mean_decrease", s.mean_decrease},
          {"var_decrease", s.var_decrease}};
}

inline nlohmann::json to_json(const ClassDiagnostics& d) {
  return {{"class_id", d.class_id},
          {"n", d.n},
          {"mean_norm", d.mean_norm},
          {"k_hat", d.k_hat},
          {"var_quadratic_identity", d.var_quadratic_identity},
          {"var_quadratic_projection_max", d.var_quadratic_projection_max},
          {"gram_condition", d.gram_condition},
          {"gram_singular", d.gram_singular}};
}

inline nlohmann::json to_json(const NormSummary& s) {
  return {{"class_id", s.class_id}, {"p", s.p},       {"mean", s.mean},
          {"sd", s.sd},             {"min", s.min},   {"max", s.max},
          {"quantile_levels", s.quantile_levels},     {"quantiles", s.quantiles}};
}

}  // namespace dul
