#pragma once

// Gaussian mixtures: fitting, sampling, serialization, and the exact
// posterior-mean denoiser of a mixture observed under isotropic noise.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dul/core.hpp"
#include "dul/dataset.hpp"

namespace dul {

/// Symmetric eigendecomposition of a covariance, eigenvalues descending.
/// Round-off negatives (down to -1e-10 of the top eigenvalue) are floored to
/// zero and counted in `clamp_count`, as are exact zeros.
struct PSDFactor {
  Matrix eigenvectors;  // columns
  Vector eigenvalues;
  int clamp_count = 0;

  Eigen::Index dimension() const { return eigenvalues.size(); }

  Matrix reconstruct() const {
    return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
  }

  static PSDFactor of(const Matrix& cov) {
    if (cov.rows() != cov.cols() || cov.rows() == 0) {
      throw Error(ErrorKind::kInvalidCovariance, "covariance must be square and non-empty");
    }
    if (!cov.allFinite()) throw Error(ErrorKind::kInvalidCovariance, "non-finite covariance");
    const double scale = cov.cwiseAbs().maxCoeff();
    const double asym = (cov - cov.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * scale) {
      throw Error(ErrorKind::kInvalidCovariance,
                  "covariance not symmetric (max asymmetry " + std::to_string(asym) + ")");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    if (solver.info() != Eigen::Success) {
      throw Error(ErrorKind::kInvalidCovariance, "eigendecomposition failed");
    }
    const Eigen::Index d = cov.rows();
    PSDFactor f;
    f.eigenvalues = solver.eigenvalues().reverse();
    f.eigenvectors = solver.eigenvectors().rowwise().reverse();
    const double top = std::max(f.eigenvalues[0], 0.0);
    for (Eigen::Index j = 0; j < d; ++j) {
      double& v = f.eigenvalues[j];
      if (v < -1e-10 * top) {
        throw Error(ErrorKind::kInvalidCovariance,
                    "covariance has eigenvalue " + std::to_string(v) + " below clamp tolerance");
      }
      if (v <= 0.0) {
        v = 0.0;
        ++f.clamp_count;
      }
    }
    return f;
  }

  /// Takes eigen-form input as given (e.g. from disk). Sorts descending and
  /// checks orthogonality.
  static PSDFactor from_eigen(Matrix vecs, Vector vals) {
    const Eigen::Index d = vals.size();
    if (vecs.rows() != d || vecs.cols() != d || d == 0) {
      throw Error(ErrorKind::kInvalidCovariance, "eigenvector matrix shape does not match eigenvalues");
    }
    if ((vecs.transpose() * vecs - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() > 1e-8) {
      throw Error(ErrorKind::kInvalidCovariance, "eigenvectors are not orthonormal");
    }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return vals[a] > vals[b]; });
    PSDFactor f;
    f.eigenvalues.resize(d);
    f.eigenvectors.resize(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
      double v = vals[order[static_cast<std::size_t>(j)]];
      if (v < 0.0) throw Error(ErrorKind::kInvalidCovariance, "negative eigenvalue in eigen form");
      if (v == 0.0) ++f.clamp_count;
      f.eigenvalues[j] = v;
      f.eigenvectors.col(j) = vecs.col(order[static_cast<std::size_t>(j)]);
    }
    return f;
  }
};

class GaussianComponent {
 public:
  GaussianComponent() = default;

  static GaussianComponent from_covariance(Vector mean, const Matrix& cov, double weight = 1.0) {
    if (cov.rows() != mean.size()) {
      throw Error(ErrorKind::kDimensionMismatch, "mean and covariance dimensions differ");
    }
    return GaussianComponent(std::move(mean), cov, PSDFactor::of(cov), weight);
  }

  static GaussianComponent from_factor(Vector mean, PSDFactor factor, double weight = 1.0) {
    if (factor.dimension() != mean.size()) {
      throw Error(ErrorKind::kDimensionMismatch, "mean and factor dimensions differ");
    }
    Matrix cov = factor.reconstruct();
    cov = 0.5 * (cov + cov.transpose());
    return GaussianComponent(std::move(mean), std::move(cov), std::move(factor), weight);
  }

  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return cov_; }
  const PSDFactor& factor() const { return factor_; }
  double weight() const { return weight_; }
  Eigen::Index dimension() const { return mean_.size(); }

  GaussianComponent with_weight(double w) const {
    GaussianComponent c = *this;
    c.weight_ = w;
    c.check_weight();
    return c;
  }

 private:
  GaussianComponent(Vector mean, Matrix cov, PSDFactor factor, double weight)
      : mean_(std::move(mean)), cov_(std::move(cov)), factor_(std::move(factor)), weight_(weight) {
    check_weight();
  }

  void check_weight() const {
    if (!(weight_ >= 0.0 && weight_ <= 1.0)) {
      throw Error(ErrorKind::kData, "component weight outside [0, 1]");
    }
  }

  Vector mean_;
  Matrix cov_;
  PSDFactor factor_;
  double weight_ = 1.0;
};

class GaussianMixture {
 public:
  GaussianMixture() = default;

  explicit GaussianMixture(std::vector<GaussianComponent> components)
      : components_(std::move(components)) {
    if (components_.empty()) throw Error(ErrorKind::kData, "mixture needs at least one component");
    dimension_ = components_.front().dimension();
    double total = 0.0;
    for (const auto& c : components_) {
      if (c.dimension() != dimension_) {
        throw Error(ErrorKind::kDimensionMismatch, "mixture components differ in dimension");
      }
      total += c.weight();
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw Error(ErrorKind::kData, "component weights sum to " + std::to_string(total));
    }
  }

  const std::vector<GaussianComponent>& components() const { return components_; }
  Eigen::Index dimension() const { return dimension_; }

  Vector mean() const {
    Vector m = Vector::Zero(dimension_);
    for (const auto& c : components_) m += c.weight() * c.mean();
    return m;
  }

  /// Law of total variance.
  Matrix covariance() const {
    Matrix second = Matrix::Zero(dimension_, dimension_);
    for (const auto& c : components_) {
      second += c.weight() * (c.covariance() + c.mean() * c.mean().transpose());
    }
    Vector m = mean();
    Matrix cov = second - m * m.transpose();
    return 0.5 * (cov + cov.transpose());
  }

 private:
  std::vector<GaussianComponent> components_;
  Eigen::Index dimension_ = 0;
};

struct ClassEntry {
  int id = 0;
  GaussianMixture mixture;
};

/// Class-conditional target: class c has law classes[c].mixture and prior
/// priors[c].
class ClassConditionalModel {
 public:
  ClassConditionalModel() = default;

  ClassConditionalModel(std::vector<ClassEntry> classes, Vector priors)
      : classes_(std::move(classes)), priors_(std::move(priors)) {
    if (classes_.empty()) throw Error(ErrorKind::kData, "model needs at least one class");
    if (priors_.size() != static_cast<Eigen::Index>(classes_.size())) {
      throw Error(ErrorKind::kDimensionMismatch, "prior count differs from class count");
    }
    if ((priors_.array() < 0.0).any() || std::abs(priors_.sum() - 1.0) > 1e-12) {
      throw Error(ErrorKind::kData, "class priors are not a probability vector");
    }
    std::vector<int> ids;
    for (const auto& c : classes_) {
      if (c.mixture.dimension() != classes_.front().mixture.dimension()) {
        throw Error(ErrorKind::kDimensionMismatch, "classes differ in dimension");
      }
      ids.push_back(c.id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
      throw Error(ErrorKind::kData, "duplicate class id");
    }
  }

  const std::vector<ClassEntry>& classes() const { return classes_; }
  const Vector& priors() const { return priors_; }
  int num_classes() const { return static_cast<int>(classes_.size()); }
  Eigen::Index dimension() const { return classes_.front().mixture.dimension(); }

 private:
  std::vector<ClassEntry> classes_;
  Vector priors_;
};

// --- fitting ---------------------------------------------------------------

struct FitOptions {
  /// Divide by n-1 instead of n.
  bool unbiased = false;
};

inline GaussianComponent fit_gaussian(const Eigen::Ref<const RowMatrix>& samples,
                                      FitOptions opts = {}) {
  const Eigen::Index n = samples.rows();
  if (n < 2) {
    throw Error(ErrorKind::kInsufficientSamples,
                "fit_gaussian needs n >= 2, got " + std::to_string(n));
  }
  Vector mean = samples.colwise().mean().transpose();
  Matrix centered = samples.rowwise() - mean.transpose();
  const double denom = opts.unbiased ? static_cast<double>(n - 1) : static_cast<double>(n);
  Matrix cov = (centered.transpose() * centered) / denom;
  cov = 0.5 * (cov + cov.transpose());
  return GaussianComponent::from_covariance(std::move(mean), cov, 1.0);
}

/// One single-Gaussian class per label, priors = empirical class frequencies.
inline ClassConditionalModel match_moments(const LabeledDataset& data, FitOptions opts = {}) {
  const int k = data.num_classes();
  std::vector<ClassEntry> classes;
  Vector priors(k);
  for (int c = 0; c < k; ++c) {
    RowMatrix block = data.class_samples(c);
    if (block.rows() < 2) {
      throw Error(ErrorKind::kInsufficientSamples,
                  "class " + std::to_string(c) + " has " + std::to_string(block.rows()) +
                      " samples, need >= 2");
    }
    priors[c] = static_cast<double>(block.rows()) / static_cast<double>(data.size());
    classes.push_back({c, GaussianMixture({fit_gaussian(block, opts)})});
  }
  priors /= priors.sum();
  return ClassConditionalModel(std::move(classes), std::move(priors));
}

// --- sampling --------------------------------------------------------------

/// Draws n rows. Component indices are drawn first, then the standard
/// normal block row by row, so the stream layout is fixed for a given seed.
inline RowMatrix sample_mixture(const GaussianMixture& model, Eigen::Index n, Rng& rng,
                                std::vector<int>* components_out = nullptr) {
  if (n < 1) throw Error(ErrorKind::kData, "sample_mixture needs n >= 1");
  const Eigen::Index d = model.dimension();
  const auto& comps = model.components();
  std::vector<double> cumulative;
  double acc = 0.0;
  for (const auto& c : comps) cumulative.push_back(acc += c.weight());

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<int> which(static_cast<std::size_t>(n));
  for (auto& w : which) {
    const double u = unif(rng) * acc;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    w = static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                  static_cast<std::ptrdiff_t>(comps.size()) - 1));
  }
  std::normal_distribution<double> normal;
  RowMatrix z(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = normal(rng);

  RowMatrix out(n, d);
  for (std::size_t k = 0; k < comps.size(); ++k) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (which[static_cast<std::size_t>(i)] == static_cast<int>(k)) rows.push_back(i);
    if (rows.empty()) continue;
    const PSDFactor& f = comps[k].factor();
    Matrix transform = f.eigenvalues.cwiseSqrt().asDiagonal() * f.eigenvectors.transpose();
    RowMatrix zk(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t r = 0; r < rows.size(); ++r) zk.row(static_cast<Eigen::Index>(r)) = z.row(rows[r]);
    RowMatrix xk = zk * transform;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.row(rows[r]) = xk.row(static_cast<Eigen::Index>(r)) + comps[k].mean().transpose();
    }
  }
  if (components_out) *components_out = std::move(which);
  return out;
}

inline RowMatrix sample_mixture(const GaussianMixture& model, Eigen::Index n, std::uint64_t seed,
                                std::vector<int>* components_out = nullptr) {
  Rng rng(seed);
  return sample_mixture(model, n, rng, components_out);
}

/// Samples `per_class` rows from every class of the model (balanced design).
inline LabeledDataset sample_classes(const ClassConditionalModel& model,
                                     const std::vector<Eigen::Index>& per_class,
                                     std::uint64_t seed, Provenance provenance = "gmm") {
  std::vector<RowMatrix> blocks;
  for (int c = 0; c < model.num_classes(); ++c) {
    blocks.push_back(sample_mixture(model.classes()[static_cast<std::size_t>(c)].mixture,
                                    per_class[static_cast<std::size_t>(c)],
                                    seeds::derive(seed, "class", c)));
  }
  return stack_classes(blocks, std::move(provenance));
}

// --- ideal denoiser --------------------------------------------------------

namespace detail {

inline void check_scale(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw Error(ErrorKind::kInvalidScale, "noise scale must be finite and > 0, got " + std::to_string(t));
  }
}

/// Per-component log weight + log N(x; mu_k, Sigma_k + t^2 I) up to the
/// shared -d/2 log(2 pi), and the component posterior mean.
struct ComponentTerms {
  std::vector<double> log_terms;
  std::vector<Vector> posterior_means;
};

inline ComponentTerms component_terms(const GaussianMixture& model, const Vector& x, double t) {
  const double t2 = t * t;
  ComponentTerms out;
  const auto& comps = model.components();
  out.log_terms.reserve(comps.size());
  out.posterior_means.reserve(comps.size());
  for (const auto& c : comps) {
    const PSDFactor& f = c.factor();
    Vector z = f.eigenvectors.transpose() * (x - c.mean());
    Vector s = f.eigenvalues.array() + t2;
    double log_det = s.array().log().sum();
    double quad = (z.array().square() / s.array()).sum();
    double lw = c.weight() > 0.0 ? std::log(c.weight()) : -std::numeric_limits<double>::infinity();
    out.log_terms.push_back(lw - 0.5 * (log_det + quad));
    Vector shrink = (f.eigenvalues.array() / s.array()).matrix().cwiseProduct(z);
    out.posterior_means.push_back(c.mean() + f.eigenvectors * shrink);
  }
  return out;
}

inline std::vector<double> normalize_log(const std::vector<double>& log_terms, double* log_sum = nullptr) {
  const double top = *std::max_element(log_terms.begin(), log_terms.end());
  std::vector<double> r(log_terms.size());
  double total = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) total += (r[k] = std::exp(log_terms[k] - top));
  for (auto& v : r) v /= total;
  if (log_sum) *log_sum = top + std::log(total);
  return r;
}

}  // namespace detail

/// Posterior component probabilities of x under the t-noised mixture.
inline std::vector<double> responsibilities(const GaussianMixture& model, const Vector& x, double t) {
  detail::check_scale(t);
  if (x.size() != model.dimension()) throw Error(ErrorKind::kDimensionMismatch, "x has wrong dimension");
  return detail::normalize_log(detail::component_terms(model, x, t).log_terms);
}

/// E[x0 | x0 + t z = x] for x0 drawn from the mixture.
inline Vector ideal_denoiser(const GaussianMixture& model, const Vector& x, double t) {
  detail::check_scale(t);
  if (x.size() != model.dimension()) throw Error(ErrorKind::kDimensionMismatch, "x has wrong dimension");
  auto terms = detail::component_terms(model, x, t);
  auto r = detail::normalize_log(terms.log_terms);
  Vector out = Vector::Zero(x.size());
  for (std::size_t k = 0; k < r.size(); ++k) {
    if (r[k] > 0.0) out += r[k] * terms.posterior_means[k];
  }
  return out;
}

/// Score of the noised density, grad log p_t(x) = (D(x; t) - x) / t^2.
inline Vector mixture_score(const GaussianMixture& model, const Vector& x, double t) {
  return (ideal_denoiser(model, x, t) - x) / (t * t);
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json to_json(const GaussianMixture& m) {
  nlohmann::json comps = nlohmann::json::array();
  const Eigen::Index d = m.dimension();
  for (const auto& c : m.components()) {
    const PSDFactor& f = c.factor();
    std::vector<double> vecs;
    vecs.reserve(static_cast<std::size_t>(d * d));
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) vecs.push_back(f.eigenvectors(i, j));
    comps.push_back({{"weight", c.weight()},
                     {"mean", std::vector<double>(c.mean().data(), c.mean().data() + d)},
                     {"covariance_eigvals",
                      std::vector<double>(f.eigenvalues.data(), f.eigenvalues.data() + d)},
                     {"covariance_eigvecs", std::move(vecs)}});
  }
  return {{"dimension", d}, {"components", std::move(comps)}};
}

inline GaussianMixture mixture_from_json(const nlohmann::json& j) {
  try {
    const auto d = j.at("dimension").get<Eigen::Index>();
    if (d < 1) throw Error(ErrorKind::kData, "dimension must be positive");
    std::vector<GaussianComponent> comps;
    for (const auto& cj : j.at("components")) {
      auto mean = cj.at("mean").get<std::vector<double>>();
      auto vals = cj.at("covariance_eigvals").get<std::vector<double>>();
      auto vecs = cj.at("covariance_eigvecs").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(mean.size()) != d || static_cast<Eigen::Index>(vals.size()) != d ||
          static_cast<Eigen::Index>(vecs.size()) != d * d) {
        throw Error(ErrorKind::kDimensionMismatch, "component arrays do not match dimension");
      }
      Matrix u = Eigen::Map<const RowMatrix>(vecs.data(), d, d);
      comps.push_back(GaussianComponent::from_factor(
          Eigen::Map<const Vector>(mean.data(), d),
          PSDFactor::from_eigen(std::move(u), Eigen::Map<const Vector>(vals.data(), d)),
          cj.at("weight").get<double>()));
    }
    return GaussianMixture(std::move(comps));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, std::string("bad mixture document: ") + e.what());
  }
}

inline nlohmann::json to_json(const ClassConditionalModel& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < m.classes().size(); ++c) {
    classes.push_back({{"id", m.classes()[c].id},
                       {"prior", m.priors()[static_cast<Eigen::Index>(c)]},
                       {"mixture", to_json(m.classes()[c].mixture)}});
  }
  return {{"classes", std::move(classes)}};
}

inline ClassConditionalModel model_from_json(const nlohmann::json& j) {
  try {
    std::vector<ClassEntry> classes;
    std::vector<double> priors;
    for (const auto& cj : j.at("classes")) {
      classes.push_back({cj.at("id").get<int>(), mixture_from_json(cj.at("mixture"))});
      priors.push_back(cj.at("prior").get<double>());
    }
    return ClassConditionalModel(std::move(classes),
                                 Eigen::Map<const Vector>(priors.data(), static_cast<Eigen::Index>(priors.size())));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, std::string("bad model document: ") + e.what());
  }
}

}  // namespace dul
