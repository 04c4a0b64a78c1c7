#pragma once

// Linear classifiers trained by SGD on one-hot targets, the minimum-norm
// interpolator that constant-step SGD converges to on least squares, and
// empirical/Gaussian generalization error.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dul/core.hpp"
#include "dul/dataset.hpp"
#include "dul/mixtures.hpp"

namespace dul {

enum class Objective {
  kSoftmaxMse,    // ||Y - softmax(XW)||_F^2
  kSigmoidMse,    // k = 2, (y - sigmoid(x^T (w_1 - w_0)))^2
  kCrossEntropy,  // -log softmax(XW)_y
  kInterpolation  // ||Y - XW||_F^2, no link
};

inline const char* to_string(Objective o) {
  switch (o) {
    case Objective::kSoftmaxMse: return "softmax_mse";
    case Objective::kSigmoidMse: return "sigmoid_mse";
    case Objective::kCrossEntropy: return "cross_entropy";
    case Objective::kInterpolation: return "interpolation";
  }
  return "unknown";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "softmax_mse") return Objective::kSoftmaxMse;
  if (s == "sigmoid_mse") return Objective::kSigmoidMse;
  if (s == "cross_entropy") return Objective::kCrossEntropy;
  if (s == "interpolation" || s == "mse") return Objective::kInterpolation;
  throw Error(ErrorKind::kUsage, "unknown objective '" + s + "'");
}

struct LinearClassifier {
  Matrix w;   // d x k
  Matrix w0;  // initialization
  Objective objective = Objective::kInterpolation;

  Eigen::Index dimension() const { return w.rows(); }
  Eigen::Index num_classes() const { return w.cols(); }
};

struct TrainConfig {
  double learning_rate = 0.01;
  bool cosine_anneal = true;
  int batch_size = 32;
  int epochs = 100;
  /// Early stop once held-out loss has not improved by `tolerance` for
  /// `patience` epochs. Needs a validation set.
  double tolerance = 1e-6;
  int patience = 20;
  /// Stop as soon as training loss drops below this (0 disables).
  double target_loss = 0.0;
  /// W0 entries ~ N(0, init_scale^2 / d); 0 gives W0 = 0.
  double init_scale = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::kInvalidRange, "learning rate must be > 0");
    if (batch_size < 1) throw Error(ErrorKind::kInvalidRange, "batch size must be >= 1");
    if (epochs < 1) throw Error(ErrorKind::kInvalidRange, "epochs must be >= 1");
  }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double test_loss = std::nan("");
  double test_accuracy = std::nan("");
};

struct TrainResult {
  LinearClassifier classifier;
  std::vector<EpochStats> curve;
  long updates = 0;
};

namespace glm_detail {

inline Vector softmax(const Vector& z) {
  Vector e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

inline double sigmoid(double u) {
  return u >= 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
}

/// Loss of one row and its gradient with respect to the logits z = W^T x.
inline double row_loss(Objective obj, const Vector& z, int label, Vector* grad_z) {
  const Eigen::Index k = z.size();
  switch (obj) {
    case Objective::kInterpolation: {
      Vector r = z;
      r[label] -= 1.0;
      if (grad_z) *grad_z = 2.0 * r;
      return r.squaredNorm();
    }
    case Objective::kSoftmaxMse: {
      Vector p = softmax(z);
      Vector r = p;
      r[label] -= 1.0;
      if (grad_z) {
        // softmax Jacobian diag(p) - p p^T applied to 2r.
        Vector g = 2.0 * r;
        *grad_z = p.cwiseProduct(g) - p * p.dot(g);
      }
      return r.squaredNorm();
    }
    case Objective::kCrossEntropy: {
      const double top = z.maxCoeff();
      const double lse = top + std::log((z.array() - top).exp().sum());
      if (grad_z) {
        Vector p = (z.array() - lse).exp();
        p[label] -= 1.0;
        *grad_z = p;
      }
      return lse - z[label];
    }
    case Objective::kSigmoidMse: {
      if (k != 2) throw Error(ErrorKind::kDimensionMismatch, "sigmoid_mse needs k = 2");
      const double p = sigmoid(z[1] - z[0]);
      const double y = label == 1 ? 1.0 : 0.0;
      if (grad_z) {
        const double g = 2.0 * (p - y) * p * (1.0 - p);
        *grad_z = Vector(2);
        (*grad_z) << -g, g;
      }
      return (p - y) * (p - y);
    }
  }
  return 0.0;
}

}  // namespace glm_detail

/// argmax_l x^T w_l with ties going to the smallest index.
inline int predict(const LinearClassifier& clf, const Eigen::Ref<const Vector>& x) {
  Vector z = clf.w.transpose() * x;
  int best = 0;
  for (Eigen::Index l = 1; l < z.size(); ++l)
    if (z[l] > z[best]) best = static_cast<int>(l);
  return best;
}

inline double test_error(const LinearClassifier& clf, const LabeledDataset& test) {
  if (test.dimension() != clf.dimension()) {
    throw Error(ErrorKind::kDimensionMismatch, "classifier and dataset dimensions differ");
  }
  if (test.num_classes() > clf.num_classes()) {
    throw Error(ErrorKind::kDimensionMismatch, "dataset has more classes than the classifier");
  }
  Matrix logits = test.x() * clf.w;
  long wrong = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (Eigen::Index l = 1; l < logits.cols(); ++l)
      if (logits(i, l) > logits(i, best)) best = static_cast<int>(l);
    if (best != test.labels()[static_cast<std::size_t>(i)]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(test.size());
}

/// Mean per-row objective over a dataset.
inline double mean_loss(const LinearClassifier& clf, const LabeledDataset& data) {
  Matrix logits = data.x() * clf.w;
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    total += glm_detail::row_loss(clf.objective, logits.row(i).transpose(),
                                  data.labels()[static_cast<std::size_t>(i)], nullptr);
  }
  return total / static_cast<double>(data.size());
}

inline Matrix initial_weights(Eigen::Index d, Eigen::Index k, const TrainConfig& cfg) {
  if (cfg.init_scale == 0.0) return Matrix::Zero(d, k);
  Rng rng(seeds::derive(cfg.seed, "init"));
  std::normal_distribution<double> normal(0.0, cfg.init_scale / std::sqrt(static_cast<double>(d)));
  Matrix w(d, k);
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = 0; i < d; ++i) w(i, j) = normal(rng);
  return w;
}

/// Minibatch SGD. Each epoch visits the rows in a fresh seeded permutation;
/// the per-row losses of a batch are averaged.
inline TrainResult train_sgd(const LabeledDataset& data, const TrainConfig& cfg, Objective objective,
                             const LabeledDataset* validation = nullptr,
                             std::optional<Matrix> w0 = std::nullopt) {
  cfg.validate();
  const Eigen::Index n = data.size();
  const Eigen::Index d = data.dimension();
  const Eigen::Index k = data.num_classes();
  if (objective == Objective::kSigmoidMse && k != 2) {
    throw Error(ErrorKind::kDimensionMismatch, "sigmoid_mse needs exactly two classes");
  }
  if (objective == Objective::kInterpolation && d < n) {
    throw Error(ErrorKind::kInvalidRange, "interpolation objective needs d >= n");
  }
  TrainResult result;
  LinearClassifier& clf = result.classifier;
  clf.objective = objective;
  clf.w0 = w0 ? *w0 : initial_weights(d, k, cfg);
  if (clf.w0.rows() != d || clf.w0.cols() != k) {
    throw Error(ErrorKind::kDimensionMismatch, "W0 has the wrong shape");
  }
  clf.w = clf.w0;

  Rng rng(seeds::derive(cfg.seed, "order"));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  const double pi = std::acos(-1.0);

  Matrix grad(d, k);
  Vector gz(k);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.cosine_anneal
                          ? cfg.learning_rate * 0.5 * (1.0 + std::cos(pi * epoch / cfg.epochs))
                          : cfg.learning_rate;
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index stop = std::min<Eigen::Index>(n, start + cfg.batch_size);
      grad.setZero();
      for (Eigen::Index b = start; b < stop; ++b) {
        const Eigen::Index row = order[static_cast<std::size_t>(b)];
        Vector x = data.x().row(row).transpose();
        glm_detail::row_loss(objective, clf.w.transpose() * x, data.labels()[static_cast<std::size_t>(row)], &gz);
        grad.noalias() += x * gz.transpose();
      }
      clf.w -= (lr / static_cast<double>(stop - start)) * grad;
      ++result.updates;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = mean_loss(clf, data);
    if (!std::isfinite(stats.train_loss) || !clf.w.allFinite()) {
      throw Error(ErrorKind::kTrainingDiverged,
                  "loss became non-finite after " + std::to_string(result.updates) + " updates",
                  result.updates);
    }
    if (validation) {
      stats.test_loss = mean_loss(clf, *validation);
      stats.test_accuracy = 1.0 - test_error(clf, *validation);
    }
    result.curve.push_back(stats);
    if (cfg.target_loss > 0.0 && stats.train_loss < cfg.target_loss) break;
    if (validation && cfg.patience > 0) {
      if (stats.test_loss < best - cfg.tolerance) {
        best = stats.test_loss;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }
  return result;
}

/// W = W0 + X^T (X X^T)^{-1} (Y - X W0): the closest interpolator to W0 in
/// Frobenius norm.
inline LinearClassifier min_norm_interpolator(const LabeledDataset& data, const Matrix& w0) {
  const Matrix x = data.x();
  const Matrix& y = data.one_hot();
  if (w0.rows() != x.cols() || w0.cols() != y.cols()) {
    throw Error(ErrorKind::kDimensionMismatch, "W0 has the wrong shape");
  }
  Matrix gram = x * x.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  const double s_max = eig.eigenvalues().maxCoeff();
  const double s_min = eig.eigenvalues().minCoeff();
  if (!(s_max > 0.0) || s_min <= 1e-10 * s_max) {
    throw Error(ErrorKind::kSingularSystem,
                "X X^T is rank deficient (s_min/s_max = " + std::to_string(s_max > 0 ? s_min / s_max : 0.0) + ")");
  }
  Matrix dual = gram.llt().solve(y - x * w0);
  LinearClassifier clf;
  clf.objective = Objective::kInterpolation;
  clf.w0 = w0;
  clf.w = w0 + x.transpose() * dual;
  const double residual = (x * clf.w - y).norm();
  if (residual > 1e-8 * y.norm()) {
    throw Error(ErrorKind::kNumericalFailure, "interpolation residual " + std::to_string(residual));
  }
  return clf;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

struct GaussianErrorResult {
  double error = 0.0;
  double std_error = 0.0;  // 0 for the closed form
  long draws = 0;        // 0 for the closed form
  std::vector<double> per_class;
};

struct MonteCarloOptions {
  long draws_per_class = 100000;
  std::uint64_t seed = 0;
};

/// Generalization error of W when class c is exactly N(mu_c, Sigma_c).
/// k = 2 uses the closed form Phi(-mu^T Delta / ||Sigma^{1/2} Delta||) with
/// Delta = w_c - w_other; k > 2 is estimated by Monte Carlo.
inline GaussianErrorResult gaussian_error(const LinearClassifier& clf, const ClassConditionalModel& model,
                                          MonteCarloOptions mc = {}) {
  const int k = model.num_classes();
  if (clf.num_classes() != k || clf.dimension() != model.dimension()) {
    throw Error(ErrorKind::kDimensionMismatch, "classifier does not match model shape");
  }
  for (const auto& c : model.classes()) {
    if (c.mixture.components().size() != 1) {
      throw Error(ErrorKind::kData, "gaussian_error needs single-Gaussian classes");
    }
  }
  GaussianErrorResult out;
  out.per_class.resize(static_cast<std::size_t>(k));
  if (k == 2) {
    for (int c = 0; c < 2; ++c) {
      const auto& g = model.classes()[static_cast<std::size_t>(c)].mixture.components().front();
      Vector delta = clf.w.col(c) - clf.w.col(1 - c);
      const double margin = g.mean().dot(delta);
      const double var = delta.dot(g.covariance() * delta);
      double err;
      if (var <= 0.0) {
        if (margin == 0.0) {
          throw Error(ErrorKind::kDegenerateClassifier, "decision statistic is constant zero");
        }
        err = margin > 0.0 ? 0.0 : 1.0;
      } else {
        err = normal_cdf(-margin / std::sqrt(var));
      }
      out.per_class[static_cast<std::size_t>(c)] = err;
      out.error += model.priors()[c] * err;
    }
    return out;
  }
  double variance = 0.0;
  for (int c = 0; c < k; ++c) {
    const auto& mix = model.classes()[static_cast<std::size_t>(c)].mixture;
    RowMatrix draws = sample_mixture(mix, mc.draws_per_class, seeds::derive(mc.seed, "gaussian_error", c));
    LabeledDataset ds(std::move(draws), std::vector<int>(static_cast<std::size_t>(mc.draws_per_class), c), k);
    const double p = test_error(clf, ds);
    out.per_class[static_cast<std::size_t>(c)] = p;
    out.error += model.priors()[c] * p;
    variance += model.priors()[c] * model.priors()[c] * p * (1.0 - p) / static_cast<double>(mc.draws_per_class);
  }
  out.std_error = std::sqrt(variance);
  out.draws = mc.draws_per_class * k;
  return out;
}

}  // namespace dul
