#include "dul/glm.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace dul {
namespace {

LabeledDataset gaussian_rows(int n, int d, int k, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  RowMatrix x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = normal(gen);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % k;
  return LabeledDataset(std::move(x), std::move(labels), k);
}

ClassConditionalModel gaussian_classes(const std::vector<Vector>& means, const Matrix& cov) {
  std::vector<ClassEntry> classes;
  for (std::size_t c = 0; c < means.size(); ++c) {
    classes.push_back({static_cast<int>(c), GaussianMixture({GaussianComponent::from_covariance(means[c], cov)})});
  }
  return ClassConditionalModel(std::move(classes),
                               Vector::Constant(static_cast<Eigen::Index>(means.size()), 1.0 / means.size()));
}

TEST(RowLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 gen(1);
  for (auto obj : {Objective::kSoftmaxMse, Objective::kCrossEntropy, Objective::kInterpolation,
                   Objective::kSigmoidMse}) {
    const int k = obj == Objective::kSigmoidMse ? 2 : 4;
    for (int trial = 0; trial < 10; ++trial) {
      Vector z = oracles::random_vector(k, 2.0, gen);
      const int label = trial % k;
      Vector g;
      glm_detail::row_loss(obj, z, label, &g);
      auto f = [&](const Vector& u) { return glm_detail::row_loss(obj, u, label, nullptr); };
      Vector fd = oracles::fd_gradient(f, z, 1e-6);
      EXPECT_LE((g - fd).norm(), 1e-7 * (1.0 + fd.norm())) << to_string(obj);
    }
  }
}

TEST(TrainSgd, IdentityDesignReachesTargetsInOneEpoch) {
  const int k = 5;
  std::vector<int> labels{3, 0, 4, 1, 2};
  LabeledDataset data(RowMatrix::Identity(k, k), labels, k);
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.batch_size = 1;
  cfg.cosine_anneal = false;
  cfg.epochs = 1;
  auto res = train_sgd(data, cfg, Objective::kInterpolation);
  EXPECT_TRUE(res.classifier.w == data.one_hot());
  EXPECT_EQ(res.updates, k);
  EXPECT_EQ(test_error(res.classifier, data), 0.0);
}

TEST(TrainSgd, SeparableOneDimensionalSigmoidMse) {
  RowMatrix x(6, 1);
  x << -2, -1, -0.5, 0.5, 1, 2;
  LabeledDataset data(x, {0, 0, 0, 1, 1, 1}, 2);
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.batch_size = 2;
  cfg.epochs = 200;
  auto res = train_sgd(data, cfg, Objective::kSigmoidMse);
  EXPECT_EQ(test_error(res.classifier, data), 0.0);
  EXPECT_LT(res.curve.back().train_loss, res.curve.front().train_loss);
  EXPECT_GT(res.classifier.w(0, 1) - res.classifier.w(0, 0), 0.0);
}

TEST(TrainSgd, ConstantStepSgdConvergesToMinNormInterpolator) {
  auto data = gaussian_rows(16, 32, 2, 2);
  TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.cosine_anneal = false;
  cfg.batch_size = 4;
  cfg.epochs = 5000;
  cfg.init_scale = 1.0;
  cfg.seed = 3;
  auto res = train_sgd(data, cfg, Objective::kInterpolation);
  auto ref = min_norm_interpolator(data, res.classifier.w0);
  EXPECT_LE((res.classifier.w - ref.w).norm() / ref.w.norm(), 1e-4);
}

TEST(TrainSgd, DivergenceIsReported) {
  auto data = gaussian_rows(8, 16, 2, 4);
  TrainConfig cfg;
  cfg.learning_rate = 1e6;
  cfg.cosine_anneal = false;
  cfg.epochs = 500;
  try {
    train_sgd(data, cfg, Objective::kInterpolation);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTrainingDiverged);
    EXPECT_GT(e.step(), 0);
  }
}

TEST(TrainSgd, EarlyStoppingAndTargetLoss) {
  auto train = gaussian_rows(64, 8, 2, 5);
  auto val = gaussian_rows(64, 8, 2, 6);
  TrainConfig cfg;
  cfg.epochs = 1000;
  cfg.patience = 5;
  cfg.learning_rate = 0.1;
  auto res = train_sgd(train, cfg, Objective::kSoftmaxMse, &val);
  EXPECT_LT(res.curve.size(), 1000u);
  EXPECT_FALSE(std::isnan(res.curve.back().test_accuracy));

  LabeledDataset eye(RowMatrix::Identity(4, 4), {0, 1, 2, 3}, 4);
  cfg.target_loss = 1e-3;
  cfg.cosine_anneal = false;
  cfg.batch_size = 4;
  cfg.learning_rate = 1.0;
  auto fast = train_sgd(eye, cfg, Objective::kInterpolation);
  EXPECT_LT(fast.curve.back().train_loss, 1e-3);
  EXPECT_LT(fast.curve.size(), 100u);
}

TEST(TrainSgd, RejectsBadShapes) {
  auto data = gaussian_rows(16, 4, 3, 7);
  TrainConfig cfg;
  EXPECT_THROW(train_sgd(data, cfg, Objective::kSigmoidMse), Error);
  EXPECT_THROW(train_sgd(data, cfg, Objective::kInterpolation), Error);
  EXPECT_THROW(train_sgd(data, cfg, Objective::kSoftmaxMse, nullptr, Matrix::Zero(3, 3)), Error);
}

TEST(MinNormInterpolator, SingleBasisRow) {
  RowMatrix x(1, 3);
  x << 1, 0, 0;
  LabeledDataset data(x, {0}, 2);
  auto clf = min_norm_interpolator(data, Matrix::Zero(3, 2));
  Matrix expected = Matrix::Zero(3, 2);
  expected(0, 0) = 1.0;
  EXPECT_LE((clf.w - expected).norm(), 1e-15);
}

TEST(MinNormInterpolator, MatchesPseudoInverseOracle) {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto data = gaussian_rows(10 + trial, 40, 3, 9 + trial);
    Matrix w0(40, 3);
    for (int j = 0; j < 3; ++j) w0.col(j) = oracles::random_vector(40, 0.2, gen);
    const Matrix w0_copy = w0;
    auto clf = min_norm_interpolator(data, w0);
    EXPECT_TRUE(clf.w0 == w0_copy);
    Matrix x = data.x();
    Eigen::JacobiSVD<Matrix> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Matrix pinv = svd.matrixV() * svd.singularValues().cwiseInverse().asDiagonal() * svd.matrixU().transpose();
    Matrix oracle = w0 + pinv * (data.one_hot() - x * w0);
    EXPECT_LE((clf.w - oracle).norm() / oracle.norm(), 1e-10);
    // W - W0 lies in the row space of X.
    Matrix proj = pinv * x;
    EXPECT_LE(((Matrix::Identity(40, 40) - proj) * (clf.w - w0)).norm(), 1e-10);
    EXPECT_LE((x * clf.w - data.one_hot()).norm(), 1e-10);
  }
}

TEST(MinNormInterpolator, RankDeficientDesignFails) {
  RowMatrix x(3, 5);
  x.setRandom();
  x.row(2) = x.row(0);
  LabeledDataset data(x, {0, 1, 0}, 2);
  try {
    min_norm_interpolator(data, Matrix::Zero(5, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSingularSystem);
  }
}

TEST(TestError, PerfectZeroAndTiesAndScaling) {
  LabeledDataset data(RowMatrix::Identity(4, 4), {0, 1, 2, 3}, 4);
  LinearClassifier clf;
  clf.w = Matrix::Identity(4, 4);
  EXPECT_EQ(test_error(clf, data), 0.0);

  auto rows = gaussian_rows(90, 5, 3, 10);
  clf.w = Matrix::Zero(5, 3);
  EXPECT_DOUBLE_EQ(test_error(clf, rows), 1.0 - 30.0 / 90.0);

  clf.w = Matrix::Random(5, 3);
  const double base = test_error(clf, rows);
  for (double c : {1e-3, 2.0, 1e4}) {
    LinearClassifier scaled = clf;
    scaled.w *= c;
    EXPECT_EQ(test_error(scaled, rows), base);
  }
}

TEST(GaussianError, ClosedFormTwoClass) {
  Vector e1 = Vector::Unit(4, 0), e2 = Vector::Unit(4, 1);
  auto model = gaussian_classes({-e1, e1}, Matrix::Identity(4, 4));
  LinearClassifier clf;
  clf.w.resize(4, 2);
  clf.w.col(0) = -e1;
  clf.w.col(1) = e1;
  auto r = gaussian_error(clf, model);
  EXPECT_NEAR(r.error, oracles::normal_upper_tail(1.0), 1e-9);
  EXPECT_NEAR(r.error, 0.158655, 1e-6);

  clf.w.col(0) = -e2;
  clf.w.col(1) = e2;
  EXPECT_NEAR(gaussian_error(clf, model).error, 0.5, 1e-15);

  clf.w.setZero();
  try {
    gaussian_error(clf, model);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDegenerateClassifier);
  }
}

TEST(GaussianError, AgreesWithEmpiricalErrorOnLargeSample) {
  std::mt19937_64 gen(11);
  const int d = 6;
  Matrix cov = oracles::random_spd(d, 0.2, 2.0, gen);
  auto model = gaussian_classes({oracles::random_vector(d, 0.7, gen), oracles::random_vector(d, 0.7, gen)}, cov);
  LinearClassifier clf;
  clf.w = Matrix::Random(d, 2);
  const double p = gaussian_error(clf, model).error;
  const long n = 20000;
  auto sample = sample_classes(model, {n, n}, 12);
  const double emp = test_error(clf, sample);
  EXPECT_LE(std::abs(emp - p), 3.0 * std::sqrt(p * (1 - p) / (2.0 * n)));
}

TEST(GaussianError, ThreeClassMonteCarloMatchesQuadrature) {
  const double s = 0.8;
  std::vector<Vector> means;
  for (int c = 0; c < 3; ++c) {
    Vector m(2);
    m << std::cos(2 * M_PI * c / 3), std::sin(2 * M_PI * c / 3);
    means.push_back(m);
  }
  auto model = gaussian_classes(means, s * s * Matrix::Identity(2, 2));
  LinearClassifier clf;
  clf.w.resize(2, 3);
  for (int c = 0; c < 3; ++c) clf.w.col(c) = means[static_cast<std::size_t>(c)];
  auto mc = gaussian_error(clf, model, {100000, 13});

  // Midpoint rule for P(argmax != c) around each class mean.
  const int m = 800;
  const double half = 8 * s, h = 2 * half / m;
  double oracle = 0.0;
  for (int c = 0; c < 3; ++c) {
    const Vector& mu = means[static_cast<std::size_t>(c)];
    double wrong = 0.0;
    for (int a = 0; a < m; ++a) {
      for (int b = 0; b < m; ++b) {
        const double u = -half + (a + 0.5) * h, v = -half + (b + 0.5) * h;
        Vector x(2);
        x << mu[0] + u, mu[1] + v;
        Vector z = clf.w.transpose() * x;
        int best = 0;
        for (int l = 1; l < 3; ++l)
          if (z[l] > z[best]) best = l;
        if (best != c) wrong += std::exp(-(u * u + v * v) / (2 * s * s));
      }
    }
    oracle += wrong * h * h / (2 * M_PI * s * s) / 3.0;
  }
  EXPECT_GT(mc.std_error, 0.0);
  EXPECT_EQ(mc.draws, 300000);
  EXPECT_LE(std::abs(mc.error - oracle), 3.0 * mc.std_error);
}

}  // namespace
}  // namespace dul
