#include "dul/sampler.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace dul {
namespace {

GaussianMixture single_gaussian(const Vector& mu, const Matrix& sigma) {
  return GaussianMixture({GaussianComponent::from_covariance(mu, sigma)});
}

TEST(BuildSchedule, DefaultGridEndpointsAreExact) {
  auto s = build_schedule(256, 80.0, 0.002, 7.0);
  ASSERT_EQ(s.size(), 256);
  EXPECT_EQ(s.at(0), 80.0);
  EXPECT_EQ(s.at(255), 0.002);
  for (int i = 0; i + 1 < s.size(); ++i) EXPECT_GT(s.at(i), s.at(i + 1));
  EXPECT_EQ(s.next(255), 0.0);
}

TEST(BuildSchedule, LinearWarpAndRangeChecks) {
  EXPECT_THROW(build_schedule(3, 1.0, 0.0, 1.0), Error);
  auto s = build_schedule(3, 1.0, 0.5, 1.0);
  EXPECT_DOUBLE_EQ(s.at(0), 1.0);
  EXPECT_DOUBLE_EQ(s.at(1), 0.75);
  EXPECT_DOUBLE_EQ(s.at(2), 0.5);
  try {
    build_schedule(10, 1.0, 2.0, 7.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidRange);
  }
}

TEST(BuildSchedule, TwoStepsAreTheEndpoints) {
  for (double rho : {1.0, 3.0, 7.0}) {
    auto s = build_schedule(2, 10.0, 0.1, rho);
    EXPECT_EQ(s.steps, (std::vector<double>{10.0, 0.1}));
  }
}

TEST(SampleStep, ZeroDenoiserFollowsScalarRecurrence) {
  SamplerConfig cfg;
  cfg.schedule = build_schedule(8, 5.0, 0.01, 7.0);
  cfg.gamma = 0.1;
  Denoiser zero = [](const Vector& x, double) { return Vector::Zero(x.size()); };
  Vector x(1);
  x << 1.7;
  Rng rng(1);
  for (int i = 0; i < cfg.schedule.size(); ++i) {
    Vector noise(1);
    noise << 0.3 - 0.1 * i;
    // Hand evaluation with D = 0, so f(x, t) = x / t.
    const double t = cfg.schedule.at(i), tn = cfg.schedule.next(i);
    const double t_hat = t * (1 + cfg.gamma);
    const double x_hat = x[0] + t * std::sqrt(cfg.gamma * (2 + cfg.gamma)) * noise[0];
    const double h = tn - t_hat;
    double expected = x_hat + h * x_hat / t_hat;
    if (tn != 0.0) expected = x_hat + 0.5 * h * (x_hat / t_hat + expected / tn);
    auto step = sample_step_with_noise(x, i, cfg, zero, noise);
    EXPECT_NEAR(step.next[0], expected, 1e-13 * (std::abs(expected) + std::abs(x_hat)));
    EXPECT_NEAR(step.injected[0], x_hat, 1e-15);
    x = step.next;
  }
  // The last step goes to t = 0, where D = 0 collapses everything.
  EXPECT_NEAR(x[0], 0.0, 1e-15);
}

TEST(SampleStep, IdentityDenoiserIsAFixedPoint) {
  SamplerConfig cfg;
  Denoiser ident = [](const Vector& x, double) { return x; };
  std::mt19937_64 gen(2);
  Vector x = oracles::random_vector(6, 3.0, gen);
  Rng rng(3);
  for (int i = 0; i < cfg.schedule.size(); ++i) {
    Vector next = sample_step(x, i, cfg, ident, rng);
    EXPECT_TRUE(next == x);
  }
}

TEST(SampleStep, OneHeunStepMatchesGaussianOracleVariance) {
  // x^(i) ~ N(0, Sigma + t_i^2 I). With gamma = 0 and an affine denoiser the
  // step is x -> U diag(g) U^T x, where per eigen-direction
  //   g = 1 + h/2 [ (1 - a(t))/t + (1 - a(t'))/t' (1 + h (1 - a(t))/t) ],
  // a(s) = lambda / (lambda + s^2).
  std::mt19937_64 gen(4);
  const int d = 4;
  Matrix sigma = oracles::random_spd(d, 0.05, 1.0, gen);
  auto m = single_gaussian(Vector::Zero(d), sigma);
  SamplerConfig cfg;
  cfg.schedule = build_schedule(16, 80.0, 0.002, 7.0);
  const int i = 10;
  const double t = cfg.schedule.at(i), tn = cfg.schedule.next(i), h = tn - t;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma);
  Denoiser denoise = mixture_denoiser(m);
  const int n = 100000;
  Matrix out(n, d);
  Rng rng(5);
  Matrix root = eig.eigenvectors() * (eig.eigenvalues().array() + t * t).sqrt().matrix().asDiagonal();
  for (int r = 0; r < n; ++r) {
    Vector x = root * standard_normal(d, rng);
    out.row(r) = sample_step(x, i, cfg, denoise, rng).transpose();
  }
  for (int j = 0; j < d; ++j) {
    const double lam = eig.eigenvalues()[j];
    const double f1 = (1 - lam / (lam + t * t)) / t;
    const double f2 = (1 - lam / (lam + tn * tn)) / tn;
    const double g = 1 + 0.5 * h * (f1 + f2 * (1 + h * f1));
    const double oracle = g * g * (lam + t * t);
    Vector proj = out * eig.eigenvectors().col(j);
    const double var = proj.squaredNorm() / n;
    EXPECT_NEAR(var / oracle, 1.0, 0.03) << "direction " << j;
  }
}

TEST(SampleStep, ReportsBadDenoiserOutput) {
  SamplerConfig cfg;
  Rng rng(6);
  Denoiser short_out = [](const Vector&, double) { return Vector::Zero(1); };
  try {
    sample_step(Vector::Zero(3), 0, cfg, short_out, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDimensionMismatch);
  }
  Denoiser nan_late = [](const Vector& x, double t) {
    return t < 1.0 ? Vector::Constant(x.size(), std::nan("")) : Vector(x);
  };
  try {
    run_sampler(cfg, nan_late, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumericalFailure);
    EXPECT_GT(e.step(), 0);
    EXPECT_LT(e.step(), cfg.schedule.size());
  }
}

TEST(RunSampler, PointMassTargetCollapses) {
  Vector mu(3);
  mu << 0.5, -1.0, 2.0;
  auto m = single_gaussian(mu, Matrix::Zero(3, 3));
  SamplerConfig cfg;
  cfg.schedule = build_schedule(2, 80.0, 0.002, 7.0);
  auto [x, rec] = run_sampler(cfg, mixture_denoiser(m), 3);
  EXPECT_LE((x - mu).norm(), 0.002);
}

TEST(RunSampler, FixedSeedIsBitIdentical) {
  std::mt19937_64 gen(7);
  auto m = single_gaussian(oracles::random_vector(5, 1.0, gen), oracles::random_spd(5, 0.1, 1.0, gen));
  SamplerConfig cfg;
  cfg.gamma = 0.05;
  cfg.seed = 1234;
  cfg.record_trajectory = true;
  cfg.record_pixels = {0, 3};
  auto a = run_sampler(cfg, mixture_denoiser(m), 5);
  auto b = run_sampler(cfg, mixture_denoiser(m), 5);
  EXPECT_EQ(std::memcmp(a.first.data(), b.first.data(), 5 * sizeof(double)), 0);
  EXPECT_EQ(a.second.step_norms, b.second.step_norms);
  EXPECT_EQ(a.second.post_injection_norms, b.second.post_injection_norms);
  EXPECT_EQ(a.second.coordinate_norms, b.second.coordinate_norms);
  EXPECT_EQ(a.second.step_norms.size(), 65u);
  EXPECT_EQ(a.second.post_injection_norms.size(), 64u);
  ASSERT_EQ(a.second.coordinate_norms.size(), 65u);
  EXPECT_EQ(a.second.coordinate_norms.back()[1], std::abs(a.first[3]));
  EXPECT_TRUE(a.second.final == a.first);
}

TEST(RunSampler, SingleGaussianTargetMomentsSmallScale) {
  std::mt19937_64 gen(8);
  const int d = 4;
  Vector mu = oracles::random_vector(d, 1.0, gen);
  Matrix sigma = oracles::random_spd(d, 0.1, 1.0, gen);
  SamplerConfig cfg;
  cfg.seed = 9;
  auto out = generate_class(single_gaussian(mu, sigma), 5000, cfg);
  Vector mean = out.samples.colwise().mean().transpose();
  Matrix centered = out.samples.rowwise() - mean.transpose();
  Matrix cov = centered.transpose() * centered / 5000.0;
  for (int j = 0; j < d; ++j) EXPECT_LE(std::abs(mean[j] - mu[j]), 3.0 * std::sqrt(sigma(j, j) / 5000.0));
  EXPECT_LE((cov - sigma).norm() / sigma.norm(), 0.08);
}

TEST(RunSampler, ThreadCountDoesNotChangeOutput) {
  std::mt19937_64 gen(10);
  auto m = single_gaussian(oracles::random_vector(3, 1.0, gen), oracles::random_spd(3, 0.1, 1.0, gen));
  SamplerConfig cfg;
  cfg.gamma = 0.05;
  cfg.seed = 3;
  auto a = generate_class(m, 40, cfg, 1);
  auto b = generate_class(m, 40, cfg, 4);
  EXPECT_TRUE(a.samples == b.samples);
}

TEST(PairedTrajectories, IdentityDenoiserKeepsRatioOne) {
  SamplerConfig cfg;
  Denoiser ident = [](const Vector& x, double) { return x; };
  for (auto& row : paired_trajectories(cfg, ident, 4, 3))
    for (double r : row) EXPECT_EQ(r, 1.0);
  cfg.gamma = 0.05;
  for (auto& row : paired_trajectories(cfg, ident, 4, 3))
    for (double r : row) EXPECT_NEAR(r, 1.0, 1e-12);
}

TEST(PairedTrajectories, PointMassTargetContracts) {
  auto m = single_gaussian(Vector::Constant(4, 0.3), Matrix::Zero(4, 4));
  SamplerConfig cfg;
  cfg.gamma = 0.05;
  for (auto& row : paired_trajectories(cfg, mixture_denoiser(m), 4, 10)) EXPECT_LE(row.back(), 1e-3);
}

TEST(PairedTrajectories, CompactGaussianRatiosMostlyNonIncreasing) {
  std::mt19937_64 gen(11);
  const int d = 16;
  Matrix sigma = oracles::random_spd(d, 0.01, 1.0, gen);
  sigma /= sigma.trace();
  auto m = single_gaussian(oracles::random_vector(d, 0.1, gen), sigma);
  SamplerConfig cfg;
  cfg.seed = 12;
  long steps = 0, non_increasing = 0;
  for (auto& row : paired_trajectories(cfg, mixture_denoiser(m), d, 100)) {
    for (std::size_t i = 0; i + 1 < row.size(); ++i) {
      ++steps;
      if (row[i + 1] <= row[i]) ++non_increasing;
    }
  }
  EXPECT_GE(static_cast<double>(non_increasing) / steps, 0.99);
}

TEST(RunSampler, CompactMixtureNormsDecrease) {
  std::mt19937_64 gen(13);
  const int d = 16;
  std::vector<GaussianComponent> comps;
  for (int k = 0; k < 3; ++k) {
    Matrix sigma = oracles::random_spd(d, 0.01, 1.0, gen);
    Vector mu = oracles::random_vector(d, 1.0, gen);
    comps.push_back(GaussianComponent::from_covariance(mu.normalized() * 0.8, sigma / sigma.trace(), 1.0 / 3));
  }
  SamplerConfig cfg;
  cfg.record_trajectory = true;
  cfg.seed = 14;
  auto out = generate_class(GaussianMixture(comps), 200, cfg);
  long steps = 0, dec = 0;
  for (const auto& rec : out.records) {
    for (std::size_t i = 1; i + 1 < rec.step_norms.size(); ++i) {
      ++steps;
      if (rec.step_norms[i + 1] <= rec.step_norms[i]) ++dec;
    }
  }
  EXPECT_GE(static_cast<double>(dec) / steps, 0.99);
}

}  // namespace
}  // namespace dul
