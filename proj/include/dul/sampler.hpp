#pragma once

// Stochastic second-order (Heun) sampler with noise injection, the warped
// noise-level grid it runs on, and per-step instrumentation.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dul/core.hpp"
#include "dul/dataset.hpp"
#include "dul/mixtures.hpp"
#include "dul/parallel.hpp"

namespace dul {

struct NoiseSchedule {
  std::vector<double> steps;  // t_0 > t_1 > ... > t_{N-1} > 0
  double rho = 7.0;
  double t_max = 80.0;
  double t_min = 0.002;

  int size() const { return static_cast<int>(steps.size()); }
  double at(int i) const { return steps[static_cast<std::size_t>(i)]; }
  /// t_{i+1}, with t_N taken as 0.
  double next(int i) const { return i + 1 < size() ? at(i + 1) : 0.0; }
};

/// t_i = (t_max^(1/rho) + i/(N-1) (t_min^(1/rho) - t_max^(1/rho)))^rho.
/// Endpoints are pinned to t_max and t_min exactly.
inline NoiseSchedule build_schedule(int n, double t_max, double t_min, double rho) {
  if (n < 2) throw Error(ErrorKind::kInvalidRange, "schedule needs N >= 2");
  if (!(t_min > 0.0) || !(t_max > t_min) || !std::isfinite(t_max)) {
    throw Error(ErrorKind::kInvalidRange, "need t_max > t_min > 0");
  }
  if (!(rho >= 1.0)) throw Error(ErrorKind::kInvalidRange, "need rho >= 1");
  NoiseSchedule s{{}, rho, t_max, t_min};
  s.steps.resize(static_cast<std::size_t>(n));
  const double a = std::pow(t_max, 1.0 / rho);
  const double b = std::pow(t_min, 1.0 / rho);
  for (int i = 0; i < n; ++i) {
    s.steps[static_cast<std::size_t>(i)] =
        std::pow(a + static_cast<double>(i) / static_cast<double>(n - 1) * (b - a), rho);
  }
  s.steps.front() = t_max;
  s.steps.back() = t_min;
  for (int i = 0; i + 1 < n; ++i) {
    if (!(s.at(i) > s.at(i + 1))) {
      throw Error(ErrorKind::kInvalidRange, "schedule is not strictly decreasing at step " + std::to_string(i));
    }
  }
  return s;
}

/// Any map (x, t) -> denoised x. The analytic mixture denoiser is the only
/// one shipped; a learned model can be wrapped the same way.
using Denoiser = std::function<Vector(const Vector&, double)>;

inline Denoiser mixture_denoiser(GaussianMixture model) {
  return [m = std::move(model)](const Vector& x, double t) { return ideal_denoiser(m, x, t); };
}

struct SamplerConfig {
  NoiseSchedule schedule = build_schedule(64, 80.0, 0.002, 7.0);
  double gamma = 0.0;
  double s_noise = 1.0;
  std::uint64_t seed = 0;
  bool record_trajectory = false;
  /// Coordinates whose magnitudes are tracked per step when recording.
  std::vector<int> record_pixels;

  void validate() const {
    if (!(gamma >= 0.0)) throw Error(ErrorKind::kInvalidRange, "gamma must be >= 0");
    if (!(s_noise > 0.0)) throw Error(ErrorKind::kInvalidRange, "s_noise must be > 0");
    if (schedule.size() < 2) throw Error(ErrorKind::kInvalidRange, "schedule needs N >= 2");
  }
};

struct TrajectoryRecord {
  std::vector<double> step_norms;            // ||x^(i)||, i = 0..N
  std::vector<double> post_injection_norms;  // ||x_hat^(i)||, i = 0..N-1
  std::vector<std::vector<double>> coordinate_norms;  // [step][pixel], i = 0..N
  Vector final;
};

struct StepResult {
  Vector next;
  Vector injected;  // x_hat
};

namespace detail {

inline Vector checked_denoise(const Denoiser& denoise, const Vector& x, double t, int step) {
  Vector out = denoise(x, t);
  if (out.size() != x.size()) {
    throw Error(ErrorKind::kDimensionMismatch,
                "denoiser returned " + std::to_string(out.size()) + " values for d=" +
                    std::to_string(x.size()),
                step);
  }
  return out;
}

}  // namespace detail

/// One loop body of the sampler with the injected noise given explicitly
/// (already scaled by s_noise).
inline StepResult sample_step_with_noise(const Vector& x, int i, const SamplerConfig& cfg,
                                         const Denoiser& denoise, const Vector& noise) {
  const auto& sched = cfg.schedule;
  if (i < 0 || i >= sched.size()) throw Error(ErrorKind::kInvalidRange, "step index out of range", i);
  const double t = sched.at(i);
  const double t_next = sched.next(i);
  const double t_hat = t * (1.0 + cfg.gamma);

  StepResult r;
  r.injected = x + t * std::sqrt(cfg.gamma * (2.0 + cfg.gamma)) * noise;
  const double h = t_next - t_hat;
  Vector slope = (r.injected - detail::checked_denoise(denoise, r.injected, t_hat, i)) / t_hat;
  r.next = r.injected + h * slope;
  if (t_next != 0.0) {
    Vector slope2 = (r.next - detail::checked_denoise(denoise, r.next, t_next, i)) / t_next;
    r.next = r.injected + 0.5 * h * (slope + slope2);
  }
  if (!r.next.allFinite()) {
    throw Error(ErrorKind::kNumericalFailure, "non-finite state after step " + std::to_string(i), i);
  }
  return r;
}

inline Vector draw_step_noise(Eigen::Index d, const SamplerConfig& cfg, Rng& rng) {
  return cfg.s_noise * standard_normal(d, rng);
}

inline Vector sample_step(const Vector& x, int i, const SamplerConfig& cfg, const Denoiser& denoise,
                          Rng& rng) {
  return sample_step_with_noise(x, i, cfg, denoise, draw_step_noise(x.size(), cfg, rng)).next;
}

/// Called with (i, x^(i)) for i = 0..N.
using StepObserver = std::function<void(int, const Vector&)>;

namespace detail {

inline void record_state(TrajectoryRecord& rec, const SamplerConfig& cfg, const Vector& x) {
  rec.step_norms.push_back(x.norm());
  if (!cfg.record_pixels.empty()) {
    std::vector<double> px;
    px.reserve(cfg.record_pixels.size());
    for (int j : cfg.record_pixels) px.push_back(std::abs(x[j]));
    rec.coordinate_norms.push_back(std::move(px));
  }
}

}  // namespace detail

/// Draws x^(0) ~ N(0, t_0^2 I) and applies all N steps. Everything random
/// comes from one stream seeded with cfg.seed.
inline std::pair<Vector, TrajectoryRecord> run_sampler(const SamplerConfig& cfg, const Denoiser& denoise,
                                                       Eigen::Index d, const StepObserver& observe = {}) {
  cfg.validate();
  for (int j : cfg.record_pixels) {
    if (j < 0 || j >= d) throw Error(ErrorKind::kInvalidRange, "record_pixels index out of range");
  }
  Rng rng(cfg.seed);
  const int n = cfg.schedule.size();
  Vector x = cfg.schedule.at(0) * standard_normal(d, rng);
  TrajectoryRecord rec;
  if (cfg.record_trajectory) detail::record_state(rec, cfg, x);
  if (observe) observe(0, x);
  for (int i = 0; i < n; ++i) {
    StepResult step = sample_step_with_noise(x, i, cfg, denoise, draw_step_noise(d, cfg, rng));
    x = std::move(step.next);
    if (cfg.record_trajectory) {
      rec.post_injection_norms.push_back(step.injected.norm());
      detail::record_state(rec, cfg, x);
    }
    if (observe) observe(i + 1, x);
  }
  rec.final = x;
  return {std::move(x), std::move(rec)};
}

/// Runs pairs of trajectories from independent starts that share every
/// injected noise vector, and returns ||x^(i) - x~^(i)|| / ||x^(0) - x~^(0)||
/// for i = 0..N, one row per pair.
inline std::vector<std::vector<double>> paired_trajectories(const SamplerConfig& cfg, const Denoiser& denoise,
                                                            Eigen::Index d, int n_pairs) {
  cfg.validate();
  if (n_pairs < 1) throw Error(ErrorKind::kInvalidRange, "n_pairs must be >= 1");
  const int n = cfg.schedule.size();
  std::vector<std::vector<double>> ratios;
  for (int p = 0; p < n_pairs; ++p) {
    Rng rng(seeds::derive(cfg.seed, "pair", p));
    Vector a = cfg.schedule.at(0) * standard_normal(d, rng);
    Vector b = cfg.schedule.at(0) * standard_normal(d, rng);
    const double start = (a - b).norm();
    std::vector<double> row{1.0};
    for (int i = 0; i < n; ++i) {
      Vector noise = draw_step_noise(d, cfg, rng);
      a = sample_step_with_noise(a, i, cfg, denoise, noise).next;
      b = sample_step_with_noise(b, i, cfg, denoise, noise).next;
      row.push_back((a - b).norm() / start);
    }
    ratios.push_back(std::move(row));
  }
  return ratios;
}

/// Seed of trajectory `index` under a base seed.
inline std::uint64_t trajectory_seed(std::uint64_t base, std::int64_t index) {
  return seeds::derive(base, "trajectory", static_cast<std::uint64_t>(index));
}

/// State of every trajectory of a dataset at one sampler step, rows in
/// dataset order.
struct Snapshot {
  int step = 0;
  RowMatrix samples;
};

struct GeneratedClass {
  RowMatrix samples;
  std::vector<TrajectoryRecord> records;  // empty unless recording
  std::vector<Snapshot> snapshots;        // one per requested step
};

/// n independent trajectories against one class's ideal denoiser. The
/// per-trajectory seed depends only on (cfg.seed, index), so output does not
/// depend on the thread count. `snapshot_steps` lists steps i in [0, N] at
/// which x^(i) of every trajectory is kept.
inline GeneratedClass generate_class(const GaussianMixture& target, Eigen::Index n, const SamplerConfig& cfg,
                                     unsigned threads = 1, const std::vector<int>& snapshot_steps = {}) {
  const Eigen::Index d = target.dimension();
  Denoiser denoise = mixture_denoiser(target);
  GeneratedClass out;
  out.samples.resize(n, d);
  // slot[i] = position of step i in snapshot_steps, or -1.
  std::vector<int> slot(static_cast<std::size_t>(cfg.schedule.size() + 1), -1);
  for (std::size_t k = 0; k < snapshot_steps.size(); ++k) {
    const int step = snapshot_steps[k];
    if (step < 0 || step > cfg.schedule.size()) throw Error(ErrorKind::kInvalidRange, "snapshot step out of range");
    slot[static_cast<std::size_t>(step)] = static_cast<int>(k);
    out.snapshots.push_back({step, RowMatrix(n, d)});
  }
  std::vector<TrajectoryRecord> records(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    SamplerConfig local = cfg;
    local.seed = trajectory_seed(cfg.seed, static_cast<std::int64_t>(i));
    const auto row = static_cast<Eigen::Index>(i);
    StepObserver keep;
    if (!snapshot_steps.empty()) {
      keep = [&](int step, const Vector& x) {
        const int k = slot[static_cast<std::size_t>(step)];
        if (k >= 0) out.snapshots[static_cast<std::size_t>(k)].samples.row(row) = x.transpose();
      };
    }
    auto [x, rec] = run_sampler(local, denoise, d, keep);
    out.samples.row(row) = x.transpose();
    if (cfg.record_trajectory) records[i] = std::move(rec);
  });
  if (cfg.record_trajectory) out.records = std::move(records);
  return out;
}

struct GeneratedDataset {
  LabeledDataset data;
  /// records[c][j] belongs to the j-th sample of class c.
  std::vector<std::vector<TrajectoryRecord>> records;
  std::vector<Snapshot> snapshots;  // rows stacked in class order
};

/// Diffusion-generated dataset, class c drawn with the denoiser of class c.
inline GeneratedDataset generate_dataset(const ClassConditionalModel& model,
                                         const std::vector<Eigen::Index>& per_class,
                                         const SamplerConfig& cfg, unsigned threads = 1,
                                         const std::vector<int>& snapshot_steps = {}) {
  if (per_class.size() != model.classes().size()) {
    throw Error(ErrorKind::kDimensionMismatch, "per-class counts do not match class count");
  }
  std::vector<RowMatrix> blocks;
  std::vector<std::vector<RowMatrix>> snap_blocks(snapshot_steps.size());
  GeneratedDataset out;
  for (int c = 0; c < model.num_classes(); ++c) {
    SamplerConfig class_cfg = cfg;
    class_cfg.seed = seeds::derive(cfg.seed, "class", c);
    auto gen = generate_class(model.classes()[static_cast<std::size_t>(c)].mixture,
                              per_class[static_cast<std::size_t>(c)], class_cfg, threads, snapshot_steps);
    blocks.push_back(std::move(gen.samples));
    out.records.push_back(std::move(gen.records));
    for (std::size_t k = 0; k < snapshot_steps.size(); ++k) snap_blocks[k].push_back(std::move(gen.snapshots[k].samples));
  }
  out.data = stack_classes(blocks, "diffusion");
  for (std::size_t k = 0; k < snapshot_steps.size(); ++k) {
    out.snapshots.push_back({snapshot_steps[k], stack_classes(snap_blocks[k], "diffusion").x()});
  }
  return out;
}

}  // namespace dul
