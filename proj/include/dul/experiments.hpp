#pragma once

// Experiment protocols driven by a JSON manifest: the diffusion-vs-GMM
// universality sweep, spectra campaigns and concentration campaigns. Each
// protocol returns its results and, given an output directory, writes
//   manifest.json, datasets/, models/, results/*.csv, aggregates/*.json,
//   logs/run.log
// Only logs/run.log carries timestamps; everything else is a pure function
// of the manifest.

#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dul/concentration.hpp"
#include "dul/core.hpp"
#include "dul/dataset.hpp"
#include "dul/glm.hpp"
#include "dul/io.hpp"
#include "dul/mixtures.hpp"
#include "dul/parallel.hpp"
#include "dul/sampler.hpp"
#include "dul/spectra.hpp"

namespace dul {

using json = nlohmann::json;

// --- synthetic targets -----------------------------------------------------

/// Class-conditional target with `components` Gaussians per class. Class
/// centers and component offsets point in random directions with the given
/// norms; each component covariance is a random rotation of a power-law
/// spectrum i^-decay scaled to `trace`.
struct SyntheticTarget {
  int dimension = 64;
  int classes = 4;
  int components = 3;
  double class_separation = 1.0;
  double component_spread = 0.5;
  double trace = 1.0;
  double decay = 1.2;
  std::uint64_t seed = 0;
};

inline ClassConditionalModel make_synthetic_model(const SyntheticTarget& t) {
  if (t.dimension < 1 || t.classes < 1 || t.components < 1) {
    throw Error(ErrorKind::kInvalidRange, "synthetic target needs d, classes, components >= 1");
  }
  if (!(t.trace > 0.0)) throw Error(ErrorKind::kInvalidRange, "synthetic target trace must be > 0");
  const Eigen::Index d = t.dimension;
  Vector lam(d);
  for (Eigen::Index i = 0; i < d; ++i) lam[i] = std::pow(static_cast<double>(i + 1), -t.decay);
  lam *= t.trace / lam.sum();
  auto direction = [d](Rng& rng) { return Vector(standard_normal(d, rng).normalized()); };
  std::vector<ClassEntry> classes;
  for (int c = 0; c < t.classes; ++c) {
    Rng rng(seeds::derive(t.seed, "synthetic", c));
    const Vector center = t.class_separation * direction(rng);
    std::vector<GaussianComponent> comps;
    for (int j = 0; j < t.components; ++j) {
      const Vector mu = center + t.component_spread * direction(rng);
      Matrix g(d, d);
      for (Eigen::Index k = 0; k < d; ++k) g.col(k) = standard_normal(d, rng);
      Matrix q = Eigen::HouseholderQR<Matrix>(g).householderQ();
      comps.push_back(GaussianComponent::from_factor(mu, PSDFactor::from_eigen(q, lam), 1.0 / t.components));
    }
    classes.push_back({c, GaussianMixture(std::move(comps))});
  }
  return ClassConditionalModel(std::move(classes), Vector::Constant(t.classes, 1.0 / t.classes));
}

// --- manifest --------------------------------------------------------------

enum class ExperimentKind { kUniversality, kSpectra, kConcentration };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::kUniversality: return "universality";
    case ExperimentKind::kSpectra: return "spectra";
    case ExperimentKind::kConcentration: return "concentration";
  }
  return "unknown";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
  if (s == "universality") return ExperimentKind::kUniversality;
  if (s == "spectra") return ExperimentKind::kSpectra;
  if (s == "concentration") return ExperimentKind::kConcentration;
  throw Error(ErrorKind::kUsage, "unknown experiment kind '" + s + "'");
}

struct ExperimentManifest {
  ExperimentKind kind = ExperimentKind::kUniversality;
  /// One of {"synthetic": {...}}, {"model": <model json>}, {"model_path": "..."}.
  json target = {{"synthetic", json::object()}};
  SamplerConfig sampler;
  TrainConfig train;
  Objective objective = Objective::kSoftmaxMse;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  std::string output_dir;

  // universality
  std::vector<Eigen::Index> splits{32, 64, 128, 256, 512};
  Eigen::Index n_test = 1024;
  Eigen::Index test_reserve = 2048;
  int repetitions = 10;
  bool cross_evaluate = false;
  /// Share split indices and W0 between the two sources of a repetition.
  bool paired_runs = true;

  // spectra and concentration
  Eigen::Index n_per_class = 0;  // 0: protocol default
  std::vector<int> snapshot_steps;  // empty: 8 log-spaced steps
  int top_k = 50;
  bool gram_centered = false;
  std::vector<std::string> probes{"linear_unit", "norm", "soft_relu_projection"};
  int n_directions = 4;
  std::vector<double> s_grid;  // empty: 40 points up to 4 sigma
  double bound_C = 2.0;
  int paired_trajectories = 0;
  int lipschitz_probes = 0;
  std::vector<double> norm_p{2.0, 4.0, 10.0};
};

namespace experiments_detail {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw Error(ErrorKind::kUsage, "unknown key '" + key + "' in " + where);
  }
}

}  // namespace experiments_detail

inline SyntheticTarget synthetic_from_json(const json& j) {
  using experiments_detail::read_opt;
  experiments_detail::reject_unknown(
      j, {"dimension", "classes", "components", "class_separation", "component_spread", "trace", "decay", "seed"},
      "synthetic target");
  SyntheticTarget t;
  read_opt(j, "dimension", t.dimension);
  read_opt(j, "classes", t.classes);
  read_opt(j, "components", t.components);
  read_opt(j, "class_separation", t.class_separation);
  read_opt(j, "component_spread", t.component_spread);
  read_opt(j, "trace", t.trace);
  read_opt(j, "decay", t.decay);
  read_opt(j, "seed", t.seed);
  return t;
}

inline json to_json(const SyntheticTarget& t) {
  return {{"dimension", t.dimension},   {"classes", t.classes},
          {"components", t.components}, {"class_separation", t.class_separation},
          {"component_spread", t.component_spread}, {"trace", t.trace},
          {"decay", t.decay},           {"seed", t.seed}};
}

inline json to_json(const SamplerConfig& c) {
  return {{"steps", c.schedule.size()}, {"t_max", c.schedule.t_max}, {"t_min", c.schedule.t_min},
          {"rho", c.schedule.rho},      {"gamma", c.gamma},          {"s_noise", c.s_noise}};
}

inline SamplerConfig sampler_from_json(const json& j) {
  using experiments_detail::read_opt;
  experiments_detail::reject_unknown(j, {"steps", "t_max", "t_min", "rho", "gamma", "s_noise"}, "sampler");
  int steps = 64;
  double t_max = 80.0, t_min = 0.002, rho = 7.0;
  SamplerConfig c;
  read_opt(j, "steps", steps);
  read_opt(j, "t_max", t_max);
  read_opt(j, "t_min", t_min);
  read_opt(j, "rho", rho);
  read_opt(j, "gamma", c.gamma);
  read_opt(j, "s_noise", c.s_noise);
  c.schedule = build_schedule(steps, t_max, t_min, rho);
  c.validate();
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"cosine_anneal", c.cosine_anneal}, {"batch_size", c.batch_size},
          {"epochs", c.epochs},               {"tolerance", c.tolerance},         {"patience", c.patience},
          {"target_loss", c.target_loss},     {"init_scale", c.init_scale}};
}

inline TrainConfig train_from_json(const json& j) {
  using experiments_detail::read_opt;
  experiments_detail::reject_unknown(j,
                                     {"learning_rate", "cosine_anneal", "batch_size", "epochs", "tolerance",
                                      "patience", "target_loss", "init_scale"},
                                     "train");
  TrainConfig c;
  c.learning_rate = 0.5;
  c.init_scale = 1.0;
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "cosine_anneal", c.cosine_anneal);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "tolerance", c.tolerance);
  read_opt(j, "patience", c.patience);
  read_opt(j, "target_loss", c.target_loss);
  read_opt(j, "init_scale", c.init_scale);
  c.validate();
  return c;
}

inline ExperimentManifest manifest_from_json(const json& j) {
  using experiments_detail::read_opt;
  if (!j.is_object()) throw Error(ErrorKind::kData, "manifest must be a JSON object");
  if (!j.contains("kind")) throw Error(ErrorKind::kUsage, "manifest has no 'kind'");
  experiments_detail::reject_unknown(
      j,
      {"kind", "target", "sampler", "train", "objective", "seed", "threads", "output_dir", "splits", "n_test",
       "test_reserve", "repetitions", "cross_evaluate", "paired_runs", "n_per_class", "snapshot_steps", "top_k", "gram_centered",
       "probes", "n_directions", "s_grid", "bound_C", "paired_trajectories", "lipschitz_probes", "norm_p"},
      "manifest");
  ExperimentManifest m;
  try {
    m.kind = experiment_kind_from_string(j.at("kind").get<std::string>());
    m.sampler = sampler_from_json(j.value("sampler", json::object()));
    m.train = train_from_json(j.value("train", json::object()));
    if (j.contains("target")) m.target = j.at("target");
    if (j.contains("objective")) m.objective = objective_from_string(j.at("objective").get<std::string>());
    read_opt(j, "seed", m.seed);
    read_opt(j, "threads", m.threads);
    read_opt(j, "output_dir", m.output_dir);
    read_opt(j, "splits", m.splits);
    read_opt(j, "n_test", m.n_test);
    read_opt(j, "test_reserve", m.test_reserve);
    read_opt(j, "repetitions", m.repetitions);
    read_opt(j, "cross_evaluate", m.cross_evaluate);
    read_opt(j, "paired_runs", m.paired_runs);
    read_opt(j, "n_per_class", m.n_per_class);
    read_opt(j, "snapshot_steps", m.snapshot_steps);
    read_opt(j, "top_k", m.top_k);
    read_opt(j, "gram_centered", m.gram_centered);
    read_opt(j, "probes", m.probes);
    read_opt(j, "n_directions", m.n_directions);
    read_opt(j, "s_grid", m.s_grid);
    read_opt(j, "bound_C", m.bound_C);
    read_opt(j, "paired_trajectories", m.paired_trajectories);
    read_opt(j, "lipschitz_probes", m.lipschitz_probes);
    read_opt(j, "norm_p", m.norm_p);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kData, std::string("manifest: ") + e.what());
  }
  if (m.repetitions < 1) throw Error(ErrorKind::kInvalidRange, "repetitions must be >= 1");
  if (m.splits.empty()) throw Error(ErrorKind::kInvalidRange, "splits must be nonempty");
  for (auto s : m.splits)
    if (s < 1) throw Error(ErrorKind::kInvalidRange, "split sizes must be >= 1");
  if (m.n_test < 1) throw Error(ErrorKind::kInvalidRange, "n_test must be >= 1");
  if (m.test_reserve < m.n_test) throw Error(ErrorKind::kInvalidRange, "test_reserve must be >= n_test");
  for (const auto& p : m.probes) {
    if (p != "linear_unit" && p != "norm" && p != "soft_relu_projection") {
      throw Error(ErrorKind::kUsage, "unknown probe family '" + p + "'");
    }
  }
  return m;
}

/// The manifest with every default filled in.
inline json to_json(const ExperimentManifest& m) {
  return {{"kind", to_string(m.kind)},
          {"target", m.target},
          {"sampler", to_json(m.sampler)},
          {"train", to_json(m.train)},
          {"objective", to_string(m.objective)},
          {"seed", m.seed},
          {"threads", m.threads},
          {"output_dir", m.output_dir},
          {"splits", m.splits},
          {"n_test", m.n_test},
          {"test_reserve", m.test_reserve},
          {"repetitions", m.repetitions},
          {"cross_evaluate", m.cross_evaluate},
          {"paired_runs", m.paired_runs},
          {"n_per_class", m.n_per_class},
          {"snapshot_steps", m.snapshot_steps},
          {"top_k", m.top_k},
          {"gram_centered", m.gram_centered},
          {"probes", m.probes},
          {"n_directions", m.n_directions},
          {"s_grid", m.s_grid},
          {"bound_C", m.bound_C},
          {"paired_trajectories", m.paired_trajectories},
          {"lipschitz_probes", m.lipschitz_probes},
          {"norm_p", m.norm_p}};
}

/// Hash of the normalized manifest minus fields that do not change results.
inline std::string manifest_hash(const ExperimentManifest& m) {
  json j = to_json(m);
  j.erase("threads");
  j.erase("output_dir");
  return io::config_hash(j);
}

inline ClassConditionalModel resolve_target(const json& target) {
  if (!target.is_object() || target.size() != 1) {
    throw Error(ErrorKind::kData, "target must have exactly one of synthetic, model, model_path");
  }
  if (target.contains("synthetic")) return make_synthetic_model(synthetic_from_json(target.at("synthetic")));
  if (target.contains("model")) return model_from_json(target.at("model"));
  if (target.contains("model_path")) {
    return model_from_json(io::read_json(target.at("model_path").get<std::string>()));
  }
  throw Error(ErrorKind::kData, "target must have exactly one of synthetic, model, model_path");
}

/// 8 steps spread log-uniformly over [0, N].
inline std::vector<int> default_snapshot_steps(int n_steps) {
  std::set<int> steps;
  for (int j = 0; j < 8; ++j) {
    steps.insert(static_cast<int>(std::lround(std::pow(n_steps + 1.0, j / 7.0))) - 1);
  }
  return {steps.begin(), steps.end()};
}

// --- output tree -----------------------------------------------------------

/// Append-only run log; the one place wall-clock time appears.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
  }
  void line(const std::string& msg) {
    if (!out_) return;
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    out_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << msg << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

namespace experiments_detail {

inline std::filesystem::path prepare_output(const ExperimentManifest& m) {
  namespace fs = std::filesystem;
  fs::path root(m.output_dir);
  for (const char* sub : {"datasets", "models", "results", "aggregates", "logs"}) fs::create_directories(root / sub);
  io::write_json(root / "manifest.json", to_json(m));
  return root;
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

}  // namespace experiments_detail

// --- universality ----------------------------------------------------------

struct UniversalityRun {
  Eigen::Index split = 0;  // training samples per class
  int rep = 0;
  std::string source;  // diffusion | gmm
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  double cross_accuracy = std::nan("");  // on the diffusion test set, if requested
  double train_loss = 0.0;
  int epochs = 0;
  std::vector<EpochStats> curve;
};

struct SplitAggregate {
  Eigen::Index split = 0;
  int runs = 0;  // per source
  double mean_diffusion = 0.0;
  double sd_diffusion = 0.0;
  double mean_gmm = 0.0;
  double sd_gmm = 0.0;
  double gap = 0.0;     // mean_diffusion - mean_gmm
  double spread = 0.0;  // sqrt((sd_diffusion^2 + sd_gmm^2) / 2)
  bool within_2sigma = false;
};

struct UniversalityResult {
  std::vector<UniversalityRun> runs;
  std::vector<SplitAggregate> aggregates;
  double max_abs_gap = 0.0;
  /// Set when runs failed and the caller asked to keep the rest.
  std::exception_ptr failure;
};

struct UniversalitySettings {
  std::vector<Eigen::Index> splits{32, 64, 128, 256, 512};
  Eigen::Index n_test = 1024;
  /// Rows per class held back for test draws (0: n_test).
  Eigen::Index test_reserve = 0;
  int repetitions = 10;
  TrainConfig train;
  Objective objective = Objective::kSoftmaxMse;
  bool cross_evaluate = false;
  bool paired_runs = true;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  /// On a failed run, return the completed runs with `failure` set instead
  /// of throwing.
  bool keep_partial = false;
};

/// Seed of one training run. Paired runs drop the source tag so both sources
/// of a repetition see the same split indices and W0.
inline std::uint64_t universality_run_seed(std::uint64_t base, Eigen::Index split, int rep,
                                           const std::string& source, bool paired) {
  const auto s = static_cast<std::uint64_t>(split);
  const auto r = static_cast<std::uint64_t>(rep);
  return paired ? seeds::derive(base, "universality", s, r) : seeds::derive(base, "universality", s, r, source);
}

/// Per-split means and spreads, recomputed from the raw runs.
inline std::vector<SplitAggregate> aggregate_universality(const std::vector<UniversalityRun>& runs) {
  std::vector<Eigen::Index> splits;
  for (const auto& r : runs)
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) splits.push_back(r.split);
  std::vector<SplitAggregate> out;
  for (auto split : splits) {
    std::vector<double> diff, gmm;
    for (const auto& r : runs) {
      if (r.split != split) continue;
      (r.source == "diffusion" ? diff : gmm).push_back(r.test_accuracy);
    }
    SplitAggregate a;
    a.split = split;
    a.runs = static_cast<int>(std::min(diff.size(), gmm.size()));
    a.mean_diffusion = experiments_detail::mean_of(diff);
    a.mean_gmm = experiments_detail::mean_of(gmm);
    a.sd_diffusion = experiments_detail::sample_sd(diff);
    a.sd_gmm = experiments_detail::sample_sd(gmm);
    a.gap = a.mean_diffusion - a.mean_gmm;
    a.spread = std::sqrt(0.5 * (a.sd_diffusion * a.sd_diffusion + a.sd_gmm * a.sd_gmm));
    a.within_2sigma = std::abs(a.gap) <= 2.0 * a.spread;
    out.push_back(a);
  }
  return out;
}

namespace experiments_detail {

struct SplitPools {
  std::vector<std::vector<Eigen::Index>> train;    // per class
  std::vector<std::vector<Eigen::Index>> reserve;  // per class, test draws only
};

/// The last `reserve` rows of each class are held back for test draws; the
/// rest is the training pool.
inline SplitPools split_pools(const LabeledDataset& data, Eigen::Index reserve, Eigen::Index max_split) {
  SplitPools p;
  for (int c = 0; c < data.num_classes(); ++c) {
    auto rows = data.rows_of_class(c);
    const auto n = static_cast<Eigen::Index>(rows.size());
    if (n < reserve + max_split) {
      throw Error(ErrorKind::kInsufficientSamples, "class " + std::to_string(c) + " has " + std::to_string(n) +
                                                       " rows, needs " + std::to_string(reserve + max_split));
    }
    p.train.emplace_back(rows.begin(), rows.end() - reserve);
    p.reserve.emplace_back(rows.end() - reserve, rows.end());
  }
  return p;
}

/// `per_class` rows drawn without replacement from each class's pool.
inline std::vector<Eigen::Index> draw_rows(const std::vector<std::vector<Eigen::Index>>& pools,
                                           Eigen::Index per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Eigen::Index> rows;
  for (const auto& pool : pools) {
    std::vector<Eigen::Index> shuffled = pool;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    rows.insert(rows.end(), shuffled.begin(), shuffled.begin() + per_class);
  }
  return rows;
}

}  // namespace experiments_detail

/// Trains one classifier per (split, repetition, source) and evaluates each on
/// a test set drawn from its own source's reserve. Early stopping is off: the
/// test set only feeds the logged curves.
inline UniversalityResult run_universality(const LabeledDataset& diffusion, const LabeledDataset& gmm,
                                           const UniversalitySettings& s) {
  using experiments_detail::draw_rows;
  if (diffusion.dimension() != gmm.dimension() || diffusion.num_classes() != gmm.num_classes()) {
    throw Error(ErrorKind::kDimensionMismatch, "diffusion and GMM datasets differ in shape");
  }
  const Eigen::Index reserve = s.test_reserve > 0 ? s.test_reserve : s.n_test;
  if (reserve < s.n_test) throw Error(ErrorKind::kInvalidRange, "test reserve smaller than n_test");
  const Eigen::Index max_split = *std::max_element(s.splits.begin(), s.splits.end());
  const auto pools_diff = experiments_detail::split_pools(diffusion, reserve, max_split);
  const auto pools_gmm = experiments_detail::split_pools(gmm, reserve, max_split);

  struct Job {
    Eigen::Index split;
    int rep;
    bool is_gmm;
  };
  std::vector<Job> jobs;
  for (auto split : s.splits)
    for (int rep = 0; rep < s.repetitions; ++rep)
      for (bool g : {false, true}) jobs.push_back({split, rep, g});

  UniversalityResult result;
  result.runs.resize(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  parallel_for(jobs.size(), s.threads, [&](std::size_t i) {
    try {
      const Job& job = jobs[i];
      const auto& data = job.is_gmm ? gmm : diffusion;
      const auto& pools = job.is_gmm ? pools_gmm : pools_diff;
      UniversalityRun run;
      run.split = job.split;
      run.rep = job.rep;
      run.source = job.is_gmm ? "gmm" : "diffusion";
      run.seed = universality_run_seed(s.seed, job.split, job.rep, run.source, s.paired_runs);
      const auto train_rows = draw_rows(pools.train, job.split, seeds::derive(run.seed, "split"));
      const auto test_rows = draw_rows(pools.reserve, s.n_test, seeds::derive(run.seed, "test"));
      const std::set<Eigen::Index> held(test_rows.begin(), test_rows.end());
      for (auto r : train_rows) {
        if (held.count(r)) throw Error(ErrorKind::kData, "train split intersects the test set");
      }
      const LabeledDataset test = data.subset(test_rows);
      TrainConfig cfg = s.train;
      cfg.seed = run.seed;
      cfg.patience = 0;
      auto trained = train_sgd(data.subset(train_rows), cfg, s.objective, &test);
      run.test_accuracy = 1.0 - test_error(trained.classifier, test);
      if (s.cross_evaluate) {
        const auto shared = draw_rows(pools_diff.reserve, s.n_test, seeds::derive(run.seed, "test"));
        run.cross_accuracy = 1.0 - test_error(trained.classifier, diffusion.subset(shared));
      }
      run.train_loss = trained.curve.back().train_loss;
      run.epochs = static_cast<int>(trained.curve.size());
      run.curve = std::move(trained.curve);
      result.runs[i] = std::move(run);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (std::size_t i = errors.size(); i-- > 0;) {
    if (!errors[i]) continue;
    if (!s.keep_partial) std::rethrow_exception(errors[i]);
    result.failure = errors[i];
    result.runs.erase(result.runs.begin() + static_cast<std::ptrdiff_t>(i));
  }
  result.aggregates = aggregate_universality(result.runs);
  for (const auto& a : result.aggregates) result.max_abs_gap = std::max(result.max_abs_gap, std::abs(a.gap));
  return result;
}

inline std::string universality_csv(const std::vector<UniversalityRun>& runs) {
  std::ostringstream out;
  out << "split,rep,source,seed,test_accuracy,cross_accuracy,train_loss,epochs\n";
  for (const auto& r : runs) {
    out << r.split << ',' << r.rep << ',' << r.source << ',' << io::hex64(r.seed) << ',' << io::fmt(r.test_accuracy)
        << ',' << (std::isnan(r.cross_accuracy) ? std::string() : io::fmt(r.cross_accuracy)) << ','
        << io::fmt(r.train_loss) << ',' << r.epochs << '\n';
  }
  return out.str();
}

/// Inverse of universality_csv (curves are not stored there).
inline std::vector<UniversalityRun> read_universality_csv(const std::filesystem::path& path) {
  std::vector<std::string> header;
  auto rows = io::read_csv(path, &header);
  if (header.size() != 8 || header[0] != "split" || header[4] != "test_accuracy") {
    throw Error(ErrorKind::kData, path.string() + ": unexpected universality header");
  }
  std::vector<UniversalityRun> out;
  for (const auto& row : rows) {
    if (row.size() != 8) throw Error(ErrorKind::kData, path.string() + ": row with wrong column count");
    UniversalityRun r;
    try {
      r.split = std::stol(row[0]);
      r.rep = std::stoi(row[1]);
      r.source = row[2];
      r.seed = std::stoull(row[3], nullptr, 16);
      r.test_accuracy = std::stod(row[4]);
      r.cross_accuracy = row[5].empty() ? std::nan("") : std::stod(row[5]);
      r.train_loss = std::stod(row[6]);
      r.epochs = std::stoi(row[7]);
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::kData, path.string() + ": unparsable number");
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline json to_json(const SplitAggregate& a) {
  return {{"split", a.split},
          {"runs", a.runs},
          {"mean_diffusion", a.mean_diffusion},
          {"sd_diffusion", a.sd_diffusion},
          {"mean_gmm", a.mean_gmm},
          {"sd_gmm", a.sd_gmm},
          {"gap", a.gap},
          {"abs_gap", std::abs(a.gap)},
          {"spread", a.spread},
          {"within_2sigma", a.within_2sigma}};
}

inline json universality_aggregates_json(const std::vector<SplitAggregate>& aggs) {
  json splits = json::array();
  double max_gap = 0.0;
  bool all_within = true;
  for (const auto& a : aggs) {
    splits.push_back(to_json(a));
    max_gap = std::max(max_gap, std::abs(a.gap));
    all_within = all_within && a.within_2sigma;
  }
  return {{"splits", splits}, {"max_abs_gap", max_gap}, {"all_within_2sigma", all_within}};
}

// --- campaign results ------------------------------------------------------

struct SpectraCampaignResult {
  std::vector<SpectrumReport> covariance_diffusion;  // per class
  std::vector<SpectrumReport> covariance_gmm;
  SpectrumReport gram_diffusion;
  SpectrumReport gram_gmm;
  std::vector<SpectrumReport> snapshots;  // diffusion Gram spectrum per step
  std::vector<PowerLawFit> fits_diffusion;  // per class
  std::vector<PowerLawFit> fits_gmm;
  SpectrumComparison gram_comparison;
  /// |lambda_1(snapshot) - lambda_1(gmm)| / lambda_1(gmm), per snapshot.
  std::vector<double> top_eigenvalue_distance;
};

struct ClassConcentration {
  int class_id = 0;
  ContractionSummary contraction;
  std::vector<TailReport> tails;
  double paired_median_final_ratio = std::nan("");
  std::vector<std::pair<int, double>> step_lipschitz;  // (step, max estimate)
};

struct ConcentrationCampaignResult {
  std::vector<ClassConcentration> classes;
  std::vector<ClassDiagnostics> diagnostics;
  std::vector<NormSummary> norms;
  std::vector<std::vector<TrajectoryRecord>> records;
};

/// Largest eigenvalue of a mixture's covariance, square-rooted.
inline double operator_root(const GaussianMixture& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m.covariance(), Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, eig.eigenvalues().maxCoeff()));
}

/// The probe battery for one class: `n_directions` random directions for the
/// projection families, one norm probe.
inline std::vector<LipschitzProbe> probe_battery(const std::vector<std::string>& families, Eigen::Index d,
                                                 int n_directions, std::uint64_t seed) {
  std::vector<LipschitzProbe> out;
  for (const auto& f : families) {
    if (f == "norm") {
      out.push_back(LipschitzProbe::norm());
      continue;
    }
    for (int k = 0; k < n_directions; ++k) {
      Rng rng(seeds::derive(seed, f, k));
      Vector v = standard_normal(d, rng);
      auto p = f == "linear_unit" ? LipschitzProbe::linear_unit(v) : LipschitzProbe::soft_relu_projection(v);
      p.name += "_" + std::to_string(k);
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline ConcentrationCampaignResult concentration_campaign(const ClassConditionalModel& model,
                                                          const GeneratedDataset& gen, const ExperimentManifest& m,
                                                          unsigned threads) {
  ConcentrationCampaignResult out;
  const Eigen::Index d = model.dimension();
  out.classes.resize(static_cast<std::size_t>(model.num_classes()));
  parallel_for(out.classes.size(), threads, [&](std::size_t ci) {
    const int c = static_cast<int>(ci);
    const auto& target = model.classes()[ci].mixture;
    ClassConcentration cc;
    cc.class_id = c;
    cc.contraction = contraction_report(gen.records[ci]);
    if (!m.probes.empty()) {
      ConcentrationBound bound;
      bound.C = m.bound_C;
      bound.sigma = std::max(operator_root(target), 1e-300);
      std::vector<double> grid = m.s_grid;
      if (grid.empty())
        for (int i = 1; i <= 40; ++i) grid.push_back(4.0 * bound.sigma * i / 40.0);
      RowMatrix x = gen.data.class_samples(c);
      for (const auto& p : probe_battery(m.probes, d, m.n_directions, seeds::derive(m.seed, "probe", c))) {
        cc.tails.push_back(tail_check(x, p, bound, grid));
      }
    }
    if (m.paired_trajectories > 0) {
      SamplerConfig cfg = m.sampler;
      cfg.seed = seeds::derive(m.seed, "paired", c);
      auto ratios = paired_trajectories(cfg, mixture_denoiser(target), d, m.paired_trajectories);
      std::vector<double> fin;
      for (const auto& r : ratios) fin.push_back(r.back());
      std::sort(fin.begin(), fin.end());
      cc.paired_median_final_ratio = quantile_sorted(fin, 0.5);
    }
    if (m.lipschitz_probes > 0) {
      SamplerConfig cfg = m.sampler;
      cfg.seed = seeds::derive(m.seed, "lipschitz", c);
      for (int step : default_snapshot_steps(cfg.schedule.size() - 1)) {
        auto est = estimate_step_lipschitz(cfg, mixture_denoiser(target), d, step, m.lipschitz_probes);
        cc.step_lipschitz.emplace_back(step, est.max_norm);
      }
    }
    out.classes[ci] = std::move(cc);
  });
  out.diagnostics = assumption_diagnostics(gen.data, m.n_directions, 6, seeds::derive(m.seed, "diagnostics"));
  out.norms = norm_distributions(gen.data, m.norm_p);
  out.records = gen.records;
  return out;
}

inline SpectraCampaignResult spectra_campaign(const GeneratedDataset& gen, const LabeledDataset& gmm_data,
                                              const ExperimentManifest& m) {
  SpectraCampaignResult out;
  for (int c = 0; c < gen.data.num_classes(); ++c) {
    out.covariance_diffusion.push_back(covariance_spectrum(gen.data.class_samples(c), true, c));
    out.covariance_gmm.push_back(covariance_spectrum(gmm_data.class_samples(c), true, c));
    out.fits_diffusion.push_back(fit_power_law(out.covariance_diffusion.back()));
    out.fits_gmm.push_back(fit_power_law(out.covariance_gmm.back()));
  }
  out.gram_diffusion = gram_spectrum(gen.data.x(), m.gram_centered);
  out.gram_gmm = gram_spectrum(gmm_data.x(), m.gram_centered);
  out.gram_comparison = compare_spectra(out.gram_diffusion, out.gram_gmm, m.top_k);
  out.snapshots = spectrum_through_sampling(gen.snapshots, m.gram_centered);
  const double ref = out.gram_gmm.eigenvalues[0];
  for (const auto& s : out.snapshots) out.top_eigenvalue_distance.push_back(std::abs(s.eigenvalues[0] - ref) / ref);
  return out;
}

// --- top-level dispatch ----------------------------------------------------

struct ExperimentOutcome {
  ExperimentKind kind = ExperimentKind::kUniversality;
  std::filesystem::path root;
  UniversalityResult universality;
  SpectraCampaignResult spectra;
  ConcentrationCampaignResult concentration;
};

namespace experiments_detail {

/// Universality default: twice the largest split plus the test reserve, so
/// repetitions at every split see different training rows.
inline Eigen::Index pool_size(const ExperimentManifest& m) {
  if (m.kind == ExperimentKind::kUniversality) {
    const Eigen::Index max_split = *std::max_element(m.splits.begin(), m.splits.end());
    if (m.n_per_class != 0 && m.n_per_class < max_split + m.test_reserve) {
      throw Error(ErrorKind::kInsufficientSamples,
                  "n_per_class " + std::to_string(m.n_per_class) + " < largest split + test_reserve");
    }
    return m.n_per_class != 0 ? m.n_per_class : 2 * max_split + m.test_reserve;
  }
  return m.n_per_class != 0 ? m.n_per_class : 2048;
}

inline void write_spectra(const std::filesystem::path& path, const std::vector<SpectrumReport>& reports) {
  std::string text = io::spectrum_csv_header();
  for (const auto& r : reports) text += io::spectrum_csv_rows(r);
  io::write_text(path, text);
}

}  // namespace experiments_detail

/// Runs one manifest end to end. With an empty output_dir nothing is written.
inline ExperimentOutcome run_experiment(const ExperimentManifest& m) {
  namespace fs = std::filesystem;
  using namespace experiments_detail;
  const bool write = !m.output_dir.empty();
  const unsigned threads = resolve_threads(m.threads);
  ExperimentOutcome out;
  out.kind = m.kind;
  RunLog log;
  if (write) {
    out.root = prepare_output(m);
    log = RunLog(out.root / "logs" / "run.log");
    log.line(std::string("start ") + to_string(m.kind) + " threads=" + std::to_string(threads));
  }
  const std::string hash = manifest_hash(m);
  const std::string kind = to_string(m.kind);
  try {
    const ClassConditionalModel model = resolve_target(m.target);
    const Eigen::Index n = pool_size(m);
    const std::vector<Eigen::Index> per_class(static_cast<std::size_t>(model.num_classes()), n);

    SamplerConfig cfg = m.sampler;
    cfg.seed = seeds::derive(m.seed, kind, "diffusion_data");
    cfg.record_trajectory = m.kind == ExperimentKind::kConcentration;
    std::vector<int> snaps;
    if (m.kind == ExperimentKind::kSpectra) {
      snaps = m.snapshot_steps.empty() ? default_snapshot_steps(cfg.schedule.size()) : m.snapshot_steps;
    }
    GeneratedDataset gen = generate_dataset(model, per_class, cfg, threads, snaps);
    if (write) {
      io::write_json(out.root / "models" / "target.json", to_json(model));
      io::write_dataset(out.root / "datasets" / "diffusion", gen.data, hash);
      log.line("generated diffusion dataset n=" + std::to_string(gen.data.size()));
    }

    if (m.kind == ExperimentKind::kConcentration) {
      out.concentration = concentration_campaign(model, gen, m, threads);
      if (write) {
        json classes = json::array();
        for (std::size_t c = 0; c < out.concentration.classes.size(); ++c) {
          const auto& cc = out.concentration.classes[c];
          io::write_text(out.root / "results" / ("trajectories_class" + std::to_string(c) + ".csv"),
                         io::trajectory_csv(gen.records[c], m.sampler.schedule));
          json tails = json::array();
          for (const auto& t : cc.tails) tails.push_back(to_json(t));
          json lip = json::array();
          for (const auto& [step, v] : cc.step_lipschitz) lip.push_back({{"step", step}, {"max_norm", v}});
          classes.push_back({{"class_id", cc.class_id},
                             {"contraction", to_json(cc.contraction)},
                             {"tails", tails},
                             {"paired_median_final_ratio",
                              std::isnan(cc.paired_median_final_ratio) ? json(nullptr)
                                                                        : json(cc.paired_median_final_ratio)},
                             {"step_lipschitz", lip}});
        }
        json diags = json::array();
        for (const auto& dg : out.concentration.diagnostics) diags.push_back(to_json(dg));
        json norms = json::array();
        for (const auto& ns : out.concentration.norms) norms.push_back(to_json(ns));
        io::write_text(out.root / "results" / "norm_histograms.csv", io::histogram_csv(out.concentration.norms));
        io::write_json(out.root / "aggregates" / "concentration.json",
                       {{"classes", classes}, {"diagnostics", diags}, {"norms", norms}});
      }
    } else {
      const ClassConditionalModel gmm_model = match_moments(gen.data);
      LabeledDataset gmm = sample_classes(gmm_model, per_class, seeds::derive(m.seed, kind, "gmm_data"));
      if (write) {
        io::write_json(out.root / "models" / "gmm.json", to_json(gmm_model));
        io::write_dataset(out.root / "datasets" / "gmm", gmm, hash);
        log.line("sampled matched GMM dataset");
      }
      if (m.kind == ExperimentKind::kUniversality) {
        UniversalitySettings s;
        s.splits = m.splits;
        s.n_test = m.n_test;
        s.test_reserve = m.test_reserve;
        s.repetitions = m.repetitions;
        s.train = m.train;
        s.objective = m.objective;
        s.cross_evaluate = m.cross_evaluate;
        s.paired_runs = m.paired_runs;
        s.seed = m.seed;
        s.threads = threads;
        s.keep_partial = write;
        out.universality = run_universality(gen.data, gmm, s);
        if (write) {
          io::write_text(out.root / "results" / "universality.csv", universality_csv(out.universality.runs));
          std::string curves = io::training_csv_header();
          for (const auto& r : out.universality.runs) {
            curves += io::training_csv_rows(r.source + "_n" + std::to_string(r.split) + "_r" + std::to_string(r.rep),
                                            r.curve);
          }
          io::write_text(out.root / "results" / "training.csv", curves);
          io::write_json(out.root / "aggregates" / "universality.json",
                         universality_aggregates_json(out.universality.aggregates));
          if (out.universality.failure) {
            log.line("partial results written for " + std::to_string(out.universality.runs.size()) + " runs");
            std::rethrow_exception(out.universality.failure);
          }
        }
      } else {
        out.spectra = spectra_campaign(gen, gmm, m);
        if (write) {
          const auto& sp = out.spectra;
          write_spectra(out.root / "results" / "covariance_spectra_diffusion.csv", sp.covariance_diffusion);
          write_spectra(out.root / "results" / "covariance_spectra_gmm.csv", sp.covariance_gmm);
          write_spectra(out.root / "results" / "gram_spectra_diffusion.csv", {sp.gram_diffusion});
          write_spectra(out.root / "results" / "gram_spectra_gmm.csv", {sp.gram_gmm});
          write_spectra(out.root / "results" / "gram_snapshots.csv", sp.snapshots);
          json fits = json::array();
          for (std::size_t c = 0; c < sp.fits_diffusion.size(); ++c) {
            fits.push_back({{"class_id", c},
                            {"diffusion", io::to_json(sp.fits_diffusion[c])},
                            {"gmm", io::to_json(sp.fits_gmm[c])},
                            {"reference_band", {-1.4, -1.0}},
                            {"informational", true}});
          }
          io::write_json(out.root / "aggregates" / "power_law_fits.json", {{"classes", fits}});
          json steps = json::array();
          for (std::size_t k = 0; k < sp.snapshots.size(); ++k) {
            steps.push_back({{"step", sp.snapshots[k].step}, {"top_eigenvalue_distance", sp.top_eigenvalue_distance[k]}});
          }
          io::write_json(out.root / "aggregates" / "gram_comparison.json",
                         {{"top_k", sp.gram_comparison.top_k},
                          {"max_relative_gap", sp.gram_comparison.max_relative_gap},
                          {"ks_distance", sp.gram_comparison.ks_distance},
                          {"truncated", sp.gram_comparison.truncated},
                          {"snapshots", steps}});
        }
      }
    }
  } catch (const Error& e) {
    log.line(std::string("failed: ") + to_string(e.kind()) + ": " + e.what());
    throw;
  }
  log.line("done");
  return out;
}

}  // namespace dul
