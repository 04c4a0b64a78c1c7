#pragma once

// Subcommand bodies behind the `dul` binary. Argument parsing lives in
// tools/dul.cpp; everything here takes plain structs so tests can call it.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dul/core.hpp"
#include "dul/experiments.hpp"
#include "dul/io.hpp"
#include "dul/mixtures.hpp"
#include "dul/parallel.hpp"
#include "dul/sampler.hpp"

namespace dul::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kUsageError = 2,
  kDataError = 3,
  kNumericalError = 4,
  kNoResults = 5,
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage:
      return kUsageError;
    case ErrorKind::kNumericalFailure:
    case ErrorKind::kSingularSystem:
    case ErrorKind::kTrainingDiverged:
    case ErrorKind::kDegenerateClassifier:
    case ErrorKind::kProbeFailure:
      return kNumericalError;
    default:
      return kDataError;
  }
}

struct GenerateOptions {
  std::string model;
  Eigen::Index n_per_class = 0;
  int steps = 64;
  double t_max = 80.0;
  double t_min = 0.002;
  double rho = 7.0;
  double gamma = 0.0;
  double s_noise = 1.0;
  std::uint64_t seed = 0;
  bool record_trajectories = false;
  std::string out;
  int threads = 0;
};

/// Fills fields present in a JSON config; keys use underscores.
inline void apply_json(GenerateOptions& o, const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kData, "generate config must be a JSON object");
  experiments_detail::reject_unknown(j,
                                     {"model", "n_per_class", "steps", "t_max", "t_min", "rho", "gamma", "s_noise",
                                      "seed", "record_trajectories", "out", "threads"},
                                     "generate config");
  using experiments_detail::read_opt;
  try {
    read_opt(j, "model", o.model);
    read_opt(j, "n_per_class", o.n_per_class);
    read_opt(j, "steps", o.steps);
    read_opt(j, "t_max", o.t_max);
    read_opt(j, "t_min", o.t_min);
    read_opt(j, "rho", o.rho);
    read_opt(j, "gamma", o.gamma);
    read_opt(j, "s_noise", o.s_noise);
    read_opt(j, "seed", o.seed);
    read_opt(j, "record_trajectories", o.record_trajectories);
    read_opt(j, "out", o.out);
    read_opt(j, "threads", o.threads);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, std::string("generate config: ") + e.what());
  }
}

/// Writes <out>.json + <out>.bin, and <out>_trajectories.csv when recording.
inline void cmd_generate(const GenerateOptions& o, std::ostream& log) {
  if (o.model.empty()) throw Error(ErrorKind::kUsage, "--model is required");
  if (o.out.empty()) throw Error(ErrorKind::kUsage, "--out is required");
  if (o.n_per_class < 1) throw Error(ErrorKind::kUsage, "--n-per-class must be >= 1");
  const ClassConditionalModel model = model_from_json(io::read_json(o.model));
  SamplerConfig cfg;
  cfg.schedule = build_schedule(o.steps, o.t_max, o.t_min, o.rho);
  cfg.gamma = o.gamma;
  cfg.s_noise = o.s_noise;
  cfg.seed = o.seed;
  cfg.record_trajectory = o.record_trajectories;
  cfg.validate();
  const std::vector<Eigen::Index> per_class(static_cast<std::size_t>(model.num_classes()), o.n_per_class);
  auto gen = generate_dataset(model, per_class, cfg, resolve_threads(o.threads));
  const nlohmann::json config = {{"model", to_json(model)}, {"n_per_class", o.n_per_class},
                                 {"sampler", to_json(cfg)}};
  fs::path stem(o.out);
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  io::write_dataset(stem, gen.data, io::config_hash(config));
  log << "wrote " << stem.string() << ".{json,bin} n=" << gen.data.size() << " d=" << gen.data.dimension() << '\n';
  if (o.record_trajectories) {
    std::string text;
    long offset = 0;
    for (const auto& recs : gen.records) {
      std::string block = io::trajectory_csv(recs, cfg.schedule, offset);
      text += offset == 0 ? block : block.substr(block.find('\n') + 1);
      offset += static_cast<long>(recs.size());
    }
    io::write_text(fs::path(stem.string() + "_trajectories.csv"), text);
  }
}

struct ExperimentOptions {
  std::string manifest;
  std::string out;  // overrides the manifest's output_dir
  std::optional<int> threads;
};

inline ExperimentOutcome cmd_experiment(const ExperimentOptions& o, std::ostream& log) {
  ExperimentManifest m = manifest_from_json(io::read_json(o.manifest));
  if (!o.out.empty()) m.output_dir = o.out;
  if (o.threads) m.threads = static_cast<unsigned>(std::max(0, *o.threads));
  if (m.output_dir.empty()) throw Error(ErrorKind::kUsage, "no output directory: set output_dir or pass --out");
  auto out = run_experiment(m);
  log << to_string(m.kind) << " results in " << out.root.string() << '\n';
  return out;
}

struct ReportSummary {
  nlohmann::json json;
  std::string table;
};

namespace report_detail {

inline std::string row(const char* fmt, double a, double b, double c, double d, double e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, fmt, a, b, c, d, e);
  return buf;
}

}  // namespace report_detail

/// Consolidates a results tree. Universality aggregates are recomputed from
/// the per-run CSV and checked against the stored JSON. Returns nullopt when
/// the directory holds no results.
inline std::optional<ReportSummary> build_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::kData, dir.string() + " is not a directory");
  ReportSummary s;
  s.json = nlohmann::json::object();
  std::ostringstream table;
  const fs::path csv = dir / "results" / "universality.csv";
  if (fs::exists(csv)) {
    auto runs = read_universality_csv(csv);
    auto aggs = aggregate_universality(runs);
    nlohmann::json u = universality_aggregates_json(aggs);
    u["runs"] = runs.size();
    const fs::path stored = dir / "aggregates" / "universality.json";
    if (fs::exists(stored)) {
      const auto j = io::read_json(stored);
      bool match = j.at("splits").size() == aggs.size();
      for (std::size_t i = 0; match && i < aggs.size(); ++i) {
        const auto& sj = j.at("splits")[i];
        match = sj.at("split").get<Eigen::Index>() == aggs[i].split &&
                std::abs(sj.at("gap").get<double>() - aggs[i].gap) <= 1e-12 &&
                std::abs(sj.at("mean_gmm").get<double>() - aggs[i].mean_gmm) <= 1e-12;
      }
      u["matches_stored_aggregates"] = match;
    }
    s.json["universality"] = u;
    table << "universality (" << runs.size() << " runs)\n";
    table << "   split   acc_diffusion         acc_gmm               gap      2sd\n";
    for (const auto& a : aggs) {
      char head[32];
      std::snprintf(head, sizeof head, "%8ld", static_cast<long>(a.split));
      table << head
            << report_detail::row("   %.4f +- %.4f   %.4f +- %.4f   %+.4f", a.mean_diffusion, a.sd_diffusion,
                                  a.mean_gmm, a.sd_gmm, a.gap)
            << (a.within_2sigma ? "   yes" : "   no") << '\n';
    }
  }
  const fs::path gram = dir / "aggregates" / "gram_comparison.json";
  if (fs::exists(gram)) {
    auto g = io::read_json(gram);
    s.json["gram_comparison"] = g;
    char buf[160];
    std::snprintf(buf, sizeof buf, "gram spectra: top-%d max relative gap %.4f, KS %.4f\n", g.at("top_k").get<int>(),
                  g.at("max_relative_gap").get<double>(), g.at("ks_distance").get<double>());
    table << buf;
  }
  const fs::path fits = dir / "aggregates" / "power_law_fits.json";
  if (fs::exists(fits)) {
    auto f = io::read_json(fits);
    s.json["power_law_fits"] = f;
    for (const auto& c : f.at("classes")) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "class %d power-law exponent: diffusion %.3f, gmm %.3f\n",
                    c.at("class_id").get<int>(), c.at("diffusion").at("exponent").get<double>(),
                    c.at("gmm").at("exponent").get<double>());
      table << buf;
    }
  }
  const fs::path conc = dir / "aggregates" / "concentration.json";
  if (fs::exists(conc)) {
    auto cj = io::read_json(conc);
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : cj.at("classes")) {
      int violations = 0;
      for (const auto& t : c.at("tails")) violations += t.at("violations").get<int>();
      const double frac = c.at("contraction").at("decreasing_fraction").get<double>();
      classes.push_back({{"class_id", c.at("class_id")},
                         {"decreasing_fraction", frac},
                         {"tail_probes", c.at("tails").size()},
                         {"tail_violations", violations},
                         {"paired_median_final_ratio", c.at("paired_median_final_ratio")}});
      char buf[160];
      std::snprintf(buf, sizeof buf, "class %d: decreasing steps %.4f, tail violations %d over %zu probes\n",
                    c.at("class_id").get<int>(), frac, violations, c.at("tails").size());
      table << buf;
    }
    s.json["concentration"] = {{"classes", classes}};
  }
  if (s.json.empty()) return std::nullopt;
  s.table = table.str();
  return s;
}

/// Writes <dir>/summary.json and prints the table; kNoResults on an empty tree.
inline int cmd_report(const fs::path& dir, std::ostream& out) {
  auto s = build_report(dir);
  if (!s) {
    out << "no results in " << dir.string() << '\n';
    return kNoResults;
  }
  io::write_json(dir / "summary.json", s->json);
  out << s->table;
  return kOk;
}

/// Runs `body`, mapping errors to exit codes and messages on `err`.
template <typename Fn>
int guarded(Fn&& body, std::ostream& err) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    err << "error: data: " << e.what() << '\n';
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    err << "error: data: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kNumericalError;
  }
}

}  // namespace dul::cli
