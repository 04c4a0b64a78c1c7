// dul: generate datasets, run experiment manifests, summarize results.

#include <iostream>

#include <CLI11.hpp>

#include "dul/cli.hpp"

int main(int argc, char** argv) {
  using namespace dul;
  CLI::App app{"Diffusion-vs-GMM universality experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Print what was written");

  cli::GenerateOptions gen;
  std::string gen_config;
  auto* g = app.add_subcommand("generate", "Sample a dataset from a class-conditional model file");
  g->add_option("--config", gen_config, "JSON file with any of the flags below (underscored keys)");
  g->add_option("--model", gen.model, "Model JSON");
  g->add_option("--n-per-class", gen.n_per_class, "Samples per class");
  g->add_option("--steps", gen.steps, "Sampler steps N");
  g->add_option("--t-max", gen.t_max);
  g->add_option("--t-min", gen.t_min);
  g->add_option("--rho", gen.rho);
  g->add_option("--gamma", gen.gamma, "Churn");
  g->add_option("--s-noise", gen.s_noise, "Noise inflation");
  g->add_option("--seed", gen.seed);
  g->add_flag("--record-trajectories", gen.record_trajectories, "Also write per-step norms as CSV");
  g->add_option("--out", gen.out, "Output stem: <out>.json and <out>.bin");
  g->add_option("--threads", gen.threads, "Worker count (DUL_THREADS overrides)");

  cli::ExperimentOptions exp;
  int exp_threads = 0;
  auto* e = app.add_subcommand("experiment", "Run a manifest");
  e->add_option("manifest", exp.manifest, "Manifest JSON")->required();
  e->add_option("--out", exp.out, "Results directory (overrides output_dir)");
  auto* exp_threads_opt = e->add_option("--threads", exp_threads, "Worker count (DUL_THREADS overrides)");

  std::string report_dir;
  auto* r = app.add_subcommand("report", "Summarize a results directory");
  r->add_option("dir", report_dir, "Results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? cli::kOk : cli::kUsageError;
  }

  std::ostringstream sink;
  std::ostream& log = verbose ? std::cerr : sink;
  return cli::guarded(
      [&]() -> int {
        if (*g) {
          if (!gen_config.empty()) {
            // Flags given on the command line win over the config file.
            cli::GenerateOptions from_file;
            cli::apply_json(from_file, io::read_json(gen_config));
            for (const auto* opt : g->get_options()) {
              if (opt->count() > 0) continue;
              const auto name = opt->get_name();
              if (name == "--model") gen.model = from_file.model;
              if (name == "--n-per-class") gen.n_per_class = from_file.n_per_class;
              if (name == "--steps") gen.steps = from_file.steps;
              if (name == "--t-max") gen.t_max = from_file.t_max;
              if (name == "--t-min") gen.t_min = from_file.t_min;
              if (name == "--rho") gen.rho = from_file.rho;
              if (name == "--gamma") gen.gamma = from_file.gamma;
              if (name == "--s-noise") gen.s_noise = from_file.s_noise;
              if (name == "--seed") gen.seed = from_file.seed;
              if (name == "--record-trajectories") gen.record_trajectories = from_file.record_trajectories;
              if (name == "--out") gen.out = from_file.out;
              if (name == "--threads") gen.threads = from_file.threads;
            }
          }
          cli::cmd_generate(gen, log);
          return cli::kOk;
        }
        if (*e) {
          if (exp_threads_opt->count() > 0) exp.threads = exp_threads;
          cli::cmd_experiment(exp, log);
          return cli::kOk;
        }
        return cli::cmd_report(report_dir, std::cout);
      },
      std::cerr);
}
