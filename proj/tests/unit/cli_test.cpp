#include "dul/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "dul/io.hpp"
#include "dul/mixtures.hpp"

namespace dul {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / "dul_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

Run dul(const std::string& args) {
  const fs::path out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
  const std::string cmd = std::string(DUL_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = io::read_text(out);
  r.err = io::read_text(err);
  return r;
}

std::string write_file(const std::string& name, const std::string& text) {
  const fs::path p = work_dir() / name;
  io::write_text(p, text);
  return p.string();
}

/// Two Gaussian classes at d=2.
std::string two_class_model() {
  Matrix cov(2, 2);
  cov << 0.2, 0.05, 0.05, 0.1;
  Vector a(2), b(2);
  a << 1.0, 0.0;
  b << -1.0, 0.5;
  ClassConditionalModel m({{0, GaussianMixture({GaussianComponent::from_covariance(a, cov)})},
                           {1, GaussianMixture({GaussianComponent::from_covariance(b, cov)})}},
                          Vector::Constant(2, 0.5));
  return write_file("model.json", to_json(m).dump());
}

TEST(CliGenerate, SmallDatasetHasValidHeader) {
  const auto model = two_class_model();
  const auto stem = (work_dir() / "small").string();
  auto r = dul("generate --model " + model + " --n-per-class 4 --seed 3 --out " + stem);
  ASSERT_EQ(r.code, 0) << r.err;
  auto header = io::read_json(stem + ".json");
  EXPECT_EQ(header.at("n"), 8);
  EXPECT_EQ(header.at("d"), 2);
  EXPECT_EQ(header.at("dtype"), "f64");
  EXPECT_EQ(header.at("class_labels"), (std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}));
  EXPECT_EQ(fs::file_size(stem + ".bin"), 8u * 2u * 8u);
  auto data = io::read_dataset(stem);
  EXPECT_EQ(data.size(), 8);
  EXPECT_TRUE(data.x().allFinite());
}

TEST(CliGenerate, SameSeedSameBytes) {
  const auto model = two_class_model();
  const auto a = (work_dir() / "a").string(), b = (work_dir() / "b").string(), c = (work_dir() / "c").string();
  ASSERT_EQ(dul("generate --model " + model + " --n-per-class 16 --seed 9 --threads 1 --out " + a).code, 0);
  ASSERT_EQ(dul("generate --model " + model + " --n-per-class 16 --seed 9 --threads 2 --out " + b).code, 0);
  ASSERT_EQ(dul("generate --model " + model + " --n-per-class 16 --seed 10 --out " + c).code, 0);
  EXPECT_EQ(io::read_text(a + ".bin"), io::read_text(b + ".bin"));
  EXPECT_EQ(io::read_text(a + ".json"), io::read_text(b + ".json"));
  EXPECT_NE(io::read_text(a + ".bin"), io::read_text(c + ".bin"));
}

TEST(CliGenerate, SingleGaussianFitRoundTrip) {
  const auto model_path = two_class_model();
  const auto model = model_from_json(io::read_json(model_path));
  const auto stem = (work_dir() / "fit").string();
  auto r = dul("generate --model " + model_path + " --n-per-class 4000 --steps 64 --seed 4 --out " + stem);
  ASSERT_EQ(r.code, 0) << r.err;
  auto data = io::read_dataset(stem);
  for (int c = 0; c < 2; ++c) {
    const auto& truth = model.classes()[c].mixture.components()[0];
    auto fit = fit_gaussian(data.class_samples(c));
    for (int i = 0; i < 2; ++i) {
      const double se = std::sqrt(truth.covariance()(i, i) / 4000.0);
      EXPECT_NEAR(fit.mean()[i], truth.mean()[i], 4.0 * se);
    }
    EXPECT_LE((fit.covariance() - truth.covariance()).norm() / truth.covariance().norm(), 0.1);
  }
}

TEST(CliGenerate, TrajectoriesAndConfigFile) {
  const auto model = two_class_model();
  const auto stem = (work_dir() / "traj").string();
  const auto cfg = write_file("gen.json", "{\"model\": \"" + model + "\", \"n_per_class\": 3, \"steps\": 8, \"seed\": 2, "
                                          "\"record_trajectories\": true, \"out\": \"" + stem + "\"}");
  auto r = dul("generate --config " + cfg + " --n-per-class 2");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(io::read_json(stem + ".json").at("n"), 4);
  std::vector<std::string> header;
  auto rows = io::read_csv(stem + "_trajectories.csv", &header);
  EXPECT_EQ(header.front(), "trajectory_id");
  EXPECT_EQ(rows.size(), 4u * 9u);
  EXPECT_EQ(rows.back().front(), "3");
}

TEST(CliGenerate, BadInputsMapToExitCodes) {
  const auto model = two_class_model();
  EXPECT_EQ(dul("generate --n-per-class 4 --out " + (work_dir() / "x").string()).code, 2);
  EXPECT_EQ(dul("generate --model " + model + " --n-per-class 4 --bogus 1").code, 2);
  EXPECT_EQ(dul("generate --model /nonexistent.json --n-per-class 4 --out x").code, 3);
  EXPECT_EQ(dul("generate --model " + model + " --n-per-class 4 --steps 1 --out x").code, 3);
  EXPECT_EQ(dul("").code, 2);
  EXPECT_EQ(dul("--help").code, 0);
}

TEST(CliExperiment, MalformedManifestNamesTheLine) {
  const auto path = write_file("bad.json", "{\n  \"kind\": \"universality\",\n  \"seed\": 1,,\n}\n");
  auto r = dul("experiment " + path + " --out " + (work_dir() / "bad_out").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("bad.json:3:"), std::string::npos) << r.err;
}

TEST(CliExperiment, UnknownKindIsUsageError) {
  const auto path = write_file("kind.json", R"({"kind": "ablation"})");
  auto r = dul("experiment " + path + " --out " + (work_dir() / "kind_out").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ablation"), std::string::npos);
  EXPECT_EQ(dul("experiment " + write_file("noout.json", R"({"kind": "spectra"})")).code, 2);
}

TEST(CliExperiment, ToyUniversalityWritesAggregatesAndReport) {
  const auto model = two_class_model();
  const auto out = work_dir() / "toy";
  const auto manifest = write_file(
      "toy.json", R"({"kind": "universality", "seed": 7,
        "target": {"model_path": ")" + model + R"("},
        "sampler": {"steps": 16},
        "splits": [8, 16], "n_test": 16, "test_reserve": 32, "repetitions": 3,
        "train": {"epochs": 10, "learning_rate": 0.5}})");
  auto r = dul("experiment " + manifest + " --out " + out.string() + " --threads 2");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"manifest.json", "datasets/diffusion.json", "datasets/gmm.bin", "results/universality.csv",
                        "results/training.csv", "aggregates/universality.json", "logs/run.log"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto stored = io::read_json(out / "aggregates" / "universality.json");
  EXPECT_EQ(stored.at("splits").size(), 2u);

  auto rep = dul("report " + out.string());
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_NE(rep.out.find("universality (12 runs)"), std::string::npos) << rep.out;
  const auto summary = io::read_json(out / "summary.json");
  const auto& u = summary.at("universality");
  EXPECT_TRUE(u.at("matches_stored_aggregates").get<bool>());
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(u.at("splits")[i].at("gap").get<double>(), stored.at("splits")[i].at("gap").get<double>());
    EXPECT_DOUBLE_EQ(u.at("splits")[i].at("sd_diffusion").get<double>(),
                     stored.at("splits")[i].at("sd_diffusion").get<double>());
  }
}

TEST(CliReport, EmptyDirectoryHasItsOwnExitCode) {
  const auto empty = work_dir() / "empty";
  fs::create_directories(empty / "results");
  auto r = dul("report " + empty.string());
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.out.find("no results"), std::string::npos);
  EXPECT_FALSE(fs::exists(empty / "summary.json"));
  EXPECT_EQ(dul("report " + (work_dir() / "missing").string()).code, 3);
}

TEST(CliReport, GapTableReproducesInProcessAggregates) {
  ExperimentManifest m;
  m.target = {{"model_path", two_class_model()}};
  m.sampler.schedule = build_schedule(16, 80.0, 0.002, 7.0);
  m.splits = {4, 8, 12};
  m.n_test = 8;
  m.test_reserve = 16;
  m.repetitions = 4;
  m.train.epochs = 5;
  m.seed = 8;
  m.output_dir = (work_dir() / "inproc").string();
  auto outcome = run_experiment(m);
  auto summary = cli::build_report(m.output_dir);
  ASSERT_TRUE(summary.has_value());
  const auto& splits = summary->json.at("universality").at("splits");
  ASSERT_EQ(splits.size(), outcome.universality.aggregates.size());
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const auto& a = outcome.universality.aggregates[i];
    EXPECT_EQ(splits[i].at("split").get<Eigen::Index>(), a.split);
    EXPECT_EQ(splits[i].at("gap").get<double>(), a.gap);
    EXPECT_EQ(splits[i].at("spread").get<double>(), a.spread);
    EXPECT_EQ(splits[i].at("within_2sigma").get<bool>(), a.within_2sigma);
  }
  EXPECT_NE(summary->table.find("acc_diffusion"), std::string::npos);
}

TEST(CliReport, SpectraAndConcentrationSections) {
  ExperimentManifest m;
  m.kind = ExperimentKind::kSpectra;
  m.target = {{"model_path", two_class_model()}};
  m.sampler.schedule = build_schedule(8, 80.0, 0.002, 7.0);
  m.n_per_class = 32;
  m.output_dir = (work_dir() / "spectra").string();
  run_experiment(m);
  std::ostringstream text;
  EXPECT_EQ(cli::cmd_report(m.output_dir, text), 0);
  EXPECT_NE(text.str().find("gram spectra"), std::string::npos);

  m.kind = ExperimentKind::kConcentration;
  m.n_per_class = 1000;
  m.output_dir = (work_dir() / "conc").string();
  run_experiment(m);
  auto s = cli::build_report(m.output_dir);
  ASSERT_TRUE(s.has_value());
  EXPECT_EQ(s->json.at("concentration").at("classes").size(), 2u);
}

TEST(CliExitCodes, ErrorKinds) {
  EXPECT_EQ(cli::exit_code_for(ErrorKind::kUsage), 2);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::kData), 3);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::kDimensionMismatch), 3);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::kTrainingDiverged), 4);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::kNumericalFailure), 4);
}

}  // namespace
}  // namespace dul
