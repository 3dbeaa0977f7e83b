#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>

#include "test_support.hpp"
#include "vqkit/errors.hpp"
#include "vqkit_tools/experiments.hpp"

using namespace vqkit;
using namespace vqkit::tools;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VQKIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

json small_train_config() {
  json j = collapse_scenario_json(3);
  j["train"]["steps"] = 40;
  return j;
}

}  // namespace

TEST(Config, SeedIsMandatory) {
  json j = small_train_config();
  j.erase("seed");
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  for (const char* where : {"", "data", "vq", "train"}) {
    json j = small_train_config();
    if (*where)
      j[where]["colour"] = 1;
    else
      j["colour"] = 1;
    EXPECT_THROW(parse_config(j), ConfigError) << where;
  }
  json j = small_train_config();
  j["vq"]["init"]["spread"] = 1;
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, WrongTypesAndValuesRejected) {
  json j = small_train_config();
  j["vq"]["num_codes"] = "many";
  EXPECT_THROW(parse_config(j), ConfigError);
  j = small_train_config();
  j["vq"]["beta"] = 1.5;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = small_train_config();
  j["vq"]["distance"] = "manhattan";
  EXPECT_THROW(parse_config(j), ConfigError);
  j = small_train_config();
  j["vq"]["n_group"] = 3;  // does not divide code_dim 8
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, EffectiveConfigRoundTrips) {
  for (const char* name : {"toy_trajectory.json", "affine_toy.json", "collapse.json", "train.json", "ablation.json",
                           "init_study.json", "metrics_replay.json"}) {
    const ExperimentConfig c = load_config(fs::path(VQKIT_CONFIG_DIR) / name);
    const json once = to_json(c);
    EXPECT_EQ(to_json(parse_config(once)), once) << name;
  }
}

TEST(Mixture, ZeroCovarianceGivesTheMean) {
  const MixtureSpec spec{3, 50, {{{1.0, -2.0, 0.5}, 0.0, 1.0}}};
  const Tensor x = gen_mixture(spec, 1);
  for (std::size_t i = 0; i < x.rows(); ++i)
    EXPECT_EQ(std::vector<double>(x.row(i).begin(), x.row(i).end()), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Mixture, StandardNormalSampleMean) {
  const MixtureSpec spec{2, 100000, {{{0.0, 0.0}, 1.0, 1.0}}};
  const Tensor mean = column_mean(gen_mixture(spec, 2));
  EXPECT_LT(std::sqrt(squared_norm(mean.values())), 0.02);
}

TEST(Mixture, TwoComponentCountsAreBinomial) {
  const std::size_t n = 20000;
  const MixtureSpec spec{1, n, {{{-100.0}, 1.0, 0.5}, {{100.0}, 1.0, 0.5}}};
  const Tensor x = gen_mixture(spec, 3);
  std::size_t left = 0;
  for (double v : x.values()) left += v < 0.0;
  EXPECT_LE(std::abs(double(left) - n / 2.0), 3.0 * std::sqrt(double(n)));
}

TEST(Mixture, InvalidSpecsRejected) {
  EXPECT_THROW(gen_mixture(MixtureSpec{1, 10, {{{0.0}, 1.0, 0.4}}}, 1), ContractViolation);
  EXPECT_THROW(gen_mixture(MixtureSpec{2, 10, {{{0.0}, 1.0, 1.0}}}, 1), ContractViolation);
  EXPECT_THROW(gen_mixture(MixtureSpec{1, 10, {{{0.0}, -1.0, 1.0}}}, 1), ContractViolation);
  EXPECT_EQ(gen_mixture(MixtureSpec{2, 10, {{{0.0, 1.0}, 1.0, 1.0}}}, 9),
            gen_mixture(MixtureSpec{2, 10, {{{0.0, 1.0}, 1.0, 1.0}}}, 9));
}

TEST(Toy, NoVqConvergesToTarget) {
  const ToySpec spec;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ToyResult r = run_toy_trajectory(ToyMode::no_vq, spec, seed);
    EXPECT_LT(r.final_distance, 1e-6) << seed;
    EXPECT_EQ(r.rows.size(), std::size_t(spec.steps + 1));
  }
}

TEST(Toy, PathAndSettlingOrdering) {
  const ToySpec spec;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ToyResult joint = run_toy_trajectory(ToyMode::joint, spec, seed);
    const ToyResult alt = run_toy_trajectory(ToyMode::alternated, spec, seed);
    const ToyResult look = run_toy_trajectory(ToyMode::lookahead, spec, seed);
    EXPECT_LT(alt.path_length, joint.path_length) << seed;
    EXPECT_LE(look.steps_to_tolerance, alt.steps_to_tolerance) << seed;
    EXPECT_LE(alt.steps_to_tolerance, joint.steps_to_tolerance) << seed;
  }
  EXPECT_THROW(parse_toy_mode("spiral"), ConfigError);
}

TEST(AffineToy, StandardVariantLeavesMostCodesUnmoved) {
  const AffineToyResult r = run_affine_toy(AffineToySpec{}, 1);
  EXPECT_NEAR(r.analytic_initial_gap, std::sqrt(2.0), 1e-15);
  EXPECT_GT(r.variants[0].fraction_unmoved, 0.90);
}

TEST(AffineToy, AffineVariantsMoveEveryCode) {
  const AffineToyResult r = run_affine_toy(AffineToySpec{}, 1);
  ASSERT_EQ(r.variants.size(), 3u);
  for (std::size_t v = 1; v < r.variants.size(); ++v) EXPECT_EQ(r.variants[v].fraction_moved, 1.0) << r.variants[v].variant;
}

// The learnable variant is the one the toy is set up for; the EMA variant's gap is only reported.
TEST(AffineToy, LearnableVariantHalvesTheMeanGap) {
  const AffineToyResult r = run_affine_toy(AffineToySpec{}, 1);
  EXPECT_EQ(r.variants[1].variant, "affine_learnable");
  EXPECT_LT(r.variants[1].final_gap, 0.5 * r.analytic_initial_gap);
  EXPECT_LT(r.variants[2].final_gap, r.variants[2].initial_gap);
}

TEST(Training, CollapseScenarioLosesHalfTheCodesWithinFiftySteps) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const RunOutput run = run_training(parse_config(collapse_scenario_json(seed)));
    double lowest = 1.0;
    for (const auto& rec : run.train.metrics)
      if (rec.step >= 16 && rec.step <= 50) lowest = std::min(lowest, rec.active_ratio);
    EXPECT_LT(lowest, 0.5) << seed;
  }
}

TEST(Ablation, SingleGroupEqualsPlainAndReplacementKeepsCodesActive) {
  json base = small_train_config();
  base["ablation"] = {{"replicates", 3},
                      {"cells",
                       {{{"name", "plain"}},
                        {{"name", "n_group_1"}, {"overrides", {{"vq", {{"n_group", 1}}}}}},
                        {{"name", "replace_lru"}, {"overrides", {{"vq", {{"replacement", "lru"}}}}}}}}};
  const AblationResult r = run_ablation(base, parse_config(base));
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].task_loss_mean, r.rows[1].task_loss_mean);
  EXPECT_EQ(r.rows[0].perplexity_mean, r.rows[1].perplexity_mean);
  EXPECT_EQ(r.rows[0].active_ratio_mean, r.rows[1].active_ratio_mean);
  EXPECT_GE(r.rows[2].active_ratio_mean, r.rows[0].active_ratio_mean);
  for (const auto& rep : r.replicates) EXPECT_EQ(rep.seed, derive_seed(3, rep.replicate));
}

// The full default grid on the collapse scenario, as shipped in tools/configs/ablation.json.
TEST(Ablation, AllMitigationsOffHasTheLowestPerplexity) {
  const fs::path path = fs::path(VQKIT_CONFIG_DIR) / "ablation.json";
  std::ifstream in(path);
  const json raw = json::parse(in);
  const AblationResult r = run_ablation(raw, parse_config(raw));
  double plain = 0;
  for (const auto& row : r.rows)
    if (row.cell == "plain") plain = row.perplexity_mean;
  for (const auto& row : r.rows) {
    if (row.cell == "plain" || row.cell == "n_group_1") continue;
    EXPECT_GT(row.perplexity_mean, plain) << row.cell;
  }
}

TEST(InitStudy, KMeansBeatsSubsetBeatsKaiming) {
  const auto rows = run_init_study(load_config(fs::path(VQKIT_CONFIG_DIR) / "init_study.json"));
  std::map<std::size_t, std::map<std::string, double>> by_rep;
  for (const auto& r : rows) by_rep[r.replicate][r.method] = r.divergence;
  ASSERT_EQ(by_rep.size(), 5u);
  for (auto& [rep, m] : by_rep) {
    EXPECT_LE(m["kmeans"], m["data_subset"]) << rep;
    EXPECT_LT(m["data_subset"], m["normal_kaiming"]) << rep;
  }
}

TEST(Cli, SuccessWritesArtifacts) {
  const fs::path dir = vqkit::testing::scratch_dir("cli_ok");
  const fs::path cfg = write_config(dir, "train.json", small_train_config());
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --out " + (dir / "out").string()), 0);
  for (const char* f : {"metrics.csv", "codebook.bin", "codebook.json", "summary.json", "effective_config.json"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  const auto metrics = read_metrics_csv(dir / "out" / "metrics.csv");
  EXPECT_EQ(metrics.size(), 40u);
  // Re-running from the effective config reproduces the metrics byte for byte.
  ASSERT_EQ(run_cli("train --config " + (dir / "out" / "effective_config.json").string() + " --out " +
                    (dir / "again").string()),
            0);
  EXPECT_EQ(vqkit::testing::read_file(dir / "out" / "metrics.csv"),
            vqkit::testing::read_file(dir / "again" / "metrics.csv"));
}

TEST(Cli, SeedOverrideChangesTheRun) {
  const fs::path dir = vqkit::testing::scratch_dir("cli_seed");
  const fs::path cfg = write_config(dir, "train.json", small_train_config());
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --out " + (dir / "a").string() + " --seed 5"), 0);
  ASSERT_EQ(run_cli("train --config " + cfg.string() + " --out " + (dir / "b").string()), 0);
  EXPECT_NE(vqkit::testing::read_file(dir / "a" / "metrics.csv"), vqkit::testing::read_file(dir / "b" / "metrics.csv"));
  EXPECT_EQ(parse_config(json::parse(vqkit::testing::read_file(dir / "a" / "effective_config.json"))).seed, 5u);
}

TEST(Cli, ConfigErrorsExitTwo) {
  const fs::path dir = vqkit::testing::scratch_dir("cli_bad");
  const std::string out = " --out " + (dir / "out").string();
  json no_seed = small_train_config();
  no_seed.erase("seed");
  json unknown = small_train_config();
  unknown["trian"] = json::object();
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli("train --config " + write_config(dir, "a.json", no_seed).string() + out), 2);
  EXPECT_EQ(run_cli("train --config " + write_config(dir, "b.json", unknown).string() + out), 2);
  EXPECT_EQ(run_cli("train --config " + (dir / "broken.json").string() + out), 2);
  EXPECT_EQ(run_cli("train" + out), 2);
  EXPECT_EQ(run_cli("train --config " + (dir / "missing.json").string() + out), 2);
  EXPECT_EQ(run_cli("teleport --config " + (dir / "a.json").string() + out), 2);
  EXPECT_EQ(run_cli(""), 2);
}

TEST(Cli, DivergentTrainingExitsThree) {
  const fs::path dir = vqkit::testing::scratch_dir("cli_nan");
  json j = small_train_config();
  j["train"]["lr"] = 1e6;
  EXPECT_EQ(run_cli("train --config " + write_config(dir, "nan.json", j).string() + " --out " + (dir / "out").string()),
            3);
}

TEST(Cli, MetricsReplaySummarisesTheCsv) {
  const fs::path dir = vqkit::testing::scratch_dir("cli_replay");
  ASSERT_EQ(run_cli("metrics-replay --config " + (fs::path(VQKIT_CONFIG_DIR) / "metrics_replay.json").string() +
                    " --out " + dir.string()),
            0);
  const json summary = json::parse(vqkit::testing::read_file(dir / "summary.json"));
  EXPECT_EQ(summary["rows"], 60);
  EXPECT_TRUE(summary["invariants_hold"].get<bool>());
  EXPECT_EQ(vqkit::testing::read_file(dir / "metrics.csv"),
            vqkit::testing::read_file(fs::path(VQKIT_CONFIG_DIR) / "sample_metrics.csv"));

  json bad = {{"seed", 1}, {"replay", {{"metrics", "nowhere.csv"}}}};
  EXPECT_EQ(run_cli("metrics-replay --config " + write_config(dir, "bad.json", bad).string() + " --out " +
                    (dir / "x").string()),
            2);
}
