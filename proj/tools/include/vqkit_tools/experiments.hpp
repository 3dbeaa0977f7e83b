#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqkit/training.hpp"
#include "vqkit_tools/config.hpp"

namespace vqkit::tools {

Tensor gen_mixture(const MixtureSpec& spec, std::uint64_t seed);
/// The mixture a DataSpec describes (random means drawn from `seed` unless explicit).
MixtureSpec resolve_mixture(const DataSpec& data, std::uint64_t seed);
Tensor make_dataset(const DataSpec& data, std::uint64_t seed);

// Toy problem: one 2-D embedding, one code, a fixed target.
enum class ToyMode { no_vq, joint, alternated, lookahead };
ToyMode parse_toy_mode(const std::string& name);
std::string to_string(ToyMode mode);

struct ToyRow {
  std::int64_t step = 0;
  double ze_x = 0, ze_y = 0, zq_x = 0, zq_y = 0, task_loss = 0;
};

struct ToyResult {
  ToyMode mode = ToyMode::no_vq;
  std::vector<ToyRow> rows;  // step 0 is the initial state
  double path_length = 0.0;
  /// First step after which ||z_e - target|| stays below the tolerance; steps + 1 if never.
  std::int64_t steps_to_tolerance = 0;
  double final_distance = 0.0;
  double target_x = 0.0, target_y = 0.0;
};

ToyResult run_toy_trajectory(ToyMode mode, const ToySpec& spec, std::uint64_t seed);

struct AffineVariantResult {
  std::string variant;
  double fraction_moved = 0.0;
  double fraction_unmoved = 0.0;
  double initial_gap = 0.0;
  double final_gap = 0.0;
  std::vector<std::vector<double>> mean_trajectory;  // effective codebook mean per step (0..steps)
  std::vector<double> divergence;                    // D(P, C) per step
  std::vector<Tensor> codebooks;                     // effective codes per step
};

struct AffineToyResult {
  double analytic_initial_gap = 0.0;
  std::vector<AffineVariantResult> variants;  // standard, affine_learnable, affine_ema
};

AffineToyResult run_affine_toy(const AffineToySpec& spec, std::uint64_t seed);

/// Everything a single autoencoder run produces.
struct RunOutput {
  TrainResult train;
  Autoencoder model;
  Codebook codebook;
  double final_task_loss = 0.0;
  double final_perplexity = 1.0;
  double final_active_ratio = 0.0;
};

/// Builds data, model and codebook from the config and trains them.
RunOutput run_training(const ExperimentConfig& config);

struct AblationRow {
  std::string cell;
  std::size_t replicates = 0;
  double task_loss_mean = 0, task_loss_sd = 0;
  double perplexity_mean = 0, perplexity_sd = 0;
  double active_ratio_mean = 0, active_ratio_sd = 0;
};

struct AblationReplicate {
  std::string cell;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  double task_loss = 0, perplexity = 0, active_ratio = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationReplicate> replicates;
};

/// Each cell re-parses the base config with its overrides merged in. Replicate r of every
/// cell uses seed derive_seed(base seed, r), so cells differ only in their settings.
AblationResult run_ablation(const nlohmann::json& base_config, const ExperimentConfig& parsed);

struct InitStudyRow {
  std::size_t replicate = 0;
  std::string method;
  double divergence = 0.0;
};

std::vector<InitStudyRow> run_init_study(const ExperimentConfig& config);

/// The mismatched-initialisation scenario used for the collapse experiments.
nlohmann::json collapse_scenario_json(std::uint64_t seed);

/// Subcommand drivers: each writes its artifacts plus effective_config.json into `out`.
void command_toy_trajectory(const ExperimentConfig& c, const std::filesystem::path& out);
void command_affine_toy(const ExperimentConfig& c, const std::filesystem::path& out);
void command_ablation(const nlohmann::json& raw, const ExperimentConfig& c, const std::filesystem::path& out);
void command_train(const ExperimentConfig& c, const std::filesystem::path& out);
void command_init_study(const ExperimentConfig& c, const std::filesystem::path& out);
void command_metrics_replay(const ExperimentConfig& c, const std::filesystem::path& out);

/// Runs a subcommand by name; returns the process exit code (0, 2 config error, 3 numeric failure).
int run_subcommand(const std::string& name, const std::filesystem::path& config_path,
                   const std::filesystem::path& out, const std::optional<std::uint64_t>& seed_override);

}  // namespace vqkit::tools
