#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqkit/training.hpp"
#include "vqkit/vq_layer.hpp"

namespace vqkit::tools {

/// Bad or inconsistent configuration; the CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MixtureComponent {
  std::vector<double> mean;
  double scale = 1.0;  // covariance is scale * I
  double weight = 1.0;
};

struct MixtureSpec {
  std::size_t dim = 2;
  std::size_t samples = 1;
  std::vector<MixtureComponent> components;

  void validate() const;
};

/// Data for the autoencoder runs: a Gaussian mixture with seeded random means unless
/// `mixture` is given explicitly. `relu` clamps every feature at 0.
struct DataSpec {
  std::size_t samples = 2048;
  std::size_t dim = 16;
  std::size_t components = 8;
  double spread = 2.0;
  double scale = 0.25;
  bool relu = false;
  std::optional<MixtureSpec> mixture;
};

struct ModelSpec {
  std::size_t hidden = 32;
  std::size_t code_dim = 8;
};

enum class TrainMode { joint, alternating };

struct TrainSpec {
  TrainMode mode = TrainMode::joint;
  TrainConfig config;
};

struct ToySpec {
  std::vector<std::string> modes{"no_vq", "joint", "alternated", "lookahead"};
  double lr = 0.1;
  std::int64_t steps = 500;
  double alpha = 1.0;
  double beta = 0.95;
  double nu = 1.0;
  double target_scale = 2.0;
  double tolerance = 1e-3;
  std::size_t replicates = 5;
};

struct AffineToySpec {
  std::size_t points = 512;
  std::size_t codes = 128;
  std::int64_t steps = 20;
  double lr = 0.1;
  std::vector<double> p_mean{0.0, 0.0};
  double p_cov = 0.5;
  std::vector<double> c_mean{-1.0, -1.0};
  double c_cov = 0.3;
  double lr_scale = 3.0;
  double ema_momentum = 0.1;
};

struct AblationCell {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();
};

struct AblationSpec {
  std::size_t replicates = 5;
  std::size_t threads = 0;  // 0 = hardware concurrency
  std::vector<AblationCell> cells;
};

struct InitStudySpec {
  std::vector<std::string> methods{"kmeans", "data_subset", "normal_kaiming"};
  std::size_t replicates = 5;
  std::size_t num_codes = 64;
  std::size_t holdout = 2048;
  std::size_t kmeans_iters = 50;
};

struct ReplaySpec {
  std::string metrics;  // path to a metrics CSV, relative to the config file
  std::size_t num_codes = 0;  // 0 = only check perplexity >= 1
};

struct ExperimentConfig {
  std::string scenario = "default";
  std::uint64_t seed = 0;
  DataSpec data;
  ModelSpec model;
  VQConfig vq;
  TrainSpec train;
  ToySpec toy;
  AffineToySpec affine_toy;
  AblationSpec ablation;
  InitStudySpec init_study;
  ReplaySpec replay;

  std::filesystem::path base_dir;  // directory of the config file, not serialised
};

/// Strict parse: unknown keys, wrong types and invalid values raise ConfigError. `seed` is mandatory.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field with defaults resolved; parse_config(to_json(c)) reproduces c.
nlohmann::json to_json(const ExperimentConfig& c);

}  // namespace vqkit::tools
