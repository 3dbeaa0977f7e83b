#include <CLI11.hpp>

#include <optional>
#include <string>

#include "vqkit_tools/experiments.hpp"

int main(int argc, char** argv) {
  CLI::App app{"vqkit: vector-quantization experiments"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  const char* commands[][2] = {
      {"toy-trajectory", "2-D single-code trajectories for no_vq, joint, alternated and lookahead updates"},
      {"affine-toy", "2-D codebook-shift toy comparing standard and affine codebook updates"},
      {"ablation", "train the toy autoencoder over a grid of cells and seeds"},
      {"train", "train the toy autoencoder once and write metrics and the codebook"},
      {"init-study", "codebook initialisation divergence study"},
      {"metrics-replay", "re-read a metrics CSV, check its invariants and summarise it"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "experiment JSON config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory")->required();
    sub->add_option("--seed", seed, "override the config seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  return vqkit::tools::run_subcommand(app.get_subcommands().front()->get_name(), config, out, seed);
}
