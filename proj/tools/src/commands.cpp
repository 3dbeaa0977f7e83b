#include <cmath>
#include <fstream>
#include <iostream>
#include <map>

#include "vqkit/errors.hpp"
#include "vqkit_tools/experiments.hpp"

namespace vqkit::tools {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_effective_config(const ExperimentConfig& c, const fs::path& out) {
  write_json(out / "effective_config.json", to_json(c));
}

std::string csv_join(std::initializer_list<std::string> cells) {
  std::string s;
  for (const auto& c : cells) {
    if (!s.empty()) s += ',';
    s += c;
  }
  return s;
}

}  // namespace

void command_toy_trajectory(const ExperimentConfig& c, const fs::path& out) {
  write_effective_config(c, out);
  json reps = json::array();
  bool path_ok = true, settle_ok = true;
  for (std::size_t r = 0; r < c.toy.replicates; ++r) {
    const std::uint64_t seed = derive_seed(c.seed, r);
    json modes = json::object();
    std::map<std::string, ToyResult> by_mode;
    for (const auto& name : c.toy.modes) {
      ToyResult res = run_toy_trajectory(parse_toy_mode(name), c.toy, seed);
      std::string csv = "step,z_e_x,z_e_y,z_q_x,z_q_y,task_loss\n";
      for (const auto& row : res.rows)
        csv += csv_join({std::to_string(row.step), format_double(row.ze_x), format_double(row.ze_y),
                         format_double(row.zq_x), format_double(row.zq_y), format_double(row.task_loss)}) +
               "\n";
      write_text(out / ("trajectory_" + name + "_r" + std::to_string(r) + ".csv"), csv);
      modes[name] = {{"path_length", res.path_length},
                     {"steps_to_tolerance", res.steps_to_tolerance},
                     {"final_distance", res.final_distance},
                     {"target", {res.target_x, res.target_y}}};
      by_mode.emplace(name, std::move(res));
    }
    if (by_mode.contains("joint") && by_mode.contains("alternated"))
      path_ok = path_ok && by_mode["alternated"].path_length < by_mode["joint"].path_length;
    if (by_mode.contains("joint") && by_mode.contains("alternated") && by_mode.contains("lookahead"))
      settle_ok = settle_ok &&
                  by_mode["lookahead"].steps_to_tolerance <= by_mode["alternated"].steps_to_tolerance &&
                  by_mode["alternated"].steps_to_tolerance <= by_mode["joint"].steps_to_tolerance;
    reps.push_back({{"replicate", r}, {"seed", seed}, {"modes", modes}});
  }
  write_json(out / "summary.json", {{"replicates", reps},
                                    {"alternated_path_shorter_than_joint", path_ok},
                                    {"settling_order_lookahead_alternated_joint", settle_ok}});
}

void command_affine_toy(const ExperimentConfig& c, const fs::path& out) {
  write_effective_config(c, out);
  const AffineToyResult res = run_affine_toy(c.affine_toy, c.seed);
  json variants = json::object();
  std::string steps_csv = "variant,step,gap,divergence";
  const std::size_t d = c.affine_toy.p_mean.size();
  for (std::size_t j = 0; j < d; ++j) steps_csv += ",mean_" + std::to_string(j);
  steps_csv += "\n";
  for (const auto& v : res.variants) {
    variants[v.variant] = {{"fraction_moved", v.fraction_moved},
                           {"fraction_unmoved", v.fraction_unmoved},
                           {"initial_gap", v.initial_gap},
                           {"final_gap", v.final_gap},
                           {"gap_ratio", v.final_gap / v.initial_gap},
                           {"final_divergence", v.divergence.back()}};
    std::string dump = "step,code";
    for (std::size_t j = 0; j < d; ++j) dump += ",c_" + std::to_string(j);
    dump += "\n";
    for (std::size_t t = 0; t < v.codebooks.size(); ++t) {
      double gap = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = v.mean_trajectory[t][j] - c.affine_toy.p_mean[j];
        gap += diff * diff;
      }
      std::string row = v.variant + "," + std::to_string(t) + "," + format_double(std::sqrt(gap)) + "," +
                        format_double(v.divergence[t]);
      for (double m : v.mean_trajectory[t]) row += "," + format_double(m);
      steps_csv += row + "\n";
      for (std::size_t k = 0; k < v.codebooks[t].rows(); ++k) {
        dump += std::to_string(t) + "," + std::to_string(k);
        for (double x : v.codebooks[t].row(k)) dump += "," + format_double(x);
        dump += "\n";
      }
    }
    write_text(out / ("codebooks_" + v.variant + ".csv"), dump);
  }
  write_text(out / "affine_toy_steps.csv", steps_csv);
  write_json(out / "summary.json", {{"analytic_initial_gap", res.analytic_initial_gap}, {"variants", variants}});
}

void command_ablation(const json& raw, const ExperimentConfig& c, const fs::path& out) {
  write_effective_config(c, out);
  const AblationResult res = run_ablation(raw, c);
  std::string table =
      "cell,replicates,task_loss_mean,task_loss_sd,perplexity_mean,perplexity_sd,active_ratio_mean,active_ratio_sd\n";
  for (const auto& r : res.rows)
    table += csv_join({r.cell, std::to_string(r.replicates), format_double(r.task_loss_mean),
                       format_double(r.task_loss_sd), format_double(r.perplexity_mean), format_double(r.perplexity_sd),
                       format_double(r.active_ratio_mean), format_double(r.active_ratio_sd)}) +
             "\n";
  write_text(out / "results.csv", table);
  std::string reps = "cell,replicate,seed,task_loss,perplexity,active_ratio\n";
  for (const auto& r : res.replicates)
    reps += csv_join({r.cell, std::to_string(r.replicate), std::to_string(r.seed), format_double(r.task_loss),
                      format_double(r.perplexity), format_double(r.active_ratio)}) +
            "\n";
  write_text(out / "replicates.csv", reps);
}

void command_train(const ExperimentConfig& c, const fs::path& out) {
  write_effective_config(c, out);
  const RunOutput run = run_training(c);
  write_metrics_csv(out / "metrics.csv", run.train.metrics);
  std::string events;
  for (const auto& e : run.train.replacements)
    events += json{{"step", e.step}, {"replaced_indices", e.replaced_indices}}.dump() + "\n";
  write_text(out / "replacements.jsonl", events);
  save_codebook(run.codebook, out / "codebook.bin", out / "codebook.json");
  write_json(out / "summary.json", {{"steps", c.train.config.steps},
                                    {"rows_consumed", run.train.rows_consumed},
                                    {"final_task_loss", run.final_task_loss},
                                    {"final_perplexity", run.final_perplexity},
                                    {"final_active_ratio", run.final_active_ratio},
                                    {"replacement_events", run.train.replacements.size()}});
}

void command_init_study(const ExperimentConfig& c, const fs::path& out) {
  write_effective_config(c, out);
  const auto rows = run_init_study(c);
  std::string csv = "replicate,method,divergence\n";
  std::map<std::string, std::vector<double>> by_method;
  for (const auto& r : rows) {
    csv += std::to_string(r.replicate) + "," + r.method + "," + format_double(r.divergence) + "\n";
    by_method[r.method].push_back(r.divergence);
  }
  write_text(out / "init_study.csv", csv);
  json means = json::object();
  for (const auto& [m, v] : by_method) {
    double s = 0.0;
    for (double x : v) s += x;
    means[m] = s / static_cast<double>(v.size());
  }
  write_json(out / "summary.json", {{"mean_divergence", means}});
}

void command_metrics_replay(const ExperimentConfig& c, const fs::path& out) {
  write_effective_config(c, out);
  if (c.replay.metrics.empty()) throw ConfigError("replay.metrics is required for metrics-replay");
  fs::path src = c.replay.metrics;
  if (src.is_relative()) src = c.base_dir / src;
  std::vector<MetricsRecord> records;
  try {
    records = read_metrics_csv(src);
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  write_metrics_csv(out / "metrics.csv", records);

  const char* names[] = {"task_loss", "commit_loss", "perplexity", "active_ratio",
                         "quant_error", "grad_gap", "divergence_cq"};
  json columns = json::object();
  bool invariants = true;
  for (std::size_t col = 0; col < 7; ++col) {
    std::vector<double> v;
    for (const auto& r : records) {
      const double vals[] = {r.task_loss, r.commit_loss, r.perplexity, r.active_ratio,
                             r.quant_error, r.grad_gap, r.divergence_cq};
      v.push_back(vals[col]);
    }
    if (v.empty()) continue;
    double lo = v[0], hi = v[0], sum = 0.0;
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
      sum += x;
      invariants = invariants && std::isfinite(x);
    }
    columns[names[col]] = {{"first", v.front()}, {"last", v.back()}, {"min", lo}, {"max", hi},
                           {"mean", sum / static_cast<double>(v.size())}};
  }
  for (const auto& r : records) {
    invariants = invariants && r.perplexity >= 1.0 && r.active_ratio >= 0.0 && r.active_ratio <= 1.0;
    if (c.replay.num_codes > 0) invariants = invariants && r.perplexity <= static_cast<double>(c.replay.num_codes);
  }
  write_json(out / "summary.json", {{"rows", records.size()}, {"columns", columns}, {"invariants_hold", invariants}});
}

int run_subcommand(const std::string& name, const fs::path& config_path, const fs::path& out,
                   const std::optional<std::uint64_t>& seed_override) {
  try {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config " + config_path.string());
    json raw;
    try {
      raw = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + config_path.string() + " is not valid JSON: " + e.what());
    }
    if (seed_override && raw.is_object()) raw["seed"] = *seed_override;
    ExperimentConfig c = parse_config(raw);
    c.base_dir = config_path.parent_path();
    fs::create_directories(out);
    try {
      if (name == "toy-trajectory") command_toy_trajectory(c, out);
      else if (name == "affine-toy") command_affine_toy(c, out);
      else if (name == "ablation") command_ablation(raw, c, out);
      else if (name == "train") command_train(c, out);
      else if (name == "init-study") command_init_study(c, out);
      else if (name == "metrics-replay") command_metrics_replay(c, out);
      else throw ConfigError("unknown subcommand '" + name + "'");
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "vqkit: config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericFailure& e) {
    std::cerr << "vqkit: numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DegenerateInput& e) {
    std::cerr << "vqkit: numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "vqkit: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace vqkit::tools
