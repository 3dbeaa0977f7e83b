#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <set>
#include <thread>

#include "vqkit/errors.hpp"
#include "vqkit_tools/experiments.hpp"

namespace vqkit::tools {
namespace {

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::vector<AblationCell> default_cells() {
  using nlohmann::json;
  return {
      {"plain", json::object()},
      {"n_group_1", {{"vq", {{"n_group", 1}}}}},
      {"n_group_2", {{"vq", {{"n_group", 2}}}}},
      {"init_kmeans", {{"vq", {{"init", {{"method", "kmeans"}}}}}}},
      {"affine_learnable", {{"vq", {{"affine", "learnable"}, {"affine_lr_scale", 0.2}}}}},
      {"affine_ema", {{"vq", {{"affine", "ema"}}}}},
      {"sync_nu_1", {{"vq", {{"nu", 1.0}}}}},
      {"alternating_k1", {{"train", {{"mode", "alternating"}, {"inner_k", 1}, {"outer_k", 1}}}}},
      {"alternating_k2", {{"train", {{"mode", "alternating"}, {"inner_k", 2}, {"outer_k", 2}}}}},
      {"replace_lru", {{"vq", {{"replacement", "lru"}}}}},
      {"cosine_unit_norm", {{"vq", {{"distance", "cosine_unit_norm"}}}}},
      {"cosine_renorm", {{"vq", {{"distance", "cosine_renorm"}}}}},
  };
}

}  // namespace

RunOutput run_training(const ExperimentConfig& c) {
  const Tensor data = make_dataset(c.data, derive_seed(c.seed, 10));
  Autoencoder model = Autoencoder::make_default(derive_seed(c.seed, 11), data.cols(), c.model.hidden, c.model.code_dim);

  const std::size_t group_dim = c.model.code_dim / c.vq.n_group;
  Tensor sample = group_split(encode_values(model, data), c.vq.n_group);
  if (c.vq.distance == DistanceKind::cosine_unit_norm)
    for (std::size_t r = 0; r < sample.rows(); ++r) {
      auto row = sample.row(r);
      const double n = std::sqrt(squared_norm(row));
      if (n > 0.0)
        for (double& x : row) x /= n;
    }
  const Tensor codes = init_codebook(c.vq.init, c.vq.num_codes, group_dim, &sample, derive_seed(c.seed, 12));
  VectorQuantizer vq(c.vq, Codebook(codes), derive_seed(c.seed, 13));

  TrainConfig tc = c.train.config;
  tc.seed = derive_seed(c.seed, 14);
  TrainResult trained = c.train.mode == TrainMode::joint ? train_joint(model, vq, data, tc)
                                                         : train_alternating(model, vq, data, tc);
  RunOutput out{std::move(trained), model, vq.codebook()};
  out.final_task_loss = evaluate_task_loss(model, vq, data);
  out.final_perplexity = evaluate_perplexity(model, vq, data);
  out.final_active_ratio = evaluate_active_ratio(model, vq, data);
  return out;
}

AblationResult run_ablation(const nlohmann::json& base_config, const ExperimentConfig& parsed) {
  std::vector<AblationCell> cells = parsed.ablation.cells.empty() ? default_cells() : parsed.ablation.cells;
  std::set<std::string> names;
  for (const auto& cell : cells)
    if (!names.insert(cell.name).second) throw ConfigError("duplicate ablation cell '" + cell.name + "'");

  const std::size_t reps = parsed.ablation.replicates;
  struct Task {
    std::size_t cell;
    std::size_t replicate;
    ExperimentConfig config;
  };
  std::vector<Task> tasks;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    nlohmann::json cell_json = base_config;
    cell_json.erase("ablation");
    cell_json.merge_patch(cells[ci].overrides);
    for (std::size_t r = 0; r < reps; ++r) {
      cell_json["seed"] = derive_seed(parsed.seed, r);
      ExperimentConfig cfg;
      try {
        cfg = parse_config(cell_json);
      } catch (const ConfigError& e) {
        throw ConfigError("ablation cell '" + cells[ci].name + "': " + e.what());
      }
      tasks.push_back({ci, r, std::move(cfg)});
    }
  }

  std::vector<AblationReplicate> results(tasks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        const RunOutput run = run_training(tasks[i].config);
        results[i] = {cells[tasks[i].cell].name, tasks[i].replicate, tasks[i].config.seed,
                      run.final_task_loss, run.final_perplexity, run.final_active_ratio};
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::size_t threads = parsed.ablation.threads;
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, tasks.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  AblationResult out;
  out.replicates = results;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    std::vector<double> loss, ppl, active;
    for (const auto& r : results)
      if (r.cell == cells[ci].name) {
        loss.push_back(r.task_loss);
        ppl.push_back(r.perplexity);
        active.push_back(r.active_ratio);
      }
    out.rows.push_back({cells[ci].name, loss.size(), mean(loss), sample_sd(loss), mean(ppl), sample_sd(ppl),
                        mean(active), sample_sd(active)});
  }
  return out;
}

std::vector<InitStudyRow> run_init_study(const ExperimentConfig& c) {
  std::vector<InitStudyRow> rows;
  for (std::size_t r = 0; r < c.init_study.replicates; ++r) {
    const std::uint64_t seed = derive_seed(c.seed, r);
    const MixtureSpec mixture = resolve_mixture(c.data, seed);
    Tensor fit = gen_mixture(mixture, derive_seed(seed, 1));
    MixtureSpec held = mixture;
    held.samples = c.init_study.holdout;
    Tensor holdout = gen_mixture(held, derive_seed(seed, 2));
    if (c.data.relu) {
      for (double& v : fit.values()) v = std::max(v, 0.0);
      for (double& v : holdout.values()) v = std::max(v, 0.0);
    }
    for (const auto& name : c.init_study.methods) {
      InitMethod method = c.vq.init;
      method.kind = parse_init_kind(name);
      method.iters = c.init_study.kmeans_iters;
      const Tensor codes = init_codebook(method, c.init_study.num_codes, fit.cols(), &fit, derive_seed(seed, 3));
      rows.push_back({r, name, divergence(holdout, codes)});
    }
  }
  return rows;
}

nlohmann::json collapse_scenario_json(std::uint64_t seed) {
  return {
      {"scenario", "collapse"},
      {"seed", seed},
      {"data", {{"samples", 1024}, {"dim", 16}, {"components", 8}, {"spread", 1.0}, {"scale", 0.25}}},
      {"model", {{"hidden", 32}, {"code_dim", 8}}},
      {"vq",
       {{"num_codes", 64},
        {"alpha", 5.0},
        {"beta", 0.9},
        {"init", {{"method", "uniform"}, {"low", -4.0}, {"high", 4.0}}}}},
      {"train",
       {{"steps", 600},
        {"batch_size", 64},
        {"lr", 0.05},
        {"momentum", 0.9},
        {"codebook_lr", 0.05},
        {"active_window", 16},
        {"measure_grad_gap", false}}},
  };
}

}  // namespace vqkit::tools
