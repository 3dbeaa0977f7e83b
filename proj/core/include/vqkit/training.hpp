#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "vqkit/autodiff.hpp"
#include "vqkit/metrics.hpp"
#include "vqkit/nn.hpp"
#include "vqkit/vq_layer.hpp"

namespace vqkit {

struct OptimizerConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double codebook_lr = 0.05;
  double codebook_momentum = 0.0;
};

struct OptimizerState {
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<Tensor> velocity;  // sized on first step

  static OptimizerState for_network(const OptimizerConfig& c) { return {c.momentum, c.weight_decay, {}}; }
  /// Codebook groups never get weight decay.
  static OptimizerState for_codebook(const OptimizerConfig& c) { return {c.codebook_momentum, 0.0, {}}; }
};

/// v <- mu v + g + lambda theta; theta <- theta - lr v
void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, OptimizerState& state,
              double lr);

enum class ScheduleKind { constant, step, cosine_warmup };
std::string_view to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);

struct Schedule {
  ScheduleKind kind = ScheduleKind::constant;
  std::vector<std::int64_t> milestones;
  double factor = 0.1;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  void validate() const;
};

/// Multiplier on the base rate at step t (0-based).
double lr_factor(const Schedule& schedule, std::int64_t t);
inline double lr_at(const Schedule& schedule, double base_lr, std::int64_t t) {
  return base_lr * lr_factor(schedule, t);
}

struct TrainConfig {
  std::int64_t steps = 200;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer;
  Schedule schedule;
  std::size_t inner_k = 1;
  std::size_t outer_k = 1;
  bool fused = false;
  double smoothness_gamma = 0.0;
  std::size_t active_window = 0;  // steps; 0 means one epoch
  bool measure_grad_gap = true;
  bool bypass_quantizer = false;  // z_q := z_e throughout (reference runs)
  std::uint64_t seed = 0;
};

struct ReplacementEvent {
  std::int64_t step = 0;
  std::vector<std::size_t> replaced_indices;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  std::vector<ReplacementEvent> replacements;
  std::size_t rows_consumed = 0;
};

struct EncodePass {
  std::vector<ad::Var> params;
  ad::Var z_e;
};
EncodePass encode(ad::Tape& tape, const Autoencoder& model, const Tensor& x);
Tensor encode_values(const Autoencoder& model, const Tensor& x);

/// gamma * mean 1/2 ||F(z_q) - F(z_e)||^2 using the decoder leaves in `params`.
ad::Var smoothness_loss(ad::Tape& tape, const Mlp& decoder, const std::vector<ad::Var>& params, ad::Var z_e,
                        ad::Var z_q, double gamma);

/// Sequential shuffled batches; reshuffles when fewer than batch_size rows remain.
class BatchStream {
 public:
  BatchStream(const Tensor& data, std::size_t batch_size, std::uint64_t seed);
  Tensor next();
  std::size_t steps_per_epoch() const noexcept { return data_.rows() / batch_size_; }

 private:
  void reshuffle();

  const Tensor& data_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

TrainResult train_joint(Autoencoder& model, VectorQuantizer& vq, const Tensor& data, const TrainConfig& config);
TrainResult train_alternating(Autoencoder& model, VectorQuantizer& vq, const Tensor& data,
                              const TrainConfig& config);

/// Codebook-only commitment step on one sub-batch. Returns the commitment loss.
double inner_step(VectorQuantizer& vq, const Tensor& z_e, const OptimizerConfig& opt,
                  OptimizerState& codebook_state, double lr_factor, std::int64_t step,
                  std::vector<std::size_t>& selected, std::vector<double>& distances);

/// Perplexity of the codes selected for every row of `data` under the current model.
double evaluate_perplexity(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data);
/// Fraction of codes selected at least once on `data`.
double evaluate_active_ratio(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data);
/// Mean reconstruction loss on `data` through the quantizer.
double evaluate_task_loss(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data);

}  // namespace vqkit
