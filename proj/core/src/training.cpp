#include "vqkit/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "vqkit/errors.hpp"

namespace vqkit {
namespace {

std::vector<Tensor> grads_of(const ad::Tape& tape, const std::vector<ad::Var>& vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (ad::Var v : vars) out.push_back(tape.grad(v));
  return out;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericFailure(std::string(what) + " is not finite");
}

// Parameters the codebook optimizer owns, in a fixed order for the lifetime of a run.
struct CodebookGroup {
  std::vector<Tensor*> params;
  std::vector<ad::Var> vars;
};

CodebookGroup codebook_group(VectorQuantizer& vq, const VQOutput& q) {
  CodebookGroup g;
  if (vq.config().update == CodebookUpdate::gradient) {
    g.params.push_back(&vq.codebook().codes());
    g.vars.push_back(q.codes);
  }
  if (vq.config().affine == AffineMode::learnable) {
    g.params.push_back(&vq.affine_s());
    g.params.push_back(&vq.affine_b());
    g.vars.push_back(*q.affine_s);
    g.vars.push_back(*q.affine_b);
  }
  return g;
}

Tensor selected_raw_codes(const Codebook& cb, const std::vector<std::size_t>& indices) {
  Tensor out(indices.size(), cb.dim());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = cb.codes().row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// Codebook optimizer step plus the EMA rules that depend on this step's assignment.
void update_codebook(VectorQuantizer& vq, const ad::Tape& tape, const VQOutput& q, OptimizerState& state,
                     double lr) {
  const CodebookGroup group = codebook_group(vq, q);
  if (!group.params.empty()) sgd_step(group.params, grads_of(tape, group.vars), state, lr);
  const Tensor& z_groups = tape.value(q.z_e_groups);
  if (vq.config().update == CodebookUpdate::ema) ema_update(vq.codebook(), z_groups, q.indices, vq.config().ema_decay);
  if (vq.config().affine == AffineMode::learnable) vq.sync_affine();
  if (vq.config().affine == AffineMode::ema)
    affine_update_ema(vq.codebook(), z_groups, selected_raw_codes(vq.codebook(), q.indices),
                      vq.config().affine_momentum);
}

// D(C, Q): mean over effective codes of the distance to the nearest selected code.
double divergence_to_selected(const Tensor& effective, const std::vector<std::size_t>& indices) {
  std::vector<std::size_t> unique = indices;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  Tensor selected(unique.size(), effective.cols());
  for (std::size_t i = 0; i < unique.size(); ++i) {
    auto src = effective.row(unique[i]);
    std::copy(src.begin(), src.end(), selected.row(i).begin());
  }
  return divergence(effective, selected);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

struct RunContext {
  Autoencoder& model;
  VectorQuantizer& vq;
  const Tensor& data;
  const TrainConfig& config;
  OptimizerState encoder_state;
  OptimizerState decoder_state;
  OptimizerState codebook_state;
  UsageWindow window;
  std::size_t steps_per_epoch;
  TrainResult result;

  RunContext(Autoencoder& m, VectorQuantizer& v, const Tensor& d, const TrainConfig& c, std::size_t spe)
      : model(m),
        vq(v),
        data(d),
        config(c),
        encoder_state(OptimizerState::for_network(c.optimizer)),
        decoder_state(OptimizerState::for_network(c.optimizer)),
        codebook_state(OptimizerState::for_codebook(c.optimizer)),
        window(v.codebook().size(), c.active_window > 0 ? c.active_window : std::max<std::size_t>(1, spe)),
        steps_per_epoch(spe) {}

  // Replacement and reset hooks that run once per training step.
  void end_of_step(std::int64_t step, const std::vector<std::size_t>& indices, const Tensor& z_groups) {
    window.push(indices);
    if (config.bypass_quantizer) return;
    const VQConfig& vc = vq.config();
    if (vc.replacement == ReplacementMode::lru) {
      auto replaced = lru_replace(vq.codebook(), z_groups, step, vc.lifespan, vq.rng());
      if (!replaced.empty()) result.replacements.push_back({step, std::move(replaced)});
    }
    const auto period = static_cast<std::int64_t>(steps_per_epoch * vc.reset_every_epochs);
    if (vc.reset == ResetMode::kmeans_every && period > 0 && step % period == 0) {
      const Tensor sample = vq.group_view(encode_values(model, data));
      kmeans_reset(vq.codebook(), sample, vc.reset_iters, vq.rng());
    }
  }
};

void validate_run(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data, const TrainConfig& c) {
  require(c.steps >= 0, "steps must be >= 0");
  require(c.batch_size >= 1 && c.batch_size <= data.rows(), "batch_size must lie in [1, rows]");
  require(!model.encoder.layers().empty(), "model needs an encoder");
  require(data.cols() == model.encoder.layers().front().weight.rows(), "data width does not match the encoder");
  require(c.optimizer.lr >= 0.0 && c.optimizer.codebook_lr >= 0.0, "learning rates must be >= 0");
  c.schedule.validate();
  (void)vq;
}

}  // namespace

void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, OptimizerState& state,
              double lr) {
  require(params.size() == grads.size(), "sgd_step: one gradient per parameter");
  if (state.velocity.empty())
    for (const Tensor* p : params) state.velocity.emplace_back(p->rows(), p->cols());
  require(state.velocity.size() == params.size(), "sgd_step: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = *params[i];
    const Tensor& g = grads[i];
    Tensor& v = state.velocity[i];
    require(theta.same_shape(g) && theta.same_shape(v), "sgd_step: shape mismatch for parameter " +
                                                            std::to_string(i));
    if (!g.all_finite()) throw NumericFailure("sgd_step: non-finite gradient for parameter " + std::to_string(i));
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j] + state.weight_decay * theta[j];
      theta[j] -= lr * v[j];
    }
  }
}

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::constant:
      return "constant";
    case ScheduleKind::step:
      return "step";
    case ScheduleKind::cosine_warmup:
      return "cosine_warmup";
  }
  return "constant";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "constant") return ScheduleKind::constant;
  if (name == "step") return ScheduleKind::step;
  if (name == "cosine_warmup") return ScheduleKind::cosine_warmup;
  throw ContractViolation("unknown schedule '" + std::string(name) + "'");
}

void Schedule::validate() const {
  require(factor >= 0.0, "schedule factor must be >= 0");
  require(warmup_steps >= 0 && total_steps >= 1, "schedule needs warmup_steps >= 0 and total_steps >= 1");
  require(warmup_steps <= total_steps, "warmup_steps must not exceed total_steps");
}

double lr_factor(const Schedule& s, std::int64_t t) {
  require(t >= 0, "lr_factor: step must be >= 0");
  switch (s.kind) {
    case ScheduleKind::constant:
      return 1.0;
    case ScheduleKind::step: {
      double f = 1.0;
      for (std::int64_t m : s.milestones)
        if (t >= m) f *= s.factor;
      return f;
    }
    case ScheduleKind::cosine_warmup: {
      if (t < s.warmup_steps) return static_cast<double>(t) / static_cast<double>(s.warmup_steps);
      if (s.total_steps == s.warmup_steps) return t == s.warmup_steps ? 1.0 : 0.0;
      const double progress = std::min(1.0, static_cast<double>(t - s.warmup_steps) /
                                                static_cast<double>(s.total_steps - s.warmup_steps));
      return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
  }
  return 1.0;
}

EncodePass encode(ad::Tape& tape, const Autoencoder& model, const Tensor& x) {
  EncodePass out;
  out.params = model.encoder.register_parameters(tape);
  out.z_e = model.encoder.forward(tape, tape.constant(x), out.params);
  return out;
}

Tensor encode_values(const Autoencoder& model, const Tensor& x) {
  ad::Tape tape;
  return tape.value(encode(tape, model, x).z_e);
}

ad::Var smoothness_loss(ad::Tape& tape, const Mlp& decoder, const std::vector<ad::Var>& params, ad::Var z_e,
                        ad::Var z_q, double gamma) {
  const ad::Var from_q = decoder.forward(tape, z_q, params);
  const ad::Var from_e = decoder.forward(tape, z_e, params);
  return ad::scale(tape, ad::mse(tape, from_q, from_e), gamma);
}

BatchStream::BatchStream(const Tensor& data, std::size_t batch_size, std::uint64_t seed)
    : data_(data), batch_size_(batch_size), rng_(seed), order_(data.rows()) {
  require(batch_size >= 1 && batch_size <= data.rows(), "BatchStream: batch_size must lie in [1, rows]");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  reshuffle();
}

void BatchStream::reshuffle() {
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng_, i)]);
  cursor_ = 0;
}

Tensor BatchStream::next() {
  if (cursor_ + batch_size_ > order_.size()) reshuffle();
  Tensor out(batch_size_, data_.cols());
  for (std::size_t i = 0; i < batch_size_; ++i) {
    auto src = data_.row(order_[cursor_ + i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  cursor_ += batch_size_;
  return out;
}

double inner_step(VectorQuantizer& vq, const Tensor& z_e, const OptimizerConfig& opt,
                  OptimizerState& codebook_state, double lr_factor, std::int64_t step,
                  std::vector<std::size_t>& selected, std::vector<double>& distances) {
  ad::Tape tape;
  const VQOutput q = vq.quantize(tape, tape.constant(z_e), {.step = step});
  tape.backward(q.commit_loss);
  update_codebook(vq, tape, q, codebook_state, opt.codebook_lr * lr_factor);
  selected.insert(selected.end(), q.indices.begin(), q.indices.end());
  distances.insert(distances.end(), q.distances.begin(), q.distances.end());
  return tape.value(q.commit_loss)[0];
}

TrainResult train_joint(Autoencoder& model, VectorQuantizer& vq, const Tensor& data, const TrainConfig& config) {
  validate_run(model, vq, data, config);
  BatchStream stream(data, config.batch_size, derive_seed(config.seed, 0xba7c));
  RunContext ctx(model, vq, data, config, stream.steps_per_epoch());

  for (std::int64_t t = 1; t <= config.steps; ++t) {
    const Tensor x = stream.next();
    ctx.result.rows_consumed += x.rows();
    MetricsRecord rec;
    rec.step = t;
    if (config.measure_grad_gap && !config.bypass_quantizer) rec.grad_gap = gradient_gap(model, vq, x, x, t);
    const Tensor effective = vq.codebook().effective_codes();

    ad::Tape tape;
    const EncodePass enc = encode(tape, model, x);
    const VQOutput q = vq.quantize(tape, enc.z_e, {.step = t, .bypass = config.bypass_quantizer});
    const auto dec_params = model.decoder.register_parameters(tape);
    const ad::Var y_hat = model.decoder.forward(tape, q.z_q, dec_params);
    const ad::Var task = ad::mse(tape, y_hat, tape.constant(x));
    ad::Var loss = config.bypass_quantizer ? task : ad::add(tape, task, q.commit_loss);
    if (config.smoothness_gamma > 0.0)
      loss = ad::add(tape, loss,
                     smoothness_loss(tape, model.decoder, dec_params, enc.z_e, q.z_q, config.smoothness_gamma));
    check_finite(tape.value(loss)[0], "training loss");
    tape.backward(loss);

    const double f = lr_factor(config.schedule, t - 1);
    sgd_step(model.encoder.parameters(), grads_of(tape, enc.params), ctx.encoder_state, config.optimizer.lr * f);
    sgd_step(model.decoder.parameters(), grads_of(tape, dec_params), ctx.decoder_state, config.optimizer.lr * f);
    if (!config.bypass_quantizer) update_codebook(vq, tape, q, ctx.codebook_state, config.optimizer.codebook_lr * f);

    rec.task_loss = tape.value(task)[0];
    rec.commit_loss = tape.value(q.commit_loss)[0];
    if (!config.bypass_quantizer) {
      rec.perplexity = perplexity_of_indices(q.indices, vq.codebook().size());
      rec.quant_error = mean_of(q.distances);
      rec.divergence_cq = divergence_to_selected(effective, q.indices);
    }
    ctx.end_of_step(t, q.indices, tape.value(q.z_e_groups));
    rec.active_ratio = ctx.window.active_ratio();
    ctx.result.metrics.push_back(rec);
  }
  return std::move(ctx.result);
}

TrainResult train_alternating(Autoencoder& model, VectorQuantizer& vq, const Tensor& data,
                              const TrainConfig& config) {
  validate_run(model, vq, data, config);
  require(!config.bypass_quantizer, "alternating training needs the quantizer");
  require(config.inner_k >= 1 && config.outer_k >= 1, "inner_k and outer_k must be >= 1");
  const std::size_t parts = config.inner_k + config.outer_k;
  require(config.batch_size % parts == 0, "batch_size " + std::to_string(config.batch_size) +
                                              " is not divisible into inner_k + outer_k sub-batches");
  require(!config.fused || config.inner_k == 1, "the fused variant needs inner_k = 1");
  const std::size_t sub = config.batch_size / parts;

  BatchStream stream(data, config.batch_size, derive_seed(config.seed, 0xba7c));
  RunContext ctx(model, vq, data, config, stream.steps_per_epoch());

  for (std::int64_t t = 1; t <= config.steps; ++t) {
    const Tensor x = stream.next();
    ctx.result.rows_consumed += x.rows();
    MetricsRecord rec;
    rec.step = t;
    if (config.measure_grad_gap) rec.grad_gap = gradient_gap(model, vq, x, x, t);
    const Tensor effective = vq.codebook().effective_codes();
    const double f = lr_factor(config.schedule, t - 1);

    std::vector<std::size_t> selected;
    std::vector<double> distances, commits, tasks;
    Tensor z_groups;
    auto collect_groups = [&](const Tensor& g) { z_groups = z_groups.empty() ? g : vstack(z_groups, g); };

    // Task-loss step for encoder and decoder on `target`; the codebook is left alone.
    auto outer_on = [&](ad::Tape& tape, const EncodePass& enc, ad::Var z_e, const Tensor& target) {
      const VQOutput q = vq.quantize(tape, z_e, {.step = t});
      const auto dec_params = model.decoder.register_parameters(tape);
      const ad::Var y_hat = model.decoder.forward(tape, q.z_q, dec_params);
      ad::Var loss = ad::mse(tape, y_hat, tape.constant(target));
      tasks.push_back(tape.value(loss)[0]);
      if (config.smoothness_gamma > 0.0)
        loss = ad::add(tape, loss, smoothness_loss(tape, model.decoder, dec_params, z_e, q.z_q, config.smoothness_gamma));
      check_finite(tape.value(loss)[0], "task loss");
      tape.backward(loss);
      sgd_step(model.encoder.parameters(), grads_of(tape, enc.params), ctx.encoder_state, config.optimizer.lr * f);
      sgd_step(model.decoder.parameters(), grads_of(tape, dec_params), ctx.decoder_state, config.optimizer.lr * f);
      selected.insert(selected.end(), q.indices.begin(), q.indices.end());
      distances.insert(distances.end(), q.distances.begin(), q.distances.end());
      collect_groups(tape.value(q.z_e_groups));
    };
    auto inner_on = [&](const Tensor& z_e) {
      commits.push_back(inner_step(vq, z_e, config.optimizer, ctx.codebook_state, f, t, selected, distances));
      collect_groups(vq.group_view(z_e));
    };

    std::size_t next_outer = 0;
    if (config.fused) {
      // One encoder pass over the inner and first outer sub-batch.
      ad::Tape tape;
      const EncodePass enc = encode(tape, model, x.rows_subset(0, 2 * sub));
      inner_on(tape.value(enc.z_e).rows_subset(0, sub));
      outer_on(tape, enc, ad::slice_rows(tape, enc.z_e, sub, sub), x.rows_subset(sub, sub));
      next_outer = 1;
    } else {
      for (std::size_t j = 0; j < config.inner_k; ++j) inner_on(encode_values(model, x.rows_subset(j * sub, sub)));
    }
    for (std::size_t j = next_outer; j < config.outer_k; ++j) {
      const Tensor xb = x.rows_subset((config.inner_k + j) * sub, sub);
      ad::Tape tape;
      const EncodePass enc = encode(tape, model, xb);
      outer_on(tape, enc, enc.z_e, xb);
    }

    rec.task_loss = mean_of(tasks);
    rec.commit_loss = mean_of(commits);
    rec.perplexity = perplexity_of_indices(selected, vq.codebook().size());
    rec.quant_error = mean_of(distances);
    rec.divergence_cq = divergence_to_selected(effective, selected);
    ctx.end_of_step(t, selected, z_groups);
    rec.active_ratio = ctx.window.active_ratio();
    ctx.result.metrics.push_back(rec);
  }
  return std::move(ctx.result);
}

namespace {

Assignment evaluate_assignment(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data) {
  const Tensor groups = vq.group_view(encode_values(model, data));
  return nearest_assign(groups, vq.codebook().effective_codes(), vq.config().distance, vq.config().chunk_rows);
}

}  // namespace

double evaluate_perplexity(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data) {
  return perplexity_of_indices(evaluate_assignment(model, vq, data).indices, vq.codebook().size());
}

double evaluate_active_ratio(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data) {
  std::vector<std::uint64_t> counts(vq.codebook().size(), 0);
  for (std::size_t k : evaluate_assignment(model, vq, data).indices) ++counts[k];
  return active_ratio(counts);
}

double evaluate_task_loss(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& data) {
  VectorQuantizer local = vq;
  local.config().sampling = SamplingMode::deterministic;
  ad::Tape tape;
  const EncodePass enc = encode(tape, model, data);
  const VQOutput q = local.quantize(tape, enc.z_e, {.record_usage = false});
  const auto dec_params = model.decoder.register_parameters(tape);
  return tape.value(ad::mse(tape, model.decoder.forward(tape, q.z_q, dec_params), tape.constant(data)))[0];
}

}  // namespace vqkit
