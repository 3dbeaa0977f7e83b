#include "vqkit/vq_layer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vqkit/errors.hpp"

namespace vqkit {
namespace {

template <typename E>
E parse_enum(std::string_view s, std::initializer_list<E> values, const char* what) {
  for (E v : values)
    if (to_string(v) == s) return v;
  throw ContractViolation(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr double kSigmaFloor = 1e-8;

}  // namespace

std::string_view to_string(SamplingMode v) {
  return v == SamplingMode::deterministic ? "deterministic" : "stochastic";
}
std::string_view to_string(AffineMode v) {
  switch (v) {
    case AffineMode::off:
      return "off";
    case AffineMode::learnable:
      return "learnable";
    case AffineMode::ema:
      return "ema";
  }
  return "off";
}
std::string_view to_string(ReplacementMode v) { return v == ReplacementMode::off ? "off" : "lru"; }
std::string_view to_string(ResetMode v) { return v == ResetMode::off ? "off" : "kmeans_every"; }
std::string_view to_string(CodebookUpdate v) { return v == CodebookUpdate::gradient ? "gradient" : "ema"; }
std::string_view to_string(CommitReduction v) {
  return v == CommitReduction::batch_mean ? "batch_mean" : "per_code_mean";
}

SamplingMode parse_sampling_mode(std::string_view s) {
  return parse_enum(s, {SamplingMode::deterministic, SamplingMode::stochastic}, "sampling mode");
}
AffineMode parse_affine_mode(std::string_view s) {
  return parse_enum(s, {AffineMode::off, AffineMode::learnable, AffineMode::ema}, "affine mode");
}
ReplacementMode parse_replacement_mode(std::string_view s) {
  return parse_enum(s, {ReplacementMode::off, ReplacementMode::lru}, "replacement mode");
}
ResetMode parse_reset_mode(std::string_view s) {
  return parse_enum(s, {ResetMode::off, ResetMode::kmeans_every}, "reset mode");
}
CodebookUpdate parse_codebook_update(std::string_view s) {
  return parse_enum(s, {CodebookUpdate::gradient, CodebookUpdate::ema}, "codebook update");
}
CommitReduction parse_commit_reduction(std::string_view s) {
  return parse_enum(s, {CommitReduction::batch_mean, CommitReduction::per_code_mean},
                    "commit reduction");
}

void VQConfig::validate(std::size_t embedding_dim) const {
  require(num_codes >= 1, "num_codes must be >= 1");
  require(alpha >= 0.0, "alpha must be >= 0");
  require(beta >= 0.0 && beta <= 1.0, "beta must lie in [0, 1]");
  require(nu >= 0.0, "nu must be >= 0");
  require(n_group >= 1 && embedding_dim % n_group == 0, "n_group must divide the embedding dimension");
  require(tau0 > 0.0, "tau0 must be > 0");
  require(tau_decay > 0.0 && tau_decay <= 1.0, "tau_decay must lie in (0, 1]");
  require(affine_lr_scale >= 0.0, "affine_lr_scale must be >= 0");
  require(affine_momentum > 0.0 && affine_momentum <= 1.0, "affine_momentum must lie in (0, 1]");
  require(lifespan >= 1, "lifespan must be >= 1");
  require(reset_every_epochs >= 1, "reset_every_epochs must be >= 1");
  require(reset_iters >= 1, "reset_iters must be >= 1");
  require(ema_decay > 0.0 && ema_decay <= 1.0, "ema_decay must lie in (0, 1]");
  require(chunk_rows >= 1, "chunk_rows must be >= 1");
}

double temperature_at(const VQConfig& config, std::int64_t step) {
  return config.tau0 * std::pow(config.tau_decay, static_cast<double>(std::max<std::int64_t>(step, 0)));
}

ad::Var commitment_distance(ad::Tape& tape, ad::Var a, ad::Var b, CommitReduction reduction,
                            const std::vector<std::size_t>& indices) {
  if (reduction == CommitReduction::batch_mean) return ad::mse(tape, a, b);
  const std::size_t n = tape.value(a).rows();
  require(indices.size() == n, "per_code_mean reduction needs one index per row");
  const std::size_t m = *std::max_element(indices.begin(), indices.end()) + 1;
  std::vector<std::size_t> counts(m, 0);
  for (std::size_t k : indices) ++counts[k];
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) weights[i] = 1.0 / static_cast<double>(counts[indices[i]]);
  return ad::weighted_half_sq(tape, a, b, std::move(weights));
}

ad::Var commitment_loss(ad::Tape& tape, ad::Var z_e, ad::Var z_q, double alpha, double beta,
                        CommitReduction reduction, const std::vector<std::size_t>& indices) {
  require(beta >= 0.0 && beta <= 1.0, "beta must lie in [0, 1]");
  require(tape.value(z_e).same_shape(tape.value(z_q)), "commitment_loss shape mismatch");
  const ad::Var to_encoder = commitment_distance(tape, z_e, ad::stop_gradient(tape, z_q), reduction, indices);
  const ad::Var to_codes = commitment_distance(tape, ad::stop_gradient(tape, z_e), z_q, reduction, indices);
  const ad::Var mixed =
      ad::add(tape, ad::scale(tape, to_encoder, 1.0 - beta), ad::scale(tape, to_codes, beta));
  return ad::scale(tape, mixed, alpha);
}

void ema_update(Codebook& codebook, const Tensor& z_e, const std::vector<std::size_t>& assignments,
                double gamma) {
  require(gamma > 0.0 && gamma <= 1.0, "ema_update: gamma must lie in (0, 1]");
  require(z_e.rows() == assignments.size(), "ema_update: one assignment per row");
  require(z_e.cols() == codebook.dim(), "ema_update: dimension mismatch");
  const std::size_t m = codebook.size();
  const std::size_t d = codebook.dim();
  Tensor sums(m, d);
  std::vector<std::size_t> counts(m, 0);
  for (std::size_t i = 0; i < z_e.rows(); ++i) {
    const std::size_t k = assignments[i];
    require(k < m, "ema_update: assignment out of range");
    ++counts[k];
    for (std::size_t c = 0; c < d; ++c) sums(k, c) += z_e(i, c);
  }
  Tensor& codes = codebook.codes();
  std::vector<double> mean(d);
  for (std::size_t k = 0; k < m; ++k) {
    if (counts[k] == 0) continue;
    for (std::size_t c = 0; c < d; ++c) mean[c] = sums(k, c) / static_cast<double>(counts[k]);
    const std::vector<double> target = codebook.affine_is_identity() ? mean : codebook.to_raw(mean);
    for (std::size_t c = 0; c < d; ++c) codes(k, c) = (1.0 - gamma) * codes(k, c) + gamma * target[c];
  }
}

void affine_update_ema(Codebook& codebook, const Tensor& z_e, const Tensor& z_q, double momentum) {
  require(momentum > 0.0 && momentum <= 1.0, "affine_update_ema: momentum must lie in (0, 1]");
  require(z_e.rows() >= 1 && z_q.rows() >= 1, "affine_update_ema: empty batch");
  require(z_e.cols() == codebook.dim() && z_q.cols() == codebook.dim(),
          "affine_update_ema: dimension mismatch");
  MomentStats& st = codebook.moments();
  const Tensor mu_e = column_mean(z_e), var_e = column_variance(z_e);
  const Tensor mu_q = column_mean(z_q), var_q = column_variance(z_q);
  for (std::size_t c = 0; c < codebook.dim(); ++c) {
    st.mean_e[c] = momentum * mu_e[c] + (1.0 - momentum) * st.mean_e[c];
    st.var_e[c] = momentum * var_e[c] + (1.0 - momentum) * st.var_e[c];
    st.mean_q[c] = momentum * mu_q[c] + (1.0 - momentum) * st.mean_q[c];
    st.var_q[c] = momentum * var_q[c] + (1.0 - momentum) * st.var_q[c];
    const double sigma_e = std::max(std::sqrt(st.var_e[c]), kSigmaFloor);
    const double sigma_q = std::max(std::sqrt(st.var_q[c]), kSigmaFloor);
    const double s = sigma_e / sigma_q;
    codebook.affine_scale()[c] = s;
    codebook.affine_bias()[c] = st.mean_e[c] - s * st.mean_q[c];
  }
}

std::vector<std::size_t> lru_replace(Codebook& codebook, const Tensor& z_e, std::int64_t step,
                                     std::int64_t lifespan, Rng& rng) {
  require(z_e.rows() >= 1, "lru_replace: empty batch");
  require(z_e.cols() == codebook.dim(), "lru_replace: dimension mismatch");
  require(lifespan >= 1, "lru_replace: lifespan must be >= 1");
  std::vector<std::size_t> dead;
  for (std::size_t k = 0; k < codebook.size(); ++k)
    if (codebook.usage().last_used[k] < step - lifespan) dead.push_back(k);
  if (dead.empty()) return dead;

  const std::size_t n = z_e.rows();
  std::vector<std::size_t> source;
  if (n >= dead.size()) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < dead.size(); ++i) std::swap(order[i], order[i + uniform_index(rng, n - i)]);
    source.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(dead.size()));
  } else {
    for (std::size_t i = 0; i < dead.size(); ++i) source.push_back(uniform_index(rng, n));
  }

  for (std::size_t i = 0; i < dead.size(); ++i) {
    const std::size_t k = dead[i];
    auto row = z_e.row(source[i]);
    const std::vector<double> raw =
        codebook.affine_is_identity() ? std::vector<double>(row.begin(), row.end()) : codebook.to_raw(row);
    std::copy(raw.begin(), raw.end(), codebook.codes().row(k).begin());
    codebook.usage().last_used[k] = step;
  }
  return dead;
}

double kmeans_reset(Codebook& codebook, const Tensor& sample, std::size_t iters, Rng& rng) {
  require(sample.rows() >= codebook.size(), "kmeans_reset: sample smaller than the codebook");
  require(sample.cols() == codebook.dim(), "kmeans_reset: dimension mismatch");
  KMeansResult fresh = kmeans(kmeans_plus_plus(sample, codebook.size(), rng), sample, iters);
  KMeansResult warm = kmeans(codebook.effective_codes(), sample, iters);
  const KMeansResult& kept = fresh.inertia < warm.inertia ? fresh : warm;
  Tensor& codes = codebook.codes();
  for (std::size_t k = 0; k < codebook.size(); ++k) {
    auto center = kept.centers.row(k);
    const std::vector<double> raw = codebook.affine_is_identity()
                                        ? std::vector<double>(center.begin(), center.end())
                                        : codebook.to_raw(center);
    std::copy(raw.begin(), raw.end(), codes.row(k).begin());
  }
  return kept.inertia;
}

VectorQuantizer::VectorQuantizer(VQConfig config, Codebook codebook, std::uint64_t seed)
    : config_(std::move(config)),
      codebook_(std::move(codebook)),
      affine_s_(1, codebook_.dim()),
      affine_b_(1, codebook_.dim()),
      rng_(seed) {
  require(config_.num_codes == codebook_.size(), "VQConfig.num_codes does not match the codebook");
  config_.validate(codebook_.dim() * config_.n_group);
}

void VectorQuantizer::sync_affine() {
  const double k = config_.affine_lr_scale;
  for (std::size_t c = 0; c < codebook_.dim(); ++c) {
    codebook_.affine_scale()[c] = 1.0 + affine_s_[c] * k;
    codebook_.affine_bias()[c] = affine_b_[c] * k;
  }
}

Tensor VectorQuantizer::group_view(const Tensor& z_e) const {
  Tensor groups = group_split(z_e, config_.n_group);
  if (config_.distance != DistanceKind::cosine_unit_norm) return groups;
  for (std::size_t r = 0; r < groups.rows(); ++r) {
    auto row = groups.row(r);
    const double norm = std::sqrt(squared_norm(row));
    if (norm == 0.0) throw DegenerateInput("zero-norm embedding under cosine distance");
    for (double& x : row) x /= norm;
  }
  return groups;
}

Assignment VectorQuantizer::assign(const Tensor& z_e_groups, std::int64_t step) {
  const Tensor effective = codebook_.effective_codes();
  if (config_.sampling == SamplingMode::deterministic)
    return nearest_assign(z_e_groups, effective, config_.distance, config_.chunk_rows);
  const double tau = temperature_at(config_, step);
  Assignment out;
  out.indices.resize(z_e_groups.rows());
  out.distances.resize(z_e_groups.rows());
  for (std::size_t i = 0; i < z_e_groups.rows(); ++i) {
    out.indices[i] = sample_code_stochastic(z_e_groups.row(i), effective, config_.distance, tau, rng_);
    out.distances[i] = code_distance(z_e_groups.row(i), effective.row(out.indices[i]), config_.distance);
  }
  return out;
}

VQOutput VectorQuantizer::quantize(ad::Tape& tape, ad::Var z_e, const QuantizeOptions& options) {
  const Tensor& ze = tape.value(z_e);
  const std::size_t n = ze.rows();
  const std::size_t d = ze.cols();
  const std::size_t g = config_.n_group;
  require(d % g == 0 && d / g == codebook_.dim(), "quantize: embedding dimension " + std::to_string(d) +
                                                      " does not match codebook dim x n_group");
  VQOutput out;
  out.codes = tape.parameter(codebook_.codes());
  if (config_.affine == AffineMode::learnable) {
    out.affine_s = tape.parameter(affine_s_);
    out.affine_b = tape.parameter(affine_b_);
  }
  const ad::Var grouped = g == 1 ? z_e : ad::reshape(tape, z_e, n * g, d / g);
  out.z_e_groups = config_.distance == DistanceKind::cosine_unit_norm ? ad::normalize_rows(tape, grouped) : grouped;

  if (options.bypass) {
    out.z_q = z_e;
    out.codes_selected = out.z_e_groups;
    out.commit_loss = tape.constant(Tensor::scalar(0.0));
    return out;
  }

  Assignment a = assign(tape.value(out.z_e_groups), options.step);
  out.indices = std::move(a.indices);
  out.distances = std::move(a.distances);

  ad::Var selected = ad::gather_rows(tape, out.codes, out.indices);
  if (config_.affine == AffineMode::learnable) {
    const ad::Var ones = tape.constant(Tensor(1, codebook_.dim(), 1.0));
    const double k = config_.affine_lr_scale;
    const ad::Var scale_v = ad::add(tape, ones, ad::scale(tape, *out.affine_s, k));
    selected = ad::add(tape, ad::mul(tape, selected, scale_v), ad::scale(tape, *out.affine_b, k));
  } else if (!codebook_.affine_is_identity()) {
    const ad::Var scale_v = tape.constant(Tensor::row_vector(codebook_.affine_scale()));
    const ad::Var bias_v = tape.constant(Tensor::row_vector(codebook_.affine_bias()));
    selected = ad::add(tape, ad::mul(tape, selected, scale_v), bias_v);
  }
  out.codes_selected = selected;

  ad::Var zq_groups = selected;
  if (config_.distance == DistanceKind::cosine_unit_norm) {
    zq_groups = ad::normalize_rows(tape, selected);
  } else if (config_.distance == DistanceKind::cosine_renorm) {
    const ad::Var norms = ad::stop_gradient(tape, ad::row_norm(tape, grouped));
    zq_groups = ad::mul(tape, ad::normalize_rows(tape, selected), norms);
  }

  out.commit_loss = commitment_loss(tape, out.z_e_groups, zq_groups, config_.alpha, config_.beta,
                                    config_.reduction, out.indices);

  ad::Var e_side = z_e;
  ad::Var q_side = zq_groups;
  if (g > 1) {
    q_side = ad::scale(tape, ad::reshape(tape, zq_groups, n, d), 1.0 / std::sqrt(static_cast<double>(g)));
    if (config_.distance == DistanceKind::cosine_unit_norm) e_side = ad::reshape(tape, out.z_e_groups, n, d);
  } else if (config_.distance == DistanceKind::cosine_unit_norm) {
    e_side = out.z_e_groups;
  }
  out.z_q = ad::straight_through(tape, e_side, q_side, config_.nu);

  if (options.record_usage)
    for (std::size_t k : out.indices) codebook_.mark_used(k, options.step);
  return out;
}

}  // namespace vqkit
