#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "vqkit/autodiff.hpp"
#include "vqkit/codebook.hpp"
#include "vqkit/init.hpp"
#include "vqkit/rng.hpp"

namespace vqkit {

enum class SamplingMode { deterministic, stochastic };
enum class AffineMode { off, learnable, ema };
enum class ReplacementMode { off, lru };
enum class ResetMode { off, kmeans_every };
enum class CodebookUpdate { gradient, ema };
// How the commitment distance is averaged: over all rows, or per code then summed over codes.
enum class CommitReduction { batch_mean, per_code_mean };

std::string_view to_string(SamplingMode v);
std::string_view to_string(AffineMode v);
std::string_view to_string(ReplacementMode v);
std::string_view to_string(ResetMode v);
std::string_view to_string(CodebookUpdate v);
std::string_view to_string(CommitReduction v);
SamplingMode parse_sampling_mode(std::string_view s);
AffineMode parse_affine_mode(std::string_view s);
ReplacementMode parse_replacement_mode(std::string_view s);
ResetMode parse_reset_mode(std::string_view s);
CodebookUpdate parse_codebook_update(std::string_view s);
CommitReduction parse_commit_reduction(std::string_view s);

struct VQConfig {
  std::size_t num_codes = 64;
  double alpha = 5.0;
  double beta = 0.9;
  double nu = 0.0;
  DistanceKind distance = DistanceKind::euclidean;
  std::size_t n_group = 1;

  SamplingMode sampling = SamplingMode::deterministic;
  double tau0 = 1.0;
  double tau_decay = 0.9995;

  AffineMode affine = AffineMode::off;
  double affine_lr_scale = 1.0;
  double affine_momentum = 0.1;  // weight of the new batch in the moment EMA

  ReplacementMode replacement = ReplacementMode::off;
  std::int64_t lifespan = 20;

  ResetMode reset = ResetMode::off;
  std::size_t reset_every_epochs = 1;
  std::size_t reset_iters = 20;

  CodebookUpdate update = CodebookUpdate::gradient;
  double ema_decay = 0.1;  // gamma in c <- (1 - gamma) c + gamma mean

  CommitReduction reduction = CommitReduction::batch_mean;
  InitMethod init;
  std::size_t chunk_rows = kDefaultChunkRows;

  void validate(std::size_t embedding_dim) const;
};

/// tau_t = tau0 * decay^t
double temperature_at(const VQConfig& config, std::int64_t step);

struct QuantizeOptions {
  std::int64_t step = 0;
  bool record_usage = true;
  bool bypass = false;  // z_q := z_e, no commitment loss; used for the gradient-gap reference pass
};

struct VQOutput {
  std::vector<std::size_t> indices;  // one per group row, (n * n_group)
  std::vector<double> distances;
  ad::Var z_q;           // straight-through output, n x d
  ad::Var commit_loss;   // 1 x 1
  ad::Var z_e_groups;    // (n * n_group) x (d / n_group), normalised under cosine_unit_norm
  ad::Var codes_selected;  // effective selected codes at group level
  ad::Var codes;         // raw codebook leaf
  std::optional<ad::Var> affine_s;
  std::optional<ad::Var> affine_b;
};

/// Mean over rows of 1/2 ||a_i - b_i||^2, or per-code-mean weighting when indices are given.
ad::Var commitment_distance(ad::Tape& tape, ad::Var a, ad::Var b, CommitReduction reduction,
                            const std::vector<std::size_t>& indices);

/// alpha [(1 - beta) d(z_e, sg z_q) + beta d(sg z_e, z_q)]
ad::Var commitment_loss(ad::Tape& tape, ad::Var z_e, ad::Var z_q, double alpha, double beta,
                        CommitReduction reduction = CommitReduction::batch_mean,
                        const std::vector<std::size_t>& indices = {});

/// Batch EMA update: each assigned code moves to (1 - gamma) c + gamma mean(rows).
void ema_update(Codebook& codebook, const Tensor& z_e, const std::vector<std::size_t>& assignments,
                double gamma);

/// Updates the moment EMAs and rewrites the codebook's affine transform so that
/// effective codes = (sigma_e / sigma_q) (c - mu_q) + mu_e.
void affine_update_ema(Codebook& codebook, const Tensor& z_e, const Tensor& z_q, double momentum);

/// Overwrites codes unused since before step - lifespan with rows of `z_e`. Returns them ascending.
std::vector<std::size_t> lru_replace(Codebook& codebook, const Tensor& z_e, std::int64_t step,
                                     std::int64_t lifespan, Rng& rng);

/// Refits the codes by k-means on `sample` (effective space), keeping the affine transform.
/// Returns the inertia of the kept fit.
double kmeans_reset(Codebook& codebook, const Tensor& sample, std::size_t iters, Rng& rng);

class VectorQuantizer {
 public:
  VectorQuantizer(VQConfig config, Codebook codebook, std::uint64_t seed);

  const VQConfig& config() const noexcept { return config_; }
  VQConfig& config() noexcept { return config_; }
  Codebook& codebook() noexcept { return codebook_; }
  const Codebook& codebook() const noexcept { return codebook_; }
  Rng& rng() noexcept { return rng_; }

  /// Learnable affine parameters (scale = 1 + k s, bias = k b).
  Tensor& affine_s() noexcept { return affine_s_; }
  Tensor& affine_b() noexcept { return affine_b_; }
  const Tensor& affine_s() const noexcept { return affine_s_; }
  const Tensor& affine_b() const noexcept { return affine_b_; }
  void sync_affine();

  VQOutput quantize(ad::Tape& tape, ad::Var z_e, const QuantizeOptions& options = {});

  /// Assignment without a tape; group-level rows.
  Assignment assign(const Tensor& z_e_groups, std::int64_t step);

  /// z_e as seen by the codebook: grouped, and unit-normalised under cosine_unit_norm.
  Tensor group_view(const Tensor& z_e) const;

 private:
  VQConfig config_;
  Codebook codebook_;
  Tensor affine_s_;
  Tensor affine_b_;
  Rng rng_;
};

}  // namespace vqkit
