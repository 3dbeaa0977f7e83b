#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vqkit/rng.hpp"
#include "vqkit/tensor.hpp"

namespace vqkit {

enum class DistanceKind { euclidean, cosine_unit_norm, cosine_renorm };

std::string_view to_string(DistanceKind kind);
DistanceKind parse_distance_kind(std::string_view name);

inline constexpr std::size_t kDefaultChunkRows = 4096;

/// Per-code selection bookkeeping.
struct UsageCounters {
  std::vector<std::int64_t> last_used;  // training step of the most recent selection (or reset)
  std::vector<std::uint64_t> total;     // cumulative selections
};

/// Running moments used by the EMA affine mode. Identity transform at construction.
struct MomentStats {
  std::vector<double> mean_e, var_e, mean_q, var_q;
};

/// m code-vectors of dimension d plus a shared per-dimension affine transform.
/// The effective code i is codes[i] * affine_scale + affine_bias.
class Codebook {
 public:
  explicit Codebook(Tensor codes);

  std::size_t size() const noexcept { return codes_.rows(); }
  std::size_t dim() const noexcept { return codes_.cols(); }

  const Tensor& codes() const noexcept { return codes_; }
  Tensor& codes() noexcept { return codes_; }

  std::vector<double>& affine_scale() noexcept { return affine_scale_; }
  const std::vector<double>& affine_scale() const noexcept { return affine_scale_; }
  std::vector<double>& affine_bias() noexcept { return affine_bias_; }
  const std::vector<double>& affine_bias() const noexcept { return affine_bias_; }
  bool affine_is_identity() const noexcept;

  Tensor effective_codes() const;
  /// Maps an effective-space vector back to raw code coordinates.
  std::vector<double> to_raw(std::span<const double> effective) const;

  UsageCounters& usage() noexcept { return usage_; }
  const UsageCounters& usage() const noexcept { return usage_; }
  MomentStats& moments() noexcept { return moments_; }
  const MomentStats& moments() const noexcept { return moments_; }

  void mark_used(std::size_t code, std::int64_t step);

  friend bool operator==(const Codebook&, const Codebook&);

 private:
  Tensor codes_;
  std::vector<double> affine_scale_;
  std::vector<double> affine_bias_;
  UsageCounters usage_;
  MomentStats moments_;
};

/// Distance between a query and a code under `kind`, including the 1/2 factor.
double code_distance(std::span<const double> query, std::span<const double> code, DistanceKind kind);

/// Straightforward n x m distance matrix over raw rows of `codes`; the reference the chunked
/// routines are checked against.
Tensor pairwise_distances_naive(const Tensor& queries, const Tensor& codes, DistanceKind kind);

/// n x m distances to the codebook's effective codes, computed chunk_size query rows at a time.
Tensor pairwise_distances_chunked(const Tensor& queries, const Codebook& codebook, DistanceKind kind,
                                  std::size_t chunk_size = kDefaultChunkRows);

struct Assignment {
  std::vector<std::size_t> indices;
  std::vector<double> distances;
};

/// Streamed argmin against `codes` (already in effective space); never materialises n x m.
Assignment nearest_assign(const Tensor& queries, const Tensor& codes, DistanceKind kind,
                          std::size_t chunk_size = kDefaultChunkRows);

struct NearestResult {
  std::vector<std::size_t> indices;
  Tensor z_q;
  std::vector<double> distances;
};

/// Lowest-index argmin per query. z_q is the effective code, unit-length under
/// cosine_unit_norm and rescaled to the query's norm under cosine_renorm.
NearestResult nearest_code(const Tensor& queries, const Codebook& codebook, DistanceKind kind,
                           std::size_t chunk_size = kDefaultChunkRows);

/// Draws an index from softmax(-d / tau) over the effective codes.
std::size_t sample_code_stochastic(std::span<const double> query, const Codebook& codebook,
                                   DistanceKind kind, double tau, Rng& rng);
std::size_t sample_code_stochastic(std::span<const double> query, const Tensor& effective_codes,
                                   DistanceKind kind, double tau, Rng& rng);

/// n x d -> (n * n_group) x (d / n_group); sub-vectors are contiguous channel blocks.
Tensor group_split(const Tensor& z, std::size_t n_group);
/// Inverse of group_split followed by the 1 / sqrt(n_group) normalisation.
Tensor group_concat(const Tensor& groups, std::size_t n_group);

// Binary layout: "VQKB", u32 version, u64 m, u64 d, then codes, affine_scale, affine_bias
// as little-endian doubles. Counters and moments go to a JSON sidecar.
inline constexpr std::uint32_t kCodebookFormatVersion = 1;

std::vector<std::uint8_t> encode_codebook_binary(const Codebook& codebook);
Codebook decode_codebook_binary(std::span<const std::uint8_t> bytes);
std::string encode_codebook_sidecar(const Codebook& codebook);
void apply_codebook_sidecar(Codebook& codebook, std::string_view json_text);

void save_codebook(const Codebook& codebook, const std::filesystem::path& binary_path,
                   const std::filesystem::path& sidecar_path);
Codebook load_codebook(const std::filesystem::path& binary_path,
                       const std::filesystem::path& sidecar_path);

}  // namespace vqkit
