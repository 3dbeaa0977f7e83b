#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "vqkit/rng.hpp"
#include "vqkit/tensor.hpp"

namespace vqkit {

enum class InitKind { normal_kaiming, uniform, data_subset, kmeans };
enum class KMeansSeeding { plusplus, random_rows };

std::string_view to_string(InitKind kind);
InitKind parse_init_kind(std::string_view name);

struct InitMethod {
  InitKind kind = InitKind::normal_kaiming;
  double fan = 0.0;  // 0 means "use d"
  double low = -1.0;
  double high = 1.0;
  std::size_t iters = 50;
  KMeansSeeding seeding = KMeansSeeding::plusplus;
};

inline constexpr double kLloydTolerance = 1e-9;

/// m x d codes. `sample` may be null for the data-free methods.
Tensor init_codebook(const InitMethod& method, std::size_t m, std::size_t d, const Tensor* sample,
                     std::uint64_t seed);

struct LloydResult {
  Tensor centers;
  std::vector<std::size_t> assignment;  // against the input centers
  double inertia = 0.0;                 // mean min squared distance to the output centers
  std::size_t reseeded = 0;
  double max_shift = 0.0;
};

LloydResult lloyd_step(const Tensor& centers, const Tensor& sample);

/// Mean over rows of min_j ||x_i - c_j||^2 (no 1/2 factor, the usual k-means objective).
double kmeans_inertia(const Tensor& centers, const Tensor& sample);

Tensor kmeans_plus_plus(const Tensor& sample, std::size_t m, Rng& rng);
Tensor random_rows(const Tensor& sample, std::size_t m, Rng& rng);

struct KMeansResult {
  Tensor centers;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

/// Lloyd iterations from `centers` until max center shift < kLloydTolerance or max_iters.
KMeansResult kmeans(Tensor centers, const Tensor& sample, std::size_t max_iters);

}  // namespace vqkit
