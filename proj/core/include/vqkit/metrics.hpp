#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "vqkit/tensor.hpp"

namespace vqkit {

class VectorQuantizer;
struct Autoencoder;

/// 2^H(p) of the normalised counts, clamped to its exact range [1, #nonzero].
double perplexity(std::span<const double> counts);
double perplexity_of_indices(std::span<const std::size_t> indices, std::size_t num_codes);

/// (1/|P|) sum_i min_j 1/2 ||p_i - c_j||^2
double divergence(const Tensor& p, const Tensor& c);

/// sum over encoder parameter tensors of ||g - g_hat||^2, with g from a pass where z_q := z_e and
/// g_hat from the quantized pass. Task loss only; the quantizer is copied so its state is untouched.
double gradient_gap(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& x, const Tensor& y,
                    std::int64_t step);

struct ActivationProbability {
  double trials = 0.0;          // N = b h w n_groups / 2^n_pool
  double binomial = 0.0;        // P(code activates >= k times)
  double linear = 0.0;          // N / m clipped to 1 (k = 1 approximation)
  double linear_unclipped = 0.0;
};

ActivationProbability activation_probability(std::uint64_t h, std::uint64_t w, std::uint64_t b,
                                             std::uint64_t m_codes, std::uint64_t n_pool,
                                             std::uint64_t n_groups, std::uint64_t k);

/// Fraction of codes with at least one selection in the window.
double active_ratio(std::span<const std::uint64_t> window_counts);

/// Per-code selection counts over the last `window` steps.
class UsageWindow {
 public:
  UsageWindow(std::size_t num_codes, std::size_t window);
  void push(std::span<const std::size_t> step_indices);
  double active_ratio() const;
  std::span<const std::uint64_t> counts() const noexcept { return counts_; }

 private:
  std::size_t window_;
  std::vector<std::uint64_t> counts_;
  std::deque<std::vector<std::size_t>> history_;
};

struct MetricsRecord {
  std::int64_t step = 0;
  double task_loss = 0.0;
  double commit_loss = 0.0;
  double perplexity = 1.0;
  double active_ratio = 0.0;
  double quant_error = 0.0;
  double grad_gap = 0.0;
  double divergence_cq = 0.0;
};

inline constexpr const char* kMetricsCsvHeader =
    "step,task_loss,commit_loss,perplexity,active_ratio,quant_error,grad_gap,divergence_cq";

/// %.17g formatting of a double.
std::string format_double(double v);
std::string format_metrics_row(const MetricsRecord& r);
void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

}  // namespace vqkit
