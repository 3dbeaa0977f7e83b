#include "vqkit/metrics.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "vqkit/codebook.hpp"
#include "vqkit/errors.hpp"
#include "vqkit/training.hpp"
#include "vqkit/vq_layer.hpp"

namespace vqkit {

double perplexity(std::span<const double> counts) {
  double total = 0.0;
  std::size_t nonzero = 0;
  for (double c : counts) {
    require(c >= 0.0 && std::isfinite(c), "perplexity: counts must be finite and >= 0");
    total += c;
    if (c > 0.0) ++nonzero;
  }
  require(total > 0.0, "perplexity: counts sum to zero");
  double entropy = 0.0;
  for (double c : counts) {
    if (c == 0.0) continue;
    const double p = c / total;
    entropy -= p * std::log2(p);
  }
  return std::clamp(std::exp2(entropy), 1.0, static_cast<double>(nonzero));
}

double perplexity_of_indices(std::span<const std::size_t> indices, std::size_t num_codes) {
  std::vector<double> counts(num_codes, 0.0);
  for (std::size_t k : indices) {
    require(k < num_codes, "perplexity_of_indices: index out of range");
    counts[k] += 1.0;
  }
  return perplexity(counts);
}

double divergence(const Tensor& p, const Tensor& c) {
  require(p.rows() >= 1 && c.rows() >= 1, "divergence needs nonempty sets");
  const Assignment a = nearest_assign(p, c, DistanceKind::euclidean);
  double total = 0.0;
  for (double d : a.distances) total += d;
  return total / static_cast<double>(p.rows());
}

double gradient_gap(const Autoencoder& model, const VectorQuantizer& vq, const Tensor& x, const Tensor& y,
                    std::int64_t step) {
  auto encoder_grads = [&](bool bypass) {
    VectorQuantizer local = vq;
    ad::Tape tape;
    const EncodePass enc = encode(tape, model, x);
    const VQOutput q = local.quantize(tape, enc.z_e, {.step = step, .record_usage = false, .bypass = bypass});
    const auto dec_params = model.decoder.register_parameters(tape);
    const ad::Var y_hat = model.decoder.forward(tape, q.z_q, dec_params);
    tape.backward(ad::mse(tape, y_hat, tape.constant(y)));
    std::vector<Tensor> grads;
    for (ad::Var p : enc.params) grads.push_back(tape.grad(p));
    return grads;
  };
  const auto g = encoder_grads(true);
  const auto g_hat = encoder_grads(false);
  double gap = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) {
      const double diff = g[i][j] - g_hat[i][j];
      gap += diff * diff;
    }
  return gap;
}

ActivationProbability activation_probability(std::uint64_t h, std::uint64_t w, std::uint64_t b,
                                             std::uint64_t m_codes, std::uint64_t n_pool,
                                             std::uint64_t n_groups, std::uint64_t k) {
  require(m_codes >= 1, "activation_probability: m_codes must be >= 1");
  require(n_pool < 63, "activation_probability: n_pool too large");
  const std::uint64_t cells = b * h * w * n_groups;
  const std::uint64_t pool = std::uint64_t{1} << n_pool;
  require(cells % pool == 0, "activation_probability: b*h*w*n_groups is not divisible by 2^n_pool");
  const std::uint64_t n = cells / pool;

  ActivationProbability out;
  out.trials = static_cast<double>(n);
  out.linear_unclipped = out.trials / static_cast<double>(m_codes);
  out.linear = std::min(1.0, out.linear_unclipped);

  if (k == 0) {
    out.binomial = 1.0;
    return out;
  }
  if (k > n) {
    out.binomial = 0.0;
    return out;
  }
  if (m_codes == 1) {
    out.binomial = 1.0;  // every trial hits the only code, and n >= k
    return out;
  }
  const double p = 1.0 / static_cast<double>(m_codes);
  const double log_p = std::log(p);
  const double log_q = std::log1p(-p);
  const double nd = static_cast<double>(n);
  // log of each term C(N,j) p^j q^(N-j) for j < k, then log-sum-exp.
  std::vector<double> terms;
  terms.reserve(k);
  for (std::uint64_t j = 0; j < k; ++j) {
    const double jd = static_cast<double>(j);
    terms.push_back(std::lgamma(nd + 1.0) - std::lgamma(jd + 1.0) - std::lgamma(nd - jd + 1.0) + jd * log_p +
                    (nd - jd) * log_q);
  }
  if (k == 1) terms[0] = nd * log_q;  // exact for the common case
  const double top = *std::max_element(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += std::exp(t - top);
  const double log_lower = top + std::log(s);
  out.binomial = std::clamp(-std::expm1(log_lower), 0.0, 1.0);
  return out;
}

double active_ratio(std::span<const std::uint64_t> window_counts) {
  if (window_counts.empty()) return 0.0;
  const auto used = std::count_if(window_counts.begin(), window_counts.end(), [](std::uint64_t c) { return c > 0; });
  return static_cast<double>(used) / static_cast<double>(window_counts.size());
}

UsageWindow::UsageWindow(std::size_t num_codes, std::size_t window) : window_(window), counts_(num_codes, 0) {
  require(window >= 1, "UsageWindow: window must be >= 1");
}

void UsageWindow::push(std::span<const std::size_t> step_indices) {
  history_.emplace_back(step_indices.begin(), step_indices.end());
  for (std::size_t k : step_indices) ++counts_.at(k);
  if (history_.size() > window_) {
    for (std::size_t k : history_.front()) --counts_[k];
    history_.pop_front();
  }
}

double UsageWindow::active_ratio() const { return vqkit::active_ratio(counts_); }

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_metrics_row(const MetricsRecord& r) {
  return std::to_string(r.step) + "," + format_double(r.task_loss) + "," + format_double(r.commit_loss) + "," +
         format_double(r.perplexity) + "," + format_double(r.active_ratio) + "," + format_double(r.quant_error) +
         "," + format_double(r.grad_gap) + "," + format_double(r.divergence_cq);
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records) {
  out << kMetricsCsvHeader << '\n';
  for (const auto& r : records) out << format_metrics_row(r) << '\n';
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot open " + path.string());
  write_metrics_csv(out, records);
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == kMetricsCsvHeader, "metrics CSV header mismatch in " + path.string());
  std::vector<MetricsRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(cells.size() == 8, "metrics CSV line " + std::to_string(lineno) + " has " +
                                   std::to_string(cells.size()) + " fields");
    try {
      MetricsRecord r;
      r.step = std::stoll(cells[0]);
      r.task_loss = std::stod(cells[1]);
      r.commit_loss = std::stod(cells[2]);
      r.perplexity = std::stod(cells[3]);
      r.active_ratio = std::stod(cells[4]);
      r.quant_error = std::stod(cells[5]);
      r.grad_gap = std::stod(cells[6]);
      r.divergence_cq = std::stod(cells[7]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw ContractViolation("metrics CSV line " + std::to_string(lineno) + " is not numeric");
    }
  }
  return out;
}

}  // namespace vqkit
