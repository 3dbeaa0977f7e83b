#include "vqkit/init.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vqkit/codebook.hpp"
#include "vqkit/errors.hpp"

namespace vqkit {
namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

// Partial Fisher-Yates over row indices; with replacement once the sample is exhausted.
std::vector<std::size_t> distinct_rows(std::size_t n, std::size_t m, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t distinct = std::min(n, m);
  for (std::size_t i = 0; i < distinct; ++i) std::swap(order[i], order[i + uniform_index(rng, n - i)]);
  order.resize(distinct);
  while (order.size() < m) order.push_back(uniform_index(rng, n));
  return order;
}

}  // namespace

std::string_view to_string(InitKind kind) {
  switch (kind) {
    case InitKind::normal_kaiming:
      return "normal_kaiming";
    case InitKind::uniform:
      return "uniform";
    case InitKind::data_subset:
      return "data_subset";
    case InitKind::kmeans:
      return "kmeans";
  }
  return "normal_kaiming";
}

InitKind parse_init_kind(std::string_view name) {
  if (name == "normal_kaiming") return InitKind::normal_kaiming;
  if (name == "uniform") return InitKind::uniform;
  if (name == "data_subset") return InitKind::data_subset;
  if (name == "kmeans") return InitKind::kmeans;
  throw ContractViolation("unknown init method '" + std::string(name) + "'");
}

Tensor random_rows(const Tensor& sample, std::size_t m, Rng& rng) {
  require(sample.rows() >= 1, "random_rows needs a nonempty sample");
  Tensor out(m, sample.cols());
  const auto rows = distinct_rows(sample.rows(), m, rng);
  for (std::size_t j = 0; j < m; ++j) {
    auto src = sample.row(rows[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

Tensor kmeans_plus_plus(const Tensor& sample, std::size_t m, Rng& rng) {
  require(m >= 1 && sample.rows() >= m, "k-means++ needs at least m sample rows");
  const std::size_t n = sample.rows();
  Tensor centers(m, sample.cols());
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = uniform_index(rng, n);
  for (std::size_t j = 0; j < m; ++j) {
    auto src = sample.row(pick);
    std::copy(src.begin(), src.end(), centers.row(j).begin());
    if (j + 1 == m) break;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(sample.row(i), centers.row(j)));
      total += nearest[i];
    }
    if (total <= 0.0) {
      pick = uniform_index(rng, n);
      continue;
    }
    const double target = uniform01(rng) * total;
    double running = 0.0;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      running += nearest[i];
      if (target < running && nearest[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centers;
}

double kmeans_inertia(const Tensor& centers, const Tensor& sample) {
  require(centers.rows() >= 1 && sample.rows() >= 1, "kmeans_inertia needs nonempty inputs");
  const Assignment a = nearest_assign(sample, centers, DistanceKind::euclidean);
  double total = 0.0;
  for (double d : a.distances) total += 2.0 * d;
  return total / static_cast<double>(sample.rows());
}

LloydResult lloyd_step(const Tensor& centers, const Tensor& sample) {
  require(centers.rows() >= 1, "lloyd_step needs at least one center");
  require(sample.rows() >= 1 && sample.cols() == centers.cols(), "lloyd_step sample shape mismatch");
  const std::size_t m = centers.rows();
  const std::size_t d = centers.cols();
  Assignment a = nearest_assign(sample, centers, DistanceKind::euclidean);

  Tensor sums(m, d);
  std::vector<std::size_t> counts(m, 0);
  for (std::size_t i = 0; i < sample.rows(); ++i) {
    const std::size_t k = a.indices[i];
    ++counts[k];
    auto row = sample.row(i);
    for (std::size_t c = 0; c < d; ++c) sums(k, c) += row[c];
  }

  LloydResult out;
  out.centers = centers;
  for (std::size_t k = 0; k < m; ++k) {
    if (counts[k] == 0) continue;
    for (std::size_t c = 0; c < d; ++c)
      out.centers(k, c) = sums(k, c) / static_cast<double>(counts[k]);
  }

  if (std::find(counts.begin(), counts.end(), 0) != counts.end()) {
    std::vector<double> nearest(sample.rows(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < sample.rows(); ++i)
      for (std::size_t k = 0; k < m; ++k)
        if (counts[k] > 0)
          nearest[i] = std::min(nearest[i], squared_distance(sample.row(i), out.centers.row(k)));
    for (std::size_t k = 0; k < m; ++k) {
      if (counts[k] > 0) continue;
      const auto far = static_cast<std::size_t>(
          std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
      auto src = sample.row(far);
      std::copy(src.begin(), src.end(), out.centers.row(k).begin());
      for (std::size_t i = 0; i < sample.rows(); ++i)
        nearest[i] = std::min(nearest[i], squared_distance(sample.row(i), out.centers.row(k)));
      ++out.reseeded;
    }
  }

  for (std::size_t k = 0; k < m; ++k)
    out.max_shift = std::max(out.max_shift, std::sqrt(squared_distance(centers.row(k), out.centers.row(k))));
  out.assignment = std::move(a.indices);
  out.inertia = kmeans_inertia(out.centers, sample);
  return out;
}

KMeansResult kmeans(Tensor centers, const Tensor& sample, std::size_t max_iters) {
  require(max_iters >= 1, "kmeans needs iters >= 1");
  KMeansResult out;
  for (std::size_t it = 0; it < max_iters; ++it) {
    LloydResult step = lloyd_step(centers, sample);
    centers = std::move(step.centers);
    out.iterations = it + 1;
    if (step.max_shift < kLloydTolerance) break;
  }
  out.inertia = kmeans_inertia(centers, sample);
  out.centers = std::move(centers);
  return out;
}

Tensor init_codebook(const InitMethod& method, std::size_t m, std::size_t d, const Tensor* sample,
                     std::uint64_t seed) {
  require(m >= 1 && d >= 1, "init_codebook needs m >= 1 and d >= 1");
  Rng rng(seed);
  switch (method.kind) {
    case InitKind::normal_kaiming: {
      const double fan = method.fan > 0.0 ? method.fan : static_cast<double>(d);
      const double sd = std::sqrt(2.0 / fan);
      Tensor out(m, d);
      for (double& v : out.values()) v = sd * standard_normal(rng);
      return out;
    }
    case InitKind::uniform: {
      require(method.low < method.high, "uniform init needs low < high");
      Tensor out(m, d);
      for (double& v : out.values()) v = uniform(rng, method.low, method.high);
      return out;
    }
    case InitKind::data_subset:
      require(sample != nullptr && sample->rows() >= 1, "data_subset init needs a nonempty sample");
      require(sample->cols() == d, "init sample dimension mismatch");
      return random_rows(*sample, m, rng);
    case InitKind::kmeans: {
      require(sample != nullptr && sample->rows() >= m, "kmeans init needs at least m sample rows");
      require(sample->cols() == d, "init sample dimension mismatch");
      require(method.iters >= 1, "kmeans init needs iters >= 1");
      Tensor seeds = method.seeding == KMeansSeeding::plusplus ? kmeans_plus_plus(*sample, m, rng)
                                                               : random_rows(*sample, m, rng);
      return kmeans(std::move(seeds), *sample, method.iters).centers;
    }
  }
  throw ContractViolation("unknown init method");
}

}  // namespace vqkit
