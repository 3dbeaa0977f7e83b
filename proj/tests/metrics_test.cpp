#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "test_support.hpp"
#include "vqkit/errors.hpp"
#include "vqkit/metrics.hpp"
#include "vqkit/nn.hpp"
#include "vqkit/training.hpp"
#include "vqkit/vq_layer.hpp"

using namespace vqkit;
using vqkit::testing::random_tensor;

namespace {

double brute_divergence(const Tensor& p, const Tensor& c) {
  double total = 0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double best = 1e300;
    for (std::size_t j = 0; j < c.rows(); ++j) best = std::min(best, half_squared_distance(p.row(i), c.row(j)));
    total += best;
  }
  return total / double(p.rows());
}

VQConfig config_for(std::size_t m) {
  VQConfig c;
  c.num_codes = m;
  return c;
}

}  // namespace

TEST(Perplexity, UniformIsM) {
  for (std::size_t m : {1u, 2u, 7u, 64u, 1000u}) {
    const std::vector<double> counts(m, 3.0);
    EXPECT_NEAR(perplexity(counts), double(m), 1e-9);
  }
}

TEST(Perplexity, SingleCodeIsOne) {
  EXPECT_EQ(perplexity(std::vector<double>{0.0, 5.0, 0.0}), 1.0);
}

TEST(Perplexity, OneOneTwo) {
  EXPECT_NEAR(perplexity(std::vector<double>{1.0, 1.0, 2.0}), std::pow(2.0, 1.5), 1e-12);
}

TEST(Perplexity, BoundedByNonzeroCount) {
  Rng rng(1);
  for (int c = 0; c < 1000; ++c) {
    std::vector<double> counts(1 + rng() % 50);
    std::size_t nonzero = 0;
    for (double& v : counts) {
      v = (rng() % 3 == 0) ? 0.0 : double(rng() % 100);
      nonzero += v > 0;
    }
    if (nonzero == 0) counts[0] = 1.0, nonzero = 1;
    const double p = perplexity(counts);
    EXPECT_GE(p, 1.0);
    EXPECT_LE(p, double(nonzero));
  }
}

TEST(Perplexity, ZeroOrNegativeCountsRejected) {
  EXPECT_THROW(perplexity(std::vector<double>{0.0, 0.0}), ContractViolation);
  EXPECT_THROW(perplexity(std::vector<double>{1.0, -1.0}), ContractViolation);
  const std::vector<std::size_t> idx = {0, 1, 1, 3};
  EXPECT_NEAR(perplexity_of_indices(idx, 4), perplexity(std::vector<double>{1, 2, 0, 1}), 1e-15);
  EXPECT_THROW(perplexity_of_indices(idx, 3), ContractViolation);
}

TEST(Divergence, SupersetIsZero) {
  Rng rng(2);
  const Tensor p = random_tensor(rng, 10, 3);
  EXPECT_EQ(divergence(p, vstack(random_tensor(rng, 4, 3), p)), 0.0);
}

TEST(Divergence, SingleCodeAtMeanIsHalfVariance) {
  Rng rng(3);
  const Tensor p = random_tensor(rng, 50, 4);
  const Tensor var = column_variance(p);
  double half_var = 0;
  for (double v : var.values()) half_var += 0.5 * v;
  EXPECT_NEAR(divergence(p, column_mean(p)), half_var, 1e-12);
}

TEST(Divergence, MatchesBruteForceAndAddingCodesHelps) {
  Rng rng(4);
  for (int c = 0; c < 100; ++c) {
    const Tensor p = random_tensor(rng, 1 + rng() % 30, 3);
    const Tensor cs = random_tensor(rng, 1 + rng() % 10, 3);
    EXPECT_NEAR(divergence(p, cs), brute_divergence(p, cs), 1e-12);
    EXPECT_LE(divergence(p, vstack(cs, random_tensor(rng, 3, 3))), divergence(p, cs));
  }
  EXPECT_THROW(divergence(Tensor(0, 3), Tensor(1, 3)), ContractViolation);
}

TEST(GradientGap, ZeroQuantizationErrorGivesZeroGap) {
  Rng rng(5);
  Autoencoder model = Autoencoder::make_default(7, 6, 8, 2);
  const Tensor x = random_tensor(rng, 5, 6);
  // The codebook is exactly this batch's embeddings.
  VectorQuantizer vq(config_for(5), Codebook(encode_values(model, x)), 1);
  EXPECT_EQ(gradient_gap(model, vq, x, x, 1), 0.0);
}

TEST(GradientGap, LinearIdentityDecoderClosedForm) {
  Rng rng(6);
  for (int c = 0; c < 10; ++c) {
    const std::size_t n = 6, in = 4, d = 3;
    Autoencoder model;
    model.encoder = Mlp({DenseLayer{random_tensor(rng, in, d), random_tensor(rng, 1, d)}}, Activation::identity);
    const Tensor x = random_tensor(rng, n, in);
    const Tensor y = random_tensor(rng, n, d);
    const Tensor codes = random_tensor(rng, 5, d);
    VectorQuantizer vq(config_for(5), Codebook(codes), 1);
    const Tensor ze = encode_values(model, x);
    const NearestResult nr = nearest_code(ze, Codebook(codes), DistanceKind::euclidean);
    // g - g_hat at z_e is (z_e - z_q) / n; chain through W and b.
    double gap = 0;
    for (std::size_t a = 0; a < in; ++a)
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += x(i, a) * (ze(i, j) - nr.z_q(i, j)) / double(n);
        gap += s * s;
      }
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += (ze(i, j) - nr.z_q(i, j)) / double(n);
      gap += s * s;
    }
    EXPECT_NEAR(gradient_gap(model, vq, x, y, 1), gap, 1e-9);
  }
}

TEST(GradientGap, NonnegativeAndLeavesQuantizerUntouched) {
  Rng rng(7);
  for (int c = 0; c < 20; ++c) {
    Autoencoder model = Autoencoder::make_default(100 + c, 6, 8, 4);
    VectorQuantizer vq(config_for(8), Codebook(random_tensor(rng, 8, 4)), 1);
    const Codebook before = vq.codebook();
    EXPECT_GE(gradient_gap(model, vq, random_tensor(rng, 10, 6), random_tensor(rng, 10, 6), 3), 0.0);
    EXPECT_TRUE(vq.codebook() == before);
  }
}

TEST(ActivationProbability, KZeroIsOne) {
  EXPECT_EQ(activation_probability(4, 4, 2, 100, 0, 1, 0).binomial, 1.0);
  EXPECT_EQ(activation_probability(1, 1, 1, 1000000, 0, 1, 0).binomial, 1.0);
}

TEST(ActivationProbability, LinearDoublesWithGroups) {
  const auto a = activation_probability(8, 8, 2, 4096, 1, 1, 1);
  const auto b = activation_probability(8, 8, 2, 4096, 1, 2, 1);
  EXPECT_DOUBLE_EQ(b.linear_unclipped, 2.0 * a.linear_unclipped);
  EXPECT_DOUBLE_EQ(b.linear, 2.0 * a.linear);
  EXPECT_DOUBLE_EQ(a.trials, 64.0);
  EXPECT_EQ(activation_probability(32, 32, 4, 16, 0, 1, 1).linear, 1.0);
}

TEST(ActivationProbability, BinomialSpecValue) {
  const auto p = activation_probability(32, 32, 1, 1024, 0, 1, 1);
  EXPECT_NEAR(p.binomial, 1.0 - std::pow(1.0 - 1.0 / 1024.0, 1024.0), 1e-12);
  EXPECT_NEAR(p.binomial, 0.6323, 1e-4);
}

TEST(ActivationProbability, MatchesDirectTailForSmallN) {
  for (std::uint64_t k = 0; k <= 6; ++k) {
    const std::uint64_t n = 12, m = 5;
    double tail = 1.0;
    for (std::uint64_t j = 0; j < k; ++j)
      tail -= std::tgamma(n + 1.0) / (std::tgamma(j + 1.0) * std::tgamma(n - j + 1.0)) * std::pow(1.0 / m, double(j)) *
              std::pow(1.0 - 1.0 / m, double(n - j));
    EXPECT_NEAR(activation_probability(3, 2, 2, m, 0, 1, k).binomial, tail, 1e-12) << k;
  }
}

TEST(ActivationProbability, Monotonicity) {
  const auto p = [](std::uint64_t h, std::uint64_t w, std::uint64_t b, std::uint64_t m, std::uint64_t pool,
                    std::uint64_t g, std::uint64_t k) { return activation_probability(h, w, b, m, pool, g, k).binomial; };
  const double base = p(8, 8, 2, 512, 1, 2, 2);
  EXPECT_GE(p(16, 8, 2, 512, 1, 2, 2), base);
  EXPECT_GE(p(8, 16, 2, 512, 1, 2, 2), base);
  EXPECT_GE(p(8, 8, 4, 512, 1, 2, 2), base);
  EXPECT_GE(p(8, 8, 2, 512, 1, 4, 2), base);
  EXPECT_LE(p(8, 8, 2, 1024, 1, 2, 2), base);
  EXPECT_LE(p(8, 8, 2, 512, 2, 2, 2), base);
  EXPECT_LE(p(8, 8, 2, 512, 1, 2, 3), base);
}

TEST(ActivationProbability, LargeNAndEdgeCases) {
  const auto big = activation_probability(1024, 1024, 8, 1 << 20, 0, 1, 3);
  EXPECT_TRUE(std::isfinite(big.binomial));
  EXPECT_GT(big.binomial, 0.9);
  EXPECT_EQ(activation_probability(2, 2, 1, 8, 0, 1, 5).binomial, 0.0);  // k > N
  EXPECT_EQ(activation_probability(2, 2, 1, 1, 0, 1, 4).binomial, 1.0);  // m = 1
  EXPECT_THROW(activation_probability(3, 3, 1, 8, 1, 1, 1), ContractViolation);
  EXPECT_THROW(activation_probability(2, 2, 1, 0, 0, 1, 1), ContractViolation);
}

TEST(ActiveRatio, Counting) {
  EXPECT_EQ(active_ratio(std::vector<std::uint64_t>{1, 2, 3}), 1.0);
  EXPECT_EQ(active_ratio(std::vector<std::uint64_t>{0, 0, 0, 0}), 0.0);
  EXPECT_EQ(active_ratio(std::vector<std::uint64_t>{0, 4, 0, 1, 0, 0, 9, 0}), 0.375);
}

TEST(ActiveRatio, WindowForgetsOldSteps) {
  UsageWindow w(4, 2);
  w.push(std::vector<std::size_t>{0, 1});
  w.push(std::vector<std::size_t>{2});
  EXPECT_EQ(w.active_ratio(), 0.75);
  w.push(std::vector<std::size_t>{2});
  EXPECT_EQ(w.active_ratio(), 0.25);
  EXPECT_THROW(UsageWindow(4, 0), ContractViolation);
}

TEST(MetricsCsv, FixedHeaderAndExactRoundTrip) {
  std::vector<MetricsRecord> rows;
  Rng rng(8);
  for (int i = 1; i <= 5; ++i)
    rows.push_back({i, standard_normal(rng), 1.0 / 3.0, 2.5, 0.125, 1e-300, 0.0, 12345.678901234567});
  std::ostringstream os;
  write_metrics_csv(os, rows);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsCsvHeader);
  const auto dir = vqkit::testing::scratch_dir("metrics_csv");
  write_metrics_csv(dir / "m.csv", rows);
  EXPECT_EQ(vqkit::testing::read_file(dir / "m.csv"), text);
  const auto back = read_metrics_csv(dir / "m.csv");
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].step, rows[i].step);
    EXPECT_EQ(back[i].task_loss, rows[i].task_loss);
    EXPECT_EQ(back[i].commit_loss, rows[i].commit_loss);
    EXPECT_EQ(back[i].quant_error, rows[i].quant_error);
    EXPECT_EQ(back[i].divergence_cq, rows[i].divergence_cq);
  }
  EXPECT_EQ(format_double(0.1), "0.10000000000000001");
}

TEST(MetricsCsv, MalformedFilesRejected) {
  const auto dir = vqkit::testing::scratch_dir("metrics_bad");
  {
    std::ofstream(dir / "h.csv") << "step,loss\n1,2\n";
    std::ofstream(dir / "n.csv") << kMetricsCsvHeader << "\n1,2,3,4,5,6,7,x\n";
    std::ofstream(dir / "c.csv") << kMetricsCsvHeader << "\n1,2,3\n";
  }
  EXPECT_THROW(read_metrics_csv(dir / "h.csv"), ContractViolation);
  EXPECT_THROW(read_metrics_csv(dir / "n.csv"), ContractViolation);
  EXPECT_THROW(read_metrics_csv(dir / "c.csv"), ContractViolation);
  EXPECT_THROW(read_metrics_csv(dir / "missing.csv"), ContractViolation);
}
