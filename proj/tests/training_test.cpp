#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "test_support.hpp"
#include "vqkit/errors.hpp"
#include "vqkit/training.hpp"

using namespace vqkit;
using vqkit::testing::random_tensor;

namespace {

struct Fixture {
  Tensor data;
  Autoencoder model;
  VectorQuantizer vq;
};

Fixture make_setup(std::uint64_t seed, std::size_t rows = 64, std::size_t m = 16) {
  Rng rng(seed);
  Tensor data = random_tensor(rng, rows, 6);
  Autoencoder model = Autoencoder::make_default(seed + 1, 6, 8, 4);
  VQConfig vc;
  vc.num_codes = m;
  VectorQuantizer vq(vc, Codebook(random_tensor(rng, m, 4)), seed + 2);
  return {std::move(data), std::move(model), std::move(vq)};
}

TrainConfig small_config(std::int64_t steps = 10) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 16;
  c.optimizer.lr = 0.05;
  c.optimizer.codebook_lr = 0.05;
  c.measure_grad_gap = false;
  c.seed = 3;
  return c;
}

std::vector<Tensor> snapshot(Autoencoder model) {
  std::vector<Tensor> out;
  for (Tensor* p : model.encoder.parameters()) out.push_back(*p);
  for (Tensor* p : model.decoder.parameters()) out.push_back(*p);
  return out;
}

double max_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, max_abs_diff(a[i], b[i]));
  return d;
}

VQConfig config_for_test(std::size_t m) {
  VQConfig c;
  c.num_codes = m;
  return c;
}

std::string csv_of(const TrainResult& r) {
  std::ostringstream os;
  write_metrics_csv(os, r.metrics);
  return os.str();
}

}  // namespace

TEST(Sgd, PlainGradientDescentWithoutMomentum) {
  Tensor theta(1, 3, std::vector<double>{1.0, -2.0, 0.5});
  const Tensor g(1, 3, std::vector<double>{0.5, 1.0, -4.0});
  OptimizerState state{0.0, 0.0, {}};
  sgd_step({&theta}, {g}, state, 0.1);
  EXPECT_EQ(theta, Tensor(1, 3, std::vector<double>{1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0, 0.5 + 0.1 * 4.0}));
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  Rng rng(1);
  Tensor theta = random_tensor(rng, 3, 4);
  const Tensor before = theta;
  OptimizerState state{0.0, 0.0, {}};
  for (int i = 0; i < 5; ++i) sgd_step({&theta}, {Tensor(3, 4)}, state, 0.3);
  EXPECT_EQ(theta, before);
}

TEST(Sgd, MomentumAndWeightDecayFormula) {
  Tensor theta(1, 1, 2.0);
  OptimizerState state{0.9, 0.1, {}};
  sgd_step({&theta}, {Tensor(1, 1, 1.0)}, state, 0.5);
  // v = 1 + 0.1 * 2 = 1.2; theta = 2 - 0.6
  EXPECT_DOUBLE_EQ(theta[0], 1.4);
  sgd_step({&theta}, {Tensor(1, 1, 1.0)}, state, 0.5);
  // v = 0.9 * 1.2 + 1 + 0.14 = 2.22
  EXPECT_DOUBLE_EQ(theta[0], 1.4 - 0.5 * 2.22);
}

TEST(Sgd, QuadraticBowlConverges) {
  const std::vector<double> h = {1.0, 2.0, 1.5}, a = {3.0, -1.0, 2.0};
  for (double mu : {0.0, 0.5}) {
    Tensor theta(1, 3);
    OptimizerState state{mu, 0.0, {}};
    for (int t = 0; t < 200; ++t) {
      Tensor g(1, 3);
      for (std::size_t i = 0; i < 3; ++i) g[i] = h[i] * (theta[i] - a[i]);
      sgd_step({&theta}, {g}, state, 0.1);
    }
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(theta[i], a[i], 1e-6) << mu;
  }
}

TEST(Sgd, NonFiniteGradientFails) {
  Tensor theta(1, 2);
  OptimizerState state{0.0, 0.0, {}};
  EXPECT_THROW(sgd_step({&theta}, {Tensor(1, 2, std::numeric_limits<double>::quiet_NaN())}, state, 0.1),
               NumericFailure);
  EXPECT_THROW(sgd_step({&theta}, {Tensor(2, 1)}, state, 0.1), ContractViolation);
}

TEST(Sgd, CodebookStateHasNoWeightDecay) {
  OptimizerConfig c;
  c.weight_decay = 0.1;
  c.momentum = 0.9;
  EXPECT_EQ(OptimizerState::for_codebook(c).weight_decay, 0.0);
  EXPECT_EQ(OptimizerState::for_codebook(c).momentum, 0.0);
  EXPECT_EQ(OptimizerState::for_network(c).weight_decay, 0.1);
}

TEST(Schedule, Examples) {
  Schedule cw;
  cw.kind = ScheduleKind::cosine_warmup;
  cw.warmup_steps = 10;
  cw.total_steps = 110;
  EXPECT_EQ(lr_at(cw, 0.2, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(cw, 0.2, 5), 0.1);
  EXPECT_EQ(lr_at(cw, 0.2, 10), 0.2);
  EXPECT_DOUBLE_EQ(lr_at(cw, 0.2, 60), 0.1);
  EXPECT_NEAR(lr_at(cw, 0.2, 110), 0.0, 1e-18);
  EXPECT_NEAR(lr_at(cw, 0.2, 500), 0.0, 1e-18);

  Schedule st;
  st.kind = ScheduleKind::step;
  st.milestones = {5, 8};
  st.factor = 0.5;
  EXPECT_EQ(lr_factor(st, 4), 1.0);
  EXPECT_EQ(lr_factor(st, 5), 0.5);
  EXPECT_EQ(lr_factor(st, 8), 0.25);
  EXPECT_EQ(lr_factor(Schedule{}, 1000), 1.0);

  cw.warmup_steps = 200;
  EXPECT_THROW(cw.validate(), ContractViolation);
  EXPECT_THROW(lr_factor(st, -1), ContractViolation);
  EXPECT_EQ(parse_schedule_kind(to_string(ScheduleKind::cosine_warmup)), ScheduleKind::cosine_warmup);
}

// With alpha = 0 and a codebook holding every current embedding, the quantizer is exactly
// transparent, so each step must match bypass training bit for bit.
TEST(TrainJoint, TransparentQuantizerMatchesBypass) {
  Fixture s = make_setup(10);
  Autoencoder bypass_model = s.model;
  TrainConfig c = small_config(1);
  VQConfig vc;
  vc.num_codes = s.data.rows();
  vc.alpha = 0.0;
  for (std::int64_t t = 0; t < 20; ++t) {
    c.seed = 100 + t;
    c.bypass_quantizer = false;
    VectorQuantizer vq(vc, Codebook(encode_values(s.model, s.data)), 1);
    const TrainResult q = train_joint(s.model, vq, s.data, c);
    c.bypass_quantizer = true;
    VectorQuantizer unused(vc, Codebook(encode_values(bypass_model, s.data)), 1);
    const TrainResult b = train_joint(bypass_model, unused, s.data, c);
    ASSERT_EQ(q.metrics[0].task_loss, b.metrics[0].task_loss) << t;
    EXPECT_EQ(q.metrics[0].quant_error, 0.0);
    ASSERT_EQ(snapshot(s.model), snapshot(bypass_model)) << t;
  }
}

TEST(TrainJoint, SingleStepDecreasesConvexLoss) {
  // Linear encoder and identity decoder with the quantizer bypassed: the loss is a convex
  // quadratic in the weights, so one small gradient step must lower it.
  Rng rng(11);
  for (int c = 0; c < 10; ++c) {
    Autoencoder model;
    model.encoder = Mlp({DenseLayer{random_tensor(rng, 3, 3), random_tensor(rng, 1, 3)}}, Activation::identity);
    const Tensor data = random_tensor(rng, 32, 3);
    VectorQuantizer vq(config_for_test(4), Codebook(random_tensor(rng, 4, 3)), 1);
    TrainConfig cfg = small_config(2);
    cfg.batch_size = 32;
    cfg.optimizer.lr = 0.01;
    cfg.optimizer.momentum = 0.0;
    cfg.bypass_quantizer = true;
    const TrainResult r = train_joint(model, vq, data, cfg);
    EXPECT_LT(r.metrics[1].task_loss, r.metrics[0].task_loss);
  }
}

TEST(TrainJoint, SparseGradientLeavesUnassignedCodesBitIdentical) {
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    Fixture s = make_setup(seed, 32, 64);
    TrainConfig c = small_config(1);
    c.batch_size = 32;  // the whole data set, so the assigned set is known in advance
    const Tensor before = s.vq.codebook().codes();
    const NearestResult nr = nearest_code(encode_values(s.model, s.data), s.vq.codebook(), DistanceKind::euclidean);
    const std::set<std::size_t> used(nr.indices.begin(), nr.indices.end());
    ASSERT_LT(used.size(), 64u);
    train_joint(s.model, s.vq, s.data, c);
    for (std::size_t k = 0; k < 64; ++k) {
      const std::span<const double> a = before.row(k), b = s.vq.codebook().codes().row(k);
      const bool same = std::equal(a.begin(), a.end(), b.begin());
      EXPECT_EQ(same, !used.count(k)) << "code " << k;
    }
  }
}

TEST(TrainJoint, SameSeedGivesIdenticalCsv) {
  Fixture a = make_setup(30), b = make_setup(30);
  TrainConfig c = small_config(15);
  c.measure_grad_gap = true;
  a.vq.config().replacement = b.vq.config().replacement = ReplacementMode::lru;
  a.vq.config().lifespan = b.vq.config().lifespan = 3;
  const std::string ca = csv_of(train_joint(a.model, a.vq, a.data, c));
  EXPECT_EQ(ca, csv_of(train_joint(b.model, b.vq, b.data, c)));
}

TEST(TrainAlternating, InnerStepOnConvergedCodebookIsNoOp) {
  Rng rng(40);
  const Tensor z = random_tensor(rng, 12, 4);
  VQConfig vc;
  vc.num_codes = 12;
  VectorQuantizer vq(vc, Codebook(z), 1);
  OptimizerConfig opt;
  OptimizerState state = OptimizerState::for_codebook(opt);
  std::vector<std::size_t> sel;
  std::vector<double> dist;
  EXPECT_EQ(inner_step(vq, z, opt, state, 1.0, 1, sel, dist), 0.0);
  EXPECT_EQ(vq.codebook().codes(), z);
  EXPECT_EQ(sel.size(), 12u);
}

TEST(TrainAlternating, FusedMatchesUnfused) {
  for (std::uint64_t seed : {50u, 51u, 52u}) {
    Fixture a = make_setup(seed), b = make_setup(seed);
    TrainConfig c = small_config(20);
    c.outer_k = 3;
    c.measure_grad_gap = true;
    const TrainResult ra = train_alternating(a.model, a.vq, a.data, c);
    c.fused = true;
    const TrainResult rb = train_alternating(b.model, b.vq, b.data, c);
    EXPECT_LE(max_diff(snapshot(a.model), snapshot(b.model)), 1e-12);
    EXPECT_LE(max_abs_diff(a.vq.codebook().codes(), b.vq.codebook().codes()), 1e-12);
    for (std::size_t i = 0; i < ra.metrics.size(); ++i) {
      EXPECT_NEAR(ra.metrics[i].task_loss, rb.metrics[i].task_loss, 1e-12);
      EXPECT_NEAR(ra.metrics[i].commit_loss, rb.metrics[i].commit_loss, 1e-12);
    }
  }
}

TEST(TrainAlternating, ConsumesAsManyRowsAsJoint) {
  Fixture a = make_setup(60), b = make_setup(60);
  TrainConfig c = small_config(13);
  c.inner_k = 2;
  c.outer_k = 2;
  const TrainResult joint = train_joint(a.model, a.vq, a.data, c);
  const TrainResult alt = train_alternating(b.model, b.vq, b.data, c);
  EXPECT_EQ(joint.rows_consumed, 13u * 16u);
  EXPECT_EQ(alt.rows_consumed, joint.rows_consumed);
}

TEST(TrainAlternating, InnerStepsLeaveNetworkAndOuterStepsLeaveCodes) {
  Fixture s = make_setup(70);
  const auto net_before = snapshot(s.model);
  TrainConfig c = small_config(10);
  c.optimizer.lr = 0.0;  // only inner (codebook) updates can act
  train_alternating(s.model, s.vq, s.data, c);
  EXPECT_EQ(snapshot(s.model), net_before);

  Fixture t = make_setup(71);
  const Tensor codes_before = t.vq.codebook().codes();
  c.optimizer.lr = 0.05;
  c.optimizer.codebook_lr = 0.0;  // only outer (network) updates can act
  train_alternating(t.model, t.vq, t.data, c);
  EXPECT_EQ(t.vq.codebook().codes(), codes_before);
  EXPECT_NE(snapshot(t.model), snapshot(make_setup(71).model));
}

TEST(TrainAlternating, SparseGradientLawForInnerStep) {
  Fixture s = make_setup(80, 32, 64);
  TrainConfig c = small_config(1);
  c.batch_size = 32;
  const Tensor before = s.vq.codebook().codes();
  const NearestResult nr =
      nearest_code(encode_values(s.model, s.data), s.vq.codebook(), DistanceKind::euclidean);
  train_alternating(s.model, s.vq, s.data, c);
  // Which half of the shuffled batch fed the inner step is not visible here, so only codes used
  // by no row at all are checked.
  const std::set<std::size_t> used(nr.indices.begin(), nr.indices.end());
  for (std::size_t k = 0; k < 64; ++k)
    if (!used.count(k)) {
      const std::span<const double> a = before.row(k), b = s.vq.codebook().codes().row(k);
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << k;
    }
}

TEST(TrainAlternating, IndivisibleBatchRejected) {
  Fixture s = make_setup(90);
  TrainConfig c = small_config(1);
  c.outer_k = 2;  // 16 rows into 3 parts
  EXPECT_THROW(train_alternating(s.model, s.vq, s.data, c), ContractViolation);
  c.outer_k = 1;
  c.inner_k = 3;
  c.fused = true;
  EXPECT_THROW(train_alternating(s.model, s.vq, s.data, c), ContractViolation);
  c.inner_k = 0;
  c.fused = false;
  EXPECT_THROW(train_alternating(s.model, s.vq, s.data, c), ContractViolation);
}

TEST(Smoothness, ZeroWhenEmbeddingsMatch) {
  Rng rng(100);
  const Mlp decoder({4, 8, 6}, Activation::tanh, 1);
  ad::Tape tape;
  const auto params = decoder.register_parameters(tape);
  const ad::Var z = tape.constant(random_tensor(rng, 5, 4));
  EXPECT_EQ(tape.value(smoothness_loss(tape, decoder, params, z, z, 1.0))[0], 0.0);
}

TEST(Smoothness, IdentityDecoderGivesScaledQuantizationMse) {
  Rng rng(101);
  const Mlp identity;
  ad::Tape tape;
  const Tensor ze = random_tensor(rng, 7, 3), zq = random_tensor(rng, 7, 3);
  double mse = 0;
  for (std::size_t i = 0; i < 7; ++i) mse += half_squared_distance(ze.row(i), zq.row(i)) / 7.0;
  const ad::Var loss = smoothness_loss(tape, identity, {}, tape.constant(ze), tape.constant(zq), 2.5);
  EXPECT_NEAR(tape.value(loss)[0], 2.5 * mse, 1e-14);
}

TEST(Smoothness, DecoderGradientMatchesFiniteDifferences) {
  Rng rng(102);
  const Mlp decoder({3, 5, 4}, Activation::tanh, 2);
  const Tensor ze = random_tensor(rng, 6, 3), zq = random_tensor(rng, 6, 3);
  ad::Tape tape;
  const auto params = decoder.register_parameters(tape);
  tape.backward(smoothness_loss(tape, decoder, params, tape.constant(ze), tape.constant(zq), 0.7));
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor numeric = ad::finite_difference_gradient(
        [&](const Tensor& theta) {
          Mlp perturbed = decoder;
          *perturbed.parameters()[p] = theta;
          ad::Tape t;
          const auto ps = perturbed.register_parameters(t);
          return t.value(smoothness_loss(t, perturbed, ps, t.constant(ze), t.constant(zq), 0.7))[0];
        },
        tape.value(params[p]));
    EXPECT_LE(vqkit::testing::relative_error(tape.grad(params[p]), numeric), 1e-6) << p;
  }
}

TEST(Training, SmoothnessTermAndScheduleChangeTheRun) {
  Fixture a = make_setup(110), b = make_setup(110);
  TrainConfig c = small_config(5);
  const auto ra = train_joint(a.model, a.vq, a.data, c);
  c.smoothness_gamma = 1.0;
  const auto rb = train_joint(b.model, b.vq, b.data, c);
  EXPECT_EQ(ra.metrics[0].task_loss, rb.metrics[0].task_loss);
  EXPECT_NE(snapshot(a.model), snapshot(b.model));
}

TEST(Training, ValidatesInputs) {
  Fixture s = make_setup(120);
  TrainConfig c = small_config(1);
  c.batch_size = 65;
  EXPECT_THROW(train_joint(s.model, s.vq, s.data, c), ContractViolation);
  c.batch_size = 16;
  c.optimizer.lr = -1.0;
  EXPECT_THROW(train_joint(s.model, s.vq, s.data, c), ContractViolation);
  c.optimizer.lr = 1e300;
  for (Tensor* p : s.model.encoder.parameters())
    for (double& v : p->values()) v *= 1e200;
  EXPECT_THROW(train_joint(s.model, s.vq, s.data, c), NumericFailure);
}

TEST(BatchStream, ReshufflesWhenExhausted) {
  Tensor data(10, 1);
  for (std::size_t i = 0; i < 10; ++i) data[i] = double(i);
  BatchStream stream(data, 3, 1);
  EXPECT_EQ(stream.steps_per_epoch(), 3u);
  std::multiset<double> epoch;
  for (int b = 0; b < 3; ++b) {
    const Tensor batch = stream.next();
    for (double v : batch.values()) epoch.insert(v);
  }
  EXPECT_EQ(std::set<double>(epoch.begin(), epoch.end()).size(), 9u);
  EXPECT_THROW(BatchStream(data, 11, 1), ContractViolation);
}
