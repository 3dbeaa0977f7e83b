#include <cmath>

#include "vqkit/errors.hpp"
#include "vqkit_tools/experiments.hpp"

namespace vqkit::tools {
namespace {

void descend(Tensor& theta, const Tensor& grad, double lr) {
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
}

double distance(const Tensor& a, const Tensor& b) { return std::sqrt(2.0 * half_squared_distance(a.values(), b.values())); }

// Codebook-only commitment step: q moves along alpha * beta * (q - e).
void commit_step(const ToySpec& s, const Tensor& e, Tensor& q) {
  ad::Tape tape;
  const ad::Var ev = tape.constant(e);
  const ad::Var qv = tape.parameter(q);
  tape.backward(commitment_loss(tape, ev, qv, s.alpha, s.beta));
  descend(q, tape.grad(qv), s.lr);
}

}  // namespace

ToyMode parse_toy_mode(const std::string& name) {
  if (name == "no_vq") return ToyMode::no_vq;
  if (name == "joint") return ToyMode::joint;
  if (name == "alternated") return ToyMode::alternated;
  if (name == "lookahead") return ToyMode::lookahead;
  throw ConfigError("unknown toy mode '" + name + "'");
}

std::string to_string(ToyMode mode) {
  switch (mode) {
    case ToyMode::no_vq:
      return "no_vq";
    case ToyMode::joint:
      return "joint";
    case ToyMode::alternated:
      return "alternated";
    case ToyMode::lookahead:
      return "lookahead";
  }
  return "no_vq";
}

ToyResult run_toy_trajectory(ToyMode mode, const ToySpec& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor e(1, 2), q(1, 2), target(1, 2);
  for (double& v : e.values()) v = standard_normal(rng);
  for (double& v : q.values()) v = standard_normal(rng);
  for (double& v : target.values()) v = s.target_scale * standard_normal(rng);

  ToyResult out;
  out.mode = mode;
  out.target_x = target[0];
  out.target_y = target[1];
  auto record = [&](std::int64_t step) {
    const Tensor& shown = mode == ToyMode::no_vq ? e : q;
    out.rows.push_back({step, e[0], e[1], shown[0], shown[1], half_squared_distance(shown.values(), target.values())});
  };
  record(0);

  for (std::int64_t t = 1; t <= s.steps; ++t) {
    const Tensor before = e;
    switch (mode) {
      case ToyMode::no_vq: {
        ad::Tape tape;
        const ad::Var ev = tape.parameter(e);
        tape.backward(ad::mse(tape, ev, tape.constant(target)));
        descend(e, tape.grad(ev), s.lr);
        break;
      }
      case ToyMode::joint: {
        ad::Tape tape;
        const ad::Var ev = tape.parameter(e);
        const ad::Var qv = tape.parameter(q);
        const ad::Var zq = ad::straight_through(tape, ev, qv, 0.0);
        const ad::Var loss =
            ad::add(tape, ad::mse(tape, zq, tape.constant(target)), commitment_loss(tape, ev, qv, s.alpha, s.beta));
        tape.backward(loss);
        descend(e, tape.grad(ev), s.lr);
        descend(q, tape.grad(qv), s.lr);
        break;
      }
      case ToyMode::alternated:
      case ToyMode::lookahead: {
        commit_step(s, e, q);
        ad::Tape tape;
        const ad::Var ev = tape.parameter(e);
        const ad::Var qv = tape.parameter(q);
        const double nu = mode == ToyMode::lookahead ? s.nu : 0.0;
        tape.backward(ad::mse(tape, ad::straight_through(tape, ev, qv, nu), tape.constant(target)));
        descend(e, tape.grad(ev), s.lr);
        if (mode == ToyMode::lookahead) descend(q, tape.grad(qv), s.lr);
        break;
      }
    }
    if (!e.all_finite() || !q.all_finite()) throw NumericFailure("toy trajectory diverged at step " + std::to_string(t));
    out.path_length += distance(e, before);
    record(t);
  }

  out.final_distance = distance(e, target);
  out.steps_to_tolerance = s.steps + 1;
  for (std::int64_t t = s.steps; t >= 0; --t) {
    const ToyRow& r = out.rows[static_cast<std::size_t>(t)];
    if (std::hypot(r.ze_x - target[0], r.ze_y - target[1]) >= s.tolerance) break;
    out.steps_to_tolerance = t;
  }
  return out;
}

}  // namespace vqkit::tools
