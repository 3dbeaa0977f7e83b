#include "vqkit/autodiff.hpp"

#include <cmath>

#include "vqkit/errors.hpp"

namespace vqkit::ad {
namespace {

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

// out = a^T b
Tensor matmul_at_b(const Tensor& a, const Tensor& b) {
  Tensor out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a(r, i);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += ari * b(r, j);
    }
  return out;
}

// out = a b^T
Tensor matmul_a_bt(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      out(i, j) = s;
    }
  return out;
}

enum class Broadcast { none, row, column };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, bool allow_column, const char* op) {
  if (a.same_shape(b)) return Broadcast::none;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (allow_column && b.cols() == 1 && b.rows() == a.rows()) return Broadcast::column;
  throw ContractViolation(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                          b.shape_string());
}

double broadcast_at(const Tensor& b, Broadcast kind, std::size_t r, std::size_t c) {
  switch (kind) {
    case Broadcast::row:
      return b[c];
    case Broadcast::column:
      return b[r];
    case Broadcast::none:
      break;
  }
  return b(r, c);
}

// Sums a full-shape gradient back down to the broadcast operand's shape.
Tensor reduce_to(const Tensor& g, const Tensor& target, Broadcast kind) {
  if (kind == Broadcast::none) return g;
  Tensor out(target.rows(), target.cols());
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) out[kind == Broadcast::row ? c : r] += g(r, c);
  return out;
}

std::vector<double> norms_of_rows(const Tensor& a) {
  std::vector<double> norms(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    norms[r] = std::sqrt(squared_norm(a.row(r)));
    if (norms[r] == 0.0)
      throw DegenerateInput("row " + std::to_string(r) + " has zero norm");
  }
  return norms;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ContractViolation(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                            b.shape_string());
}

}  // namespace

Var Tape::parameter(Tensor value) {
  Var v = record(OpKind::leaf, {}, std::move(value));
  nodes_[v.id].parameter = true;
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Tape::constant(Tensor value) { return record(OpKind::leaf, {}, std::move(value)); }

const Tape::Node& Tape::node(Var v) const {
  require(v.id < nodes_.size(), "Var " + std::to_string(v.id) + " does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::record(OpKind kind, std::vector<std::size_t> parents, Tensor value, Saved saved) {
  const std::size_t id = nodes_.size();
  for (std::size_t p : parents) require(p < id, "parent ids must precede the child");
  if (!value.all_finite()) throw NumericFailure("non-finite forward value", id);
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.saved = std::move(saved);
  if (kind != OpKind::stop_gradient && kind != OpKind::leaf)
    for (std::size_t p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return Var{id};
}

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (has_grad(v)) return grads_[v.id];
  return Tensor(n.value.rows(), n.value.cols());
}

void Tape::clear_gradients() {
  grads_.clear();
  backward_done_ = false;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& slot = grads_[id];
  if (slot.empty()) {
    slot = g;
    return;
  }
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  require(root.value.rows() == 1 && root.value.cols() == 1,
          "backward needs a 1x1 loss, got " + root.value.shape_string());
  require(!backward_done_, "backward already ran on this tape; call clear_gradients() first");
  backward_done_ = true;
  grads_.assign(nodes_.size(), Tensor{});
  if (!root.requires_grad) return;
  grads_[loss.id] = Tensor::scalar(1.0);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (grads_[id].empty() || !nodes_[id].requires_grad) continue;
    if (!grads_[id].all_finite()) throw NumericFailure("non-finite gradient", id);
    if (nodes_[id].kind == OpKind::leaf) continue;
    propagate(id, grads_[id]);
  }
}

void Tape::propagate(std::size_t id, const Tensor& g) {
  const Node& n = nodes_[id];
  const auto& p = n.parents;
  const auto value_of = [&](std::size_t k) -> const Tensor& { return nodes_[p[k]].value; };
  const auto wants = [&](std::size_t k) { return nodes_[p[k]].requires_grad; };

  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::stop_gradient:
      return;
    case OpKind::matmul:
      if (wants(0)) accumulate(p[0], matmul_a_bt(g, value_of(1)));
      if (wants(1)) accumulate(p[1], matmul_at_b(value_of(0), g));
      return;
    case OpKind::add: {
      const Broadcast kind = broadcast_kind(value_of(0), value_of(1), false, "add");
      if (wants(0)) accumulate(p[0], g);
      if (wants(1)) accumulate(p[1], reduce_to(g, value_of(1), kind));
      return;
    }
    case OpKind::sub: {
      if (wants(0)) accumulate(p[0], g);
      if (wants(1)) {
        Tensor neg = g;
        for (double& x : neg.values()) x = -x;
        accumulate(p[1], neg);
      }
      return;
    }
    case OpKind::mul: {
      const Tensor& a = value_of(0);
      const Tensor& b = value_of(1);
      const Broadcast kind = broadcast_kind(a, b, true, "mul");
      if (wants(0)) {
        Tensor ga(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g(r, c) * broadcast_at(b, kind, r, c);
        accumulate(p[0], ga);
      }
      if (wants(1)) {
        Tensor gb(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) gb[i] = g[i] * a[i];
        accumulate(p[1], reduce_to(gb, b, kind));
      }
      return;
    }
    case OpKind::scale: {
      Tensor ga = g;
      for (double& x : ga.values()) x *= n.saved.scalar;
      accumulate(p[0], ga);
      return;
    }
    case OpKind::tanh: {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - n.value[i] * n.value[i];
      accumulate(p[0], ga);
      return;
    }
    case OpKind::relu: {
      Tensor ga = g;
      const Tensor& x = value_of(0);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (!(x[i] > 0.0)) ga[i] = 0.0;
      accumulate(p[0], ga);
      return;
    }
    case OpKind::half_sq_dist: {
      const Tensor& a = value_of(0);
      const Tensor& b = value_of(1);
      const double upstream = g[0];
      Tensor ga(a.rows(), a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r) {
        const double w = upstream * n.saved.weights[r];
        for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = w * (a(r, c) - b(r, c));
      }
      if (wants(0)) accumulate(p[0], ga);
      if (wants(1)) {
        for (double& x : ga.values()) x = -x;
        accumulate(p[1], ga);
      }
      return;
    }
    case OpKind::sum: {
      const Tensor& a = value_of(0);
      accumulate(p[0], Tensor(a.rows(), a.cols(), g[0]));
      return;
    }
    case OpKind::straight_through: {
      if (wants(0)) accumulate(p[0], g);
      if (wants(1) && n.saved.scalar != 0.0) {
        Tensor gq = g;
        for (double& x : gq.values()) x *= n.saved.scalar;
        accumulate(p[1], gq);
      }
      return;
    }
    case OpKind::gather_rows: {
      const Tensor& src = value_of(0);
      Tensor gs(src.rows(), src.cols());
      for (std::size_t r = 0; r < n.saved.indices.size(); ++r) {
        auto dst = gs.row(n.saved.indices[r]);
        auto in = g.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += in[c];
      }
      accumulate(p[0], gs);
      return;
    }
    case OpKind::reshape: {
      const Tensor& a = value_of(0);
      accumulate(p[0], g.reshaped(a.rows(), a.cols()));
      return;
    }
    case OpKind::normalize_rows: {
      const Tensor& x = value_of(0);
      const Tensor& y = n.value;
      Tensor gx(x.rows(), x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const double norm = n.saved.weights[r];
        double dot = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) dot += y(r, c) * g(r, c);
        for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) = (g(r, c) - y(r, c) * dot) / norm;
      }
      accumulate(p[0], gx);
      return;
    }
    case OpKind::row_norm: {
      const Tensor& x = value_of(0);
      Tensor gx(x.rows(), x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) = g[r] * x(r, c) / n.value[r];
      accumulate(p[0], gx);
      return;
    }
    case OpKind::slice_rows: {
      const Tensor& x = value_of(0);
      Tensor gx(x.rows(), x.cols());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto dst = gx.row(n.saved.offset + r);
        auto in = g.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = in[c];
      }
      accumulate(p[0], gx);
      return;
    }
  }
}

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require(av.cols() == bv.rows(),
          "matmul: inner dimension mismatch " + av.shape_string() + " * " + bv.shape_string());
  return t.record(OpKind::matmul, {a.id, b.id}, matmul_values(av, bv));
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const Broadcast kind = broadcast_kind(av, bv, false, "add");
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += broadcast_at(bv, kind, r, c);
  return t.record(OpKind::add, {a.id, b.id}, std::move(out));
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record(OpKind::sub, {a.id, b.id}, std::move(out));
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const Broadcast kind = broadcast_kind(av, bv, true, "mul");
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= broadcast_at(bv, kind, r, c);
  return t.record(OpKind::mul, {a.id, b.id}, std::move(out));
}

Var scale(Tape& t, Var a, double factor) {
  Tensor out = t.value(a);
  for (double& x : out.values()) x *= factor;
  Tape::Saved saved;
  saved.scalar = factor;
  return t.record(OpKind::scale, {a.id}, std::move(out), std::move(saved));
}

Var tanh(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (double& x : out.values()) x = std::tanh(x);
  return t.record(OpKind::tanh, {a.id}, std::move(out));
}

Var relu(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (double& x : out.values()) x = x > 0.0 ? x : 0.0;
  return t.record(OpKind::relu, {a.id}, std::move(out));
}

Var weighted_half_sq(Tape& t, Var a, Var b, std::vector<double> row_weights) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "weighted_half_sq");
  require(row_weights.size() == av.rows(), "weighted_half_sq: one weight per row required");
  double total = 0.0;
  for (std::size_t r = 0; r < av.rows(); ++r)
    total += row_weights[r] * half_squared_distance(av.row(r), bv.row(r));
  Tape::Saved saved;
  saved.weights = std::move(row_weights);
  return t.record(OpKind::half_sq_dist, {a.id, b.id}, Tensor::scalar(total), std::move(saved));
}

Var mse(Tape& t, Var a, Var b) {
  const std::size_t rows = t.value(a).rows();
  require(rows > 0, "mse of empty tensors");
  return weighted_half_sq(t, a, b, std::vector<double>(rows, 1.0 / static_cast<double>(rows)));
}

Var sum(Tape& t, Var a) {
  double total = 0.0;
  for (double x : t.value(a).values()) total += x;
  return t.record(OpKind::sum, {a.id}, Tensor::scalar(total));
}

Var stop_gradient(Tape& t, Var a) { return t.record(OpKind::stop_gradient, {a.id}, t.value(a)); }

Var straight_through(Tape& t, Var z_e, Var z_q, double nu) {
  require_same_shape(t.value(z_e), t.value(z_q), "straight_through");
  require(nu >= 0.0, "straight_through: nu must be >= 0");
  Tape::Saved saved;
  saved.scalar = nu;
  return t.record(OpKind::straight_through, {z_e.id, z_q.id}, t.value(z_q), std::move(saved));
}

Var gather_rows(Tape& t, Var source, std::vector<std::size_t> indices) {
  const Tensor& src = t.value(source);
  Tensor out(indices.size(), src.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    require(indices[r] < src.rows(), "gather_rows: index out of range");
    auto from = src.row(indices[r]);
    std::copy(from.begin(), from.end(), out.row(r).begin());
  }
  Tape::Saved saved;
  saved.indices = std::move(indices);
  return t.record(OpKind::gather_rows, {source.id}, std::move(out), std::move(saved));
}

Var reshape(Tape& t, Var a, std::size_t rows, std::size_t cols) {
  return t.record(OpKind::reshape, {a.id}, t.value(a).reshaped(rows, cols));
}

Var normalize_rows(Tape& t, Var a) {
  Tensor out = t.value(a);
  std::vector<double> norms = norms_of_rows(out);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& x : out.row(r)) x /= norms[r];
  Tape::Saved saved;
  saved.weights = std::move(norms);
  return t.record(OpKind::normalize_rows, {a.id}, std::move(out), std::move(saved));
}

Var row_norm(Tape& t, Var a) {
  const std::vector<double> norms = norms_of_rows(t.value(a));
  return t.record(OpKind::row_norm, {a.id}, Tensor(norms.size(), 1, norms));
}

Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count) {
  Tape::Saved saved;
  saved.offset = begin;
  return t.record(OpKind::slice_rows, {a.id}, t.value(a).rows_subset(begin, count),
                  std::move(saved));
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& theta, double h) {
  require(h > 0.0, "finite_difference_gradient: step must be positive");
  Tensor grad(theta.rows(), theta.cols());
  Tensor probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double plus = f(probe);
    probe[i] = theta[i] - h;
    const double minus = f(probe);
    probe[i] = theta[i];
    if (!std::isfinite(plus) || !std::isfinite(minus))
      throw NumericFailure("finite_difference_gradient: objective is not finite");
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

}  // namespace vqkit::ad
