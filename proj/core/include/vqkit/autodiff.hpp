#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "vqkit/tensor.hpp"

// Tape-based reverse-mode differentiation over dense matrices. A Tape is built
// for one forward pass, backward() runs once, and the caller reads leaf gradients.
namespace vqkit::ad {

/// Handle to a node on a specific Tape. Only meaningful for the tape that created it.
struct Var {
  std::size_t id = 0;
};

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  tanh,
  relu,
  half_sq_dist,
  sum,
  stop_gradient,
  straight_through,
  gather_rows,
  reshape,
  normalize_rows,
  row_norm,
  slice_rows,
};

// Extra per-node state needed by backward rules.
struct SavedState {
  double scalar = 0.0;
  std::vector<double> weights;
  std::vector<std::size_t> indices;
  std::size_t offset = 0;
};

class Tape {
 public:
  /// Leaf that receives dLoss/dLeaf during backward().
  Var parameter(Tensor value);
  /// Leaf that never receives a gradient.
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return node(v).value; }
  /// Accumulated gradient, or zeros when nothing flowed into the node.
  Tensor grad(Var v) const;
  bool has_grad(Var v) const { return !grads_.empty() && !grads_[v.id].empty(); }

  bool is_parameter(Var v) const { return node(v).parameter; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  OpKind kind(Var v) const { return node(v).kind; }
  std::span<const std::size_t> parents(Var v) const { return node(v).parents; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse pass from a 1x1 node. A second call without clear_gradients() is rejected.
  void backward(Var loss);
  bool backward_done() const noexcept { return backward_done_; }
  void clear_gradients();

  using Saved = SavedState;

  /// Appends a node. Used by the op functions below; parents must already exist.
  Var record(OpKind kind, std::vector<std::size_t> parents, Tensor value, Saved saved = {});

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> parents;
    Tensor value;
    Saved saved;
    bool parameter = false;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  void accumulate(std::size_t id, const Tensor& g);
  void propagate(std::size_t id, const Tensor& g);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;  // empty tensor = no gradient yet
  bool backward_done_ = false;
};

Var matmul(Tape& t, Var a, Var b);
/// b may match a, or be 1 x cols (bias broadcast over rows).
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
/// Elementwise product; b may match a, be 1 x cols, or rows x 1.
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double factor);
Var tanh(Tape& t, Var a);
/// Subgradient at 0 is 0.
Var relu(Tape& t, Var a);
/// Mean over rows of 1/2 ||a_i - b_i||^2.
Var mse(Tape& t, Var a, Var b);
/// sum_i w_i * 1/2 ||a_i - b_i||^2 with one weight per row.
Var weighted_half_sq(Tape& t, Var a, Var b, std::vector<double> row_weights);
Var sum(Tape& t, Var a);
/// Forwards a unchanged and blocks every gradient into it.
Var stop_gradient(Tape& t, Var a);
/// Forward value is z_q exactly; upstream g flows to z_e with factor 1 and to z_q with factor nu.
Var straight_through(Tape& t, Var z_e, Var z_q, double nu);
Var gather_rows(Tape& t, Var source, std::vector<std::size_t> indices);
Var reshape(Tape& t, Var a, std::size_t rows, std::size_t cols);
/// Each row divided by its euclidean norm; a zero row is a DegenerateInput.
Var normalize_rows(Tape& t, Var a);
/// rows x 1 column of row norms.
Var row_norm(Tape& t, Var a);
Var slice_rows(Tape& t, Var a, std::size_t begin, std::size_t count);

/// Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h for every coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& theta, double h = 1e-5);

}  // namespace vqkit::ad
