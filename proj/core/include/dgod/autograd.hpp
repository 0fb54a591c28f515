// SPDX-License-Identifier: Apache-2.0
//
// Minimal tape-free reverse-mode automatic differentiation over dense
// double-precision arrays. Each Var owns a node in a DAG; backward() walks the
// DAG reachable from a scalar in reverse topological order. Graphs are built
// per image, so the op set is the small collection the reference detector,
// discriminators and loss terms need.

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dgod/types.hpp"

namespace dgod::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::span<double> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;

  static Var constant(Shape shape, std::vector<double> value);
  static Var constant_scalar(double v) { return constant({1}, {v}); }
  static Var parameter(Shape shape, std::vector<double> value);
  static Var zeros(Shape shape) { return constant(shape, std::vector<double>(numel(shape), 0.0)); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  /// Gradient accumulated by the last backward(); zeros if none reached it.
  std::vector<double> grad() const;
  double item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad.clear(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  friend Var make_op(Shape, std::vector<double>, std::vector<Var>, std::function<void(Node&)>);

  std::shared_ptr<Node> node_;
};

/// Builds a non-leaf node. The backward closure is dropped when no parent
/// requires a gradient, so inference graphs carry no closures.
Var make_op(Shape shape, std::vector<double> value, std::vector<Var> parents,
            std::function<void(Node&)> backward);

/// Reverse sweep from a one-element Var. Intermediate gradients are reset
/// first; leaf (parameter) gradients accumulate until zeroed by the caller.
void backward(const Var& root);

// ---- elementwise / reductions -------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var relu(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);
/// [R, C] -> [1, C] column means.
Var mean_rows(const Var& a);
/// [R, C] - [1, C] broadcast over rows.
Var sub_row(const Var& a, const Var& row);
/// Euclidean norm of all entries; gradient taken as zero at the origin.
Var l2norm(const Var& a);
/// out[i] = a[index[i]]; backward scatters.
Var gather(const Var& a, std::span<const int> index, Shape out_shape);
/// Sum of a list of scalars (empty list -> constant 0).
Var add_n(std::span<const Var> terms);

// ---- distributions --------------------------------------------------------
/// Row-wise log-softmax of [R, C] logits.
Var log_softmax(const Var& logits);
/// Row-wise softmax of [R, C] logits.
Var softmax(const Var& logits);
/// -sum_i log_probs[i, target[i]] over rows (targets < 0 are skipped).
Var nll_sum(const Var& log_probs, std::span<const int> targets);

// ---- layers -----------------------------------------------------------------
/// x: [C, H, W]; weight: [O, C*k*k]; bias: [O]. Zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad);
/// x: [R, I]; weight: [O, I]; bias: [O] -> [R, O].
Var linear(const Var& x, const Var& weight, const Var& bias);
/// [C, H, W] -> [1, C].
Var global_avg_pool(const Var& x);
/// Bilinear region pooling. fmap: [C, H, W]; boxes in input-image pixels.
/// Output [R, C * bins * bins], row layout (c, by, bx).
Var roi_align(const Var& fmap, std::span<const BoundingBox> boxes, double spatial_scale,
              int bins, int samples_per_bin);

// ---- gradient routing ------------------------------------------------------
/// Identity forward; backward multiplies the incoming gradient by -lambda.
Var grad_reverse(const Var& x, double lambda);
/// Constant copy: no gradient flows to `x`'s ancestors.
Var detach(const Var& x);

// ---- regression / objectness criteria -------------------------------------
/// sum over rows with weight>0 of weight * sum_j smooth_l1(pred[r,j] - target[r,j]).
Var smooth_l1_sum(const Var& pred, std::span<const double> target,
                  std::span<const double> row_weight);
/// sum_i weight[i] * BCE(sigmoid(logit[i]), target[i]).
Var bce_with_logits_sum(const Var& logits, std::span<const double> target,
                        std::span<const double> weight);

double smooth_l1(double x);

}  // namespace dgod::ag
