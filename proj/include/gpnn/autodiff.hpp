#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gpnn/graph.hpp"
#include "gpnn/sampler.hpp"

namespace gpnn {

using Shape = std::vector<Index>;
using Rng = std::mt19937_64;

std::string to_string(const Shape& s);
Index shape_size(const Shape& s);

/// Dense row-major tensor of rank 0..3.
///
/// Leading axes fold into rows for matrix views: a B×L×d tensor is seen as
/// a (B·L)×d matrix by `matrix()`.
struct Tensor {
  Shape shape;
  Eigen::VectorXd data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(Eigen::VectorXd::Zero(shape_size(shape))) {}
  Tensor(Shape s, Eigen::VectorXd d);

  static Tensor scalar(double x) { return Tensor({}, Eigen::VectorXd::Constant(1, x)); }
  static Tensor from_matrix(const RowMatrix& m);
  static Tensor constant(Shape s, double x);

  int rank() const { return static_cast<int>(shape.size()); }
  Index size() const { return data.size(); }
  Index dim(int axis) const { return shape[static_cast<std::size_t>(axis)]; }
  Index cols() const { return shape.empty() ? 1 : shape.back(); }
  Index rows() const { return cols() == 0 ? 0 : size() / cols(); }

  Eigen::Map<RowMatrix> matrix() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const RowMatrix> matrix() const { return {data.data(), rows(), cols()}; }

  double item() const;
  bool all_finite() const { return data.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first touched by backward
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool has_grad() const {
    return grad.shape == value.shape && grad.data.size() == value.data.size();
  }
  void ensure_grad();
};

}  // namespace detail

/// Handle to a node of the dynamically built computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const { return node_->value.item(); }
  const char* op() const { return node_->op; }

  /// Gradient buffer; zeros of the value's shape when never written.
  const Tensor& grad() const;
  Tensor& mutable_grad();
  void zero_grad();

  explicit operator bool() const { return static_cast<bool>(node_); }
  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Leaf that accumulates gradients.
Var parameter(Tensor t);
/// Leaf without gradient.
Var constant(Tensor t);

/// While alive, kernels on this thread record no backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Topologically ordered list of the primitive applications that produced
/// a scalar loss. Every node appears after all of its inputs.
class Tape {
 public:
  explicit Tape(const Var& loss);

  std::size_t size() const { return order_.size(); }
  std::span<detail::Node* const> order() const { return order_; }

  /// Accumulates d(loss)/d(leaf) into every gradient-requiring leaf.
  /// A second call on the same loss throws StateError.
  void backward();

 private:
  Var loss_;
  std::vector<detail::Node*> order_;
};

inline void backward(const Var& loss) { Tape(loss).backward(); }

/// Records a compact fingerprint of the discrete choices (relu signs,
/// pooling winners, pointer selections) made by kernels on this thread.
/// Used by the finite-difference checker to skip perturbations that
/// cross a kink.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  const std::vector<std::uint64_t>& fingerprint() const { return trace_; }

 private:
  std::vector<std::uint64_t> trace_;
  std::vector<std::uint64_t>* previous_;
};

/// Appends to the active BranchTrace, if any.
void trace_branch(std::span<const Index> choices);
bool branch_tracing();

// -----------------------------------------------------------------------------
// Kernels
// -----------------------------------------------------------------------------

/// (..., k) x (k, n) -> (..., n)
Var matmul(const Var& a, const Var& b);
/// Constant sparse (R x N) times dense (N x d).
Var spmm(const SparseMatrix& s, const Var& x);
/// `b`'s shape must be a suffix of `a`'s; b broadcasts over leading axes.
Var add(const Var& a, const Var& b);
/// (B, L, h) + (B, h): b broadcasts over the position axis.
Var add_positions(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var tanh(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var sum(const Var& a);
Var reshape(const Var& a, Shape shape);

Var concat_last_axis(std::span<const Var> parts);
inline Var concat_last_axis(std::initializer_list<Var> parts) {
  return concat_last_axis(std::span<const Var>(parts.begin(), parts.size()));
}
Var slice_last_axis(const Var& a, Index start, Index length);

/// (R, d) table, n indices -> (n, d). Repeated indices accumulate gradient.
Var gather_rows(const Var& table, std::span<const Index> indices);

/// Softmax over the last axis of (B, L) scores restricted to `mask`.
/// Masked entries are exactly 0. A row without any true entry throws.
Var masked_softmax(const Var& scores, const MaskMatrix& mask);
/// Zeroes masked positions of a (B, L, d) tensor.
Var mask_positions(const Var& a, const MaskMatrix& mask);
/// Selects position `pos[b]` of row b: (B, L) -> (B), (B, L, d) -> (B, d).
/// A negative position yields zeros.
Var pick_positions(const Var& a, std::span<const Index> pos);
/// (B, d) rows scaled by (B) factors.
Var scale_rows(const Var& a, const Var& s);
/// sum_j p[b, j] * x[b, j, :]
Var weighted_sum_positions(const Var& p, const Var& x);
/// m tensors of shape (B, d) -> (B, m, d).
Var stack_positions(std::span<const Var> parts);
/// (B, L, d) -> (B, d) at position t.
Var slice_position(const Var& a, Index t);

/// "Same" 1-D convolution over positions: x (B, L, d), filters (w, d, d'),
/// bias (d') -> (B, L, d'). Out-of-range taps read zeros.
Var conv1d(const Var& x, const Var& filters, const Var& bias);
Var max_pool_positions(const Var& a, const MaskMatrix& mask);
Var mean_pool_positions(const Var& a, const MaskMatrix& mask);

/// Inverted dropout; identity when `rate == 0` or `!training`.
Var dropout(const Var& a, double rate, bool training, Rng& rng);

/// Mean negative log-likelihood of `labels` under softmax(logits) over
/// the rows listed in `subset`.
Var cross_entropy(const Var& logits, std::span<const int> labels, std::span<const Index> subset);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace gpnn
