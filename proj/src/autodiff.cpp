#include "gpnn/autodiff.hpp"

#include <sstream>
#include <unordered_set>

#include "gpnn/error.hpp"

namespace gpnn {

namespace {
thread_local bool g_no_grad = false;
thread_local std::vector<std::uint64_t>* g_trace = nullptr;
}  // namespace

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape s, Eigen::VectorXd d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape));
  }
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t({m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

Tensor Tensor::constant(Shape s, double x) {
  Tensor t(std::move(s));
  t.data.setConstant(x);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape));
  return data[0];
}

void detail::Node::ensure_grad() {
  if (!has_grad()) grad = Tensor(value.shape);
}

const Tensor& Var::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

Tensor& Var::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Var::zero_grad() {
  node_->ensure_grad();
  node_->grad.data.setZero();
}

Var parameter(Tensor t) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var constant(Tensor t) {
  auto n = std::make_shared<detail::Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }

namespace detail {
bool grad_disabled() { return g_no_grad; }
}  // namespace detail

Tape::Tape(const Var& loss) : loss_(loss) {
  if (!loss) throw StateError("backward on an empty Var");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  // Iterative post-order DFS over gradient-carrying nodes.
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (loss.requires_grad()) stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::backward() {
  detail::Node* root = loss_.node();
  if (root->backward_done) {
    throw StateError("backward already ran on this loss; rebuild the forward pass first");
  }
  root->backward_done = true;
  if (order_.empty()) throw StateError("loss does not depend on any parameter");
  for (detail::Node* n : order_) {
    if (n->backward) {
      n->grad = Tensor(n->value.shape);
    } else {
      n->ensure_grad();
    }
  }
  root->grad.data[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  // Intermediate gradients are no longer needed.
  for (detail::Node* n : order_) {
    if (n->backward && n != root) n->grad = Tensor();
  }
}

BranchTrace::BranchTrace() : previous_(g_trace) { g_trace = &trace_; }
BranchTrace::~BranchTrace() { g_trace = previous_; }

bool branch_tracing() { return g_trace != nullptr; }

void trace_branch(std::span<const Index> choices) {
  if (!g_trace) return;
  std::uint64_t h = 1469598103934665603ull;
  for (Index c : choices) {
    h ^= static_cast<std::uint64_t>(c);
    h *= 1099511628211ull;
  }
  g_trace->push_back(h);
}

}  // namespace gpnn
