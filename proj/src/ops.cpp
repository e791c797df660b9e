#include <string_view>
#include <algorithm>
#include <cmath>

#include "gpnn/autodiff.hpp"
#include "gpnn/error.hpp"

namespace gpnn {

namespace detail {
bool grad_disabled();
}  // namespace detail

namespace {

using detail::Node;
using Eigen::VectorXd;
using MapM = Eigen::Map<RowMatrix>;
using CMapM = Eigen::Map<const RowMatrix>;

// Kernel outputs are checked when recorded, so only leaves can carry a
// non-finite value into a kernel.
void require_finite(const Var& v, const char* op) {
  if (std::string_view(v.op()) == "leaf" && !v.value().all_finite()) {
    throw NumericError(std::string(op) + ": non-finite value in input of shape " +
                       to_string(v.shape()));
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

void require_rank(const char* op, const Var& v, int rank) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " input, got shape " + to_string(v.shape()));
  }
}

Var record(const char* op, Tensor value, std::initializer_list<Var> inputs,
           std::function<void(Node&)> bw) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const Var& v : inputs) needs = needs || v.requires_grad();
  if (needs && !detail::grad_disabled()) {
    n->requires_grad = true;
    for (const Var& v : inputs) n->inputs.push_back(v.shared());
    n->backward = std::move(bw);
  }
  return Var(std::move(n));
}

Var record_many(const char* op, Tensor value, std::span<const Var> inputs,
                std::function<void(Node&)> bw) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const Var& v : inputs) needs = needs || v.requires_grad();
  if (needs && !detail::grad_disabled()) {
    n->requires_grad = true;
    for (const Var& v : inputs) n->inputs.push_back(v.shared());
    n->backward = std::move(bw);
  }
  return Var(std::move(n));
}

// Input i of `self` when it wants gradient, else nullptr.
Node* grad_target(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  return in->requires_grad ? in : nullptr;
}

// Map of a (B, L, d) buffer as (B*L) x d.
MapM positions_view(Tensor& t, Index d) { return {t.data.data(), t.size() / d, d}; }
CMapM positions_view(const Tensor& t, Index d) { return {t.data.data(), t.size() / d, d}; }

void check_mask(const char* op, const MaskMatrix& mask, Index b, Index l) {
  if (mask.rows() != b || mask.cols() != l) {
    throw ShapeError(std::string(op) + ": mask " + to_string({mask.rows(), mask.cols()}) +
                     " does not match (" + std::to_string(b) + ", " + std::to_string(l) + ")");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  if (b.value().rank() != 2 || a.value().rank() < 1 || a.value().cols() != b.value().dim(0)) {
    shape_mismatch("matmul", a.shape(), b.shape());
  }
  Shape out_shape = a.shape();
  out_shape.back() = b.value().dim(1);
  Tensor out(out_shape);
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return record("matmul", std::move(out), {a, b}, [](Node& self) {
    const auto g = self.grad.matrix();
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Node* na = grad_target(self, 0)) na->grad.matrix().noalias() += g * bv.matrix().transpose();
    if (Node* nb = grad_target(self, 1)) nb->grad.matrix().noalias() += av.matrix().transpose() * g;
  });
}

Var spmm(const SparseMatrix& s, const Var& x) {
  require_finite(x, "spmm");
  if (x.value().rank() != 2 || s.cols() != x.value().dim(0)) {
    shape_mismatch("spmm", {s.rows(), s.cols()}, x.shape());
  }
  Tensor out({s.rows(), x.value().dim(1)});
  out.matrix().noalias() = s * x.value().matrix();
  const SparseMatrix* sp = &s;
  return record("spmm", std::move(out), {x}, [sp](Node& self) {
    if (Node* nx = grad_target(self, 0)) {
      nx->grad.matrix().noalias() += sp->transpose() * self.grad.matrix();
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_finite(a, "add");
  require_finite(b, "add");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    shape_mismatch("add", sa, sb);
  }
  const Index inner = b.value().size();
  const Index outer = inner == 0 ? 0 : a.value().size() / inner;
  Tensor out = a.value();
  MapM(out.data.data(), outer, inner).rowwise() += b.value().data.transpose();
  return record("add", std::move(out), {a, b}, [outer, inner](Node& self) {
    if (Node* na = grad_target(self, 0)) na->grad.data += self.grad.data;
    if (Node* nb = grad_target(self, 1)) {
      nb->grad.data += CMapM(self.grad.data.data(), outer, inner).colwise().sum().transpose();
    }
  });
}

Var add_positions(const Var& a, const Var& b) {
  require_finite(a, "add_positions");
  require_finite(b, "add_positions");
  if (a.value().rank() != 3 || b.value().rank() != 2 || a.value().dim(0) != b.value().dim(0) ||
      a.value().dim(2) != b.value().dim(1)) {
    shape_mismatch("add_positions", a.shape(), b.shape());
  }
  const Index B = a.value().dim(0), L = a.value().dim(1), h = a.value().dim(2);
  Tensor out = a.value();
  auto om = positions_view(out, h);
  const auto bm = b.value().matrix();
  for (Index i = 0; i < B; ++i) om.middleRows(i * L, L).rowwise() += bm.row(i);
  return record("add_positions", std::move(out), {a, b}, [B, L, h](Node& self) {
    if (Node* na = grad_target(self, 0)) na->grad.data += self.grad.data;
    if (Node* nb = grad_target(self, 1)) {
      const auto g = positions_view(std::as_const(self.grad), h);
      auto gb = nb->grad.matrix();
      for (Index i = 0; i < B; ++i) gb.row(i) += g.middleRows(i * L, L).colwise().sum();
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_finite(a, "mul");
  require_finite(b, "mul");
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor out(a.shape(), a.value().data.cwiseProduct(b.value().data));
  return record("mul", std::move(out), {a, b}, [](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      na->grad.data += self.grad.data.cwiseProduct(self.inputs[1]->value.data);
    }
    if (Node* nb = grad_target(self, 1)) {
      nb->grad.data += self.grad.data.cwiseProduct(self.inputs[0]->value.data);
    }
  });
}

Var scale(const Var& a, double c) {
  require_finite(a, "scale");
  Tensor out(a.shape(), a.value().data * c);
  return record("scale", std::move(out), {a}, [c](Node& self) {
    if (Node* na = grad_target(self, 0)) na->grad.data += c * self.grad.data;
  });
}

Var tanh(const Var& a) {
  require_finite(a, "tanh");
  // 1 - 2 / (e^2x + 1) keeps to Eigen's vectorised exp; the absolute error
  // stays at rounding level and saturates cleanly for large |x|.
  Tensor out(a.shape(), (1.0 - 2.0 / ((2.0 * a.value().data.array()).exp() + 1.0)).matrix());
  return record("tanh", std::move(out), {a}, [](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      const auto y = self.value.data.array();
      na->grad.data.array() += self.grad.data.array() * (1.0 - y.square());
    }
  });
}

Var relu(const Var& a) {
  require_finite(a, "relu");
  const auto& x = a.value().data;
  if (branch_tracing()) {
    std::vector<Index> signs(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) signs[i] = x[i] > 0;
    trace_branch(signs);
  }
  Tensor out(a.shape(), x.cwiseMax(0.0));
  return record("relu", std::move(out), {a}, [](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      const auto& xin = self.inputs[0]->value.data;
      na->grad.data.array() += (xin.array() > 0).select(self.grad.data.array(), 0.0);
    }
  });
}

Var sigmoid(const Var& a) {
  require_finite(a, "sigmoid");
  Tensor out(a.shape(), (1.0 / (1.0 + (-a.value().data.array()).exp())).matrix());
  return record("sigmoid", std::move(out), {a}, [](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      const auto y = self.value.data.array();
      na->grad.data.array() += self.grad.data.array() * y * (1.0 - y);
    }
  });
}

Var sum(const Var& a) {
  require_finite(a, "sum");
  return record("sum", Tensor::scalar(a.value().data.sum()), {a}, [](Node& self) {
    if (Node* na = grad_target(self, 0)) na->grad.data.array() += self.grad.data[0];
  });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.value().size()) shape_mismatch("reshape", a.shape(), shape);
  Tensor out(std::move(shape), a.value().data);
  return record("reshape", std::move(out), {a}, [](Node& self) {
    if (Node* na = grad_target(self, 0)) na->grad.data += self.grad.data;
  });
}

Var concat_last_axis(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_last_axis: no inputs");
  Shape lead = parts.front().shape();
  if (lead.empty()) throw ShapeError("concat_last_axis: scalar input");
  lead.pop_back();
  Index total = 0;
  std::vector<Index> widths;
  for (const Var& p : parts) {
    require_finite(p, "concat_last_axis");
    Shape s = p.shape();
    if (s.empty()) shape_mismatch("concat_last_axis", parts.front().shape(), s);
    const Index w = s.back();
    s.pop_back();
    if (s != lead) shape_mismatch("concat_last_axis", parts.front().shape(), p.shape());
    widths.push_back(w);
    total += w;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  auto om = out.matrix();
  Index col = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    om.middleCols(col, widths[i]) = parts[i].value().matrix();
    col += widths[i];
  }
  return record_many("concat_last_axis", std::move(out), parts, [widths](Node& self) {
    const auto g = self.grad.matrix();
    Index c = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (Node* ni = grad_target(self, i)) ni->grad.matrix() += g.middleCols(c, widths[i]);
      c += widths[i];
    }
  });
}

Var slice_last_axis(const Var& a, Index start, Index length) {
  require_finite(a, "slice_last_axis");
  if (a.value().rank() < 1 || start < 0 || length < 0 || start + length > a.value().cols()) {
    throw ShapeError("slice_last_axis: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside shape " + to_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = length;
  Tensor out(out_shape);
  out.matrix() = a.value().matrix().middleCols(start, length);
  return record("slice_last_axis", std::move(out), {a}, [start, length](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      na->grad.matrix().middleCols(start, length) += self.grad.matrix();
    }
  });
}

Var gather_rows(const Var& table, std::span<const Index> indices) {
  require_finite(table, "gather_rows");
  require_rank("gather_rows", table, 2);
  const Index rows = table.value().dim(0), d = table.value().dim(1);
  std::vector<Index> idx(indices.begin(), indices.end());
  for (Index i : idx) {
    if (i < 0 || i >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(i) + " outside table of shape " +
                       to_string(table.shape()));
    }
  }
  Tensor out({static_cast<Index>(idx.size()), d});
  auto om = out.matrix();
  const auto tm = table.value().matrix();
  for (std::size_t r = 0; r < idx.size(); ++r) om.row(static_cast<Index>(r)) = tm.row(idx[r]);
  return record("gather_rows", std::move(out), {table}, [idx = std::move(idx)](Node& self) {
    if (Node* nt = grad_target(self, 0)) {
      const auto g = self.grad.matrix();
      auto gt = nt->grad.matrix();
      for (std::size_t r = 0; r < idx.size(); ++r) gt.row(idx[r]) += g.row(static_cast<Index>(r));
    }
  });
}

Var masked_softmax(const Var& scores, const MaskMatrix& mask) {
  require_finite(scores, "masked_softmax");
  if (scores.value().rank() < 1 || scores.value().rank() > 2) {
    throw ShapeError("masked_softmax: expected (B, L) scores, got " + to_string(scores.shape()));
  }
  const Index B = scores.value().rows(), L = scores.value().cols();
  check_mask("masked_softmax", mask, B, L);
  Tensor out(scores.shape());
  auto om = out.matrix();
  const auto sm = scores.value().matrix();
  for (Index b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < L; ++j) {
      if (mask(b, j)) mx = std::max(mx, sm(b, j));
    }
    if (!std::isfinite(mx)) {
      throw ValidationError("masked_softmax: degenerate mask, row " + std::to_string(b) +
                            " has no unmasked position");
    }
    double z = 0;
    for (Index j = 0; j < L; ++j) {
      om(b, j) = mask(b, j) ? std::exp(sm(b, j) - mx) : 0.0;
      z += om(b, j);
    }
    om.row(b) /= z;
  }
  return record("masked_softmax", std::move(out), {scores}, [](Node& self) {
    if (Node* ns = grad_target(self, 0)) {
      const auto p = self.value.matrix();
      const auto g = self.grad.matrix();
      // Masked entries have p == 0, so they receive exactly zero.
      const Eigen::VectorXd dot = p.cwiseProduct(g).rowwise().sum();
      ns->grad.matrix().array() += p.array() * (g.colwise() - dot).array();
    }
  });
}

Var mask_positions(const Var& a, const MaskMatrix& mask) {
  require_finite(a, "mask_positions");
  if (a.value().rank() < 2) throw ShapeError("mask_positions: need (B, L, ...) input");
  const Index B = a.value().dim(0), L = a.value().dim(1);
  check_mask("mask_positions", mask, B, L);
  const Index d = a.value().size() / std::max<Index>(B * L, 1);
  Eigen::VectorXd keep(B * L);
  for (Index b = 0; b < B; ++b)
    for (Index j = 0; j < L; ++j) keep[b * L + j] = mask(b, j) ? 1.0 : 0.0;
  Tensor out = a.value();
  positions_view(out, d).array().colwise() *= keep.array();
  return record("mask_positions", std::move(out), {a}, [keep, d](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      positions_view(na->grad, d).array() +=
          positions_view(std::as_const(self.grad), d).array().colwise() * keep.array();
    }
  });
}

Var pick_positions(const Var& a, std::span<const Index> pos) {
  require_finite(a, "pick_positions");
  const int r = a.value().rank();
  if (r != 2 && r != 3) throw ShapeError("pick_positions: need (B, L) or (B, L, d), got " + to_string(a.shape()));
  const Index B = a.value().dim(0), L = a.value().dim(1);
  const Index d = r == 3 ? a.value().dim(2) : 1;
  if (static_cast<Index>(pos.size()) != B) {
    shape_mismatch("pick_positions", a.shape(), {static_cast<Index>(pos.size())});
  }
  std::vector<Index> p(pos.begin(), pos.end());
  for (Index x : p) {
    if (x >= L) throw ShapeError("pick_positions: position " + std::to_string(x) + " >= " + std::to_string(L));
  }
  Tensor out(r == 3 ? Shape{B, d} : Shape{B});
  const auto src = positions_view(a.value(), d);
  auto dst = positions_view(out, d);
  for (Index b = 0; b < B; ++b) {
    if (p[b] >= 0) dst.row(b) = src.row(b * L + p[b]);
  }
  return record("pick_positions", std::move(out), {a}, [p = std::move(p), L, d](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      auto ga = positions_view(na->grad, d);
      const auto g = positions_view(std::as_const(self.grad), d);
      for (std::size_t b = 0; b < p.size(); ++b) {
        if (p[b] >= 0) ga.row(static_cast<Index>(b) * L + p[b]) += g.row(static_cast<Index>(b));
      }
    }
  });
}

Var scale_rows(const Var& a, const Var& s) {
  require_finite(a, "scale_rows");
  require_finite(s, "scale_rows");
  if (a.value().rank() != 2 || s.value().rank() != 1 || s.value().dim(0) != a.value().dim(0)) {
    shape_mismatch("scale_rows", a.shape(), s.shape());
  }
  Tensor out = a.value();
  out.matrix().array().colwise() *= s.value().data.array();
  return record("scale_rows", std::move(out), {a, s}, [](Node& self) {
    const auto g = self.grad.matrix();
    if (Node* na = grad_target(self, 0)) {
      na->grad.matrix().array() += g.array().colwise() * self.inputs[1]->value.data.array();
    }
    if (Node* ns = grad_target(self, 1)) {
      ns->grad.data += g.cwiseProduct(self.inputs[0]->value.matrix()).rowwise().sum();
    }
  });
}

Var weighted_sum_positions(const Var& p, const Var& x) {
  require_finite(p, "weighted_sum_positions");
  require_finite(x, "weighted_sum_positions");
  if (p.value().rank() != 2 || x.value().rank() != 3 || x.value().dim(0) != p.value().dim(0) ||
      x.value().dim(1) != p.value().dim(1)) {
    shape_mismatch("weighted_sum_positions", p.shape(), x.shape());
  }
  const Index B = x.value().dim(0), L = x.value().dim(1), d = x.value().dim(2);
  Tensor out({B, d});
  const auto xm = positions_view(x.value(), d);
  const auto pm = p.value().matrix();
  auto om = out.matrix();
  for (Index b = 0; b < B; ++b) om.row(b).noalias() = pm.row(b) * xm.middleRows(b * L, L);
  return record("weighted_sum_positions", std::move(out), {p, x}, [B, L, d](Node& self) {
    const auto g = self.grad.matrix();
    const auto xv = positions_view(self.inputs[1]->value, d);
    const auto pv = self.inputs[0]->value.matrix();
    if (Node* np = grad_target(self, 0)) {
      auto gp = np->grad.matrix();
      for (Index b = 0; b < B; ++b) gp.row(b).noalias() += g.row(b) * xv.middleRows(b * L, L).transpose();
    }
    if (Node* nx = grad_target(self, 1)) {
      auto gx = positions_view(nx->grad, d);
      for (Index b = 0; b < B; ++b) gx.middleRows(b * L, L).noalias() += pv.row(b).transpose() * g.row(b);
    }
  });
}

Var stack_positions(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack_positions: no inputs");
  const Shape& s0 = parts.front().shape();
  if (s0.size() != 2) throw ShapeError("stack_positions: need (B, d) inputs, got " + to_string(s0));
  for (const Var& v : parts) {
    require_finite(v, "stack_positions");
    if (v.shape() != s0) shape_mismatch("stack_positions", s0, v.shape());
  }
  const Index B = s0[0], d = s0[1], m = static_cast<Index>(parts.size());
  Tensor out({B, m, d});
  auto om = positions_view(out, d);
  for (Index i = 0; i < m; ++i) {
    const auto pm = parts[static_cast<std::size_t>(i)].value().matrix();
    for (Index b = 0; b < B; ++b) om.row(b * m + i) = pm.row(b);
  }
  return record_many("stack_positions", std::move(out), parts, [B, m, d](Node& self) {
    const auto g = positions_view(std::as_const(self.grad), d);
    for (Index i = 0; i < m; ++i) {
      if (Node* ni = grad_target(self, static_cast<std::size_t>(i))) {
        auto gi = ni->grad.matrix();
        for (Index b = 0; b < B; ++b) gi.row(b) += g.row(b * m + i);
      }
    }
  });
}

Var slice_position(const Var& a, Index t) {
  require_rank("slice_position", a, 3);
  const Index B = a.value().dim(0), L = a.value().dim(1), d = a.value().dim(2);
  if (t < 0 || t >= L) throw ShapeError("slice_position: position out of range for " + to_string(a.shape()));
  Tensor out({B, d});
  const auto src = positions_view(a.value(), d);
  auto om = out.matrix();
  for (Index b = 0; b < B; ++b) om.row(b) = src.row(b * L + t);
  return record("slice_position", std::move(out), {a}, [B, L, d, t](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      auto ga = positions_view(na->grad, d);
      const auto g = self.grad.matrix();
      for (Index b = 0; b < B; ++b) ga.row(b * L + t) += g.row(b);
    }
  });
}

Var conv1d(const Var& x, const Var& filters, const Var& bias) {
  require_finite(x, "conv1d");
  require_finite(filters, "conv1d");
  require_finite(bias, "conv1d");
  if (x.value().rank() != 3 || filters.value().rank() != 3 ||
      filters.value().dim(1) != x.value().dim(2)) {
    shape_mismatch("conv1d", x.shape(), filters.shape());
  }
  const Index B = x.value().dim(0), L = x.value().dim(1), d = x.value().dim(2);
  const Index W = filters.value().dim(0), dout = filters.value().dim(2);
  if (bias.value().rank() != 1 || bias.value().dim(0) != dout) {
    shape_mismatch("conv1d", filters.shape(), bias.shape());
  }
  const Index left = (W - 1) / 2;
  Tensor out({B, L, dout});
  auto om = positions_view(out, dout);
  const auto xm = positions_view(x.value(), d);
  om.rowwise() = bias.value().data.transpose();
  // Output t reads input t + k - left for tap k.
  for (Index k = 0; k < W; ++k) {
    const CMapM wk(filters.value().data.data() + k * d * dout, d, dout);
    const Index shift = k - left;
    const Index t0 = std::max<Index>(0, -shift);
    const Index t1 = std::min<Index>(L, L - shift);
    if (t1 <= t0) continue;
    for (Index b = 0; b < B; ++b) {
      om.middleRows(b * L + t0, t1 - t0).noalias() += xm.middleRows(b * L + t0 + shift, t1 - t0) * wk;
    }
  }
  return record("conv1d", std::move(out), {x, filters, bias}, [=](Node& self) {
    const auto g = positions_view(std::as_const(self.grad), dout);
    const auto xv = positions_view(self.inputs[0]->value, d);
    const auto& wv = self.inputs[1]->value;
    Node* nx = grad_target(self, 0);
    Node* nw = grad_target(self, 1);
    for (Index k = 0; k < W; ++k) {
      const Index shift = k - left;
      const Index t0 = std::max<Index>(0, -shift);
      const Index t1 = std::min<Index>(L, L - shift);
      if (t1 <= t0) continue;
      const CMapM wk(wv.data.data() + k * d * dout, d, dout);
      for (Index b = 0; b < B; ++b) {
        const auto gblock = g.middleRows(b * L + t0, t1 - t0);
        if (nx) {
          positions_view(nx->grad, d).middleRows(b * L + t0 + shift, t1 - t0).noalias() +=
              gblock * wk.transpose();
        }
        if (nw) {
          MapM(nw->grad.data.data() + k * d * dout, d, dout).noalias() +=
              xv.middleRows(b * L + t0 + shift, t1 - t0).transpose() * gblock;
        }
      }
    }
    if (Node* nb = grad_target(self, 2)) nb->grad.data += g.colwise().sum().transpose();
  });
}

Var max_pool_positions(const Var& a, const MaskMatrix& mask) {
  require_finite(a, "max_pool_positions");
  require_rank("max_pool_positions", a, 3);
  const Index B = a.value().dim(0), L = a.value().dim(1), d = a.value().dim(2);
  check_mask("max_pool_positions", mask, B, L);
  Tensor out({B, d});
  auto om = out.matrix();
  const auto am = positions_view(a.value(), d);
  std::vector<Index> winner(static_cast<std::size_t>(B * d), -1);
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < d; ++c) {
      Index best = -1;
      for (Index j = 0; j < L; ++j) {
        if (mask(b, j) && (best < 0 || am(b * L + j, c) > am(b * L + best, c))) best = j;
      }
      if (best < 0) {
        throw ValidationError("max_pool_positions: degenerate mask, row " + std::to_string(b) +
                              " has no unmasked position");
      }
      winner[b * d + c] = best;
      om(b, c) = am(b * L + best, c);
    }
  }
  trace_branch(winner);
  return record("max_pool_positions", std::move(out), {a}, [winner = std::move(winner), B, L, d](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      auto ga = positions_view(na->grad, d);
      const auto g = self.grad.matrix();
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < d; ++c) ga(b * L + winner[b * d + c], c) += g(b, c);
    }
  });
}

Var mean_pool_positions(const Var& a, const MaskMatrix& mask) {
  require_finite(a, "mean_pool_positions");
  require_rank("mean_pool_positions", a, 3);
  const Index B = a.value().dim(0), L = a.value().dim(1), d = a.value().dim(2);
  check_mask("mean_pool_positions", mask, B, L);
  Eigen::MatrixXd weight(B, L);
  for (Index b = 0; b < B; ++b) {
    const auto count = mask.row(b).count();
    if (count == 0) {
      throw ValidationError("mean_pool_positions: degenerate mask, row " + std::to_string(b) +
                            " has no unmasked position");
    }
    for (Index j = 0; j < L; ++j) weight(b, j) = mask(b, j) ? 1.0 / static_cast<double>(count) : 0.0;
  }
  Tensor out({B, d});
  auto om = out.matrix();
  const auto am = positions_view(a.value(), d);
  for (Index b = 0; b < B; ++b) om.row(b).noalias() = weight.row(b) * am.middleRows(b * L, L);
  return record("mean_pool_positions", std::move(out), {a}, [weight, B, L, d](Node& self) {
    if (Node* na = grad_target(self, 0)) {
      auto ga = positions_view(na->grad, d);
      const auto g = self.grad.matrix();
      for (Index b = 0; b < B; ++b) ga.middleRows(b * L, L).noalias() += weight.row(b).transpose() * g.row(b);
    }
  });
}

Var dropout(const Var& a, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ValidationError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return a;
  require_finite(a, "dropout");
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  Eigen::VectorXd m(a.value().size());
  for (Index i = 0; i < m.size(); ++i) m[i] = keep(rng) ? inv : 0.0;
  Tensor out(a.shape(), a.value().data.cwiseProduct(m));
  return record("dropout", std::move(out), {a}, [m = std::move(m)](Node& self) {
    if (Node* na = grad_target(self, 0)) na->grad.data += self.grad.data.cwiseProduct(m);
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels, std::span<const Index> subset) {
  require_finite(logits, "cross_entropy");
  require_rank("cross_entropy", logits, 2);
  const Index N = logits.value().dim(0), C = logits.value().dim(1);
  if (static_cast<Index>(labels.size()) != N) {
    shape_mismatch("cross_entropy", logits.shape(), {static_cast<Index>(labels.size())});
  }
  if (subset.empty()) throw ValidationError("cross_entropy: empty index subset");
  std::vector<Index> rows(subset.begin(), subset.end());
  std::vector<int> ys;
  ys.reserve(rows.size());
  for (Index r : rows) {
    if (r < 0 || r >= N) throw ShapeError("cross_entropy: row index out of range");
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= C) throw ValidationError("cross_entropy: label " + std::to_string(y) + " outside [0, C)");
    ys.push_back(y);
  }
  const auto lm = logits.value().matrix();
  RowMatrix probs(static_cast<Index>(rows.size()), C);
  double loss = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto row = lm.row(rows[i]);
    const double mx = row.maxCoeff();
    const auto shifted = (row.array() - mx).matrix();
    const double lse = std::log(shifted.array().exp().sum());
    loss += lse - shifted(ys[i]);
    probs.row(static_cast<Index>(i)) = (shifted.array() - lse).exp().matrix();
  }
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  return record("cross_entropy", Tensor::scalar(loss * inv_n), {logits},
                [rows = std::move(rows), ys = std::move(ys), probs = std::move(probs), inv_n](Node& self) {
                  if (Node* nl = grad_target(self, 0)) {
                    const double g = self.grad.data[0] * inv_n;
                    auto gl = nl->grad.matrix();
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                      gl.row(rows[i]) += g * probs.row(static_cast<Index>(i));
                      gl(rows[i], ys[i]) -= g;
                    }
                  }
                });
}

}  // namespace gpnn
