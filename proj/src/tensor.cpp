#include "gw/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gw {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

void TensorNode::accumulate(const Array& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

}  // namespace detail

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

namespace {

NodePtr make_node(Shape shape, Array value) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

void ensure_grad(TensorNode& n) {
  if (n.grad.size() == 0) n.grad = Array::Zero(n.value.size());
}

thread_local Tape* g_active_tape = nullptr;

bool recording(const Tensor& a) {
  return g_active_tape != nullptr && a.requires_grad();
}
bool recording(const Tensor& a, const Tensor& b) {
  return g_active_tape != nullptr && (a.requires_grad() || b.requires_grad());
}

// Marks `out` differentiable and records the closure on the active tape.
template <typename F>
void push_step(Tensor& out, F&& fn) {
  out.set_requires_grad(true);
  g_active_tape->record(std::function<void()>(std::forward<F>(fn)), out.node());
}

// How the smaller operand of a binary elementwise op maps onto the larger.
enum class Bc {
  same,      // equal shapes
  b_scalar,  // b is a single element
  b_suffix,  // b's shape is a trailing suffix of a's
  a_scalar,
  a_suffix,
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() >= big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Bc classify(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bc::same;
  if (numel(b) == 1) return Bc::b_scalar;
  if (numel(a) == 1) return Bc::a_scalar;
  if (is_suffix(b, a)) return Bc::b_suffix;
  if (is_suffix(a, b)) return Bc::a_suffix;
  throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " +
                   to_string(b) + " do not conform");
}

// Sum of g over the leading extents, leaving the trailing `inner` elements.
Array reduce_to_suffix(const Array& g, Index inner) {
  Index outer = g.size() / inner;
  ConstMatMap gm(g.data(), outer, inner);
  Array out(inner);
  VecMap(out.data(), inner) = gm.colwise().sum().transpose();
  return out;
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

// Flattens a shape into [rows, cols-of-last-axis].
void as_rows(const Shape& s, Index& rows, Index& cols) {
  cols = s.back();
  rows = numel(s) / cols;
}

Array permute_raw(const Array& src, const Shape& in_shape,
                  const std::vector<Index>& perm) {
  const std::size_t r = in_shape.size();
  std::vector<Index> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i)
    in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<Index> step(r);  // input stride advanced by each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
    step[i] = in_strides[static_cast<std::size_t>(perm[i])];
  }
  Array dst(src.size());
  std::vector<Index> coord(r, 0);
  Index src_idx = 0;
  for (Index o = 0; o < dst.size(); ++o) {
    dst[o] = src[src_idx];
    for (std::size_t axis = r; axis-- > 0;) {
      coord[axis]++;
      src_idx += step[axis];
      if (coord[axis] < out_shape[axis]) break;
      src_idx -= step[axis] * out_shape[axis];
      coord[axis] = 0;
    }
  }
  return dst;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, Array data) : node_(nullptr) {
  if (numel(shape) != data.size())
    throw ShapeError("tensor: shape " + to_string(shape) + " needs " +
                     std::to_string(numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  node_ = make_node(std::move(shape), std::move(data));
}

Tensor Tensor::scalar(Scalar v) { return Tensor({1}, Array::Constant(1, v)); }

Tensor Tensor::zeros(Shape shape) {
  Index n = numel(shape);
  return Tensor(std::move(shape), Array::Zero(n));
}

Tensor Tensor::constant(Shape shape, Scalar v) {
  Index n = numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, v));
}

Tensor Tensor::from(Shape shape, std::initializer_list<Scalar> data) {
  Array a(static_cast<Index>(data.size()));
  Index i = 0;
  for (Scalar v : data) a[i++] = v;
  return Tensor(std::move(shape), std::move(a));
}

Tensor Tensor::from(Shape shape, const std::vector<Scalar>& data) {
  Array a(static_cast<Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) a[static_cast<Index>(i)] = data[i];
  return Tensor(std::move(shape), std::move(a));
}

Scalar Tensor::item() const {
  if (size() != 1)
    throw ShapeError("item: tensor has shape " + to_string(shape()));
  return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

const Array& Tensor::grad() const {
  if (!node_->has_grad())
    throw ValueError("grad: no gradient has been accumulated");
  return node_->grad;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ValueError("backward: loss must be a single element, got shape " +
                     to_string(loss.shape()));
  if (!loss.requires_grad())
    throw ValueError("backward: loss is not connected to any parameter");
  loss.node()->accumulate(Array::Ones(1));
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->first();
  // Gradients of op outputs are per-pass scratch; leaves keep theirs.
  for (auto& s : steps_) s.second->grad.resize(0);
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw ValueError("backward: no active tape");
  t->backward(loss);
}

// ---------------------------------------------------------------------------
// Binary elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Bc bc = classify(a.shape(), b.shape(), "add");
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out;
  switch (bc) {
    case Bc::same: out = av + bv; break;
    case Bc::b_scalar: out = av + bv[0]; break;
    case Bc::a_scalar: out = bv + av[0]; break;
    case Bc::b_suffix: {
      out = av;
      MatMap(out.data(), av.size() / bv.size(), bv.size()).rowwise() +=
          ConstVecMap(bv.data(), bv.size()).transpose();
      break;
    }
    case Bc::a_suffix: {
      out = bv;
      MatMap(out.data(), bv.size() / av.size(), av.size()).rowwise() +=
          ConstVecMap(av.data(), av.size()).transpose();
      break;
    }
  }
  const Shape& oshape = (bc == Bc::a_scalar || bc == Bc::a_suffix) ? b.shape() : a.shape();
  Tensor y(oshape, std::move(out));
  if (recording(a, b)) {
    auto an = a.node(); auto bn = b.node(); auto on = y.node();
    push_step(y, [an, bn, on, bc] {
      if (!on->has_grad()) return;
      const Array& g = on->grad;
      switch (bc) {
        case Bc::same:
          an->accumulate(g); bn->accumulate(g); break;
        case Bc::b_scalar:
          an->accumulate(g);
          if (bn->requires_grad) bn->accumulate(Array::Constant(1, g.sum()));
          break;
        case Bc::a_scalar:
          bn->accumulate(g);
          if (an->requires_grad) an->accumulate(Array::Constant(1, g.sum()));
          break;
        case Bc::b_suffix:
          an->accumulate(g);
          if (bn->requires_grad) bn->accumulate(reduce_to_suffix(g, bn->value.size()));
          break;
        case Bc::a_suffix:
          bn->accumulate(g);
          if (an->requires_grad) an->accumulate(reduce_to_suffix(g, an->value.size()));
          break;
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  Bc bc = classify(a.shape(), b.shape(), "mul");
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out;
  switch (bc) {
    case Bc::same: out = av * bv; break;
    case Bc::b_scalar: out = av * bv[0]; break;
    case Bc::a_scalar: out = bv * av[0]; break;
    case Bc::b_suffix: {
      out = av;
      MatMap(out.data(), av.size() / bv.size(), bv.size()).array().rowwise() *=
          ConstVecMap(bv.data(), bv.size()).transpose().array();
      break;
    }
    case Bc::a_suffix: {
      out = bv;
      MatMap(out.data(), bv.size() / av.size(), av.size()).array().rowwise() *=
          ConstVecMap(av.data(), av.size()).transpose().array();
      break;
    }
  }
  const Shape& oshape = (bc == Bc::a_scalar || bc == Bc::a_suffix) ? b.shape() : a.shape();
  Tensor y(oshape, std::move(out));
  if (recording(a, b)) {
    auto an = a.node(); auto bn = b.node(); auto on = y.node();
    push_step(y, [an, bn, on, bc] {
      if (!on->has_grad()) return;
      const Array& g = on->grad;
      const Array& av2 = an->value;
      const Array& bv2 = bn->value;
      auto scaled_by_suffix = [](const Array& g2, const Array& s) {
        Array r = g2;
        MatMap(r.data(), g2.size() / s.size(), s.size()).array().rowwise() *=
            ConstVecMap(s.data(), s.size()).transpose().array();
        return r;
      };
      switch (bc) {
        case Bc::same:
          if (an->requires_grad) an->accumulate(g * bv2);
          if (bn->requires_grad) bn->accumulate(g * av2);
          break;
        case Bc::b_scalar:
          if (an->requires_grad) an->accumulate(g * bv2[0]);
          if (bn->requires_grad) bn->accumulate(Array::Constant(1, (g * av2).sum()));
          break;
        case Bc::a_scalar:
          if (bn->requires_grad) bn->accumulate(g * av2[0]);
          if (an->requires_grad) an->accumulate(Array::Constant(1, (g * bv2).sum()));
          break;
        case Bc::b_suffix:
          if (an->requires_grad) an->accumulate(scaled_by_suffix(g, bv2));
          if (bn->requires_grad) bn->accumulate(reduce_to_suffix(g * av2, bv2.size()));
          break;
        case Bc::a_suffix:
          if (bn->requires_grad) bn->accumulate(scaled_by_suffix(g, av2));
          if (an->requires_grad) an->accumulate(reduce_to_suffix(g * bv2, av2.size()));
          break;
      }
    });
  }
  return y;
}

Tensor add(const Tensor& a, Scalar b) {
  Tensor y(a.shape(), a.value() + b);
  if (recording(a)) {
    auto an = a.node(); auto on = y.node();
    push_step(y, [an, on] {
      if (on->has_grad()) an->accumulate(on->grad);
    });
  }
  return y;
}

Tensor mul(const Tensor& a, Scalar b) {
  Tensor y(a.shape(), a.value() * b);
  if (recording(a)) {
    auto an = a.node(); auto on = y.node();
    push_step(y, [an, on, b] {
      if (on->has_grad()) an->accumulate(on->grad * b);
    });
  }
  return y;
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

// ---------------------------------------------------------------------------
// Unary elementwise
// ---------------------------------------------------------------------------

namespace {

// dy/dx expressed from (x, y, g).
template <typename FVal, typename FGrad>
Tensor unary_op(const Tensor& x, FVal&& fval, FGrad&& fgrad) {
  Tensor y(x.shape(), fval(x.value()));
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    auto fg = std::forward<FGrad>(fgrad);
    push_step(y, [xn, on, fg] {
      if (on->has_grad()) xn->accumulate(fg(xn->value, on->value, on->grad));
    });
  }
  return y;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](const Array& v) { return v.max(0.0); },
      [](const Array& v, const Array&, const Array& g) -> Array {
        return g * (v > 0.0).cast<Scalar>();
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, [](const Array& v) -> Array { return 1.0 / (1.0 + (-v).exp()); },
      [](const Array&, const Array& y, const Array& g) -> Array {
        return g * y * (1.0 - y);
      });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, [](const Array& v) -> Array { return v.tanh(); },
      [](const Array&, const Array& y, const Array& g) -> Array {
        return g * (1.0 - y.square());
      });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](const Array& v) -> Array { return v.exp(); },
      [](const Array&, const Array& y, const Array& g) -> Array { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, [](const Array& v) -> Array { return v.log(); },
      [](const Array& v, const Array&, const Array& g) -> Array { return g / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, [](const Array& v) -> Array { return v.sqrt(); },
      [](const Array&, const Array& y, const Array& g) -> Array {
        return g * 0.5 / y;
      });
}

Tensor pow(const Tensor& x, Scalar e) {
  return unary_op(
      x, [e](const Array& v) -> Array { return v.pow(e); },
      [e](const Array& v, const Array&, const Array& g) -> Array {
        return g * e * v.pow(e - 1.0);
      });
}

Tensor gelu(const Tensor& x) {
  // tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi)
  static constexpr Scalar c = 0.7978845608028654;
  static constexpr Scalar k = 0.044715;
  return unary_op(
      x,
      [](const Array& v) -> Array {
        return 0.5 * v * (1.0 + (c * (v + k * v.cube())).tanh());
      },
      [](const Array& v, const Array&, const Array& g) -> Array {
        Array t = (c * (v + k * v.cube())).tanh();
        Array dt = (1.0 - t.square()) * c * (1.0 + 3.0 * k * v.square());
        return g * (0.5 * (1.0 + t) + 0.5 * v * dt);
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " +
                     to_string(shape));
  Tensor y(std::move(shape), x.value());
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on] {
      if (on->has_grad()) xn->accumulate(on->grad);
    });
  }
  return y;
}

namespace {

void axis_split(const Shape& s, Index axis, Index& outer, Index& inner) {
  outer = 1;
  inner = 1;
  for (Index i = 0; i < static_cast<Index>(s.size()); ++i) {
    if (i < axis) outer *= s[static_cast<std::size_t>(i)];
    if (i > axis) inner *= s[static_cast<std::size_t>(i)];
  }
}

}  // namespace

Tensor slice(const Tensor& x, Index axis, Index start, Index len) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                     to_string(s));
  Index extent = s[static_cast<std::size_t>(axis)];
  if (start < 0 || len < 0 || start + len > extent)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(extent) + " of " + to_string(s));
  Index outer, inner;
  axis_split(s, axis, outer, inner);
  Shape oshape = s;
  oshape[static_cast<std::size_t>(axis)] = len;
  Array out(outer * len * inner);
  const Array& v = x.value();
  for (Index o = 0; o < outer; ++o)
    out.segment(o * len * inner, len * inner) =
        v.segment((o * extent + start) * inner, len * inner);
  Tensor y(std::move(oshape), std::move(out));
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, outer, inner, extent, start, len] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      const Array& g = on->grad;
      for (Index o = 0; o < outer; ++o)
        xn->grad.segment((o * extent + start) * inner, len * inner) +=
            g.segment(o * len * inner, len * inner);
    });
  }
  return y;
}

Tensor concat(std::span<const Tensor> parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis < 0 || axis >= static_cast<Index>(first.size()))
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     to_string(first));
  Index total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<Index>(first.size()))
      throw ShapeError("concat: rank mismatch between " + to_string(first) +
                       " and " + to_string(p.shape()));
    for (Index i = 0; i < p.rank(); ++i)
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] !=
                           first[static_cast<std::size_t>(i)])
        throw ShapeError("concat: shapes " + to_string(first) + " and " +
                         to_string(p.shape()) + " differ off axis " +
                         std::to_string(axis));
    total_axis += p.dim(axis);
  }
  Shape oshape = first;
  oshape[static_cast<std::size_t>(axis)] = total_axis;
  Index outer, inner;
  axis_split(oshape, axis, outer, inner);
  Array out(numel(oshape));
  Index offset = 0;  // running start along the axis
  for (const Tensor& p : parts) {
    Index len = p.dim(axis);
    const Array& v = p.value();
    for (Index o = 0; o < outer; ++o)
      out.segment((o * total_axis + offset) * inner, len * inner) =
          v.segment(o * len * inner, len * inner);
    offset += len;
  }
  Tensor y(std::move(oshape), std::move(out));
  Tape* tape = Tape::active();
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    std::vector<NodePtr> ins;
    std::vector<Index> lens;
    for (const Tensor& p : parts) {
      ins.push_back(p.node());
      lens.push_back(p.dim(axis));
    }
    auto on = y.node();
    push_step(y, [ins, lens, on, outer, inner, total_axis] {
      if (!on->has_grad()) return;
      const Array& g = on->grad;
      Index offset2 = 0;
      for (std::size_t i = 0; i < ins.size(); ++i) {
        Index len = lens[i];
        if (ins[i]->requires_grad) {
          ensure_grad(*ins[i]);
          for (Index o = 0; o < outer; ++o)
            ins[i]->grad.segment(o * len * inner, len * inner) +=
                g.segment((o * total_axis + offset2) * inner, len * inner);
        }
        offset2 += len;
      }
    });
  }
  return y;
}

Tensor concat(std::initializer_list<Tensor> parts, Index axis) {
  std::vector<Tensor> v(parts);
  return concat(std::span<const Tensor>(v), axis);
}

Tensor permute(const Tensor& x, const std::vector<Index>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size())
    throw ShapeError("permute: got " + std::to_string(perm.size()) +
                     " axes for " + to_string(s));
  std::vector<bool> seen(s.size(), false);
  for (Index p : perm) {
    if (p < 0 || p >= static_cast<Index>(s.size()) || seen[static_cast<std::size_t>(p)])
      throw ShapeError("permute: invalid axis order for " + to_string(s));
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape oshape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    oshape[i] = s[static_cast<std::size_t>(perm[i])];
  Tensor y(oshape, permute_raw(x.value(), s, perm));
  if (recording(x)) {
    std::vector<Index> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
      inv[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, oshape, inv] {
      if (on->has_grad()) xn->accumulate(permute_raw(on->grad, oshape, inv));
    });
  }
  return y;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2)
    throw ShapeError("transpose: expected rank 2, got " + to_string(x.shape()));
  return permute(x, {1, 0});
}

Tensor roll_last(const Tensor& x, Index k) {
  Index rows, cols;
  if (x.rank() < 1) throw ShapeError("roll_last: scalar input");
  as_rows(x.shape(), rows, cols);
  k = ((k % cols) + cols) % cols;
  Array out(x.size());
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      out[r * cols + (c + k) % cols] = x.value()[r * cols + c];
  Tensor y(x.shape(), std::move(out));
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, rows, cols, k] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      const Array& g = on->grad;
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c)
          xn->grad[r * cols + c] += g[r * cols + (c + k) % cols];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Contractions
// ---------------------------------------------------------------------------

namespace {

struct MmDims {
  Index ar, ac, br, bc;  // stored dims
  Index m, k, n;         // effective dims after transposes
};

MmDims mm_dims(const Shape& a, const Shape& b, bool ta, bool tb, const char* op) {
  MmDims d;
  d.ar = a[a.size() - 2]; d.ac = a[a.size() - 1];
  d.br = b[b.size() - 2]; d.bc = b[b.size() - 1];
  d.m = ta ? d.ac : d.ar;
  d.k = ta ? d.ar : d.ac;
  Index k2 = tb ? d.bc : d.br;
  d.n = tb ? d.br : d.bc;
  if (d.k != k2)
    throw ShapeError(std::string(op) + ": inner extents of " + to_string(a) +
                     (ta ? "^T" : "") + " and " + to_string(b) +
                     (tb ? "^T" : "") + " differ");
  return d;
}

// C += or = op(A) * op(B) for row-major flat buffers.
void gemm(const Scalar* a, const Scalar* b, Scalar* c, const MmDims& d, bool ta,
          bool tb, bool accumulate) {
  ConstMatMap A(a, d.ar, d.ac);
  ConstMatMap B(b, d.br, d.bc);
  MatMap C(c, d.m, d.n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      C.noalias() += lhs * rhs;
    else
      C.noalias() = lhs * rhs;
  };
  if (!ta && !tb) run(A, B);
  else if (!ta && tb) run(A, B.transpose());
  else if (ta && !tb) run(A.transpose(), B);
  else run(A.transpose(), B.transpose());
}

void matmul_backward(const NodePtr& an, const NodePtr& bn, const Array& g,
                     const MmDims& d, bool ta, bool tb, Index a_off, Index b_off,
                     Index g_off) {
  ConstMatMap G(g.data() + g_off, d.m, d.n);
  if (an->requires_grad) {
    ensure_grad(*an);
    MatMap dA(an->grad.data() + a_off, d.ar, d.ac);
    ConstMatMap B(bn->value.data() + b_off, d.br, d.bc);
    if (!ta && !tb) dA.noalias() += G * B.transpose();
    else if (!ta && tb) dA.noalias() += G * B;
    else if (ta && !tb) dA.noalias() += B * G.transpose();
    else dA.noalias() += (G * B).transpose();
  }
  if (bn->requires_grad) {
    ensure_grad(*bn);
    MatMap dB(bn->grad.data() + b_off, d.br, d.bc);
    ConstMatMap A(an->value.data() + a_off, d.ar, d.ac);
    if (!ta && !tb) dB.noalias() += A.transpose() * G;
    else if (ta && !tb) dB.noalias() += A * G;
    else if (!ta && tb) dB.noalias() += G.transpose() * A;
    else dB.noalias() += (A * G).transpose();
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 inputs, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  MmDims d = mm_dims(a.shape(), b.shape(), trans_a, trans_b, "matmul");
  Array out(d.m * d.n);
  gemm(a.value().data(), b.value().data(), out.data(), d, trans_a, trans_b, false);
  Tensor y({d.m, d.n}, std::move(out));
  if (recording(a, b)) {
    auto an = a.node(); auto bn = b.node(); auto on = y.node();
    push_step(y, [an, bn, on, d, trans_a, trans_b] {
      if (!on->has_grad()) return;
      matmul_backward(an, bn, on->grad, d, trans_a, trans_b, 0, 0, 0);
    });
  }
  return y;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw ShapeError("bmm: expected rank-3 inputs, got " + to_string(a.shape()) +
                     " and " + to_string(b.shape()));
  if (a.dim(0) != b.dim(0))
    throw ShapeError("bmm: batch extents of " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  Index batch = a.dim(0);
  MmDims d = mm_dims(a.shape(), b.shape(), trans_a, trans_b, "bmm");
  Array out(batch * d.m * d.n);
  for (Index i = 0; i < batch; ++i)
    gemm(a.value().data() + i * d.ar * d.ac, b.value().data() + i * d.br * d.bc,
         out.data() + i * d.m * d.n, d, trans_a, trans_b, false);
  Tensor y({batch, d.m, d.n}, std::move(out));
  if (recording(a, b)) {
    auto an = a.node(); auto bn = b.node(); auto on = y.node();
    push_step(y, [an, bn, on, d, batch, trans_a, trans_b] {
      if (!on->has_grad()) return;
      for (Index i = 0; i < batch; ++i)
        matmul_backward(an, bn, on->grad, d, trans_a, trans_b, i * d.ar * d.ac,
                        i * d.br * d.bc, i * d.m * d.n);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and row ops
// ---------------------------------------------------------------------------

namespace {

Tensor full_reduce(const Tensor& x, Scalar factor) {
  Tensor y = Tensor::scalar(x.value().sum() * factor);
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, factor] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      xn->grad += on->grad[0] * factor;
    });
  }
  return y;
}

}  // namespace

Tensor sum(const Tensor& x) { return full_reduce(x, 1.0); }

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return full_reduce(x, 1.0 / static_cast<Scalar>(x.size()));
}

namespace {

Tensor leading_reduce(const Tensor& x, Index k, bool take_mean) {
  if (k < 1 || k >= x.rank())
    throw ShapeError("sum_leading: cannot reduce " + std::to_string(k) +
                     " leading axes of " + to_string(x.shape()));
  Shape oshape(x.shape().begin() + k, x.shape().end());
  Index inner = numel(oshape);
  Index outer = x.size() / inner;
  Scalar factor = take_mean ? 1.0 / static_cast<Scalar>(outer) : 1.0;
  Array out(inner);
  VecMap(out.data(), inner) =
      ConstMatMap(x.value().data(), outer, inner).colwise().sum().transpose() *
      factor;
  Tensor y(std::move(oshape), std::move(out));
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, outer, inner, factor] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      MatMap(xn->grad.data(), outer, inner).rowwise() +=
          (ConstVecMap(on->grad.data(), inner) * factor).transpose();
    });
  }
  return y;
}

}  // namespace

Tensor sum_leading(const Tensor& x, Index k) { return leading_reduce(x, k, false); }

Tensor mean_leading(const Tensor& x, Index k) { return leading_reduce(x, k, true); }

Tensor sum_last(const Tensor& x) {
  if (x.rank() < 2)
    throw ShapeError("sum_last: expected rank >= 2, got " + to_string(x.shape()));
  Index rows, cols;
  as_rows(x.shape(), rows, cols);
  Array out(rows);
  VecMap(out.data(), rows) = ConstMatMap(x.value().data(), rows, cols).rowwise().sum();
  Tensor y(drop_last(x.shape()), std::move(out));
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, rows, cols] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      MatMap(xn->grad.data(), rows, cols).colwise() +=
          ConstVecMap(on->grad.data(), rows);
    });
  }
  return y;
}

Tensor row_scale(const Tensor& x, const Tensor& coeffs) {
  if (x.rank() < 2)
    throw ShapeError("row_scale: expected rank >= 2, got " + to_string(x.shape()));
  if (Shape(x.shape().begin(), x.shape().end() - 1) != coeffs.shape())
    throw ShapeError("row_scale: coefficients " + to_string(coeffs.shape()) +
                     " do not match leading extents of " + to_string(x.shape()));
  Index rows, cols;
  as_rows(x.shape(), rows, cols);
  Array out = x.value();
  MatMap(out.data(), rows, cols).array().colwise() *=
      ConstVecMap(coeffs.value().data(), rows).array();
  Tensor y(x.shape(), std::move(out));
  if (recording(x, coeffs)) {
    auto xn = x.node(); auto cn = coeffs.node(); auto on = y.node();
    push_step(y, [xn, cn, on, rows, cols] {
      if (!on->has_grad()) return;
      ConstMatMap g(on->grad.data(), rows, cols);
      if (xn->requires_grad) {
        ensure_grad(*xn);
        MatMap(xn->grad.data(), rows, cols).array() +=
            g.array().colwise() * ConstVecMap(cn->value.data(), rows).array();
      }
      if (cn->requires_grad) {
        ensure_grad(*cn);
        VecMap(cn->grad.data(), rows).array() +=
            (g.array() * ConstMatMap(xn->value.data(), rows, cols).array())
                .rowwise()
                .sum();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Softmax and losses
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_last(const Tensor& x) {
  if (x.value().hasNaN()) throw ValueError("softmax: NaN input");
  Index rows = 1, cols = x.size();
  if (x.rank() >= 2) as_rows(x.shape(), rows, cols);
  Array out(x.size());
  ConstMatMap xm(x.value().data(), rows, cols);
  MatMap ym(out.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    Scalar m = xm.row(r).maxCoeff();
    ym.row(r) = (xm.row(r).array() - m).exp();
    ym.row(r) /= ym.row(r).sum();
  }
  Tensor y(x.shape(), std::move(out));
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, rows, cols] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      ConstMatMap g(on->grad.data(), rows, cols);
      ConstMatMap ym2(on->value.data(), rows, cols);
      MatMap dx(xn->grad.data(), rows, cols);
      for (Index r = 0; r < rows; ++r) {
        Scalar dot = (g.row(r).array() * ym2.row(r).array()).sum();
        dx.row(r).array() +=
            ym2.row(r).array() * (g.row(r).array() - dot);
      }
    });
  }
  return y;
}

}  // namespace

Tensor softmax(const Tensor& x, Index axis) {
  Index r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("softmax: axis out of range for " + to_string(x.shape()));
  if (axis == r - 1 || r == 1) return softmax_last(x);
  std::vector<Index> perm;
  for (Index i = 0; i < r; ++i)
    if (i != axis) perm.push_back(i);
  perm.push_back(axis);
  std::vector<Index> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  return permute(softmax_last(permute(x, perm)), inv);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.value().hasNaN()) throw ValueError("cross_entropy: NaN input");
  Index rows = 1, cols = logits.size();
  if (logits.rank() >= 2) as_rows(logits.shape(), rows, cols);
  if (static_cast<Index>(targets.size()) != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  for (int t : targets)
    if (t < 0 || t >= cols)
      throw ValueError("cross_entropy: target " + std::to_string(t) +
                       " out of range [0, " + std::to_string(cols) + ")");
  ConstMatMap xm(logits.value().data(), rows, cols);
  Array probs(logits.size());  // kept for the backward step
  MatMap pm(probs.data(), rows, cols);
  Scalar loss = 0;
  for (Index r = 0; r < rows; ++r) {
    Scalar m = xm.row(r).maxCoeff();
    pm.row(r) = (xm.row(r).array() - m).exp();
    Scalar z = pm.row(r).sum();
    pm.row(r) /= z;
    loss += m + std::log(z) - xm(r, targets[static_cast<std::size_t>(r)]);
  }
  loss /= static_cast<Scalar>(rows);
  Tensor y = Tensor::scalar(loss);
  if (recording(logits)) {
    auto xn = logits.node(); auto on = y.node();
    push_step(y, [xn, on, probs = std::move(probs), targets, rows, cols] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      Scalar g = on->grad[0] / static_cast<Scalar>(rows);
      MatMap dx(xn->grad.data(), rows, cols);
      ConstMatMap pm2(probs.data(), rows, cols);
      for (Index r = 0; r < rows; ++r) {
        dx.row(r) += g * pm2.row(r);
        dx(r, targets[static_cast<std::size_t>(r)]) -= g;
      }
    });
  }
  return y;
}

Tensor cross_entropy(const Tensor& logits, int target) {
  return cross_entropy(logits, std::vector<int>{target});
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mse: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  Index n = a.size();
  Tensor y = Tensor::scalar((a.value() - b.value()).square().sum() /
                            static_cast<Scalar>(n));
  if (recording(a, b)) {
    auto an = a.node(); auto bn = b.node(); auto on = y.node();
    push_step(y, [an, bn, on, n] {
      if (!on->has_grad()) return;
      Array d = (an->value - bn->value) * (2.0 * on->grad[0] / static_cast<Scalar>(n));
      if (an->requires_grad) an->accumulate(d);
      if (bn->requires_grad) bn->accumulate(-d);
    });
  }
  return y;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool* warned) {
  if (a.shape() != b.shape())
    throw ShapeError("cosine_similarity: shapes " + to_string(a.shape()) +
                     " and " + to_string(b.shape()) + " differ");
  constexpr Scalar kTiny = 1e-24;  // squared-norm floor for the zero-vector case
  if (a.value().square().sum() < kTiny || b.value().square().sum() < kTiny) {
    if (warned) *warned = true;
    return Tensor::scalar(0.0);
  }
  Tensor dot = sum(mul(a, b));
  Tensor denom2 = mul(sum(mul(a, a)), sum(mul(b, b)));
  return mul(dot, pow(denom2, -0.5));
}

Scalar cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                         bool* warned) {
  Scalar na = a.squaredNorm(), nb = b.squaredNorm();
  if (na < 1e-24 || nb < 1e-24) {
    if (warned) *warned = true;
    return 0.0;
  }
  return a.dot(b) / std::sqrt(na * nb);
}

// ---------------------------------------------------------------------------
// Convolution building blocks
// ---------------------------------------------------------------------------

namespace {

void check_image(const Tensor& x, const ConvGeom& g, const char* op) {
  if (x.rank() != 4 || x.dim(1) != g.in_c || x.dim(2) != g.in_h ||
      x.dim(3) != g.in_w)
    throw ShapeError(std::string(op) + ": input " + to_string(x.shape()) +
                     " does not match geometry [*, " + std::to_string(g.in_c) +
                     ", " + std::to_string(g.in_h) + ", " + std::to_string(g.in_w) +
                     "]");
}

// Walks (patch row, patch column) <-> (b, c, ih, iw) pairs of the unfolding.
template <typename F>
void for_each_patch_cell(Index batch, const ConvGeom& g, F&& f) {
  const Index oh = g.out_h(), ow = g.out_w();
  for (Index b = 0; b < batch; ++b)
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x) {
        Index row = (b * oh + y) * ow + x;
        Index col = 0;
        for (Index c = 0; c < g.in_c; ++c)
          for (Index i = 0; i < g.kh; ++i)
            for (Index j = 0; j < g.kw; ++j, ++col) {
              Index ih = y * g.stride - g.pad + i;
              Index iw = x * g.stride - g.pad + j;
              bool inside = ih >= 0 && ih < g.in_h && iw >= 0 && iw < g.in_w;
              Index src = ((b * g.in_c + c) * g.in_h + ih) * g.in_w + iw;
              f(row, col, src, inside);
            }
      }
}

}  // namespace

Tensor im2col(const Tensor& x, const ConvGeom& g) {
  check_image(x, g, "im2col");
  Index batch = x.dim(0);
  Index rows = batch * g.out_h() * g.out_w();
  Index cols = g.in_c * g.kh * g.kw;
  Array out = Array::Zero(rows * cols);
  const Array& v = x.value();
  for_each_patch_cell(batch, g, [&](Index r, Index c, Index src, bool inside) {
    if (inside) out[r * cols + c] = v[src];
  });
  Tensor y({rows, cols}, std::move(out));
  if (recording(x)) {
    auto xn = x.node(); auto on = y.node();
    push_step(y, [xn, on, batch, g, cols] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      const Array& gr = on->grad;
      for_each_patch_cell(batch, g, [&](Index r, Index c, Index src, bool inside) {
        if (inside) xn->grad[src] += gr[r * cols + c];
      });
    });
  }
  return y;
}

Tensor col2im(const Tensor& cols, Index batch, const ConvGeom& g) {
  Index rows = batch * g.out_h() * g.out_w();
  Index width = g.in_c * g.kh * g.kw;
  if (cols.rank() != 2 || cols.dim(0) != rows || cols.dim(1) != width)
    throw ShapeError("col2im: input " + to_string(cols.shape()) +
                     " does not match geometry rows " + std::to_string(rows) +
                     " x " + std::to_string(width));
  Array out = Array::Zero(batch * g.in_c * g.in_h * g.in_w);
  const Array& v = cols.value();
  for_each_patch_cell(batch, g, [&](Index r, Index c, Index dst, bool inside) {
    if (inside) out[dst] += v[r * width + c];
  });
  Tensor y({batch, g.in_c, g.in_h, g.in_w}, std::move(out));
  if (recording(cols)) {
    auto xn = cols.node(); auto on = y.node();
    push_step(y, [xn, on, batch, g, width] {
      if (!on->has_grad() || !xn->requires_grad) return;
      ensure_grad(*xn);
      const Array& gr = on->grad;
      for_each_patch_cell(batch, g, [&](Index r, Index c, Index src, bool inside) {
        if (inside) xn->grad[r * width + c] += gr[src];
      });
    });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias,
              const ConvGeom& g) {
  check_image(x, g, "conv2d");
  Index ck = g.in_c * g.kh * g.kw;
  if (w.rank() != 2 || w.dim(1) != ck)
    throw ShapeError("conv2d: weight " + to_string(w.shape()) +
                     " does not match patch width " + std::to_string(ck));
  Index batch = x.dim(0);
  Index oc = w.dim(0);
  Tensor cols = im2col(x, g);
  Tensor rows = matmul(cols, w, false, true);  // [B*OH*OW, OC]
  if (bias) rows = add(rows, *bias);
  Tensor img = permute(reshape(rows, {batch, g.out_h(), g.out_w(), oc}),
                       {0, 3, 1, 2});
  return img;
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor* bias,
                        const ConvGeom& g) {
  // x lives on the output side of the conv described by g.
  Index oh = g.out_h(), ow = g.out_w();
  if (x.rank() != 4 || x.dim(2) != oh || x.dim(3) != ow)
    throw ShapeError("conv2d_transpose: input " + to_string(x.shape()) +
                     " does not match geometry [*, ic, " + std::to_string(oh) +
                     ", " + std::to_string(ow) + "]");
  Index batch = x.dim(0);
  Index ic = x.dim(1);
  Index ck = g.in_c * g.kh * g.kw;
  if (w.rank() != 2 || w.dim(0) != ic || w.dim(1) != ck)
    throw ShapeError("conv2d_transpose: weight " + to_string(w.shape()) +
                     " does not match [" + std::to_string(ic) + ", " +
                     std::to_string(ck) + "]");
  Tensor rows = reshape(permute(x, {0, 2, 3, 1}), {batch * oh * ow, ic});
  Tensor cols = matmul(rows, w);  // [B*OH*OW, C*KH*KW]
  Tensor img = col2im(cols, batch, g);
  if (bias) {
    Tensor hw_last = permute(img, {0, 2, 3, 1});
    img = permute(add(hw_last, *bias), {0, 3, 1, 2});
  }
  return img;
}

// ---------------------------------------------------------------------------
// Checking
// ---------------------------------------------------------------------------

Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  Scalar eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  Array analytic;
  {
    Tape tape;
    Tensor y = f(x);
    if (y.size() != 1)
      throw ValueError("grad_check: function must be scalar-valued");
    tape.backward(y);
    analytic = x.has_grad() ? x.grad() : Array::Zero(x.size());
  }
  x.zero_grad();
  Scalar worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    Scalar saved = x.value()[i];
    x.value()[i] = saved + eps;
    Scalar fp = f(x).item();
    x.value()[i] = saved - eps;
    Scalar fm = f(x).item();
    x.value()[i] = saved;
    Scalar numeric = (fp - fm) / (2 * eps);
    Scalar denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

Index argmax(const Array& a) {
  Index best = 0;
  for (Index i = 1; i < a.size(); ++i)
    if (a[i] > a[best]) best = i;
  return best;
}

}  // namespace gw
