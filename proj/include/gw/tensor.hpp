#pragma once

#include "gw/common.hpp"

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace gw {

namespace detail {

struct TensorNode {
  Shape shape;
  Array value;
  Array grad;  // size 0 until a gradient is accumulated
  bool requires_grad = false;

  void accumulate(const Array& g);
  bool has_grad() const { return grad.size() != 0; }
};

}  // namespace detail

/// Dense n-dimensional array of doubles participating in a reverse-mode
/// differentiation graph. Copies share the underlying node, so a Tensor
/// behaves like a handle; parameters stay aliased between a model and its
/// parameter store.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  Tensor(Shape shape, Array data);

  /// Scalar tensor of shape [1].
  static Tensor scalar(Scalar v);
  static Tensor zeros(Shape shape);
  static Tensor constant(Shape shape, Scalar v);
  static Tensor from(Shape shape, std::initializer_list<Scalar> data);
  static Tensor from(Shape shape, const std::vector<Scalar>& data);

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
  Index size() const { return node_->value.size(); }

  const Array& value() const { return node_->value; }
  Array& value() { return node_->value; }
  Scalar operator[](Index i) const { return node_->value[i]; }

  /// Value of a single-element tensor.
  Scalar item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return node_->has_grad(); }
  const Array& grad() const;
  void zero_grad() { node_->grad.resize(0); }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of the primitive operations executed while it is the
/// active tape for the current thread. Backward replays the record in
/// reverse execution order (a reverse topological order of the dynamic
/// graph), accumulating gradients additively across fan-out.
///
/// Tapes nest: the most recently constructed tape on a thread records.
/// Distinct threads have independent active tapes.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and replays the record backwards. `loss`
  /// must be a single-element tensor. Repeated calls without clearing
  /// gradients accumulate.
  void backward(const Tensor& loss);

  void clear() { steps_.clear(); }
  std::size_t size() const { return steps_.size(); }

  static Tape* active();
  void record(std::function<void()> step, std::shared_ptr<detail::TensorNode> out) {
    steps_.emplace_back(std::move(step), std::move(out));
  }

 private:
  // Closure + the node it writes through. Gradients of op outputs are
  // transient per backward pass; only leaf gradients persist (and therefore
  // accumulate across repeated backward calls).
  std::vector<std::pair<std::function<void()>, std::shared_ptr<detail::TensorNode>>> steps_;
  Tape* prev_ = nullptr;
};

/// backward() on the innermost active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Binary ops accept equal shapes, or broadcast the
// smaller operand over leading extents of the larger (its shape must equal a
// trailing suffix of the other's); single-element tensors broadcast anywhere.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, Scalar b);
Tensor mul(const Tensor& a, Scalar b);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, Scalar b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, Scalar b) { return add(a, -b); }
inline Tensor operator*(const Tensor& a, Scalar b) { return mul(a, b); }
inline Tensor operator*(Scalar a, const Tensor& b) { return mul(b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Unary elementwise.
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor pow(const Tensor& x, Scalar e);
Tensor gelu(const Tensor& x);

inline Tensor div(const Tensor& a, const Tensor& b) { return mul(a, pow(b, -1.0)); }

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, Index axis, Index start, Index len);
Tensor concat(std::span<const Tensor> parts, Index axis);
Tensor concat(std::initializer_list<Tensor> parts, Index axis);
Tensor permute(const Tensor& x, const std::vector<Index>& perm);
Tensor transpose(const Tensor& x);  // rank-2 only

/// Circularly shifts the last axis right by `k`: y[..., (i+k) mod n] = x[..., i].
Tensor roll_last(const Tensor& x, Index k);

// ---------------------------------------------------------------------------
// Contractions.
// ---------------------------------------------------------------------------

/// 2-D product op(a) * op(b), where op transposes when the flag is set.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

/// Batched 3-D product over the shared leading extent.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false,
           bool trans_b = false);

// ---------------------------------------------------------------------------
// Reductions and row ops.
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces the first `k` axes; result has the trailing shape.
Tensor sum_leading(const Tensor& x, Index k = 1);
Tensor mean_leading(const Tensor& x, Index k = 1);
/// Reduces the last axis; result has the leading shape.
Tensor sum_last(const Tensor& x);
/// Multiplies along the last axis by one coefficient per leading index:
/// x has shape s ++ [n], coeffs has shape s.
Tensor row_scale(const Tensor& x, const Tensor& coeffs);

/// Numerically stable softmax along `axis` (default last). Outputs are
/// strictly positive and sum to one along the axis.
Tensor softmax(const Tensor& x, Index axis = -1);

/// Mean over rows of -log softmax(logits)[row, target[row]]. `logits` is
/// [rows x classes] (or a single row as rank 1).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor cross_entropy(const Tensor& logits, int target);

/// Mean squared difference, scalar result.
Tensor mse(const Tensor& a, const Tensor& b);

/// Cosine similarity of two equal-length vectors, in [-1, 1]. A zero vector
/// yields 0 instead of NaN; `warned`, when given, is set in that case.
Tensor cosine_similarity(const Tensor& a, const Tensor& b, bool* warned = nullptr);
Scalar cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                         bool* warned = nullptr);

// ---------------------------------------------------------------------------
// Convolution building blocks (images stored [B, C, H, W]).
// ---------------------------------------------------------------------------

struct ConvGeom {
  Index in_c = 0, in_h = 0, in_w = 0;
  Index kh = 0, kw = 0;
  Index stride = 1, pad = 0;
  Index out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
  Index out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
};

/// Unfolds [B,C,H,W] into patch rows [B*OH*OW, C*KH*KW].
Tensor im2col(const Tensor& x, const ConvGeom& g);
/// Adjoint of im2col: folds patch rows back into [B,C,H,W] by summation.
Tensor col2im(const Tensor& cols, Index batch, const ConvGeom& g);

/// conv2d with weight [OC, IC*KH*KW] and optional bias [OC].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias,
              const ConvGeom& g);
/// Transposed conv with weight [IC, OC*KH*KW]; `g` describes the *output*
/// side (the conv this op transposes), so the result is [B, g.in_c = OC?,...].
Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor* bias,
                        const ConvGeom& g);

// ---------------------------------------------------------------------------
// Checking.
// ---------------------------------------------------------------------------

/// Max over entries of |analytic - central difference| /
/// max(1e-8, |analytic| + |numeric|) for a scalar-valued f at x.
Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  Scalar eps = 1e-5);

/// Index of the largest entry (ties: first).
Index argmax(const Array& a);

}  // namespace gw
