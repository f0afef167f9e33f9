#pragma once

// Tape-based reverse-mode differentiation over dense float64 tensors.
//
// A Tape records every operation applied to Vars in creation order, which is
// already a valid topological order; backward() walks it once in reverse.
// Parameters live outside the tape as Tensors and are bound per forward pass
// with Tape::param(); their gradients accumulate into Tensor::grad.

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tcagu::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;  // row-major
  bool requires_grad = false;
  std::vector<double> grad;  // empty when no gradient has been accumulated

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d, bool rg = false);

  static Tensor zeros(Shape s, bool rg = false);
  static Tensor filled(Shape s, double value, bool rg = false);

  std::size_t size() const { return data.size(); }
  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.clear(); }
};

class Tape;

/// Lightweight handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Shape& shape() const;
  const std::vector<double>& value() const;
  std::size_t size() const { return value().size(); }
  /// Snapshot of the forward value as a detached Tensor.
  Tensor detach() const;
};

/// Sparse N×N pattern in CSR form; used for graph adjacency values.
struct SparsePattern {
  std::size_t n = 0;
  std::vector<std::size_t> row_ptr;  // n + 1 entries
  std::vector<std::size_t> col;      // nnz entries
  std::vector<std::size_t> row;      // nnz entries (expanded row index)

  std::size_t nnz() const { return col.size(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Records a constant; never receives gradient.
  Var constant(Tensor value);
  /// Binds a parameter tensor; gradient flows into `t.grad` when t.requires_grad.
  Var param(Tensor& t);

  /// Populates gradients of every requires_grad leaf reachable from `loss`.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  /// Number of nodes whose backward rule ran during the last backward().
  std::size_t last_backward_visits() const { return visits_; }

  // Used by kernel implementations.
  Var record(const char* op, Shape shape, std::vector<double> value,
             std::vector<std::size_t> inputs, BackwardFn fn);
  const char* op_of(std::size_t id) const { return nodes_[id].op; }
  /// First recorded node holding a NaN/Inf value, if any.
  std::optional<std::size_t> first_non_finite() const;
  const Shape& shape_of(std::size_t id) const { return nodes_[id].shape; }
  const std::vector<double>& value_of(std::size_t id) const { return nodes_[id].value; }
  const std::vector<double>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient accumulator for `id`, allocated as zeros on first use.
  std::vector<double>& grad_buffer(std::size_t id);

 private:
  struct Node {
    const char* op = "leaf";
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    bool needs_grad = false;
    Tensor* leaf = nullptr;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // deque keeps value references stable across record()
  std::size_t visits_ = 0;
};

/// Test hook: scales the upstream gradient fed to every backward rule of
/// `op` by `factor`. Pass an empty name to clear. Process-global.
void set_backward_fault(std::string op, double factor);

// ---- linear algebra ------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
/// x [m×n] + bias [n] broadcast over rows.
Var add_row_bias(Var x, Var bias);
/// x·w + b for x [m×in], w [in×out], b [out].
Var linear(Var x, Var w, std::optional<Var> b);

// ---- convolution ---------------------------------------------------------

/// Stride-1 cross-correlation of x [Cin×H×W] with w [Cout×Cin×k×k], k ∈ {1,3}.
/// When `tile` > 0, every tile×tile block is treated as an isolated image so
/// taps never read across block boundaries.
Var conv2d(Var x, Var w, std::optional<Var> bias, std::size_t padding, std::size_t tile = 0);

// ---- elementwise ---------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a · s where s is a one-element Var.
Var mul_scalar(Var a, Var s);
Var exp(Var a);
Var sqrt(Var a);
Var square(Var a);
Var clamp_min(Var a, double lo);
Var clamp(Var a, double lo, double hi);
Var relu(Var a);
Var leaky_relu(Var a, double negative_slope);
inline constexpr double kArccosEps = 1e-7;
/// arccos with its input clamped to [-1+kArccosEps, 1-kArccosEps].
Var arccos(Var a);

// ---- reductions ----------------------------------------------------------

Var sum(Var a);
Var mean(Var a);
Var sum(Var a, std::size_t axis);
Var l2_norm(Var a, std::size_t axis);
Var softmax(Var a, std::size_t axis);
/// Angle between matching slices of a and b along `axis`:
/// arccos(<a,b> / max(|a||b|, 1e-8)) with the arccos clamp. Evaluated through
/// the half-chord so small angles keep full precision.
Var vector_angle(Var a, Var b, std::size_t axis);

// ---- layout --------------------------------------------------------------

Var reshape(Var a, Shape shape);
Var element(Var a, std::size_t index);
Var concat_rows(Var a, Var b);
Var concat_cols(Var a, Var b);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
/// Zero-pads x [C×H×W] on the bottom/right to [C×Hp×Wp].
Var pad2d(Var x, std::size_t hp, std::size_t wp);
/// Keeps the top-left [C×H×W] block of x.
Var crop2d(Var x, std::size_t h, std::size_t w);
/// Mean over each m×m block of x [C×Hp×Wp] -> [patches×C], patches in row-major order.
Var patch_mean(Var x, std::size_t m);
/// Flattens each m×m block of x [C×Hp×Wp] -> [patches × C·m·m] (c, dy, dx order).
Var patchify(Var x, std::size_t m);
/// Inverse of patchify: [patches × C·m·m] -> [C×Hp×Wp].
Var unpatchify(Var x, std::size_t channels, std::size_t hp, std::size_t wp, std::size_t m);

// ---- sparse graph kernels ------------------------------------------------

/// ‖f_i − f_j‖² for every stored (i, j) of the pattern; f is [B×N].
Var edge_sqdist(Var f, std::shared_ptr<const SparsePattern> pattern);
/// D^{-1/2} Ã D^{-1/2} with D the row sums of Ã; values follow the pattern.
Var sym_normalize(Var values, std::shared_ptr<const SparsePattern> pattern);
/// Z·Â for Z [B×N] and sparse Â given by (pattern, values).
Var spmm(Var z, std::shared_ptr<const SparsePattern> pattern, Var values);

// ---- verification --------------------------------------------------------

/// Max over coordinates of |analytic − central| / (|analytic| + |central| + 1e-8)
/// for the gradient of `loss_fn` with respect to `params`. `loss_fn` must bind
/// `params` through Tape::param and be deterministic.
double finite_diff_check(const std::function<Var(Tape&)>& loss_fn, Tensor& params, double h);

}  // namespace tcagu::ad
