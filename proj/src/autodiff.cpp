#include "tcagu/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <utility>

#include <Eigen/Dense>

#include "tcagu/errors.hpp"

namespace tcagu::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMatrix>;
using ConstMap = Eigen::Map<const RowMatrix>;

struct Fault {
  std::string op;
  double factor = 1.0;
};

// Test-only; not synchronized.
Fault& fault() {
  static Fault f;
  return f;
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("Var is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ContractError("operands recorded on different tapes");
  }
  return *a.tape;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, Var a, std::size_t rank) {
  if (a.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(a.shape()));
  }
}

// y = f(x) elementwise with dy/dx = df(x, y).
template <class F, class DF>
Var unary(const char* op, Var a, F f, DF df) {
  Tape& t = tape_of(a);
  const auto& x = a.value();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ai = a.id;
  return t.record(op, a.shape(), std::move(y), {ai}, [ai, df](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ai)) return;
    const auto& g = tp.grad_of(self);
    const auto& xv = tp.value_of(ai);
    const auto& yv = tp.value_of(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

// Splits `shape` around `axis` into (outer, len, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

// Valid (output, input) index pairs along one spatial axis for kernel tap `k`.
std::vector<std::pair<std::size_t, std::size_t>> tap_pairs(std::size_t in_len, std::size_t out_len,
                                                           std::size_t k, std::size_t pad,
                                                           std::size_t tile) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t o = 0; o < out_len; ++o) {
    const long long i = static_cast<long long>(o + k) - static_cast<long long>(pad);
    if (i < 0 || i >= static_cast<long long>(in_len)) continue;
    const auto iu = static_cast<std::size_t>(i);
    if (tile > 0 && iu / tile != o / tile) continue;
    pairs.emplace_back(o, iu);
  }
  return pairs;
}

}  // namespace

// ---- basics --------------------------------------------------------------

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (numel(shape) != data.size() || shape.empty()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape s, bool rg) { return filled(std::move(s), 0.0, rg); }

Tensor Tensor::filled(Shape s, double value, bool rg) {
  const std::size_t n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, value), rg);
}

const Shape& Var::shape() const { return tape_of(*this).shape_of(id); }
const std::vector<double>& Var::value() const { return tape_of(*this).value_of(id); }
Tensor Var::detach() const { return Tensor(shape(), value()); }

void set_backward_fault(std::string op, double factor) {
  fault().op = std::move(op);
  fault().factor = factor;
}

// ---- tape ----------------------------------------------------------------

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.shape = std::move(value.shape);
  n.value = std::move(value.data);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Tensor& t) {
  Node n;
  n.op = "param";
  n.shape = t.shape;
  n.value = t.data;
  n.needs_grad = t.requires_grad;
  n.leaf = &t;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(const char* op, Shape shape, std::vector<double> value,
                 std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                             [this](std::size_t i) { return nodes_[i].needs_grad; });
  if (n.needs_grad) n.backward = std::move(fn);
  n.inputs = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& g = nodes_[id].grad;
  if (g.empty()) g.assign(nodes_[id].value.size(), 0.0);
  return g;
}

std::optional<std::size_t> Tape::first_non_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (double v : nodes_[i].value) {
      if (!std::isfinite(v)) return i;
    }
  }
  return std::nullopt;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss was recorded on another tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(nodes_[loss.id].shape));
  }
  for (auto& n : nodes_) n.grad.clear();
  visits_ = 0;
  nodes_[loss.id].grad = {1.0};
  const Fault& f = fault();
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    ++visits_;
    if (n.leaf != nullptr) {
      auto& lg = n.leaf->grad;
      if (lg.empty()) lg.assign(n.value.size(), 0.0);
      for (std::size_t k = 0; k < lg.size(); ++k) lg[k] += n.grad[k];
      continue;
    }
    if (!f.op.empty() && f.op == n.op) {
      for (double& g : n.grad) g *= f.factor;
    }
    if (n.backward) n.backward(*this, i);
  }
}

// ---- linear algebra ------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  Map(c.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
      ConstMap(a.value().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
      ConstMap(b.value().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  const std::size_t ai = a.id, bi = b.id;
  return t.record("matmul", {m, n}, std::move(c), {ai, bi},
                  [ai, bi, m, k, n](Tape& tp, std::size_t self) {
                    const auto em = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k),
                               en = static_cast<Eigen::Index>(n);
                    const ConstMap g(tp.grad_of(self).data(), em, en);
                    if (tp.needs_grad(ai)) {
                      Map(tp.grad_buffer(ai).data(), em, ek).noalias() +=
                          g * ConstMap(tp.value_of(bi).data(), ek, en).transpose();
                    }
                    if (tp.needs_grad(bi)) {
                      Map(tp.grad_buffer(bi).data(), ek, en).noalias() +=
                          ConstMap(tp.value_of(ai).data(), em, ek).transpose() * g;
                    }
                  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  require_rank("transpose", a, 2);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const auto& av = a.value();
  std::vector<double> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = av[i * n + j];
  const std::size_t ai = a.id;
  return t.record("transpose", {n, m}, std::move(y), {ai}, [ai, m, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Var add_row_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  require_rank("add_row_bias", x, 2);
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias.size() != n) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of " +
                         shape_str(x.shape()));
  }
  std::vector<double> y = x.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] += bv[j];
  const std::size_t xi = x.id, bi = bias.id;
  return t.record("add_row_bias", x.shape(), std::move(y), {xi, bi},
                  [xi, bi, m, n](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    if (tp.needs_grad(xi)) {
                      auto& gx = tp.grad_buffer(xi);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    }
                    if (tp.needs_grad(bi)) {
                      auto& gb = tp.grad_buffer(bi);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                    }
                  });
}

Var linear(Var x, Var w, std::optional<Var> b) {
  Var y = matmul(x, w);
  return b ? add_row_bias(y, *b) : y;
}

// ---- convolution ---------------------------------------------------------

Var conv2d(Var x, Var w, std::optional<Var> bias, std::size_t padding, std::size_t tile) {
  Tape& t = tape_of(x, w);
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  const std::size_t cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const std::size_t cout = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != cin) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " expects " +
                         std::to_string(w.shape()[1]) + " input channels, input is " +
                         shape_str(x.shape()));
  }
  if (w.shape()[3] != k || (k != 1 && k != 3)) {
    throw DimensionError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(w.shape()));
  }
  if (h + 2 * padding < k || wd + 2 * padding < k) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
  }
  const std::size_t ho = h + 2 * padding - k + 1, wo = wd + 2 * padding - k + 1;
  if (tile > 0 && (ho != h || wo != wd)) {
    throw DimensionError("conv2d: tiled convolution requires same-size padding");
  }
  if (bias) {
    tape_of(x, *bias);
    if (bias->size() != cout) {
      throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " vs kernel " +
                           shape_str(w.shape()));
    }
  }

  // Column matrix [cin·k·k × ho·wo] as a list of (row, output, input) taps;
  // missing taps (padding, tile borders) stay zero.
  struct Tap {
    std::size_t row, out, in;
  };
  std::vector<Tap> taps;
  for (std::size_t ky = 0; ky < k; ++ky) {
    const auto rows = tap_pairs(h, ho, ky, padding, tile);
    for (std::size_t kx = 0; kx < k; ++kx) {
      const auto cols = tap_pairs(wd, wo, kx, padding, tile);
      for (const auto& [oy, iy] : rows)
        for (const auto& [ox, ix] : cols) taps.push_back({ky * k + kx, oy * wo + ox, iy * wd + ix});
    }
  }
  const std::size_t kk = k * k, np = ho * wo;
  const bool direct = k == 1 && padding == 0;
  auto im2col = [=, &taps](const std::vector<double>& xv) {
    RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(cin * kk), static_cast<Eigen::Index>(np));
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xc = &xv[ci * h * wd];
      for (const Tap& tp : taps) cols(static_cast<Eigen::Index>(ci * kk + tp.row), static_cast<Eigen::Index>(tp.out)) = xc[tp.in];
    }
    return cols;
  };

  const auto& xv = x.value();
  const auto& wv = w.value();
  std::vector<double> y(cout * np, 0.0);
  const ConstMap wm(wv.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin * kk));
  Map ym(y.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(np));
  if (direct) {
    ym.noalias() = wm * ConstMap(xv.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(np));
  } else {
    ym.noalias() = wm * im2col(xv);
  }
  if (bias) {
    const auto& bv = bias->value();
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t p = 0; p < np; ++p) y[co * np + p] += bv[co];
  }

  std::vector<std::size_t> inputs{x.id, w.id};
  if (bias) inputs.push_back(bias->id);
  const std::size_t xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return t.record(
      "conv2d", {cout, ho, wo}, std::move(y), std::move(inputs),
      [=, taps = std::move(taps)](Tape& tp, std::size_t self) {
        const auto& g = tp.grad_of(self);
        const auto& xv = tp.value_of(xi);
        const auto& wv = tp.value_of(wi);
        const ConstMap gm(g.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(np));
        const ConstMap wm(wv.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin * kk));
        RowMatrix cols;
        if (!direct) {
          cols = RowMatrix::Zero(static_cast<Eigen::Index>(cin * kk), static_cast<Eigen::Index>(np));
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* xc = &xv[ci * h * wd];
            for (const Tap& t : taps) cols(static_cast<Eigen::Index>(ci * kk + t.row), static_cast<Eigen::Index>(t.out)) = xc[t.in];
          }
        }
        if (tp.needs_grad(wi)) {
          auto& gw = tp.grad_buffer(wi);
          Map gwm(gw.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin * kk));
          if (direct) {
            gwm.noalias() += gm * ConstMap(xv.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(np)).transpose();
          } else {
            gwm.noalias() += gm * cols.transpose();
          }
        }
        if (tp.needs_grad(xi)) {
          auto& gx = tp.grad_buffer(xi);
          if (direct) {
            Map(gx.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(np)).noalias() += wm.transpose() * gm;
          } else {
            const RowMatrix gcols = wm.transpose() * gm;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              double* gxc = &gx[ci * h * wd];
              for (const Tap& t : taps) gxc[t.in] += gcols(static_cast<Eigen::Index>(ci * kk + t.row), static_cast<Eigen::Index>(t.out));
            }
          }
        }
        if (bi && tp.needs_grad(*bi)) {
          auto& gb = tp.grad_buffer(*bi);
          for (std::size_t co = 0; co < cout; ++co) {
            double s = 0.0;
            for (std::size_t p = 0; p < np; ++p) s += g[co * np + p];
            gb[co] += s;
          }
        }
      });
}

// ---- elementwise ---------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a, b);
  std::vector<double> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return t.record("add", a.shape(), std::move(y), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    for (std::size_t id : {ai, bi}) {
      if (!tp.needs_grad(id)) continue;
      auto& gi = tp.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a, b);
  std::vector<double> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return t.record("sub", a.shape(), std::move(y), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    if (tp.needs_grad(ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.needs_grad(bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a, b);
  std::vector<double> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return t.record("mul", a.shape(), std::move(y), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& av = tp.value_of(ai);
    const auto& bv = tp.value_of(bi);
    if (tp.needs_grad(ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.needs_grad(bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var divide(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("divide", a, b);
  std::vector<double> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (std::abs(bv[i]) < 1e-12) {
      throw NumericDomainError("divide: divisor magnitude below 1e-12 at index " +
                               std::to_string(i));
    }
    y[i] /= bv[i];
  }
  const std::size_t ai = a.id, bi = b.id;
  return t.record("divide", a.shape(), std::move(y), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& bv = tp.value_of(bi);
    const auto& yv = tp.value_of(self);
    if (tp.needs_grad(ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (tp.needs_grad(bi)) {
      auto& gb = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * yv[i] / bv[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(Var a, Var s) {
  Tape& t = tape_of(a, s);
  if (s.size() != 1) {
    throw DimensionError("mul_scalar: scale must have one element, got " + shape_str(s.shape()));
  }
  const double sv = s.value()[0];
  std::vector<double> y = a.value();
  for (double& v : y) v *= sv;
  const std::size_t ai = a.id, si = s.id;
  return t.record("mul_scalar", a.shape(), std::move(y), {ai, si}, [ai, si](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& av = tp.value_of(ai);
    const double sv = tp.value_of(si)[0];
    if (tp.needs_grad(ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
    }
    if (tp.needs_grad(si)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      tp.grad_buffer(si)[0] += acc;
    }
  });
}

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sqrt(Var a) {
  for (double v : a.value()) {
    if (v < 0.0) throw NumericDomainError("sqrt: negative input");
  }
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var square(Var a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp_min(Var a, double lo) {
  return unary(
      "clamp_min", a, [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var relu(Var a) { return clamp_min(a, 0.0); }

Var leaky_relu(Var a, double negative_slope) {
  return unary(
      "leaky_relu", a, [negative_slope](double x) { return x > 0.0 ? x : negative_slope * x; },
      [negative_slope](double x, double) { return x > 0.0 ? 1.0 : negative_slope; });
}

Var arccos(Var a) {
  const double lo = -1.0 + kArccosEps, hi = 1.0 - kArccosEps;
  return unary(
      "arccos", a, [lo, hi](double x) { return std::acos(std::clamp(x, lo, hi)); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? -1.0 / std::sqrt(1.0 - x * x) : 0.0; });
}

// ---- reductions ----------------------------------------------------------

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value()) s += v;
  const std::size_t ai = a.id;
  return t.record("sum", {1}, {s}, {ai}, [ai](Tape& tp, std::size_t self) {
    const double g = tp.grad_of(self)[0];
    for (double& v : tp.grad_buffer(ai)) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var sum(Var a, std::size_t axis) {
  Tape& t = tape_of(a);
  const AxisSplit s = split_axis("sum", a.shape(), axis);
  const auto& av = a.value();
  std::vector<double> y(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += av[(o * s.len + l) * s.inner + i];
  const std::size_t ai = a.id;
  return t.record("sum_axis", drop_axis(a.shape(), axis), std::move(y), {ai},
                  [ai, s](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    auto& ga = tp.grad_buffer(ai);
                    for (std::size_t o = 0; o < s.outer; ++o)
                      for (std::size_t l = 0; l < s.len; ++l)
                        for (std::size_t i = 0; i < s.inner; ++i)
                          ga[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
                  });
}

Var l2_norm(Var a, std::size_t axis) {
  Tape& t = tape_of(a);
  const AxisSplit s = split_axis("l2_norm", a.shape(), axis);
  const auto& av = a.value();
  std::vector<double> y(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double v = av[(o * s.len + l) * s.inner + i];
        y[o * s.inner + i] += v * v;
      }
  for (double& v : y) v = std::sqrt(v);
  const std::size_t ai = a.id;
  return t.record("l2_norm", drop_axis(a.shape(), axis), std::move(y), {ai},
                  [ai, s](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    const auto& yv = tp.value_of(self);
                    const auto& av = tp.value_of(ai);
                    auto& ga = tp.grad_buffer(ai);
                    for (std::size_t o = 0; o < s.outer; ++o)
                      for (std::size_t l = 0; l < s.len; ++l)
                        for (std::size_t i = 0; i < s.inner; ++i) {
                          const double n = yv[o * s.inner + i];
                          if (n == 0.0) continue;
                          const std::size_t idx = (o * s.len + l) * s.inner + i;
                          ga[idx] += g[o * s.inner + i] * av[idx] / n;
                        }
                  });
}

Var softmax(Var a, std::size_t axis) {
  Tape& t = tape_of(a);
  const AxisSplit s = split_axis("softmax", a.shape(), axis);
  const auto& av = a.value();
  std::vector<double> y(av.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
      double mx = av[at(0)];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, av[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        y[at(l)] = std::exp(av[at(l)] - mx);
        z += y[at(l)];
      }
      for (std::size_t l = 0; l < s.len; ++l) y[at(l)] /= z;
    }
  }
  const std::size_t ai = a.id;
  return t.record("softmax", a.shape(), std::move(y), {ai}, [ai, s](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& yv = tp.value_of(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g[at(l)] * yv[at(l)];
        for (std::size_t l = 0; l < s.len; ++l) ga[at(l)] += yv[at(l)] * (g[at(l)] - dot);
      }
    }
  });
}

Var vector_angle(Var a, Var b, std::size_t axis) {
  Tape& t = tape_of(a, b);
  require_same_shape("vector_angle", a, b);
  const AxisSplit s = split_axis("vector_angle", a.shape(), axis);
  const auto& av = a.value();
  const auto& bv = b.value();
  const double lo = -1.0 + kArccosEps, hi = 1.0 - kArccosEps;
  const std::size_t count = s.outer * s.inner;
  std::vector<double> y(count);
  // per slice: 0 clamped, 1 chord form, 2 floored denominator
  auto kind = std::make_shared<std::vector<int>>(count);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        dot += av[at(l)] * bv[at(l)];
        na += av[at(l)] * av[at(l)];
        nb += bv[at(l)] * bv[at(l)];
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      const double den = std::max(na * nb, 1e-8);
      const double c = dot / den;
      const std::size_t k = o * s.inner + i;
      if (c <= lo || c >= hi) {
        (*kind)[k] = 0;
        y[k] = std::acos(std::clamp(c, lo, hi));
      } else if (na * nb < 1e-8) {
        (*kind)[k] = 2;
        y[k] = std::acos(c);
      } else {
        (*kind)[k] = 1;
        const double sign = c >= 0.0 ? -1.0 : 1.0;
        double chord = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) {
          const double d = av[at(l)] / na + sign * bv[at(l)] / nb;
          chord += d * d;
        }
        const double half = 2.0 * std::asin(std::min(1.0, 0.5 * std::sqrt(chord)));
        y[k] = c >= 0.0 ? half : std::numbers::pi - half;
      }
    }
  }
  const std::size_t ai = a.id, bi = b.id;
  return t.record("vector_angle", drop_axis(a.shape(), axis), std::move(y), {ai, bi},
                  [ai, bi, s, kind](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    const auto& yv = tp.value_of(self);
                    const auto& av = tp.value_of(ai);
                    const auto& bv = tp.value_of(bi);
                    const bool want_a = tp.needs_grad(ai), want_b = tp.needs_grad(bi);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t i = 0; i < s.inner; ++i) {
                        const std::size_t k = o * s.inner + i;
                        if ((*kind)[k] == 0 || g[k] == 0.0) continue;
                        auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
                        double na = 0.0, nb = 0.0, dot = 0.0;
                        for (std::size_t l = 0; l < s.len; ++l) {
                          dot += av[at(l)] * bv[at(l)];
                          na += av[at(l)] * av[at(l)];
                          nb += bv[at(l)] * bv[at(l)];
                        }
                        na = std::sqrt(na);
                        nb = std::sqrt(nb);
                        if ((*kind)[k] == 2) {
                          const double c = dot / 1e-8;
                          const double f = -g[k] / std::sqrt(1.0 - c * c) / 1e-8;
                          for (std::size_t l = 0; l < s.len; ++l) {
                            if (want_a) tp.grad_buffer(ai)[at(l)] += f * bv[at(l)];
                            if (want_b) tp.grad_buffer(bi)[at(l)] += f * av[at(l)];
                          }
                          continue;
                        }
                        // d theta / d a = -(v - cos(theta) u) / (|a| sin(theta)), u, v unit
                        const double sn = std::sin(yv[k]);
                        if (sn == 0.0) continue;
                        const double cs = std::cos(yv[k]);
                        for (std::size_t l = 0; l < s.len; ++l) {
                          const double u = av[at(l)] / na, v = bv[at(l)] / nb;
                          if (want_a) tp.grad_buffer(ai)[at(l)] -= g[k] * (v - cs * u) / (na * sn);
                          if (want_b) tp.grad_buffer(bi)[at(l)] -= g[k] * (u - cs * v) / (nb * sn);
                        }
                      }
                    }
                  });
}

// ---- layout --------------------------------------------------------------

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const std::size_t ai = a.id;
  return t.record("reshape", std::move(shape), a.value(), {ai}, [ai](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var element(Var a, std::size_t index) {
  Tape& t = tape_of(a);
  if (index >= a.size()) {
    throw DimensionError("element: index " + std::to_string(index) + " out of range for " +
                         shape_str(a.shape()));
  }
  const std::size_t ai = a.id;
  return t.record("element", {1}, {a.value()[index]}, {ai}, [ai, index](Tape& tp, std::size_t self) {
    tp.grad_buffer(ai)[index] += tp.grad_of(self)[0];
  });
}

Var concat_rows(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_rank("concat_rows", a, 2);
  require_rank("concat_rows", b, 2);
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("concat_rows: column counts differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> y = a.value();
  y.insert(y.end(), b.value().begin(), b.value().end());
  const std::size_t ai = a.id, bi = b.id, na = a.size();
  return t.record("concat_rows", {a.shape()[0] + b.shape()[0], a.shape()[1]}, std::move(y),
                  {ai, bi}, [ai, bi, na](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    if (tp.needs_grad(ai)) {
                      auto& ga = tp.grad_buffer(ai);
                      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                    }
                    if (tp.needs_grad(bi)) {
                      auto& gb = tp.grad_buffer(bi);
                      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                    }
                  });
}

Var concat_cols(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_rank("concat_cols", a, 2);
  require_rank("concat_cols", b, 2);
  const std::size_t m = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
  if (b.shape()[0] != m) {
    throw DimensionError("concat_cols: row counts differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> y(m * (na + nb));
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(&av[i * na], na, &y[i * (na + nb)]);
    std::copy_n(&bv[i * nb], nb, &y[i * (na + nb) + na]);
  }
  const std::size_t ai = a.id, bi = b.id;
  return t.record("concat_cols", {m, na + nb}, std::move(y), {ai, bi},
                  [ai, bi, m, na, nb](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    if (tp.needs_grad(ai)) {
                      auto& ga = tp.grad_buffer(ai);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * (na + nb) + j];
                    }
                    if (tp.needs_grad(bi)) {
                      auto& gb = tp.grad_buffer(bi);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < nb; ++j)
                          gb[i * nb + j] += g[i * (na + nb) + na + j];
                    }
                  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(a);
  require_rank("slice_rows", a, 2);
  const std::size_t n = a.shape()[1];
  if (begin >= end || end > a.shape()[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + shape_str(a.shape()));
  }
  std::vector<double> y(a.value().begin() + static_cast<std::ptrdiff_t>(begin * n),
                        a.value().begin() + static_cast<std::ptrdiff_t>(end * n));
  const std::size_t ai = a.id;
  return t.record("slice_rows", {end - begin, n}, std::move(y), {ai},
                  [ai, begin, n](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    auto& ga = tp.grad_buffer(ai);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[begin * n + i] += g[i];
                  });
}

Var pad2d(Var x, std::size_t hp, std::size_t wp) {
  Tape& t = tape_of(x);
  require_rank("pad2d", x, 3);
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (hp < h || wp < w) throw DimensionError("pad2d: target smaller than " + shape_str(x.shape()));
  const auto& xv = x.value();
  std::vector<double> y(c * hp * wp, 0.0);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t r = 0; r < h; ++r) std::copy_n(&xv[(ci * h + r) * w], w, &y[(ci * hp + r) * wp]);
  const std::size_t xi = x.id;
  return t.record("pad2d", {c, hp, wp}, std::move(y), {xi}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& gx = tp.grad_buffer(xi);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) gx[(ci * h + r) * w + q] += g[(ci * hp + r) * wp + q];
  });
}

Var crop2d(Var x, std::size_t h, std::size_t w) {
  Tape& t = tape_of(x);
  require_rank("crop2d", x, 3);
  const std::size_t c = x.shape()[0], hp = x.shape()[1], wp = x.shape()[2];
  if (h > hp || w > wp || h == 0 || w == 0) {
    throw DimensionError("crop2d: invalid crop of " + shape_str(x.shape()));
  }
  const auto& xv = x.value();
  std::vector<double> y(c * h * w);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t r = 0; r < h; ++r) std::copy_n(&xv[(ci * hp + r) * wp], w, &y[(ci * h + r) * w]);
  const std::size_t xi = x.id;
  return t.record("crop2d", {c, h, w}, std::move(y), {xi}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& gx = tp.grad_buffer(xi);
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) gx[(ci * hp + r) * wp + q] += g[(ci * h + r) * w + q];
  });
}

namespace {

struct PatchGrid {
  std::size_t c, hp, wp, m, rows, cols;
  std::size_t count() const { return rows * cols; }
  // Flat index into the [C×Hp×Wp] map for patch p, channel ci, offset (dy, dx).
  std::size_t at(std::size_t p, std::size_t ci, std::size_t dy, std::size_t dx) const {
    const std::size_t r = (p / cols) * m + dy, q = (p % cols) * m + dx;
    return (ci * hp + r) * wp + q;
  }
};

PatchGrid patch_grid(const char* op, const Shape& shape, std::size_t m) {
  if (shape.size() != 3) throw DimensionError(std::string(op) + ": expected [C×H×W], got " + shape_str(shape));
  if (m == 0 || shape[1] % m != 0 || shape[2] % m != 0) {
    throw DimensionError(std::string(op) + ": extents of " + shape_str(shape) +
                         " not divisible by patch size " + std::to_string(m));
  }
  return PatchGrid{shape[0], shape[1], shape[2], m, shape[1] / m, shape[2] / m};
}

}  // namespace

Var patch_mean(Var x, std::size_t m) {
  Tape& t = tape_of(x);
  const PatchGrid pg = patch_grid("patch_mean", x.shape(), m);
  const auto& xv = x.value();
  const double inv = 1.0 / static_cast<double>(m * m);
  std::vector<double> y(pg.count() * pg.c, 0.0);
  for (std::size_t p = 0; p < pg.count(); ++p)
    for (std::size_t ci = 0; ci < pg.c; ++ci) {
      double s = 0.0;
      for (std::size_t dy = 0; dy < m; ++dy)
        for (std::size_t dx = 0; dx < m; ++dx) s += xv[pg.at(p, ci, dy, dx)];
      y[p * pg.c + ci] = s * inv;
    }
  const std::size_t xi = x.id;
  return t.record("patch_mean", {pg.count(), pg.c}, std::move(y), {xi},
                  [xi, pg, inv](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    auto& gx = tp.grad_buffer(xi);
                    for (std::size_t p = 0; p < pg.count(); ++p)
                      for (std::size_t ci = 0; ci < pg.c; ++ci)
                        for (std::size_t dy = 0; dy < pg.m; ++dy)
                          for (std::size_t dx = 0; dx < pg.m; ++dx)
                            gx[pg.at(p, ci, dy, dx)] += g[p * pg.c + ci] * inv;
                  });
}

Var patchify(Var x, std::size_t m) {
  Tape& t = tape_of(x);
  const PatchGrid pg = patch_grid("patchify", x.shape(), m);
  const std::size_t width = pg.c * m * m;
  const auto& xv = x.value();
  std::vector<double> y(pg.count() * width);
  for (std::size_t p = 0; p < pg.count(); ++p)
    for (std::size_t ci = 0; ci < pg.c; ++ci)
      for (std::size_t dy = 0; dy < m; ++dy)
        for (std::size_t dx = 0; dx < m; ++dx)
          y[p * width + (ci * m + dy) * m + dx] = xv[pg.at(p, ci, dy, dx)];
  const std::size_t xi = x.id;
  return t.record("patchify", {pg.count(), width}, std::move(y), {xi},
                  [xi, pg, width](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    auto& gx = tp.grad_buffer(xi);
                    const std::size_t m = pg.m;
                    for (std::size_t p = 0; p < pg.count(); ++p)
                      for (std::size_t ci = 0; ci < pg.c; ++ci)
                        for (std::size_t dy = 0; dy < m; ++dy)
                          for (std::size_t dx = 0; dx < m; ++dx)
                            gx[pg.at(p, ci, dy, dx)] += g[p * width + (ci * m + dy) * m + dx];
                  });
}

Var unpatchify(Var x, std::size_t channels, std::size_t hp, std::size_t wp, std::size_t m) {
  Tape& t = tape_of(x);
  const PatchGrid pg = patch_grid("unpatchify", {channels, hp, wp}, m);
  const std::size_t width = channels * m * m;
  if (x.shape() != Shape{pg.count(), width}) {
    throw DimensionError("unpatchify: expected " + shape_str({pg.count(), width}) + ", got " +
                         shape_str(x.shape()));
  }
  const auto& xv = x.value();
  std::vector<double> y(channels * hp * wp);
  for (std::size_t p = 0; p < pg.count(); ++p)
    for (std::size_t ci = 0; ci < channels; ++ci)
      for (std::size_t dy = 0; dy < m; ++dy)
        for (std::size_t dx = 0; dx < m; ++dx)
          y[pg.at(p, ci, dy, dx)] = xv[p * width + (ci * m + dy) * m + dx];
  const std::size_t xi = x.id;
  return t.record("unpatchify", {channels, hp, wp}, std::move(y), {xi},
                  [xi, pg, width](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    auto& gx = tp.grad_buffer(xi);
                    const std::size_t m = pg.m;
                    for (std::size_t p = 0; p < pg.count(); ++p)
                      for (std::size_t ci = 0; ci < pg.c; ++ci)
                        for (std::size_t dy = 0; dy < m; ++dy)
                          for (std::size_t dx = 0; dx < m; ++dx)
                            gx[p * width + (ci * m + dy) * m + dx] += g[pg.at(p, ci, dy, dx)];
                  });
}

// ---- sparse graph kernels ------------------------------------------------

Var edge_sqdist(Var f, std::shared_ptr<const SparsePattern> pattern) {
  Tape& t = tape_of(f);
  require_rank("edge_sqdist", f, 2);
  const std::size_t b = f.shape()[0], n = f.shape()[1];
  if (pattern->n != n) {
    throw DimensionError("edge_sqdist: graph over " + std::to_string(pattern->n) +
                         " nodes, features " + shape_str(f.shape()));
  }
  const auto& fv = f.value();
  std::vector<double> y(pattern->nnz(), 0.0);
  for (std::size_t k = 0; k < pattern->nnz(); ++k) {
    const std::size_t i = pattern->row[k], j = pattern->col[k];
    double s = 0.0;
    for (std::size_t c = 0; c < b; ++c) {
      const double d = fv[c * n + i] - fv[c * n + j];
      s += d * d;
    }
    y[k] = s;
  }
  const std::size_t fi = f.id;
  return t.record("edge_sqdist", {pattern->nnz()}, std::move(y), {fi},
                  [fi, b, n, pattern](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    const auto& fv = tp.value_of(fi);
                    auto& gf = tp.grad_buffer(fi);
                    for (std::size_t k = 0; k < pattern->nnz(); ++k) {
                      const std::size_t i = pattern->row[k], j = pattern->col[k];
                      if (i == j || g[k] == 0.0) continue;
                      for (std::size_t c = 0; c < b; ++c) {
                        const double d = 2.0 * g[k] * (fv[c * n + i] - fv[c * n + j]);
                        gf[c * n + i] += d;
                        gf[c * n + j] -= d;
                      }
                    }
                  });
}

Var sym_normalize(Var values, std::shared_ptr<const SparsePattern> pattern) {
  Tape& t = tape_of(values);
  if (values.size() != pattern->nnz()) {
    throw DimensionError("sym_normalize: " + std::to_string(values.size()) + " values for " +
                         std::to_string(pattern->nnz()) + " stored entries");
  }
  const auto& v = values.value();
  std::vector<double> deg(pattern->n, 0.0);
  for (std::size_t k = 0; k < pattern->nnz(); ++k) deg[pattern->row[k]] += v[k];
  for (std::size_t i = 0; i < pattern->n; ++i) {
    if (!(deg[i] > 0.0)) {
      throw NumericDomainError("sym_normalize: non-positive degree at node " + std::to_string(i));
    }
  }
  std::vector<double> y(pattern->nnz());
  for (std::size_t k = 0; k < pattern->nnz(); ++k) {
    y[k] = v[k] / std::sqrt(deg[pattern->row[k]] * deg[pattern->col[k]]);
  }
  const std::size_t vi = values.id;
  return t.record("sym_normalize", {pattern->nnz()}, std::move(y), {vi},
                  [vi, pattern, deg = std::move(deg)](Tape& tp, std::size_t self) {
                    const auto& g = tp.grad_of(self);
                    const auto& yv = tp.value_of(self);
                    auto& gv = tp.grad_buffer(vi);
                    std::vector<double> gdeg(pattern->n, 0.0);
                    for (std::size_t k = 0; k < pattern->nnz(); ++k) {
                      const std::size_t i = pattern->row[k], j = pattern->col[k];
                      gv[k] += g[k] / std::sqrt(deg[i] * deg[j]);
                      gdeg[i] -= 0.5 * g[k] * yv[k] / deg[i];
                      gdeg[j] -= 0.5 * g[k] * yv[k] / deg[j];
                    }
                    for (std::size_t k = 0; k < pattern->nnz(); ++k) gv[k] += gdeg[pattern->row[k]];
                  });
}

Var spmm(Var z, std::shared_ptr<const SparsePattern> pattern, Var values) {
  Tape& t = tape_of(z, values);
  require_rank("spmm", z, 2);
  const std::size_t b = z.shape()[0], n = z.shape()[1];
  if (pattern->n != n || values.size() != pattern->nnz()) {
    throw DimensionError("spmm: operand " + shape_str(z.shape()) + " vs graph over " +
                         std::to_string(pattern->n) + " nodes");
  }
  const auto& zv = z.value();
  const auto& av = values.value();
  std::vector<double> y(b * n, 0.0);
  for (std::size_t c = 0; c < b; ++c) {
    const double* zc = &zv[c * n];
    double* yc = &y[c * n];
    for (std::size_t k = 0; k < pattern->nnz(); ++k) yc[pattern->col[k]] += zc[pattern->row[k]] * av[k];
  }
  const std::size_t zi = z.id, ai = values.id;
  return t.record("spmm", {b, n}, std::move(y), {zi, ai}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& zv = tp.value_of(zi);
    const auto& av = tp.value_of(ai);
    if (tp.needs_grad(zi)) {
      auto& gz = tp.grad_buffer(zi);
      for (std::size_t c = 0; c < b; ++c)
        for (std::size_t k = 0; k < pattern->nnz(); ++k)
          gz[c * n + pattern->row[k]] += g[c * n + pattern->col[k]] * av[k];
    }
    if (tp.needs_grad(ai)) {
      auto& ga = tp.grad_buffer(ai);
      for (std::size_t k = 0; k < pattern->nnz(); ++k) {
        double s = 0.0;
        for (std::size_t c = 0; c < b; ++c) s += g[c * n + pattern->col[k]] * zv[c * n + pattern->row[k]];
        ga[k] += s;
      }
    }
  });
}

// ---- verification --------------------------------------------------------

double finite_diff_check(const std::function<Var(Tape&)>& loss_fn, Tensor& params, double h) {
  if (!(h >= 1e-6 && h <= 1e-4)) {
    throw ContractError("finite_diff_check: step must lie in [1e-6, 1e-4]");
  }
  auto eval = [&]() {
    Tape tape;
    const double v = loss_fn(tape).value().at(0);
    if (!std::isfinite(v)) throw NumericDomainError("finite_diff_check: loss is not finite");
    return v;
  };

  const bool saved_rg = params.requires_grad;
  params.requires_grad = true;
  params.zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(loss.value().at(0))) {
      throw NumericDomainError("finite_diff_check: loss is not finite");
    }
    tape.backward(loss);
  }
  std::vector<double> analytic = params.has_grad() ? params.grad : std::vector<double>(params.size(), 0.0);

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params.data[i];
    params.data[i] = orig + h;
    const double up = eval();
    params.data[i] = orig - h;
    const double down = eval();
    params.data[i] = orig;
    const double central = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - central) /
                       (std::abs(analytic[i]) + std::abs(central) + 1e-8);
    worst = std::max(worst, err);
  }
  params.requires_grad = saved_rg;
  params.zero_grad();
  return worst;
}

}  // namespace tcagu::ad
