#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mcaforge/error.hpp"
#include "mcaforge/tensor.hpp"

namespace mcaforge {

// Handle into a GradTape. Only meaningful for the tape that produced it.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
};

// Append-only record of elementary operations supporting reverse-mode
// differentiation. Nodes keep a double-precision value buffer; the public
// float32 tensor is the rounded view of that buffer, materialized lazily on
// first access so intermediate nodes that are never read cost no extra
// memory. Chaining in double keeps analytic gradients and finite-difference
// probes of the same graph in tight agreement. Playback for backward()
// walks nodes in exact reverse application order and accumulates gradients
// additively at fan-out. A tape is single-owner: do not share one across
// threads.
class GradTape {
  enum class Op {
    Leaf, Matmul, MatmulNT, Add, Sub, Mul, Scale, AddRow, SoftmaxRows,
    LayerNorm, ConcatRows, SliceRows, ConcatCols, SliceCols, Gelu,
    Sum, SumSquares, Mse,
  };

  struct Node {
    Op op;
    std::vector<std::uint32_t> args;
    std::vector<std::size_t> shape;
    std::vector<double> val;
    mutable Tensor val32;
    mutable bool has32 = false;
    bool requires_grad = false;
    double param = 0.0;          // scale factor / layer_norm eps
    std::size_t lo = 0, hi = 0;  // slice bounds
  };

 public:
  Var leaf(const Tensor& value, bool requires_grad = true) {
    Node n;
    n.op = Op::Leaf;
    n.shape = value.shape();
    n.val.resize(value.numel());
    for (std::size_t i = 0; i < value.numel(); ++i) n.val[i] = value[i];
    n.val32 = value;
    n.has32 = true;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(const Tensor& value) { return leaf(value, false); }

  const Tensor& value(Var v) const {
    const Node& n = node(v);
    if (!n.has32) {
      Tensor t(n.shape);
      for (std::size_t i = 0; i < n.val.size(); ++i) t[i] = static_cast<float>(n.val[i]);
      n.val32 = std::move(t);
      n.has32 = true;
    }
    return n.val32;
  }
  const std::vector<std::size_t>& shape(Var v) const { return node(v).shape; }
  const std::vector<double>& shadow(Var v) const { return node(v).val; }

  // Double-precision value of a single-element node (losses, reductions).
  double scalar(Var v) const {
    const Node& n = node(v);
    if (n.val.size() != 1) throw ShapeError("scalar: node is not a single value");
    return n.val[0];
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- elementary operations -------------------------------------------

  Var matmul(Var a, Var b) {
    const Node &na = node(a), &nb = node(b);
    require_2d(na, "matmul");
    require_2d(nb, "matmul");
    if (na.shape[1] != nb.shape[0]) throw ShapeError("matmul: inner dimensions differ");
    Node n = make(Op::Matmul, {a.id, b.id}, {na.shape[0], nb.shape[1]});
    mm(n.val.data(), na.val.data(), nb.val.data(), na.shape[0], na.shape[1], nb.shape[1]);
    return push(std::move(n));
  }

  // scale_factor * (a * b^T) without materializing the transpose or a
  // separate scaling node. Attention scores dominate tape memory, so the
  // fusion halves the largest buffers.
  Var matmul_nt(Var a, Var b, double scale_factor = 1.0) {
    const Node &na = node(a), &nb = node(b);
    require_2d(na, "matmul_nt");
    require_2d(nb, "matmul_nt");
    if (na.shape[1] != nb.shape[1]) throw ShapeError("matmul_nt: trailing dimensions differ");
    const std::size_t m = na.shape[0], k = na.shape[1], r = nb.shape[0];
    Node n = make(Op::MatmulNT, {a.id, b.id}, {m, r});
    n.param = scale_factor;
    std::vector<double> bt(k * r);
    transpose_into(bt.data(), nb.val.data(), r, k);
    mm(n.val.data(), na.val.data(), bt.data(), m, k, r);
    if (scale_factor != 1.0) {
      for (double& v : n.val) v *= scale_factor;
    }
    return push(std::move(n));
  }

  Var add(Var a, Var b) { return ewise(Op::Add, a, b); }
  Var sub(Var a, Var b) { return ewise(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return ewise(Op::Mul, a, b); }

  Var scale(Var a, double s) {
    const Node& na = node(a);
    Node n = make(Op::Scale, {a.id}, na.shape);
    n.param = s;
    for (std::size_t i = 0; i < na.val.size(); ++i) n.val[i] = na.val[i] * s;
    return push(std::move(n));
  }

  // Broadcast-add a [1, n] row over every row of a [m, n] tensor.
  Var add_row(Var a, Var row) {
    const Node &na = node(a), &nr = node(row);
    require_2d(na, "add_row");
    if (nr.shape.size() != 2 || nr.shape[0] != 1 || nr.shape[1] != na.shape[1]) {
      throw ShapeError("add_row: row operand must have shape [1, cols]");
    }
    const std::size_t m = na.shape[0], c = na.shape[1];
    Node n = make(Op::AddRow, {a.id, row.id}, na.shape);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) n.val[i * c + j] = na.val[i * c + j] + nr.val[j];
    return push(std::move(n));
  }

  Var softmax_rows(Var a) {
    const Node& na = node(a);
    require_2d(na, "softmax_rows");
    const std::size_t m = na.shape[0], c = na.shape[1];
    Node n = make(Op::SoftmaxRows, {a.id}, na.shape);
    for (std::size_t i = 0; i < m; ++i) {
      const double* x = na.val.data() + i * c;
      double* y = n.val.data() + i * c;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        y[j] = std::exp(x[j] - mx);
        denom += y[j];
      }
      for (std::size_t j = 0; j < c; ++j) y[j] /= denom;
    }
    return push(std::move(n));
  }

  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Node &nx = node(x), &ng = node(gain), &nb = node(bias);
    require_2d(nx, "layer_norm");
    const std::size_t m = nx.shape[0], c = nx.shape[1];
    if (ng.val.size() != c || nb.val.size() != c) {
      throw ShapeError("layer_norm: gain/bias length must equal row width");
    }
    if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
    Node n = make(Op::LayerNorm, {x.id, gain.id, bias.id}, nx.shape);
    n.param = eps;
    for (std::size_t i = 0; i < m; ++i) {
      const double* xr = nx.val.data() + i * c;
      double* yr = n.val.data() + i * c;
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += xr[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < c; ++j) yr[j] = (xr[j] - mean) * inv * ng.val[j] + nb.val[j];
    }
    return push(std::move(n));
  }

  Var concat_rows(Var a, Var b) {
    const Node &na = node(a), &nb = node(b);
    require_2d(na, "concat_rows");
    require_2d(nb, "concat_rows");
    if (na.shape[1] != nb.shape[1]) throw ShapeError("concat_rows: trailing dimensions differ");
    Node n = make(Op::ConcatRows, {a.id, b.id}, {na.shape[0] + nb.shape[0], na.shape[1]});
    std::copy(na.val.begin(), na.val.end(), n.val.begin());
    std::copy(nb.val.begin(), nb.val.end(), n.val.begin() + static_cast<std::ptrdiff_t>(na.val.size()));
    return push(std::move(n));
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    const Node& na = node(a);
    require_2d(na, "slice_rows");
    if (begin > end || end > na.shape[0]) throw ShapeError("slice_rows: invalid range");
    const std::size_t c = na.shape[1];
    Node n = make(Op::SliceRows, {a.id}, {end - begin, c});
    n.lo = begin;
    n.hi = end;
    std::copy(na.val.begin() + static_cast<std::ptrdiff_t>(begin * c),
              na.val.begin() + static_cast<std::ptrdiff_t>(end * c), n.val.begin());
    return push(std::move(n));
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    std::size_t rows = node(parts[0]).shape.at(0), total = 0;
    std::vector<std::uint32_t> args;
    for (Var p : parts) {
      const Node& np = node(p);
      require_2d(np, "concat_cols");
      if (np.shape[0] != rows) throw ShapeError("concat_cols: row counts differ");
      total += np.shape[1];
      args.push_back(p.id);
    }
    Node n = make(Op::ConcatCols, std::move(args), {rows, total});
    std::size_t off = 0;
    for (Var p : parts) {
      const Node& np = node(p);
      const std::size_t w = np.shape[1];
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j) n.val[i * total + off + j] = np.val[i * w + j];
      off += w;
    }
    return push(std::move(n));
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    const Node& na = node(a);
    require_2d(na, "slice_cols");
    if (begin > end || end > na.shape[1]) throw ShapeError("slice_cols: invalid range");
    const std::size_t m = na.shape[0], c = na.shape[1], w = end - begin;
    Node n = make(Op::SliceCols, {a.id}, {m, w});
    n.lo = begin;
    n.hi = end;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) n.val[i * w + j] = na.val[i * c + begin + j];
    return push(std::move(n));
  }

  // Gaussian error linear unit, tanh approximation.
  Var gelu(Var a) {
    const Node& na = node(a);
    Node n = make(Op::Gelu, {a.id}, na.shape);
    for (std::size_t i = 0; i < na.val.size(); ++i) n.val[i] = gelu_fwd(na.val[i]);
    return push(std::move(n));
  }

  Var sum(Var a) {
    const Node& na = node(a);
    Node n = make(Op::Sum, {a.id}, {});
    double acc = 0.0;
    for (double v : na.val) acc += v;
    n.val[0] = acc;
    return push(std::move(n));
  }

  Var sum_squares(Var a) {
    const Node& na = node(a);
    Node n = make(Op::SumSquares, {a.id}, {});
    double acc = 0.0;
    for (double v : na.val) acc += v * v;
    n.val[0] = acc;
    return push(std::move(n));
  }

  // Mean squared error over all elements.
  Var mse(Var a, Var b) {
    const Node &na = node(a), &nb = node(b);
    if (na.shape != nb.shape) throw ShapeError("mse: shape mismatch");
    if (na.val.empty()) throw ShapeError("mse: empty operands");
    Node n = make(Op::Mse, {a.id, b.id}, {});
    double acc = 0.0;
    for (std::size_t i = 0; i < na.val.size(); ++i) {
      const double d = na.val[i] - nb.val[i];
      acc += d * d;
    }
    n.val[0] = acc / static_cast<double>(na.val.size());
    return push(std::move(n));
  }

  // ---- reverse pass ------------------------------------------------------

  // Seeds d(out)/d(out) = 1 and replays the tape backward. out must be a
  // single-element node. May be called once per tape.
  void backward(Var out) {
    const Node& n_out = node(out);
    if (n_out.val.size() != 1) throw ShapeError("backward: output must be a single value");
    grads_.assign(nodes_.size(), {});
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].requires_grad) grads_[i].assign(nodes_[i].val.size(), 0.0);
    }
    if (!nodes_[out.id].requires_grad) return;  // nothing depends on a leaf
    grads_[out.id][0] = 1.0;
    for (std::uint32_t i = out.id + 1; i-- > 0;) {
      if (!nodes_[i].requires_grad || grads_[i].empty()) continue;
      propagate(i);
    }
  }

  Tensor grad(Var v) const {
    const std::vector<double>& g = grad64(v);
    Tensor t(node(v).shape);
    for (std::size_t i = 0; i < g.size(); ++i) t[i] = static_cast<float>(g[i]);
    return t;
  }

  const std::vector<double>& grad64(Var v) const {
    if (grads_.size() != nodes_.size()) throw Error("grad: backward() has not run");
    if (!node(v).requires_grad) throw Error("grad: node does not require gradients");
    return grads_[v.id];
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Node make(Op op, std::vector<std::uint32_t> args, std::vector<std::size_t> shape) {
    Node n;
    n.op = op;
    n.args = std::move(args);
    n.shape = std::move(shape);
    n.val.resize(Tensor::count(n.shape));
    for (std::uint32_t a : n.args) n.requires_grad = n.requires_grad || nodes_[a].requires_grad;
    return n;
  }

  Var ewise(Op op, Var a, Var b) {
    const Node &na = node(a), &nb = node(b);
    if (na.shape != nb.shape) throw ShapeError("elementwise op: shape mismatch");
    Node n = make(op, {a.id, b.id}, na.shape);
    for (std::size_t i = 0; i < na.val.size(); ++i) {
      switch (op) {
        case Op::Add: n.val[i] = na.val[i] + nb.val[i]; break;
        case Op::Sub: n.val[i] = na.val[i] - nb.val[i]; break;
        default: n.val[i] = na.val[i] * nb.val[i]; break;
      }
    }
    return push(std::move(n));
  }

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw Error("invalid tape handle");
    return nodes_[v.id];
  }

  void require_2d(const Node& n, const char* op) const {
    if (n.shape.size() != 2) throw ShapeError(std::string(op) + ": expected 2-D operand");
  }

  // C[m,n] += is not needed; writes C = A[m,k] * B[k,n] with k as the
  // sequential accumulation axis (left-to-right) and n vectorizable.
  static void mm(double* c, const double* a, const double* b, std::size_t m, std::size_t k,
                 std::size_t n) {
    std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  // Same as mm but accumulates into c.
  static void mm_acc(double* c, const double* a, const double* b, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  static void transpose_into(double* dst, const double* src, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }

  static double gelu_fwd(double x) {
    const double kSqrt2OverPi = 0.7978845608028654;
    const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  }

  static double gelu_bwd(double x) {
    const double kSqrt2OverPi = 0.7978845608028654;
    const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = kSqrt2OverPi * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
  }

  std::vector<double>* grad_of(std::uint32_t id) {
    return nodes_[id].requires_grad ? &grads_[id] : nullptr;
  }

  void propagate(std::uint32_t id) {
    Node& n = nodes_[id];
    const std::vector<double>& g = grads_[id];
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Matmul: {
        const Node &na = nodes_[n.args[0]], &nb = nodes_[n.args[1]];
        const std::size_t m = na.shape[0], k = na.shape[1], c = nb.shape[1];
        if (auto* da = grad_of(n.args[0])) {
          // dA = G * B^T
          std::vector<double> bt(k * c);
          transpose_into(bt.data(), nb.val.data(), k, c);
          mm_acc(da->data(), g.data(), bt.data(), m, c, k);
        }
        if (auto* db = grad_of(n.args[1])) {
          // dB = A^T * G
          std::vector<double> at(k * m);
          transpose_into(at.data(), na.val.data(), m, k);
          mm_acc(db->data(), at.data(), g.data(), k, m, c);
        }
        break;
      }
      case Op::MatmulNT: {
        // C = s * A * B^T, A[m,k], B[r,k], G[m,r]
        const Node &na = nodes_[n.args[0]], &nb = nodes_[n.args[1]];
        const std::size_t m = na.shape[0], k = na.shape[1], r = nb.shape[0];
        const double s = n.param;
        const double* gp = g.data();
        std::vector<double> gs;
        if (s != 1.0) {
          gs.resize(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) gs[i] = g[i] * s;
          gp = gs.data();
        }
        if (auto* da = grad_of(n.args[0])) {
          // dA = s * G * B
          mm_acc(da->data(), gp, nb.val.data(), m, r, k);
        }
        if (auto* db = grad_of(n.args[1])) {
          // dB = s * G^T * A
          std::vector<double> gt(r * m);
          transpose_into(gt.data(), gp, m, r);
          mm_acc(db->data(), gt.data(), na.val.data(), r, m, k);
        }
        break;
      }
      case Op::Add:
      case Op::Sub: {
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (auto* db = grad_of(n.args[1])) {
          const double sign = n.op == Op::Add ? 1.0 : -1.0;
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += sign * g[i];
        }
        break;
      }
      case Op::Mul: {
        const Node &na = nodes_[n.args[0]], &nb = nodes_[n.args[1]];
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * nb.val[i];
        if (auto* db = grad_of(n.args[1]))
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * na.val[i];
        break;
      }
      case Op::Scale: {
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * n.param;
        break;
      }
      case Op::AddRow: {
        const std::size_t m = n.shape[0], c = n.shape[1];
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (auto* dr = grad_of(n.args[1])) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) (*dr)[j] += g[i * c + j];
        }
        break;
      }
      case Op::SoftmaxRows: {
        if (auto* da = grad_of(n.args[0])) {
          const std::size_t m = n.shape[0], c = n.shape[1];
          for (std::size_t i = 0; i < m; ++i) {
            const double* y = n.val.data() + i * c;
            const double* gr = g.data() + i * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += gr[j] * y[j];
            double* dx = da->data() + i * c;
            for (std::size_t j = 0; j < c; ++j) dx[j] += y[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case Op::LayerNorm: {
        const Node &nx = nodes_[n.args[0]], &ng = nodes_[n.args[1]];
        const std::size_t m = n.shape[0], c = n.shape[1];
        const double eps = n.param;
        auto* dx = grad_of(n.args[0]);
        auto* dgain = grad_of(n.args[1]);
        auto* dbias = grad_of(n.args[2]);
        std::vector<double> xhat(c), gh(c);
        for (std::size_t i = 0; i < m; ++i) {
          const double* xr = nx.val.data() + i * c;
          const double* gr = g.data() + i * c;
          double mean = 0.0;
          for (std::size_t j = 0; j < c; ++j) mean += xr[j];
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
          var /= static_cast<double>(c);
          const double inv = 1.0 / std::sqrt(var + eps);
          for (std::size_t j = 0; j < c; ++j) xhat[j] = (xr[j] - mean) * inv;
          if (dbias)
            for (std::size_t j = 0; j < c; ++j) (*dbias)[j] += gr[j];
          if (dgain)
            for (std::size_t j = 0; j < c; ++j) (*dgain)[j] += gr[j] * xhat[j];
          if (dx) {
            double mean_gh = 0.0, mean_ghx = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              gh[j] = gr[j] * ng.val[j];
              mean_gh += gh[j];
              mean_ghx += gh[j] * xhat[j];
            }
            mean_gh /= static_cast<double>(c);
            mean_ghx /= static_cast<double>(c);
            double* dxr = dx->data() + i * c;
            for (std::size_t j = 0; j < c; ++j)
              dxr[j] += inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
          }
        }
        break;
      }
      case Op::ConcatRows: {
        const Node& na = nodes_[n.args[0]];
        const std::size_t split = na.val.size();
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < split; ++i) (*da)[i] += g[i];
        if (auto* db = grad_of(n.args[1]))
          for (std::size_t i = 0; i < g.size() - split; ++i) (*db)[i] += g[split + i];
        break;
      }
      case Op::SliceRows: {
        if (auto* da = grad_of(n.args[0])) {
          const std::size_t c = n.shape[1], off = n.lo * c;
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[off + i] += g[i];
        }
        break;
      }
      case Op::ConcatCols: {
        const std::size_t rows = n.shape[0], total = n.shape[1];
        std::size_t off = 0;
        for (std::uint32_t arg : n.args) {
          const std::size_t w = nodes_[arg].shape[1];
          if (auto* da = grad_of(arg)) {
            for (std::size_t i = 0; i < rows; ++i)
              for (std::size_t j = 0; j < w; ++j) (*da)[i * w + j] += g[i * total + off + j];
          }
          off += w;
        }
        break;
      }
      case Op::SliceCols: {
        if (auto* da = grad_of(n.args[0])) {
          const std::size_t full = nodes_[n.args[0]].shape[1];
          const std::size_t m = n.shape[0], w = n.shape[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) (*da)[i * full + n.lo + j] += g[i * w + j];
        }
        break;
      }
      case Op::Gelu: {
        const Node& na = nodes_[n.args[0]];
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * gelu_bwd(na.val[i]);
        break;
      }
      case Op::Sum: {
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += g[0];
        break;
      }
      case Op::SumSquares: {
        const Node& na = nodes_[n.args[0]];
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += 2.0 * na.val[i] * g[0];
        break;
      }
      case Op::Mse: {
        const Node &na = nodes_[n.args[0]], &nb = nodes_[n.args[1]];
        const double k = 2.0 * g[0] / static_cast<double>(na.val.size());
        if (auto* da = grad_of(n.args[0]))
          for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += k * (na.val[i] - nb.val[i]);
        if (auto* db = grad_of(n.args[1]))
          for (std::size_t i = 0; i < db->size(); ++i) (*db)[i] -= k * (na.val[i] - nb.val[i]);
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Builds a scalar function of leaf tensors on a fresh tape.
using ScalarBuilder = std::function<Var(GradTape&, const std::vector<Var>&)>;

// Compares reverse-mode gradients against central finite differences.
// Returns the max over all input coordinates of
//   |analytic - fd| / max(1, |fd|).
// Perturbed evaluation points are snapped to exactly representable float32
// neighbors and the probe divides by their true double difference, so the
// probe itself adds no representation error.
inline double grad_check(const ScalarBuilder& f, const std::vector<Tensor>& inputs,
                         double h = 1e-3) {
  if (!(h > 1e-5 && h < 1e-2)) throw ConfigError("grad_check: h must lie in (1e-5, 1e-2)");

  const auto eval = [&](const std::vector<Tensor>& xs) {
    GradTape tape;
    std::vector<Var> leaves;
    leaves.reserve(xs.size());
    for (const Tensor& x : xs) leaves.push_back(tape.constant(x));
    Var out = f(tape, leaves);
    double v = tape.scalar(out);
    if (!std::isfinite(v)) throw Error("grad_check: non-finite function value");
    return v;
  };

  // Analytic pass.
  GradTape tape;
  std::vector<Var> leaves;
  for (const Tensor& x : inputs) leaves.push_back(tape.leaf(x, true));
  Var out = f(tape, leaves);
  if (!std::isfinite(tape.scalar(out))) throw Error("grad_check: non-finite function value");
  tape.backward(out);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Var v : leaves) analytic.push_back(tape.grad64(v));

  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].numel(); ++i) {
      const float orig = inputs[t][i];
      const float xp = static_cast<float>(static_cast<double>(orig) + h);
      const float xm = static_cast<float>(static_cast<double>(orig) - h);
      const double denom = static_cast<double>(xp) - static_cast<double>(xm);
      if (denom == 0.0) throw ConfigError("grad_check: step vanished at this magnitude");
      probe[t][i] = xp;
      const double fp = eval(probe);
      probe[t][i] = xm;
      const double fm = eval(probe);
      probe[t][i] = orig;
      const double fd = (fp - fm) / denom;
      const double rel = std::abs(analytic[t][i] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace mcaforge
