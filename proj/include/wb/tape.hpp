#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wb/errors.hpp"
#include "wb/tensor.hpp"

namespace wb {

// Reverse-mode tape over a closed op set: matmul, add, mul, elementwise
// unary, softmax / log-softmax, reshape, concat, slice, reduce-sum/mean,
// gather and detach. Every block in the workbench is expressed in these ops.
//
// All summations (matmul inner products, reductions, gradient scatters) run
// in ascending index order, so identical inputs produce bit-identical
// outputs on every platform.

enum class Op : uint8_t {
  Leaf,
  Constant,
  MatMul,
  Add,
  Mul,
  Unary,
  Softmax,
  LogSoftmax,
  Reshape,
  Concat,
  Slice,
  ReduceSum,
  ReduceMean,
  GatherRows,
  GatherLast,
  Detach,
};

enum class UnaryKind : uint8_t {
  Relu,
  Gelu,
  Swish,
  Elu,
  Selu,
  Sigmoid,
  Softplus,
  Exp,
  Log,
  Sqrt,
  Square,
  Reciprocal,
  Scale,  // x * c
  Shift,  // x + c
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Unary: return "unary";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::ReduceSum: return "reduce_sum";
    case Op::ReduceMean: return "reduce_mean";
    case Op::GatherRows: return "gather_rows";
    case Op::GatherLast: return "gather_last";
    case Op::Detach: return "detach";
  }
  return "?";
}

// SeLU defining constants (from its source; fixed, not tunable).
inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

// Finite stand-in for -inf in attention masks; exp(x - max) underflows to
// exactly 0.0 for differences this large, so masked weights are exact zeros
// while every tensor stays finite.
inline constexpr double kMaskedLogit = -1e30;

namespace detail {

inline double unary_fwd(UnaryKind k, double x, double c) {
  switch (k) {
    case UnaryKind::Relu: return x > 0 ? x : 0.0;
    case UnaryKind::Gelu: return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
    case UnaryKind::Swish: return x / (1.0 + std::exp(-x));
    case UnaryKind::Elu: return x > 0 ? x : std::expm1(x);
    case UnaryKind::Selu: return kSeluLambda * (x > 0 ? x : kSeluAlpha * std::expm1(x));
    case UnaryKind::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case UnaryKind::Softplus: return x > 30.0 ? x : std::log1p(std::exp(x));
    case UnaryKind::Exp: return std::exp(x);
    case UnaryKind::Log: return std::log(x);
    case UnaryKind::Sqrt: return std::sqrt(x);
    case UnaryKind::Square: return x * x;
    case UnaryKind::Reciprocal: return 1.0 / x;
    case UnaryKind::Scale: return x * c;
    case UnaryKind::Shift: return x + c;
  }
  return 0.0;
}

inline double unary_bwd(UnaryKind k, double x, double c) {
  switch (k) {
    case UnaryKind::Relu: return x > 0 ? 1.0 : 0.0;
    case UnaryKind::Gelu: {
      // d/dx [x Phi(x)] = Phi(x) + x phi(x)
      double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
      double pdf = 0.3989422804014326779399461 * std::exp(-0.5 * x * x);
      return cdf + x * pdf;
    }
    case UnaryKind::Swish: {
      double s = 1.0 / (1.0 + std::exp(-x));
      return s + x * s * (1.0 - s);
    }
    case UnaryKind::Elu: return x > 0 ? 1.0 : std::exp(x);
    case UnaryKind::Selu: return kSeluLambda * (x > 0 ? 1.0 : kSeluAlpha * std::exp(x));
    case UnaryKind::Sigmoid: {
      double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 - s);
    }
    case UnaryKind::Softplus: return 1.0 / (1.0 + std::exp(-x));
    case UnaryKind::Exp: return std::exp(x);
    case UnaryKind::Log: return 1.0 / x;
    case UnaryKind::Sqrt: return 0.5 / std::sqrt(x);
    case UnaryKind::Square: return 2.0 * x;
    case UnaryKind::Reciprocal: return -1.0 / (x * x);
    case UnaryKind::Scale: return c;
    case UnaryKind::Shift: return 1.0;
  }
  return 0.0;
}

// Batched matmul with align-right leading-dim broadcasting. ta/tb transpose
// the trailing two dims of the respective operand.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2) throw ConfigError("matmul: operands must have rank >= 2");
  long am = a.dim(-2), ak = a.dim(-1);
  if (ta) std::swap(am, ak);
  long bk = b.dim(-2), bn = b.dim(-1);
  if (tb) std::swap(bk, bn);
  if (ak != bk)
    throw ConfigError("matmul: inner extents differ, " + shape_str(a.shape) + (ta ? "^T" : "") +
                      " x " + shape_str(b.shape) + (tb ? "^T" : ""));
  Shape la(a.shape.begin(), a.shape.end() - 2), lb(b.shape.begin(), b.shape.end() - 2);
  Shape lead = broadcast_shape(la, lb, "matmul");
  Shape out_shape = lead;
  out_shape.push_back(am);
  out_shape.push_back(bn);
  Tensor out(out_shape);

  long batches = numel(lead);
  // Per-operand batch strides; 0 when that dim is broadcast.
  size_t r = lead.size();
  std::vector<long> sa(r, 0), sb(r, 0);
  {
    long run = a.dim(-2) * a.dim(-1);
    for (long i = static_cast<long>(la.size()) - 1; i >= 0; --i) {
      size_t oi = r - la.size() + static_cast<size_t>(i);
      sa[oi] = la[static_cast<size_t>(i)] == 1 ? 0 : run;
      run *= la[static_cast<size_t>(i)];
    }
    long runb = b.dim(-2) * b.dim(-1);
    for (long i = static_cast<long>(lb.size()) - 1; i >= 0; --i) {
      size_t oi = r - lb.size() + static_cast<size_t>(i);
      sb[oi] = lb[static_cast<size_t>(i)] == 1 ? 0 : runb;
      runb *= lb[static_cast<size_t>(i)];
    }
  }
  for (long bi = 0; bi < batches; ++bi) {
    long offa = 0, offb = 0;
    {
      long rem = bi;
      for (long i = static_cast<long>(r) - 1; i >= 0; --i) {
        long d = lead[static_cast<size_t>(i)];
        long cur = rem % d;
        rem /= d;
        offa += cur * sa[static_cast<size_t>(i)];
        offb += cur * sb[static_cast<size_t>(i)];
      }
    }
    const double* pa = a.data.data() + offa;
    const double* pb = b.data.data() + offb;
    double* pc = out.data.data() + bi * am * bn;
    long lda = a.dim(-1), ldb = b.dim(-1);
    if (!ta && !tb) {
      for (long i = 0; i < am; ++i)
        for (long k = 0; k < ak; ++k) {
          double v = pa[i * lda + k];
          const double* br = pb + k * ldb;
          double* cr = pc + i * bn;
          for (long j = 0; j < bn; ++j) cr[j] += v * br[j];
        }
    } else if (!ta && tb) {
      for (long i = 0; i < am; ++i)
        for (long j = 0; j < bn; ++j) {
          const double* ar = pa + i * lda;
          const double* br = pb + j * ldb;
          double s = 0.0;
          for (long k = 0; k < ak; ++k) s += ar[k] * br[k];
          pc[i * bn + j] = s;
        }
    } else if (ta && !tb) {
      for (long k = 0; k < ak; ++k) {
        const double* ar = pa + k * lda;
        const double* br = pb + k * ldb;
        for (long i = 0; i < am; ++i) {
          double v = ar[i];
          double* cr = pc + i * bn;
          for (long j = 0; j < bn; ++j) cr[j] += v * br[j];
        }
      }
    } else {
      for (long i = 0; i < am; ++i)
        for (long j = 0; j < bn; ++j) {
          double s = 0.0;
          for (long k = 0; k < ak; ++k) s += pa[k * lda + i] * pb[j * ldb + k];
          pc[i * bn + j] = s;
        }
    }
  }
  return out;
}

// Sum a gradient down to `target` (undo broadcasting), ascending index order.
inline Tensor sum_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape == target) return g;
  // suffix target: sum over the leading rows
  long tn = numel(target);
  if (tn > 0 && g.size() % tn == 0) {
    size_t rt = target.size(), rg = g.shape.size();
    bool suffix = rt <= rg;
    for (size_t i = 0; suffix && i < rt; ++i)
      if (target[rt - 1 - i] != g.shape[rg - 1 - i]) suffix = false;
    if (suffix) {
      Tensor out(target);
      long rows = g.size() / tn;
      for (long r = 0; r < rows; ++r) {
        const double* src = g.data.data() + r * tn;
        for (long k = 0; k < tn; ++k) out[k] += src[k];
      }
      return out;
    }
    // same rank, last dim collapsed to 1: sum along the last axis
    if (rt == rg && target.back() == 1 && g.shape.back() > 1) {
      bool match = true;
      for (size_t i = 0; i + 1 < rt; ++i)
        if (target[i] != g.shape[i]) match = false;
      if (match) {
        Tensor out(target);
        long last = g.shape.back();
        long rows = g.size() / last;
        for (long r = 0; r < rows; ++r) {
          double s = 0;
          const double* src = g.data.data() + r * last;
          for (long k = 0; k < last; ++k) s += src[k];
          out[r] = s;
        }
        return out;
      }
    }
  }
  Tensor out(target);
  size_t rg = g.shape.size(), rt = target.size();
  Shape tst = strides_of(target);
  std::vector<long> gdim(rg), tmap(rg, -1);
  for (size_t i = 0; i < rg; ++i) {
    gdim[i] = g.shape[i];
    long ti = static_cast<long>(i) - static_cast<long>(rg - rt);
    if (ti >= 0 && target[static_cast<size_t>(ti)] != 1) tmap[i] = tst[static_cast<size_t>(ti)];
  }
  std::vector<long> idx(rg, 0);
  for (long flat = 0; flat < g.size(); ++flat) {
    long toff = 0;
    for (size_t i = 0; i < rg; ++i)
      if (tmap[i] >= 0) toff += idx[i] * tmap[i];
    out[toff] += g[flat];
    for (long i = static_cast<long>(rg) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < gdim[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return out;
}

template <class F>
inline Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* ctx, F&& f) {
  if (a.shape == b.shape) {
    Tensor out(a.shape);
    for (long i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  // common fast paths: scalar, trailing-suffix, and collapsed-last-dim
  auto suffix_of = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (size_t i = 0; i < small.size(); ++i)
      if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
  };
  if (b.size() == 1 && b.rank() <= a.rank()) {
    Tensor out(a.shape);
    double bv = b[0];
    for (long i = 0; i < a.size(); ++i) out[i] = f(a[i], bv);
    return out;
  }
  if (a.size() == 1 && a.rank() <= b.rank()) {
    Tensor out(b.shape);
    double av = a[0];
    for (long i = 0; i < b.size(); ++i) out[i] = f(av, b[i]);
    return out;
  }
  if (suffix_of(b.shape, a.shape)) {
    Tensor out(a.shape);
    long bn = b.size();
    long rows = a.size() / bn;
    for (long r = 0; r < rows; ++r) {
      const double* pa = a.data.data() + r * bn;
      double* po = out.data.data() + r * bn;
      for (long k = 0; k < bn; ++k) po[k] = f(pa[k], b[k]);
    }
    return out;
  }
  if (suffix_of(a.shape, b.shape)) {
    Tensor out(b.shape);
    long an = a.size();
    long rows = b.size() / an;
    for (long r = 0; r < rows; ++r) {
      const double* pb = b.data.data() + r * an;
      double* po = out.data.data() + r * an;
      for (long k = 0; k < an; ++k) po[k] = f(a[k], pb[k]);
    }
    return out;
  }
  if (a.rank() == b.rank() && b.shape.back() == 1 && a.shape.back() > 1) {
    bool match = true;
    for (size_t i = 0; i + 1 < a.shape.size(); ++i)
      if (a.shape[i] != b.shape[i]) match = false;
    if (match) {
      Tensor out(a.shape);
      long last = a.shape.back();
      long rows = a.size() / last;
      for (long r = 0; r < rows; ++r) {
        const double* pa = a.data.data() + r * last;
        double bv = b[r];
        double* po = out.data.data() + r * last;
        for (long k = 0; k < last; ++k) po[k] = f(pa[k], bv);
      }
      return out;
    }
  }
  if (a.rank() == b.rank() && a.shape.back() == 1 && b.shape.back() > 1) {
    bool match = true;
    for (size_t i = 0; i + 1 < a.shape.size(); ++i)
      if (a.shape[i] != b.shape[i]) match = false;
    if (match) {
      Tensor out(b.shape);
      long last = b.shape.back();
      long rows = b.size() / last;
      for (long r = 0; r < rows; ++r) {
        double av = a[r];
        const double* pb = b.data.data() + r * last;
        double* po = out.data.data() + r * last;
        for (long k = 0; k < last; ++k) po[k] = f(av, pb[k]);
      }
      return out;
    }
  }
  Shape os = broadcast_shape(a.shape, b.shape, ctx);
  Tensor out(os);
  size_t r = os.size();
  std::vector<long> sa(r, 0), sb(r, 0);
  Shape ast = strides_of(a.shape), bst = strides_of(b.shape);
  for (size_t i = 0; i < r; ++i) {
    long ai = static_cast<long>(i) - static_cast<long>(r - a.shape.size());
    long bi = static_cast<long>(i) - static_cast<long>(r - b.shape.size());
    if (ai >= 0 && a.shape[static_cast<size_t>(ai)] != 1) sa[i] = ast[static_cast<size_t>(ai)];
    if (bi >= 0 && b.shape[static_cast<size_t>(bi)] != 1) sb[i] = bst[static_cast<size_t>(bi)];
  }
  std::vector<long> idx(r, 0);
  for (long flat = 0; flat < out.size(); ++flat) {
    long oa = 0, ob = 0;
    for (size_t i = 0; i < r; ++i) {
      oa += idx[i] * sa[i];
      ob += idx[i] * sb[i];
    }
    out[flat] = f(a[oa], b[ob]);
    for (long i = static_cast<long>(r) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < os[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return out;
}

}  // namespace detail

class Tape;

// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

struct TapeNode {
  Op op;
  UnaryKind uk = UnaryKind::Relu;
  int a = -1;
  int b = -1;
  std::vector<int> rest;      // extra inputs (concat)
  long i0 = 0, i1 = 0, i2 = 0;  // op-specific ints (axis, start, len, slot, keepdim)
  double c = 0.0;             // op-specific scalar
  std::vector<long> idx;      // gather indices
  Shape shape;
};

class Tape {
 public:
  std::vector<TapeNode> nodes;
  std::vector<Tensor> val;
  std::vector<Tensor> grad;

  void clear() {
    nodes.clear();
    val.clear();
    grad.clear();
  }
  size_t size() const { return nodes.size(); }
  const Tensor& value(Var v) const { return val[static_cast<size_t>(v.id)]; }
  const Tensor& gradient(Var v) const { return grad[static_cast<size_t>(v.id)]; }

  Var emit(TapeNode n, Tensor v) {
    if (!v.all_finite())
      throw NumericError(std::string("non-finite values produced by op '") + op_name(n.op) + "'");
    n.shape = v.shape;
    nodes.push_back(std::move(n));
    val.push_back(std::move(v));
    return Var{this, static_cast<int>(nodes.size()) - 1};
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse
  // construction order (construction order is already topological).
  void backward(Var loss) {
    const Tensor& lv = val[static_cast<size_t>(loss.id)];
    if (lv.size() != 1) throw ConfigError("backward: loss must be a scalar");
    grad.assign(nodes.size(), Tensor());
    for (size_t i = 0; i < nodes.size(); ++i) grad[i] = Tensor::zeros(nodes[i].shape);
    grad[static_cast<size_t>(loss.id)][0] = 1.0;
    for (long i = loss.id; i >= 0; --i) backward_node(static_cast<size_t>(i));
  }

 private:
  void acc(int target, const Tensor& g) {
    Tensor& dst = grad[static_cast<size_t>(target)];
    if (g.shape == dst.shape) {
      for (long i = 0; i < dst.size(); ++i) dst[i] += g[i];
      return;
    }
    Tensor red = detail::sum_to_shape(g, nodes[static_cast<size_t>(target)].shape);
    for (long i = 0; i < dst.size(); ++i) dst[i] += red[i];
  }

  void backward_node(size_t i) {
    const TapeNode& n = nodes[i];
    const Tensor& g = grad[i];
    bool any = false;
    for (double x : g.data)
      if (x != 0.0) {
        any = true;
        break;
      }
    if (!any) return;
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
      case Op::Detach:  // gradient stops here
        return;
      case Op::MatMul: {
        const Tensor& A = val[static_cast<size_t>(n.a)];
        const Tensor& B = val[static_cast<size_t>(n.b)];
        bool ta = n.i0 != 0, tb = n.i1 != 0;
        Tensor da = ta ? detail::bmm(B, g, tb, true) : detail::bmm(g, B, false, !tb);
        Tensor db = tb ? detail::bmm(g, A, true, ta) : detail::bmm(A, g, !ta, false);
        acc(n.a, da);
        acc(n.b, db);
        return;
      }
      case Op::Add:
        acc(n.a, g);
        acc(n.b, g);
        return;
      case Op::Mul: {
        const Tensor& A = val[static_cast<size_t>(n.a)];
        const Tensor& B = val[static_cast<size_t>(n.b)];
        acc(n.a, detail::broadcast_binary(g, B, "mul_bwd", [](double x, double y) { return x * y; }));
        acc(n.b, detail::broadcast_binary(g, A, "mul_bwd", [](double x, double y) { return x * y; }));
        return;
      }
      case Op::Unary: {
        const Tensor& X = val[static_cast<size_t>(n.a)];
        Tensor da(X.shape);
        for (long k = 0; k < X.size(); ++k) da[k] = g[k] * detail::unary_bwd(n.uk, X[k], n.c);
        acc(n.a, da);
        return;
      }
      case Op::Softmax: {
        const Tensor& S = val[i];
        Tensor da(S.shape);
        long last = S.dim(-1), rows = S.size() / last;
        for (long r = 0; r < rows; ++r) {
          const double* s = S.data.data() + r * last;
          const double* gy = g.data.data() + r * last;
          double dot = 0.0;
          for (long k = 0; k < last; ++k) dot += gy[k] * s[k];
          double* d = da.data.data() + r * last;
          for (long k = 0; k < last; ++k) d[k] = s[k] * (gy[k] - dot);
        }
        acc(n.a, da);
        return;
      }
      case Op::LogSoftmax: {
        const Tensor& Y = val[i];
        Tensor da(Y.shape);
        long last = Y.dim(-1), rows = Y.size() / last;
        for (long r = 0; r < rows; ++r) {
          const double* y = Y.data.data() + r * last;
          const double* gy = g.data.data() + r * last;
          double tot = 0.0;
          for (long k = 0; k < last; ++k) tot += gy[k];
          double* d = da.data.data() + r * last;
          for (long k = 0; k < last; ++k) d[k] = gy[k] - std::exp(y[k]) * tot;
        }
        acc(n.a, da);
        return;
      }
      case Op::Reshape: {
        Tensor da(nodes[static_cast<size_t>(n.a)].shape, g.data);
        acc(n.a, da);
        return;
      }
      case Op::Concat: {
        long axis = n.i0;
        std::vector<int> inputs;
        inputs.push_back(n.a);
        if (n.b >= 0) inputs.push_back(n.b);
        for (int e : n.rest) inputs.push_back(e);
        Shape ost = strides_of(n.shape);
        long outer = 1;
        for (long d = 0; d < axis; ++d) outer *= n.shape[static_cast<size_t>(d)];
        long inner = ost[static_cast<size_t>(axis)];
        long off = 0;
        for (int in : inputs) {
          const Shape& is = nodes[static_cast<size_t>(in)].shape;
          long len = is[static_cast<size_t>(axis)];
          Tensor da(is);
          for (long o = 0; o < outer; ++o)
            for (long k = 0; k < len * inner; ++k)
              da[o * len * inner + k] = g[o * n.shape[static_cast<size_t>(axis)] * inner + off * inner + k];
          acc(in, da);
          off += len;
        }
        return;
      }
      case Op::Slice: {
        const Shape& is = nodes[static_cast<size_t>(n.a)].shape;
        long axis = n.i0, start = n.i1, len = n.i2;
        Tensor da = Tensor::zeros(is);
        long outer = 1;
        for (long d = 0; d < axis; ++d) outer *= is[static_cast<size_t>(d)];
        long inner = 1;
        for (size_t d = static_cast<size_t>(axis) + 1; d < is.size(); ++d) inner *= is[d];
        long full = is[static_cast<size_t>(axis)];
        for (long o = 0; o < outer; ++o)
          for (long k = 0; k < len * inner; ++k)
            da[o * full * inner + start * inner + k] = g[o * len * inner + k];
        acc(n.a, da);
        return;
      }
      case Op::ReduceSum:
      case Op::ReduceMean: {
        const Shape& is = nodes[static_cast<size_t>(n.a)].shape;
        long axis = n.i0;
        long nred = is[static_cast<size_t>(axis)];
        double scale = n.op == Op::ReduceMean ? 1.0 / static_cast<double>(nred) : 1.0;
        Tensor da(is);
        long outer = 1;
        for (long d = 0; d < axis; ++d) outer *= is[static_cast<size_t>(d)];
        long inner = 1;
        for (size_t d = static_cast<size_t>(axis) + 1; d < is.size(); ++d) inner *= is[d];
        for (long o = 0; o < outer; ++o)
          for (long r = 0; r < nred; ++r)
            for (long k = 0; k < inner; ++k)
              da[(o * nred + r) * inner + k] = g[o * inner + k] * scale;
        acc(n.a, da);
        return;
      }
      case Op::GatherRows: {
        const Shape& is = nodes[static_cast<size_t>(n.a)].shape;
        Tensor da = Tensor::zeros(is);
        long inner = 1;
        for (size_t d = 1; d < is.size(); ++d) inner *= is[d];
        for (size_t r = 0; r < n.idx.size(); ++r) {
          long row = n.idx[r];
          for (long k = 0; k < inner; ++k)
            da[row * inner + k] += g[static_cast<long>(r) * inner + k];
        }
        acc(n.a, da);
        return;
      }
      case Op::GatherLast: {
        const Shape& is = nodes[static_cast<size_t>(n.a)].shape;
        Tensor da = Tensor::zeros(is);
        long last = is.back();
        for (size_t r = 0; r < n.idx.size(); ++r)
          da[static_cast<long>(r) * last + n.idx[r]] += g[static_cast<long>(r)];
        acc(n.a, da);
        return;
      }
    }
  }
};

// ---- op constructors -------------------------------------------------------

inline Var leaf(Tape& t, const Tensor& value, long slot = -1) {
  TapeNode n;
  n.op = Op::Leaf;
  n.i0 = slot;
  return t.emit(std::move(n), value);
}

inline Var constant(Tape& t, Tensor value) {
  TapeNode n;
  n.op = Op::Constant;
  return t.emit(std::move(n), std::move(value));
}

inline Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
  Tape& t = *a.tape;
  Tensor out = detail::bmm(t.value(a), t.value(b), ta, tb);
  TapeNode n;
  n.op = Op::MatMul;
  n.a = a.id;
  n.b = b.id;
  n.i0 = ta;
  n.i1 = tb;
  return t.emit(std::move(n), std::move(out));
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = detail::broadcast_binary(t.value(a), t.value(b), "add",
                                        [](double x, double y) { return x + y; });
  TapeNode n;
  n.op = Op::Add;
  n.a = a.id;
  n.b = b.id;
  return t.emit(std::move(n), std::move(out));
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out = detail::broadcast_binary(t.value(a), t.value(b), "mul",
                                        [](double x, double y) { return x * y; });
  TapeNode n;
  n.op = Op::Mul;
  n.a = a.id;
  n.b = b.id;
  return t.emit(std::move(n), std::move(out));
}

inline Var unary(Var a, UnaryKind k, double c = 0.0) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out(x.shape);
  for (long i = 0; i < x.size(); ++i) out[i] = detail::unary_fwd(k, x[i], c);
  TapeNode n;
  n.op = Op::Unary;
  n.uk = k;
  n.a = a.id;
  n.c = c;
  return t.emit(std::move(n), std::move(out));
}

inline Var scale(Var a, double c) { return unary(a, UnaryKind::Scale, c); }
inline Var shift(Var a, double c) { return unary(a, UnaryKind::Shift, c); }
inline Var neg(Var a) { return scale(a, -1.0); }
inline Var sub(Var a, Var b) { return add(a, neg(b)); }
inline Var divide(Var a, Var b) { return mul(a, unary(b, UnaryKind::Reciprocal)); }

// Softmax over the last dim with max subtraction. Entries at or below
// kMaskedLogit relative to the row max come out as exact zeros.
inline Var softmax_lastdim(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.rank() < 1 || x.dim(-1) < 1) throw ConfigError("softmax: last extent must be >= 1");
  Tensor out(x.shape);
  long last = x.dim(-1), rows = x.size() / last;
  for (long r = 0; r < rows; ++r) {
    const double* px = x.data.data() + r * last;
    double* po = out.data.data() + r * last;
    double m = px[0];
    for (long k = 1; k < last; ++k) m = std::max(m, px[k]);
    double s = 0.0;
    for (long k = 0; k < last; ++k) {
      po[k] = std::exp(px[k] - m);
      s += po[k];
    }
    for (long k = 0; k < last; ++k) po[k] /= s;
  }
  TapeNode n;
  n.op = Op::Softmax;
  n.a = a.id;
  return t.emit(std::move(n), std::move(out));
}

inline Var log_softmax_lastdim(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  Tensor out(x.shape);
  long last = x.dim(-1), rows = x.size() / last;
  for (long r = 0; r < rows; ++r) {
    const double* px = x.data.data() + r * last;
    double* po = out.data.data() + r * last;
    double m = px[0];
    for (long k = 1; k < last; ++k) m = std::max(m, px[k]);
    double s = 0.0;
    for (long k = 0; k < last; ++k) s += std::exp(px[k] - m);
    double lse = m + std::log(s);
    for (long k = 0; k < last; ++k) po[k] = px[k] - lse;
  }
  TapeNode n;
  n.op = Op::LogSoftmax;
  n.a = a.id;
  return t.emit(std::move(n), std::move(out));
}

inline Var reshape(Var a, Shape s) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (numel(s) != x.size())
    throw ConfigError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(s));
  Tensor out(std::move(s), x.data);
  TapeNode n;
  n.op = Op::Reshape;
  n.a = a.id;
  return t.emit(std::move(n), std::move(out));
}

inline Var concat(const std::vector<Var>& parts, long axis) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  Tape& t = *parts[0].tape;
  const Shape& s0 = t.value(parts[0]).shape;
  if (axis < 0) axis += static_cast<long>(s0.size());
  Shape os = s0;
  long total = 0;
  for (const Var& p : parts) {
    const Shape& s = t.value(p).shape;
    if (s.size() != s0.size()) throw ConfigError("concat: rank mismatch");
    for (size_t d = 0; d < s.size(); ++d)
      if (static_cast<long>(d) != axis && s[d] != s0[d])
        throw ConfigError("concat: extent mismatch off the concat axis");
    total += s[static_cast<size_t>(axis)];
  }
  os[static_cast<size_t>(axis)] = total;
  Tensor out(os);
  long outer = 1;
  for (long d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
  long inner = 1;
  for (size_t d = static_cast<size_t>(axis) + 1; d < os.size(); ++d) inner *= os[d];
  long off = 0;
  for (const Var& p : parts) {
    const Tensor& x = t.value(p);
    long len = x.shape[static_cast<size_t>(axis)];
    for (long o = 0; o < outer; ++o)
      for (long k = 0; k < len * inner; ++k)
        out[o * total * inner + off * inner + k] = x[o * len * inner + k];
    off += len;
  }
  TapeNode n;
  n.op = Op::Concat;
  n.i0 = axis;
  n.a = parts[0].id;
  n.b = parts.size() > 1 ? parts[1].id : -1;
  for (size_t i = 2; i < parts.size(); ++i) n.rest.push_back(parts[i].id);
  return t.emit(std::move(n), std::move(out));
}

inline Var slice(Var a, long axis, long start, long len) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (axis < 0) axis += x.rank();
  long full = x.shape[static_cast<size_t>(axis)];
  if (start < 0 || len <= 0 || start + len > full)
    throw ConfigError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") outside extent " + std::to_string(full));
  Shape os = x.shape;
  os[static_cast<size_t>(axis)] = len;
  Tensor out(os);
  long outer = 1;
  for (long d = 0; d < axis; ++d) outer *= x.shape[static_cast<size_t>(d)];
  long inner = 1;
  for (size_t d = static_cast<size_t>(axis) + 1; d < x.shape.size(); ++d) inner *= x.shape[d];
  for (long o = 0; o < outer; ++o)
    for (long k = 0; k < len * inner; ++k)
      out[o * len * inner + k] = x[o * full * inner + start * inner + k];
  TapeNode n;
  n.op = Op::Slice;
  n.a = a.id;
  n.i0 = axis;
  n.i1 = start;
  n.i2 = len;
  return t.emit(std::move(n), std::move(out));
}

inline Var reduce(Var a, long axis, bool keepdim, bool mean) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (axis < 0) axis += x.rank();
  long nred = x.shape[static_cast<size_t>(axis)];
  Shape os;
  for (size_t d = 0; d < x.shape.size(); ++d) {
    if (static_cast<long>(d) == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.shape[d]);
    }
  }
  Tensor out(os);
  long outer = 1;
  for (long d = 0; d < axis; ++d) outer *= x.shape[static_cast<size_t>(d)];
  long inner = 1;
  for (size_t d = static_cast<size_t>(axis) + 1; d < x.shape.size(); ++d) inner *= x.shape[d];
  for (long o = 0; o < outer; ++o)
    for (long r = 0; r < nred; ++r)
      for (long k = 0; k < inner; ++k)
        out[o * inner + k] += x[(o * nred + r) * inner + k];
  if (mean)
    for (double& v : out.data) v /= static_cast<double>(nred);
  TapeNode n;
  n.op = mean ? Op::ReduceMean : Op::ReduceSum;
  n.a = a.id;
  n.i0 = axis;
  n.i1 = keepdim;
  return t.emit(std::move(n), std::move(out));
}

inline Var reduce_sum(Var a, long axis, bool keepdim = false) { return reduce(a, axis, keepdim, false); }
inline Var reduce_mean(Var a, long axis, bool keepdim = false) { return reduce(a, axis, keepdim, true); }

// Sum of every element, as a scalar.
inline Var reduce_sum_all(Var a) {
  Tape& t = *a.tape;
  long n = t.value(a).size();
  return reduce_sum(reshape(a, {n}), 0, false);
}

inline Var gather_rows(Var a, const std::vector<long>& idx) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  if (x.rank() < 1) throw ConfigError("gather_rows: input must have rank >= 1");
  long rows = x.shape[0];
  long inner = x.size() / rows;
  for (long r : idx)
    if (r < 0 || r >= rows)
      throw DataError("gather_rows: index " + std::to_string(r) + " outside [0," +
                      std::to_string(rows) + ")");
  Shape os;
  os.push_back(static_cast<long>(idx.size()));
  for (size_t d = 1; d < x.shape.size(); ++d) os.push_back(x.shape[d]);
  Tensor out(os);
  for (size_t r = 0; r < idx.size(); ++r)
    for (long k = 0; k < inner; ++k)
      out[static_cast<long>(r) * inner + k] = x[idx[r] * inner + k];
  TapeNode n;
  n.op = Op::GatherRows;
  n.a = a.id;
  n.idx = idx;
  return t.emit(std::move(n), std::move(out));
}

// Picks one entry along the last dim per leading position.
inline Var gather_last(Var a, const std::vector<long>& idx) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  long last = x.dim(-1);
  long rows = x.size() / last;
  if (static_cast<long>(idx.size()) != rows)
    throw ConfigError("gather_last: need one index per leading position");
  for (long r : idx)
    if (r < 0 || r >= last)
      throw DataError("gather_last: index " + std::to_string(r) + " outside [0," +
                      std::to_string(last) + ")");
  Shape os(x.shape.begin(), x.shape.end() - 1);
  Tensor out(os);
  for (long r = 0; r < rows; ++r) out[r] = x[r * last + idx[static_cast<size_t>(r)]];
  TapeNode n;
  n.op = Op::GatherLast;
  n.a = a.id;
  n.idx = idx;
  return t.emit(std::move(n), std::move(out));
}

// Identity forward, zero backward.
inline Var detach(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  TapeNode n;
  n.op = Op::Detach;
  n.a = a.id;
  return t.emit(std::move(n), std::move(out));
}

}  // namespace wb
