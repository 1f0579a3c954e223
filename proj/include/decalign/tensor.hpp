#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "decalign/errors.hpp"

namespace decalign::ad {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

class Tape;

/// Dense f64 tensor. Values are immutable once constructed; a tensor either
/// lives on a Tape (participates in backward) or is a plain constant.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values)
      : values_(std::make_shared<const std::vector<double>>(std::move(values))),
        shape_(std::move(shape)) {
    if (static_cast<int64_t>(values_->size()) != numel(shape_))
      throw ShapeMismatch("Tensor: " + std::to_string(values_->size()) +
                          " values for shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor zeros(Shape shape) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  const Shape& shape() const { return shape_; }
  int64_t size() const { return values_ ? static_cast<int64_t>(values_->size()) : 0; }
  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<double>& values() const { return *values_; }
  std::shared_ptr<const std::vector<double>> values_ptr() const { return values_; }

  double value() const {
    if (size() != 1) throw NotScalar("Tensor::value: shape " + shape_str(shape_));
    return (*values_)[0];
  }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  /// Gradient accumulated by the last backward() on this tensor's tape.
  const std::vector<double>& grad() const;
  bool has_grad() const;

 private:
  friend class Tape;
  std::shared_ptr<const std::vector<double>> values_;
  Shape shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Record of primitive ops in creation order (which is a topological order:
/// inputs always precede outputs). backward() walks it once in reverse.
/// A Tape is single-threaded; tensors without grad are safe to share.
class Tape {
 public:
  using BackFn = std::function<void(const std::vector<double>& gout, Tape&)>;

  Tensor leaf(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    attach(t, {}, nullptr);
    return t;
  }

  /// Used by primitives: registers `out` as produced from `parents`.
  Tensor record(Tensor out, std::vector<int> parents, BackFn back) {
    attach(out, std::move(parents), std::move(back));
    return out;
  }

  void backward(const Tensor& root) {
    if (root.size() != 1)
      throw NotScalar("backward: root has shape " + shape_str(root.shape()));
    if (root.tape() != this || root.node() < 0)
      throw DetachedRoot("backward: root is not on this tape");

    grads_.assign(nodes_.size(), {});
    std::vector<char> reachable(nodes_.size(), 0);
    // mark ancestors of root; creation order lets one reverse pass do it
    reachable[root.node()] = 1;
    for (int i = root.node(); i >= 0; --i) {
      if (!reachable[i]) continue;
      for (int p : nodes_[i].parents) reachable[p] = 1;
    }
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (reachable[i]) grads_[i].assign(nodes_[i].size, 0.0);

    grads_[root.node()][0] = 1.0;
    for (int i = root.node(); i >= 0; --i) {
      if (!reachable[i] || !nodes_[i].back) continue;
      nodes_[i].back(grads_[i], *this);
    }
    ran_ = true;
  }

  std::vector<double>& grad_buf(int node) { return grads_[node]; }

  bool has_grad(const Tensor& t) const {
    return ran_ && t.tape() == this && t.node() >= 0 &&
           !grads_[t.node()].empty();
  }

  const std::vector<double>& grad(const Tensor& t) const {
    if (!has_grad(t))
      throw Error("grad: no gradient recorded for this tensor (did backward run?)");
    return grads_[t.node()];
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    int64_t size;
    std::vector<int> parents;
    BackFn back;
  };

  void attach(Tensor& t, std::vector<int> parents, BackFn back) {
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.size(), std::move(parents), std::move(back)});
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool ran_ = false;
};

inline const std::vector<double>& Tensor::grad() const {
  if (!tape_) throw Error("grad: tensor is not on a tape");
  return tape_->grad(*this);
}
inline bool Tensor::has_grad() const { return tape_ && tape_->has_grad(*this); }

/// Same values, no tape edge: gradients stop here.
inline Tensor detach(const Tensor& t) {
  Tensor out;
  out = Tensor(t.shape(), t.values());
  return out;
}

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

inline Tape* common_tape(const Tensor& a, const Tensor& b) {
  Tape* ta = a.tape();
  Tape* tb = b.tape();
  if (ta && tb && ta != tb) throw Error("operands live on different tapes");
  return ta ? ta : tb;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw ShapeMismatch(std::string(who) + ": " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

struct AxisSpan {
  int64_t outer, len, inner;
};

inline AxisSpan axis_span(const Shape& s, int axis, const char* who) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeMismatch(std::string(who) + ": axis " + std::to_string(axis) +
                        " out of range for " + shape_str(s));
  AxisSpan sp{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) sp.inner *= s[i];
  return sp;
}

inline Shape drop_axis(const Shape& s, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(s.size()); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (same shape, or one scalar operand)

namespace detail {

template <class Fwd, class BackA, class BackB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 BackA back_a, BackB back_b) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = !same && a.size() == 1;
  const bool b_scalar = !same && !a_scalar && b.size() == 1;
  if (!same && !a_scalar && !b_scalar) require_same_shape(a, b, name);

  const auto& av = a.values();
  const auto& bv = b.values();
  const int64_t n = std::max(a.size(), b.size());
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i)
    out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);

  Shape shape = a_scalar ? b.shape() : a.shape();
  Tensor result(std::move(shape), std::move(out));
  Tape* tape = common_tape(a, b);
  if (!tape) return result;

  int pa = a.tape() ? a.node() : -1;
  int pb = b.tape() ? b.node() : -1;
  std::vector<int> parents;
  if (pa >= 0) parents.push_back(pa);
  if (pb >= 0) parents.push_back(pb);
  auto apv = a.values_ptr();
  auto bpv = b.values_ptr();
  return tape->record(
      std::move(result), std::move(parents),
      [pa, pb, apv, bpv, a_scalar, b_scalar, n, back_a, back_b](
          const std::vector<double>& g, Tape& t) {
        if (pa >= 0) {
          auto& ga = t.grad_buf(pa);
          for (int64_t i = 0; i < n; ++i)
            ga[a_scalar ? 0 : i] +=
                back_a(g[i], (*apv)[a_scalar ? 0 : i], (*bpv)[b_scalar ? 0 : i]);
        }
        if (pb >= 0) {
          auto& gb = t.grad_buf(pb);
          for (int64_t i = 0; i < n; ++i)
            gb[b_scalar ? 0 : i] +=
                back_b(g[i], (*apv)[a_scalar ? 0 : i], (*bpv)[b_scalar ? 0 : i]);
        }
      });
}

template <class Fwd, class Back>
Tensor unary_op(const Tensor& a, Fwd fwd, Back back) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor result(a.shape(), std::move(out));
  if (!a.tape()) return result;
  int pa = a.node();
  auto apv = a.values_ptr();
  auto opv = result.values_ptr();
  return a.tape()->record(std::move(result), {pa},
                          [pa, apv, opv, back](const std::vector<double>& g, Tape& t) {
                            auto& ga = t.grad_buf(pa);
                            for (size_t i = 0; i < g.size(); ++i)
                              ga[i] += back(g[i], (*apv)[i], (*opv)[i]);
                          });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return c * x; },
      [c](double g, double, double) { return c * g; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

inline Tensor power(const Tensor& a, double p) {
  return detail::unary_op(
      a, [p](double x) { return std::pow(x, p); },
      [p](double g, double x, double) { return g * p * std::pow(x, p - 1.0); });
}

// ---------------------------------------------------------------------------
// matmul: (m,k)x(k,n) -> (m,n), or batched (B,m,k)x(k,n) -> (B,m,n)

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || (a.rank() != 2 && a.rank() != 3))
    throw ShapeMismatch("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  const int batch = a.rank() == 3 ? a.shape()[0] : 1;
  const int m = a.shape()[a.rank() - 2];
  const int k = a.shape()[a.rank() - 1];
  const int k2 = b.shape()[0];
  const int n = b.shape()[1];
  if (k != k2)
    throw ShapeMismatch("matmul: inner dims " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(batch) * m * n, 0.0);
  for (int bn = 0; bn < batch; ++bn) {
    const double* ap = av.data() + static_cast<size_t>(bn) * m * k;
    double* op = out.data() + static_cast<size_t>(bn) * m * n;
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        double x = ap[i * k + kk];
        if (x == 0.0) continue;
        const double* bp = bv.data() + static_cast<size_t>(kk) * n;
        for (int j = 0; j < n; ++j) op[i * n + j] += x * bp[j];
      }
  }
  Shape oshape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
  Tensor result(std::move(oshape), std::move(out));
  Tape* tape = detail::common_tape(a, b);
  if (!tape) return result;

  int pa = a.tape() ? a.node() : -1;
  int pb = b.tape() ? b.node() : -1;
  std::vector<int> parents;
  if (pa >= 0) parents.push_back(pa);
  if (pb >= 0) parents.push_back(pb);
  auto apv = a.values_ptr();
  auto bpv = b.values_ptr();
  return tape->record(std::move(result), std::move(parents),
                      [=](const std::vector<double>& g, Tape& t) {
                        for (int bn = 0; bn < batch; ++bn) {
                          const double* gp = g.data() + static_cast<size_t>(bn) * m * n;
                          const double* ap = apv->data() + static_cast<size_t>(bn) * m * k;
                          if (pa >= 0) {
                            double* ga = t.grad_buf(pa).data() + static_cast<size_t>(bn) * m * k;
                            // dA = G B^T
                            for (int i = 0; i < m; ++i)
                              for (int j = 0; j < n; ++j) {
                                double gv = gp[i * n + j];
                                if (gv == 0.0) continue;
                                const double* bp = bpv->data();
                                for (int kk = 0; kk < k; ++kk)
                                  ga[i * k + kk] += gv * bp[kk * n + j];
                              }
                          }
                          if (pb >= 0) {
                            double* gb = t.grad_buf(pb).data();
                            // dB += A^T G
                            for (int i = 0; i < m; ++i)
                              for (int kk = 0; kk < k; ++kk) {
                                double xv = ap[i * k + kk];
                                if (xv == 0.0) continue;
                                for (int j = 0; j < n; ++j)
                                  gb[kk * n + j] += xv * gp[i * n + j];
                              }
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor result(std::move(shape), a.values());
  if (!a.tape()) return result;
  int pa = a.node();
  return a.tape()->record(std::move(result), {pa},
                          [pa](const std::vector<double>& g, Tape& t) {
                            auto& ga = t.grad_buf(pa);
                            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          });
}

/// Swap two axes. Covers the 2D transpose and the (N,T,d) <-> (N,d,T) moves.
inline Tensor transpose(const Tensor& a, int ax0, int ax1) {
  const Shape& s = a.shape();
  if (ax0 < 0 || ax1 < 0 || ax0 >= a.rank() || ax1 >= a.rank())
    throw ShapeMismatch("transpose: bad axes for " + shape_str(s));
  Shape os = s;
  std::swap(os[ax0], os[ax1]);

  const int r = a.rank();
  std::vector<int64_t> in_stride(r, 1), out_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * s[i + 1];
  for (int i = r - 2; i >= 0; --i) out_stride[i] = out_stride[i + 1] * os[i + 1];

  const auto& av = a.values();
  std::vector<double> out(av.size());
  std::vector<int> idx(r, 0);
  for (int64_t flat = 0; flat < a.size(); ++flat) {
    int64_t rem = flat;
    int64_t dst = 0;
    for (int i = 0; i < r; ++i) {
      idx[i] = static_cast<int>(rem / in_stride[i]);
      rem %= in_stride[i];
    }
    std::swap(idx[ax0], idx[ax1]);
    for (int i = 0; i < r; ++i) dst += idx[i] * out_stride[i];
    out[dst] = av[flat];
  }
  Tensor result(std::move(os), std::move(out));
  if (!a.tape()) return result;
  int pa = a.node();
  Shape ishape = s;
  return a.tape()->record(
      std::move(result), {pa},
      [pa, ishape, ax0, ax1](const std::vector<double>& g, Tape& t) {
        // transposing the gradient back is the same index shuffle
        const int r = static_cast<int>(ishape.size());
        Shape oshape = ishape;
        std::swap(oshape[ax0], oshape[ax1]);
        std::vector<int64_t> in_stride(r, 1), out_stride(r, 1);
        for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * ishape[i + 1];
        for (int i = r - 2; i >= 0; --i) out_stride[i] = out_stride[i + 1] * oshape[i + 1];
        auto& ga = t.grad_buf(pa);
        std::vector<int> idx(r, 0);
        for (int64_t flat = 0; flat < static_cast<int64_t>(ga.size()); ++flat) {
          int64_t rem = flat;
          int64_t dst = 0;
          for (int i = 0; i < r; ++i) {
            idx[i] = static_cast<int>(rem / in_stride[i]);
            rem %= in_stride[i];
          }
          std::swap(idx[ax0], idx[ax1]);
          for (int i = 0; i < r; ++i) dst += idx[i] * out_stride[i];
          ga[flat] += g[dst];
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeMismatch("transpose: expected rank 2, got " + shape_str(a.shape()));
  return transpose(a, 0, 1);
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  auto sp = detail::axis_span(a.shape(), axis, "slice");
  if (start < 0 || len < 0 || start + len > sp.len)
    throw ShapeMismatch("slice: [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") out of axis " +
                        std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape os = a.shape();
  os[axis] = len;
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(sp.outer) * len * sp.inner);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < len; ++i)
      for (int64_t in = 0; in < sp.inner; ++in)
        out[(o * len + i) * sp.inner + in] =
            av[(o * sp.len + start + i) * sp.inner + in];
  Tensor result(std::move(os), std::move(out));
  if (!a.tape()) return result;
  int pa = a.node();
  return a.tape()->record(std::move(result), {pa},
                          [pa, sp, start, len](const std::vector<double>& g, Tape& t) {
                            auto& ga = t.grad_buf(pa);
                            for (int64_t o = 0; o < sp.outer; ++o)
                              for (int64_t i = 0; i < len; ++i)
                                for (int64_t in = 0; in < sp.inner; ++in)
                                  ga[(o * sp.len + start + i) * sp.inner + in] +=
                                      g[(o * len + i) * sp.inner + in];
                          });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw EmptyInput("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  Tape* tape = nullptr;
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(s0.size()))
      throw ShapeMismatch("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                          shape_str(s0));
    for (int i = 0; i < p.rank(); ++i)
      if (i != axis && p.shape()[i] != s0[i])
        throw ShapeMismatch("concat: " + shape_str(p.shape()) + " vs " + shape_str(s0));
    total += p.shape()[axis];
    if (p.tape()) {
      if (tape && tape != p.tape()) throw Error("concat: operands on different tapes");
      tape = p.tape();
    }
  }
  Shape os = s0;
  os[axis] = total;
  auto osp = detail::axis_span(os, axis, "concat");
  std::vector<double> out(numel(os));
  int offset = 0;
  for (const auto& p : parts) {
    auto sp = detail::axis_span(p.shape(), axis, "concat");
    const auto& pv = p.values();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t i = 0; i < sp.len; ++i)
        for (int64_t in = 0; in < sp.inner; ++in)
          out[(o * osp.len + offset + i) * osp.inner + in] =
              pv[(o * sp.len + i) * sp.inner + in];
    offset += static_cast<int>(sp.len);
  }
  Tensor result(std::move(os), std::move(out));
  if (!tape) return result;

  struct Piece {
    int parent;
    detail::AxisSpan span;
    int offset;
  };
  std::vector<Piece> pieces;
  std::vector<int> parents;
  offset = 0;
  for (const auto& p : parts) {
    auto sp = detail::axis_span(p.shape(), axis, "concat");
    if (p.tape()) {
      pieces.push_back(Piece{p.node(), sp, offset});
      parents.push_back(p.node());
    }
    offset += static_cast<int>(sp.len);
  }
  return tape->record(std::move(result), std::move(parents),
                      [pieces, osp](const std::vector<double>& g, Tape& t) {
                        for (const auto& pc : pieces) {
                          auto& ga = t.grad_buf(pc.parent);
                          const auto& sp = pc.span;
                          for (int64_t o = 0; o < sp.outer; ++o)
                            for (int64_t i = 0; i < sp.len; ++i)
                              for (int64_t in = 0; in < sp.inner; ++in)
                                ga[(o * sp.len + i) * sp.inner + in] +=
                                    g[(o * osp.len + pc.offset + i) * osp.inner + in];
                        }
                      });
}

// ---------------------------------------------------------------------------
// reductions and normalizations along an axis

inline Tensor sum(const Tensor& a, int axis) {
  auto sp = detail::axis_span(a.shape(), axis, "sum");
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(sp.outer) * sp.inner, 0.0);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.len; ++i)
      for (int64_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += av[(o * sp.len + i) * sp.inner + in];
  Tensor result(detail::drop_axis(a.shape(), axis), std::move(out));
  if (!a.tape()) return result;
  int pa = a.node();
  return a.tape()->record(std::move(result), {pa},
                          [pa, sp](const std::vector<double>& g, Tape& t) {
                            auto& ga = t.grad_buf(pa);
                            for (int64_t o = 0; o < sp.outer; ++o)
                              for (int64_t i = 0; i < sp.len; ++i)
                                for (int64_t in = 0; in < sp.inner; ++in)
                                  ga[(o * sp.len + i) * sp.inner + in] += g[o * sp.inner + in];
                          });
}

inline Tensor mean(const Tensor& a, int axis) {
  auto sp = detail::axis_span(a.shape(), axis, "mean");
  return scale(sum(a, axis), 1.0 / static_cast<double>(sp.len));
}

/// Sum of every element, as a rank-0 scalar.
inline Tensor sum_all(const Tensor& a) {
  Tensor flat = reshape(a, Shape{static_cast<int>(a.size())});
  return reshape(sum(flat, 0), Shape{});
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor softmax(const Tensor& a, int axis) {
  auto sp = detail::axis_span(a.shape(), axis, "softmax");
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      double m = -1e308;
      for (int64_t i = 0; i < sp.len; ++i)
        m = std::max(m, av[(o * sp.len + i) * sp.inner + in]);
      double z = 0.0;
      for (int64_t i = 0; i < sp.len; ++i)
        z += std::exp(av[(o * sp.len + i) * sp.inner + in] - m);
      for (int64_t i = 0; i < sp.len; ++i)
        out[(o * sp.len + i) * sp.inner + in] =
            std::exp(av[(o * sp.len + i) * sp.inner + in] - m) / z;
    }
  Tensor result(a.shape(), std::move(out));
  if (!a.tape()) return result;
  int pa = a.node();
  auto opv = result.values_ptr();
  return a.tape()->record(
      std::move(result), {pa}, [pa, sp, opv](const std::vector<double>& g, Tape& t) {
        auto& ga = t.grad_buf(pa);
        const auto& s = *opv;
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t in = 0; in < sp.inner; ++in) {
            double gs = 0.0;
            for (int64_t i = 0; i < sp.len; ++i) {
              int64_t at = (o * sp.len + i) * sp.inner + in;
              gs += g[at] * s[at];
            }
            for (int64_t i = 0; i < sp.len; ++i) {
              int64_t at = (o * sp.len + i) * sp.inner + in;
              ga[at] += s[at] * (g[at] - gs);
            }
          }
      });
}

/// Euclidean norm along an axis. Zero-norm slices get a zero subgradient so
/// masked rows upstream cannot poison the pass with NaNs.
inline Tensor l2_norm(const Tensor& a, int axis) {
  auto sp = detail::axis_span(a.shape(), axis, "l2_norm");
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(sp.outer) * sp.inner, 0.0);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.len; ++i)
      for (int64_t in = 0; in < sp.inner; ++in) {
        double v = av[(o * sp.len + i) * sp.inner + in];
        out[o * sp.inner + in] += v * v;
      }
  for (auto& v : out) v = std::sqrt(v);
  Tensor result(detail::drop_axis(a.shape(), axis), std::move(out));
  if (!a.tape()) return result;
  int pa = a.node();
  auto apv = a.values_ptr();
  auto opv = result.values_ptr();
  return a.tape()->record(
      std::move(result), {pa}, [pa, sp, apv, opv](const std::vector<double>& g, Tape& t) {
        auto& ga = t.grad_buf(pa);
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t in = 0; in < sp.inner; ++in) {
            double r = (*opv)[o * sp.inner + in];
            if (r <= 0.0) continue;
            double f = g[o * sp.inner + in] / r;
            for (int64_t i = 0; i < sp.len; ++i) {
              int64_t at = (o * sp.len + i) * sp.inner + in;
              ga[at] += f * (*apv)[at];
            }
          }
      });
}

// ---------------------------------------------------------------------------
// structured ops

/// x: (..., d), b: (d). Explicit last-axis bias; `add` itself never
/// broadcasts beyond scalars.
inline Tensor bias_add(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.shape()[0])
    throw ShapeMismatch("bias_add: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const int d = b.shape()[0];
  const int64_t rows = x.size() / d;
  const auto& xv = x.values();
  const auto& bv = b.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < rows; ++r)
    for (int i = 0; i < d; ++i) out[r * d + i] = xv[r * d + i] + bv[i];
  Tensor result(x.shape(), std::move(out));
  Tape* tape = detail::common_tape(x, b);
  if (!tape) return result;
  int px = x.tape() ? x.node() : -1;
  int pb = b.tape() ? b.node() : -1;
  std::vector<int> parents;
  if (px >= 0) parents.push_back(px);
  if (pb >= 0) parents.push_back(pb);
  return tape->record(std::move(result), std::move(parents),
                      [px, pb, rows, d](const std::vector<double>& g, Tape& t) {
                        if (px >= 0) {
                          auto& gx = t.grad_buf(px);
                          for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        }
                        if (pb >= 0) {
                          auto& gb = t.grad_buf(pb);
                          for (int64_t r = 0; r < rows; ++r)
                            for (int i = 0; i < d; ++i) gb[i] += g[r * d + i];
                        }
                      });
}

/// 1D temporal convolution, stride 1, zero same-padding. x: (N,T,Cin),
/// kernel: (w,Cin,Cout) with odd w. Output (N,T,Cout).
inline Tensor conv1d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3 || kernel.rank() != 3)
    throw ShapeMismatch("conv1d: " + shape_str(x.shape()) + " with kernel " +
                        shape_str(kernel.shape()));
  const int n = x.shape()[0], tlen = x.shape()[1], cin = x.shape()[2];
  const int w = kernel.shape()[0], kin = kernel.shape()[1], cout = kernel.shape()[2];
  if (cin != kin)
    throw ShapeMismatch("conv1d: channels " + shape_str(x.shape()) + " vs kernel " +
                        shape_str(kernel.shape()));
  if (w % 2 == 0) throw ShapeMismatch("conv1d: kernel width must be odd, got " + std::to_string(w));
  const int half = w / 2;

  const auto& xv = x.values();
  const auto& kv = kernel.values();
  std::vector<double> out(static_cast<size_t>(n) * tlen * cout, 0.0);
  for (int b = 0; b < n; ++b)
    for (int t0 = 0; t0 < tlen; ++t0)
      for (int u = 0; u < w; ++u) {
        int src = t0 + u - half;
        if (src < 0 || src >= tlen) continue;
        const double* xp = xv.data() + (static_cast<size_t>(b) * tlen + src) * cin;
        const double* kp = kv.data() + static_cast<size_t>(u) * cin * cout;
        double* op = out.data() + (static_cast<size_t>(b) * tlen + t0) * cout;
        for (int i = 0; i < cin; ++i) {
          double xvv = xp[i];
          if (xvv == 0.0) continue;
          for (int o = 0; o < cout; ++o) op[o] += xvv * kp[i * cout + o];
        }
      }
  Tensor result(Shape{n, tlen, cout}, std::move(out));
  Tape* tape = detail::common_tape(x, kernel);
  if (!tape) return result;
  int px = x.tape() ? x.node() : -1;
  int pk = kernel.tape() ? kernel.node() : -1;
  std::vector<int> parents;
  if (px >= 0) parents.push_back(px);
  if (pk >= 0) parents.push_back(pk);
  auto xpv = x.values_ptr();
  auto kpv = kernel.values_ptr();
  return tape->record(
      std::move(result), std::move(parents),
      [=](const std::vector<double>& g, Tape& t) {
        for (int b = 0; b < n; ++b)
          for (int t0 = 0; t0 < tlen; ++t0)
            for (int u = 0; u < w; ++u) {
              int src = t0 + u - half;
              if (src < 0 || src >= tlen) continue;
              const double* gp = g.data() + (static_cast<size_t>(b) * tlen + t0) * cout;
              const double* xp = xpv->data() + (static_cast<size_t>(b) * tlen + src) * cin;
              const double* kp = kpv->data() + static_cast<size_t>(u) * cin * cout;
              if (px >= 0) {
                double* gx = t.grad_buf(px).data() +
                             (static_cast<size_t>(b) * tlen + src) * cin;
                for (int i = 0; i < cin; ++i)
                  for (int o = 0; o < cout; ++o) gx[i] += gp[o] * kp[i * cout + o];
              }
              if (pk >= 0) {
                double* gk = t.grad_buf(pk).data() + static_cast<size_t>(u) * cin * cout;
                for (int i = 0; i < cin; ++i)
                  for (int o = 0; o < cout; ++o) gk[i * cout + o] += gp[o] * xp[i];
              }
            }
      });
}

/// D[i,j] = ||x_i - y_j||^2 for x (n,d), y (m,d). Fused so kernel losses do
/// not need row/column broadcasting.
inline Tensor pairwise_sqdist(const Tensor& x, const Tensor& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1])
    throw ShapeMismatch("pairwise_sqdist: " + shape_str(x.shape()) + " vs " +
                        shape_str(y.shape()));
  const int n = x.shape()[0], m = y.shape()[0], d = x.shape()[1];
  const auto& xv = x.values();
  const auto& yv = y.values();
  std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) {
        double diff = xv[i * d + k] - yv[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  Tensor result(Shape{n, m}, std::move(out));
  Tape* tape = detail::common_tape(x, y);
  if (!tape) return result;
  int px = x.tape() ? x.node() : -1;
  int py = y.tape() ? y.node() : -1;
  std::vector<int> parents;
  if (px >= 0) parents.push_back(px);
  if (py >= 0) parents.push_back(py);
  auto xpv = x.values_ptr();
  auto ypv = y.values_ptr();
  return tape->record(std::move(result), std::move(parents),
                      [=](const std::vector<double>& g, Tape& t) {
                        for (int i = 0; i < n; ++i)
                          for (int j = 0; j < m; ++j) {
                            double gv = g[i * m + j];
                            if (gv == 0.0) continue;
                            for (int k = 0; k < d; ++k) {
                              double diff = (*xpv)[i * d + k] - (*ypv)[j * d + k];
                              if (px >= 0) t.grad_buf(px)[i * d + k] += 2.0 * gv * diff;
                              if (py >= 0) t.grad_buf(py)[j * d + k] -= 2.0 * gv * diff;
                            }
                          }
                      });
}

/// Mean softmax cross-entropy over rows of (N,K) logits; fused for
/// numerical stability. Labels are class indices.
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw ShapeMismatch("cross_entropy_logits: logits " + shape_str(logits.shape()));
  const int n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n)
    throw ShapeMismatch("cross_entropy_logits: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
  const auto& lv = logits.values();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw Error("cross_entropy_logits: label out of range");
    double m = -1e308;
    for (int j = 0; j < k; ++j) m = std::max(m, lv[i * k + j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(lv[i * k + j] - m);
    loss += m + std::log(z) - lv[i * k + labels[i]];
  }
  Tensor result(Shape{}, {loss / n});
  if (!logits.tape()) return result;
  int pl = logits.node();
  auto lpv = logits.values_ptr();
  auto labels_copy = labels;
  return logits.tape()->record(
      std::move(result), {pl},
      [pl, lpv, labels_copy, n, k](const std::vector<double>& g, Tape& t) {
        auto& gl = t.grad_buf(pl);
        const auto& lv = *lpv;
        double gs = g[0] / n;
        for (int i = 0; i < n; ++i) {
          double m = -1e308;
          for (int j = 0; j < k; ++j) m = std::max(m, lv[i * k + j]);
          double z = 0.0;
          for (int j = 0; j < k; ++j) z += std::exp(lv[i * k + j] - m);
          for (int j = 0; j < k; ++j) {
            double p = std::exp(lv[i * k + j] - m) / z;
            gl[i * k + j] += gs * (p - (j == labels_copy[i] ? 1.0 : 0.0));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// composites used all over the place

/// (d,) -> (n,d) by repeating the row; constant ones do the broadcast.
inline Tensor tile_rows(const Tensor& v, int n) {
  if (v.rank() != 1) throw ShapeMismatch("tile_rows: expected rank 1, got " + shape_str(v.shape()));
  Tensor ones(Shape{n, 1}, std::vector<double>(n, 1.0));
  return matmul(ones, reshape(v, Shape{1, v.shape()[0]}));
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum_all(mul(a, b)); }

inline Tensor sq_frobenius(const Tensor& a) { return sum_all(mul(a, a)); }

}  // namespace decalign::ad
