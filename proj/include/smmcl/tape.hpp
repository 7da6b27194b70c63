#ifndef SMMCL_TAPE_HPP
#define SMMCL_TAPE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "smmcl/tensor.hpp"

namespace smmcl {

/// Handle to a node on a GradTape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Shared stabilized forward pass of the grouped supervised InfoNCE over a
/// similarity matrix. Anchors without a positive partner are skipped; if
/// every anchor is skipped the loss is 0. Used by both the tape op and the
/// plain loss functions so tests exercise a single code path.
template <typename T>
double grouped_nce_value(const Tensor<T>& sim, const std::vector<int>& la,
                         const std::vector<int>& lb, bool exclude_diag,
                         double tau, int* valid_anchors_out = nullptr) {
  if (tau <= 0) throw ArgumentError("tau must be positive");
  int n = sim.dim(0), m = sim.dim(1);
  double total = 0;
  int valid = 0;
  std::vector<double> e(static_cast<size_t>(m));
  for (int i = 0; i < n; ++i) {
    const T* row = sim.data() + static_cast<size_t>(i) * m;
    double mx = -std::numeric_limits<double>::infinity();
    bool has_pos = false;
    for (int j = 0; j < m; ++j) {
      if (exclude_diag && j == i) continue;
      mx = std::max(mx, static_cast<double>(row[j]) / tau);
      if (lb[static_cast<size_t>(j)] == la[static_cast<size_t>(i)]) has_pos = true;
    }
    if (!has_pos) continue;
    ++valid;
    double zneg = 0;
    int npos = 0;
    for (int j = 0; j < m; ++j) {
      if (exclude_diag && j == i) continue;
      e[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) / tau - mx);
      if (lb[static_cast<size_t>(j)] != la[static_cast<size_t>(i)])
        zneg += e[static_cast<size_t>(j)];
      else
        ++npos;
    }
    double li = 0;
    for (int j = 0; j < m; ++j) {
      if (exclude_diag && j == i) continue;
      if (lb[static_cast<size_t>(j)] != la[static_cast<size_t>(i)]) continue;
      double x = static_cast<double>(row[j]) / tau - mx;
      li += -x + std::log(e[static_cast<size_t>(j)] + zneg);
    }
    total += li / npos;
  }
  if (valid_anchors_out) *valid_anchors_out = valid;
  return valid > 0 ? total / valid : 0.0;
}

/// Reverse-mode gradient tape. One tape per forward/backward pass, confined
/// to a single thread. Tensors placed on the tape are never mutated.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor<T> v, bool requires_grad = true, std::string name = "") {
    return push(std::move(v), {}, requires_grad, std::move(name), nullptr);
  }

  Var constant(Tensor<T> v, std::string name = "") {
    return push(std::move(v), {}, false, std::move(name), nullptr);
  }

  const Tensor<T>& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const Tensor<T>& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
  const std::string& name(Var v) const { return nodes_[static_cast<size_t>(v.id)].name; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  /// First node holding a non-finite value, for NaN diagnostics.
  std::string first_non_finite() const {
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (!nodes_[i].value.all_finite())
        return nodes_[i].name.empty() ? ("node#" + std::to_string(i))
                                      : nodes_[i].name;
    return "";
  }

  // -- primitives -----------------------------------------------------------

  Var matmul(Var a, Var b) {
    Tensor<T> c = smmcl::matmul(val(a), val(b));
    int m = val(a).dim(0), k = val(a).dim(1), n = val(b).dim(1);
    return push(std::move(c), {a, b}, any_grad({a, b}), "matmul",
                [this, a, b, m, k, n](const Tensor<T>& g, Var) {
                  if (needs_grad(a))
                    gemm_nt_acc(g.data(), val(b).data(), grad_mut(a).data(), m, n, k);
                  if (needs_grad(b))
                    gemm_tn_acc(val(a).data(), g.data(), grad_mut(b).data(), m, k, n);
                });
  }

  /// Affine map over the last axis with an optional fused relu:
  /// x[..., k] * w[k, n] + b[n] -> [..., n]. Equivalent to
  /// matmul(reshape(x, {rows, k}), w) + b (+ relu), but as one node, so the
  /// intermediate tensors and their gradient passes are skipped.
  Var linear(Var x, Var w, Var b, bool relu_after = false) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    const Tensor<T>& bv = val(b);
    if (xv.rank() < 1 || wv.rank() != 2 || bv.rank() != 1)
      throw ShapeError("linear expects x[...,k], w[k,n], b[n]");
    int k = xv.dims().back(), n = wv.dim(1);
    if (wv.dim(0) != k || bv.dim(0) != n)
      throw ShapeError("linear shape mismatch");
    long long rows = xv.size() / k;
    std::vector<int> od = xv.dims();
    od.back() = n;
    Tensor<T> out = Tensor<T>::uninit(od);
    const T* bp = bv.data();
    for (long long r = 0; r < rows; ++r)
      for (int j = 0; j < n; ++j) out[r * n + j] = bp[j];
    gemm_nn_acc(xv.data(), wv.data(), out.data(), static_cast<int>(rows), k, n);
    if (relu_after)
      for (long long i = 0; i < out.size(); ++i)
        if (out[i] < T(0)) out[i] = T(0);
    return push(std::move(out), {x, w, b}, any_grad({x, w, b}), "linear",
                [this, x, w, b, rows, k, n, relu_after](const Tensor<T>& g,
                                                        Var self) {
                  const T* pg = masked_grad(g, self, relu_after);
                  if (needs_grad(b)) {
                    Tensor<T>& gb = grad_mut(b);
                    for (long long r = 0; r < rows; ++r)
                      for (int j = 0; j < n; ++j) gb[j] += pg[r * n + j];
                  }
                  if (needs_grad(w))
                    gemm_tn_acc(val(x).data(), pg, grad_mut(w).data(),
                                static_cast<int>(rows), k, n);
                  if (needs_grad(x))
                    gemm_nt<T, true>(pg, val(w).data(), grad_mut(x).data(),
                                     static_cast<int>(rows), n, k);
                });
  }

  /// a[n,d] x b[m,d]^T -> [n,m]; used for pairwise similarity matrices.
  Var matmul_nt(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
      throw ShapeError("matmul_nt expects [n,d] and [m,d]");
    int n = av.dim(0), d = av.dim(1), m = bv.dim(0);
    Tensor<T> c = Tensor<T>::uninit({n, m});
    gemm_nt<T, false>(av.data(), bv.data(), c.data(), n, d, m);
    return push(std::move(c), {a, b}, any_grad({a, b}), "matmul_nt",
                [this, a, b, n, d, m](const Tensor<T>& g, Var) {
                  if (needs_grad(a))
                    gemm_nn_acc(g.data(), val(b).data(), grad_mut(a).data(), n, m, d);
                  if (needs_grad(b))
                    gemm_tn_acc(g.data(), val(a).data(), grad_mut(b).data(), n, m, d);
                });
  }

  Var add(Var a, Var b) {
    Tensor<T> c = smmcl::add(val(a), val(b));
    return push(std::move(c), {a, b}, any_grad({a, b}), "add",
                [this, a, b](const Tensor<T>& g, Var) {
                  if (needs_grad(a)) reduce_to_shape_acc(g, grad_mut(a));
                  if (needs_grad(b)) reduce_to_shape_acc(g, grad_mut(b));
                });
  }

  Var mul(Var a, Var b) {
    Tensor<T> c = smmcl::mul(val(a), val(b));
    return push(std::move(c), {a, b}, any_grad({a, b}), "mul",
                [this, a, b](const Tensor<T>& g, Var) {
                  auto side = [this, &g](Var to, Var other) {
                    Tensor<T>& gt = grad_mut(to);
                    const Tensor<T>& ov = val(other);
                    if (gt.dims() == g.dims() && ov.dims() == g.dims()) {
                      for (long long i = 0; i < g.size(); ++i)
                        gt[i] += g[i] * ov[i];
                    } else {
                      reduce_to_shape_acc(smmcl::mul(g, ov), gt);
                    }
                  };
                  if (needs_grad(a)) side(a, b);
                  if (needs_grad(b)) side(b, a);
                });
  }

  /// Gated additive feature update in a single node:
  ///   out = base + (s + c) * other
  /// base/other are [h,w,ch] or [B,h,w,ch]; s gates per position (size B*h*w)
  /// and c per channel (size B*ch). Folding the four broadcast mul/add nodes
  /// into one saves their intermediates and gradient reductions.
  Var cross_update(Var base, Var other, Var s, Var cvec) {
    const Tensor<T>& bv = val(base);
    const Tensor<T>& ov = val(other);
    const Tensor<T>& sv = val(s);
    const Tensor<T>& cv = val(cvec);
    if (!bv.same_shape(ov))
      throw ShapeError("cross_update feature shapes differ");
    if (bv.rank() != 3 && bv.rank() != 4)
      throw ShapeError("cross_update expects [h,w,c] or [B,h,w,c]");
    bool batched = bv.rank() == 4;
    int nb = batched ? bv.dim(0) : 1;
    int hw = bv.dim(batched ? 1 : 0) * bv.dim(batched ? 2 : 1);
    int ch = bv.dims().back();
    if (sv.size() != static_cast<long long>(nb) * hw)
      throw ShapeError("cross_update spatial gate size mismatch");
    if (cv.size() != static_cast<long long>(nb) * ch)
      throw ShapeError("cross_update channel gate size mismatch");
    Tensor<T> out = Tensor<T>::uninit(bv.dims());
    for (int ib = 0; ib < nb; ++ib) {
      const T* cc = cv.data() + static_cast<long long>(ib) * ch;
      for (int p = 0; p < hw; ++p) {
        long long row = static_cast<long long>(ib) * hw + p;
        T sg = sv[row];
        const T* pb = bv.data() + row * ch;
        const T* po = ov.data() + row * ch;
        T* q = out.data() + row * ch;
        for (int j = 0; j < ch; ++j) q[j] = pb[j] + (sg + cc[j]) * po[j];
      }
    }
    return push(
        std::move(out), {base, other, s, cvec},
        any_grad({base, other, s, cvec}), "cross_update",
        [this, base, other, s, cvec, nb, hw, ch](const Tensor<T>& g, Var) {
          const Tensor<T>& ov = val(other);
          const Tensor<T>& sv = val(s);
          const Tensor<T>& cv = val(cvec);
          bool wb = needs_grad(base), wo = needs_grad(other);
          bool ws = needs_grad(s), wc = needs_grad(cvec);
          if (wb) {
            Tensor<T>& gb = grad_mut(base);
            for (long long i = 0; i < g.size(); ++i) gb[i] += g[i];
          }
          Tensor<T>* go = wo ? &grad_mut(other) : nullptr;
          Tensor<T>* gs = ws ? &grad_mut(s) : nullptr;
          Tensor<T>* gc = wc ? &grad_mut(cvec) : nullptr;
          for (int ib = 0; ib < nb; ++ib) {
            const T* cc = cv.data() + static_cast<long long>(ib) * ch;
            T* gcc = wc ? gc->data() + static_cast<long long>(ib) * ch
                        : nullptr;
            for (int p = 0; p < hw; ++p) {
              long long row = static_cast<long long>(ib) * hw + p;
              T sg = sv[row];
              const T* pg = g.data() + row * ch;
              const T* po = ov.data() + row * ch;
              T* pgo = wo ? go->data() + row * ch : nullptr;
              T acc = 0;
              for (int j = 0; j < ch; ++j) {
                T w = pg[j] * po[j];
                acc += w;
                if (wc) gcc[j] += w;
                if (wo) pgo[j] += pg[j] * (sg + cc[j]);
              }
              if (ws) (*gs)[row] += acc;
            }
          }
        });
  }

  Var scale(Var a, T s) {
    Tensor<T> c = val(a);
    for (long long i = 0; i < c.size(); ++i) c[i] *= s;
    return push(std::move(c), {a}, needs_grad(a), "scale",
                [this, a, s](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  Tensor<T>& ga = grad_mut(a);
                  for (long long i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                });
  }

  Var sigmoid(Var a) {
    Tensor<T> c = val(a);
    for (long long i = 0; i < c.size(); ++i) {
      double x = static_cast<double>(c[i]);
      c[i] = static_cast<T>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                   : std::exp(x) / (1.0 + std::exp(x)));
    }
    return push(std::move(c), {a}, needs_grad(a), "sigmoid",
                [this, a](const Tensor<T>& g, Var self) {
                  if (!needs_grad(a)) return;
                  const Tensor<T>& y = val(self);
                  Tensor<T>& ga = grad_mut(a);
                  for (long long i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * y[i] * (T(1) - y[i]);
                });
  }

  Var relu(Var a) {
    Tensor<T> c = val(a);
    for (long long i = 0; i < c.size(); ++i) c[i] = c[i] > T(0) ? c[i] : T(0);
    return push(std::move(c), {a}, needs_grad(a), "relu",
                [this, a](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  const Tensor<T>& x = val(a);
                  Tensor<T>& ga = grad_mut(a);
                  for (long long i = 0; i < g.size(); ++i)
                    if (x[i] > T(0)) ga[i] += g[i];
                });
  }

  Var exp_(Var a) {
    Tensor<T> c = val(a);
    for (long long i = 0; i < c.size(); ++i) c[i] = std::exp(c[i]);
    return push(std::move(c), {a}, needs_grad(a), "exp",
                [this, a](const Tensor<T>& g, Var self) {
                  if (!needs_grad(a)) return;
                  const Tensor<T>& y = val(self);
                  Tensor<T>& ga = grad_mut(a);
                  for (long long i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                });
  }

  Var log_(Var a) {
    Tensor<T> c = val(a);
    for (long long i = 0; i < c.size(); ++i) {
      if (c[i] <= T(0)) throw DomainError("log of non-positive value");
      c[i] = std::log(c[i]);
    }
    return push(std::move(c), {a}, needs_grad(a), "log",
                [this, a](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  const Tensor<T>& x = val(a);
                  Tensor<T>& ga = grad_mut(a);
                  for (long long i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
                });
  }

  Var sum(Var a) {
    T acc = 0;
    for (long long i = 0; i < val(a).size(); ++i) acc += val(a)[i];
    return push(Tensor<T>::scalar(acc), {a}, needs_grad(a), "sum",
                [this, a](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  Tensor<T>& ga = grad_mut(a);
                  for (long long i = 0; i < ga.size(); ++i) ga[i] += g[0];
                });
  }

  Var reshape(Var a, std::vector<int> dims) {
    long long n = 1;
    for (int d : dims) n *= d;
    if (n != val(a).size())
      throw ShapeError("reshape size mismatch: " + dims_str(val(a).dims()) +
                       " -> " + dims_str(dims));
    Tensor<T> c = val(a).reshaped(dims);
    return push(std::move(c), {a}, needs_grad(a), "reshape",
                [this, a](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  Tensor<T>& ga = grad_mut(a);
                  for (long long i = 0; i < g.size(); ++i) ga[i] += g[i];
                });
  }

  /// Concatenate along the last axis; leading dims must match.
  Var concat_last(Var a, Var b) {
    const Tensor<T>& x = val(a);
    const Tensor<T>& y = val(b);
    if (x.rank() != y.rank()) throw ShapeError("concat rank mismatch");
    std::vector<int> od = x.dims();
    for (int i = 0; i + 1 < x.rank(); ++i)
      if (x.dim(i) != y.dim(i)) throw ShapeError("concat leading dim mismatch");
    int ca = x.dims().back(), cb = y.dims().back();
    od.back() = ca + cb;
    Tensor<T> c(od);
    long long rows = x.size() / ca;
    for (long long r = 0; r < rows; ++r) {
      std::copy_n(x.data() + r * ca, ca, c.data() + r * (ca + cb));
      std::copy_n(y.data() + r * cb, cb, c.data() + r * (ca + cb) + ca);
    }
    return push(std::move(c), {a, b}, any_grad({a, b}), "concat",
                [this, a, b, ca, cb, rows](const Tensor<T>& g, Var) {
                  if (needs_grad(a)) {
                    Tensor<T>& ga = grad_mut(a);
                    for (long long r = 0; r < rows; ++r)
                      for (int j = 0; j < ca; ++j)
                        ga[r * ca + j] += g[r * (ca + cb) + j];
                  }
                  if (needs_grad(b)) {
                    Tensor<T>& gb = grad_mut(b);
                    for (long long r = 0; r < rows; ++r)
                      for (int j = 0; j < cb; ++j)
                        gb[r * cb + j] += g[r * (ca + cb) + ca + j];
                  }
                });
  }

  /// Stack rank-2 blocks [Ni,d] into [sum Ni, d].
  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ArgumentError("concat_rows of nothing");
    int d = val(parts[0]).dim(1);
    int total = 0;
    for (Var p : parts) {
      if (val(p).rank() != 2 || val(p).dim(1) != d)
        throw ShapeError("concat_rows expects [N,d] blocks with shared d");
      total += val(p).dim(0);
    }
    Tensor<T> c({total, d});
    long long off = 0;
    for (Var p : parts) {
      std::copy_n(val(p).data(), val(p).size(), c.data() + off);
      off += val(p).size();
    }
    bool rg = false;
    for (Var p : parts) rg = rg || needs_grad(p);
    std::vector<Var> ps = parts;
    return push(std::move(c), ps, rg, "concat_rows",
                [this, ps](const Tensor<T>& g, Var) {
                  long long off = 0;
                  for (Var p : ps) {
                    long long n = val(p).size();
                    if (needs_grad(p)) {
                      Tensor<T>& gp = grad_mut(p);
                      for (long long i = 0; i < n; ++i) gp[i] += g[off + i];
                    }
                    off += n;
                  }
                });
  }

  /// 2-D convolution, zero padding (k-1)/2, NHWC. A leading batch axis is
  /// optional: x is [h,w,cin] or [B,h,w,cin]; w: [kh,kw,cin,cout], b: [cout].
  /// With relu_after the activation is folded into the same node.
  Var conv2d(Var x, Var w, Var b, int stride, bool relu_after = false) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    if ((xv.rank() != 3 && xv.rank() != 4) || wv.rank() != 4)
      throw ShapeError("conv2d expects x[h,w,c] or x[B,h,w,c], w[kh,kw,cin,cout]");
    bool batched = xv.rank() == 4;
    int nb = batched ? xv.dim(0) : 1;
    int h = xv.dim(batched ? 1 : 0), wd = xv.dim(batched ? 2 : 1),
        ci = xv.dim(batched ? 3 : 2);
    int kh = wv.dim(0), kw = wv.dim(1), co = wv.dim(3);
    if (wv.dim(2) != ci) throw ShapeError("conv2d channel mismatch");
    if (stride == 2 && (h % 2 || wd % 2))
      throw ShapeError("conv2d stride 2 requires even spatial dims, got " +
                       dims_str(xv.dims()));
    int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    int oh = (h + 2 * ph - kh) / stride + 1;
    int ow = (wd + 2 * pw - kw) / stride + 1;
    int k = kh * kw * ci;
    long long rows = static_cast<long long>(nb) * oh * ow;
    bool pointwise = kh == 1 && kw == 1 && stride == 1;
    std::vector<int> od = batched ? std::vector<int>{nb, oh, ow, co}
                                  : std::vector<int>{oh, ow, co};

    Tensor<T> out = Tensor<T>::uninit(od);
    const T* bp = val(b).data();
    for (long long r = 0; r < rows; ++r)
      for (int j = 0; j < co; ++j) out[r * co + j] = bp[j];

    if (pointwise) {
      // 1x1 stride-1: the patch matrix is the input itself, so no unrolled
      // copy is needed in either direction
      gemm_nn_acc(xv.data(), wv.data(), out.data(), static_cast<int>(rows),
                  ci, co);
      if (relu_after)
        for (long long i = 0; i < out.size(); ++i)
          if (out[i] < T(0)) out[i] = T(0);
      return push(std::move(out), {x, w, b}, any_grad({x, w, b}), "conv2d",
                  [this, x, w, b, rows, ci, co, relu_after](const Tensor<T>& g,
                                                            Var self) {
                    const Tensor<T>& xv = val(x);
                    const Tensor<T>& wv = val(w);
                    const T* pg = masked_grad(g, self, relu_after);
                    if (needs_grad(b)) {
                      Tensor<T>& gb = grad_mut(b);
                      for (long long r = 0; r < rows; ++r)
                        for (int j = 0; j < co; ++j) gb[j] += pg[r * co + j];
                    }
                    if (needs_grad(w))
                      gemm_tn_acc(xv.data(), pg, grad_mut(w).data(),
                                  static_cast<int>(rows), ci, co);
                    if (needs_grad(x))
                      gemm_nt<T, true>(pg, wv.data(), grad_mut(x).data(),
                                       static_cast<int>(rows), co, ci);
                  });
    }

    // the patch matrix lives in a reused scratch buffer and is rebuilt in the
    // backward pass: rebuilding is cheaper than keeping one cold allocation
    // per conv node alive across the whole step
    TensorVec<T>& cols = conv_scratch2();
    if (cols.size() < static_cast<size_t>(rows) * k)
      cols.resize(static_cast<size_t>(rows) * k);
    for (int ib = 0; ib < nb; ++ib)
      im2col(xv.data() + static_cast<long long>(ib) * h * wd * ci, h, wd, ci,
             kh, kw, stride, ph, pw, oh, ow,
             cols.data() + static_cast<long long>(ib) * oh * ow * k);
    gemm_nn_acc(cols.data(), wv.data(), out.data(), static_cast<int>(rows), k,
                co);
    if (relu_after)
      for (long long i = 0; i < out.size(); ++i)
        if (out[i] < T(0)) out[i] = T(0);
    return push(std::move(out), {x, w, b}, any_grad({x, w, b}), "conv2d",
                [this, x, w, b, stride, nb, h, wd, ci, kh, kw, ph, pw, oh, ow,
                 k, co, rows, relu_after](const Tensor<T>& g, Var self) {
                  const Tensor<T>& xv = val(x);
                  const Tensor<T>& wv = val(w);
                  const T* pg = masked_grad(g, self, relu_after);
                  if (needs_grad(b)) {
                    Tensor<T>& gb = grad_mut(b);
                    for (long long r = 0; r < rows; ++r)
                      for (int j = 0; j < co; ++j) gb[j] += pg[r * co + j];
                  }
                  if (needs_grad(w)) {
                    TensorVec<T>& cols = conv_scratch2();
                    if (cols.size() < static_cast<size_t>(rows) * k)
                      cols.resize(static_cast<size_t>(rows) * k);
                    for (int ib = 0; ib < nb; ++ib)
                      im2col(xv.data() + static_cast<long long>(ib) * h * wd * ci,
                             h, wd, ci, kh, kw, stride, ph, pw, oh, ow,
                             cols.data() + static_cast<long long>(ib) * oh * ow * k);
                    gemm_tn_acc(cols.data(), pg, grad_mut(w).data(),
                                static_cast<int>(rows), k, co);
                  }
                  if (needs_grad(x)) {
                    TensorVec<T>& gcols = conv_scratch();
                    if (gcols.size() < static_cast<size_t>(rows) * k)
                      gcols.resize(static_cast<size_t>(rows) * k);
                    gemm_nt<T, false>(pg, wv.data(), gcols.data(),
                                      static_cast<int>(rows), co, k);
                    Tensor<T>& gx = grad_mut(x);
                    for (int ib = 0; ib < nb; ++ib)
                      col2im_acc(gcols.data() +
                                     static_cast<long long>(ib) * oh * ow * k,
                                 h, wd, ci, kh, kw, stride, ph, pw, oh, ow,
                                 gx.data() +
                                     static_cast<long long>(ib) * h * wd * ci);
                  }
                });
  }

  /// Global pooling over spatial dims: [h,w,c] -> [c] or [B,h,w,c] -> [B,c].
  Var global_avg_pool(Var a) {
    const Tensor<T>& x = val(a);
    if (x.rank() != 3 && x.rank() != 4)
      throw ShapeError("global pool expects [h,w,c] or [B,h,w,c]");
    bool batched = x.rank() == 4;
    int nb = batched ? x.dim(0) : 1;
    int h = x.dim(batched ? 1 : 0), w = x.dim(batched ? 2 : 1),
        c = x.dim(batched ? 3 : 2);
    Tensor<T> out(batched ? std::vector<int>{nb, c} : std::vector<int>{c});
    long long hw = static_cast<long long>(h) * w;
    for (int ib = 0; ib < nb; ++ib) {
      const T* px = x.data() + ib * hw * c;
      T* po = out.data() + static_cast<long long>(ib) * c;
      for (long long i = 0; i < hw * c; ++i) po[i % c] += px[i];
    }
    T inv = T(1) / static_cast<T>(hw);
    for (long long j = 0; j < out.size(); ++j) out[j] *= inv;
    return push(std::move(out), {a}, needs_grad(a), "avg_pool",
                [this, a, inv, nb, hw, c](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  Tensor<T>& ga = grad_mut(a);
                  for (int ib = 0; ib < nb; ++ib) {
                    T* pa = ga.data() + ib * hw * c;
                    const T* pg = g.data() + static_cast<long long>(ib) * c;
                    for (long long i = 0; i < hw * c; ++i)
                      pa[i] += pg[i % c] * inv;
                  }
                });
  }

  Var global_max_pool(Var a) {
    const Tensor<T>& x = val(a);
    if (x.rank() != 3 && x.rank() != 4)
      throw ShapeError("global pool expects [h,w,c] or [B,h,w,c]");
    bool batched = x.rank() == 4;
    int nb = batched ? x.dim(0) : 1;
    int h = x.dim(batched ? 1 : 0), w = x.dim(batched ? 2 : 1),
        c = x.dim(batched ? 3 : 2);
    Tensor<T> out(batched ? std::vector<int>{nb, c} : std::vector<int>{c});
    long long hw = static_cast<long long>(h) * w;
    std::vector<long long> arg(static_cast<size_t>(nb) * c);
    for (int ib = 0; ib < nb; ++ib) {
      const T* px = x.data() + ib * hw * c;
      T* po = out.data() + static_cast<long long>(ib) * c;
      long long* pa = arg.data() + static_cast<long long>(ib) * c;
      for (int j = 0; j < c; ++j) {
        po[j] = px[j];
        pa[j] = ib * hw * c + j;
      }
      for (long long i = 0; i < hw * c; ++i) {
        int j = static_cast<int>(i % c);
        if (px[i] > po[j]) {
          po[j] = px[i];
          pa[j] = ib * hw * c + i;
        }
      }
    }
    return push(std::move(out), {a}, needs_grad(a), "max_pool",
                [this, a, arg](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  Tensor<T>& ga = grad_mut(a);
                  for (size_t j = 0; j < arg.size(); ++j)
                    ga[arg[j]] += g[static_cast<long long>(j)];
                });
  }

  /// Bilinear upsampling [h,w,c] -> [oh,ow,c] (or with a leading batch axis),
  /// half-pixel centers.
  Var upsample_bilinear(Var a, int oh, int ow) {
    const Tensor<T>& x = val(a);
    if (x.rank() != 3 && x.rank() != 4)
      throw ShapeError("upsample expects [h,w,c] or [B,h,w,c]");
    bool batched = x.rank() == 4;
    int nb = batched ? x.dim(0) : 1;
    int h = x.dim(batched ? 1 : 0), w = x.dim(batched ? 2 : 1),
        c = x.dim(batched ? 3 : 2);
    std::vector<int> y0(static_cast<size_t>(oh)), y1(static_cast<size_t>(oh));
    std::vector<T> wy(static_cast<size_t>(oh));
    make_lerp(h, oh, y0, y1, wy);
    std::vector<int> x0(static_cast<size_t>(ow)), x1(static_cast<size_t>(ow));
    std::vector<T> wx(static_cast<size_t>(ow));
    make_lerp(w, ow, x0, x1, wx);
    Tensor<T> out(batched ? std::vector<int>{nb, oh, ow, c}
                          : std::vector<int>{oh, ow, c});
    long long in_sz = static_cast<long long>(h) * w * c;
    long long out_sz = static_cast<long long>(oh) * ow * c;
    for (int ib = 0; ib < nb; ++ib) {
      const T* px = x.data() + ib * in_sz;
      T* pb = out.data() + ib * out_sz;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const T* p00 = px + (static_cast<long long>(y0[static_cast<size_t>(i)]) * w + x0[static_cast<size_t>(j)]) * c;
          const T* p01 = px + (static_cast<long long>(y0[static_cast<size_t>(i)]) * w + x1[static_cast<size_t>(j)]) * c;
          const T* p10 = px + (static_cast<long long>(y1[static_cast<size_t>(i)]) * w + x0[static_cast<size_t>(j)]) * c;
          const T* p11 = px + (static_cast<long long>(y1[static_cast<size_t>(i)]) * w + x1[static_cast<size_t>(j)]) * c;
          T fy = wy[static_cast<size_t>(i)], fx = wx[static_cast<size_t>(j)];
          T* po = pb + (static_cast<long long>(i) * ow + j) * c;
          for (int ch = 0; ch < c; ++ch)
            po[ch] = (T(1) - fy) * ((T(1) - fx) * p00[ch] + fx * p01[ch]) +
                     fy * ((T(1) - fx) * p10[ch] + fx * p11[ch]);
        }
    }
    return push(std::move(out), {a}, needs_grad(a), "upsample",
                [this, a, nb, w, c, oh, ow, in_sz, out_sz, y0, y1, wy, x0, x1,
                 wx](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  Tensor<T>& ga = grad_mut(a);
                  for (int ib = 0; ib < nb; ++ib) {
                    T* pa = ga.data() + ib * in_sz;
                    const T* pb = g.data() + ib * out_sz;
                    for (int i = 0; i < oh; ++i)
                      for (int j = 0; j < ow; ++j) {
                        T fy = wy[static_cast<size_t>(i)], fx = wx[static_cast<size_t>(j)];
                        const T* pg = pb + (static_cast<long long>(i) * ow + j) * c;
                        T* g00 = pa + (static_cast<long long>(y0[static_cast<size_t>(i)]) * w + x0[static_cast<size_t>(j)]) * c;
                        T* g01 = pa + (static_cast<long long>(y0[static_cast<size_t>(i)]) * w + x1[static_cast<size_t>(j)]) * c;
                        T* g10 = pa + (static_cast<long long>(y1[static_cast<size_t>(i)]) * w + x0[static_cast<size_t>(j)]) * c;
                        T* g11 = pa + (static_cast<long long>(y1[static_cast<size_t>(i)]) * w + x1[static_cast<size_t>(j)]) * c;
                        for (int ch = 0; ch < c; ++ch) {
                          g00[ch] += (T(1) - fy) * (T(1) - fx) * pg[ch];
                          g01[ch] += (T(1) - fy) * fx * pg[ch];
                          g10[ch] += fy * (T(1) - fx) * pg[ch];
                          g11[ch] += fy * fx * pg[ch];
                        }
                      }
                  }
                });
  }

  /// Row gather from a rank-2 tensor.
  Var gather_rows(Var a, std::vector<int> rows) {
    const Tensor<T>& x = val(a);
    if (x.rank() != 2) throw ShapeError("gather_rows expects [N,d]");
    int d = x.dim(1);
    Tensor<T> out({static_cast<int>(rows.size()), d});
    for (size_t r = 0; r < rows.size(); ++r)
      std::copy_n(x.data() + static_cast<long long>(rows[r]) * d, d,
                  out.data() + static_cast<long long>(r) * d);
    return push(std::move(out), {a}, needs_grad(a), "gather_rows",
                [this, a, rows, d](const Tensor<T>& g, Var) {
                  if (!needs_grad(a)) return;
                  Tensor<T>& ga = grad_mut(a);
                  for (size_t r = 0; r < rows.size(); ++r) {
                    T* dst = ga.data() + static_cast<long long>(rows[r]) * d;
                    const T* src = g.data() + static_cast<long long>(r) * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                  }
                });
  }

  /// Row-wise L2 normalization of [N,d]; zero rows pass through.
  Var l2_normalize_rows(Var a) {
    const Tensor<T>& x = val(a);
    if (x.rank() != 2) throw ShapeError("l2_normalize_rows expects [N,d]");
    int n = x.dim(0), d = x.dim(1);
    Tensor<T> out(x.dims());
    std::vector<T> norms(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      const T* xi = x.data() + static_cast<long long>(i) * d;
      T s = 0;
      for (int j = 0; j < d; ++j) s += xi[j] * xi[j];
      T r = std::sqrt(s);
      norms[static_cast<size_t>(i)] = r;
      T* oi = out.data() + static_cast<long long>(i) * d;
      if (r > T(0))
        for (int j = 0; j < d; ++j) oi[j] = xi[j] / r;
      else
        for (int j = 0; j < d; ++j) oi[j] = xi[j];
    }
    return push(std::move(out), {a}, needs_grad(a), "l2_normalize",
                [this, a, n, d, norms](const Tensor<T>& g, Var self) {
                  if (!needs_grad(a)) return;
                  const Tensor<T>& y = val(self);
                  Tensor<T>& ga = grad_mut(a);
                  for (int i = 0; i < n; ++i) {
                    T r = norms[static_cast<size_t>(i)];
                    const T* gi = g.data() + static_cast<long long>(i) * d;
                    if (r <= T(0)) {
                      T* dst = ga.data() + static_cast<long long>(i) * d;
                      for (int j = 0; j < d; ++j) dst[j] += gi[j];
                      continue;
                    }
                    const T* yi = y.data() + static_cast<long long>(i) * d;
                    T dot = 0;
                    for (int j = 0; j < d; ++j) dot += gi[j] * yi[j];
                    T* dst = ga.data() + static_cast<long long>(i) * d;
                    for (int j = 0; j < d; ++j)
                      dst[j] += (gi[j] - dot * yi[j]) / r;
                  }
                });
  }

  /// Summed softmax cross-entropy over rows of [N,C] with an ignore label.
  /// Returns the un-normalized sum; `valid_out` receives the count.
  Var softmax_ce_sum(Var logits, const std::vector<int>& labels, int ignore,
                     int* valid_out) {
    // logits may have any rank; classes live on the last axis and every
    // leading position is one prediction row
    const Tensor<T>& x = val(logits);
    if (x.rank() < 1) throw ShapeError("softmax_ce expects [..,C] logits");
    int c = x.dims().back();
    int n = static_cast<int>(x.size() / c);
    if (static_cast<int>(labels.size()) != n)
      throw ShapeError("label count does not match logit rows");
    double total = 0;
    int valid = 0;
    for (int i = 0; i < n; ++i) {
      int y = labels[static_cast<size_t>(i)];
      if (y == ignore) continue;
      if (y < 0 || y >= c) throw ArgumentError("label out of range");
      const T* row = x.data() + static_cast<long long>(i) * c;
      double mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      total += mx + std::log(z) - static_cast<double>(row[y]);
      ++valid;
    }
    if (valid_out) *valid_out = valid;
    std::vector<int> lab = labels;
    return push(Tensor<T>::scalar(static_cast<T>(total)), {logits},
                needs_grad(logits), "softmax_ce",
                [this, logits, lab, ignore, n, c](const Tensor<T>& g, Var) {
                  if (!needs_grad(logits)) return;
                  const Tensor<T>& x = val(logits);
                  Tensor<T>& gx = grad_mut(logits);
                  for (int i = 0; i < n; ++i) {
                    int y = lab[static_cast<size_t>(i)];
                    if (y == ignore) continue;
                    const T* row = x.data() + static_cast<long long>(i) * c;
                    T* grow = gx.data() + static_cast<long long>(i) * c;
                    double mx = row[0];
                    for (int j = 1; j < c; ++j)
                      mx = std::max(mx, static_cast<double>(row[j]));
                    double z = 0;
                    for (int j = 0; j < c; ++j)
                      z += std::exp(static_cast<double>(row[j]) - mx);
                    for (int j = 0; j < c; ++j) {
                      double p = std::exp(static_cast<double>(row[j]) - mx) / z;
                      grow[j] += g[0] * static_cast<T>(p - (j == y ? 1.0 : 0.0));
                    }
                  }
                });
  }

  /// Grouped supervised InfoNCE over a similarity matrix [N,M] with anchor
  /// labels `la` and candidate labels `lb`. Positives are same-label columns,
  /// negatives different-label ones; `exclude_diag` removes j==i (intra-modal
  /// anchor self-exclusion). Mean over anchors that have a positive.
  Var grouped_nce(Var sim, std::vector<int> la, std::vector<int> lb,
                  bool exclude_diag, double tau, int* valid_out = nullptr) {
    const Tensor<T>& s = val(sim);
    if (s.rank() != 2) throw ShapeError("grouped_nce expects [N,M]");
    if (static_cast<int>(la.size()) != s.dim(0) ||
        static_cast<int>(lb.size()) != s.dim(1))
      throw ShapeError("grouped_nce label sizes mismatch");
    int valid = 0;
    double value = grouped_nce_value(s, la, lb, exclude_diag, tau, &valid);
    if (valid_out) *valid_out = valid;
    int n = s.dim(0), m = s.dim(1);
    return push(Tensor<T>::scalar(static_cast<T>(value)), {sim}, needs_grad(sim),
                "grouped_nce",
                [this, sim, la, lb, exclude_diag, tau, valid, n,
                 m](const Tensor<T>& g, Var) {
                  if (!needs_grad(sim) || valid == 0) return;
                  const Tensor<T>& s = val(sim);
                  Tensor<T>& gs = grad_mut(sim);
                  std::vector<double> e(static_cast<size_t>(m));
                  for (int i = 0; i < n; ++i) {
                    const T* row = s.data() + static_cast<long long>(i) * m;
                    double mx = -std::numeric_limits<double>::infinity();
                    int npos = 0;
                    for (int j = 0; j < m; ++j) {
                      if (exclude_diag && j == i) continue;
                      mx = std::max(mx, static_cast<double>(row[j]) / tau);
                      if (lb[static_cast<size_t>(j)] == la[static_cast<size_t>(i)]) ++npos;
                    }
                    if (npos == 0) continue;
                    double zneg = 0;
                    for (int j = 0; j < m; ++j) {
                      if (exclude_diag && j == i) continue;
                      e[static_cast<size_t>(j)] =
                          std::exp(static_cast<double>(row[j]) / tau - mx);
                      if (lb[static_cast<size_t>(j)] != la[static_cast<size_t>(i)])
                        zneg += e[static_cast<size_t>(j)];
                    }
                    // d/ds_ip over term p: (E_p/(E_p+Zneg) - 1); negatives
                    // collect E_n * sum_p 1/(E_p+Zneg).
                    double wsum = 0;
                    double coef = static_cast<double>(g[0]) / (valid * npos * tau);
                    T* grow = gs.data() + static_cast<long long>(i) * m;
                    for (int j = 0; j < m; ++j) {
                      if (exclude_diag && j == i) continue;
                      if (lb[static_cast<size_t>(j)] != la[static_cast<size_t>(i)]) continue;
                      double denom = e[static_cast<size_t>(j)] + zneg;
                      wsum += 1.0 / denom;
                      grow[j] += static_cast<T>(
                          coef * (e[static_cast<size_t>(j)] / denom - 1.0));
                    }
                    for (int j = 0; j < m; ++j) {
                      if (exclude_diag && j == i) continue;
                      if (lb[static_cast<size_t>(j)] == la[static_cast<size_t>(i)]) continue;
                      grow[j] += static_cast<T>(coef * e[static_cast<size_t>(j)] * wsum);
                    }
                  }
                });
  }

  /// c0 + sum_i w_i * v_i over scalar vars; terms with w == 0 are not added,
  /// keeping the base term bitwise intact.
  Var add_weighted(Var base, const std::vector<std::pair<T, Var>>& terms) {
    T acc = val(base)[0];
    std::vector<std::pair<T, Var>> used;
    for (auto& [w, v] : terms) {
      if (w == T(0)) continue;
      acc += w * val(v)[0];
      used.push_back({w, v});
    }
    bool rg = needs_grad(base);
    for (auto& [w, v] : used) rg = rg || needs_grad(v);
    std::vector<Var> parents{base};
    for (auto& [w, v] : used) parents.push_back(v);
    return push(Tensor<T>::scalar(acc), parents, rg, "add_weighted",
                [this, base, used](const Tensor<T>& g, Var) {
                  if (needs_grad(base)) grad_mut(base)[0] += g[0];
                  for (auto& [w, v] : used)
                    if (needs_grad(v)) grad_mut(v)[0] += g[0] * w;
                });
  }

  // -- reverse pass ----------------------------------------------------------

  /// Reverse-mode sweep from a scalar output. Gradients accumulate into
  /// every requires-grad node reachable from `out`.
  void backward(Var out) {
    Node& o = nodes_[static_cast<size_t>(out.id)];
    if (o.value.size() != 1)
      throw ShapeError("backward requires a scalar output, got " +
                       dims_str(o.value.dims()));
    if (!o.requires_grad) return;
    std::vector<char> needed(nodes_.size(), 0);
    needed[static_cast<size_t>(out.id)] = 1;
    for (int id = out.id; id >= 0; --id) {
      if (!needed[static_cast<size_t>(id)] || !nodes_[static_cast<size_t>(id)].requires_grad)
        continue;
      for (Var p : nodes_[static_cast<size_t>(id)].parents)
        if (nodes_[static_cast<size_t>(p.id)].requires_grad)
          needed[static_cast<size_t>(p.id)] = 1;
    }
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (needed[i] && nodes_[i].requires_grad && nodes_[i].grad.size() == 0)
        nodes_[i].grad = Tensor<T>::zeros(nodes_[i].value.dims());
    o.grad[0] = T(1);
    for (int id = out.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!needed[static_cast<size_t>(id)] || !n.requires_grad || !n.back) continue;
      n.back(n.grad, Var{id});
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<Var> parents;
    bool requires_grad = false;
    std::string name;
    std::function<void(const Tensor<T>&, Var)> back;
  };

  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }
  bool any_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (needs_grad(v)) return true;
    return false;
  }

  Tensor<T>& grad_mut(Var v) { return nodes_[static_cast<size_t>(v.id)].grad; }

  void accumulate(Var v, const Tensor<T>& g) {
    Tensor<T>& dst = grad_mut(v);
    for (long long i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  Var push(Tensor<T> value, std::vector<Var> parents, bool rg, std::string name,
           std::function<void(const Tensor<T>&, Var)> back) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.requires_grad = rg;
    n.name = std::move(name);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Reusable per-thread buffers for the unrolled convolution patches, so the
  // hot path does not reallocate (or zero-fill) them on every call.
  static TensorVec<T>& conv_scratch() {
    thread_local TensorVec<T> buf;
    return buf;
  }
  static TensorVec<T>& conv_scratch2() {
    thread_local TensorVec<T> buf;
    return buf;
  }
  // Masked-gradient buffer for nodes with a fused relu.
  static TensorVec<T>& linear_scratch() {
    thread_local TensorVec<T> buf;
    return buf;
  }

  // For a node with a fused relu, the incoming gradient must be zeroed where
  // the post-activation output is zero. Returns g itself when no relu was
  // fused; otherwise returns a masked copy living in linear_scratch().
  const T* masked_grad(const Tensor<T>& g, Var self, bool relu_after) {
    if (!relu_after) return g.data();
    TensorVec<T>& buf = linear_scratch();
    if (buf.size() < static_cast<size_t>(g.size()))
      buf.resize(static_cast<size_t>(g.size()));
    const Tensor<T>& y = val(self);
    for (long long i = 0; i < g.size(); ++i)
      buf[static_cast<size_t>(i)] = y[i] > T(0) ? g[i] : T(0);
    return buf.data();
  }

  static void im2col(const T* x, int h, int w, int ci, int kh, int kw,
                     int stride, int ph, int pw, int oh, int ow, T* cols) {
    int k = kh * kw * ci;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T* dst = cols + (static_cast<long long>(oy) * ow + ox) * k;
        for (int ky = 0; ky < kh; ++ky) {
          int sy = oy * stride - ph + ky;
          for (int kx = 0; kx < kw; ++kx) {
            int sx = ox * stride - pw + kx;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              for (int ch = 0; ch < ci; ++ch) *dst++ = T(0);
            } else {
              const T* src = x + (static_cast<long long>(sy) * w + sx) * ci;
              for (int ch = 0; ch < ci; ++ch) *dst++ = src[ch];
            }
          }
        }
      }
  }

  static void col2im_acc(const T* cols, int h, int w, int ci, int kh, int kw,
                         int stride, int ph, int pw, int oh, int ow, T* gx) {
    int k = kh * kw * ci;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const T* src = cols + (static_cast<long long>(oy) * ow + ox) * k;
        for (int ky = 0; ky < kh; ++ky) {
          int sy = oy * stride - ph + ky;
          for (int kx = 0; kx < kw; ++kx) {
            int sx = ox * stride - pw + kx;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
              src += ci;
            } else {
              T* dst = gx + (static_cast<long long>(sy) * w + sx) * ci;
              for (int ch = 0; ch < ci; ++ch) dst[ch] += *src++;
            }
          }
        }
      }
  }

  static void make_lerp(int n, int out_n, std::vector<int>& i0,
                        std::vector<int>& i1, std::vector<T>& frac) {
    for (int o = 0; o < out_n; ++o) {
      double src = (o + 0.5) * static_cast<double>(n) / out_n - 0.5;
      src = std::max(0.0, std::min(src, static_cast<double>(n - 1)));
      int lo = static_cast<int>(std::floor(src));
      int hi = std::min(lo + 1, n - 1);
      i0[static_cast<size_t>(o)] = lo;
      i1[static_cast<size_t>(o)] = hi;
      frac[static_cast<size_t>(o)] = static_cast<T>(src - lo);
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace smmcl

#endif  // SMMCL_TAPE_HPP
