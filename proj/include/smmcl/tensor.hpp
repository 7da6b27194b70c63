#ifndef SMMCL_TENSOR_HPP
#define SMMCL_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace smmcl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ArgumentError : Error {
  using Error::Error;
};
struct EmptyBatchError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct GenerationError : Error {
  using Error::Error;
};
struct MetricError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

inline std::string dims_str(const std::vector<int>& d) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
  os << "]";
  return os.str();
}

/// Allocator that default-initializes on resize, so buffers that are about
/// to be fully overwritten skip the zero-fill pass.
template <typename T>
struct NoInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = NoInitAllocator<U>;
  };
  NoInitAllocator() = default;
  template <typename U>
  NoInitAllocator(const NoInitAllocator<U>&) {}
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <typename T>
using TensorVec = std::vector<T, NoInitAllocator<T>>;

/// Dense row-major multi-dimensional array. Immutable by convention once
/// placed on a gradient tape.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    data_.assign(static_cast<size_t>(check_dims(dims_)), T(0));
  }

  Tensor(std::vector<int> dims, TensorVec<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (check_dims(dims_) != static_cast<long long>(data_.size()))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_str(dims_));
  }

  // the no-init allocator disqualifies libstdc++'s memmove fast path for
  // vector copies, so spell the trivial copy out
  Tensor(const Tensor& o) : dims_(o.dims_) {
    data_.resize(o.data_.size());
    if (!data_.empty())
      std::memcpy(data_.data(), o.data_.data(), data_.size() * sizeof(T));
  }
  Tensor& operator=(const Tensor& o) {
    if (this != &o) {
      dims_ = o.dims_;
      data_.resize(o.data_.size());
      if (!data_.empty())
        std::memcpy(data_.data(), o.data_.data(), data_.size() * sizeof(T));
    }
    return *this;
  }
  Tensor(Tensor&&) = default;
  Tensor& operator=(Tensor&&) = default;

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

  /// Allocates without zero-filling; every element must be written before use.
  static Tensor uninit(std::vector<int> dims) {
    Tensor t;
    long long n = check_dims(dims);
    t.dims_ = std::move(dims);
    t.data_.resize(static_cast<size_t>(n));
    return t;
  }

  static Tensor full(std::vector<int> dims, T v) {
    Tensor t(std::move(dims));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  /// Copy with the same data laid out under new dims of equal total size.
  Tensor reshaped(std::vector<int> dims) const {
    if (check_dims(dims) != size())
      throw ShapeError("reshape size mismatch: " + dims_str(dims_) + " -> " +
                       dims_str(dims));
    Tensor t(*this);
    t.dims_ = std::move(dims);
    return t;
  }

  static Tensor identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.data_[static_cast<size_t>(i) * n + i] = T(1);
    return t;
  }

  const std::vector<int>& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  long long size() const { return static_cast<long long>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  TensorVec<T>& vec() { return data_; }
  const TensorVec<T>& vec() const { return data_; }

  T& operator[](long long i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](long long i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int i, int j) { return data_[static_cast<size_t>(i) * dims_[1] + j]; }
  const T& at(int i, int j) const {
    return data_[static_cast<size_t>(i) * dims_[1] + j];
  }
  T& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
  }
  const T& at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * dims_[1] + j) * dims_[2] + k];
  }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    TensorVec<U> d(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    return Tensor<U>(dims_, std::move(d));
  }

 private:
  static long long check_dims(const std::vector<int>& dims) {
    long long n = 1;
    for (int d : dims) {
      if (d <= 0) throw ShapeError("non-positive dimension in " + dims_str(dims));
      n *= d;
    }
    return n;
  }

  std::vector<int> dims_;
  TensorVec<T> data_;
};

// ---------------------------------------------------------------------------
// Broadcasting (numpy-style right alignment; a dim may expand only from 1)

inline std::vector<int> broadcast_dims(const std::vector<int>& a,
                                       const std::vector<int>& b) {
  size_t r = std::max(a.size(), b.size());
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes not broadcastable: " + dims_str(a) + " vs " +
                       dims_str(b));
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

namespace detail {

inline std::vector<long long> broadcast_strides(const std::vector<int>& dims,
                                                const std::vector<int>& out) {
  // Row-major strides of `dims` aligned to the right against `out`,
  // zeroed where the dim broadcasts.
  std::vector<long long> s(out.size(), 0);
  long long stride = 1;
  for (size_t i = 0; i < dims.size(); ++i) {
    size_t di = dims.size() - 1 - i;
    size_t oi = out.size() - 1 - i;
    s[oi] = (dims[di] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= dims[di];
  }
  return s;
}

}  // namespace detail

template <typename T, typename F>
Tensor<T> broadcast_apply(const Tensor<T>& a, const Tensor<T>& b, F&& f) {
  if (a.dims() == b.dims()) {
    Tensor<T> out = Tensor<T>::uninit(a.dims());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (long long i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  std::vector<int> od = broadcast_dims(a.dims(), b.dims());
  Tensor<T> out = Tensor<T>::uninit(od);
  // fast path: b is a vector matching the last dim of a
  if (a.dims() == od && b.rank() == 1 && b.dim(0) == od.back()) {
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    long long n = out.size();
    int c = od.back();
    for (long long i = 0; i < n; i += c)
      for (int j = 0; j < c; ++j) po[i + j] = f(pa[i + j], pb[j]);
    return out;
  }
  auto sa = detail::broadcast_strides(a.dims(), od);
  auto sb = detail::broadcast_strides(b.dims(), od);
  // Coalesce adjacent dims into (extent, stride_a, stride_b) segments so the
  // walk below runs long contiguous inner loops instead of a per-element
  // multi-index update.
  std::vector<std::array<long long, 3>> segs;
  for (size_t k = od.size(); k-- > 0;) {
    long long e = od[k];
    if (e == 1) continue;
    if (!segs.empty() && sa[k] == segs.back()[1] * segs.back()[0] &&
        sb[k] == segs.back()[2] * segs.back()[0]) {
      segs.back()[0] *= e;
    } else {
      segs.push_back({e, sa[k], sb[k]});
    }
  }
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  if (segs.empty()) {
    po[0] = f(pa[0], pb[0]);
    return out;
  }
  long long n0 = segs[0][0], sa0 = segs[0][1], sb0 = segs[0][2];
  auto inner = [&](long long oa, long long ob, long long oo) {
    const T* qa = pa + oa;
    const T* qb = pb + ob;
    T* qo = po + oo;
    if (sa0 == 1 && sb0 == 1) {
      for (long long j = 0; j < n0; ++j) qo[j] = f(qa[j], qb[j]);
    } else if (sa0 == 1) {
      T y = qb[0];
      for (long long j = 0; j < n0; ++j) qo[j] = f(qa[j], y);
    } else if (sb0 == 1) {
      T x = qa[0];
      for (long long j = 0; j < n0; ++j) qo[j] = f(x, qb[j]);
    } else {
      T v = f(qa[0], qb[0]);
      for (long long j = 0; j < n0; ++j) qo[j] = v;
    }
  };
  auto walk = [&](auto&& self, size_t lvl, long long oa, long long ob,
                  long long oo, long long ostep) -> void {
    if (lvl == 0) {
      inner(oa, ob, oo);
      return;
    }
    long long inner_step = ostep / segs[lvl][0];
    for (long long i = 0; i < segs[lvl][0]; ++i)
      self(self, lvl - 1, oa + i * segs[lvl][1], ob + i * segs[lvl][2],
           oo + i * inner_step, inner_step);
  };
  walk(walk, segs.size() - 1, 0, 0, 0, out.size());
  return out;
}

/// Accumulate `g` (shaped like the broadcast result) summed down to
/// `dst.dims()` into `dst`.
template <typename T>
void reduce_to_shape_acc(const Tensor<T>& g, Tensor<T>& dst) {
  if (g.dims() == dst.dims()) {
    const T* pg = g.data();
    T* pd = dst.data();
    for (long long i = 0; i < g.size(); ++i) pd[i] += pg[i];
    return;
  }
  auto s = detail::broadcast_strides(dst.dims(), g.dims());
  const std::vector<int>& gd = g.dims();
  // Coalesce adjacent dims (see broadcast_apply) for long inner loops.
  std::vector<std::array<long long, 2>> segs;  // extent, dst stride
  for (size_t k = gd.size(); k-- > 0;) {
    long long e = gd[k];
    if (e == 1) continue;
    if (!segs.empty() && s[k] == segs.back()[1] * segs.back()[0])
      segs.back()[0] *= e;
    else
      segs.push_back({e, s[k]});
  }
  const T* pg = g.data();
  T* pd = dst.data();
  if (segs.empty()) {
    pd[0] += pg[0];
    return;
  }
  long long n0 = segs[0][0], sd0 = segs[0][1];
  auto inner = [&](long long og, long long od) {
    const T* qg = pg + og;
    if (sd0 == 1) {
      T* qd = pd + od;
      for (long long j = 0; j < n0; ++j) qd[j] += qg[j];
    } else {  // sd0 == 0: full reduction of the inner run
      T acc = 0;
      for (long long j = 0; j < n0; ++j) acc += qg[j];
      pd[od] += acc;
    }
  };
  auto walk = [&](auto&& self, size_t lvl, long long og, long long od,
                  long long gstep) -> void {
    if (lvl == 0) {
      inner(og, od);
      return;
    }
    long long inner_step = gstep / segs[lvl][0];
    for (long long i = 0; i < segs[lvl][0]; ++i)
      self(self, lvl - 1, og + i * inner_step, od + i * segs[lvl][1],
           inner_step);
  };
  walk(walk, segs.size() - 1, 0, 0, g.size());
}

/// Sum `g` (shaped like the broadcast result) down to `dims`.
template <typename T>
Tensor<T> reduce_to_shape(const Tensor<T>& g, const std::vector<int>& dims) {
  if (g.dims() == dims) return g;
  Tensor<T> out(dims);
  reduce_to_shape_acc(g, out);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_apply(a, b, [](T x, T y) { return x + y; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_apply(a, b, [](T x, T y) { return x * y; });
}

// ---------------------------------------------------------------------------
// GEMM kernels, register-tiled: 4 output rows by a JR-wide column panel are
// accumulated in local fixed-size arrays that the compiler keeps in vector
// registers, so each B element loaded from memory feeds four FMAs.

namespace detail {

#if defined(__GNUC__) || defined(__clang__)
#define SMMCL_SIMD 1

template <typename T, int Bytes>
struct Simd {
  static constexpr int lanes = static_cast<int>(Bytes / sizeof(T));
  typedef T V __attribute__((vector_size(Bytes)));
};

template <typename V, typename T>
inline V vload(const T* p) {
  V v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
template <typename T, typename V>
inline void vstore(T* p, V v) {
  __builtin_memcpy(p, &v, sizeof(v));
}

/// One column panel C[rows, j0..j0+NV*lanes) of C (+)= A * B[...,n]. Rows of
/// the A block start at `a` with stride `arow`; the reduction of length `red`
/// walks A at stride `astep` and B rows at stride n. Covers both the NN case
/// (arow = lda, astep = 1) and the TN case (arow = 1, astep = lda), where the
/// output rows are columns of A. IR rows are processed together so the
/// IR*NV independent accumulators hide the FMA latency.
template <typename T, int Bytes, int NV, int IR, bool Acc>
void gemm_panel(const T* a, long long arow, long long astep, int red,
                const T* B, int n, T* C, int rows, int j0) {
  using V = typename Simd<T, Bytes>::V;
  constexpr int lanes = Simd<T, Bytes>::lanes;
  int i = 0;
  for (; i + IR <= rows; i += IR) {
    V acc[IR][NV] = {};
    const T* ab = a + i * arow;
    const T* b = B + j0;
    long long off = 0;
    for (int p = 0; p < red; ++p, off += astep, b += n) {
      V bv[NV];
      for (int v = 0; v < NV; ++v) bv[v] = vload<V>(b + lanes * v);
      for (int r = 0; r < IR; ++r) {
        V x = V{} + ab[r * arow + off];
        for (int v = 0; v < NV; ++v) acc[r][v] += x * bv[v];
      }
    }
    for (int r = 0; r < IR; ++r) {
      T* c = C + static_cast<long long>(i + r) * n + j0;
      for (int v = 0; v < NV; ++v) {
        int o = lanes * v;
        if constexpr (Acc) vstore(c + o, vload<V>(c + o) + acc[r][v]);
        else vstore(c + o, acc[r][v]);
      }
    }
  }
  for (; i < rows; ++i) {
    V acc[NV] = {};
    const T* a0 = a + i * arow;
    const T* b = B + j0;
    for (int p = 0; p < red; ++p, a0 += astep, b += n) {
      V x = V{} + *a0;
      for (int v = 0; v < NV; ++v) acc[v] += x * vload<V>(b + lanes * v);
    }
    T* c = C + static_cast<long long>(i) * n + j0;
    for (int v = 0; v < NV; ++v) {
      int o = lanes * v;
      if constexpr (Acc) vstore(c + o, vload<V>(c + o) + acc[v]);
      else vstore(c + o, acc[v]);
    }
  }
}
#endif  // SMMCL_SIMD

// Scalar saxpy-style fallback covering columns [j0, n).
template <typename T, bool Acc>
void gemm_cols_ref(const T* a, long long arow, long long astep, int red,
                   const T* B, int n, T* C, int rows, int j0) {
  for (int i = 0; i < rows; ++i) {
    T* c = C + static_cast<long long>(i) * n;
    if constexpr (!Acc)
      for (int j = j0; j < n; ++j) c[j] = T(0);
    const T* a0 = a + i * arow;
    const T* b = B;
    for (int p = 0; p < red; ++p, a0 += astep, b += n) {
      T x = *a0;
      for (int j = j0; j < n; ++j) c[j] += x * b[j];
    }
  }
}

template <typename T, int Id>
TensorVec<T>& gemm_scratch() {
  thread_local TensorVec<T> buf;
  return buf;
}

template <typename T, int Id>
T* scratch_ptr(size_t need) {
  TensorVec<T>& buf = gemm_scratch<T, Id>();
  if (buf.size() < need) buf.resize(need);
  return buf.data();
}

template <typename T, bool Acc>
void gemm_driver(const T* a, long long arow, long long astep, int red,
                 const T* B, int n, T* C, int rows) {
  int j0 = 0;
#ifdef SMMCL_SIMD
  constexpr int L = Simd<T, 64>::lanes;
  constexpr int H = Simd<T, 32>::lanes;
  for (; j0 + 2 * L <= n; j0 += 2 * L)
    gemm_panel<T, 64, 2, 4, Acc>(a, arow, astep, red, B, n, C, rows, j0);
  if (j0 + L <= n) {
    gemm_panel<T, 64, 1, 8, Acc>(a, arow, astep, red, B, n, C, rows, j0);
    j0 += L;
  }
  if (j0 + H <= n) {
    gemm_panel<T, 32, 1, 8, Acc>(a, arow, astep, red, B, n, C, rows, j0);
    j0 += H;
  }
  if (int tail = n - j0; tail > 0) {
    // narrow remainder: run one half-width panel over a zero-padded copy of
    // the B columns, then fold the padded result back into C
    T* bp = scratch_ptr<T, 1>(static_cast<size_t>(red) * H);
    for (int p = 0; p < red; ++p) {
      const T* src = B + static_cast<long long>(p) * n + j0;
      T* dst = bp + static_cast<long long>(p) * H;
      for (int j = 0; j < tail; ++j) dst[j] = src[j];
      for (int j = tail; j < H; ++j) dst[j] = T(0);
    }
    T* cp = scratch_ptr<T, 2>(static_cast<size_t>(rows) * H);
    gemm_panel<T, 32, 1, 8, false>(a, arow, astep, red, bp, H, cp, rows, 0);
    for (int i = 0; i < rows; ++i) {
      T* c = C + static_cast<long long>(i) * n + j0;
      const T* s = cp + static_cast<long long>(i) * H;
      for (int j = 0; j < tail; ++j) {
        if constexpr (Acc) c[j] += s[j];
        else c[j] = s[j];
      }
    }
    j0 = n;
  }
#endif
  if (j0 < n) gemm_cols_ref<T, Acc>(a, arow, astep, red, B, n, C, rows, j0);
}

}  // namespace detail

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T, bool Acc = true>
void gemm_nn(const T* A, const T* B, T* C, int m, int k, int n) {
  detail::gemm_driver<T, Acc>(A, k, 1, k, B, n, C, m);
}

// C[k,n] (+)= A[m,k]^T * B[m,n]; rows of the output are columns of A.
template <typename T, bool Acc = true>
void gemm_tn(const T* A, const T* B, T* C, int m, int k, int n) {
  detail::gemm_driver<T, Acc>(A, 1, k, m, B, n, C, k);
}

// C[m,n] (+)= A[m,k] * B[n,k]^T, via an explicit transpose of B so the
// accumulation vectorizes across the panel instead of along a dot product.
template <typename T, bool Acc = true>
void gemm_nt(const T* A, const T* B, T* C, int m, int k, int n) {
  T* bt = detail::scratch_ptr<T, 0>(static_cast<size_t>(k) * n);
  for (int j = 0; j < n; ++j) {
    const T* src = B + static_cast<size_t>(j) * k;
    for (int p = 0; p < k; ++p) bt[static_cast<size_t>(p) * n + j] = src[p];
  }
  gemm_nn<T, Acc>(A, bt, C, m, k, n);
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  gemm_nn<T, true>(A, B, C, m, k, n);
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  gemm_nt<T, true>(A, B, C, m, k, n);
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  gemm_tn<T, true>(A, B, C, m, k, n);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " +
                     dims_str(a.dims()) + " and " + dims_str(b.dims()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dims disagree: " + dims_str(a.dims()) +
                     " x " + dims_str(b.dims()));
  Tensor<T> c = Tensor<T>::uninit({a.dim(0), b.dim(1)});
  gemm_nn<T, false>(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

// ---------------------------------------------------------------------------
// Binary tensor file format ("SMT1"):
//   magic "SMT1" | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 LE dims |
//   raw little-endian data.

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t,
                  Dtype dtype) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write("SMT1", 4);
  uint8_t dt = static_cast<uint8_t>(dtype);
  uint8_t nd = static_cast<uint8_t>(t.rank());
  f.put(static_cast<char>(dt));
  f.put(static_cast<char>(nd));
  for (int i = 0; i < t.rank(); ++i) {
    uint32_t d = static_cast<uint32_t>(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 4);
  }
  if (dtype == Dtype::f32) {
    std::vector<float> buf(static_cast<size_t>(t.size()));
    for (long long i = 0; i < t.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 4));
  } else {
    std::vector<double> buf(static_cast<size_t>(t.size()));
    for (long long i = 0; i < t.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<double>(t[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * 8));
  }
  if (!f) throw IoError("write failed: " + path.string());
}

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  write_tensor(path, t, sizeof(T) == 4 ? Dtype::f32 : Dtype::f64);
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "SMT1", 4) != 0)
    throw FormatError("bad magic in " + path.string());
  int dt = f.get();
  int nd = f.get();
  if (dt < 0 || nd < 0) throw FormatError("truncated header in " + path.string());
  if (dt != 0 && dt != 1) throw FormatError("unknown dtype code in " + path.string());
  std::vector<int> dims(static_cast<size_t>(nd));
  long long n = 1;
  for (int i = 0; i < nd; ++i) {
    uint32_t d = 0;
    if (!f.read(reinterpret_cast<char*>(&d), 4))
      throw FormatError("truncated dims in " + path.string());
    dims[static_cast<size_t>(i)] = static_cast<int>(d);
    n *= d;
  }
  TensorVec<T> data(static_cast<size_t>(n));
  if (dt == 0) {
    std::vector<float> buf(static_cast<size_t>(n));
    if (!f.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * 4)))
      throw FormatError("truncated data in " + path.string());
    for (long long i = 0; i < n; ++i) data[static_cast<size_t>(i)] = static_cast<T>(buf[static_cast<size_t>(i)]);
  } else {
    std::vector<double> buf(static_cast<size_t>(n));
    if (!f.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * 8)))
      throw FormatError("truncated data in " + path.string());
    for (long long i = 0; i < n; ++i) data[static_cast<size_t>(i)] = static_cast<T>(buf[static_cast<size_t>(i)]);
  }
  return Tensor<T>(std::move(dims), std::move(data));
}

}  // namespace smmcl

#endif  // SMMCL_TENSOR_HPP
