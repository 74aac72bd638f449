#pragma once
#include <algorithm>
#include <cstring>
#include <functional>
#include <thread>
#include <utility>
#include <vector>

#include "scenediff/parallel.hpp"
#include "scenediff/tensor.hpp"

namespace sde::ad {

// Handle into a tape. Creation order is a topological order, so reverse
// iteration visits every node after all of its consumers.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

template <typename S>
class Tape {
 public:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // allocated lazily during backward
    bool needs_grad = false;
    std::function<void(Tape&)> backward;  // empty for leaves/constants
  };

  Var leaf(Tensor<S> value, bool requires_grad = false) {
    return emplace(std::move(value), requires_grad, "leaf");
  }

  Var constant(Tensor<S> value) { return leaf(std::move(value), false); }
  Var constant_scalar(S v) { return constant(Tensor<S>::scalar(v)); }

  // Appends a node; the caller attaches the backward with set_backward once
  // it knows the new node's id. Public so modules can register custom
  // differentiable primitives (polar projection, chamfer) without touching
  // tape internals.
  Var emplace(Tensor<S> value, bool needs_grad, const char* op_name) {
    if (!value.all_finite())
      fail(ErrorCode::numeric, std::string("non-finite value produced by op '") + op_name + "'");
    nodes_.push_back(Node{std::move(value), Tensor<S>(), needs_grad, nullptr});
    return Var{int32_t(nodes_.size() - 1)};
  }

  void set_backward(Var v, std::function<void(Tape&)> fn) {
    nodes_[size_t(v.id)].backward = std::move(fn);
  }

  const Tensor<S>& value(Var v) const { return nodes_[size_t(v.id)].value; }
  bool wants_grad(Var v) const { return nodes_[size_t(v.id)].needs_grad; }
  size_t size() const { return nodes_.size(); }

  // Gradient accumulator; zero-initialized on first touch.
  Tensor<S>& grad_acc(Var v) {
    Node& n = nodes_[size_t(v.id)];
    if (n.grad.numel() == 0) n.grad = Tensor<S>(n.value.shape());
    return n.grad;
  }

  // Read access during/after backward; the reverse sweep guarantees the
  // gradient of a node is complete before its backward runs.
  const Tensor<S>& grad(Var v) const {
    const Node& n = nodes_[size_t(v.id)];
    require(n.grad.numel() != 0, ErrorCode::runtime, "gradient not available for this node");
    return n.grad;
  }

  // Gradient of a leaf, zeros if the loss never reached it.
  Tensor<S> grad_or_zero(Var v) const {
    const Node& n = nodes_[size_t(v.id)];
    if (n.grad.numel() == 0) return Tensor<S>(n.value.shape());
    return n.grad;
  }

  void backward(Var loss) {
    require(value(loss).numel() == 1, ErrorCode::invalid_argument,
            "backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
    require(wants_grad(loss), ErrorCode::invalid_argument,
            "loss does not depend on any differentiable leaf");
    grad_acc(loss)[0] = S(1);
    for (int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.needs_grad || !n.backward) continue;
      if (n.grad.numel() == 0) continue;  // not reached from the loss
      n.backward(*this);
    }
  }

 private:
  std::vector<Node> nodes_;
};

using Tapef = Tape<float>;
using Taped = Tape<double>;

// ---------------------------------------------------------------------------
// Shape / broadcast helpers
// ---------------------------------------------------------------------------

// True when `small` equals the trailing extents of `big` (leading-batch
// broadcasting; anything fancier is deliberately unsupported).
inline bool is_suffix_shape(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

namespace detail {

template <typename S>
void check_broadcast(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  require(is_suffix_shape(b.shape(), a.shape()), ErrorCode::shape_mismatch,
          std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
              " do not conform (second operand must be a trailing suffix of the first)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (suffix broadcast of the smaller operand)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <typename S>
Var binary(Tape<S>& t, Var a, Var b, BinKind kind, const char* name) {
  bool swapped = false;
  if (t.value(a).numel() < t.value(b).numel()) {
    require(kind != BinKind::Sub, ErrorCode::shape_mismatch,
            "sub: first operand may not broadcast");
    std::swap(a, b);
    swapped = true;
  }
  (void)swapped;
  const Tensor<S>& va = t.value(a);
  const Tensor<S>& vb = t.value(b);
  check_broadcast(name, va, vb);
  Tensor<S> out(va.shape());
  const S* pa = va.data();
  const S* pb = vb.data();
  S* po = out.data();
  int64_t n = va.numel(), bn = vb.numel();
  for (int64_t r = 0; r < n / bn; ++r) {
    const S* ar = pa + r * bn;
    S* orow = po + r * bn;
    switch (kind) {
      case BinKind::Add:
        for (int64_t i = 0; i < bn; ++i) orow[i] = ar[i] + pb[i];
        break;
      case BinKind::Sub:
        for (int64_t i = 0; i < bn; ++i) orow[i] = ar[i] - pb[i];
        break;
      case BinKind::Mul:
        for (int64_t i = 0; i < bn; ++i) orow[i] = ar[i] * pb[i];
        break;
    }
  }
  bool ng = t.wants_grad(a) || t.wants_grad(b);
  Var v = t.emplace(std::move(out), ng, name);
  if (ng) {
    t.set_backward(v, [v, a, b, kind](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      const Tensor<S>& va2 = tp.value(a);
      const Tensor<S>& vb2 = tp.value(b);
      int64_t n2 = va2.numel(), bn2 = vb2.numel();
      const S* pg = g.data();
      if (tp.wants_grad(a)) {
        S* ga = tp.grad_acc(a).data();
        if (kind == BinKind::Mul) {
          const S* pb2 = vb2.data();
          for (int64_t r = 0; r < n2 / bn2; ++r)
            for (int64_t i = 0; i < bn2; ++i) ga[r * bn2 + i] += pg[r * bn2 + i] * pb2[i];
        } else {
          for (int64_t i = 0; i < n2; ++i) ga[i] += pg[i];
        }
      }
      if (tp.wants_grad(b)) {
        S* gb = tp.grad_acc(b).data();
        const S* pa2 = va2.data();
        for (int64_t r = 0; r < n2 / bn2; ++r)
          for (int64_t i = 0; i < bn2; ++i) {
            switch (kind) {
              case BinKind::Add:
                gb[i] += pg[r * bn2 + i];
                break;
              case BinKind::Sub:
                gb[i] -= pg[r * bn2 + i];
                break;
              case BinKind::Mul:
                gb[i] += pg[r * bn2 + i] * pa2[r * bn2 + i];
                break;
            }
          }
      }
    });
  }
  return v;
}

}  // namespace detail

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  return detail::binary(t, a, b, detail::BinKind::Add, "add");
}
template <typename S>
Var sub(Tape<S>& t, Var a, Var b) {
  return detail::binary(t, a, b, detail::BinKind::Sub, "sub");
}
template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  return detail::binary(t, a, b, detail::BinKind::Mul, "mul");
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// dfdx receives (x, y) so derivatives can reuse the forward value.
template <typename S, typename F, typename D>
Var unary(Tape<S>& t, Var a, const char* name, F fwd, D dfdx) {
  const Tensor<S>& va = t.value(a);
  Tensor<S> out(va.shape());
  for (int64_t i = 0; i < va.numel(); ++i) out[i] = fwd(va[i]);
  bool ng = t.wants_grad(a);
  Var v = t.emplace(std::move(out), ng, name);
  if (ng) {
    t.set_backward(v, [v, a, dfdx](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      const Tensor<S>& x = tp.value(a);
      const Tensor<S>& y = tp.value(v);
      Tensor<S>& ga = tp.grad_acc(a);
      for (int64_t i = 0; i < x.numel(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
    });
  }
  return v;
}

}  // namespace detail

template <typename S>
Var sigmoid(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "sigmoid", [](S x) { return S(1) / (S(1) + std::exp(-double(x))); },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var silu(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "silu",
      [](S x) { return S(double(x) / (1.0 + std::exp(-double(x)))); },
      [](S x, S) {
        double sg = 1.0 / (1.0 + std::exp(-double(x)));
        return S(sg + double(x) * sg * (1.0 - sg));
      });
}

template <typename S>
Var leaky_relu(Tape<S>& t, Var a, double slope = 0.01) {
  return detail::unary(
      t, a, "leaky_relu", [slope](S x) { return x > S(0) ? x : S(double(x) * slope); },
      [slope](S x, S) { return x > S(0) ? S(1) : S(slope); });
}

template <typename S>
Var softplus(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "softplus",
      [](S x) {
        double xd = double(x);
        return S(xd > 30.0 ? xd : std::log1p(std::exp(xd)));
      },
      [](S x, S) { return S(1.0 / (1.0 + std::exp(-double(x)))); });
}

template <typename S>
Var exp_op(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "exp", [](S x) { return S(std::exp(double(x))); }, [](S, S y) { return y; });
}

template <typename S>
Var log_op(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "log", [](S x) { return S(std::log(double(x))); },
      [](S x, S) { return S(1) / x; });
}

template <typename S>
Var sqrt_op(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "sqrt", [](S x) { return S(std::sqrt(double(x))); },
      [](S, S y) { return S(1) / (S(2) * y); });
}

template <typename S>
Var sin_op(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "sin", [](S x) { return S(std::sin(double(x))); },
      [](S x, S) { return S(std::cos(double(x))); });
}

template <typename S>
Var cos_op(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "cos", [](S x) { return S(std::cos(double(x))); },
      [](S x, S) { return S(-std::sin(double(x))); });
}

template <typename S>
Var reciprocal(Tape<S>& t, Var a) {
  return detail::unary(
      t, a, "reciprocal", [](S x) { return S(1) / x; }, [](S, S y) { return -y * y; });
}

template <typename S>
Var clamp_min(Tape<S>& t, Var a, double floor) {
  return detail::unary(
      t, a, "clamp_min", [floor](S x) { return x > S(floor) ? x : S(floor); },
      [floor](S x, S) { return x > S(floor) ? S(1) : S(0); });
}

// Scaled elementwise affine with scalar coefficients: y = scale*x + shift.
template <typename S>
Var affine(Tape<S>& t, Var a, double scale, double shift) {
  return detail::unary(
      t, a, "affine", [scale, shift](S x) { return S(double(x) * scale + shift); },
      [scale](S, S) { return S(scale); });
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

namespace detail {

// Runs body(i) for i in [0, M), splitting rows across threads when the
// product is large. The body stays a template parameter so the inner loops
// inline and vectorize; output rows are disjoint, so the result does not
// depend on the thread count.
template <typename Body>
void gemm_rows(int64_t M, int64_t work, Body&& body) {
  int workers = max_threads();
  // Threading only pays off for much larger products than the desk-scale
  // networks produce; below the threshold memory contention loses.
  if (work < (int64_t(1) << 24) || workers <= 1 || M < 2) {
    for (int64_t i = 0; i < M; ++i) body(i);
    return;
  }
  if (int64_t(workers) > M) workers = int(M);
  int64_t chunk = (M + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(size_t(workers - 1));
  for (int w = 1; w < workers; ++w) {
    int64_t lo = w * chunk, hi = std::min<int64_t>(M, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] {
      for (int64_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (int64_t i = 0; i < std::min<int64_t>(M, chunk); ++i) body(i);
  for (auto& t : pool) t.join();
}

}  // namespace detail

// C(MxN) (+)= A'(MxK) * B'(KxN). `ta` means the A buffer is stored KxM
// (A' = transpose of the buffer); same convention for `tb`.
template <typename S>
void gemm_buf(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const S* A, const S* B, S* C,
              bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, S(0));
  int64_t work = M * N * K;
  if (!ta && !tb) {
    detail::gemm_rows(M, work, [=](int64_t i) {
      S* c = C + i * N;
      const S* a = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        S aik = a[k];
        if (aik == S(0)) continue;
        const S* b = B + k * N;
        for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
      }
    });
  } else if (!ta && tb) {
    // Per-column float reductions cannot reassociate, so this kernel is
    // several times slower than the row form; transpose B once and reuse it.
    if (M >= 8 && N * K >= 1024) {
      std::vector<S> bt(size_t(K) * size_t(N));
      for (int64_t j = 0; j < N; ++j)
        for (int64_t k = 0; k < K; ++k) bt[size_t(k * N + j)] = B[j * K + k];
      gemm_buf<S>(false, false, M, N, K, A, bt.data(), C, true);
      return;
    }
    detail::gemm_rows(M, work, [=](int64_t i) {
      const S* a = A + i * K;
      S* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) {
        const S* b = B + j * K;
        S s = 0;
        for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
        c[j] += s;
      }
    });
  } else if (ta && !tb) {
    detail::gemm_rows(M, work, [=](int64_t i) {
      S* c = C + i * N;
      for (int64_t k = 0; k < K; ++k) {
        S aki = A[k * M + i];
        if (aki == S(0)) continue;
        const S* b = B + k * N;
        for (int64_t j = 0; j < N; ++j) c[j] += aki * b[j];
      }
    });
  } else {
    detail::gemm_rows(M, work, [=](int64_t i) {
      S* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) {
        const S* b = B + j * K;
        S s = 0;
        for (int64_t k = 0; k < K; ++k) s += A[k * M + i] * b[k];
        c[j] += s;
      }
    });
  }
}

// a: [..., M, K]. b: either [K, N] (shared) or [..., K, N] with identical
// leading extents. Leading axes are flattened into a batch.
template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& va = t.value(a);
  const Tensor<S>& vb = t.value(b);
  require(va.rank() >= 2 && vb.rank() >= 2, ErrorCode::shape_mismatch,
          "matmul: operands must have rank >= 2, got " + shape_str(va.shape()) + " and " +
              shape_str(vb.shape()));
  int64_t M = va.extent(va.rank() - 2);
  int64_t K = va.extent(va.rank() - 1);
  int64_t batch = va.numel() / (M * K);
  bool shared_b = vb.rank() == 2;
  int64_t Kb = vb.extent(vb.rank() - 2);
  int64_t N = vb.extent(vb.rank() - 1);
  require(K == Kb, ErrorCode::shape_mismatch,
          "matmul: inner extents differ, " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
  if (!shared_b) {
    require(va.rank() == vb.rank() && vb.numel() / (Kb * N) == batch &&
                std::equal(va.shape().begin(), va.shape().end() - 2, vb.shape().begin()),
            ErrorCode::shape_mismatch,
            "matmul: batch extents differ, " + shape_str(va.shape()) + " vs " +
                shape_str(vb.shape()));
  }
  Shape os(va.shape());
  os.back() = N;
  Tensor<S> out(os);
  if (shared_b) {
    gemm_buf<S>(false, false, batch * M, N, K, va.data(), vb.data(), out.data(), true);
  } else {
    for (int64_t bi = 0; bi < batch; ++bi)
      gemm_buf<S>(false, false, M, N, K, va.data() + bi * M * K, vb.data() + bi * K * N,
                  out.data() + bi * M * N, true);
  }
  bool ng = t.wants_grad(a) || t.wants_grad(b);
  Var v = t.emplace(std::move(out), ng, "matmul");
  if (ng) {
    t.set_backward(v, [v, a, b, M, N, K, batch, shared_b](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      const Tensor<S>& va2 = tp.value(a);
      const Tensor<S>& vb2 = tp.value(b);
      if (tp.wants_grad(a)) {
        S* ga = tp.grad_acc(a).data();
        if (shared_b) {
          gemm_buf<S>(false, true, batch * M, K, N, g.data(), vb2.data(), ga, true);
        } else {
          for (int64_t bi = 0; bi < batch; ++bi)
            gemm_buf<S>(false, true, M, K, N, g.data() + bi * M * N, vb2.data() + bi * K * N,
                        ga + bi * M * K, true);
        }
      }
      if (tp.wants_grad(b)) {
        S* gb = tp.grad_acc(b).data();
        if (shared_b) {
          gemm_buf<S>(true, false, K, N, batch * M, va2.data(), g.data(), gb, true);
        } else {
          for (int64_t bi = 0; bi < batch; ++bi)
            gemm_buf<S>(true, false, K, N, M, va2.data() + bi * M * K, g.data() + bi * M * N,
                        gb + bi * K * N, true);
        }
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> permute_data(const Tensor<S>& in, const std::vector<int>& perm) {
  int r = in.rank();
  require(int(perm.size()) == r, ErrorCode::invalid_argument, "permute: rank mismatch");
  Shape os(size_t(r), 0);
  for (int i = 0; i < r; ++i) os[size_t(i)] = in.extent(perm[size_t(i)]);
  std::vector<int64_t> istride(size_t(r), 1);
  for (int i = r - 2; i >= 0; --i) istride[size_t(i)] = istride[size_t(i + 1)] * in.extent(i + 1);
  std::vector<int64_t> map(size_t(r), 0);
  for (int i = 0; i < r; ++i) map[size_t(i)] = istride[size_t(perm[size_t(i)])];
  Tensor<S> out(os);
  std::vector<int64_t> idx(size_t(r), 0);
  const S* src = in.data();
  S* dst = out.data();
  int64_t n = in.numel();
  int64_t offset = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    dst[lin] = src[offset];
    for (int ax = r - 1; ax >= 0; --ax) {
      idx[size_t(ax)]++;
      offset += map[size_t(ax)];
      if (idx[size_t(ax)] < os[size_t(ax)]) break;
      offset -= map[size_t(ax)] * os[size_t(ax)];
      idx[size_t(ax)] = 0;
    }
  }
  return out;
}

template <typename S>
Var transpose(Tape<S>& t, Var a, std::vector<int> perm) {
  Tensor<S> out = permute_data(t.value(a), perm);
  bool ng = t.wants_grad(a);
  Var v = t.emplace(std::move(out), ng, "transpose");
  if (ng) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int(i);
    t.set_backward(v, [v, a, inv](Tape<S>& tp) {
      Tensor<S> gperm = permute_data(tp.grad(v), inv);
      Tensor<S>& ga = tp.grad_acc(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gperm[i];
    });
  }
  return v;
}

template <typename S>
Var reshape(Tape<S>& t, Var a, Shape shape) {
  const Tensor<S>& va = t.value(a);
  require(shape_numel(shape) == va.numel(), ErrorCode::shape_mismatch,
          "reshape: cannot view " + shape_str(va.shape()) + " as " + shape_str(shape));
  Tensor<S> out = Tensor<S>::from(std::move(shape), va.vec());
  bool ng = t.wants_grad(a);
  Var v = t.emplace(std::move(out), ng, "reshape");
  if (ng) {
    t.set_backward(v, [v, a](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      Tensor<S>& ga = tp.grad_acc(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g[i];
    });
  }
  return v;
}

template <typename S>
Var concat(Tape<S>& t, const std::vector<Var>& parts, int axis) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat: no inputs");
  const Tensor<S>& first = t.value(parts[0]);
  int r = first.rank();
  require(axis >= 0 && axis < r, ErrorCode::invalid_argument, "concat: axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.extent(i);
  for (int i = axis + 1; i < r; ++i) inner *= first.extent(i);
  int64_t total_axis = 0;
  std::vector<int64_t> chunk;  // per input: extent(axis) * inner
  for (Var p : parts) {
    const Tensor<S>& v = t.value(p);
    require(v.rank() == r, ErrorCode::shape_mismatch, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis)
        require(v.extent(i) == first.extent(i), ErrorCode::shape_mismatch,
                "concat: shapes " + shape_str(first.shape()) + " and " + shape_str(v.shape()) +
                    " differ outside axis");
    total_axis += v.extent(axis);
    chunk.push_back(v.extent(axis) * inner);
  }
  Shape os(first.shape());
  os[size_t(axis)] = total_axis;
  Tensor<S> out(os);
  S* dst = out.data();
  int64_t out_row = total_axis * inner;
  for (int64_t o = 0; o < outer; ++o) {
    int64_t off = 0;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const S* src = t.value(parts[pi]).data() + o * chunk[pi];
      std::memcpy(dst + o * out_row + off, src, size_t(chunk[pi]) * sizeof(S));
      off += chunk[pi];
    }
  }
  bool ng = false;
  for (Var p : parts) ng = ng || t.wants_grad(p);
  Var v = t.emplace(std::move(out), ng, "concat");
  if (ng) {
    std::vector<Var> ps = parts;
    t.set_backward(v, [v, ps, chunk, outer, out_row](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      int64_t off = 0;
      for (size_t pi = 0; pi < ps.size(); ++pi) {
        if (tp.wants_grad(ps[pi])) {
          S* gp = tp.grad_acc(ps[pi]).data();
          for (int64_t o = 0; o < outer; ++o) {
            const S* gs = g.data() + o * out_row + off;
            S* gd = gp + o * chunk[pi];
            for (int64_t i = 0; i < chunk[pi]; ++i) gd[i] += gs[i];
          }
        }
        off += chunk[pi];
      }
    });
  }
  return v;
}

template <typename S>
Var slice(Tape<S>& t, Var a, int axis, int64_t start, int64_t len) {
  const Tensor<S>& va = t.value(a);
  int r = va.rank();
  require(axis >= 0 && axis < r, ErrorCode::invalid_argument, "slice: axis out of range");
  require(start >= 0 && len >= 1 && start + len <= va.extent(axis), ErrorCode::invalid_argument,
          "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") out of bounds for " + shape_str(va.shape()));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= va.extent(i);
  for (int i = axis + 1; i < r; ++i) inner *= va.extent(i);
  int64_t mid = va.extent(axis);
  Shape os(va.shape());
  os[size_t(axis)] = len;
  Tensor<S> out(os);
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, va.data() + (o * mid + start) * inner,
                size_t(len * inner) * sizeof(S));
  bool ng = t.wants_grad(a);
  Var v = t.emplace(std::move(out), ng, "slice");
  if (ng) {
    t.set_backward(v, [v, a, outer, inner, mid, start, len](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      S* ga = tp.grad_acc(a).data();
      for (int64_t o = 0; o < outer; ++o) {
        const S* gs = g.data() + o * len * inner;
        S* gd = ga + (o * mid + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) gd[i] += gs[i];
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Softmax / normalization / reductions
// ---------------------------------------------------------------------------

template <typename S>
Var softmax_last(Tape<S>& t, Var a) {
  const Tensor<S>& va = t.value(a);
  require(va.rank() >= 1, ErrorCode::shape_mismatch, "softmax: rank must be >= 1");
  int64_t L = va.extent(va.rank() - 1);
  int64_t rows = va.numel() / L;
  Tensor<S> out(va.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = va.data() + r * L;
    S* y = out.data() + r * L;
    S mx = x[0];
    for (int64_t i = 1; i < L; ++i) mx = std::max(mx, x[i]);
    double sum = 0;
    for (int64_t i = 0; i < L; ++i) {
      double e = std::exp(double(x[i] - mx));
      y[i] = S(e);
      sum += e;
    }
    for (int64_t i = 0; i < L; ++i) y[i] = S(double(y[i]) / sum);
  }
  bool ng = t.wants_grad(a);
  Var v = t.emplace(std::move(out), ng, "softmax");
  if (ng) {
    t.set_backward(v, [v, a, rows, L](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      const Tensor<S>& y = tp.value(v);
      S* ga = tp.grad_acc(a).data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g.data() + r * L;
        const S* yr = y.data() + r * L;
        double dot = 0;
        for (int64_t i = 0; i < L; ++i) dot += double(gr[i]) * double(yr[i]);
        for (int64_t i = 0; i < L; ++i) ga[r * L + i] += S((double(gr[i]) - dot) * double(yr[i]));
      }
    });
  }
  return v;
}

namespace detail {

// Shared core for layer/group norm: normalizes `rows` contiguous blocks of
// length `block`. Variance is floored (not shifted) so constant inputs map
// to exactly zero.
template <typename S>
Var block_norm(Tape<S>& t, Var a, int64_t rows, int64_t block, double floor, const char* name) {
  const Tensor<S>& va = t.value(a);
  Tensor<S> out(va.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const S* x = va.data() + r * block;
    S* y = out.data() + r * block;
    double mu = 0;
    for (int64_t i = 0; i < block; ++i) mu += double(x[i]);
    mu /= double(block);
    double var = 0;
    for (int64_t i = 0; i < block; ++i) {
      double d = double(x[i]) - mu;
      var += d * d;
    }
    var /= double(block);
    double rstd = 1.0 / std::sqrt(std::max(var, floor));
    for (int64_t i = 0; i < block; ++i) y[i] = S((double(x[i]) - mu) * rstd);
  }
  bool ng = t.wants_grad(a);
  Var v = t.emplace(std::move(out), ng, name);
  if (ng) {
    t.set_backward(v, [v, a, rows, block, floor](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      const Tensor<S>& x = tp.value(a);
      const Tensor<S>& y = tp.value(v);
      S* ga = tp.grad_acc(a).data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x.data() + r * block;
        const S* yr = y.data() + r * block;
        const S* gr = g.data() + r * block;
        double mu = 0;
        for (int64_t i = 0; i < block; ++i) mu += double(xr[i]);
        mu /= double(block);
        double var = 0;
        for (int64_t i = 0; i < block; ++i) {
          double d = double(xr[i]) - mu;
          var += d * d;
        }
        var /= double(block);
        bool clamped = var < floor;
        double rstd = 1.0 / std::sqrt(std::max(var, floor));
        double gmean = 0, gymean = 0;
        for (int64_t i = 0; i < block; ++i) {
          gmean += double(gr[i]);
          gymean += double(gr[i]) * double(yr[i]);
        }
        gmean /= double(block);
        gymean /= double(block);
        for (int64_t i = 0; i < block; ++i) {
          double d = clamped ? (double(gr[i]) - gmean)
                             : (double(gr[i]) - gmean - double(yr[i]) * gymean);
          ga[r * block + i] += S(d * rstd);
        }
      }
    });
  }
  return v;
}

}  // namespace detail

// Normalization over the last axis (no affine; compose with mul/add for one).
template <typename S>
Var layer_norm(Tape<S>& t, Var a, double floor = 1e-5) {
  const Tensor<S>& va = t.value(a);
  require(va.rank() >= 1, ErrorCode::shape_mismatch, "layer_norm: rank must be >= 1");
  int64_t L = va.extent(va.rank() - 1);
  return detail::block_norm(t, a, va.numel() / L, L, floor, "layer_norm");
}

// Input [N, C, ...spatial]; normalizes each (sample, group) block.
template <typename S>
Var group_norm(Tape<S>& t, Var a, int groups, double floor = 1e-5) {
  const Tensor<S>& va = t.value(a);
  require(va.rank() >= 2, ErrorCode::shape_mismatch, "group_norm: rank must be >= 2");
  int64_t N = va.extent(0), C = va.extent(1);
  require(groups >= 1 && C % groups == 0, ErrorCode::invalid_argument,
          "group_norm: channels " + std::to_string(C) + " not divisible by groups " +
              std::to_string(groups));
  int64_t spatial = va.numel() / (N * C);
  int64_t block = (C / groups) * spatial;
  return detail::block_norm(t, a, N * groups, block, floor, "group_norm");
}

template <typename S>
Var sum_all(Tape<S>& t, Var a) {
  const Tensor<S>& va = t.value(a);
  double s = 0;
  for (int64_t i = 0; i < va.numel(); ++i) s += double(va[i]);
  bool ng = t.wants_grad(a);
  Var v = t.emplace(Tensor<S>::scalar(S(s)), ng, "sum");
  if (ng) {
    t.set_backward(v, [v, a](Tape<S>& tp) {
      S g = tp.grad(v)[0];
      Tensor<S>& ga = tp.grad_acc(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  }
  return v;
}

template <typename S>
Var mean_all(Tape<S>& t, Var a) {
  const Tensor<S>& va = t.value(a);
  int64_t n = va.numel();
  double s = 0;
  for (int64_t i = 0; i < n; ++i) s += double(va[i]);
  bool ng = t.wants_grad(a);
  Var v = t.emplace(Tensor<S>::scalar(S(s / double(n))), ng, "mean");
  if (ng) {
    t.set_backward(v, [v, a, n](Tape<S>& tp) {
      S g = S(double(tp.grad(v)[0]) / double(n));
      Tensor<S>& ga = tp.grad_acc(a);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
  }
  return v;
}

// Sum along one axis (the axis is dropped from the shape).
template <typename S>
Var sum_axis(Tape<S>& t, Var a, int axis) {
  const Tensor<S>& va = t.value(a);
  int r = va.rank();
  require(axis >= 0 && axis < r, ErrorCode::invalid_argument, "sum_axis: axis out of range");
  require(r >= 2, ErrorCode::invalid_argument, "sum_axis: use sum_all for rank-1 tensors");
  int64_t outer = 1, inner = 1, mid = va.extent(axis);
  for (int i = 0; i < axis; ++i) outer *= va.extent(i);
  for (int i = axis + 1; i < r; ++i) inner *= va.extent(i);
  Shape os;
  for (int i = 0; i < r; ++i)
    if (i != axis) os.push_back(va.extent(i));
  Tensor<S> out(os);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m)
      for (int64_t i = 0; i < inner; ++i)
        out[o * inner + i] += va[(o * mid + m) * inner + i];
  bool ng = t.wants_grad(a);
  Var v = t.emplace(std::move(out), ng, "sum_axis");
  if (ng) {
    t.set_backward(v, [v, a, outer, mid, inner](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      S* ga = tp.grad_acc(a).data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m)
          for (int64_t i = 0; i < inner; ++i)
            ga[(o * mid + m) * inner + i] += g[o * inner + i];
    });
  }
  return v;
}

template <typename S>
Var mean_axis(Tape<S>& t, Var a, int axis) {
  int64_t n = t.value(a).extent(axis);
  return affine(t, sum_axis(t, a, axis), 1.0 / double(n), 0.0);
}

// Embedding lookup: table [V, D], integer indices -> [n, D].
template <typename S>
Var embedding(Tape<S>& t, Var table, std::vector<int64_t> idx) {
  const Tensor<S>& vt = t.value(table);
  require(vt.rank() == 2, ErrorCode::shape_mismatch,
          "embedding: table must be rank 2, got " + shape_str(vt.shape()));
  int64_t V = vt.extent(0), D = vt.extent(1);
  for (int64_t i : idx)
    require(i >= 0 && i < V, ErrorCode::invalid_argument,
            "embedding: index " + std::to_string(i) + " out of range [0," + std::to_string(V) + ")");
  Tensor<S> out(Shape{int64_t(idx.size()), D});
  for (size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data() + int64_t(r) * D, vt.data() + idx[r] * D, size_t(D) * sizeof(S));
  bool ng = t.wants_grad(table);
  Var v = t.emplace(std::move(out), ng, "embedding");
  if (ng) {
    t.set_backward(v, [v, table, idx, D](Tape<S>& tp) {
      const Tensor<S>& g = tp.grad(v);
      S* gt = tp.grad_acc(table).data();
      for (size_t r = 0; r < idx.size(); ++r) {
        const S* gr = g.data() + int64_t(r) * D;
        S* row = gt + idx[r] * D;
        for (int64_t i = 0; i < D; ++i) row[i] += gr[i];
      }
    });
  }
  return v;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| normalized by
// max(1, |analytic|, |numeric|). `build` maps (tape, leaf var) to a scalar
// var and must be deterministic.
template <typename Fn>
double grad_check(Fn&& build, const Tensord& x, double eps = 1e-5) {
  Taped tape;
  Var leaf = tape.leaf(x, true);
  Var loss = build(tape, leaf);
  require(tape.value(loss).numel() == 1, ErrorCode::invalid_argument,
          "grad_check requires a scalar-valued function");
  tape.backward(loss);
  Tensord analytic = tape.grad_or_zero(leaf);

  auto eval = [&](const Tensord& p) {
    Taped tp;
    Var l = tp.leaf(p, false);
    Var out = build(tp, l);
    return double(tp.value(out)[0]);
  };

  double worst = 0;
  Tensord probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    double orig = probe[i];
    probe[i] = orig + eps;
    double fp = eval(probe);
    probe[i] = orig - eps;
    double fm = eval(probe);
    probe[i] = orig;
    double numeric = (fp - fm) / (2 * eps);
    double a = analytic[i];
    double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sde::ad
