#pragma once
#include <map>
#include <string>

#include "scenediff/rng.hpp"
#include "scenediff/tape.hpp"

namespace sde::nn {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Tensorf;
using ad::Var;

template <typename S>
struct ParamStore {
  std::map<std::string, Tensor<S>> tensors;  // ordered -> deterministic walks

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  Tensor<S>& at(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorCode::invalid_argument, "unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorCode::invalid_argument, "unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor<S>& init_normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
    Tensor<S> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = S(rng.normal() * stddev);
    return tensors[name] = std::move(t);
  }

  Tensor<S>& init_const(const std::string& name, Shape shape, double v) {
    return tensors[name] = Tensor<S>(std::move(shape), S(v));
  }

  Tensor<S>& init_zeros(const std::string& name, Shape shape) {
    return init_const(name, std::move(shape), 0.0);
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& [k, v] : tensors) n += v.numel();
    return n;
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& [k, v] : tensors) out.tensors[k] = v.template cast<T>();
    return out;
  }
};

// Binds parameters into one tape, leafing each tensor at most once. `train`
// false runs inference graphs without gradient bookkeeping.
template <typename S>
struct NetCtx {
  Tape<S>& tape;
  ParamStore<S>& params;
  bool train = true;
  std::map<std::string, Var> bound;

  Var p(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    Var v = tape.leaf(params.at(name), train);
    bound.emplace(name, v);
    return v;
  }

  // Leaf gradients after backward; parameters the loss never reached get
  // zeros, matching the contract of Tape::grad_or_zero.
  std::map<std::string, Tensor<S>> grads() const {
    std::map<std::string, Tensor<S>> g;
    for (const auto& [name, var] : bound) g[name] = tape.grad_or_zero(var);
    return g;
  }
};

using NetCtxf = NetCtx<float>;
using NetCtxd = NetCtx<double>;

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

inline void reg_dense(ParamStore<float>& ps, const std::string& prefix, int in, int out, Rng& rng,
                      double stddev = 0.02, bool zero_init = false) {
  if (zero_init)
    ps.init_zeros(prefix + ".w", {in, out});
  else
    ps.init_normal(prefix + ".w", {in, out}, rng, stddev);
  ps.init_zeros(prefix + ".b", {out});
}

template <typename S>
Var dense(NetCtx<S>& c, const std::string& prefix, Var x) {
  return add(c.tape, matmul(c.tape, x, c.p(prefix + ".w")), c.p(prefix + ".b"));
}

inline void reg_mha(ParamStore<float>& ps, const std::string& prefix, int q_in, int kv_in,
                    int width, int out, Rng& rng) {
  reg_dense(ps, prefix + ".q", q_in, width, rng);
  reg_dense(ps, prefix + ".k", kv_in, width, rng);
  reg_dense(ps, prefix + ".v", kv_in, width, rng);
  reg_dense(ps, prefix + ".o", width, out, rng);
}

// Multi-head attention, 2-D token matrices: q_in [n, *], kv_in [m, *].
// `mask` is additive on the [n, m] score matrix (0 keep / -1e9 drop).
template <typename S>
Var mha(NetCtx<S>& c, const std::string& prefix, Var q_in, Var kv_in, int heads,
        const Tensor<S>* mask = nullptr) {
  Tape<S>& t = c.tape;
  int64_t n = t.value(q_in).extent(0);
  int64_t m = t.value(kv_in).extent(0);
  int64_t W = c.params.at(prefix + ".q.w").extent(1);
  int64_t dh = W / heads;
  require(W % heads == 0, ErrorCode::invalid_argument, "mha: width not divisible by heads");
  auto split = [&](Var x, int64_t rows) {
    // [rows, W] -> [H, rows, dh]
    return transpose(t, reshape(t, x, {rows, heads, dh}), {1, 0, 2});
  };
  Var q = split(dense(c, prefix + ".q", q_in), n);
  Var k = split(dense(c, prefix + ".k", kv_in), m);
  Var v = split(dense(c, prefix + ".v", kv_in), m);
  Var kT = transpose(t, k, {0, 2, 1});                       // [H, dh, m]
  Var scores = affine(t, matmul(t, q, kT), 1.0 / std::sqrt(double(dh)), 0.0);  // [H, n, m]
  if (mask) scores = add(t, scores, t.constant(*mask));
  Var attn = softmax_last(t, scores);
  Var ctx = matmul(t, attn, v);                              // [H, n, dh]
  Var merged = reshape(t, transpose(t, ctx, {1, 0, 2}), {n, int64_t(heads) * dh});
  return dense(c, prefix + ".o", merged);
}

// Batched variant: q_in [B, n, *], kv_in [B, m, *]; batches never mix.
template <typename S>
Var mha_batched(NetCtx<S>& c, const std::string& prefix, Var q_in, Var kv_in, int heads) {
  Tape<S>& t = c.tape;
  int64_t B = t.value(q_in).extent(0);
  int64_t n = t.value(q_in).extent(1);
  int64_t m = t.value(kv_in).extent(1);
  int64_t W = c.params.at(prefix + ".q.w").extent(1);
  int64_t dh = W / heads;
  require(W % heads == 0, ErrorCode::invalid_argument, "mha: width not divisible by heads");
  auto split = [&](Var x, int64_t rows) {
    return transpose(t, reshape(t, x, {B, rows, heads, dh}), {0, 2, 1, 3});  // [B, H, rows, dh]
  };
  Var q = split(dense(c, prefix + ".q", q_in), n);
  Var k = split(dense(c, prefix + ".k", kv_in), m);
  Var v = split(dense(c, prefix + ".v", kv_in), m);
  Var kT = transpose(t, k, {0, 1, 3, 2});  // [B, H, dh, m]
  Var scores = affine(t, matmul(t, q, kT), 1.0 / std::sqrt(double(dh)), 0.0);
  Var attn = softmax_last(t, scores);
  Var ctx = matmul(t, attn, v);  // [B, H, n, dh]
  Var merged = reshape(t, transpose(t, ctx, {0, 2, 1, 3}), {B, n, int64_t(heads) * dh});
  return dense(c, prefix + ".o", merged);
}

inline void reg_mlp(ParamStore<float>& ps, const std::string& prefix, int in, int hidden, int out,
                    Rng& rng, bool zero_last = false) {
  reg_dense(ps, prefix + ".l1", in, hidden, rng);
  reg_dense(ps, prefix + ".l2", hidden, out, rng, 0.02, zero_last);
}

template <typename S>
Var mlp(NetCtx<S>& c, const std::string& prefix, Var x) {
  return dense(c, prefix + ".l2", silu(c.tape, dense(c, prefix + ".l1", x)));
}

// Sinusoidal timestep features: [sin(t*w_0..), cos(t*w_0..)], dim/2 each.
inline std::vector<double> timestep_features(double t, int dim) {
  int half = dim / 2;
  std::vector<double> out(size_t(dim), 0.0);
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * double(i) / double(std::max(1, half - 1)));
    out[size_t(i)] = std::sin(t * freq);
    out[size_t(half + i)] = std::cos(t * freq);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamW {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int64_t steps = 0;
  std::map<std::string, Tensorf> m, v;

  void step(ParamStore<float>& params, const std::map<std::string, Tensorf>& grads) {
    ++steps;
    double bc1 = 1.0 - std::pow(beta1, double(steps));
    double bc2 = 1.0 - std::pow(beta2, double(steps));
    for (const auto& [name, g] : grads) {
      Tensorf& theta = params.at(name);
      Tensorf& mi = m.try_emplace(name, Tensorf(theta.shape())).first->second;
      Tensorf& vi = v.try_emplace(name, Tensorf(theta.shape())).first->second;
      for (int64_t i = 0; i < theta.numel(); ++i) {
        double gi = g[i];
        double mn = beta1 * mi[i] + (1.0 - beta1) * gi;
        double vn = beta2 * vi[i] + (1.0 - beta2) * gi * gi;
        mi[i] = float(mn);
        vi[i] = float(vn);
        double update = (mn / bc1) / (std::sqrt(vn / bc2) + eps) + weight_decay * theta[i];
        theta[i] = float(theta[i] - lr * update);
      }
    }
  }
};

// Scales gradients in place so their global L2 norm is at most max_norm.
// Non-finite gradients are zeroed (the step becomes a no-op) rather than
// propagated into the optimizer state.
inline double clip_grad_norm(std::map<std::string, Tensorf>& grads, double max_norm) {
  double sq = 0;
  for (auto& [k, g] : grads)
    for (int64_t i = 0; i < g.numel(); ++i) sq += double(g[i]) * double(g[i]);
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    for (auto& [k, g] : grads)
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = 0.0f;
    return norm;
  }
  if (norm > max_norm && norm > 0) {
    float s = float(max_norm / norm);
    for (auto& [k, g] : grads)
      for (int64_t i = 0; i < g.numel(); ++i) g[i] *= s;
  }
  return norm;
}

}  // namespace sde::nn
