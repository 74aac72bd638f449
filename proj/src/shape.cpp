#include "scenediff/shape.hpp"

#include <cmath>

#include "scenediff/kdtree.hpp"

namespace sde::shape {

std::vector<double> GaussianScaffold::softmax_weights() const {
  std::vector<double> w(comps.size());
  double mx = -1e300;
  for (size_t j = 0; j < comps.size(); ++j) mx = std::max(mx, comps[j].pi);
  double sum = 0;
  for (size_t j = 0; j < comps.size(); ++j) {
    w[j] = std::exp(comps[j].pi - mx);
    sum += w[j];
  }
  for (double& v : w) v /= sum;
  return w;
}

Mat3 GaussianScaffold::sampling_factor(const GaussianComponent& c) {
  return c.rot * Mat3::diag({std::sqrt(c.lambda.x), std::sqrt(c.lambda.y), std::sqrt(c.lambda.z)});
}

double softplus_val(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inv(double y) {
  require(y > 0, ErrorCode::invalid_argument, "softplus_inv: argument must be positive");
  if (y > 30.0) return y;
  double x = std::log(std::expm1(y));
  if (softplus_val(x) == y) return x;
  // Nudge to an exact preimage when one exists at this precision.
  double best = x, best_err = std::abs(softplus_val(x) - y);
  for (int dir = -1; dir <= 1; dir += 2) {
    double probe = x;
    for (int i = 0; i < 8; ++i) {
      probe = std::nextafter(probe, dir < 0 ? -1e308 : 1e308);
      double err = std::abs(softplus_val(probe) - y);
      if (err < best_err) {
        best = probe;
        best_err = err;
      }
      if (err == 0.0) return probe;
    }
  }
  return best;
}

Mat3 polar_project(const Mat3& a) {
  Mat3 x = a;
  if (std::abs(x.det()) < 1e-9) {
    for (int i = 0; i < 3; ++i) x(i, i) += 1e-6;  // lift off the singular set
  }
  for (int it = 0; it < 40; ++it) {
    Mat3 inv_t = x.inverse().transposed();
    Mat3 next;
    for (int i = 0; i < 9; ++i) next.m[size_t(i)] = 0.5 * (x.m[size_t(i)] + inv_t.m[size_t(i)]);
    double delta = 0;
    for (int i = 0; i < 9; ++i) delta = std::max(delta, std::abs(next.m[size_t(i)] - x.m[size_t(i)]));
    x = next;
    if (delta < 1e-15) break;
  }
  return x;
}

namespace {

bool nearly_orthonormal(const Mat3& u) {
  Mat3 g = u.transposed() * u;
  double worst = 0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(g(r, c) - (r == c ? 1.0 : 0.0)));
  return worst < 1e-9;
}

}  // namespace

std::vector<double> pack_shape_code(const GaussianScaffold& s) {
  std::vector<double> v;
  v.reserve(size_t(s.g()) * kParamsPerGaussian);
  for (const auto& c : s.comps) {
    v.push_back(c.mu.x);
    v.push_back(c.mu.y);
    v.push_back(c.mu.z);
    for (int i = 0; i < 9; ++i) v.push_back(c.rot.m[size_t(i)]);
    v.push_back(softplus_inv(c.lambda.x));
    v.push_back(softplus_inv(c.lambda.y));
    v.push_back(softplus_inv(c.lambda.z));
    v.push_back(c.pi);
  }
  return v;
}

GaussianScaffold unpack_shape_code(const std::vector<double>& v) {
  require(v.size() % kParamsPerGaussian == 0 && !v.empty(), ErrorCode::shape_mismatch,
          "shape code length " + std::to_string(v.size()) + " is not a multiple of 16");
  GaussianScaffold s;
  size_t g = v.size() / kParamsPerGaussian;
  s.comps.resize(g);
  for (size_t j = 0; j < g; ++j) {
    const double* p = v.data() + j * kParamsPerGaussian;
    GaussianComponent& c = s.comps[j];
    c.mu = {p[0], p[1], p[2]};
    Mat3 raw;
    for (int i = 0; i < 9; ++i) raw.m[size_t(i)] = p[3 + i];
    c.rot = nearly_orthonormal(raw) ? raw : polar_project(raw);
    c.lambda = {softplus_val(p[12]), softplus_val(p[13]), softplus_val(p[14])};
    c.pi = p[15];
  }
  return s;
}

std::vector<Vec3> sample_points(const GaussianScaffold& s, int m, Rng& rng) {
  require(m >= 1, ErrorCode::invalid_argument, "sample_points: m must be >= 1");
  std::vector<Vec3> out;
  out.reserve(size_t(s.g()) * size_t(m));
  for (const auto& c : s.comps) {
    require(c.lambda.x > 0 && c.lambda.y > 0 && c.lambda.z > 0, ErrorCode::invalid_argument,
            "sample_points: non-positive scale");
    Mat3 f = GaussianScaffold::sampling_factor(c);
    for (int i = 0; i < m; ++i) {
      Vec3 z{rng.normal(), rng.normal(), rng.normal()};
      out.push_back(f * z + c.mu);
    }
  }
  return out;
}

double normalized_mixture(const GaussianScaffold& s, const Vec3& x) {
  std::vector<double> w = s.softmax_weights();
  double sum = 0;
  for (size_t j = 0; j < s.comps.size(); ++j) {
    const auto& c = s.comps[j];
    Vec3 local = c.rot.transposed() * (x - c.mu);
    double rho2 = local.x * local.x / c.lambda.x + local.y * local.y / c.lambda.y +
                  local.z * local.z / c.lambda.z;
    sum += w[j] * std::exp(-0.5 * rho2);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Occupancy decoder
// ---------------------------------------------------------------------------

void OccupancyDecoder::register_params(nn::ParamStore<float>& ps, const DecoderConfig& cfg,
                                       Rng& rng) {
  int in_feats = 5;  // whitened coords (3), density (1), weight (1)
  nn::reg_dense(ps, "dec.f1f", in_feats, cfg.hidden, rng);
  ps.init_normal("dec.f1z.w", {cfg.latent_dim, cfg.hidden}, rng, 0.02);
  nn::reg_dense(ps, "dec.f2", cfg.hidden, cfg.hidden, rng);
  nn::reg_dense(ps, "dec.out", cfg.hidden, 1, rng, 0.02, /*zero_init=*/true);
}

namespace {

struct PointFeatures {
  // per component: whitened coords, density, weight
  std::array<double, 5> f;
  double dens;
};

inline PointFeatures component_features(const GaussianComponent& c, double w, const Vec3& x) {
  Vec3 local = c.rot.transposed() * (x - c.mu);
  Vec3 white{local.x / std::sqrt(c.lambda.x), local.y / std::sqrt(c.lambda.y),
             local.z / std::sqrt(c.lambda.z)};
  double rho2 = white.norm2();
  double dens = std::exp(-0.5 * rho2);
  return {{white.x, white.y, white.z, dens, w}, dens};
}

}  // namespace

std::vector<float> OccupancyDecoder::evaluate(const GaussianScaffold& s, const ad::Tensorf& latents,
                                              const nn::ParamStore<float>& ps,
                                              const std::vector<Vec3>& points, bool use_mlp) const {
  for (const auto& p : points)
    require(std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z), ErrorCode::numeric,
            "occupancy: non-finite query point");
  std::vector<double> w = s.softmax_weights();
  int g = s.g();
  int H = cfg_.hidden;
  int h = cfg_.latent_dim;
  const float* w1f = use_mlp ? ps.at("dec.f1f.w").data() : nullptr;
  const float* b1 = use_mlp ? ps.at("dec.f1f.b").data() : nullptr;
  const float* w1z = use_mlp ? ps.at("dec.f1z.w").data() : nullptr;
  const float* w2 = use_mlp ? ps.at("dec.f2.w").data() : nullptr;
  const float* b2 = use_mlp ? ps.at("dec.f2.b").data() : nullptr;
  const float* w3 = use_mlp ? ps.at("dec.out.w").data() : nullptr;
  const float* b3 = use_mlp ? ps.at("dec.out.b").data() : nullptr;

  // Per-component latent projection is point-independent; hoist it.
  std::vector<double> zproj;
  if (use_mlp) {
    require(latents.rank() == 2 && latents.extent(0) == g && latents.extent(1) == h,
            ErrorCode::shape_mismatch, "occupancy: latents must be g x latent_dim");
    zproj.assign(size_t(g) * size_t(H), 0.0);
    for (int j = 0; j < g; ++j)
      for (int k = 0; k < h; ++k) {
        double z = latents[j * h + k];
        if (z == 0.0) continue;
        for (int o = 0; o < H; ++o) zproj[size_t(j * H + o)] += z * w1z[k * H + o];
      }
  }

  auto lrelu = [](double v) { return v > 0 ? v : 0.01 * v; };
  std::vector<float> occ(points.size());
  std::vector<double> agg(size_t(H), 0.0);
  std::vector<double> e(size_t(H), 0.0);
  for (size_t pi = 0; pi < points.size(); ++pi) {
    const Vec3& x = points[pi];
    double mixture = 0;
    double mlp_out = 0;
    if (use_mlp) std::fill(agg.begin(), agg.end(), 0.0);
    for (int j = 0; j < g; ++j) {
      PointFeatures pf = component_features(s.comps[size_t(j)], w[size_t(j)], x);
      mixture += w[size_t(j)] * pf.dens;
      if (!use_mlp || pf.dens < 2e-9) continue;  // outside any component's support
      for (int o = 0; o < H; ++o) {
        double acc = b1[o] + zproj[size_t(j * H + o)];
        for (int f = 0; f < 5; ++f) acc += pf.f[size_t(f)] * w1f[f * H + o];
        e[size_t(o)] = lrelu(acc);
      }
      for (int o = 0; o < H; ++o) {
        double acc = b2[o];
        for (int k = 0; k < H; ++k) acc += e[size_t(k)] * w2[k * H + o];
        agg[size_t(o)] += pf.dens * acc;
      }
    }
    if (use_mlp) {
      double acc = b3[0];
      for (int o = 0; o < H; ++o) acc += lrelu(agg[size_t(o)]) * w3[o];
      mlp_out = acc;
    }
    double logit = cfg_.a * (mixture - cfg_.b) + mlp_out;
    occ[pi] = float(1.0 / (1.0 + std::exp(-logit)));
  }
  return occ;
}

template <typename S>
ad::Var OccupancyDecoder::logits_tape(nn::NetCtx<S>& ctx, const GaussianScaffold& s,
                                      ad::Var latents, const std::vector<Vec3>& points) const {
  using ad::Tensor;
  using ad::Var;
  auto& t = ctx.tape;
  int64_t P = int64_t(points.size());
  int64_t g = s.g();
  std::vector<double> w = s.softmax_weights();

  Tensor<S> feats({P, g, 5});
  Tensor<S> dens_row({P, 1, g});
  Tensor<S> mixture({P, 1});
  for (int64_t pi = 0; pi < P; ++pi) {
    double mix = 0;
    for (int64_t j = 0; j < g; ++j) {
      PointFeatures pf = component_features(s.comps[size_t(j)], w[size_t(j)], points[size_t(pi)]);
      for (int f = 0; f < 5; ++f) feats[(pi * g + j) * 5 + f] = S(pf.f[size_t(f)]);
      dens_row[pi * g + j] = S(pf.dens);
      mix += w[size_t(j)] * pf.dens;
    }
    mixture[pi] = S(cfg_.a * (mix - cfg_.b));
  }

  Var h1 = add(t, matmul(t, t.constant(std::move(feats)), ctx.p("dec.f1f.w")),
               ctx.p("dec.f1f.b"));                                   // [P, g, H]
  Var zterm = matmul(t, latents, ctx.p("dec.f1z.w"));                 // [g, H]
  Var act = leaky_relu(t, add(t, h1, zterm));                         // broadcast over P
  Var e = add(t, matmul(t, act, ctx.p("dec.f2.w")), ctx.p("dec.f2.b"));  // [P, g, H]
  Var agg = matmul(t, t.constant(std::move(dens_row)), e);            // [P, 1, H]
  Var flat = reshape(t, agg, {P, int64_t(cfg_.hidden)});
  Var out = add(t, matmul(t, leaky_relu(t, flat), ctx.p("dec.out.w")), ctx.p("dec.out.b"));
  return add(t, out, t.constant(std::move(mixture)));  // [P, 1] logits
}

template ad::Var OccupancyDecoder::logits_tape<float>(nn::NetCtx<float>&, const GaussianScaffold&,
                                                      ad::Var, const std::vector<Vec3>&) const;
template ad::Var OccupancyDecoder::logits_tape<double>(nn::NetCtx<double>&,
                                                       const GaussianScaffold&, ad::Var,
                                                       const std::vector<Vec3>&) const;

// ---------------------------------------------------------------------------
// Point-set metrics
// ---------------------------------------------------------------------------

double Mesh::area() const {
  double a = 0;
  for (const auto& tr : tris) {
    Vec3 v0{vertices[size_t(tr[0])][0], vertices[size_t(tr[0])][1], vertices[size_t(tr[0])][2]};
    Vec3 v1{vertices[size_t(tr[1])][0], vertices[size_t(tr[1])][1], vertices[size_t(tr[1])][2]};
    Vec3 v2{vertices[size_t(tr[2])][0], vertices[size_t(tr[2])][1], vertices[size_t(tr[2])][2]};
    a += (v1 - v0).cross(v2 - v0).norm() * 0.5;
  }
  return a;
}

double chamfer_distance(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
  require(!p.empty() && !q.empty(), ErrorCode::invalid_argument, "chamfer: empty point set");
  auto one_sided = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    KdTree3 tree(to);
    double sum = 0;
    for (const Vec3& x : from) sum += tree.nearest(x).d2;
    return sum / double(from.size());
  };
  return 0.5 * (one_sided(p, q) + one_sided(q, p));
}

double f_score(const std::vector<Vec3>& p, const std::vector<Vec3>& q, double tau) {
  require(tau > 0, ErrorCode::invalid_argument, "f_score: tau must be positive");
  require(!p.empty() && !q.empty(), ErrorCode::invalid_argument, "f_score: empty point set");
  double tau2 = tau * tau;
  auto frac_within = [&](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    KdTree3 tree(to);
    int64_t hits = 0;
    for (const Vec3& x : from)
      if (tree.nearest(x).d2 <= tau2) hits++;
    return double(hits) / double(from.size());
  };
  double precision = frac_within(p, q);
  double recall = frac_within(q, p);
  if (precision + recall == 0) return 0.0;
  return 100.0 * 2.0 * precision * recall / (precision + recall);
}

std::vector<Vec3> surface_sample(const Mesh& m, int n, Rng& rng) {
  require(!m.tris.empty(), ErrorCode::invalid_argument, "surface_sample: empty mesh");
  std::vector<double> cum(m.tris.size());
  double total = 0;
  for (size_t i = 0; i < m.tris.size(); ++i) {
    const auto& tr = m.tris[i];
    Vec3 v0{m.vertices[size_t(tr[0])][0], m.vertices[size_t(tr[0])][1], m.vertices[size_t(tr[0])][2]};
    Vec3 v1{m.vertices[size_t(tr[1])][0], m.vertices[size_t(tr[1])][1], m.vertices[size_t(tr[1])][2]};
    Vec3 v2{m.vertices[size_t(tr[2])][0], m.vertices[size_t(tr[2])][1], m.vertices[size_t(tr[2])][2]};
    total += (v1 - v0).cross(v2 - v0).norm() * 0.5;
    cum[i] = total;
  }
  require(total > 0, ErrorCode::invalid_argument, "surface_sample: zero total area");
  std::vector<Vec3> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    size_t ti = size_t(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
    if (ti >= m.tris.size()) ti = m.tris.size() - 1;
    const auto& tr = m.tris[ti];
    Vec3 v0{m.vertices[size_t(tr[0])][0], m.vertices[size_t(tr[0])][1], m.vertices[size_t(tr[0])][2]};
    Vec3 v1{m.vertices[size_t(tr[1])][0], m.vertices[size_t(tr[1])][1], m.vertices[size_t(tr[1])][2]};
    Vec3 v2{m.vertices[size_t(tr[2])][0], m.vertices[size_t(tr[2])][1], m.vertices[size_t(tr[2])][2]};
    double a = rng.uniform(), b = rng.uniform();
    if (a + b > 1) {
      a = 1 - a;
      b = 1 - b;
    }
    out.push_back(v0 + (v1 - v0) * a + (v2 - v0) * b);
  }
  return out;
}

}  // namespace sde::shape
