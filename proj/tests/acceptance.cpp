// Acceptance suite: runs each acceptance criterion end to end and prints one
// PASS/FAIL line per criterion. Criteria can be selected by name on the
// command line; heavyweight runs cache their artifacts under --workdir so
// later criteria (unconditional synthesis) can reuse the trained model.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "scenediff/diffusion.hpp"
#include "scenediff/kdtree.hpp"
#include "scenediff/pipeline.hpp"

using namespace sde;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

std::string g_workdir = "/tmp/sde_acceptance";
int g_failures = 0;

struct Criterion {
  std::string name;
  std::function<void(std::ostringstream&)> run;  // throws or CHECKs
  double budget_seconds = 0;                     // 0: no budget printed
};

struct CheckFail : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(bool ok, const std::string& what) {
  if (!ok) throw CheckFail(what);
}

void run_criterion(const Criterion& c) {
  auto t0 = Clock::now();
  std::ostringstream detail;
  bool ok = true;
  std::string why;
  try {
    c.run(detail);
  } catch (const std::exception& e) {
    ok = false;
    why = e.what();
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (ok && c.budget_seconds > 0 && secs > c.budget_seconds) {
    ok = false;
    why = "runtime budget exceeded";
  }
  std::printf("[%s] %-16s %s(%.1fs%s)%s%s\n", ok ? "PASS" : "FAIL", c.name.c_str(),
              detail.str().empty() ? "" : (detail.str() + " ").c_str(), secs,
              c.budget_seconds > 0 ? ("/" + std::to_string(int(c.budget_seconds)) + "s").c_str()
                                   : "",
              why.empty() ? "" : " -- ", why.c_str());
  std::fflush(stdout);
  if (!ok) g_failures++;
}

ad::Tensord randn(ad::Shape shape, Rng& rng, double scale = 1.0) {
  ad::Tensord t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

// ---------------------------------------------------------------------------
// Schedule exactness
// ---------------------------------------------------------------------------

void crit_schedule(std::ostringstream& out) {
  diff::NoiseSchedule s = diff::make_linear_schedule(1000, 1e-4, 0.02);
  check(s.beta(1) == 1e-4 && std::abs(s.beta(1000) - 0.02) < 1e-18, "beta endpoints");
  long double abar = 1.0L;
  long double worst = 0;
  for (int t = 1; t <= 1000; ++t) {
    long double beta = 1e-4L + (long double)(t - 1) / 999.0L * (0.02L - 1e-4L);
    abar *= 1.0L - beta;
    worst = std::max(worst, fabsl(((long double)s.alpha_bar(t) - abar) / abar));
    if (t > 1) check(s.beta(t) > s.beta(t - 1) && s.alpha_bar(t) < s.alpha_bar(t - 1),
                     "monotonicity");
  }
  check(worst < 1e-10L, "alpha_bar oracle beyond 1e-10");
  out << "max rel err " << double(worst);
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

double check_params_subset(nn::ParamStore<double>& pd,
                           const std::function<ad::Var(ad::Taped&, nn::NetCtx<double>&)>& build,
                           int coords_per_tensor, uint64_t seed) {
  double worst = 0;
  Rng pick(seed);
  for (auto& [name, tensor] : pd.tensors) {
    // Finite differences over a sampled coordinate subset of this tensor.
    ad::Taped tape;
    nn::NetCtx<double> ctx{tape, pd, true, {}};
    ad::Var loss = build(tape, ctx);
    tape.backward(loss);
    ad::Tensord analytic = ctx.bound.count(name) ? tape.grad_or_zero(ctx.bound.at(name))
                                                 : ad::Tensord(tensor.shape());
    for (int probe = 0; probe < coords_per_tensor; ++probe) {
      int64_t i = int64_t(pick.uniform_index(uint64_t(tensor.numel())));
      double orig = tensor[i];
      const double eps = 1e-5;
      auto eval = [&](double v) {
        tensor[i] = v;
        ad::Taped tp;
        nn::NetCtx<double> c2{tp, pd, false, {}};
        double out = tp.value(build(tp, c2))[0];
        tensor[i] = orig;
        return out;
      };
      double numeric = (eval(orig + eps) - eval(orig - eps)) / (2 * eps);
      double a = analytic[i];
      worst = std::max(worst,
                       std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

void crit_gradients(std::ostringstream& out) {
  double worst_ops = 0;
  Rng rng(404);
  auto op_check = [&](auto build, ad::Shape shape, double scale = 1.0, double shift = 0.0) {
    for (int seed = 0; seed < 100; ++seed) {
      ad::Tensord x = randn(shape, rng, scale);
      for (int64_t i = 0; i < x.numel(); ++i) x[i] += shift;
      worst_ops = std::max(worst_ops, ad::grad_check(build, x));
    }
  };
  using ad::Taped;
  using ad::Var;
  op_check([](Taped& t, Var v) {
    Var c = t.constant(ad::Tensord::from({3}, {0.3, -0.2, 1.0}));
    return sum_all(t, mul(t, add(t, v, c), v));
  }, {4, 3});
  op_check([](Taped& t, Var v) {
    Var c = t.constant(ad::Tensord::from({3}, {0.3, -0.2, 1.0}));
    return mean_all(t, mul(t, sub(t, v, c), v));
  }, {4, 3});
  op_check([](Taped& t, Var v) {
    ad::Tensord w({3, 2});
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = 0.1 * double(i + 1);
    Var y = matmul(t, v, t.constant(w));
    return sum_all(t, mul(t, y, y));
  }, {4, 3});
  op_check([](Taped& t, Var v) {
    Var y = transpose(t, reshape(t, v, {2, 3, 2}), {1, 0, 2});
    return sum_all(t, mul(t, y, y));
  }, {12});
  op_check([](Taped& t, Var v) {
    Var a = slice(t, v, 1, 0, 2);
    Var b = slice(t, v, 1, 2, 2);
    return mean_all(t, mul(t, concat(t, {b, a}, 1), v));
  }, {3, 4});
  op_check([](Taped& t, Var v) {
    Var y = softmax_last(t, v);
    Var c = t.constant(ad::Tensord::from({3}, {0.2, -1.0, 0.7}));
    return sum_all(t, mul(t, y, c));
  }, {4, 3});
  op_check([](Taped& t, Var v) { return mean_all(t, sigmoid(t, v)); }, {7});
  op_check([](Taped& t, Var v) { return mean_all(t, silu(t, v)); }, {7});
  op_check([](Taped& t, Var v) { return mean_all(t, leaky_relu(t, v)); }, {7}, 1.0, 0.15);
  op_check([](Taped& t, Var v) { return mean_all(t, softplus(t, v)); }, {7});
  op_check([](Taped& t, Var v) { return mean_all(t, exp_op(t, v)); }, {5}, 0.5);
  op_check([](Taped& t, Var v) { return mean_all(t, log_op(t, v)); }, {5}, 0.2, 2.0);
  op_check([](Taped& t, Var v) { return mean_all(t, sqrt_op(t, v)); }, {5}, 0.2, 2.0);
  op_check([](Taped& t, Var v) { return mean_all(t, sin_op(t, v)); }, {5});
  op_check([](Taped& t, Var v) { return mean_all(t, cos_op(t, v)); }, {5});
  op_check([](Taped& t, Var v) { return mean_all(t, reciprocal(t, v)); }, {5}, 0.2, 2.0);
  op_check([](Taped& t, Var v) { return mean_all(t, affine(t, v, -2.0, 0.3)); }, {5});
  op_check([](Taped& t, Var v) {
    return mean_all(t, mul(t, clamp_min(t, v, 0.1), v));
  }, {6}, 1.0, 1.2);
  op_check([](Taped& t, Var v) {
    Var y = layer_norm(t, v);
    Var c = t.constant(ad::Tensord::from({4}, {0.3, 1.0, -0.6, 0.1}));
    return sum_all(t, mul(t, y, c));
  }, {3, 4});
  op_check([](Taped& t, Var v) {
    return sum_all(t, mul(t, group_norm(t, v, 2), v));
  }, {2, 4, 2, 2});
  op_check([](Taped& t, Var v) {
    Var y = sum_axis(t, v, 1);
    return sum_all(t, mul(t, y, y));
  }, {2, 3, 2});
  op_check([](Taped& t, Var v) {
    Var y = embedding(t, v, {1, 0, 1});
    return sum_all(t, mul(t, y, y));
  }, {3, 2});
  check(worst_ops < 1e-4, "catalogue op gradient above 1e-4");

  // ISA block.
  nn::ParamStore<float> isa_f;
  Rng ir(7);
  nn::reg_mha(isa_f, "isa", 8, 8, 8, 8, ir);
  nn::ParamStore<double> isa_d = isa_f.cast<double>();
  ad::Tensord isa_x = randn({4, 8}, ir, 0.6);
  double worst_isa = ad::grad_check(
      [&](Taped& t, Var v) {
        nn::NetCtx<double> c{t, isa_d, true, {}};
        Var y = nn::mha(c, "isa", v, v, 2);
        return sum_all(t, mul(t, y, y));
      },
      isa_x);
  worst_isa = std::max(
      worst_isa, check_params_subset(isa_d,
                                     [&](Taped& t, nn::NetCtx<double>& c) {
                                       Var y = nn::mha(c, "isa", t.constant(isa_x),
                                                       t.constant(isa_x), 2);
                                       return sum_all(t, mul(t, y, y));
                                     },
                                     6, 11));
  check(worst_isa < 1e-4, "ISA gradient above 1e-4");

  // The three denoisers at reduced width, full architecture depth.
  Rng nr(23);
  net::PoseDenoiserConfig pc;
  pc.width = 16;
  pc.heads = 2;
  pc.blocks = 8;
  pc.cond_width = 10;
  pc.time_dim = 8;
  net::PoseDenoiser pose_net(pc);
  nn::ParamStore<float> pose_f;
  pose_net.register_params(pose_f, nr);
  nn::ParamStore<double> pose_d = pose_f.cast<double>();
  // The output head is zero-initialized, which would make every gradient
  // vacuously zero; emulate trained weights.
  for (int64_t i = 0; i < pose_d.at("pose.out.w").numel(); ++i)
    pose_d.at("pose.out.w")[i] = nr.normal() * 0.05;
  ad::Tensord noisy = randn({2, 7}, nr);
  ad::Tensord y = randn({2, 10}, nr);
  ad::Tensord target = randn({2, 7}, nr);
  auto pose_loss = [&](Taped& t, nn::NetCtx<double>& c) {
    Var eps = pose_net.forward(c, t.constant(noisy), {0, 0}, 1, {37}, t.constant(y));
    Var d = sub(t, eps, t.constant(target));
    return mean_all(t, mul(t, d, d));
  };
  double worst_pose = ad::grad_check(
      [&](Taped& t, Var v) {
        nn::NetCtx<double> c{t, pose_d, true, {}};
        Var eps = pose_net.forward(c, v, {0, 0}, 1, {37}, t.constant(y));
        Var d = sub(t, eps, t.constant(target));
        return mean_all(t, mul(t, d, d));
      },
      noisy);
  worst_pose = std::max(worst_pose, check_params_subset(pose_d, pose_loss, 2, 31));
  check(worst_pose < 1e-4, "pose denoiser gradient above 1e-4");

  auto set_net_check = [&](const std::string& prefix, int enc, int dec, int token_dim,
                           int cond_dim, int cond_tokens) {
    net::SetDenoiserConfig scfg;
    scfg.prefix = prefix;
    scfg.token_dim = token_dim;
    scfg.cond_dim = cond_dim;
    scfg.cond_tokens = cond_tokens;
    scfg.width = 16;
    scfg.heads = 2;
    scfg.enc_layers = enc;
    scfg.dec_layers = dec;
    scfg.time_dim = 8;
    net::SetDenoiser net(scfg);
    nn::ParamStore<float> fs_;
    net.register_params(fs_, nr);
    nn::ParamStore<double> ds_ = fs_.cast<double>();
    for (int64_t i = 0; i < ds_.at(prefix + ".out.w").numel(); ++i)
      ds_.at(prefix + ".out.w")[i] = nr.normal() * 0.05;
    ad::Tensord tokens = randn({1, 4, token_dim}, nr);
    ad::Tensord cond = randn({1, cond_tokens, cond_dim}, nr);
    auto loss = [&, net](Taped& t, nn::NetCtx<double>& c) {
      Var eps = net.forward(c, t.constant(tokens), {12}, t.constant(cond));
      return mean_all(t, mul(t, eps, eps));
    };
    double w = check_params_subset(ds_, loss, 2, 77);
    double wx = ad::grad_check(
        [&](Taped& t, Var v) {
          nn::NetCtx<double> c{t, ds_, true, {}};
          Var eps = net.forward(c, v, {12}, t.constant(cond));
          return mean_all(t, mul(t, eps, eps));
        },
        tokens);
    return std::max(w, wx);
  };
  double worst_shape = set_net_check("shape", 2, 6, 16, 12, 3);
  check(worst_shape < 1e-4, "shape denoiser gradient above 1e-4");
  double worst_lat = set_net_check("lat", 6, 6, 8, 16, 4);
  check(worst_lat < 1e-4, "latent denoiser gradient above 1e-4");

  // Alignment loss with fixed reparameterization noise.
  Rng ar(5);
  pose::Camera cam{40, 40, 16.5, 16.5, 33, 33};
  pose::PoseNormalizer norm = pose::PoseNormalizer::defaults(cam);
  const int g = 3, m = 24;
  shape::GaussianScaffold s;
  for (int j = 0; j < g; ++j) {
    shape::GaussianComponent comp;
    comp.mu = {ar.uniform(-0.2, 0.2), ar.uniform(-0.2, 0.2), ar.uniform(-0.2, 0.2)};
    comp.lambda = {ar.uniform(0.02, 0.1), ar.uniform(0.02, 0.1), ar.uniform(0.02, 0.1)};
    s.comps.push_back(comp);
  }
  ad::Tensord scaffold_raw = ad::Tensord::from({g, 16}, shape::pack_shape_code(s));
  for (int64_t i = 0; i < scaffold_raw.numel(); ++i) scaffold_raw[i] += 0.02 * ar.normal();
  ad::Tensord z = randn({g, m, 3}, ar);
  std::vector<Vec3> targets;
  for (int i = 0; i < 40; ++i)
    targets.push_back({ar.uniform(-0.4, 0.4), ar.uniform(-0.4, 0.4), 2.0 + ar.uniform(-0.3, 0.3)});
  ad::Tensord pose7 = ad::Tensord::from(
      {7}, {0.01, -0.02, (2.0 - norm.d_mu) / norm.d_max, (1.0 - norm.s_mu) / norm.s_max,
            (1.0 - norm.s_mu) / norm.s_max, (1.0 - norm.s_mu) / norm.s_max, 0.1});
  double worst_align = std::max(
      ad::grad_check(
          [&](Taped& t, Var v) {
            return align::alignment_term_tape(t, v, t.constant(scaffold_raw), z, targets, norm,
                                              {16.5, 16.5}, cam);
          },
          pose7),
      ad::grad_check(
          [&](Taped& t, Var v) {
            return align::alignment_term_tape(t, t.constant(pose7), v, z, targets, norm,
                                              {16.5, 16.5}, cam);
          },
          scaffold_raw));
  check(worst_align < 1e-3, "alignment loss gradient above 1e-3");

  out << "ops " << worst_ops << ", isa " << worst_isa << ", pose " << worst_pose << ", shape "
      << worst_shape << ", latent " << worst_lat << ", align " << worst_align;
}

// ---------------------------------------------------------------------------
// Oracle equivalence (chamfer bit-exact, IoU3D Monte-Carlo)
// ---------------------------------------------------------------------------

void crit_oracles(std::ostringstream& out) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Vec3> targets, sources;
    int nt = 20 + int(rng.uniform_index(200)), ns = 20 + int(rng.uniform_index(400));
    for (int i = 0; i < nt; ++i)
      targets.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    for (int i = 0; i < ns; ++i)
      sources.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    for (int i = 0; i < 4; ++i) sources.push_back(sources[size_t(i * 5)]);  // exercised ties
    align::OneSidedChamfer fast = align::one_sided_chamfer(targets, sources);
    double brute_sum = 0;
    std::vector<Vec3> brute_grad(sources.size());
    for (size_t k = 0; k < targets.size(); ++k) {
      double best = std::numeric_limits<double>::infinity();
      int32_t bi = -1;
      for (size_t j = 0; j < sources.size(); ++j) {
        double d2 = KdTree3::dist2(targets[k], sources[j]);
        if (d2 < best || (d2 == best && int32_t(j) < bi)) {
          best = d2;
          bi = int32_t(j);
        }
      }
      check(fast.argmin[k] == bi, "argmin mismatch under tie-break");
      brute_sum += best;
      brute_grad[size_t(bi)] =
          brute_grad[size_t(bi)] + (sources[size_t(bi)] - targets[k]) * (2.0 / double(nt));
    }
    check(fast.value == brute_sum / double(nt), "chamfer value not bit-exact");
    for (size_t j = 0; j < sources.size(); ++j)
      check(fast.grad_sources[j].x == brute_grad[j].x &&
                fast.grad_sources[j].y == brute_grad[j].y &&
                fast.grad_sources[j].z == brute_grad[j].z,
            "chamfer gradient not bit-exact");
  }

  // IoU3D vs a deterministic low-discrepancy volume oracle, 1e6 points.
  auto halton = [](int index, int base) {
    double f = 1.0, r = 0.0;
    for (int i = index; i > 0; i /= base) {
      f /= base;
      r += f * (i % base);
    }
    return r;
  };
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    pose::OrientedBox a{{rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3)},
                        {rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)},
                        rng.uniform(-3.14, 3.14)};
    pose::OrientedBox b{{a.center.x + rng.uniform(-0.5, 0.5), a.center.y + rng.uniform(-0.3, 0.3),
                         a.center.z + rng.uniform(-0.5, 0.5)},
                        {rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)},
                        rng.uniform(-3.14, 3.14)};
    Mat3 rot = Mat3::yaw(a.yaw);
    int hits = 0;
    const int n = 1000000;
    for (int i = 1; i <= n; ++i) {
      Vec3 local{(halton(i, 2) - 0.5) * a.size.x, (halton(i, 3) - 0.5) * a.size.y,
                 (halton(i, 5) - 0.5) * a.size.z};
      if (pose::point_in_obb(b, rot * local + a.center)) hits++;
    }
    double inter = a.volume() * double(hits) / double(n);
    double oracle = inter / (a.volume() + b.volume() - inter);
    worst = std::max(worst, std::abs(pose::iou3d(a, b) - oracle));
  }
  check(worst < 1e-3, "IoU3D differs from the volume oracle by more than 1e-3");
  out << "iou worst " << worst;
}

// ---------------------------------------------------------------------------
// Geometry (marching cubes sphere, self metrics)
// ---------------------------------------------------------------------------

void crit_geometry(std::ostringstream& out) {
  const int res = 64;
  const double radius = 0.5;
  Vec3 origin{-0.8, -0.8, -0.8};
  double spacing = 1.6 / (res - 1);
  std::vector<float> field(size_t(res) * res * res);
  for (int z = 0; z < res; ++z)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        Vec3 p = origin + Vec3{double(x), double(y), double(z)} * spacing;
        field[size_t((z * res + y) * res + x)] = float(0.5 + (radius - p.norm()));
      }
  shape::Mesh mesh = shape::marching_cubes(field, res, 0.5, origin, spacing);
  check(!mesh.empty(), "sphere mesh empty");
  check(shape::mesh_is_watertight(mesh), "sphere mesh not watertight");
  double worst = 0;
  for (const auto& v : mesh.vertices)
    worst = std::max(worst, std::abs(Vec3{v[0], v[1], v[2]}.norm() - radius));
  check(worst < 2 * spacing, "sphere vertex radius error above 2 cells");

  Rng ra(1), rb(1);
  std::vector<Vec3> pa = shape::surface_sample(mesh, 10000, ra);
  std::vector<Vec3> pb = shape::surface_sample(mesh, 10000, rb);
  check(shape::chamfer_distance(pa, pb) == 0.0, "self chamfer not zero");
  check(shape::f_score(pa, pb, 0.05) == 100.0, "self f-score not 100");
  out << "verts " << mesh.vertices.size() << ", radius err " << worst;
}

// ---------------------------------------------------------------------------
// Sampler consistency
// ---------------------------------------------------------------------------

void crit_sampler(std::ostringstream& out) {
  diff::NoiseSchedule s = diff::make_linear_schedule(200, 1e-4, 0.02);
  const double mu = 0.3, sigma2 = 0.2;
  diff::EpsilonFn fn = [&](const ad::Tensorf& x, int t, bool) {
    double abar = s.alpha_bar(t);
    ad::Tensorf e(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
      double denom = abar * sigma2 + 1.0 - abar;
      double x0 = (std::sqrt(abar) * sigma2 * x[i] + (1.0 - abar) * mu) / denom;
      e[i] = float((x[i] - std::sqrt(abar) * x0) / std::sqrt(1.0 - abar));
    }
    return e;
  };
  ad::Tensorf xT({7});
  Rng init(5);
  for (int i = 0; i < 7; ++i) xT[i] = float(init.normal());

  Rng r1(42), r2(42);
  ad::Tensorf a = diff::ddim_sample(fn, xT, s, 64, 0.0, 1.0, r1);
  ad::Tensorf b = diff::ddim_sample(fn, xT, s, 64, 0.0, 1.0, r2);
  for (int i = 0; i < 7; ++i) check(a[i] == b[i], "ddim eta=0 not bit-deterministic");

  Rng rd(911), ri(911);
  ad::Tensorf x_ddpm = xT;
  for (int t = s.T; t >= 1; --t) {
    ad::Tensorf noise({7});
    if (t > 1)
      for (int i = 0; i < 7; ++i) noise[i] = float(rd.normal());
    x_ddpm = diff::ddpm_step(x_ddpm, fn(x_ddpm, t, true), t, s, noise);
  }
  ad::Tensorf x_ddim = diff::ddim_sample(fn, xT, s, s.T, 1.0, 1.0, ri);
  double worst = 0;
  for (int i = 0; i < 7; ++i) worst = std::max(worst, std::abs(double(x_ddim[i] - x_ddpm[i])));
  check(worst < 1e-5, "ddim(T, eta=1) differs from ddpm chain beyond 1e-5");
  out << "max diff " << worst;
}

// ---------------------------------------------------------------------------
// Toy overfit, ablations, unconditional synthesis
// ---------------------------------------------------------------------------

cfg::RunConfig overfit_config() {
  cfg::RunConfig c;
  c.seed = 1234;
  c.data.scenes = 64;
  c.model.pose.width = 96;
  c.model.shape.width = 64;
  c.model.latent.width = 64;
  c.model.latent_dim = 32;
  c.diffusion.drop_p = 0.2;
  c.train.lr = 3e-4;
  c.train.steps_decoder = 1200;
  c.train.steps_base = 2200;
  c.train.steps_joint = 250;
  c.sample.mesh_res = 36;
  c.eval.mesh_res = 36;
  return c;
}

void crit_overfit(std::ostringstream& out) {
  fs::create_directories(g_workdir);
  cfg::RunConfig c = overfit_config();
  std::string ds = g_workdir + "/overfit_ds";
  std::string run = g_workdir + "/overfit_run";
  std::string pred = g_workdir + "/overfit_pred";

  auto t0 = Clock::now();
  pipeline::build_dataset(c, ds, true);
  double build_secs = std::chrono::duration<double>(Clock::now() - t0).count();
  check(build_secs < 60.0, "64-scene dataset build above 60 s");

  auto t1 = Clock::now();
  pipeline::train(c, ds, run, {});
  double train_secs = std::chrono::duration<double>(Clock::now() - t1).count();
  check(train_secs < 1800.0, "training beyond the 30-minute desk budget");

  // Loss regression: smoothed base loss after 2000 steps below half the
  // initial value (first logged rows).
  {
    std::ifstream mf(run + "/metrics.csv");
    std::string line;
    std::vector<double> base_losses;
    while (std::getline(mf, line)) {
      std::istringstream ss(line);
      std::string stage;
      std::getline(ss, stage, ',');
      if (stage != "base") continue;
      std::string step_s, lp, ls, ll, la;
      std::getline(ss, step_s, ',');
      std::getline(ss, lp, ',');
      std::getline(ss, ls, ',');
      std::getline(ss, ll, ',');
      std::getline(ss, la, ',');
      base_losses.push_back(std::stod(lp) + std::stod(ls) + std::stod(ll));
    }
    check(base_losses.size() >= 10, "missing training log");
    double head = 0, tail = 0;
    for (int i = 0; i < 3; ++i) head += base_losses[size_t(i)] / 3;
    for (int i = 0; i < 3; ++i) tail += base_losses[base_losses.size() - 1 - size_t(i)] / 3;
    check(tail < 0.5 * head, "smoothed loss did not halve over training");
  }

  pipeline::SampleFlags flags;
  flags.seed = 7;
  pipeline::sample_run(c, run, ds, pred, flags);

  // Sampled normalized poses stay in a sane range.
  int64_t in_range = 0, total = 0;
  for (int si = 0; si < c.data.scenes; ++si) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%04d", si);
    std::ifstream rf(fs::path(pred) / buf / "report.json");
    nlohmann::json rep = nlohmann::json::parse(rf);
    for (const auto& jo : rep["objects"])
      for (double v : jo["pose_norm"]) {
        total++;
        if (std::abs(v) <= 1.5) in_range++;
      }
  }
  check(double(in_range) / double(total) >= 0.99, "pose coordinates left [-1.5, 1.5]");

  pipeline::EvalSummary s = pipeline::evaluate_run(c, pred, ds, g_workdir + "/overfit_eval",
                                                   0.15, 0.05);
  out << "IoU " << s.mean_iou3d << ", mAP15 " << s.map15 << ", L_align " << s.l_align
      << ", CDx1e3 " << s.mean_cd_x1000 << ", F " << s.mean_fscore << ", train " << int(train_secs)
      << "s";
  check(s.mean_iou3d > 0.5, "mean IoU3D below 0.5");
  check(s.map15 > 0.9, "AP@15 below 0.9");
  check(s.l_align < 0.05, "alignment metric above 0.05 m^2");
}

cfg::RunConfig ablation_config(uint64_t seed) {
  cfg::RunConfig c;
  c.seed = seed;
  c.data.scenes = 256;
  c.model.pose.width = 64;
  c.model.pose.heads = 8;
  c.model.shape.width = 48;
  c.model.latent.width = 48;
  c.model.latent_dim = 16;
  c.diffusion.drop_p = 0.2;
  c.train.lr = 3e-4;
  c.train.steps_decoder = 600;
  c.train.steps_base = 1000;
  c.train.steps_joint = 150;
  c.train.batch_scenes = 4;
  c.sample.mesh_res = 24;
  c.eval.mesh_res = 24;
  c.eval.surface_samples = 800;
  c.eval.align_m = 250;
  return c;
}

void crit_ablations(std::ostringstream& out) {
  fs::create_directories(g_workdir);
  const uint64_t seeds[3] = {11, 12, 13};
  double ap_full = 0, ap_noisa = 0, ap_reg = 0;
  double al_full = 0, al_nojoint = 0;

  for (uint64_t seed : seeds) {
    cfg::RunConfig c = ablation_config(seed);
    std::string tag = g_workdir + "/abl_s" + std::to_string(seed);
    std::string train_ds = tag + "_train";
    cfg::RunConfig val_cfg = c;
    val_cfg.data.scenes = 64;
    val_cfg.data.split = "val";
    std::string val_ds = tag + "_val";
    pipeline::build_dataset(c, train_ds, true);
    pipeline::build_dataset(val_cfg, val_ds, true);

    struct Variant {
      const char* name;
      pipeline::TrainFlags flags;
    };
    const Variant variants[4] = {{"full", {}},
                                 {"noisa", {true, false, false}},
                                 {"reg", {false, false, true}},
                                 {"nojoint", {false, true, false}}};
    for (const Variant& v : variants) {
      std::string run = tag + "_run_" + v.name;
      std::string pred = tag + "_pred_" + v.name;
      pipeline::train(c, train_ds, run, v.flags);
      pipeline::SampleFlags sf;
      sf.seed = int64_t(seed);
      pipeline::sample_run(val_cfg, run, val_ds, pred, sf);
      pipeline::EvalSummary s = pipeline::evaluate_run(val_cfg, pred, val_ds,
                                                       tag + "_eval_" + v.name, 0.15, 0.05);
      std::printf("  [ablation] seed %llu %-8s mAP15 %.3f IoU %.3f L_align %.4f\n",
                  (unsigned long long)seed, v.name, s.map15, s.mean_iou3d, s.l_align);
      std::fflush(stdout);
      if (std::strcmp(v.name, "full") == 0) {
        ap_full += s.map15 / 3;
        al_full += s.l_align / 3;
      } else if (std::strcmp(v.name, "noisa") == 0) {
        ap_noisa += s.map15 / 3;
      } else if (std::strcmp(v.name, "reg") == 0) {
        ap_reg += s.map15 / 3;
      } else {
        al_nojoint += s.l_align / 3;
      }
    }
  }
  out << "mAP15 full " << ap_full << " vs no-isa " << ap_noisa << " vs regression " << ap_reg
      << "; L_align full " << al_full << " vs no-joint " << al_nojoint;
  check(ap_full > ap_noisa, "full model does not beat --no-isa in AP@15");
  check(ap_full > ap_reg, "full model does not beat --regression-1step in AP@15");
  check(al_full < al_nojoint, "joint training does not beat --no-joint in L_align");
}

void crit_unconditional(std::ostringstream& out) {
  cfg::RunConfig c = overfit_config();
  std::string run = g_workdir + "/overfit_run";
  if (!fs::exists(run + "/checkpoint.sde1")) {
    // Standalone invocation: train the overfit model first.
    std::string ds = g_workdir + "/overfit_ds";
    pipeline::build_dataset(c, ds, true);
    pipeline::train(c, ds, run, {});
  }
  c.sample.unconditional_draws = 100;
  pipeline::SampleFlags flags;
  flags.unconditional = true;
  flags.seed = 99;
  std::string pred = g_workdir + "/uncond_pred";
  pipeline::sample_run(c, run, "", pred, flags);
  int non_empty = 0;
  for (int d = 0; d < 100; ++d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "draw_%04d", d);
    std::ifstream rf(fs::path(pred) / buf / "report.json");
    nlohmann::json rep = nlohmann::json::parse(rf);
    if (!rep["objects"][0]["empty_mesh"].get<bool>()) non_empty++;
  }
  out << non_empty << "/100 non-empty";
  check(non_empty >= 90, "fewer than 90% of unconditional draws decode to meshes");
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<Criterion> all = {
      {"schedule", crit_schedule, 1.0},
      {"gradients", crit_gradients, 300.0},
      {"oracles", crit_oracles, 120.0},
      {"geometry", crit_geometry, 30.0},
      {"sampler", crit_sampler, 60.0},
      {"overfit", crit_overfit, 0},
      {"ablations", crit_ablations, 0},
      {"unconditional", crit_unconditional, 0},
  };
  std::vector<std::string> wanted;
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg.rfind("--workdir=", 0) == 0)
      g_workdir = arg.substr(10);
    else
      wanted.push_back(arg);
  }
  for (const Criterion& c : all) {
    if (!wanted.empty() &&
        std::find(wanted.begin(), wanted.end(), c.name) == wanted.end())
      continue;
    run_criterion(c);
  }
  if (g_failures) std::printf("%d criterion(s) FAILED\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
