#include "scenediff/align.hpp"

#include <cstring>
#include <memory>
#include <fstream>

#include "scenediff/kdtree.hpp"

namespace sde::align {

using ad::Shape;
using ad::Tensor;
using ad::Var;

std::vector<Vec3> backproject_depth(const DepthObservation& obs, int instance_id) {
  std::vector<Vec3> out;
  for (int y = 0; y < obs.height; ++y)
    for (int x = 0; x < obs.width; ++x) {
      if (obs.id_at(x, y) != instance_id) continue;
      float d = obs.depth_at(x, y);
      if (d <= 0) continue;  // sentinel
      out.push_back(pose::backproject_pixel(obs.camera, x + 0.5, y + 0.5, d));
    }
  require(!out.empty(), ErrorCode::invalid_argument,
          "backproject_depth: instance " + std::to_string(instance_id) +
              " has no mask pixels in the observation");
  return out;
}

std::vector<Vec3> transform_shape_samples(const shape::GaussianScaffold& scaffold,
                                          const pose::ObjectPose& pose, const Vec2& box2d_center,
                                          const pose::Camera& cam, int m, Rng& rng) {
  std::vector<Vec3> local = shape::sample_points(scaffold, m, rng);
  Transform tf = pose::pose_to_rigid_transform(pose, box2d_center, cam);
  for (Vec3& p : local) {
    p = Vec3{p.x * pose.size.x, p.y * pose.size.y, p.z * pose.size.z};
    p = tf.apply(p);
  }
  return local;
}

OneSidedChamfer one_sided_chamfer(const std::vector<Vec3>& targets,
                                  const std::vector<Vec3>& sources) {
  require(!targets.empty() && !sources.empty(), ErrorCode::invalid_argument,
          "one_sided_chamfer: empty point set");
  OneSidedChamfer res;
  res.grad_sources.assign(sources.size(), Vec3{});
  res.argmin.resize(targets.size());
  KdTree3 tree(sources);
  double k = double(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    KdTree3::Hit hit = tree.nearest(targets[i]);
    res.value += hit.d2;
    res.argmin[i] = hit.idx;
    Vec3 diff = (sources[size_t(hit.idx)] - targets[i]) * (2.0 / k);
    res.grad_sources[size_t(hit.idx)] = res.grad_sources[size_t(hit.idx)] + diff;
  }
  res.value /= k;
  return res;
}

template <typename S>
Var one_sided_chamfer_node(ad::Tape<S>& t, Var sources, const std::vector<Vec3>& targets) {
  const Tensor<S>& sv = t.value(sources);
  require(sv.rank() == 2 && sv.extent(1) == 3, ErrorCode::shape_mismatch,
          "chamfer node: sources must be [n,3], got " + ad::shape_str(sv.shape()));
  std::vector<Vec3> pts(size_t(sv.extent(0)));
  for (size_t i = 0; i < pts.size(); ++i)
    pts[i] = {double(sv[int64_t(i) * 3]), double(sv[int64_t(i) * 3 + 1]),
              double(sv[int64_t(i) * 3 + 2])};
  OneSidedChamfer res = one_sided_chamfer(targets, pts);
  bool ng = t.wants_grad(sources);
  Var v = t.emplace(Tensor<S>::scalar(S(res.value)), ng, "one_sided_chamfer");
  if (ng) {
    std::vector<Vec3> grads = std::move(res.grad_sources);
    t.set_backward(v, [v, sources, grads](ad::Tape<S>& tp) {
      S gout = tp.grad(v)[0];
      Tensor<S>& gs = tp.grad_acc(sources);
      for (size_t j = 0; j < grads.size(); ++j) {
        gs[int64_t(j) * 3] += S(grads[j].x) * gout;
        gs[int64_t(j) * 3 + 1] += S(grads[j].y) * gout;
        gs[int64_t(j) * 3 + 2] += S(grads[j].z) * gout;
      }
    });
  }
  return v;
}

namespace {

struct PolarTrace {
  std::vector<Mat3> iterates;  // X_0 .. X_k (input through convergence)
};

Mat3 polar_newton(const Mat3& a, PolarTrace* trace) {
  Mat3 x = a;
  if (std::abs(x.det()) < 1e-9)
    for (int i = 0; i < 3; ++i) x(i, i) += 1e-6;
  if (trace) trace->iterates.push_back(x);
  for (int it = 0; it < 40; ++it) {
    Mat3 inv_t = x.inverse().transposed();
    Mat3 next;
    double delta = 0;
    for (int i = 0; i < 9; ++i) {
      next.m[size_t(i)] = 0.5 * (x.m[size_t(i)] + inv_t.m[size_t(i)]);
      delta = std::max(delta, std::abs(next.m[size_t(i)] - x.m[size_t(i)]));
    }
    x = next;
    if (trace) trace->iterates.push_back(x);
    if (delta < 1e-14) break;
  }
  return x;
}

}  // namespace

template <typename S>
Var polar_project_rows(ad::Tape<S>& t, Var raw) {
  const Tensor<S>& rv = t.value(raw);
  require(rv.rank() == 2 && rv.extent(1) == 9, ErrorCode::shape_mismatch,
          "polar node: expected [g,9], got " + ad::shape_str(rv.shape()));
  int64_t g = rv.extent(0);
  Tensor<S> out(rv.shape());
  auto traces = std::make_shared<std::vector<PolarTrace>>(size_t(g));
  for (int64_t j = 0; j < g; ++j) {
    Mat3 a;
    for (int i = 0; i < 9; ++i) a.m[size_t(i)] = double(rv[j * 9 + i]);
    Mat3 u = polar_newton(a, &(*traces)[size_t(j)]);
    for (int i = 0; i < 9; ++i) out[j * 9 + i] = S(u.m[size_t(i)]);
  }
  bool ng = t.wants_grad(raw);
  Var v = t.emplace(std::move(out), ng, "polar_project");
  if (ng) {
    t.set_backward(v, [v, raw, g, traces](ad::Tape<S>& tp) {
      const Tensor<S>& gout = tp.grad(v);
      Tensor<S>& gin = tp.grad_acc(raw);
      for (int64_t j = 0; j < g; ++j) {
        Mat3 bar;
        for (int i = 0; i < 9; ++i) bar.m[size_t(i)] = double(gout[j * 9 + i]);
        const auto& iters = (*traces)[size_t(j)].iterates;
        // Reverse the Newton steps: X_{k+1} = (X_k + X_k^{-T}) / 2, so
        // Xbar_k = (Gbar - X^{-T} Gbar^T X^{-T}) / 2 with G = Xbar_{k+1}.
        for (size_t k = iters.size() - 1; k-- > 0;) {
          Mat3 inv_t = iters[k].inverse().transposed();
          Mat3 corr = inv_t * bar.transposed() * inv_t;
          for (int i = 0; i < 9; ++i)
            bar.m[size_t(i)] = 0.5 * (bar.m[size_t(i)] - corr.m[size_t(i)]);
        }
        for (int i = 0; i < 9; ++i) gin[j * 9 + i] += S(bar.m[size_t(i)]);
      }
    });
  }
  return v;
}

template <typename S>
Var alignment_term_tape(ad::Tape<S>& t, Var pose_norm, Var scaffold_raw, const Tensor<S>& z,
                        const std::vector<Vec3>& targets, const pose::PoseNormalizer& norm,
                        const Vec2& box2d_center, const pose::Camera& cam) {
  require(t.value(pose_norm).numel() == 7, ErrorCode::shape_mismatch,
          "alignment term: pose must have 7 entries");
  require(z.rank() == 3 && z.extent(2) == 3, ErrorCode::shape_mismatch,
          "alignment term: z must be [g,m,3]");
  const Shape raw_shape = t.value(scaffold_raw).shape();
  require(raw_shape.size() == 2 && raw_shape[1] == shape::kParamsPerGaussian,
          ErrorCode::shape_mismatch, "alignment term: scaffold must be [g,16]");
  int64_t g = raw_shape[0];
  require(z.extent(0) == g, ErrorCode::shape_mismatch, "alignment term: z/g mismatch");
  int64_t m = z.extent(1);

  Var p7 = reshape(t, pose_norm, {7, 1});
  auto coord = [&](int i) { return slice(t, p7, 0, i, 1); };  // [1,1]
  constexpr double kFloor = 1e-3;
  Var d = clamp_min(t, affine(t, coord(2), norm.d_max, norm.d_mu), kFloor);
  Var theta = affine(t, coord(6), norm.yaw_max, norm.yaw_mu);
  Var size3 =
      reshape(t, clamp_min(t, affine(t, slice(t, p7, 0, 3, 3), norm.s_max, norm.s_mu), kFloor),
              {3});

  // Viewing ray through box center + delta, normalized, scaled by distance.
  Var rx = affine(t, coord(0), norm.image_w / cam.fx, (box2d_center.x - cam.cx) / cam.fx);
  Var ry = affine(t, coord(1), norm.image_h / cam.fy, (box2d_center.y - cam.cy) / cam.fy);
  Var n2 = add(t, add(t, mul(t, rx, rx), mul(t, ry, ry)), t.constant_scalar(S(1)));
  Var d_over_n = mul(t, d, reciprocal(t, sqrt_op(t, n2)));
  Var cx_ = mul(t, d_over_n, rx);
  Var cy_ = mul(t, d_over_n, ry);
  Var cz_ = d_over_n;
  Var center = reshape(t, concat(t, {cx_, cy_, cz_}, 0), {3});

  // Scaffold: mu, polar-projected rotations, softplus scales.
  Var mu = slice(t, scaffold_raw, 1, 0, 3);                              // [g,3]
  Var rot = polar_project_rows(t, slice(t, scaffold_raw, 1, 3, 9));      // [g,9]
  Var rotT = transpose(t, reshape(t, rot, {g, 3, 3}), {0, 2, 1});  // [g,3,3] U^T
  // Floor keeps the sqrt adjoint finite when a wild prediction underflows
  // the softplus to zero.
  Var sqrt_lam =
      sqrt_op(t, clamp_min(t, softplus(t, slice(t, scaffold_raw, 1, 12, 3)), 1e-10));  // [g,3]

  Var ones_gm = t.constant(Tensor<S>({g, m, 1}, S(1)));
  Var lam_rows = matmul(t, ones_gm, reshape(t, sqrt_lam, {g, 1, 3}));  // [g,m,3]
  Var scaled_z = mul(t, t.constant(z), lam_rows);
  Var local = add(t, matmul(t, scaled_z, rotT),
                  matmul(t, ones_gm, reshape(t, mu, {g, 1, 3})));  // [g,m,3]
  Var flat = reshape(t, local, {g * m, 3});
  Var sized = mul(t, flat, size3);

  // Yaw rotation about +y, applied as row-vectors times R^T.
  Var c = cos_op(t, theta);
  Var s = sin_op(t, theta);
  Var zero = t.constant(Tensor<S>({1, 1}, S(0)));
  Var one = t.constant(Tensor<S>({1, 1}, S(1)));
  Var neg_s = affine(t, s, -1.0, 0.0);
  Var rotT_pose = reshape(t, concat(t, {c, zero, neg_s, zero, one, zero, s, zero, c}, 0), {3, 3});
  Var cam_pts = add(t, matmul(t, sized, rotT_pose), center);
  return one_sided_chamfer_node(t, cam_pts, targets);
}

double surface_alignment_loss(const std::vector<shape::GaussianScaffold>& scaffolds,
                              const std::vector<pose::ObjectPose>& poses,
                              const std::vector<Vec2>& box_centers,
                              const std::vector<int>& instance_ids, const DepthObservation& obs,
                              int m, Rng& rng) {
  require(scaffolds.size() == poses.size() && poses.size() == box_centers.size() &&
              poses.size() == instance_ids.size(),
          ErrorCode::invalid_argument, "surface_alignment_loss: input count mismatch");
  double sum = 0;
  int visible = 0;
  for (size_t i = 0; i < poses.size(); ++i) {
    std::vector<Vec3> targets;
    try {
      targets = backproject_depth(obs, instance_ids[i]);
    } catch (const Error&) {
      continue;  // no valid depth pixels: masked out of the mean
    }
    std::vector<Vec3> sources =
        transform_shape_samples(scaffolds[i], poses[i], box_centers[i], obs.camera, m, rng);
    sum += one_sided_chamfer(targets, sources).value;
    visible++;
  }
  require(visible >= 1, ErrorCode::invalid_argument,
          "surface_alignment_loss: no visible objects");
  return sum / double(visible);
}

// ---------------------------------------------------------------------------
// DPT1 / INS1 binary grids
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

void write_depth(const std::string& path, const DepthObservation& obs) {
  std::ofstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f.write("DPT1", 4);
  put(f, uint32_t(obs.width));
  put(f, uint32_t(obs.height));
  f.write(reinterpret_cast<const char*>(obs.depth.data()), std::streamsize(obs.depth.size() * 4));
}

void write_instances(const std::string& path, const DepthObservation& obs) {
  std::ofstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f.write("INS1", 4);
  put(f, uint32_t(obs.width));
  put(f, uint32_t(obs.height));
  f.write(reinterpret_cast<const char*>(obs.instance.data()),
          std::streamsize(obs.instance.size() * 2));
}

void read_depth(const std::string& path, DepthObservation& obs) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  require(std::memcmp(magic, "DPT1", 4) == 0, ErrorCode::io, "bad DPT1 magic in " + path);
  uint32_t w, h;
  f.read(reinterpret_cast<char*>(&w), 4);
  f.read(reinterpret_cast<char*>(&h), 4);
  obs.width = int(w);
  obs.height = int(h);
  obs.depth.resize(size_t(w) * h);
  f.read(reinterpret_cast<char*>(obs.depth.data()), std::streamsize(obs.depth.size() * 4));
  require(bool(f), ErrorCode::io, "truncated DPT1 file " + path);
}

void read_instances(const std::string& path, DepthObservation& obs) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  require(std::memcmp(magic, "INS1", 4) == 0, ErrorCode::io, "bad INS1 magic in " + path);
  uint32_t w, h;
  f.read(reinterpret_cast<char*>(&w), 4);
  f.read(reinterpret_cast<char*>(&h), 4);
  require(int(w) == obs.width && int(h) == obs.height, ErrorCode::io,
          "INS1 extents do not match the depth grid");
  obs.instance.resize(size_t(w) * h);
  f.read(reinterpret_cast<char*>(obs.instance.data()),
         std::streamsize(obs.instance.size() * 2));
  require(bool(f), ErrorCode::io, "truncated INS1 file " + path);
}

template Var one_sided_chamfer_node<float>(ad::Tape<float>&, Var, const std::vector<Vec3>&);
template Var one_sided_chamfer_node<double>(ad::Tape<double>&, Var, const std::vector<Vec3>&);
template Var polar_project_rows<float>(ad::Tape<float>&, Var);
template Var polar_project_rows<double>(ad::Tape<double>&, Var);
template Var alignment_term_tape<float>(ad::Tape<float>&, Var, Var, const Tensor<float>&,
                                        const std::vector<Vec3>&, const pose::PoseNormalizer&,
                                        const Vec2&, const pose::Camera&);
template Var alignment_term_tape<double>(ad::Tape<double>&, Var, Var, const Tensor<double>&,
                                         const std::vector<Vec3>&, const pose::PoseNormalizer&,
                                         const Vec2&, const pose::Camera&);

}  // namespace sde::align
