#include "scenediff/synth.hpp"

#include <cmath>

#include "scenediff/parallel.hpp"

namespace sde::synth {

namespace {

struct Part {
  Vec3 center;
  Vec3 half;  // ellipsoid semi-axes at the iso surface
};

// Canonical parts per class inside [-0.5, 0.5]^3; +y is "down" (camera
// convention), so legs sit at positive y.
std::vector<Part> class_parts(int class_id, Rng& rng) {
  auto J = [&](double v, double jitter = 0.18) { return v * rng.uniform(1.0 - jitter, 1.0 + jitter); };
  std::vector<Part> p;
  switch (class_id) {
    case 0:  // table: slab on four legs
      p.push_back({{0, -0.32, 0}, {0.48, J(0.05), 0.40}});
      for (int ix = -1; ix <= 1; ix += 2)
        for (int iz = -1; iz <= 1; iz += 2)
          p.push_back({{0.38 * ix, 0.12, 0.30 * iz}, {J(0.05), 0.36, J(0.05)}});
      break;
    case 1:  // chair: seat, backrest at -z, four legs
      p.push_back({{0, 0.02, 0}, {0.40, J(0.06), 0.40}});
      p.push_back({{0, -0.30, -0.40}, {0.40, 0.22, J(0.07)}});
      for (int ix = -1; ix <= 1; ix += 2)
        for (int iz = -1; iz <= 1; iz += 2)
          p.push_back({{0.32 * ix, 0.30, 0.32 * iz}, {J(0.05), 0.22, J(0.05)}});
      break;
    case 2:  // sofa: base, backrest at -z, armrests
      p.push_back({{0, 0.15, 0.05}, {0.48, J(0.16), 0.38}});
      p.push_back({{0, -0.18, -0.38}, {0.48, 0.28, J(0.10)}});
      p.push_back({{-0.42, -0.05, 0}, {J(0.07), 0.22, 0.40}});
      p.push_back({{0.42, -0.05, 0}, {J(0.07), 0.22, 0.40}});
      break;
    case 3:  // bed: mattress, headboard at -z, two pillows
      p.push_back({{0, 0.12, 0.06}, {0.47, J(0.14), 0.42}});
      p.push_back({{0, -0.18, -0.46}, {0.47, 0.28, J(0.05)}});
      p.push_back({{-0.22, -0.06, -0.30}, {J(0.16), 0.06, J(0.10)}});
      p.push_back({{0.22, -0.06, -0.30}, {J(0.16), 0.06, J(0.10)}});
      break;
    case 4:  // cabinet: two stacked boxes, plinth, top board
      p.push_back({{0, -0.22, 0}, {0.44, J(0.22), 0.40}});
      p.push_back({{0, 0.22, 0}, {0.44, J(0.22), 0.40}});
      p.push_back({{0, 0.47, 0}, {0.40, J(0.04), 0.36}});
      p.push_back({{0, -0.47, 0}, {0.42, J(0.04), 0.38}});
      break;
    case 5:  // lamp: base, pole, shade, bulb (rotationally symmetric)
      p.push_back({{0, 0.44, 0}, {J(0.22), 0.05, J(0.22)}});
      p.push_back({{0, 0.05, 0}, {J(0.05), 0.42, J(0.05)}});
      p.push_back({{0, -0.36, 0}, {J(0.30), 0.13, J(0.30)}});
      p.push_back({{0, -0.25, 0}, {0.08, J(0.08), 0.08}});
      break;
    case 6:  // desk: top, two side panels, back panel at -z
      p.push_back({{0, -0.30, 0}, {0.48, J(0.05), 0.38}});
      p.push_back({{-0.42, 0.10, 0}, {J(0.05), 0.36, 0.34}});
      p.push_back({{0.42, 0.10, 0}, {J(0.05), 0.36, 0.34}});
      p.push_back({{0, 0.02, -0.30}, {0.40, 0.26, J(0.05)}});
      break;
    default:  // monitor: panel at -z top, neck, foot
      p.push_back({{0, -0.18, -0.10}, {0.46, 0.30, J(0.05)}});
      p.push_back({{0, 0.22, 0.02}, {J(0.06), 0.16, J(0.06)}});
      p.push_back({{0, 0.44, 0.06}, {0.28, J(0.05), 0.22}});
      p.push_back({{0, -0.18, -0.16}, {0.34, 0.22, J(0.03)}});
      break;
  }
  return p;
}

}  // namespace

int template_part_count(int class_id) {
  Rng rng(1);
  return int(class_parts(class_id, rng).size());
}

shape::GaussianScaffold make_template(const SynthConfig& cfg, int class_id, int variant) {
  require(class_id >= 0 && class_id < cfg.class_count, ErrorCode::invalid_argument,
          "make_template: class out of range");
  Rng rng(mix_seed(cfg.seed, uint64_t(cfg.split) * 131 + uint64_t(class_id), uint64_t(variant)));
  std::vector<Part> parts = class_parts(class_id, rng);
  // Clamp each part into the canonical unit box so the pose size is a true
  // bound on the shape (the depth/IoU invariants rely on it).
  for (Part& p : parts) {
    double* ctr[3] = {&p.center.x, &p.center.y, &p.center.z};
    double* hlf[3] = {&p.half.x, &p.half.y, &p.half.z};
    for (int k = 0; k < 3; ++k) {
      *ctr[k] = std::clamp(*ctr[k], -0.47, 0.47);
      *hlf[k] = std::clamp(*hlf[k], 0.015, 0.5 - std::abs(*ctr[k]));
    }
  }
  const double rho = shape::iso_radius_mahalanobis(0.3);  // matches the decoder default
  shape::GaussianScaffold s;
  for (int j = 0; j < cfg.g; ++j) {
    const Part& part = parts[size_t(j) % parts.size()];
    shape::GaussianComponent c;
    c.mu = part.center;
    c.lambda = {std::pow(part.half.x / rho, 2), std::pow(part.half.y / rho, 2),
                std::pow(part.half.z / rho, 2)};
    c.pi = 0.0;
    s.comps.push_back(c);
  }
  return s;
}

bool gt_occupied(const shape::GaussianScaffold& s, const Vec3& x, double iso_rho) {
  for (const auto& c : s.comps) {
    Vec3 local = c.rot.transposed() * (x - c.mu);
    double rho2 = local.x * local.x / c.lambda.x + local.y * local.y / c.lambda.y +
                  local.z * local.z / c.lambda.z;
    if (rho2 <= iso_rho * iso_rho) return true;
  }
  return false;
}

std::vector<float> gt_occupancy_grid(const shape::GaussianScaffold& s, int res, const Vec3& origin,
                                     double spacing, double iso_rho) {
  std::vector<float> field(size_t(res) * res * res);
  parallel_for(res, [&](int64_t z0, int64_t z1) {
    for (int64_t z = z0; z < z1; ++z)
      for (int64_t y = 0; y < res; ++y)
        for (int64_t x = 0; x < res; ++x) {
          Vec3 p = origin + Vec3{double(x), double(y), double(z)} * spacing;
          field[size_t((z * res + y) * res + x)] = gt_occupied(s, p, iso_rho) ? 1.0f : 0.0f;
        }
  });
  return field;
}

ProjectedBox project_box(const pose::Camera& cam, const pose::OrientedBox& box) {
  ProjectedBox out;
  Mat3 rot = Mat3::yaw(box.yaw);
  double lo_u = 1e30, lo_v = 1e30, hi_u = -1e30, hi_v = -1e30;
  for (int c = 0; c < 8; ++c) {
    Vec3 corner{(c & 1 ? 0.5 : -0.5) * box.size.x, (c & 2 ? 0.5 : -0.5) * box.size.y,
                (c & 4 ? 0.5 : -0.5) * box.size.z};
    Vec3 p = rot * corner + box.center;
    if (p.z < 0.05) return out;  // corner behind the camera: treat as offscreen
    Vec2 uv = pose::project_point(cam, p);
    lo_u = std::min(lo_u, uv.x);
    hi_u = std::max(hi_u, uv.x);
    lo_v = std::min(lo_v, uv.y);
    hi_v = std::max(hi_v, uv.y);
  }
  if (hi_u <= 0 || hi_v <= 0 || lo_u >= cam.width || lo_v >= cam.height) return out;
  out.box = {std::max(lo_u, 0.0), std::max(lo_v, 0.0), std::min(hi_u, double(cam.width)),
             std::min(hi_v, double(cam.height))};
  Vec2 center_uv = pose::project_point(cam, box.center);
  out.delta = {center_uv.x - out.box.cx(), center_uv.y - out.box.cy()};
  out.onscreen = true;
  return out;
}

namespace {

struct Placement {
  Vec3 center;
  Vec3 size;
  double yaw;
  int class_id;
};

Vec3 base_size(int class_id, Rng& rng) {
  static const double sizes[8][3] = {{1.4, 0.75, 0.9}, {0.5, 0.95, 0.55}, {1.9, 0.85, 0.95},
                                     {1.6, 0.6, 2.1},  {0.9, 1.4, 0.5},   {0.35, 1.3, 0.35},
                                     {1.3, 0.78, 0.7}, {0.55, 0.45, 0.22}};
  double k = rng.uniform(0.8, 1.25);
  int c = class_id % 8;
  return {sizes[c][0] * k, sizes[c][1] * k, sizes[c][2] * k};
}

// Sample a floor-standing placement inside the camera frustum.
Placement sample_single(Rng& rng, const SynthConfig& cfg, int class_id) {
  Placement p;
  p.class_id = class_id;
  p.size = base_size(class_id, rng);
  for (int k = 0; k < 3; ++k) {
    double* v = k == 0 ? &p.size.x : (k == 1 ? &p.size.y : &p.size.z);
    *v = std::clamp(*v, cfg.s_min, cfg.s_max);
  }
  double z = rng.uniform(cfg.z_near, cfg.z_far);
  double half_view = 0.42 * z;
  p.center = {rng.uniform(-half_view, half_view), cfg.floor_y - p.size.y * 0.5, z};
  p.yaw = rng.uniform(-3.14159265, 3.14159265);
  return p;
}

}  // namespace

SceneSpec generate_scene(Rng& rng, const SynthConfig& cfg) {
  require(cfg.min_objects >= 1 && cfg.max_objects >= cfg.min_objects, ErrorCode::config,
          "generate_scene: bad object count bounds");
  SceneSpec scene;
  scene.camera = cfg.camera();
  int n = cfg.min_objects + int(rng.uniform_index(uint64_t(cfg.max_objects - cfg.min_objects + 1)));

  std::vector<Placement> want;
  if (n >= 3 && rng.bernoulli(cfg.group_prob)) {
    // Relational archetype: a table/desk with chairs facing its center, or a
    // bed flanked by cabinets; remaining slots become singles.
    int kind = int(rng.uniform_index(2));
    if (kind == 0) {
      Placement anchor = sample_single(rng, cfg, rng.bernoulli(0.5) ? 0 : 6);
      anchor.center.z = std::clamp(anchor.center.z, cfg.z_near + 0.7, cfg.z_far - 0.5);
      want.push_back(anchor);
      int chairs = 2 + int(rng.uniform_index(uint64_t(std::min(3, n - 1))));
      for (int i = 0; i < chairs && int(want.size()) < n; ++i) {
        Placement ch = sample_single(rng, cfg, 1);
        double ang = rng.uniform(-3.14159265, 3.14159265);
        double radius = 0.5 * std::max(anchor.size.x, anchor.size.z) + 0.45 * ch.size.z +
                        rng.uniform(0.05, 0.25);
        ch.center = {anchor.center.x + radius * std::sin(ang), cfg.floor_y - ch.size.y * 0.5,
                     anchor.center.z + radius * std::cos(ang)};
        ch.yaw = pose::wrap_angle(ang + 3.14159265 + rng.uniform(-0.15, 0.15));
        want.push_back(ch);
      }
    } else {
      Placement bed = sample_single(rng, cfg, 3);
      bed.center.z = std::clamp(bed.center.z, cfg.z_near + 0.8, cfg.z_far - 0.4);
      bed.yaw = rng.uniform(-0.4, 0.4);
      want.push_back(bed);
      for (int side = -1; side <= 1 && int(want.size()) < n; side += 2) {
        Placement cab = sample_single(rng, cfg, 4);
        cab.size = {cab.size.x * 0.55, cab.size.y * 0.5, cab.size.z * 0.9};
        double off = 0.5 * bed.size.x + 0.5 * cab.size.x + rng.uniform(0.05, 0.2);
        Vec3 lateral = Mat3::yaw(bed.yaw) * Vec3{double(side) * off, 0, 0};
        cab.center = {bed.center.x + lateral.x, cfg.floor_y - cab.size.y * 0.5,
                      bed.center.z + lateral.z};
        cab.yaw = bed.yaw;
        want.push_back(cab);
      }
    }
  }

  int tries = 0;
  auto try_accept = [&](const Placement& p) -> bool {
    pose::OrientedBox candidate{p.center, p.size, p.yaw};
    double d = p.center.norm();
    if (d < cfg.d_min || d > cfg.d_max) return false;
    ProjectedBox proj = project_box(scene.camera, candidate);
    if (!proj.onscreen) return false;
    if (proj.box.right - proj.box.left < 3 || proj.box.bottom - proj.box.top < 3) return false;
    for (const SceneObject& o : scene.objects) {
      pose::OrientedBox other =
          pose::box_from_pose(o.pose, {o.box2d.cx(), o.box2d.cy()}, scene.camera);
      if (pose::iou3d(candidate, other) > cfg.overlap_iou_max) return false;
    }
    SceneObject obj;
    obj.class_id = p.class_id;
    obj.variant = int(rng.uniform_index(uint64_t(cfg.templates_per_class)));
    obj.scaffold = make_template(cfg, obj.class_id, obj.variant);
    obj.box2d = proj.box;
    obj.pose.delta = proj.delta;
    obj.pose.dist = d;
    obj.pose.size = p.size;
    obj.pose.yaw = pose::wrap_angle(p.yaw);
    scene.objects.push_back(obj);
    return true;
  };

  // Dense targets may not pack under the IoU bound; once the per-object try
  // allowance runs out the scene keeps the objects placed so far (the count
  // invariant is [min, max]). The hard budget still guards bad configs.
  const int per_object_tries = std::max(64, cfg.rejection_budget / (4 * cfg.max_objects));
  auto place = [&](Placement p) -> bool {
    int attempts = 0;
    while (!try_accept(p)) {
      require(++tries < cfg.rejection_budget, ErrorCode::runtime,
              "generate_scene: rejection budget exhausted");
      if (++attempts >= per_object_tries && int(scene.objects.size()) >= cfg.min_objects)
        return false;
      p = sample_single(rng, cfg, p.class_id);
    }
    return true;
  };
  for (const Placement& p : want)
    if (!place(p)) return scene;
  while (int(scene.objects.size()) < n)
    if (!place(sample_single(rng, cfg, int(rng.uniform_index(uint64_t(cfg.class_count))))))
      return scene;
  return scene;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

struct ObjectFrame {
  Mat3 rot_t;  // camera -> object rotation
  Vec3 center;
  Vec3 inv_size;
};

ObjectFrame object_frame(const SceneSpec& scene, const SceneObject& o) {
  Transform tf =
      pose::pose_to_rigid_transform(o.pose, {o.box2d.cx(), o.box2d.cy()}, scene.camera);
  return {tf.rot.transposed(), tf.t,
          {1.0 / o.pose.size.x, 1.0 / o.pose.size.y, 1.0 / o.pose.size.z}};
}

double ray_hit(const ObjectFrame& f, const shape::GaussianScaffold& scaffold, const Vec3& dir,
               double iso_rho) {
  // Canonical-frame ray: affine map keeps the camera-space parameter t.
  Vec3 o_can = f.rot_t * (Vec3{0, 0, 0} - f.center);
  Vec3 d_can = f.rot_t * dir;
  o_can = {o_can.x * f.inv_size.x, o_can.y * f.inv_size.y, o_can.z * f.inv_size.z};
  d_can = {d_can.x * f.inv_size.x, d_can.y * f.inv_size.y, d_can.z * f.inv_size.z};
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : scaffold.comps) {
    // Unit-sphere frame of this part's iso ellipsoid.
    Vec3 oo = c.rot.transposed() * (o_can - c.mu);
    Vec3 dd = c.rot.transposed() * d_can;
    Vec3 rad{iso_rho * std::sqrt(c.lambda.x), iso_rho * std::sqrt(c.lambda.y),
             iso_rho * std::sqrt(c.lambda.z)};
    oo = {oo.x / rad.x, oo.y / rad.y, oo.z / rad.z};
    dd = {dd.x / rad.x, dd.y / rad.y, dd.z / rad.z};
    double a = dd.norm2();
    double b = 2.0 * oo.dot(dd);
    double cc = oo.norm2() - 1.0;
    double disc = b * b - 4 * a * cc;
    if (disc < 0) continue;
    double sq = std::sqrt(disc);
    double t0 = (-b - sq) / (2 * a);
    double t1 = (-b + sq) / (2 * a);
    double t = t0 > 1e-6 ? t0 : (t1 > 1e-6 ? t1 : -1);
    if (t > 0) best = std::min(best, t);
  }
  return best;
}

}  // namespace

double ray_object_depth(const SceneSpec& scene, size_t obj_index, double px, double py,
                        const SynthConfig& cfg) {
  const pose::Camera& cam = scene.camera;
  Vec3 dir = Vec3{(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0}.normalized();
  const SceneObject& o = scene.objects[obj_index];
  ObjectFrame f = object_frame(scene, o);
  double t = ray_hit(f, o.scaffold, dir, shape::iso_radius_mahalanobis(0.3));
  (void)cfg;
  return std::isfinite(t) ? t * dir.z : std::numeric_limits<double>::infinity();
}

RenderResult render_depth(const SceneSpec& scene, const SynthConfig& cfg) {
  scene.camera.validate();
  RenderResult res;
  res.obs.camera = scene.camera;
  res.obs.width = cfg.image_w;
  res.obs.height = cfg.image_h;
  res.obs.depth.assign(size_t(cfg.image_w) * cfg.image_h, align::kInvalidDepth);
  res.obs.instance.assign(size_t(cfg.image_w) * cfg.image_h, align::kNoInstance);

  std::vector<ObjectFrame> frames;
  for (const SceneObject& o : scene.objects) frames.push_back(object_frame(scene, o));
  const double rho = shape::iso_radius_mahalanobis(0.3);

  parallel_for(cfg.image_h, [&](int64_t y0, int64_t y1) {
    for (int64_t y = y0; y < y1; ++y)
      for (int64_t x = 0; x < cfg.image_w; ++x) {
        Vec3 dir = Vec3{(x + 0.5 - scene.camera.cx) / scene.camera.fx,
                        (y + 0.5 - scene.camera.cy) / scene.camera.fy, 1.0}
                       .normalized();
        double best_t = std::numeric_limits<double>::infinity();
        int best_obj = -1;
        for (size_t i = 0; i < scene.objects.size(); ++i) {
          double t = ray_hit(frames[i], scene.objects[i].scaffold, dir, rho);
          if (t < best_t) {
            best_t = t;
            best_obj = int(i);
          }
        }
        if (best_obj >= 0) {
          res.obs.depth[size_t(y * cfg.image_w + x)] = float(best_t * dir.z);
          res.obs.instance[size_t(y * cfg.image_w + x)] = uint16_t(best_obj);
        }
      }
  });

  // Per-object patches: bilinear crop of normalized depth + instance mask.
  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const cond::Box2D& b = scene.objects[i].box2d;
    ad::Tensorf patch({2, int64_t(cfg.patch_size), int64_t(cfg.patch_size)});
    auto sample_maps = [&](double u, double v, double& depth_out, double& mask_out) {
      int x0 = int(std::floor(u - 0.5)), y0 = int(std::floor(v - 0.5));
      double fx_ = u - 0.5 - x0, fy_ = v - 0.5 - y0;
      depth_out = 0;
      mask_out = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          int xi = std::clamp(x0 + dx, 0, cfg.image_w - 1);
          int yi = std::clamp(y0 + dy, 0, cfg.image_h - 1);
          double w = (dx ? fx_ : 1 - fx_) * (dy ? fy_ : 1 - fy_);
          float d = res.obs.depth_at(xi, yi);
          depth_out += w * (d > 0 ? std::min(double(d) / cfg.depth_norm, 1.0) : 0.0);
          mask_out += w * (res.obs.id_at(xi, yi) == i ? 1.0 : 0.0);
        }
    };
    for (int py = 0; py < cfg.patch_size; ++py)
      for (int px = 0; px < cfg.patch_size; ++px) {
        double u = b.left + (px + 0.5) / cfg.patch_size * (b.right - b.left);
        double v = b.top + (py + 0.5) / cfg.patch_size * (b.bottom - b.top);
        double d, m;
        sample_maps(u, v, d, m);
        patch[(0 * cfg.patch_size + py) * cfg.patch_size + px] = float(d);
        patch[(1 * cfg.patch_size + py) * cfg.patch_size + px] = float(m);
      }
    res.patches.push_back(std::move(patch));
  }
  return res;
}

}  // namespace sde::synth
