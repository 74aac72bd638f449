#include "scenediff/pose.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace sde::pose {

double wrap_angle(double a) {
  const double two_pi = 2.0 * 3.14159265358979323846;
  double w = std::fmod(a + 3.14159265358979323846, two_pi);
  if (w < 0) w += two_pi;
  return w - 3.14159265358979323846;
}

Pose7 normalize_pose(const ObjectPose& p, const PoseNormalizer& n) {
  require(n.image_w > 0 && n.image_h > 0, ErrorCode::invalid_argument,
          "normalizer: image extents unset");
  return {p.delta.x / n.image_w,
          p.delta.y / n.image_h,
          (p.dist - n.d_mu) / n.d_max,
          (p.size.x - n.s_mu) / n.s_max,
          (p.size.y - n.s_mu) / n.s_max,
          (p.size.z - n.s_mu) / n.s_max,
          (p.yaw - n.yaw_mu) / n.yaw_max};
}

ObjectPose denormalize_pose(const Pose7& v, const PoseNormalizer& n) {
  constexpr double kFloor = 1e-3;
  ObjectPose p;
  p.delta = {v[0] * n.image_w, v[1] * n.image_h};
  p.dist = std::max(v[2] * n.d_max + n.d_mu, kFloor);
  p.size = {std::max(v[3] * n.s_max + n.s_mu, kFloor), std::max(v[4] * n.s_max + n.s_mu, kFloor),
            std::max(v[5] * n.s_max + n.s_mu, kFloor)};
  p.yaw = wrap_angle(v[6] * n.yaw_max + n.yaw_mu);
  return p;
}

Vec2 project_point(const Camera& cam, const Vec3& p) {
  require(p.z > 0, ErrorCode::invalid_argument, "projection: point behind the camera");
  return {cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy};
}

Vec3 backproject_pixel(const Camera& cam, double u, double v, double depth) {
  return {(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
}

Transform pose_to_rigid_transform(const ObjectPose& p, const Vec2& box2d_center,
                                  const Camera& cam) {
  require(cam.fx > 1e-12 && cam.fy > 1e-12, ErrorCode::invalid_argument,
          "degenerate camera intrinsics");
  Vec3 ray{(box2d_center.x + p.delta.x - cam.cx) / cam.fx,
           (box2d_center.y + p.delta.y - cam.cy) / cam.fy, 1.0};
  Vec3 c = ray.normalized() * p.dist;
  return {Mat3::yaw(p.yaw), c};
}

OrientedBox box_from_pose(const ObjectPose& p, const Vec2& box2d_center, const Camera& cam) {
  Transform tf = pose_to_rigid_transform(p, box2d_center, cam);
  return {tf.t, p.size, p.yaw};
}

bool point_in_obb(const OrientedBox& b, const Vec3& p) {
  Vec3 local = Mat3::yaw(-b.yaw) * (p - b.center);
  return std::abs(local.x) <= b.size.x * 0.5 && std::abs(local.y) <= b.size.y * 0.5 &&
         std::abs(local.z) <= b.size.z * 0.5;
}

namespace {

struct P2 {
  double x, z;
};

// BEV footprint corners, counter-clockwise in the x-z plane.
std::array<P2, 4> bev_corners(const OrientedBox& b) {
  double c = std::cos(b.yaw), s = std::sin(b.yaw);
  double hx = b.size.x * 0.5, hz = b.size.z * 0.5;
  // R_y maps (x, z) -> (c x + s z, -s x + c z).
  auto rot = [&](double x, double z) {
    return P2{b.center.x + c * x + s * z, b.center.z - s * x + c * z};
  };
  return {rot(hx, hz), rot(-hx, hz), rot(-hx, -hz), rot(hx, -hz)};
}

double polygon_area(const std::vector<P2>& poly) {
  double a = 0;
  size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const P2& p = poly[i];
    const P2& q = poly[(i + 1) % n];
    a += p.x * q.z - q.x * p.z;
  }
  return std::abs(a) * 0.5;
}

// Sutherland-Hodgman clip of `subject` against the convex quad `clip`.
std::vector<P2> clip_convex(const std::array<P2, 4>& subject, const std::array<P2, 4>& clip) {
  std::vector<P2> poly(subject.begin(), subject.end());
  // Clip quad orientation: make edges consistently oriented via signed area.
  double signed_area = 0;
  for (int i = 0; i < 4; ++i) {
    const P2& p = clip[size_t(i)];
    const P2& q = clip[size_t((i + 1) % 4)];
    signed_area += p.x * q.z - q.x * p.z;
  }
  double orient = signed_area >= 0 ? 1.0 : -1.0;
  for (int e = 0; e < 4 && !poly.empty(); ++e) {
    const P2 a = clip[size_t(e)];
    const P2 b = clip[size_t((e + 1) % 4)];
    auto inside = [&](const P2& p) {
      return orient * ((b.x - a.x) * (p.z - a.z) - (b.z - a.z) * (p.x - a.x)) >= 0;
    };
    auto intersect = [&](const P2& p, const P2& q) {
      double denom = (b.x - a.x) * (q.z - p.z) - (b.z - a.z) * (q.x - p.x);
      double tnum = (b.x - a.x) * (a.z - p.z) - (b.z - a.z) * (a.x - p.x);
      double t = tnum / denom;
      return P2{p.x + t * (q.x - p.x), p.z + t * (q.z - p.z)};
    };
    std::vector<P2> out;
    out.reserve(poly.size() + 4);
    for (size_t i = 0; i < poly.size(); ++i) {
      const P2& cur = poly[i];
      const P2& nxt = poly[(i + 1) % poly.size()];
      bool cin = inside(cur), nin = inside(nxt);
      if (cin) out.push_back(cur);
      if (cin != nin) out.push_back(intersect(cur, nxt));
    }
    poly = std::move(out);
  }
  return poly;
}

double iou3d_ordered(const OrientedBox& a, const OrientedBox& b) {
  double inter_area = polygon_area(clip_convex(bev_corners(a), bev_corners(b)));
  double y_lo = std::max(a.center.y - a.size.y * 0.5, b.center.y - b.size.y * 0.5);
  double y_hi = std::min(a.center.y + a.size.y * 0.5, b.center.y + b.size.y * 0.5);
  double inter = inter_area * std::max(0.0, y_hi - y_lo);
  double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool box_less(const OrientedBox& a, const OrientedBox& b) {
  auto key = [](const OrientedBox& o) {
    return std::array<double, 7>{o.center.x, o.center.y, o.center.z,
                                 o.size.x,   o.size.y,   o.size.z,   o.yaw};
  };
  return key(a) < key(b);
}

}  // namespace

double iou3d(const OrientedBox& a, const OrientedBox& b) {
  require(a.volume() > 0 && b.volume() > 0, ErrorCode::invalid_argument,
          "iou3d: zero-volume box");
  // Canonical argument order makes the result exactly symmetric.
  return box_less(b, a) ? iou3d_ordered(b, a) : iou3d_ordered(a, b);
}

ApResult average_precision(const std::vector<Detection>& preds,
                           const std::vector<GroundTruthBox>& gts, double iou_threshold) {
  ApResult res;
  for (const auto& g : gts) res.support[g.class_id]++;

  std::vector<size_t> order(preds.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t i, size_t j) { return preds[i].score > preds[j].score; });

  std::map<int, std::vector<char>> tp_flags;  // per class, in rank order
  std::vector<char> gt_matched(gts.size(), 0);
  for (size_t oi : order) {
    const Detection& d = preds[oi];
    if (!res.support.count(d.class_id)) continue;  // class has no ground truth
    int best = -1;
    double best_iou = iou_threshold;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      const GroundTruthBox& g = gts[gi];
      if (gt_matched[gi] || g.class_id != d.class_id || g.scene_id != d.scene_id) continue;
      double v = iou3d(d.box, g.box);
      if (v >= best_iou) {
        best_iou = v;
        best = int(gi);
      }
    }
    if (best >= 0) gt_matched[size_t(best)] = 1;
    tp_flags[d.class_id].push_back(best >= 0 ? 1 : 0);
  }

  double sum = 0;
  int classes = 0;
  for (const auto& [cls, count] : res.support) {
    const std::vector<char>& flags = tp_flags[cls];
    std::vector<double> precision, recall;
    int tp = 0;
    for (size_t i = 0; i < flags.size(); ++i) {
      tp += flags[i];
      precision.push_back(double(tp) / double(i + 1));
      recall.push_back(double(tp) / double(count));
    }
    double ap = 0;
    double run_max = 0, prev_recall = 0;
    // Exact area under the interpolated PR curve.
    std::vector<double> envelope(precision.size());
    for (size_t i = precision.size(); i-- > 0;) {
      run_max = std::max(run_max, precision[i]);
      envelope[i] = run_max;
    }
    for (size_t i = 0; i < precision.size(); ++i) {
      ap += (recall[i] - prev_recall) * envelope[i];
      prev_recall = recall[i];
    }
    res.per_class[cls] = ap;
    sum += ap;
    classes++;
  }
  res.mean = classes ? sum / classes : 0.0;
  return res;
}

void write_pose_metrics_csv(const std::string& path, const std::vector<ClassMetricsRow>& rows) {
  std::ofstream f(path);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f << "class,iou3d,ap,support\n";
  for (const auto& r : rows)
    f << r.name << "," << r.iou3d_mean << "," << r.ap << "," << r.support << "\n";
}

}  // namespace sde::pose
