#pragma once
#include <array>
#include <map>
#include <string>
#include <vector>

#include "scenediff/error.hpp"
#include "scenediff/linalg.hpp"

namespace sde::pose {

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    require(fx > 0 && fy > 0, ErrorCode::invalid_argument, "camera: focal lengths must be > 0");
    require(width > 0 && height > 0, ErrorCode::invalid_argument, "camera: empty image");
    require(cx > 0 && cx < width && cy > 0 && cy < height, ErrorCode::invalid_argument,
            "camera: principal point outside the image");
  }
};

// 7-DoF object pose: 2D offset (pixels) between the projected 3D center and
// the 2D box center, ray distance d (meters), size s (meters), yaw (radians).
struct ObjectPose {
  Vec2 delta;
  double dist = 1.0;
  Vec3 size{1, 1, 1};
  double yaw = 0.0;
};

// Wraps into [-pi, pi).
double wrap_angle(double a);

struct PoseNormalizer {
  double d_mu = 2.7, d_max = 2.5;
  double s_mu = 3.5, s_max = 7.0;
  double yaw_mu = 0.0, yaw_max = 3.14;
  double image_w = 0, image_h = 0;

  static PoseNormalizer defaults(const Camera& cam) {
    PoseNormalizer n;
    n.image_w = cam.width;
    n.image_h = cam.height;
    return n;
  }
};

// Order: [du, dv, d, sx, sy, sz, yaw].
using Pose7 = std::array<double, 7>;

Pose7 normalize_pose(const ObjectPose& p, const PoseNormalizer& n);
// Exact affine inverse; yaw re-wrapped, d and s floored at 1e-3.
ObjectPose denormalize_pose(const Pose7& v, const PoseNormalizer& n);

Vec2 project_point(const Camera& cam, const Vec3& p);
// depth is the camera-frame z coordinate.
Vec3 backproject_pixel(const Camera& cam, double u, double v, double depth);

// Object-to-camera rigid transform: yaw rotation about the gravity axis (+y)
// and translation to c = d * normalize(K^-1 [box_center + delta, 1]).
Transform pose_to_rigid_transform(const ObjectPose& p, const Vec2& box2d_center,
                                  const Camera& cam);

struct OrientedBox {
  Vec3 center;
  Vec3 size;
  double yaw = 0.0;
  double volume() const { return size.x * size.y * size.z; }
};

OrientedBox box_from_pose(const ObjectPose& p, const Vec2& box2d_center, const Camera& cam);

bool point_in_obb(const OrientedBox& b, const Vec3& p);

// Exact BEV polygon intersection x vertical overlap over union. Both boxes
// share the gravity axis (yaw-only rotation).
double iou3d(const OrientedBox& a, const OrientedBox& b);

struct Detection {
  OrientedBox box;
  int class_id = 0;
  double score = 1.0;
  int scene_id = 0;
};

struct GroundTruthBox {
  OrientedBox box;
  int class_id = 0;
  int scene_id = 0;
};

struct ApResult {
  std::map<int, double> per_class;
  std::map<int, int> support;  // ground-truth count per class
  double mean = 0.0;
};

// Ranked PR-curve AP with greedy one-to-one matching at the IoU threshold;
// exact area under the interpolated curve. Classes without ground truth are
// excluded from the mean.
ApResult average_precision(const std::vector<Detection>& preds,
                           const std::vector<GroundTruthBox>& gts, double iou_threshold);

struct ClassMetricsRow {
  std::string name;
  double iou3d_mean = 0.0;
  double ap = 0.0;
  int support = 0;
};

void write_pose_metrics_csv(const std::string& path, const std::vector<ClassMetricsRow>& rows);

}  // namespace sde::pose
