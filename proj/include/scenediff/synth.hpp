#pragma once
#include <vector>

#include "scenediff/align.hpp"
#include "scenediff/condition.hpp"
#include "scenediff/pose.hpp"
#include "scenediff/shape.hpp"

namespace sde::synth {

struct SynthConfig {
  uint64_t seed = 1234;
  int split = 0;  // 0 train, 1 val: disjoint template pools and scene streams
  int image_w = 128, image_h = 128;
  double fx = 128, fy = 128;
  int class_count = 8;
  int templates_per_class = 4;
  int g = 16;
  int min_objects = 1, max_objects = 8;
  double overlap_iou_max = 0.05;
  double d_min = 0.7, d_max = 5.0;
  double s_min = 0.3, s_max = 3.0;
  double floor_y = 0.9;
  double z_near = 1.3, z_far = 3.9;
  double group_prob = 0.65;
  int patch_size = 8;
  double depth_norm = 6.0;
  int rejection_budget = 10000;

  pose::Camera camera() const {
    return pose::Camera{fx, fy, image_w / 2.0, image_h / 2.0, image_w, image_h};
  }
};

struct SceneObject {
  int class_id = 0;
  int variant = 0;
  pose::ObjectPose pose;
  cond::Box2D box2d;                 // projected 3D box, clipped to the image
  shape::GaussianScaffold scaffold;  // canonical frame, g components
};

struct SceneSpec {
  pose::Camera camera;
  std::vector<SceneObject> objects;
};

// Canonical ellipsoid-union furniture template, deterministic per
// (seed, split, class, variant); parts are padded cyclically to g slots.
shape::GaussianScaffold make_template(const SynthConfig& cfg, int class_id, int variant);

// Number of distinct parts before padding (render cost, docs).
int template_part_count(int class_id);

// Ground-truth occupancy of a canonical scaffold: union of the per-part
// ellipsoids at the weight-free iso radius (decoder b gives the radius).
bool gt_occupied(const shape::GaussianScaffold& s, const Vec3& x, double iso_rho);

std::vector<float> gt_occupancy_grid(const shape::GaussianScaffold& s, int res, const Vec3& origin,
                                     double spacing, double iso_rho);

// Rejection-sampled placement honoring the pairwise-IoU bound and the pose
// ranges; throws when the try budget is exhausted.
SceneSpec generate_scene(Rng& rng, const SynthConfig& cfg);

struct ProjectedBox {
  cond::Box2D box;
  Vec2 delta;
  bool onscreen = false;
};

ProjectedBox project_box(const pose::Camera& cam, const pose::OrientedBox& box);

struct RenderResult {
  align::DepthObservation obs;
  std::vector<ad::Tensorf> patches;  // per object: [2, patch, patch]
};

// Analytic ray casting against every object's ellipsoid union; the nearest
// hit wins the pixel. Patches are depth+mask crops resized bilinearly.
RenderResult render_depth(const SceneSpec& scene, const SynthConfig& cfg);

// Analytic nearest hit of one pixel ray against one object (camera frame);
// returns +inf when the ray misses. Exposed for oracle tests.
double ray_object_depth(const SceneSpec& scene, size_t obj_index, double px, double py,
                        const SynthConfig& cfg);

}  // namespace sde::synth
