#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "scenediff/pose.hpp"
#include "scenediff/shape.hpp"
#include "scenediff/tape.hpp"

namespace sde::align {

constexpr uint16_t kNoInstance = 0xFFFF;
constexpr float kInvalidDepth = -1.0f;

struct DepthObservation {
  int width = 0, height = 0;
  std::vector<float> depth;        // meters, row-major; -1 where invalid
  std::vector<uint16_t> instance;  // parallel id grid; 0xFFFF background
  pose::Camera camera;

  float depth_at(int x, int y) const { return depth[size_t(y * width + x)]; }
  uint16_t id_at(int x, int y) const { return instance[size_t(y * width + x)]; }
};

// Camera-frame surface points of one instance: q = depth * K^-1 [u,v,1],
// sampled at pixel centers. Errors if the instance never appears.
std::vector<Vec3> backproject_depth(const DepthObservation& obs, int instance_id);

// sample_points in the canonical frame, then per-axis size scaling and the
// pose's rigid transform into the camera frame.
std::vector<Vec3> transform_shape_samples(const shape::GaussianScaffold& scaffold,
                                          const pose::ObjectPose& pose, const Vec2& box2d_center,
                                          const pose::Camera& cam, int m, Rng& rng);

struct OneSidedChamfer {
  double value = 0;                 // (1/K) sum_k min_p |q_k - p|^2
  std::vector<Vec3> grad_sources;   // d value / d p_j
  std::vector<int32_t> argmin;      // winning source per target (lowest-index ties)
};

// Accelerated via the exact kd-tree; value, gradients and arg-mins are
// bit-identical to the O(K*|P|) scan.
OneSidedChamfer one_sided_chamfer(const std::vector<Vec3>& targets,
                                  const std::vector<Vec3>& sources);

template <typename S>
ad::Var one_sided_chamfer_node(ad::Tape<S>& t, ad::Var sources, const std::vector<Vec3>& targets);

// Rows of 9 raw values -> nearest orthonormal 3x3 (row-major), with the
// Newton iteration unrolled for the adjoint.
template <typename S>
ad::Var polar_project_rows(ad::Tape<S>& t, ad::Var raw);

// Differentiable per-object alignment term. pose_norm is the normalized
// 7-vector, scaffold_raw the packed g x 16 code; z holds the fixed
// standard-normal draws [g, m, 3] of the reparameterized samples.
template <typename S>
ad::Var alignment_term_tape(ad::Tape<S>& t, ad::Var pose_norm, ad::Var scaffold_raw,
                            const ad::Tensor<S>& z, const std::vector<Vec3>& targets,
                            const pose::PoseNormalizer& norm, const Vec2& box2d_center,
                            const pose::Camera& cam);

// Evaluation metric: mean over objects with at least one valid depth pixel.
// Fresh scaffold samples per call; errors when no object is visible.
double surface_alignment_loss(const std::vector<shape::GaussianScaffold>& scaffolds,
                              const std::vector<pose::ObjectPose>& poses,
                              const std::vector<Vec2>& box_centers,
                              const std::vector<int>& instance_ids, const DepthObservation& obs,
                              int m, Rng& rng);

// DPT1 / INS1 raw binary grids.
void write_depth(const std::string& path, const DepthObservation& obs);
void write_instances(const std::string& path, const DepthObservation& obs);
void read_depth(const std::string& path, DepthObservation& obs);
void read_instances(const std::string& path, DepthObservation& obs);

}  // namespace sde::align
