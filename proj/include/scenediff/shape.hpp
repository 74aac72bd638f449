#pragma once
#include <array>
#include <string>
#include <vector>

#include "scenediff/linalg.hpp"
#include "scenediff/nn.hpp"
#include "scenediff/rng.hpp"
#include "scenediff/tensor.hpp"

namespace sde::shape {

constexpr int kParamsPerGaussian = 16;  // mu(3) + U row-major(9) + lambda(3) + pi(1)

// One oriented anisotropic Gaussian: rotation U (orthonormal), per-axis
// variances lambda, mixing logit pi. Covariance is U diag(lambda) U^T.
struct GaussianComponent {
  Vec3 mu;
  Mat3 rot;
  Vec3 lambda{1, 1, 1};
  double pi = 0.0;
};

struct GaussianScaffold {
  std::vector<GaussianComponent> comps;

  int g() const { return int(comps.size()); }
  std::vector<double> softmax_weights() const;
  // Returns U diag(sqrt(lambda)), the factor used for sampling.
  static Mat3 sampling_factor(const GaussianComponent& c);
};

double softplus_val(double x);
// Preimage of softplus; nudged to the exact floating-point preimage when one
// exists (it always does for arguments where |x'| * softplus'(x') >= ulp).
double softplus_inv(double y);

// Nearest orthonormal matrix (polar factor) via Newton iteration.
Mat3 polar_project(const Mat3& a);

// Packing order per Gaussian: mu(3), U row-major(9), raw lambda(3), pi(1).
// lambda is stored through softplus^-1 so any real vector unpacks to a valid
// scaffold.
std::vector<double> pack_shape_code(const GaussianScaffold& s);
GaussianScaffold unpack_shape_code(const std::vector<double>& v);

// m draws per component regardless of pi; p = mu + U diag(sqrt(lambda)) z.
std::vector<Vec3> sample_points(const GaussianScaffold& s, int m, Rng& rng);

// ---------------------------------------------------------------------------
// Occupancy decoder: sigmoid(a * (weighted normalized mixture - b) + MLP).
// ---------------------------------------------------------------------------

struct DecoderConfig {
  double a = 10.0;
  double b = 0.3;
  int g = 16;
  int latent_dim = 64;
  int hidden = 32;
};

// Mahalanobis radius of the iso-0.5 surface of a unit-weight component.
inline double iso_radius_mahalanobis(double b) { return std::sqrt(-2.0 * std::log(b)); }

// Weighted normalized mixture: sum_j w_j exp(-rho_j^2 / 2), w = softmax(pi).
double normalized_mixture(const GaussianScaffold& s, const Vec3& x);

class OccupancyDecoder {
 public:
  explicit OccupancyDecoder(DecoderConfig cfg) : cfg_(cfg) {}
  const DecoderConfig& config() const { return cfg_; }

  static void register_params(nn::ParamStore<float>& ps, const DecoderConfig& cfg, Rng& rng);

  // Fast path for meshing/eval. `latents` is g x latent_dim; pass use_mlp =
  // false to evaluate the analytic term alone.
  std::vector<float> evaluate(const GaussianScaffold& s, const ad::Tensorf& latents,
                              const nn::ParamStore<float>& ps, const std::vector<Vec3>& points,
                              bool use_mlp) const;

  // Training graph: gradients flow into the MLP weights and the latents.
  // Scaffold-dependent features are constants.
  template <typename S>
  ad::Var logits_tape(nn::NetCtx<S>& ctx, const GaussianScaffold& s, ad::Var latents,
                      const std::vector<Vec3>& points) const;

 private:
  DecoderConfig cfg_;
};

// ---------------------------------------------------------------------------
// Meshes and point-set metrics
// ---------------------------------------------------------------------------

struct Mesh {
  std::vector<std::array<float, 3>> vertices;
  std::vector<std::array<int32_t, 3>> tris;

  bool empty() const { return tris.empty(); }
  double area() const;
};

// Standard 256-case marching cubes with linear edge interpolation. Samples
// outside the grid count as outside, so surfaces close at the boundary.
// field is res^3, x-fastest; inside means value > iso.
Mesh marching_cubes(const std::vector<float>& field, int res, double iso, const Vec3& origin,
                    double spacing);

// True when every referenced edge is shared by exactly two triangles.
bool mesh_is_watertight(const Mesh& m);

// Symmetric chamfer: mean squared nearest-neighbor distance, both directions
// averaged. Report-scale convention multiplies by 1e3 at the CSV layer.
double chamfer_distance(const std::vector<Vec3>& p, const std::vector<Vec3>& q);

// Harmonic mean of precision/recall at distance tau, in percent.
double f_score(const std::vector<Vec3>& p, const std::vector<Vec3>& q, double tau);

// Area-weighted uniform surface sampling; n = 0 yields an empty set.
std::vector<Vec3> surface_sample(const Mesh& m, int n, Rng& rng);

// ---------------------------------------------------------------------------
// Mesh / grid file formats
// ---------------------------------------------------------------------------

void write_obj(const std::string& path, const Mesh& m);
Mesh read_obj(const std::string& path);
void write_ply(const std::string& path, const Mesh& m);  // binary little-endian

// "OCC1": magic, res (3 x u32), res^3 float32 values, x-fastest.
void write_occ_grid(const std::string& path, const std::vector<float>& field, int res);
std::vector<float> read_occ_grid(const std::string& path, int* res_out);

}  // namespace sde::shape
