#pragma once
#include <functional>
#include <vector>

#include "scenediff/rng.hpp"
#include "scenediff/tensor.hpp"

namespace sde::diff {

using ad::Tensorf;

// Linear variance schedule. Indexing is 1-based to match the usual
// formulation; beta(t), alpha(t), alpha_bar(t) accept t in [1, T].
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // size T
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // cumulative product

  double beta(int t) const { return betas[size_t(t - 1)]; }
  double alpha(int t) const { return alphas[size_t(t - 1)]; }
  // alpha_bar(0) == 1 by convention (the clean-data endpoint).
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars[size_t(t - 1)]; }
};

NoiseSchedule make_linear_schedule(int T, double beta1, double betaT);

struct GuidanceConfig {
  double drop_probability = 0.8;  // p, training-time condition drop
  double weight = 1.0;            // w, sampling-time guidance
};

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
Tensorf q_sample(const Tensorf& x0, int t, const Tensorf& eps, const NoiseSchedule& sched);

// Closed-form inversion of q_sample given the true noise.
Tensorf reconstruct_x0(const Tensorf& xt, int t, const Tensorf& eps, const NoiseSchedule& sched);

// Mean squared error over all elements.
double epsilon_loss(const Tensorf& eps_hat, const Tensorf& eps);

// One ancestral step; sigma_1 = 0 so injected noise is ignored at t=1.
Tensorf ddpm_step(const Tensorf& xt, const Tensorf& eps_hat, int t, const NoiseSchedule& sched,
                  const Tensorf& injected_noise);

Tensorf cfg_epsilon(const Tensorf& eps_cond, const Tensorf& eps_uncond, double w);

// Denoiser callback: (x_t, t, conditional?) -> predicted noise. The sampler
// calls it once per step when w == 1 and twice (conditional + null) otherwise.
using EpsilonFn = std::function<Tensorf(const Tensorf&, int, bool)>;

// Uniformly strided timestep subsequence from T down to 1.
std::vector<int> ddim_timesteps(int T, int steps);

// eta = 0 is a deterministic map of (x_T, condition, weights); eta = 1 with
// steps == T consumes one noise draw per step in the same pattern as the
// ddpm_step chain, so the two match under a shared RNG stream. clip_x0 > 0
// clamps the per-step x0 reconstruction into [-clip_x0, clip_x0]; without it
// the epsilon error at the noisiest steps is amplified by sqrt(1-a)/sqrt(a)
// and the chain can leave the data range.
Tensorf ddim_sample(const EpsilonFn& denoiser, const Tensorf& xT, const NoiseSchedule& sched,
                    int steps, double eta, double guidance_weight, Rng& rng,
                    double clip_x0 = 0.0);

// Training-time classifier-free-guidance drop decision.
inline bool should_drop_condition(double p, Rng& rng) {
  require(p >= 0.0 && p <= 1.0, ErrorCode::invalid_argument, "drop probability outside [0,1]");
  return rng.uniform() < p;
}

}  // namespace sde::diff
