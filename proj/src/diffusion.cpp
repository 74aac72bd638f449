#include "scenediff/diffusion.hpp"

#include <cmath>

namespace sde::diff {

NoiseSchedule make_linear_schedule(int T, double beta1, double betaT) {
  require(T >= 2, ErrorCode::invalid_argument, "schedule needs T >= 2");
  require(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0, ErrorCode::invalid_argument,
          "schedule requires 0 < beta_1 <= beta_T < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(size_t(T));
  s.alphas.resize(size_t(T));
  s.alpha_bars.resize(size_t(T));
  double abar = 1.0;
  for (int t = 1; t <= T; ++t) {
    double b = beta1 + double(t - 1) / double(T - 1) * (betaT - beta1);
    s.betas[size_t(t - 1)] = b;
    s.alphas[size_t(t - 1)] = 1.0 - b;
    abar *= 1.0 - b;
    s.alpha_bars[size_t(t - 1)] = abar;
  }
  return s;
}

static void check_t(const NoiseSchedule& s, int t) {
  require(t >= 1 && t <= s.T, ErrorCode::invalid_argument,
          "timestep " + std::to_string(t) + " outside [1," + std::to_string(s.T) + "]");
}

Tensorf q_sample(const Tensorf& x0, int t, const Tensorf& eps, const NoiseSchedule& sched) {
  check_t(sched, t);
  require(x0.same_shape(eps), ErrorCode::shape_mismatch,
          "q_sample: x0 " + ad::shape_str(x0.shape()) + " vs eps " + ad::shape_str(eps.shape()));
  double abar = sched.alpha_bar(t);
  float c0 = float(std::sqrt(abar));
  float c1 = float(std::sqrt(1.0 - abar));
  Tensorf out(x0.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = c0 * x0[i] + c1 * eps[i];
  return out;
}

Tensorf reconstruct_x0(const Tensorf& xt, int t, const Tensorf& eps, const NoiseSchedule& sched) {
  check_t(sched, t);
  double abar = sched.alpha_bar(t);
  float inv = float(1.0 / std::sqrt(abar));
  float c1 = float(std::sqrt(1.0 - abar));
  Tensorf out(xt.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = (xt[i] - c1 * eps[i]) * inv;
  return out;
}

double epsilon_loss(const Tensorf& eps_hat, const Tensorf& eps) {
  require(eps_hat.same_shape(eps), ErrorCode::shape_mismatch,
          "epsilon_loss: " + ad::shape_str(eps_hat.shape()) + " vs " + ad::shape_str(eps.shape()));
  double s = 0;
  for (int64_t i = 0; i < eps.numel(); ++i) {
    double d = double(eps_hat[i]) - double(eps[i]);
    s += d * d;
  }
  return s / double(eps.numel());
}

Tensorf ddpm_step(const Tensorf& xt, const Tensorf& eps_hat, int t, const NoiseSchedule& sched,
                  const Tensorf& injected_noise) {
  check_t(sched, t);
  require(xt.same_shape(eps_hat), ErrorCode::shape_mismatch,
          "ddpm_step: x " + ad::shape_str(xt.shape()) + " vs eps " +
              ad::shape_str(eps_hat.shape()));
  double beta = sched.beta(t);
  double abar = sched.alpha_bar(t);
  double abar_prev = sched.alpha_bar(t - 1);
  double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
  double eps_coef = beta / std::sqrt(1.0 - abar);
  double sigma = t > 1 ? std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar)) : 0.0;
  Tensorf out(xt.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double mean = inv_sqrt_alpha * (double(xt[i]) - eps_coef * double(eps_hat[i]));
    double noise = sigma > 0.0 ? sigma * double(injected_noise[i]) : 0.0;
    out[i] = float(mean + noise);
  }
  return out;
}

Tensorf cfg_epsilon(const Tensorf& eps_cond, const Tensorf& eps_uncond, double w) {
  require(eps_cond.same_shape(eps_uncond), ErrorCode::shape_mismatch,
          "cfg_epsilon: shape mismatch");
  Tensorf out(eps_cond.shape());
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = float(double(eps_uncond[i]) + w * (double(eps_cond[i]) - double(eps_uncond[i])));
  return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, ErrorCode::invalid_argument,
          "ddim: steps " + std::to_string(steps) + " outside [1," + std::to_string(T) + "]");
  std::vector<int> ts;
  ts.reserve(size_t(steps));
  if (steps == 1) {
    ts.push_back(T);
    return ts;
  }
  for (int i = 0; i < steps; ++i) {
    double v = double(T) - double(i) * double(T - 1) / double(steps - 1);
    int t = int(std::lround(v));
    if (ts.empty() || ts.back() != t) ts.push_back(t);
  }
  return ts;  // descending, ts.front() == T, ts.back() == 1
}

Tensorf ddim_sample(const EpsilonFn& denoiser, const Tensorf& xT, const NoiseSchedule& sched,
                    int steps, double eta, double guidance_weight, Rng& rng, double clip_x0) {
  require(eta >= 0.0 && eta <= 1.0, ErrorCode::invalid_argument, "ddim: eta outside [0,1]");
  std::vector<int> ts = ddim_timesteps(sched.T, steps);
  Tensorf x = xT;
  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensorf eps = denoiser(x, t, true);
    if (guidance_weight != 1.0) eps = cfg_epsilon(eps, denoiser(x, t, false), guidance_weight);
    double abar = sched.alpha_bar(t);
    double abar_prev = sched.alpha_bar(t_prev);
    double sigma = eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) *
                   std::sqrt(1.0 - abar / abar_prev);
    double x0_coef = std::sqrt(abar_prev);
    double dir_coef = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
    double inv_sqrt_abar = 1.0 / std::sqrt(abar);
    double c1 = std::sqrt(1.0 - abar);
    Tensorf next(x.shape());
    for (int64_t j = 0; j < x.numel(); ++j) {
      double x0 = (double(x[j]) - c1 * double(eps[j])) * inv_sqrt_abar;
      if (clip_x0 > 0.0) x0 = std::clamp(x0, -clip_x0, clip_x0);
      next[j] = float(x0_coef * x0 + dir_coef * double(eps[j]));
    }
    if (sigma > 0.0)
      for (int64_t j = 0; j < next.numel(); ++j)
        next[j] = float(double(next[j]) + sigma * rng.normal());
    x = std::move(next);
  }
  return x;
}

}  // namespace sde::diff
