#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "scenediff/diffusion.hpp"
#include "scenediff/pipeline.hpp"

namespace sde::pipeline {

namespace fs = std::filesystem;
using ad::Tensorf;
using ad::Var;

namespace {

std::string latent_key(int class_id, int variant) {
  return "dec.z.c" + std::to_string(class_id) + "v" + std::to_string(variant);
}

std::vector<cond::ObjectObservation> observations(const SceneRecord& rec) {
  std::vector<cond::ObjectObservation> obs;
  for (size_t k = 0; k < rec.spec.objects.size(); ++k) {
    const synth::SceneObject& o = rec.spec.objects[k];
    obs.push_back({o.box2d, rec.patches[k], o.class_id});
  }
  return obs;
}

struct MetricsLog {
  std::ofstream file;
  explicit MetricsLog(const std::string& path) : file(path, std::ios::app) {
    require(bool(file), ErrorCode::io, "cannot open metrics log '" + path + "'");
  }
  void row(const std::string& stage, int step, double lp, double ls, double ll, double la) {
    file << stage << "," << step << "," << lp << "," << ls << "," << ll << "," << la << "\n";
    file.flush();
  }
};

// Normalized packed scaffold of an object, [g,16].
Tensorf normalized_scaffold(const Dataset& ds, const synth::SceneObject& o) {
  std::vector<double> packed = shape::pack_shape_code(o.scaffold);
  int g = int(packed.size()) / 16;
  Tensorf t({g, 16});
  for (size_t i = 0; i < packed.size(); ++i)
    t[int64_t(i)] = float((packed[i] - ds.shape_mu[i % 16]) / ds.shape_sigma[i % 16]);
  return t;
}

}  // namespace

void train(const cfg::RunConfig& cfg, const std::string& dataset_dir, const std::string& run_dir,
           const TrainFlags& flags) {
  Dataset ds = load_dataset(dataset_dir);
  require(!ds.scenes.empty(), ErrorCode::invalid_argument, "train: empty dataset");
  fs::create_directories(run_dir);
  cfg::save_config((fs::path(run_dir) / "config.json").string(), cfg);

  diff::NoiseSchedule sched =
      diff::make_linear_schedule(cfg.diffusion.T, cfg.diffusion.beta1, cfg.diffusion.betaT);
  cond::ConditionConfig ccfg = cfg.cond_config();
  net::PoseDenoiser pose_net(cfg.pose_config(!flags.no_isa));
  net::SetDenoiser shape_net(cfg.shape_denoiser_config());
  net::SetDenoiser latent_net(cfg.latent_denoiser_config());
  shape::OccupancyDecoder decoder(cfg.decoder_config());
  synth::SynthConfig sc = ds.config.synth_config();

  Rng init(mix_seed(cfg.seed, 0xBEEF));
  nn::ParamStore<float> params;
  shape::OccupancyDecoder::register_params(params, decoder.config(), init);
  for (int c = 0; c < sc.class_count; ++c)
    for (int v = 0; v < sc.templates_per_class; ++v)
      params.init_normal(latent_key(c, v), {cfg.model.g, cfg.model.latent_dim}, init, 0.05);
  pose_net.register_params(params, init);
  shape_net.register_params(params, init);
  latent_net.register_params(params, init);
  cond::register_condition_params(params, ccfg, init);
  net::register_condition_token_params(params, "shape", ccfg.box_dim(), ccfg.feat_width,
                                       ccfg.class_count, cfg.model.shape.width, init);

  MetricsLog log((fs::path(run_dir) / "metrics.csv").string());
  Rng rng(mix_seed(cfg.seed, 0xC0FFEE));

  auto abort_nan = [&](const std::string& stage, int step) {
    nlohmann::json j{{"status", "nan_abort"}, {"stage", stage}, {"step", step}};
    std::ofstream f(fs::path(run_dir) / "manifest.json");
    f << j.dump(2) << "\n";
    fail(ErrorCode::numeric, "train: non-finite loss at " + stage + " step " +
                                 std::to_string(step));
  };

  // ---------------------------------------------------------------------
  // Stage 0: occupancy decoder + per-template latents (auto-decoder).
  // ---------------------------------------------------------------------
  {
    nn::AdamW opt;
    opt.lr = cfg.train.decoder_lr;
    int pool = sc.class_count * sc.templates_per_class;
    const double rho = shape::iso_radius_mahalanobis(decoder.config().b);
    for (int step = 0; step < cfg.train.steps_decoder; ++step) {
      int c = int(rng.uniform_index(uint64_t(sc.class_count)));
      int v = int(rng.uniform_index(uint64_t(sc.templates_per_class)));
      shape::GaussianScaffold scaffold = synth::make_template(sc, c, v);

      int P = cfg.train.decoder_points;
      std::vector<Vec3> pts;
      Tensorf targets({P, 1});
      for (int i = 0; i < P; ++i) {
        Vec3 x;
        if (i % 2 == 0) {
          double dmn = cfg.model.decoder.domain;
          x = {rng.uniform(-dmn, dmn), rng.uniform(-dmn, dmn), rng.uniform(-dmn, dmn)};
        } else {
          const auto& comp = scaffold.comps[rng.uniform_index(uint64_t(scaffold.g()))];
          Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
          dir = dir / std::max(dir.norm(), 1e-9);
          double f = rng.uniform(0.6, 1.4) * rho;
          Vec3 semi{std::sqrt(comp.lambda.x), std::sqrt(comp.lambda.y),
                    std::sqrt(comp.lambda.z)};
          x = comp.rot * Vec3{dir.x * semi.x * f, dir.y * semi.y * f, dir.z * semi.z * f} +
              comp.mu;
        }
        pts.push_back(x);
        targets[i] = synth::gt_occupied(scaffold, x, rho) ? 1.0f : 0.0f;
      }

      ad::Tapef tape;
      nn::NetCtx<float> ctx{tape, params, true, {}};
      Var logits = decoder.logits_tape(ctx, scaffold, ctx.p(latent_key(c, v)), pts);
      // Stable BCE: mean(softplus(l) - y*l).
      Var loss = mean_all(tape, sub(tape, softplus(tape, logits),
                                    mul(tape, logits, tape.constant(targets))));
      double lv = tape.value(loss)[0];
      if (!std::isfinite(lv)) abort_nan("decoder", step);
      tape.backward(loss);
      auto grads = ctx.grads();
      nn::clip_grad_norm(grads, cfg.train.grad_clip);
      opt.step(params, grads);
      if (step % cfg.train.log_every == 0) log.row("decoder", step, 0, 0, 0, lv);
      (void)pool;
    }

    // Latent normalization statistics for the latent diffusion.
    int h = cfg.model.latent_dim;
    Tensorf mu({h}), sigma({h});
    int count = 0;
    for (int c = 0; c < sc.class_count; ++c)
      for (int v = 0; v < sc.templates_per_class; ++v) {
        const Tensorf& z = params.at(latent_key(c, v));
        for (int64_t i = 0; i < z.numel(); ++i) mu[i % h] += z[i];
        count += cfg.model.g;
      }
    for (int64_t i = 0; i < h; ++i) mu[i] /= float(count);
    for (int c = 0; c < sc.class_count; ++c)
      for (int v = 0; v < sc.templates_per_class; ++v) {
        const Tensorf& z = params.at(latent_key(c, v));
        for (int64_t i = 0; i < z.numel(); ++i) {
          float d = z[i] - mu[i % h];
          sigma[i % h] += d * d;
        }
      }
    for (int64_t i = 0; i < h; ++i)
      sigma[i] = std::max(std::sqrt(sigma[i] / float(count)), 1e-3f);
    params.tensors["latstat.mu"] = mu;
    params.tensors["latstat.sigma"] = sigma;
    Tensorf smu({16}), ssig({16});
    for (int i = 0; i < 16; ++i) {
      smu[i] = float(ds.shape_mu[size_t(i)]);
      ssig[i] = float(ds.shape_sigma[size_t(i)]);
    }
    params.tensors["shapestat.mu"] = smu;
    params.tensors["shapestat.sigma"] = ssig;
  }

  // Cached depth targets per (scene, object) for the joint stage.
  std::vector<std::vector<std::vector<Vec3>>> depth_targets(ds.scenes.size());
  auto targets_for = [&](size_t si, size_t oi) -> const std::vector<Vec3>& {
    auto& per_scene = depth_targets[si];
    if (per_scene.empty()) {
      per_scene.resize(ds.scenes[si].spec.objects.size());
      for (size_t k = 0; k < per_scene.size(); ++k) {
        try {
          std::vector<Vec3> full = align::backproject_depth(ds.scenes[si].obs, int(k));
          // Deterministic subsample for the training estimator.
          size_t cap = size_t(cfg.train.align_targets);
          if (full.size() > cap) {
            std::vector<Vec3> picked;
            double stride = double(full.size()) / double(cap);
            for (size_t t = 0; t < cap; ++t) picked.push_back(full[size_t(t * stride)]);
            full = std::move(picked);
          }
          per_scene[k] = std::move(full);
        } catch (const Error&) {
          // fully occluded object: stays empty and is masked out
        }
      }
    }
    return per_scene[oi];
  };

  // ---------------------------------------------------------------------
  // Stages 1 (base) and 2 (joint fine-tune with the alignment loss).
  // ---------------------------------------------------------------------
  nn::AdamW opt;
  opt.lr = cfg.train.lr;
  opt.beta1 = cfg.train.adam_beta1;
  opt.beta2 = cfg.train.adam_beta2;
  opt.weight_decay = cfg.train.weight_decay;

  bool joint_enabled = !flags.no_joint && !flags.regression_1step && cfg.train.steps_joint > 0;
  int total_steps = cfg.train.steps_base + (joint_enabled ? cfg.train.steps_joint : 0);

  for (int step = 0; step < total_steps; ++step) {
    bool joint = step >= cfg.train.steps_base;
    const std::string stage = joint ? "joint" : "base";

    std::vector<size_t> batch;
    for (int b = 0; b < cfg.train.batch_scenes; ++b)
      batch.push_back(size_t(rng.uniform_index(ds.scenes.size())));

    ad::Tapef tape;
    nn::NetCtx<float> ctx{tape, params, true, {}};

    // Conditions, scene-wise drop.
    std::vector<Var> y_parts;
    std::vector<int> scene_of, t_of_scene, t_of_obj;
    std::vector<std::pair<size_t, size_t>> obj_index;  // (scene, object)
    int64_t total_objs = 0;
    for (size_t b = 0; b < batch.size(); ++b) {
      const SceneRecord& rec = ds.scenes[batch[b]];
      bool drop = diff::should_drop_condition(cfg.diffusion.drop_p, rng);
      y_parts.push_back(assemble_condition(ctx, ccfg, observations(rec), sc.image_w, sc.image_h,
                                           drop));
      int t_scene = flags.regression_1step ? cfg.diffusion.T
                                           : 1 + int(rng.uniform_index(uint64_t(cfg.diffusion.T)));
      t_of_scene.push_back(t_scene);
      for (size_t k = 0; k < rec.spec.objects.size(); ++k) {
        scene_of.push_back(int(b));
        obj_index.push_back({batch[b], k});
        t_of_obj.push_back(flags.regression_1step
                               ? cfg.diffusion.T
                               : 1 + int(rng.uniform_index(uint64_t(cfg.diffusion.T))));
        total_objs++;
      }
    }
    Var y_all = concat(tape, y_parts, 0);

    // Pose branch.
    pose::PoseNormalizer norm = pose::PoseNormalizer::defaults(sc.camera());
    Tensorf pose_x0({total_objs, 7}), pose_eps({total_objs, 7}), pose_noisy({total_objs, 7});
    Tensorf xhat_a({total_objs, 7}), xhat_b({total_objs, 7});
    for (int64_t i = 0; i < total_objs; ++i) {
      auto [si, oi] = obj_index[size_t(i)];
      pose::Pose7 p7 = pose::normalize_pose(ds.scenes[si].spec.objects[oi].pose, norm);
      int t = t_of_scene[size_t(scene_of[size_t(i)])];
      double abar = sched.alpha_bar(t);
      for (int k = 0; k < 7; ++k) {
        double x0 = p7[size_t(k)];
        double eps = rng.normal();
        double xt = flags.regression_1step ? 0.0
                                           : std::sqrt(abar) * x0 + std::sqrt(1 - abar) * eps;
        pose_x0[i * 7 + k] = float(x0);
        pose_eps[i * 7 + k] = float(eps);
        pose_noisy[i * 7 + k] = float(xt);
        xhat_a[i * 7 + k] = float(xt / std::sqrt(abar));
        xhat_b[i * 7 + k] = float(-std::sqrt(1 - abar) / std::sqrt(abar));
      }
    }
    Var pose_out = pose_net.forward(ctx, tape.constant(pose_noisy), scene_of,
                                    int(batch.size()), t_of_scene, y_all);
    Var pose_target = tape.constant(flags.regression_1step ? pose_x0 : pose_eps);
    Var dpose = sub(tape, pose_out, pose_target);
    Var l_pose = mean_all(tape, mul(tape, dpose, dpose));

    // Shape branch.
    int g = cfg.model.g;
    Tensorf shape_x0({total_objs, g, 16}), shape_eps({total_objs, g, 16}),
        shape_noisy({total_objs, g, 16});
    Tensorf sx_a({total_objs, g, 16}), sx_b({total_objs, g, 16});
    for (int64_t i = 0; i < total_objs; ++i) {
      auto [si, oi] = obj_index[size_t(i)];
      Tensorf x0 = normalized_scaffold(ds, ds.scenes[si].spec.objects[oi]);
      int t = t_of_obj[size_t(i)];
      double abar = sched.alpha_bar(t);
      for (int64_t k = 0; k < x0.numel(); ++k) {
        double eps = rng.normal();
        double xt = flags.regression_1step ? 0.0
                                           : std::sqrt(abar) * x0[k] + std::sqrt(1 - abar) * eps;
        shape_x0[i * g * 16 + k] = x0[k];
        shape_eps[i * g * 16 + k] = float(eps);
        shape_noisy[i * g * 16 + k] = float(xt);
        sx_a[i * g * 16 + k] = float(xt / std::sqrt(abar));
        sx_b[i * g * 16 + k] = float(-std::sqrt(1 - abar) / std::sqrt(abar));
      }
    }
    Var cond3 = net::condition_tokens(ctx, "shape", y_all, ccfg.box_dim(), ccfg.feat_width,
                                      ccfg.class_count);
    Var shape_out =
        shape_net.forward(ctx, tape.constant(shape_noisy), t_of_obj, cond3);
    Var shape_target = tape.constant(flags.regression_1step ? shape_x0 : shape_eps);
    Var dshape = sub(tape, shape_out, shape_target);
    Var l_shape = mean_all(tape, mul(tape, dshape, dshape));

    // Latent branch (teacher forcing: clean scaffold as condition).
    int h = cfg.model.latent_dim;
    const Tensorf& lat_mu = params.at("latstat.mu");
    const Tensorf& lat_sigma = params.at("latstat.sigma");
    Tensorf lat_x0({total_objs, g, h}), lat_eps({total_objs, g, h}), lat_noisy({total_objs, g, h});
    Tensorf lat_cond({total_objs, g, 16});
    std::vector<int> t_of_lat(size_t(total_objs), 0);
    for (int64_t i = 0; i < total_objs; ++i) {
      auto [si, oi] = obj_index[size_t(i)];
      const synth::SceneObject& o = ds.scenes[si].spec.objects[oi];
      const Tensorf& z = params.at(latent_key(o.class_id, o.variant));
      int t = flags.regression_1step ? cfg.diffusion.T
                                     : 1 + int(rng.uniform_index(uint64_t(cfg.diffusion.T)));
      t_of_lat[size_t(i)] = t;
      double abar = sched.alpha_bar(t);
      for (int64_t k = 0; k < z.numel(); ++k) {
        double x0 = (z[k] - lat_mu[k % h]) / lat_sigma[k % h];
        double eps = rng.normal();
        double xt = flags.regression_1step ? 0.0
                                           : std::sqrt(abar) * x0 + std::sqrt(1 - abar) * eps;
        lat_x0[i * g * h + k] = float(x0);
        lat_eps[i * g * h + k] = float(eps);
        lat_noisy[i * g * h + k] = float(xt);
      }
      Tensorf scaf = normalized_scaffold(ds, o);
      for (int64_t k = 0; k < scaf.numel(); ++k) lat_cond[i * g * 16 + k] = scaf[k];
    }
    Var lat_out = latent_net.forward(ctx, tape.constant(lat_noisy), t_of_lat,
                                     tape.constant(lat_cond));
    Var lat_target = tape.constant(flags.regression_1step ? lat_x0 : lat_eps);
    Var dlat = sub(tape, lat_out, lat_target);
    Var l_latent = mean_all(tape, mul(tape, dlat, dlat));

    Var loss = add(tape, add(tape, l_pose, l_shape), l_latent);

    double la_val = 0;
    if (joint) {
      // x0 reconstructions on the tape, clamped into the plausible
      // normalized band (at high t the reconstruction is noise-dominated
      // and unclamped values blow up the alignment geometry).
      auto clamp_range = [&](Var v, double lo, double hi) {
        Var low = clamp_min(tape, v, lo);
        return affine(tape, clamp_min(tape, affine(tape, low, -1.0, 0.0), -hi), -1.0, 0.0);
      };
      Var pose_xhat = clamp_range(add(tape, tape.constant(xhat_a),
                                      mul(tape, pose_out, tape.constant(xhat_b))),
                                  -3.0, 3.0);
      Var shape_xhat = clamp_range(
          add(tape, tape.constant(sx_a), mul(tape, shape_out, tape.constant(sx_b))), -3.0, 3.0);
      Tensorf smu({16}), ssig({16});
      for (int i = 0; i < 16; ++i) {
        smu[i] = float(ds.shape_mu[size_t(i)]);
        ssig[i] = float(ds.shape_sigma[size_t(i)]);
      }
      Var shape_raw = add(tape, mul(tape, shape_xhat, tape.constant(ssig)),
                          tape.constant(smu));
      std::vector<Var> terms;
      for (int64_t i = 0; i < total_objs; ++i) {
        auto [si, oi] = obj_index[size_t(i)];
        const std::vector<Vec3>& tgt = targets_for(si, oi);
        if (tgt.empty()) continue;
        const synth::SceneObject& o = ds.scenes[si].spec.objects[oi];
        Var prow = reshape(tape, slice(tape, pose_xhat, 0, i, 1), {7});
        Var srow = reshape(tape, slice(tape, shape_raw, 0, i, 1), {int64_t(g), 16});
        Tensorf zdraw({g, cfg.train.align_m, 3});
        for (int64_t k = 0; k < zdraw.numel(); ++k) zdraw[k] = float(rng.normal());
        terms.push_back(align::alignment_term_tape(tape, prow, srow, zdraw, tgt, norm,
                                                   {o.box2d.cx(), o.box2d.cy()}, sc.camera()));
      }
      if (!terms.empty()) {
        Var sum = terms[0];
        for (size_t k = 1; k < terms.size(); ++k) sum = add(tape, sum, terms[k]);
        Var l_align = affine(tape, sum, 1.0 / double(terms.size()), 0.0);
        la_val = tape.value(l_align)[0];
        loss = add(tape, loss, affine(tape, l_align, cfg.train.lambda_align, 0.0));
      }
    }

    double lv = tape.value(loss)[0];
    if (!std::isfinite(lv)) abort_nan(stage, step);
    tape.backward(loss);
    auto grads = ctx.grads();
    nn::clip_grad_norm(grads, cfg.train.grad_clip);
    opt.step(params, grads);

    if (step % cfg.train.log_every == 0 || step + 1 == total_steps)
      log.row(stage, step, tape.value(l_pose)[0], tape.value(l_shape)[0],
              tape.value(l_latent)[0], la_val);
  }

  save_params((fs::path(run_dir) / "checkpoint.sde1").string(), params);
  nlohmann::json manifest{{"status", "complete"},
                          {"config_hash", cfg::config_hash(cfg)},
                          {"dataset", dataset_dir},
                          {"source", "scenediff-0.1"},
                          {"no_isa", flags.no_isa},
                          {"no_joint", flags.no_joint},
                          {"regression_1step", flags.regression_1step},
                          {"steps_total", total_steps}};
  std::ofstream mf(fs::path(run_dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

}  // namespace pipeline
