#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "scenediff/diffusion.hpp"
#include "scenediff/pipeline.hpp"

namespace sde::pipeline {

namespace fs = std::filesystem;
using ad::Tensorf;
using ad::Var;
using nlohmann::json;

namespace {

struct LoadedModels {
  nn::ParamStore<float> params;
  bool no_isa = false;
  bool regression = false;
};

LoadedModels load_run(const std::string& run_dir) {
  LoadedModels m;
  m.params = load_params((fs::path(run_dir) / "checkpoint.sde1").string());
  std::ifstream f(fs::path(run_dir) / "manifest.json");
  require(bool(f), ErrorCode::io, "missing run manifest in '" + run_dir + "'");
  json j = json::parse(f);
  require(j.value("status", "") == "complete", ErrorCode::invalid_argument,
          "run '" + run_dir + "' did not finish training");
  m.no_isa = j.value("no_isa", false);
  m.regression = j.value("regression_1step", false);
  return m;
}

json pose_json(const pose::ObjectPose& p) {
  return {{"delta", {p.delta.x, p.delta.y}},
          {"d", p.dist},
          {"size", {p.size.x, p.size.y, p.size.z}},
          {"yaw", p.yaw}};
}

// All scenes of a sampling batch share one token matrix; the scene mask in
// the pose denoiser keeps them independent, the set denoisers batch per
// object by construction.
struct BatchLayout {
  std::vector<int> scene_of;       // per object token
  std::vector<int64_t> obj_scene;  // same, as sizes per scene
  int64_t total = 0;
  int scenes = 0;
};

}  // namespace

void sample_run(const cfg::RunConfig& cfg, const std::string& run_dir,
                const std::string& dataset_dir, const std::string& out_dir,
                const SampleFlags& flags) {
  LoadedModels run = load_run(run_dir);
  nn::ParamStore<float>& params = run.params;

  diff::NoiseSchedule sched =
      diff::make_linear_schedule(cfg.diffusion.T, cfg.diffusion.beta1, cfg.diffusion.betaT);
  cond::ConditionConfig ccfg = cfg.cond_config();
  net::PoseDenoiser pose_net(cfg.pose_config(!run.no_isa));
  net::SetDenoiser shape_net(cfg.shape_denoiser_config());
  net::SetDenoiser latent_net(cfg.latent_denoiser_config());
  shape::OccupancyDecoder decoder(cfg.decoder_config());

  int steps = flags.steps > 0 ? flags.steps : cfg.sample.steps;
  double guidance = flags.guidance >= 0 ? flags.guidance : cfg.sample.guidance;
  uint64_t seed = flags.seed >= 0 ? uint64_t(flags.seed) : cfg.seed;

  const Tensorf& smu = params.at("shapestat.mu");
  const Tensorf& ssig = params.at("shapestat.sigma");
  const Tensorf& lmu = params.at("latstat.mu");
  const Tensorf& lsig = params.at("latstat.sigma");
  int g = cfg.model.g;
  int h = cfg.model.latent_dim;

  fs::create_directories(out_dir);
  cfg::save_config((fs::path(out_dir) / "config.json").string(), cfg);

  pose::PoseNormalizer norm = pose::PoseNormalizer::defaults(cfg.synth_config().camera());
  synth::SynthConfig sc = cfg.synth_config();

  // Gather conditions for the whole batch.
  BatchLayout layout;
  Tensorf y_cond, y_null;
  std::vector<int> classes;
  std::vector<cond::Box2D> boxes;
  std::vector<std::string> scene_names;
  bool conditional = !flags.unconditional;

  if (conditional) {
    Dataset ds = load_dataset(dataset_dir);
    ad::Tapef tape;
    nn::NetCtx<float> ctx{tape, params, false, {}};
    std::vector<Var> yc, yn;
    for (size_t si = 0; si < ds.scenes.size(); ++si) {
      const SceneRecord& rec = ds.scenes[si];
      std::vector<cond::ObjectObservation> obs;
      for (size_t k = 0; k < rec.spec.objects.size(); ++k) {
        obs.push_back({rec.spec.objects[k].box2d, rec.patches[k], rec.spec.objects[k].class_id});
        layout.scene_of.push_back(int(si));
        classes.push_back(rec.spec.objects[k].class_id);
        boxes.push_back(rec.spec.objects[k].box2d);
        layout.total++;
      }
      layout.obj_scene.push_back(int64_t(rec.spec.objects.size()));
      yc.push_back(assemble_condition(ctx, ccfg, obs, sc.image_w, sc.image_h, false));
      yn.push_back(assemble_condition(ctx, ccfg, obs, sc.image_w, sc.image_h, true));
      char buf[32];
      std::snprintf(buf, sizeof buf, "scene_%04zu", si);
      scene_names.push_back(buf);
    }
    layout.scenes = int(ds.scenes.size());
    y_cond = tape.value(concat(tape, yc, 0));
    y_null = tape.value(concat(tape, yn, 0));
  } else {
    int draws = cfg.sample.unconditional_draws;
    ad::Tapef tape;
    nn::NetCtx<float> ctx{tape, params, false, {}};
    std::vector<Var> yn;
    for (int d = 0; d < draws; ++d) {
      layout.scene_of.push_back(d);
      layout.obj_scene.push_back(1);
      layout.total++;
      std::vector<cond::ObjectObservation> dummy(1, cond::ObjectObservation{});
      yn.push_back(assemble_condition(ctx, ccfg, dummy, sc.image_w, sc.image_h, true));
      char buf[32];
      std::snprintf(buf, sizeof buf, "draw_%04d", d);
      scene_names.push_back(buf);
    }
    layout.scenes = draws;
    y_null = tape.value(concat(tape, yn, 0));
    y_cond = y_null;
  }
  int64_t N = layout.total;

  auto pose_eps = [&](const Tensorf& x, int t, bool use_cond) {
    ad::Tapef tape;
    nn::NetCtx<float> ctx{tape, params, false, {}};
    std::vector<int> t_scene(size_t(layout.scenes), t);
    Var out = pose_net.forward(ctx, tape.constant(x), layout.scene_of, layout.scenes, t_scene,
                               tape.constant(use_cond ? y_cond : y_null));
    return tape.value(out);
  };
  auto shape_eps = [&](const Tensorf& x, int t, bool use_cond) {
    ad::Tapef tape;
    nn::NetCtx<float> ctx{tape, params, false, {}};
    Var cond3 = net::condition_tokens(ctx, "shape", tape.constant(use_cond ? y_cond : y_null),
                                      ccfg.box_dim(), ccfg.feat_width, ccfg.class_count);
    Var out = shape_net.forward(ctx, tape.constant(x), std::vector<int>(size_t(N), t), cond3);
    return tape.value(out);
  };

  // Per-scene RNG substreams keep individual scenes reproducible; the
  // initial noise is drawn per scene in token order.
  auto draw_initial = [&](Tensorf& x, uint64_t tag, int64_t per_token) {
    int64_t row = 0;
    for (int si = 0; si < layout.scenes; ++si) {
      Rng r(mix_seed(seed, tag, uint64_t(si)));
      for (int64_t k = 0; k < layout.obj_scene[size_t(si)] * per_token; ++k)
        x[row * per_token + k] = float(r.normal());
      row += layout.obj_scene[size_t(si)];
    }
  };

  Rng chain_rng(mix_seed(seed, 0xEE));
  Tensorf pose_xn({N, 7});
  Tensorf shape_xn({N, g, 16});
  if (run.regression) {
    pose_xn = pose_eps(Tensorf({N, 7}), cfg.diffusion.T, conditional);
    shape_xn = shape_eps(Tensorf({N, g, 16}), cfg.diffusion.T, conditional);
  } else {
    Tensorf xT({N, 7});
    draw_initial(xT, 0x5A5A, 7);
    auto pose_fn = [&](const Tensorf& x, int t, bool c) {
      return pose_eps(x, t, conditional && c);
    };
    pose_xn = diff::ddim_sample(pose_fn, xT, sched, steps, cfg.sample.eta, guidance,
                                chain_rng, cfg.sample.clip_x0);
    Tensorf sT({N, g, 16});
    draw_initial(sT, 0x5B5B, int64_t(g) * 16);
    auto shape_fn = [&](const Tensorf& x, int t, bool c) {
      return shape_eps(x, t, conditional && c);
    };
    shape_xn = diff::ddim_sample(shape_fn, sT, sched, steps, cfg.sample.eta, guidance,
                                 chain_rng, cfg.sample.clip_x0);
  }

  auto lat_eps = [&](const Tensorf& x, int t, bool) {
    ad::Tapef tape;
    nn::NetCtx<float> ctx{tape, params, false, {}};
    Var out = latent_net.forward(ctx, tape.constant(x), std::vector<int>(size_t(N), t),
                                 tape.constant(shape_xn));
    return tape.value(out);
  };
  Tensorf lat_xn({N, g, h});
  if (run.regression) {
    lat_xn = lat_eps(Tensorf({N, g, h}), cfg.diffusion.T, true);
  } else {
    Tensorf lT({N, g, h});
    draw_initial(lT, 0x5C5C, int64_t(g) * h);
    lat_xn = diff::ddim_sample(lat_eps, lT, sched, steps, cfg.sample.eta, 1.0, chain_rng,
                               cfg.sample.clip_x0);
  }

  // Decode and write per-scene outputs.
  int res = cfg.sample.mesh_res;
  double dmn = cfg.model.decoder.domain;
  double spacing = 2.0 * dmn / (res - 1);
  Vec3 origin{-dmn, -dmn, -dmn};
  std::vector<Vec3> grid;
  grid.reserve(size_t(res) * res * res);
  for (int pz = 0; pz < res; ++pz)
    for (int py = 0; py < res; ++py)
      for (int px = 0; px < res; ++px)
        grid.push_back(origin + Vec3{double(px), double(py), double(pz)} * spacing);

  int64_t row = 0;
  for (int si = 0; si < layout.scenes; ++si) {
    fs::path dir = fs::path(out_dir) / scene_names[size_t(si)];
    fs::create_directories(dir);
    json report;
    report["objects"] = json::array();
    for (int64_t k = 0; k < layout.obj_scene[size_t(si)]; ++k, ++row) {
      pose::Pose7 p7;
      for (int c = 0; c < 7; ++c) p7[size_t(c)] = pose_xn[row * 7 + c];
      pose::ObjectPose p = pose::denormalize_pose(p7, norm);

      std::vector<double> raw(size_t(g) * 16);
      for (size_t c = 0; c < raw.size(); ++c)
        raw[c] = double(shape_xn[row * g * 16 + int64_t(c)]) * ssig[int64_t(c % 16)] +
                 smu[int64_t(c % 16)];
      shape::GaussianScaffold scaffold = shape::unpack_shape_code(raw);

      Tensorf z({g, h});
      for (int64_t c = 0; c < z.numel(); ++c)
        z[c] = lat_xn[row * g * h + c] * lsig[c % h] + lmu[c % h];

      std::vector<float> field = decoder.evaluate(scaffold, z, params, grid, true);
      shape::Mesh mesh = shape::marching_cubes(field, res, cfg.sample.mesh_iso, origin, spacing);
      std::string mesh_name = "obj_" + std::to_string(k) + ".obj";
      shape::write_obj((dir / mesh_name).string(), mesh);
      if (flags.write_ply)
        shape::write_ply((dir / ("obj_" + std::to_string(k) + ".ply")).string(), mesh);

      json jo;
      jo["class"] = conditional ? classes[size_t(row)] : -1;
      jo["pose"] = pose_json(p);
      json p7j = json::array();
      for (double v : p7) p7j.push_back(v);
      jo["pose_norm"] = p7j;
      jo["scaffold_raw"] = raw;
      jo["latent"] = z.vec();
      if (conditional)
        jo["box"] = {boxes[size_t(row)].left, boxes[size_t(row)].top, boxes[size_t(row)].right,
                     boxes[size_t(row)].bottom};
      jo["mesh"] = mesh_name;
      jo["empty_mesh"] = mesh.empty();
      report["objects"].push_back(jo);
    }
    std::ofstream rf(dir / "report.json");
    rf << report.dump() << "\n";
  }
}

}  // namespace sde::pipeline
