#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "scenediff/parallel.hpp"
#include "scenediff/pipeline.hpp"

namespace sde::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string scene_stem(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", i);
  return buf;
}

json pose_json(const pose::ObjectPose& p) {
  return {{"delta", {p.delta.x, p.delta.y}},
          {"d", p.dist},
          {"size", {p.size.x, p.size.y, p.size.z}},
          {"yaw", p.yaw}};
}

pose::ObjectPose pose_from_json(const json& j) {
  pose::ObjectPose p;
  p.delta = {j.at("delta")[0], j.at("delta")[1]};
  p.dist = j.at("d");
  p.size = {j.at("size")[0], j.at("size")[1], j.at("size")[2]};
  p.yaw = j.at("yaw");
  return p;
}

}  // namespace

void build_dataset(const cfg::RunConfig& cfg, const std::string& out_dir, bool force) {
  fs::path dir(out_dir);
  if (fs::exists(dir)) {
    require(force, ErrorCode::io,
            "dataset path '" + out_dir + "' already exists (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);

  synth::SynthConfig sc = cfg.synth_config();
  int n = cfg.data.scenes;
  std::vector<synth::SceneSpec> specs(size_t(n), synth::SceneSpec{});
  std::vector<synth::RenderResult> renders(size_t(n), synth::RenderResult{});
  parallel_for(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      Rng rng(mix_seed(sc.seed, uint64_t(sc.split), 1000 + uint64_t(i)));
      specs[size_t(i)] = synth::generate_scene(rng, sc);
      renders[size_t(i)] = synth::render_depth(specs[size_t(i)], sc);
    }
  });

  json scene_list = json::array();
  for (int i = 0; i < n; ++i) {
    std::string stem = scene_stem(i);
    align::write_depth((dir / (stem + ".dpt")).string(), renders[size_t(i)].obs);
    align::write_instances((dir / (stem + ".ins")).string(), renders[size_t(i)].obs);

    json js;
    js["camera"] = {{"fx", specs[size_t(i)].camera.fx},
                    {"fy", specs[size_t(i)].camera.fy},
                    {"cx", specs[size_t(i)].camera.cx},
                    {"cy", specs[size_t(i)].camera.cy},
                    {"width", specs[size_t(i)].camera.width},
                    {"height", specs[size_t(i)].camera.height}};
    json objects = json::array();
    for (size_t k = 0; k < specs[size_t(i)].objects.size(); ++k) {
      const synth::SceneObject& o = specs[size_t(i)].objects[k];
      json jo;
      jo["class"] = o.class_id;
      jo["variant"] = o.variant;
      jo["pose"] = pose_json(o.pose);
      jo["box"] = {o.box2d.left, o.box2d.top, o.box2d.right, o.box2d.bottom};
      jo["scaffold"] = shape::pack_shape_code(o.scaffold);
      jo["patch"] = renders[size_t(i)].patches[k].vec();
      objects.push_back(jo);
    }
    js["objects"] = objects;
    std::ofstream f(dir / (stem + ".json"));
    f << js.dump() << "\n";
    scene_list.push_back(stem);
  }

  // Per-channel statistics of the packed shape codes over this split's
  // template pool; the shape diffusion trains in this normalized space.
  std::vector<double> mu(shape::kParamsPerGaussian, 0.0), sigma(shape::kParamsPerGaussian, 0.0);
  int samples = 0;
  for (int c = 0; c < sc.class_count; ++c)
    for (int v = 0; v < sc.templates_per_class; ++v) {
      std::vector<double> packed = shape::pack_shape_code(synth::make_template(sc, c, v));
      for (size_t k = 0; k < packed.size(); ++k) mu[k % 16] += packed[k];
      samples += sc.g;
    }
  for (double& m : mu) m /= double(samples);
  for (int c = 0; c < sc.class_count; ++c)
    for (int v = 0; v < sc.templates_per_class; ++v) {
      std::vector<double> packed = shape::pack_shape_code(synth::make_template(sc, c, v));
      for (size_t k = 0; k < packed.size(); ++k) {
        double d = packed[k] - mu[k % 16];
        sigma[k % 16] += d * d;
      }
    }
  for (double& s : sigma) s = std::max(std::sqrt(s / double(samples)), 1e-3);

  json manifest;
  manifest["format"] = "sde-dataset-v1";
  manifest["seed"] = cfg.seed;
  manifest["split"] = cfg.data.split;
  manifest["scene_count"] = n;
  manifest["scenes"] = scene_list;
  manifest["shape_mu"] = mu;
  manifest["shape_sigma"] = sigma;
  manifest["config"] = json::parse(cfg::config_to_json_text(cfg));
  manifest["config_hash"] = cfg::config_hash(cfg);
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  fs::path root(dir);
  std::ifstream mf(root / "manifest.json");
  require(bool(mf), ErrorCode::io, "cannot open dataset manifest in '" + dir + "'");
  json manifest = json::parse(mf, nullptr, false);
  require(!manifest.is_discarded() && manifest.value("format", "") == "sde-dataset-v1",
          ErrorCode::io, "'" + dir + "' is not an sde dataset");

  Dataset ds;
  ds.dir = dir;
  ds.config = cfg::config_from_json_text(manifest.at("config").dump());
  ds.shape_mu = manifest.at("shape_mu").get<std::vector<double>>();
  ds.shape_sigma = manifest.at("shape_sigma").get<std::vector<double>>();

  for (const auto& stem_j : manifest.at("scenes")) {
    std::string stem = stem_j.get<std::string>();
    SceneRecord rec;
    std::ifstream sf(root / (stem + ".json"));
    require(bool(sf), ErrorCode::io, "missing scene sidecar " + stem);
    json js = json::parse(sf);
    rec.spec.camera = pose::Camera{js["camera"]["fx"], js["camera"]["fy"], js["camera"]["cx"],
                                   js["camera"]["cy"], js["camera"]["width"],
                                   js["camera"]["height"]};
    for (const auto& jo : js["objects"]) {
      synth::SceneObject o;
      o.class_id = jo.at("class");
      o.variant = jo.at("variant");
      o.pose = pose_from_json(jo.at("pose"));
      o.box2d = {jo.at("box")[0], jo.at("box")[1], jo.at("box")[2], jo.at("box")[3]};
      o.scaffold = shape::unpack_shape_code(jo.at("scaffold").get<std::vector<double>>());
      rec.spec.objects.push_back(o);

      std::vector<float> patch = jo.at("patch").get<std::vector<float>>();
      int ps = ds.config.data.patch_size;
      rec.patches.push_back(ad::Tensorf::from({2, ps, ps}, std::move(patch)));
    }
    rec.obs.camera = rec.spec.camera;
    align::read_depth((root / (stem + ".dpt")).string(), rec.obs);
    align::read_instances((root / (stem + ".ins")).string(), rec.obs);
    ds.scenes.push_back(std::move(rec));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_params(const std::string& path, const nn::ParamStore<float>& ps) {
  std::ofstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f.write("SDE1", 4);
  for (const auto& [name, tensor] : ps.tensors) {
    uint32_t len = uint32_t(name.size());
    f.write(reinterpret_cast<const char*>(&len), 4);
    f.write(name.data(), std::streamsize(name.size()));
    uint32_t rank = uint32_t(tensor.rank());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int i = 0; i < tensor.rank(); ++i) {
      uint32_t e = uint32_t(tensor.extent(i));
      f.write(reinterpret_cast<const char*>(&e), 4);
    }
    f.write(reinterpret_cast<const char*>(tensor.data()),
            std::streamsize(tensor.numel() * 4));
  }
}

nn::ParamStore<float> load_params(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(bool(f), ErrorCode::io, "cannot open checkpoint '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  require(f && std::memcmp(magic, "SDE1", 4) == 0, ErrorCode::io,
          "'" + path + "' is not an SDE1 checkpoint");
  nn::ParamStore<float> ps;
  while (true) {
    uint32_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 4);
    if (!f) break;  // clean EOF
    std::string name(len, '\0');
    f.read(name.data(), len);
    uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    ad::Shape shape;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t e = 0;
      f.read(reinterpret_cast<char*>(&e), 4);
      shape.push_back(int64_t(e));
    }
    ad::Tensorf t(shape);
    f.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.numel() * 4));
    require(bool(f), ErrorCode::io, "truncated checkpoint '" + path + "'");
    ps.tensors[name] = std::move(t);
  }
  return ps;
}

}  // namespace sde::pipeline
