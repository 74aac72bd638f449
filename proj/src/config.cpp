#include "scenediff/config.hpp"

#include <fstream>
#include <json.hpp>
#include <set>

namespace sde::cfg {

using nlohmann::json;

namespace {

// Strict section reader: every key must be consumed, unknown keys are errors.
// Holds its section by value; callers pass temporaries.
class Reader {
 public:
  Reader(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    require(j_.is_object(), ErrorCode::config, "config: '" + path_ + "' must be an object");
  }

  template <typename T>
  void num(const char* key, T& out) {
    if (auto it = j_.find(key); it != j_.end()) {
      require(it->is_number(), ErrorCode::config, "config: '" + path_ + "." + key +
                                                      "' must be a number");
      out = it->get<T>();
      seen_.insert(key);
    }
  }

  void str(const char* key, std::string& out) {
    if (auto it = j_.find(key); it != j_.end()) {
      require(it->is_string(), ErrorCode::config, "config: '" + path_ + "." + key +
                                                      "' must be a string");
      out = it->get<std::string>();
      seen_.insert(key);
    }
  }

  json section(const char* key) {
    if (auto it = j_.find(key); it != j_.end()) {
      require(it->is_object(), ErrorCode::config, "config: '" + path_ + "." + key +
                                                      "' must be an object");
      seen_.insert(key);
      return *it;
    }
    return json::object();
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(seen_.count(it.key()) != 0, ErrorCode::config,
              "config: unknown field '" + path_ + "." + it.key() + "'");
  }

 private:
  json j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_set_model(const json& j, const std::string& path, SetModelConfig& m) {
  Reader r(j, path);
  r.num("width", m.width);
  r.num("enc_layers", m.enc_layers);
  r.num("dec_layers", m.dec_layers);
  r.num("heads", m.heads);
  r.num("time_dim", m.time_dim);
  r.num("mlp_mult", m.mlp_mult);
  r.finish();
}

json set_model_json(const SetModelConfig& m) {
  return {{"width", m.width},   {"enc_layers", m.enc_layers}, {"dec_layers", m.dec_layers},
          {"heads", m.heads},   {"time_dim", m.time_dim},     {"mlp_mult", m.mlp_mult}};
}

RunConfig from_json(const json& j) {
  RunConfig c;
  Reader root(j, "");
  root.num("seed", c.seed);
  {
    Reader r(root.section("data"), "data");
    r.num("image", c.data.image);
    r.num("focal", c.data.focal);
    r.num("class_count", c.data.class_count);
    r.num("templates_per_class", c.data.templates_per_class);
    r.num("min_objects", c.data.min_objects);
    r.num("max_objects", c.data.max_objects);
    r.num("scenes", c.data.scenes);
    r.str("split", c.data.split);
    r.num("overlap_iou_max", c.data.overlap_iou_max);
    r.num("group_prob", c.data.group_prob);
    r.num("patch_size", c.data.patch_size);
    r.num("depth_norm", c.data.depth_norm);
    r.finish();
  }
  {
    json jm = root.section("model");
    Reader r(jm, "model");
    {
      Reader rp(r.section("pose"), "model.pose");
      rp.num("width", c.model.pose.width);
      rp.num("blocks", c.model.pose.blocks);
      rp.num("heads", c.model.pose.heads);
      rp.num("time_dim", c.model.pose.time_dim);
      rp.finish();
    }
    read_set_model(r.section("shape"), "model.shape", c.model.shape);
    read_set_model(r.section("latent"), "model.latent", c.model.latent);
    {
      Reader rd(r.section("decoder"), "model.decoder");
      rd.num("a", c.model.decoder.a);
      rd.num("b", c.model.decoder.b);
      rd.num("hidden", c.model.decoder.hidden);
      rd.num("domain", c.model.decoder.domain);
      rd.finish();
    }
    r.num("g", c.model.g);
    r.num("latent_dim", c.model.latent_dim);
    r.num("feat_width", c.model.feat_width);
    r.num("box_freqs", c.model.box_freqs);
    r.finish();
  }
  {
    Reader r(root.section("diffusion"), "diffusion");
    r.num("T", c.diffusion.T);
    r.num("beta1", c.diffusion.beta1);
    r.num("betaT", c.diffusion.betaT);
    r.num("drop_p", c.diffusion.drop_p);
    r.finish();
  }
  {
    Reader r(root.section("train"), "train");
    r.num("lr", c.train.lr);
    r.num("adam_beta1", c.train.adam_beta1);
    r.num("adam_beta2", c.train.adam_beta2);
    r.num("weight_decay", c.train.weight_decay);
    r.num("grad_clip", c.train.grad_clip);
    r.num("batch_scenes", c.train.batch_scenes);
    r.num("steps_decoder", c.train.steps_decoder);
    r.num("steps_base", c.train.steps_base);
    r.num("steps_joint", c.train.steps_joint);
    r.num("align_m", c.train.align_m);
    r.num("align_targets", c.train.align_targets);
    r.num("lambda_align", c.train.lambda_align);
    r.num("log_every", c.train.log_every);
    r.num("decoder_points", c.train.decoder_points);
    r.num("decoder_lr", c.train.decoder_lr);
    r.finish();
  }
  {
    Reader r(root.section("sample"), "sample");
    r.num("steps", c.sample.steps);
    r.num("eta", c.sample.eta);
    r.num("guidance", c.sample.guidance);
    r.num("clip_x0", c.sample.clip_x0);
    r.num("mesh_res", c.sample.mesh_res);
    r.num("mesh_iso", c.sample.mesh_iso);
    r.num("unconditional_draws", c.sample.unconditional_draws);
    r.finish();
  }
  {
    Reader r(root.section("eval"), "eval");
    r.num("iou_thresh", c.eval.iou_thresh);
    r.num("fscore_tau", c.eval.fscore_tau);
    r.num("surface_samples", c.eval.surface_samples);
    r.num("mesh_res", c.eval.mesh_res);
    r.num("align_m", c.eval.align_m);
    r.finish();
  }
  root.finish();

  require(c.data.split == "train" || c.data.split == "val", ErrorCode::config,
          "config: data.split must be 'train' or 'val'");
  require(c.diffusion.T >= 2, ErrorCode::config, "config: diffusion.T must be >= 2");
  require(c.diffusion.drop_p >= 0 && c.diffusion.drop_p <= 1, ErrorCode::config,
          "config: diffusion.drop_p must lie in [0,1]");
  require(c.model.pose.width % c.model.pose.heads == 0, ErrorCode::config,
          "config: model.pose.width must be divisible by heads");
  require(c.sample.steps >= 1 && c.sample.steps <= c.diffusion.T, ErrorCode::config,
          "config: sample.steps must lie in [1, diffusion.T]");
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data"] = {{"image", c.data.image},
               {"focal", c.data.focal},
               {"class_count", c.data.class_count},
               {"templates_per_class", c.data.templates_per_class},
               {"min_objects", c.data.min_objects},
               {"max_objects", c.data.max_objects},
               {"scenes", c.data.scenes},
               {"split", c.data.split},
               {"overlap_iou_max", c.data.overlap_iou_max},
               {"group_prob", c.data.group_prob},
               {"patch_size", c.data.patch_size},
               {"depth_norm", c.data.depth_norm}};
  j["model"] = {{"pose",
                 {{"width", c.model.pose.width},
                  {"blocks", c.model.pose.blocks},
                  {"heads", c.model.pose.heads},
                  {"time_dim", c.model.pose.time_dim}}},
                {"shape", set_model_json(c.model.shape)},
                {"latent", set_model_json(c.model.latent)},
                {"decoder",
                 {{"a", c.model.decoder.a},
                  {"b", c.model.decoder.b},
                  {"hidden", c.model.decoder.hidden},
                  {"domain", c.model.decoder.domain}}},
                {"g", c.model.g},
                {"latent_dim", c.model.latent_dim},
                {"feat_width", c.model.feat_width},
                {"box_freqs", c.model.box_freqs}};
  j["diffusion"] = {{"T", c.diffusion.T},
                    {"beta1", c.diffusion.beta1},
                    {"betaT", c.diffusion.betaT},
                    {"drop_p", c.diffusion.drop_p}};
  j["train"] = {{"lr", c.train.lr},
                {"adam_beta1", c.train.adam_beta1},
                {"adam_beta2", c.train.adam_beta2},
                {"weight_decay", c.train.weight_decay},
                {"grad_clip", c.train.grad_clip},
                {"batch_scenes", c.train.batch_scenes},
                {"steps_decoder", c.train.steps_decoder},
                {"steps_base", c.train.steps_base},
                {"steps_joint", c.train.steps_joint},
                {"align_m", c.train.align_m},
                {"align_targets", c.train.align_targets},
                {"lambda_align", c.train.lambda_align},
                {"log_every", c.train.log_every},
                {"decoder_points", c.train.decoder_points},
                {"decoder_lr", c.train.decoder_lr}};
  j["sample"] = {{"steps", c.sample.steps},
                 {"eta", c.sample.eta},
                 {"guidance", c.sample.guidance},
                 {"clip_x0", c.sample.clip_x0},
                 {"mesh_res", c.sample.mesh_res},
                 {"mesh_iso", c.sample.mesh_iso},
                 {"unconditional_draws", c.sample.unconditional_draws}};
  j["eval"] = {{"iou_thresh", c.eval.iou_thresh},
               {"fscore_tau", c.eval.fscore_tau},
               {"surface_samples", c.eval.surface_samples},
               {"mesh_res", c.eval.mesh_res},
               {"align_m", c.eval.align_m}};
  return j;
}

}  // namespace

synth::SynthConfig RunConfig::synth_config() const {
  synth::SynthConfig s;
  s.seed = seed;
  s.split = data.split == "val" ? 1 : 0;
  s.image_w = data.image;
  s.image_h = data.image;
  s.fx = data.focal;
  s.fy = data.focal;
  s.class_count = data.class_count;
  s.templates_per_class = data.templates_per_class;
  s.g = model.g;
  s.min_objects = data.min_objects;
  s.max_objects = data.max_objects;
  s.overlap_iou_max = data.overlap_iou_max;
  s.group_prob = data.group_prob;
  s.patch_size = data.patch_size;
  s.depth_norm = data.depth_norm;
  return s;
}

cond::ConditionConfig RunConfig::cond_config() const {
  cond::ConditionConfig c;
  c.box_freqs = model.box_freqs;
  c.feat_width = model.feat_width;
  c.class_count = data.class_count;
  c.patch_size = data.patch_size;
  return c;
}

net::PoseDenoiserConfig RunConfig::pose_config(bool use_isa) const {
  net::PoseDenoiserConfig c;
  c.width = model.pose.width;
  c.blocks = model.pose.blocks;
  c.heads = model.pose.heads;
  c.time_dim = model.pose.time_dim;
  c.cond_width = cond_config().width();
  c.use_isa = use_isa;
  return c;
}

net::SetDenoiserConfig RunConfig::shape_denoiser_config() const {
  net::SetDenoiserConfig c;
  c.prefix = "shape";
  c.token_dim = shape::kParamsPerGaussian;
  c.cond_dim = model.shape.width;  // pre-lifted condition tokens
  c.cond_tokens = 3;
  c.width = model.shape.width;
  c.enc_layers = model.shape.enc_layers;
  c.dec_layers = model.shape.dec_layers;
  c.heads = model.shape.heads;
  c.time_dim = model.shape.time_dim;
  c.mlp_mult = model.shape.mlp_mult;
  return c;
}

net::SetDenoiserConfig RunConfig::latent_denoiser_config() const {
  net::SetDenoiserConfig c;
  c.prefix = "lat";
  c.token_dim = model.latent_dim;
  c.cond_dim = shape::kParamsPerGaussian;
  c.cond_tokens = model.g;
  c.width = model.latent.width;
  c.enc_layers = model.latent.enc_layers;
  c.dec_layers = model.latent.dec_layers;
  c.heads = model.latent.heads;
  c.time_dim = model.latent.time_dim;
  c.mlp_mult = model.latent.mlp_mult;
  return c;
}

shape::DecoderConfig RunConfig::decoder_config() const {
  shape::DecoderConfig c;
  c.a = model.decoder.a;
  c.b = model.decoder.b;
  c.g = model.g;
  c.latent_dim = model.latent_dim;
  c.hidden = model.decoder.hidden;
  return c;
}

RunConfig config_from_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  require(!j.is_discarded(), ErrorCode::config, "config: invalid JSON");
  return from_json(j);
}

std::string config_to_json_text(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  require(bool(f), ErrorCode::io, "cannot open config '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return config_from_json_text(text);
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream f(path);
  require(bool(f), ErrorCode::io, "cannot open '" + path + "' for writing");
  f << config_to_json_text(cfg);
}

void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& json_value) {
  json j = to_json(cfg);
  json val = json::parse(json_value, nullptr, false);
  require(!val.is_discarded(), ErrorCode::config,
          "override value for '" + dotted_key + "' is not valid JSON");
  json* node = &j;
  size_t start = 0;
  while (true) {
    size_t dot = dotted_key.find('.', start);
    std::string part = dotted_key.substr(start, dot == std::string::npos ? dot : dot - start);
    require(node->contains(part), ErrorCode::config, "override: unknown field '" + dotted_key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = val;
  cfg = from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  std::string text = config_to_json_text(cfg);
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
  return std::string(buf);
}

}  // namespace sde::cfg
