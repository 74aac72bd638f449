#pragma once
#include <string>

#include "scenediff/condition.hpp"
#include "scenediff/denoiser.hpp"
#include "scenediff/shape.hpp"
#include "scenediff/synth.hpp"

namespace sde::cfg {

struct DataConfig {
  int image = 128;
  double focal = 128.0;
  int class_count = 8;
  int templates_per_class = 4;
  int min_objects = 1;
  int max_objects = 8;
  int scenes = 64;
  std::string split = "train";
  double overlap_iou_max = 0.05;
  double group_prob = 0.65;
  int patch_size = 8;
  double depth_norm = 6.0;
};

struct PoseModelConfig {
  int width = 128;
  int blocks = 8;
  int heads = 8;
  int time_dim = 128;
};

struct SetModelConfig {
  int width = 96;
  int enc_layers = 2;
  int dec_layers = 6;
  int heads = 4;
  int time_dim = 128;
  int mlp_mult = 2;
};

struct DecoderModelConfig {
  double a = 10.0;
  double b = 0.3;
  int hidden = 32;
  double domain = 0.75;  // half-extent of the canonical meshing cube
};

struct ModelConfig {
  PoseModelConfig pose;
  SetModelConfig shape;                      // 2 enc / 6 dec per the architecture
  SetModelConfig latent{96, 6, 6, 4, 128, 2};  // 6 enc / 6 dec
  DecoderModelConfig decoder;
  int g = 16;
  int latent_dim = 64;
  int feat_width = 64;
  int box_freqs = 10;
};

struct DiffusionConfig {
  int T = 1000;
  double beta1 = 1e-4;
  double betaT = 0.02;
  double drop_p = 0.8;
};

struct TrainConfig {
  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double weight_decay = 0.0;
  double grad_clip = 5.0;
  int batch_scenes = 4;
  int steps_decoder = 800;
  int steps_base = 2000;
  int steps_joint = 300;
  int align_m = 96;        // reparameterized draws per Gaussian during training
  int align_targets = 512;  // depth-point subsample per object during training
  double lambda_align = 0.01;
  int log_every = 50;
  int decoder_points = 256;
  double decoder_lr = 3e-3;
};

struct SampleConfig {
  int steps = 100;
  double eta = 0.0;
  double guidance = 1.0;
  double clip_x0 = 2.0;  // 0 disables the per-step x0 clamp
  int mesh_res = 48;
  double mesh_iso = 0.5;
  int unconditional_draws = 100;
};

struct EvalConfig {
  double iou_thresh = 0.15;
  double fscore_tau = 0.05;
  int surface_samples = 2000;
  int mesh_res = 40;
  int align_m = 500;
};

struct RunConfig {
  uint64_t seed = 1234;
  DataConfig data;
  ModelConfig model;
  DiffusionConfig diffusion;
  TrainConfig train;
  SampleConfig sample;
  EvalConfig eval;

  synth::SynthConfig synth_config() const;
  cond::ConditionConfig cond_config() const;
  net::PoseDenoiserConfig pose_config(bool use_isa) const;
  net::SetDenoiserConfig shape_denoiser_config() const;
  net::SetDenoiserConfig latent_denoiser_config() const;
  shape::DecoderConfig decoder_config() const;
};

RunConfig load_config(const std::string& path);
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& cfg);  // canonical, sorted keys
void save_config(const std::string& path, const RunConfig& cfg);

// Dotted-path override, value given as JSON text (e.g. "train.lr", "0.001").
void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& json_value);

// FNV-1a over the canonical dump.
std::string config_hash(const RunConfig& cfg);

}  // namespace sde::cfg
