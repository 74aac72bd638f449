#pragma once
#include <string>
#include <vector>

#include "scenediff/config.hpp"

namespace sde::pipeline {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct SceneRecord {
  synth::SceneSpec spec;
  align::DepthObservation obs;
  std::vector<ad::Tensorf> patches;
};

struct Dataset {
  cfg::RunConfig config;  // resolved config recorded at build time
  std::vector<SceneRecord> scenes;
  std::vector<double> shape_mu, shape_sigma;  // per packed channel (16)
  std::string dir;

  int split() const { return config.data.split == "val" ? 1 : 0; }
};

// Writes manifest + per-scene DPT1/INS1/JSON files; refuses to overwrite an
// existing directory unless force is set. Deterministic per (seed, config).
void build_dataset(const cfg::RunConfig& cfg, const std::string& out_dir, bool force);

Dataset load_dataset(const std::string& dir);

// ---------------------------------------------------------------------------
// Checkpoints ("SDE1": name length, name, rank, extents, f32 values; LE)
// ---------------------------------------------------------------------------

void save_params(const std::string& path, const nn::ParamStore<float>& ps);
nn::ParamStore<float> load_params(const std::string& path);

// ---------------------------------------------------------------------------
// Training / sampling / evaluation
// ---------------------------------------------------------------------------

struct TrainFlags {
  bool no_isa = false;
  bool no_joint = false;
  bool regression_1step = false;
};

void train(const cfg::RunConfig& cfg, const std::string& dataset_dir, const std::string& run_dir,
           const TrainFlags& flags);

struct SampleFlags {
  int steps = -1;          // <0: config value
  double guidance = -1;    // <0: config value
  bool unconditional = false;
  int64_t seed = -1;       // <0: config seed
  bool write_ply = false;
};

void sample_run(const cfg::RunConfig& cfg, const std::string& run_dir,
                const std::string& dataset_dir, const std::string& out_dir,
                const SampleFlags& flags);

struct EvalSummary {
  double mean_iou3d = 0;
  double map15 = 0;
  double mean_cd_x1000 = 0;
  double mean_fscore = 0;
  double l_align = 0;
  int scenes = 0;
  int objects = 0;
  int empty_meshes = 0;
};

EvalSummary evaluate_run(const cfg::RunConfig& cfg, const std::string& pred_dir,
                         const std::string& dataset_dir, const std::string& out_dir,
                         double iou_thresh, double fscore_tau);

}  // namespace sde::pipeline
