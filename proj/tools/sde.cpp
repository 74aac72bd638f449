// Command-line front end; talks to the engine exclusively through the
// C API in scenediff.h.
#include <CLI11.hpp>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "scenediff.h"

namespace {

struct ConfigHandle {
  sde_config* ptr = nullptr;
  ~ConfigHandle() { sde_config_close(ptr); }
};

int bail(int rc, const char* what) {
  std::fprintf(stderr, "sde: %s failed: %s\n", what, sde_last_error());
  return rc == SDE_OK ? 1 : -rc;
}

int open_config(const std::string& path, int64_t seed, const std::vector<std::string>& sets,
                ConfigHandle& out) {
  int rc = path.empty() ? sde_config_default(&out.ptr) : sde_config_open(path.c_str(), &out.ptr);
  if (rc != SDE_OK) return bail(rc, "loading config");
  if (seed >= 0) {
    rc = sde_config_override(out.ptr, "seed", std::to_string(seed).c_str());
    if (rc != SDE_OK) return bail(rc, "applying --seed");
  }
  for (const std::string& kv : sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "sde: --set expects key=json, got '%s'\n", kv.c_str());
      return 1;
    }
    rc = sde_config_override(out.ptr, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
    if (rc != SDE_OK) return bail(rc, "applying --set");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional 3D scene diffusion engine"};
  app.set_version_flag("--version", sde_version());
  app.require_subcommand(1);

  std::string config_path;
  int64_t seed = -1;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_option("--seed", seed, "Override the run seed");
  app.add_option("--set", sets, "Override a config field, e.g. --set train.lr=0.0005");

  auto* cmd_dataset = app.add_subcommand("dataset", "Build a synthetic scene dataset");
  std::string ds_out;
  bool force = false;
  cmd_dataset->add_option("--out", ds_out, "Output directory")->required();
  cmd_dataset->add_flag("--force", force, "Overwrite an existing dataset directory");

  auto* cmd_train = app.add_subcommand("train", "Train the denoisers on a dataset");
  std::string tr_dataset, tr_run;
  bool no_isa = false, no_joint = false, regression = false;
  cmd_train->add_option("--dataset", tr_dataset, "Dataset directory")->required();
  cmd_train->add_option("--run", tr_run, "Run (checkpoint) directory")->required();
  cmd_train->add_flag("--no-isa", no_isa, "Ablation: drop intra-scene attention");
  cmd_train->add_flag("--no-joint", no_joint, "Ablation: skip joint alignment fine-tuning");
  cmd_train->add_flag("--regression-1step", regression,
                      "Ablation: 1-step feed-forward regression instead of diffusion");

  auto* cmd_sample = app.add_subcommand("sample", "Sample poses/shapes and export meshes");
  std::string sm_run, sm_dataset, sm_out;
  int steps = 0;
  double guidance = -1;
  bool unconditional = false, write_ply = false;
  int64_t sample_seed = -1;
  cmd_sample->add_option("--run", sm_run, "Trained run directory")->required();
  cmd_sample->add_option("--dataset", sm_dataset, "Dataset with observations to condition on");
  cmd_sample->add_option("--out", sm_out, "Prediction output directory")->required();
  cmd_sample->add_option("--steps", steps, "DDIM step count (default from config: 100)");
  cmd_sample->add_option("--guidance-weight", guidance, "Classifier-free guidance weight");
  cmd_sample->add_flag("--unconditional", unconditional, "Sample with the null condition");
  cmd_sample->add_flag("--ply", write_ply, "Also export binary PLY meshes");
  cmd_sample->add_option("--sample-seed", sample_seed, "Sampling RNG seed");

  auto* cmd_eval = app.add_subcommand("eval", "Evaluate predictions against a dataset");
  std::string ev_pred, ev_dataset, ev_out;
  double iou_thresh = -1, fscore_tau = -1;
  cmd_eval->add_option("--pred", ev_pred, "Prediction directory")->required();
  cmd_eval->add_option("--dataset", ev_dataset, "Ground-truth dataset directory")->required();
  cmd_eval->add_option("--out", ev_out, "Metrics output directory")->required();
  cmd_eval->add_option("--iou-thresh", iou_thresh, "AP IoU threshold (default 0.15)");
  cmd_eval->add_option("--fscore-tau", fscore_tau, "F-score distance threshold (default 0.05)");

  CLI11_PARSE(app, argc, argv);

  ConfigHandle cfg;
  if (int rc = open_config(config_path, seed, sets, cfg)) return rc;

  if (cmd_dataset->parsed()) {
    int rc = sde_dataset_build(cfg.ptr, ds_out.c_str(), force ? 1 : 0);
    if (rc != SDE_OK) return bail(rc, "dataset");
    std::printf("dataset written to %s\n", ds_out.c_str());
  } else if (cmd_train->parsed()) {
    sde_train_options opts{no_isa ? 1 : 0, no_joint ? 1 : 0, regression ? 1 : 0};
    int rc = sde_train(cfg.ptr, tr_dataset.c_str(), tr_run.c_str(), &opts);
    if (rc != SDE_OK) return bail(rc, "train");
    std::printf("training complete: %s\n", tr_run.c_str());
  } else if (cmd_sample->parsed()) {
    sde_sample_options opts{steps, guidance, unconditional ? 1 : 0, sample_seed,
                            write_ply ? 1 : 0};
    int rc = sde_sample(cfg.ptr, sm_run.c_str(), sm_dataset.empty() ? nullptr : sm_dataset.c_str(),
                        sm_out.c_str(), &opts);
    if (rc != SDE_OK) return bail(rc, "sample");
    std::printf("predictions written to %s\n", sm_out.c_str());
  } else if (cmd_eval->parsed()) {
    sde_eval_result res{};
    int rc = sde_eval(cfg.ptr, ev_pred.c_str(), ev_dataset.c_str(), ev_out.c_str(), iou_thresh,
                      fscore_tau, &res);
    if (rc != SDE_OK) return bail(rc, "eval");
    std::printf("IoU3D %.4f  mAP15 %.2f  CDx1e3 %.3f  F %.2f  L_align %.5f\n", res.mean_iou3d,
                res.map15 * 100.0, res.mean_cd_x1000, res.mean_fscore, res.l_align);
  }
  return 0;
}
