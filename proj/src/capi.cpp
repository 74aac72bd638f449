#include "scenediff.h"

#include <cstring>
#include <string>

#include "scenediff/config.hpp"
#include "scenediff/pipeline.hpp"

using sde::Error;
using sde::ErrorCode;

struct sde_config {
  sde::cfg::RunConfig rep;
};

namespace {

thread_local std::string g_last_error;

int code_of(const Error& e) {
  switch (e.code()) {
    case ErrorCode::io:
      return SDE_ERR_IO;
    case ErrorCode::config:
      return SDE_ERR_CONFIG;
    case ErrorCode::numeric:
      return SDE_ERR_NUMERIC;
    case ErrorCode::invalid_argument:
    case ErrorCode::shape_mismatch:
      return SDE_ERR_INVALID;
    default:
      return SDE_ERR_RUNTIME;
  }
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return SDE_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return code_of(e);
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return SDE_ERR_RUNTIME;
  }
}

int require_arg(bool ok, const char* msg) {
  if (ok) return SDE_OK;
  g_last_error = msg;
  return SDE_ERR_INVALID;
}

}  // namespace

extern "C" {

const char* sde_version(void) { return "scenediff 0.1.0"; }

const char* sde_last_error(void) { return g_last_error.c_str(); }

int sde_config_default(sde_config** out) {
  if (int rc = require_arg(out != nullptr, "out is null")) return rc;
  return guarded([&] { *out = new sde_config{sde::cfg::RunConfig{}}; });
}

int sde_config_open(const char* json_path, sde_config** out) {
  if (int rc = require_arg(json_path && out, "null argument")) return rc;
  return guarded([&] { *out = new sde_config{sde::cfg::load_config(json_path)}; });
}

int sde_config_override(sde_config* cfg, const char* dotted_key, const char* json_value) {
  if (int rc = require_arg(cfg && dotted_key && json_value, "null argument")) return rc;
  return guarded([&] { sde::cfg::apply_override(cfg->rep, dotted_key, json_value); });
}

int sde_config_save(const sde_config* cfg, const char* path) {
  if (int rc = require_arg(cfg && path, "null argument")) return rc;
  return guarded([&] { sde::cfg::save_config(path, cfg->rep); });
}

int sde_config_hash(const sde_config* cfg, char* buf, int buf_len) {
  if (int rc = require_arg(cfg && buf && buf_len >= 17, "buffer too small")) return rc;
  return guarded([&] {
    std::string h = sde::cfg::config_hash(cfg->rep);
    std::memcpy(buf, h.c_str(), h.size() + 1);
  });
}

void sde_config_close(sde_config* cfg) { delete cfg; }

int sde_dataset_build(const sde_config* cfg, const char* out_dir, int force) {
  if (int rc = require_arg(cfg && out_dir, "null argument")) return rc;
  return guarded([&] { sde::pipeline::build_dataset(cfg->rep, out_dir, force != 0); });
}

int sde_train(const sde_config* cfg, const char* dataset_dir, const char* run_dir,
              const sde_train_options* opts) {
  if (int rc = require_arg(cfg && dataset_dir && run_dir, "null argument")) return rc;
  return guarded([&] {
    sde::pipeline::TrainFlags flags;
    if (opts) {
      flags.no_isa = opts->no_isa != 0;
      flags.no_joint = opts->no_joint != 0;
      flags.regression_1step = opts->regression_1step != 0;
    }
    sde::pipeline::train(cfg->rep, dataset_dir, run_dir, flags);
  });
}

int sde_sample(const sde_config* cfg, const char* run_dir, const char* dataset_dir,
               const char* out_dir, const sde_sample_options* opts) {
  if (int rc = require_arg(cfg && run_dir && out_dir, "null argument")) return rc;
  return guarded([&] {
    sde::pipeline::SampleFlags flags;
    if (opts) {
      flags.steps = opts->steps;
      flags.guidance = opts->guidance;
      flags.unconditional = opts->unconditional != 0;
      flags.seed = opts->seed;
      flags.write_ply = opts->write_ply != 0;
    }
    if (!flags.unconditional)
      require(dataset_dir != nullptr, ErrorCode::invalid_argument,
              "conditional sampling requires a dataset directory");
    sde::pipeline::sample_run(cfg->rep, run_dir, dataset_dir ? dataset_dir : "", out_dir, flags);
  });
}

int sde_eval(const sde_config* cfg, const char* pred_dir, const char* dataset_dir,
             const char* out_dir, double iou_thresh, double fscore_tau, sde_eval_result* result) {
  if (int rc = require_arg(cfg && pred_dir && dataset_dir && out_dir, "null argument")) return rc;
  return guarded([&] {
    double thr = iou_thresh > 0 ? iou_thresh : cfg->rep.eval.iou_thresh;
    double tau = fscore_tau > 0 ? fscore_tau : cfg->rep.eval.fscore_tau;
    sde::pipeline::EvalSummary s =
        sde::pipeline::evaluate_run(cfg->rep, pred_dir, dataset_dir, out_dir, thr, tau);
    if (result) {
      result->mean_iou3d = s.mean_iou3d;
      result->map15 = s.map15;
      result->mean_cd_x1000 = s.mean_cd_x1000;
      result->mean_fscore = s.mean_fscore;
      result->l_align = s.l_align;
      result->scenes = s.scenes;
      result->objects = s.objects;
      result->empty_meshes = s.empty_meshes;
    }
  });
}

}  // extern "C"
