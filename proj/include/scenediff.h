/* C interface to the scene diffusion engine.
 *
 * All functions return SDE_OK (0) on success or a negative error code;
 * sde_last_error() returns a thread-local message for the most recent
 * failure. Handles are opaque and freed with their matching _close call.
 */
#ifndef SCENEDIFF_H
#define SCENEDIFF_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define SDE_OK 0
#define SDE_ERR_INVALID -1
#define SDE_ERR_IO -2
#define SDE_ERR_CONFIG -3
#define SDE_ERR_NUMERIC -4
#define SDE_ERR_RUNTIME -5

typedef struct sde_config sde_config;

const char* sde_version(void);
const char* sde_last_error(void);

/* Configuration ----------------------------------------------------------- */

/* Built-in desk-scale defaults. */
int sde_config_default(sde_config** out);
int sde_config_open(const char* json_path, sde_config** out);
/* Dotted path (e.g. "train.lr") and a JSON literal (e.g. "0.0005"). */
int sde_config_override(sde_config* cfg, const char* dotted_key, const char* json_value);
int sde_config_save(const sde_config* cfg, const char* path);
/* 16 hex characters + NUL; buffer must hold at least 17 bytes. */
int sde_config_hash(const sde_config* cfg, char* buf, int buf_len);
void sde_config_close(sde_config* cfg);

/* Pipeline ----------------------------------------------------------------- */

int sde_dataset_build(const sde_config* cfg, const char* out_dir, int force);

typedef struct sde_train_options {
  int no_isa;
  int no_joint;
  int regression_1step;
} sde_train_options;

int sde_train(const sde_config* cfg, const char* dataset_dir, const char* run_dir,
              const sde_train_options* opts);

typedef struct sde_sample_options {
  int steps;            /* <= 0: config value */
  double guidance;      /* < 0: config value */
  int unconditional;
  int64_t seed;         /* < 0: config seed */
  int write_ply;
} sde_sample_options;

int sde_sample(const sde_config* cfg, const char* run_dir, const char* dataset_dir,
               const char* out_dir, const sde_sample_options* opts);

typedef struct sde_eval_result {
  double mean_iou3d;
  double map15;          /* fraction in [0,1] */
  double mean_cd_x1000;
  double mean_fscore;
  double l_align;
  int scenes;
  int objects;
  int empty_meshes;
} sde_eval_result;

/* iou_thresh / fscore_tau <= 0 fall back to the config values. */
int sde_eval(const sde_config* cfg, const char* pred_dir, const char* dataset_dir,
             const char* out_dir, double iou_thresh, double fscore_tau, sde_eval_result* result);

#ifdef __cplusplus
}
#endif

#endif /* SCENEDIFF_H */
