/* voxlm — 3-D volume vision-language pipeline, C API.
 *
 * All functions return a voxlm_status; on failure voxlm_last_error() gives
 * a message for the calling thread. Handles are opaque and must be released
 * with their matching free function. Strings returned through out-params
 * are heap-allocated; release them with voxlm_string_free().
 */

#ifndef VOXLM_H
#define VOXLM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum voxlm_status {
    VOXLM_OK = 0,
    VOXLM_ERR_RUNTIME = 1,    /* unexpected failure */
    VOXLM_ERR_CONFIG = 2,     /* invalid or inconsistent configuration */
    VOXLM_ERR_DATA = 3,       /* missing or malformed data/files */
    VOXLM_ERR_CHECKPOINT = 4  /* checkpoint missing, corrupt or mismatched */
} voxlm_status;

const char* voxlm_last_error(void);
void voxlm_string_free(char* s);

/* ---- configuration ---- */

typedef struct voxlm_config voxlm_config;

/* preset is "toy" or "paper-scale" */
voxlm_status voxlm_config_create(const char* preset, voxlm_config** out);
voxlm_status voxlm_config_load_file(voxlm_config* cfg, const char* json_path);
/* dotted key, value parsed as JSON when possible: e.g.
 * ("perceiver.kind", "avg_pool") or ("train.mae_steps", "50") */
voxlm_status voxlm_config_set(voxlm_config* cfg, const char* key, const char* value);
voxlm_status voxlm_config_validate(const voxlm_config* cfg);
voxlm_status voxlm_config_to_json(const voxlm_config* cfg, char** out_json);
voxlm_status voxlm_config_hash(const voxlm_config* cfg, char** out_hex);
void voxlm_config_free(voxlm_config* cfg);

/* ---- volumes ---- */

typedef struct voxlm_volume voxlm_volume;

voxlm_status voxlm_volume_read(const char* rvol_path, voxlm_volume** out);
voxlm_status voxlm_volume_dims(const voxlm_volume* v, int64_t dims[3]);
voxlm_status voxlm_volume_spacing(const voxlm_volume* v, float spacing[3]);
voxlm_status voxlm_volume_write(const voxlm_volume* v, const char* rvol_path);
void voxlm_volume_free(voxlm_volume* v);

/* ---- pipeline commands ---- */

/* weights-free token ledger for the active config */
voxlm_status voxlm_shapes(const voxlm_config* cfg, char** out_text);

/* dims may be NULL, or "XxYxZ" raw phantom dims */
voxlm_status voxlm_gen_data(const voxlm_config* cfg, const char* out_dir, int64_t n_volumes,
                            uint64_t seed, const char* dims, int force);

/* steps <= 0 uses the configured value; log_path may be NULL */
voxlm_status voxlm_pretrain_mae(const voxlm_config* cfg, const char* data_dir,
                                const char* out_ckpt, const char* log_path, int64_t steps);

/* stage 1 takes the MAE checkpoint, stage 2 takes a stage-1 checkpoint */
voxlm_status voxlm_sft(const voxlm_config* cfg, const char* data_dir, int stage,
                       const char* in_ckpt, const char* out_ckpt, const char* log_path);

/* max_new_tokens <= 0 uses the configured value */
voxlm_status voxlm_generate(const voxlm_config* cfg, const char* ckpt, const char* volume_path,
                            const char* prompt, int64_t max_new_tokens, char** out_text);

/* task is "report", "vqa" or "diagnosis"; writes report_path */
voxlm_status voxlm_eval(const voxlm_config* cfg, const char* ckpt, const char* data_dir,
                        const char* task, const char* report_path);

/* runs both SFT stages + VQA eval for all six perceiver kinds; returns the
 * rendered comparison table */
voxlm_status voxlm_ablate(const voxlm_config* cfg, const char* data_dir, const char* mae_ckpt,
                          const char* out_json, const char* work_dir, char** out_table);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* VOXLM_H */
