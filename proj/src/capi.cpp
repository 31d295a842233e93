#include "voxlm/voxlm.h"

#include <array>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <optional>
#include <string>

#include "checkpoint.hpp"
#include "pipeline.hpp"

using namespace voxlm;

struct voxlm_config {
    RunConfig cfg;
};

struct voxlm_volume {
    Volume vol;
};

namespace {

thread_local std::string g_last_error;

voxlm_status classify(const std::exception& e) {
    g_last_error = e.what();
    if (dynamic_cast<const ConfigError*>(&e)) return VOXLM_ERR_CONFIG;
    if (dynamic_cast<const CheckpointError*>(&e)) return VOXLM_ERR_CHECKPOINT;
    if (dynamic_cast<const FormatError*>(&e)) return VOXLM_ERR_DATA;
    return VOXLM_ERR_RUNTIME;
}

template <typename F>
voxlm_status guarded(F&& fn) {
    try {
        fn();
        return VOXLM_OK;
    } catch (const std::exception& e) {
        return classify(e);
    } catch (...) {
        g_last_error = "unknown error";
        return VOXLM_ERR_RUNTIME;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

voxlm_status require(bool cond, const char* what) {
    if (cond) return VOXLM_OK;
    g_last_error = std::string("null argument: ") + what;
    return VOXLM_ERR_RUNTIME;
}

std::optional<std::array<int64_t, 3>> parse_dims(const char* dims) {
    if (!dims || !*dims) return std::nullopt;
    long long x = 0, y = 0, z = 0;
    if (std::sscanf(dims, "%lldx%lldx%lld", &x, &y, &z) != 3 || x < 1 || y < 1 || z < 1)
        throw ConfigError(std::string("gen-data: bad --dims '") + dims + "', expected XxYxZ");
    return std::array<int64_t, 3>{x, y, z};
}

} // namespace

extern "C" {

const char* voxlm_last_error(void) { return g_last_error.c_str(); }

void voxlm_string_free(char* s) { std::free(s); }

voxlm_status voxlm_config_create(const char* preset, voxlm_config** out) {
    if (voxlm_status s = require(preset && out, "preset/out")) return s;
    return guarded([&] { *out = new voxlm_config{RunConfig::preset(preset)}; });
}

voxlm_status voxlm_config_load_file(voxlm_config* cfg, const char* json_path) {
    if (voxlm_status s = require(cfg && json_path, "cfg/json_path")) return s;
    return guarded([&] { cfg->cfg.overlay_file(json_path); });
}

voxlm_status voxlm_config_set(voxlm_config* cfg, const char* key, const char* value) {
    if (voxlm_status s = require(cfg && key && value, "cfg/key/value")) return s;
    return guarded([&] { cfg->cfg.set_key(key, value); });
}

voxlm_status voxlm_config_validate(const voxlm_config* cfg) {
    if (voxlm_status s = require(cfg != nullptr, "cfg")) return s;
    return guarded([&] { cfg->cfg.validate(); });
}

voxlm_status voxlm_config_to_json(const voxlm_config* cfg, char** out_json) {
    if (voxlm_status s = require(cfg && out_json, "cfg/out_json")) return s;
    return guarded([&] { *out_json = dup_string(cfg->cfg.to_json().dump(2)); });
}

voxlm_status voxlm_config_hash(const voxlm_config* cfg, char** out_hex) {
    if (voxlm_status s = require(cfg && out_hex, "cfg/out_hex")) return s;
    return guarded([&] { *out_hex = dup_string(cfg->cfg.hash_hex()); });
}

void voxlm_config_free(voxlm_config* cfg) { delete cfg; }

voxlm_status voxlm_volume_read(const char* rvol_path, voxlm_volume** out) {
    if (voxlm_status s = require(rvol_path && out, "path/out")) return s;
    return guarded([&] { *out = new voxlm_volume{read_rvol(rvol_path)}; });
}

voxlm_status voxlm_volume_dims(const voxlm_volume* v, int64_t dims[3]) {
    if (voxlm_status s = require(v && dims, "volume/dims")) return s;
    for (int a = 0; a < 3; ++a) dims[a] = v->vol.dims[a];
    return VOXLM_OK;
}

voxlm_status voxlm_volume_spacing(const voxlm_volume* v, float spacing[3]) {
    if (voxlm_status s = require(v && spacing, "volume/spacing")) return s;
    for (int a = 0; a < 3; ++a) spacing[a] = v->vol.spacing[a];
    return VOXLM_OK;
}

voxlm_status voxlm_volume_write(const voxlm_volume* v, const char* rvol_path) {
    if (voxlm_status s = require(v && rvol_path, "volume/path")) return s;
    return guarded([&] { write_rvol(v->vol, rvol_path); });
}

void voxlm_volume_free(voxlm_volume* v) { delete v; }

voxlm_status voxlm_shapes(const voxlm_config* cfg, char** out_text) {
    if (voxlm_status s = require(cfg && out_text, "cfg/out_text")) return s;
    return guarded([&] { *out_text = dup_string(pipeline::shapes_report(cfg->cfg)); });
}

voxlm_status voxlm_gen_data(const voxlm_config* cfg, const char* out_dir, int64_t n_volumes,
                            uint64_t seed, const char* dims, int force) {
    if (voxlm_status s = require(cfg && out_dir, "cfg/out_dir")) return s;
    return guarded([&] {
        pipeline::gen_data(cfg->cfg, out_dir, n_volumes, seed, parse_dims(dims), force != 0);
    });
}

voxlm_status voxlm_pretrain_mae(const voxlm_config* cfg, const char* data_dir,
                                const char* out_ckpt, const char* log_path, int64_t steps) {
    if (voxlm_status s = require(cfg && data_dir && out_ckpt, "cfg/data_dir/out_ckpt")) return s;
    return guarded([&] {
        pipeline::pretrain_mae(cfg->cfg, data_dir, out_ckpt, log_path ? log_path : "", steps);
    });
}

voxlm_status voxlm_sft(const voxlm_config* cfg, const char* data_dir, int stage,
                       const char* in_ckpt, const char* out_ckpt, const char* log_path) {
    if (voxlm_status s = require(cfg && data_dir && in_ckpt && out_ckpt, "cfg/data/ckpts"))
        return s;
    return guarded([&] {
        pipeline::sft(cfg->cfg, data_dir, stage, in_ckpt, out_ckpt, log_path ? log_path : "");
    });
}

voxlm_status voxlm_generate(const voxlm_config* cfg, const char* ckpt, const char* volume_path,
                            const char* prompt, int64_t max_new_tokens, char** out_text) {
    if (voxlm_status s = require(cfg && ckpt && volume_path && prompt && out_text, "arguments"))
        return s;
    return guarded([&] {
        *out_text =
            dup_string(pipeline::generate_text(cfg->cfg, ckpt, volume_path, prompt, max_new_tokens));
    });
}

voxlm_status voxlm_eval(const voxlm_config* cfg, const char* ckpt, const char* data_dir,
                        const char* task, const char* report_path) {
    if (voxlm_status s = require(cfg && ckpt && data_dir && task && report_path, "arguments"))
        return s;
    return guarded([&] { pipeline::evaluate(cfg->cfg, ckpt, data_dir, task, report_path); });
}

voxlm_status voxlm_ablate(const voxlm_config* cfg, const char* data_dir, const char* mae_ckpt,
                          const char* out_json, const char* work_dir, char** out_table) {
    if (voxlm_status s = require(cfg && data_dir && mae_ckpt && out_json && work_dir, "arguments"))
        return s;
    return guarded([&] {
        std::string table = pipeline::ablate(cfg->cfg, data_dir, mae_ckpt, out_json, work_dir);
        if (out_table) *out_table = dup_string(table);
    });
}

} // extern "C"
