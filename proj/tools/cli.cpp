// voxlm command-line tool. Talks to the core exclusively through the C API.

#include <CLI11.hpp>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "voxlm/voxlm.h"

namespace {

struct ConfigHandle {
    voxlm_config* cfg = nullptr;
    ~ConfigHandle() { voxlm_config_free(cfg); }
};

struct OwnedString {
    char* s = nullptr;
    ~OwnedString() { voxlm_string_free(s); }
};

int fail(voxlm_status status) {
    std::fprintf(stderr, "error: %s\n", voxlm_last_error());
    return static_cast<int>(status);
}

// shared config flags: --preset, --config (JSON overlay), --set k=v, --threads
struct ConfigFlags {
    std::string preset = "toy";
    std::string config_file;
    std::vector<std::string> sets;
    int threads = 0;

    void attach(CLI::App* app) {
        app->add_option("--preset", preset, "built-in preset: toy or paper-scale");
        app->add_option("--config", config_file, "JSON config overlay file");
        app->add_option("--set", sets, "override one key, e.g. --set train.mae_steps=50");
        app->add_option("--threads", threads, "worker threads (any value is bit-reproducible)");
    }

    voxlm_status build(ConfigHandle& h) const {
        if (voxlm_status s = voxlm_config_create(preset.c_str(), &h.cfg)) return s;
        if (!config_file.empty())
            if (voxlm_status s = voxlm_config_load_file(h.cfg, config_file.c_str())) return s;
        for (const std::string& kv : sets) {
            auto eq = kv.find('=');
            if (eq == std::string::npos) {
                std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
                return VOXLM_ERR_CONFIG;
            }
            if (voxlm_status s = voxlm_config_set(h.cfg, kv.substr(0, eq).c_str(),
                                                  kv.substr(eq + 1).c_str()))
                return s;
        }
        if (threads > 0)
            if (voxlm_status s = voxlm_config_set(h.cfg, "threads", std::to_string(threads).c_str()))
                return s;
        return voxlm_config_validate(h.cfg);
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxlm: 3-D volume vision-language pipeline"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
    ConfigFlags gen_cfg;
    gen_cfg.attach(gen);
    std::string gen_out, gen_dims;
    int64_t gen_n = 600;
    uint64_t gen_seed = 1;
    bool gen_force = false;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--n", gen_n, "number of volumes");
    gen->add_option("--seed", gen_seed, "master seed");
    gen->add_option("--dims", gen_dims, "raw phantom dims XxYxZ");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    // shapes
    auto* shapes = app.add_subcommand("shapes", "print the token ledger for a config");
    ConfigFlags shapes_cfg;
    shapes_cfg.attach(shapes);

    // pretrain-mae
    auto* pre = app.add_subcommand("pretrain-mae", "masked-autoencoder pretraining");
    ConfigFlags pre_cfg;
    pre_cfg.attach(pre);
    std::string pre_data, pre_out, pre_log;
    int64_t pre_steps = -1;
    pre->add_option("--data", pre_data, "dataset directory")->required();
    pre->add_option("--out", pre_out, "output checkpoint path")->required();
    pre->add_option("--log", pre_log, "line-JSON training log path");
    pre->add_option("--steps", pre_steps, "override train.mae_steps");

    // sft
    auto* sft = app.add_subcommand("sft", "supervised fine-tuning stage 1 or 2");
    ConfigFlags sft_cfg;
    sft_cfg.attach(sft);
    std::string sft_data, sft_in, sft_out, sft_log;
    int sft_stage = 1;
    sft->add_option("--data", sft_data, "dataset directory")->required();
    sft->add_option("--stage", sft_stage, "1 (perceiver) or 2 (perceiver + LoRA)")->required();
    sft->add_option("--ckpt", sft_in, "input checkpoint (MAE for stage 1, stage-1 for stage 2)")
        ->required();
    sft->add_option("--out", sft_out, "output checkpoint path")->required();
    sft->add_option("--log", sft_log, "line-JSON training log path");

    // generate
    auto* gen_text = app.add_subcommand("generate", "greedy generation for one volume");
    ConfigFlags gt_cfg;
    gt_cfg.attach(gen_text);
    std::string gt_ckpt, gt_volume, gt_prompt, gt_out;
    int64_t gt_max_new = -1;
    gen_text->add_option("--ckpt", gt_ckpt, "SFT checkpoint")->required();
    gen_text->add_option("--volume", gt_volume, "RVOL volume path")->required();
    gen_text->add_option("--prompt", gt_prompt, "question text (empty for a report)");
    gen_text->add_option("--max-new", gt_max_new, "max generated tokens");
    gen_text->add_option("--out", gt_out, "also write the text to this file");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    ConfigFlags eval_cfg;
    eval_cfg.attach(eval);
    std::string ev_ckpt, ev_data, ev_task, ev_out;
    eval->add_option("--ckpt", ev_ckpt, "SFT checkpoint")->required();
    eval->add_option("--data", ev_data, "dataset directory")->required();
    eval->add_option("--task", ev_task, "report | vqa | diagnosis")->required();
    eval->add_option("--out", ev_out, "report.json output path")->required();

    // ablate
    auto* abl = app.add_subcommand("ablate", "run all six perceiver kinds and compare");
    ConfigFlags abl_cfg;
    abl_cfg.attach(abl);
    std::string ab_data, ab_ckpt, ab_out, ab_work;
    abl->add_option("--data", ab_data, "dataset directory")->required();
    abl->add_option("--ckpt", ab_ckpt, "MAE checkpoint shared by all kinds")->required();
    abl->add_option("--out", ab_out, "comparison JSON output path")->required();
    abl->add_option("--work", ab_work, "working directory for per-kind artifacts")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        ConfigHandle h;
        if (voxlm_status s = gen_cfg.build(h)) return fail(s);
        if (voxlm_status s = voxlm_gen_data(h.cfg, gen_out.c_str(), gen_n, gen_seed,
                                            gen_dims.empty() ? nullptr : gen_dims.c_str(),
                                            gen_force ? 1 : 0))
            return fail(s);
        std::printf("wrote dataset: %s (%lld volumes, seed %llu)\n", gen_out.c_str(),
                    static_cast<long long>(gen_n), static_cast<unsigned long long>(gen_seed));
        return 0;
    }
    if (shapes->parsed()) {
        ConfigHandle h;
        if (voxlm_status s = shapes_cfg.build(h)) return fail(s);
        OwnedString text;
        if (voxlm_status s = voxlm_shapes(h.cfg, &text.s)) return fail(s);
        std::fputs(text.s, stdout);
        return 0;
    }
    if (pre->parsed()) {
        ConfigHandle h;
        if (voxlm_status s = pre_cfg.build(h)) return fail(s);
        if (voxlm_status s = voxlm_pretrain_mae(h.cfg, pre_data.c_str(), pre_out.c_str(),
                                                pre_log.empty() ? nullptr : pre_log.c_str(),
                                                pre_steps))
            return fail(s);
        std::printf("wrote checkpoint: %s\n", pre_out.c_str());
        return 0;
    }
    if (sft->parsed()) {
        ConfigHandle h;
        if (voxlm_status s = sft_cfg.build(h)) return fail(s);
        if (voxlm_status s = voxlm_sft(h.cfg, sft_data.c_str(), sft_stage, sft_in.c_str(),
                                       sft_out.c_str(), sft_log.empty() ? nullptr : sft_log.c_str()))
            return fail(s);
        std::printf("wrote checkpoint: %s\n", sft_out.c_str());
        return 0;
    }
    if (gen_text->parsed()) {
        ConfigHandle h;
        if (voxlm_status s = gt_cfg.build(h)) return fail(s);
        OwnedString text;
        if (voxlm_status s = voxlm_generate(h.cfg, gt_ckpt.c_str(), gt_volume.c_str(),
                                            gt_prompt.c_str(), gt_max_new, &text.s))
            return fail(s);
        std::printf("%s\n", text.s);
        if (!gt_out.empty()) {
            FILE* f = std::fopen(gt_out.c_str(), "w");
            if (!f) {
                std::fprintf(stderr, "error: cannot write %s\n", gt_out.c_str());
                return VOXLM_ERR_DATA;
            }
            std::fprintf(f, "%s\n", text.s);
            std::fclose(f);
        }
        return 0;
    }
    if (eval->parsed()) {
        ConfigHandle h;
        if (voxlm_status s = eval_cfg.build(h)) return fail(s);
        if (voxlm_status s = voxlm_eval(h.cfg, ev_ckpt.c_str(), ev_data.c_str(), ev_task.c_str(),
                                        ev_out.c_str()))
            return fail(s);
        std::printf("wrote report: %s\n", ev_out.c_str());
        return 0;
    }
    if (abl->parsed()) {
        ConfigHandle h;
        if (voxlm_status s = abl_cfg.build(h)) return fail(s);
        OwnedString table;
        if (voxlm_status s = voxlm_ablate(h.cfg, ab_data.c_str(), ab_ckpt.c_str(), ab_out.c_str(),
                                          ab_work.c_str(), &table.s))
            return fail(s);
        std::fputs(table.s, stdout);
        std::printf("wrote comparison: %s\n", ab_out.c_str());
        return 0;
    }
    return 0;
}
