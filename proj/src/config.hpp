#pragma once

#include <json.hpp>

#include "lm.hpp"
#include "perceiver.hpp"
#include "phantom.hpp"

namespace voxlm {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    uint64_t seed = 1;
    int64_t batch_size = 8;
    int64_t mae_steps = 300;
    double mae_lr = 1.5e-4;
    double lr_decay = 0.95;
    double sft_stage1_lr = 1e-4;
    double sft_stage2_lr = 5e-5;
    int64_t sft_epochs = 1;
    int64_t max_new_tokens = 32;
    int64_t vocab_min_count = 1;
    int64_t error_budget = 5;
    double test_fraction = 0.1;
};

// Everything one run needs, with cross-field consistency enforced at load.
struct RunConfig {
    PreprocessConfig preprocess;
    ViT3DConfig vit;
    PerceiverSpec perceiver;
    LMConfig lm;
    LoRAConfig lora;
    TrainConfig train;
    PhantomParams phantom;
    int threads = 1;

    static RunConfig preset(const std::string& name); // "toy" or "paper-scale"

    void overlay_file(const std::string& path);
    void overlay_json(const nlohmann::json& j);
    void set_key(const std::string& dotted_key, const std::string& value);

    void validate() const;

    nlohmann::ordered_json to_json() const;
    std::string hash_hex() const;
};

} // namespace voxlm
