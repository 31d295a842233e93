#include "config.hpp"

#include <fstream>
#include <sstream>

namespace voxlm {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <typename T, size_t N>
void read_array(const json& j, const char* key, std::array<T, N>& out) {
    if (!j.contains(key)) return;
    const json& a = j.at(key);
    if (!a.is_array() || a.size() != N)
        throw ConfigError(std::string("config: ") + key + " must be an array of " +
                          std::to_string(N));
    for (size_t i = 0; i < N; ++i) out[i] = a[i].get<T>();
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

RunConfig RunConfig::preset(const std::string& name) {
    RunConfig cfg; // defaults are the toy preset
    if (name == "toy") return cfg;
    if (name == "paper-scale") {
        cfg.preprocess.target_dims = {224, 224, 112};
        cfg.vit.input_dims = {224, 224, 112};
        cfg.vit.patch_size = {16, 16, 8};
        cfg.vit.embed_dim = 1536;
        cfg.vit.encoder_depth = 12;
        cfg.vit.encoder_heads = 16;
        cfg.vit.decoder_dim = 512;
        cfg.vit.decoder_depth = 2;
        cfg.vit.decoder_heads = 16;
        cfg.perceiver.out_channels = 4096;
        cfg.lm.d_model = 4096;
        cfg.lm.layers = 32;
        cfg.lm.heads = 32;
        cfg.phantom.base_dims = {168, 168, 84};
        return cfg;
    }
    throw ConfigError("config: unknown preset '" + name + "' (expected toy or paper-scale)");
}

void RunConfig::overlay_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path + ": " + e.what());
    }
    overlay_json(j);
}

void RunConfig::overlay_json(const json& j) {
    try {
        if (j.contains("preprocess")) {
            const json& p = j["preprocess"];
            read_array(p, "target_spacing", preprocess.target_spacing);
            read_array(p, "hu_window", preprocess.hu_window);
            read_array(p, "target_dims", preprocess.target_dims);
            read_field(p, "pad_fill", preprocess.pad_fill);
        }
        if (j.contains("vit")) {
            const json& v = j["vit"];
            read_array(v, "input_dims", vit.input_dims);
            read_array(v, "patch_size", vit.patch_size);
            read_field(v, "embed_dim", vit.embed_dim);
            read_field(v, "encoder_depth", vit.encoder_depth);
            read_field(v, "encoder_heads", vit.encoder_heads);
            read_field(v, "decoder_dim", vit.decoder_dim);
            read_field(v, "decoder_depth", vit.decoder_depth);
            read_field(v, "decoder_heads", vit.decoder_heads);
            read_field(v, "mask_ratio", vit.mask_ratio);
        }
        if (j.contains("perceiver")) {
            const json& p = j["perceiver"];
            if (p.contains("kind")) perceiver.kind = perceiver_kind_from(p["kind"].get<std::string>());
            read_field(p, "k", perceiver.k);
            read_field(p, "out_channels", perceiver.out_channels);
            read_field(p, "qformer_layers", perceiver.qformer_layers);
            read_field(p, "qformer_heads", perceiver.qformer_heads);
            read_field(p, "mixer_expansion", perceiver.mixer_expansion);
        }
        if (j.contains("lm")) {
            const json& l = j["lm"];
            read_field(l, "d_model", lm.d_model);
            read_field(l, "layers", lm.layers);
            read_field(l, "heads", lm.heads);
            read_field(l, "max_seq_len", lm.max_seq_len);
            read_field(l, "ff_expansion", lm.ff_expansion);
        }
        if (j.contains("lora")) {
            const json& l = j["lora"];
            read_field(l, "rank", lora.rank);
            read_field(l, "alpha", lora.alpha);
            read_field(l, "dropout", lora.dropout);
        }
        if (j.contains("train")) {
            const json& t = j["train"];
            read_field(t, "seed", train.seed);
            read_field(t, "batch_size", train.batch_size);
            read_field(t, "mae_steps", train.mae_steps);
            read_field(t, "mae_lr", train.mae_lr);
            read_field(t, "lr_decay", train.lr_decay);
            read_field(t, "sft_stage1_lr", train.sft_stage1_lr);
            read_field(t, "sft_stage2_lr", train.sft_stage2_lr);
            read_field(t, "sft_epochs", train.sft_epochs);
            read_field(t, "max_new_tokens", train.max_new_tokens);
            read_field(t, "vocab_min_count", train.vocab_min_count);
            read_field(t, "error_budget", train.error_budget);
            read_field(t, "test_fraction", train.test_fraction);
        }
        if (j.contains("phantom")) {
            const json& p = j["phantom"];
            read_array(p, "base_dims", phantom.base_dims);
            read_array(p, "spacing", phantom.spacing);
            read_field(p, "dims_jitter", phantom.dims_jitter);
            read_field(p, "noise_sigma", phantom.noise_sigma);
            read_field(p, "diameter_min_mm", phantom.diameter_min_mm);
            read_field(p, "diameter_max_mm", phantom.diameter_max_mm);
            read_field(p, "max_lesions", phantom.max_lesions);
        }
        read_field(j, "threads", threads);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

void RunConfig::set_key(const std::string& dotted_key, const std::string& value) {
    json leaf;
    try {
        leaf = json::parse(value);
    } catch (const json::exception&) {
        leaf = value; // plain string, e.g. perceiver.kind=avg_pool
    }
    json root;
    json* cur = &root;
    std::istringstream is(dotted_key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(is, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("config: empty key in --set");
    for (size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
    (*cur)[parts.back()] = leaf;
    overlay_json(root);
}

void RunConfig::validate() const {
    try {
        preprocess.validate();
        vit.validate();
        lm.validate();
        lora.validate();
        if (vit.input_dims != preprocess.target_dims)
            throw ConfigError("config: vit.input_dims must equal preprocess.target_dims");
        perceiver.validate(vit.grid().dims);
        if (perceiver.out_channels != lm.d_model)
            throw ConfigError("config: perceiver.out_channels (" +
                              std::to_string(perceiver.out_channels) + ") must equal lm.d_model (" +
                              std::to_string(lm.d_model) + ")");
        const int64_t prefix = perceiver.out_tokens(vit.grid().dims);
        if (lm.max_seq_len < prefix + 2)
            throw ConfigError("config: lm.max_seq_len must cover the image prefix of " +
                              std::to_string(prefix) + " tokens plus text");
        if (train.batch_size < 1) throw ConfigError("config: train.batch_size must be >= 1");
        if (threads < 1) throw ConfigError("config: threads must be >= 1");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["preprocess"] = {{"target_spacing", preprocess.target_spacing},
                       {"hu_window", preprocess.hu_window},
                       {"target_dims", preprocess.target_dims},
                       {"pad_fill", preprocess.pad_fill}};
    j["vit"] = {{"input_dims", vit.input_dims},
                {"patch_size", vit.patch_size},
                {"embed_dim", vit.embed_dim},
                {"encoder_depth", vit.encoder_depth},
                {"encoder_heads", vit.encoder_heads},
                {"decoder_dim", vit.decoder_dim},
                {"decoder_depth", vit.decoder_depth},
                {"decoder_heads", vit.decoder_heads},
                {"mask_ratio", vit.mask_ratio}};
    j["perceiver"] = {{"kind", to_string(perceiver.kind)},
                      {"k", perceiver.k},
                      {"out_channels", perceiver.out_channels},
                      {"qformer_layers", perceiver.qformer_layers},
                      {"qformer_heads", perceiver.qformer_heads},
                      {"mixer_expansion", perceiver.mixer_expansion}};
    j["lm"] = {{"d_model", lm.d_model},
               {"layers", lm.layers},
               {"heads", lm.heads},
               {"max_seq_len", lm.max_seq_len},
               {"ff_expansion", lm.ff_expansion}};
    j["lora"] = {{"rank", lora.rank}, {"alpha", lora.alpha}, {"dropout", lora.dropout}};
    j["train"] = {{"seed", train.seed},
                  {"batch_size", train.batch_size},
                  {"mae_steps", train.mae_steps},
                  {"mae_lr", train.mae_lr},
                  {"lr_decay", train.lr_decay},
                  {"sft_stage1_lr", train.sft_stage1_lr},
                  {"sft_stage2_lr", train.sft_stage2_lr},
                  {"sft_epochs", train.sft_epochs},
                  {"max_new_tokens", train.max_new_tokens},
                  {"vocab_min_count", train.vocab_min_count},
                  {"error_budget", train.error_budget},
                  {"test_fraction", train.test_fraction}};
    j["phantom"] = {{"base_dims", phantom.base_dims},
                    {"spacing", phantom.spacing},
                    {"dims_jitter", phantom.dims_jitter},
                    {"noise_sigma", phantom.noise_sigma},
                    {"diameter_min_mm", phantom.diameter_min_mm},
                    {"diameter_max_mm", phantom.diameter_max_mm},
                    {"max_lesions", phantom.max_lesions}};
    j["threads"] = threads;
    return j;
}

std::string RunConfig::hash_hex() const {
    uint64_t h = fnv1a64(to_json().dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace voxlm
