#pragma once

#include "nn.hpp"
#include "vocab.hpp"
#include "volume.hpp"

namespace voxlm {

struct LMConfig {
    int64_t d_model = 64;
    int64_t layers = 2;
    int64_t heads = 4;
    int64_t max_seq_len = 768;
    int64_t ff_expansion = 4;

    void validate() const {
        if (d_model % heads) throw FormatError("lm: d_model must be divisible by heads");
        if (max_seq_len < 4) throw FormatError("lm: max_seq_len too small");
    }
};

struct LoRAConfig {
    int64_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.1;

    void validate() const {
        if (rank < 1) throw FormatError("lora: rank must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw FormatError("lora: dropout must be in [0, 1)");
    }
};

// one instruction record prepared for the LM: token ids without specials
struct LmSample {
    std::vector<int64_t> prompt;
    std::vector<int64_t> answer;
};

// Decoder-only transformer consuming a projected image-token prefix followed
// by text embeddings, causal attention throughout. The output head is the
// transposed token embedding (weight tying); positions use a fixed sin/cos
// table. Supervision covers answer tokens plus <eos> only.
//
// Embeddings are kept small so the tied head starts near-uniform, and are
// scaled by sqrt(d) on the input side so token identity is not drowned out
// by the positional signal (itself attenuated to a comparable amplitude).
template <typename T>
class DecoderLM {
public:
    DecoderLM() = default;

    DecoderLM(const LMConfig& cfg, int64_t vocab_size, ParamStore<T>& ps, const std::string& prefix,
              Rng& rng)
        : cfg_(cfg), vocab_size_(vocab_size) {
        cfg.validate();
        tok_embed_ = ps.create(prefix + ".tok_embed",
                               Tensor<T>::randn({vocab_size, cfg.d_model}, rng, static_cast<T>(0.02)));
        for (int64_t i = 0; i < cfg.layers; ++i)
            blocks_.emplace_back(ps, prefix + ".block" + std::to_string(i), cfg.d_model, cfg.heads,
                                 cfg.ff_expansion * cfg.d_model, rng);
        final_norm_ = LayerNormModule<T>(ps, prefix + ".norm", cfg.d_model);
        // The base weights never train (only adapters do), so the attention
        // projections start identity-dominant: queries then address keys by
        // content and attended values pass through unmixed, which keeps the
        // frozen stack transparent to the trainable image prefix. The
        // feed-forward branch stays random but attenuated.
        for (auto& blk : blocks_) {
            for (Linear<T>* lin : {&blk.attn.wq, &blk.attn.wk, &blk.attn.wv, &blk.attn.wo}) {
                Tensor<T>& w = lin->w.val_mut();
                for (int64_t r = 0; r < cfg.d_model; ++r)
                    for (int64_t c = 0; c < cfg.d_model; ++c)
                        w.data[static_cast<size_t>(r * cfg.d_model + c)] =
                            (r == c ? T(1) : T(0)) + static_cast<T>(rng.normal() * 0.02);
            }
            for (auto& x : blk.ffn.fc2.w.val_mut().data) x = static_cast<T>(x * 0.1);
        }
        pos_ = sincos_table_1d<T>(cfg.max_seq_len, cfg.d_model);
        const T pos_scale = static_cast<T>(0.2);
        for (auto& v : pos_.data) v *= pos_scale;
        input_scale_ = std::sqrt(static_cast<double>(cfg.d_model));
        block_prefix_ = prefix + ".block";
    }

    const LMConfig& config() const { return cfg_; }
    int64_t vocab_size() const { return vocab_size_; }

    void attach_lora(ParamStore<T>& ps, const LoRAConfig& lora, Rng& rng) {
        lora.validate();
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].attn.attach_lora(ps, block_prefix_ + std::to_string(i) + ".attn", lora.rank,
                                        lora.alpha, lora.dropout, rng);
    }

    bool has_lora() const { return !blocks_.empty() && blocks_[0].attn.lora_q.has_value(); }

    // image_tokens: (B, M, d); text_ids: (B, T_text) padded with kPad.
    // Returns logits over the whole sequence, (B, M + T_text, V).
    Var<T> forward_logits(const Var<T>& image_tokens, const std::vector<std::vector<int64_t>>& text_ids,
                          Rng* train_rng) const {
        const int64_t b = image_tokens.shape()[0];
        const int64_t m = image_tokens.shape()[1];
        if (image_tokens.shape()[2] != cfg_.d_model)
            throw FormatError("lm: image token width " + std::to_string(image_tokens.shape()[2]) +
                              " != d_model " + std::to_string(cfg_.d_model));
        if (static_cast<int64_t>(text_ids.size()) != b)
            throw FormatError("lm: batch size mismatch between image tokens and text");
        const int64_t t_text = static_cast<int64_t>(text_ids[0].size());
        for (const auto& row : text_ids)
            if (static_cast<int64_t>(row.size()) != t_text)
                throw FormatError("lm: ragged text batch, pad rows to a common length first");
        const int64_t total = m + t_text;
        if (total > cfg_.max_seq_len)
            throw FormatError("lm: sequence length " + std::to_string(total) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));

        std::vector<int64_t> flat;
        flat.reserve(static_cast<size_t>(b * t_text));
        for (const auto& row : text_ids) flat.insert(flat.end(), row.begin(), row.end());
        Var<T> text_emb =
            scale(reshape(embedding_lookup(tok_embed_, flat), {b, t_text, cfg_.d_model}),
                  input_scale_);
        Var<T> seq = concat<T>({image_tokens, text_emb}, 1);

        Tensor<T> pos({total, cfg_.d_model});
        std::copy_n(pos_.ptr(), total * cfg_.d_model, pos.ptr());
        seq = add(seq, Var<T>::constant(std::move(pos)));

        for (const auto& blk : blocks_) seq = blk.forward(seq, true, train_rng);
        seq = final_norm_.forward(seq);
        return matmul(seq, transpose(tok_embed_, 0, 1)); // tied head
    }

    std::vector<TransformerBlock<T>>& blocks() { return blocks_; }

private:
    LMConfig cfg_;
    int64_t vocab_size_ = 0;
    Var<T> tok_embed_;
    std::vector<TransformerBlock<T>> blocks_;
    LayerNormModule<T> final_norm_;
    Tensor<T> pos_;
    double input_scale_ = 1.0;
    std::string block_prefix_;
};

// Packs a batch: per row [<bos>] prompt answer [<eos>] right-padded with
// <pad>; loss rows are the positions predicting answer tokens and <eos>.
struct LmBatchPlan {
    std::vector<std::vector<int64_t>> text_ids; // (B, T_text)
    std::vector<int64_t> loss_rows;             // into flattened (B * total, V)
    std::vector<int64_t> targets;
    int64_t total = 0;

    static LmBatchPlan pack(const std::vector<LmSample>& batch, int64_t image_len, int64_t max_seq_len) {
        if (batch.empty()) throw FormatError("lm: empty batch");
        LmBatchPlan plan;
        int64_t t_text = 0;
        for (const auto& s : batch) {
            if (s.answer.empty()) throw FormatError("lm: zero-length answer, nothing to supervise");
            int64_t len = 1 + static_cast<int64_t>(s.prompt.size() + s.answer.size()) + 1;
            if (image_len + len > max_seq_len)
                throw FormatError("lm: prompt+answer of " + std::to_string(len) +
                                  " tokens does not fit max_seq_len " + std::to_string(max_seq_len) +
                                  " with an image prefix of " + std::to_string(image_len));
            t_text = std::max(t_text, len);
        }
        plan.total = image_len + t_text;
        for (size_t i = 0; i < batch.size(); ++i) {
            const auto& s = batch[i];
            std::vector<int64_t> row;
            row.push_back(Vocab::kBos);
            row.insert(row.end(), s.prompt.begin(), s.prompt.end());
            row.insert(row.end(), s.answer.begin(), s.answer.end());
            row.push_back(Vocab::kEos);
            const int64_t p = static_cast<int64_t>(s.prompt.size());
            const int64_t a = static_cast<int64_t>(s.answer.size());
            // supervised positions: text index j in [p, p+a] predicts row[j+1]
            for (int64_t j = p; j <= p + a; ++j) {
                plan.loss_rows.push_back(static_cast<int64_t>(i) * plan.total + image_len + j);
                plan.targets.push_back(row[static_cast<size_t>(j + 1)]);
            }
            row.resize(static_cast<size_t>(t_text), Vocab::kPad);
            plan.text_ids.push_back(std::move(row));
        }
        return plan;
    }
};

template <typename T>
struct LmForwardResult {
    Var<T> logits; // (B, total, V)
    Var<T> loss;   // mean cross entropy over supervised positions
    int64_t supervised = 0;
};

template <typename T>
LmForwardResult<T> lm_forward(const DecoderLM<T>& lm, const Var<T>& image_tokens,
                              const std::vector<LmSample>& batch, Rng* train_rng) {
    LmBatchPlan plan = LmBatchPlan::pack(batch, image_tokens.shape()[1], lm.config().max_seq_len);
    Var<T> logits = lm.forward_logits(image_tokens, plan.text_ids, train_rng);
    const Shape& s = logits.shape();
    Var<T> rows = gather(reshape(logits, {s[0] * s[1], s[2]}), 0, plan.loss_rows);
    Var<T> loss = cross_entropy_loss(rows, plan.targets);
    return LmForwardResult<T>{logits, loss, static_cast<int64_t>(plan.targets.size())};
}

// Greedy decoding: argmax at each step (ties break to the lowest id), until
// <eos>, max_new_tokens, or the context window fills.
template <typename T>
std::vector<int64_t> lm_generate(const DecoderLM<T>& lm, const Var<T>& image_tokens,
                                 const std::vector<int64_t>& prompt, int64_t max_new_tokens) {
    const int64_t m = image_tokens.shape()[1];
    std::vector<int64_t> ids;
    ids.push_back(Vocab::kBos);
    ids.insert(ids.end(), prompt.begin(), prompt.end());
    std::vector<int64_t> out;
    while (static_cast<int64_t>(out.size()) < max_new_tokens &&
           m + static_cast<int64_t>(ids.size()) < lm.config().max_seq_len) {
        Var<T> logits = lm.forward_logits(image_tokens, {ids}, nullptr);
        const int64_t total = logits.shape()[1], v = logits.shape()[2];
        const T* row = logits.val().ptr() + (total - 1) * v;
        int64_t best = 0;
        for (int64_t i = 1; i < v; ++i)
            if (row[i] > row[best]) best = i;
        if (best == Vocab::kEos) break;
        out.push_back(best);
        ids.push_back(best);
    }
    return out;
}

} // namespace voxlm
