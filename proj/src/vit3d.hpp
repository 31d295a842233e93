#pragma once

#include "nn.hpp"
#include "volume.hpp"

namespace voxlm {

struct PatchGrid {
    std::array<int64_t, 3> dims{0, 0, 0}; // (H, W, D) = (x, y, z) patch counts
    int64_t count() const { return dims[0] * dims[1] * dims[2]; }
};

struct ViT3DConfig {
    std::array<int64_t, 3> input_dims{64, 64, 32};
    std::array<int64_t, 3> patch_size{8, 8, 4};
    int64_t embed_dim = 64;
    int64_t encoder_depth = 2;
    int64_t encoder_heads = 4;
    int64_t decoder_dim = 32;
    int64_t decoder_depth = 1;
    int64_t decoder_heads = 4;
    double mask_ratio = 0.75;

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (patch_size[a] < 1 || input_dims[a] < 1)
                throw FormatError("vit3d: dims and patch sizes must be >= 1");
            if (input_dims[a] % patch_size[a])
                throw FormatError("vit3d: patch size must divide input dims on axis " +
                                  std::to_string(a));
        }
        if (embed_dim % encoder_heads || decoder_dim % decoder_heads)
            throw FormatError("vit3d: embed dims must be divisible by head counts");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
            throw FormatError("vit3d: mask_ratio must be in (0, 1)");
    }

    PatchGrid grid() const {
        return PatchGrid{{input_dims[0] / patch_size[0], input_dims[1] / patch_size[1],
                          input_dims[2] / patch_size[2]}};
    }

    int64_t patch_voxels() const { return patch_size[0] * patch_size[1] * patch_size[2]; }
};

// Random token partition for masking. keep/masked are each ascending;
// `restore` maps original token index -> position in (keep ++ masked), i.e.
// it inverts the shuffle used to pack visible tokens first.
struct MaskPlan {
    std::vector<int64_t> keep, masked, restore;

    static MaskPlan draw(int64_t n, double ratio, Rng& rng) {
        if (n < 2) throw FormatError("mask: need at least 2 tokens");
        if (!(ratio > 0.0 && ratio < 1.0)) throw FormatError("mask: ratio must be in (0, 1)");
        int64_t n_keep = std::llround(static_cast<double>(n) * (1.0 - ratio));
        n_keep = std::max<int64_t>(1, std::min<int64_t>(n - 1, n_keep));
        std::vector<int64_t> perm(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
        rng.shuffle(perm);
        MaskPlan p;
        p.keep.assign(perm.begin(), perm.begin() + n_keep);
        p.masked.assign(perm.begin() + n_keep, perm.end());
        std::sort(p.keep.begin(), p.keep.end());
        std::sort(p.masked.begin(), p.masked.end());
        p.restore.resize(static_cast<size_t>(n));
        for (size_t i = 0; i < p.keep.size(); ++i) p.restore[static_cast<size_t>(p.keep[i])] = static_cast<int64_t>(i);
        for (size_t i = 0; i < p.masked.size(); ++i)
            p.restore[static_cast<size_t>(p.masked[i])] = static_cast<int64_t>(p.keep.size() + i);
        return p;
    }
};

// Token sequence with its source patch grid attached; the shared currency
// between encoder, perceiver and language model.
template <typename T>
struct TokenBatch {
    Var<T> values; // (B, N, C)
    std::array<int64_t, 3> grid{0, 0, 0};
};

// token n = gh*(W*D) + gw*D + gd; voxels within a patch are x-fastest
template <typename T>
Tensor<T> patchify(const std::vector<Grid<T>>& grids, const std::array<int64_t, 3>& patch) {
    if (grids.empty()) throw FormatError("patchify: empty batch");
    const auto dims = grids[0].dims;
    for (const auto& g : grids)
        if (g.dims != dims) throw FormatError("patchify: mixed grid dims in batch");
    for (int a = 0; a < 3; ++a)
        if (dims[a] % patch[a])
            throw FormatError("patchify: patch size must divide grid dims on axis " + std::to_string(a));
    const int64_t H = dims[0] / patch[0], W = dims[1] / patch[1], D = dims[2] / patch[2];
    const int64_t n = H * W * D, p = patch[0] * patch[1] * patch[2];
    const int64_t b = static_cast<int64_t>(grids.size());
    Tensor<T> out({b, n, p});
    for (int64_t bi = 0; bi < b; ++bi) {
        const Grid<T>& g = grids[static_cast<size_t>(bi)];
        for (int64_t gh = 0; gh < H; ++gh)
            for (int64_t gw = 0; gw < W; ++gw)
                for (int64_t gd = 0; gd < D; ++gd) {
                    const int64_t tok = gh * (W * D) + gw * D + gd;
                    T* dst = out.ptr() + (bi * n + tok) * p;
                    for (int64_t kz = 0; kz < patch[2]; ++kz)
                        for (int64_t ky = 0; ky < patch[1]; ++ky)
                            for (int64_t kx = 0; kx < patch[0]; ++kx)
                                dst[kx + patch[0] * (ky + patch[1] * kz)] = g.values[static_cast<size_t>(
                                    g.index(gh * patch[0] + kx, gw * patch[1] + ky, gd * patch[2] + kz))];
                }
    }
    return out;
}

template <typename T>
std::vector<Grid<T>> unpatchify(const Tensor<T>& tokens, const std::array<int64_t, 3>& patch,
                                const PatchGrid& grid) {
    if (tokens.ndim() != 3) throw FormatError("unpatchify: expected (B, N, P) tokens");
    const int64_t H = grid.dims[0], W = grid.dims[1], D = grid.dims[2];
    const int64_t p = patch[0] * patch[1] * patch[2];
    if (tokens.dim(1) != grid.count() || tokens.dim(2) != p)
        throw FormatError("unpatchify: token layout " + shape_str(tokens.shape) +
                          " does not match grid/patch sizes");
    const int64_t b = tokens.dim(0);
    std::vector<Grid<T>> out(static_cast<size_t>(b));
    for (int64_t bi = 0; bi < b; ++bi) {
        Grid<T>& g = out[static_cast<size_t>(bi)];
        g.dims = {H * patch[0], W * patch[1], D * patch[2]};
        g.values.resize(static_cast<size_t>(g.numel()));
        for (int64_t gh = 0; gh < H; ++gh)
            for (int64_t gw = 0; gw < W; ++gw)
                for (int64_t gd = 0; gd < D; ++gd) {
                    const int64_t tok = gh * (W * D) + gw * D + gd;
                    const T* src = tokens.ptr() + (bi * grid.count() + tok) * p;
                    for (int64_t kz = 0; kz < patch[2]; ++kz)
                        for (int64_t ky = 0; ky < patch[1]; ++ky)
                            for (int64_t kx = 0; kx < patch[0]; ++kx)
                                g.values[static_cast<size_t>(g.index(gh * patch[0] + kx,
                                                                     gw * patch[1] + ky,
                                                                     gd * patch[2] + kz))] =
                                    src[kx + patch[0] * (ky + patch[1] * kz)];
                }
    }
    return out;
}

// Fixed 3-D sin/cos table: each axis gets (C - C%6)/3 interleaved sin/cos
// channels of its grid coordinate; the C%6 leftover channels stay zero.
template <typename T>
Tensor<T> sincos_pos_embed_3d(const PatchGrid& grid, int64_t channels) {
    if (channels < 6) throw FormatError("pos_embed: need at least 6 channels");
    const int64_t usable = channels - channels % 6;
    const int64_t per_axis = usable / 3;
    Tensor<T> tables[3];
    for (int a = 0; a < 3; ++a) tables[a] = sincos_table_1d<T>(grid.dims[a], per_axis);
    Tensor<T> out({grid.count(), channels});
    int64_t n = 0;
    for (int64_t gh = 0; gh < grid.dims[0]; ++gh)
        for (int64_t gw = 0; gw < grid.dims[1]; ++gw)
            for (int64_t gd = 0; gd < grid.dims[2]; ++gd, ++n) {
                T* row = out.ptr() + n * channels;
                const int64_t coords[3] = {gh, gw, gd};
                for (int a = 0; a < 3; ++a)
                    std::copy_n(tables[a].ptr() + coords[a] * per_axis, per_axis, row + a * per_axis);
            }
    return out;
}

// Masked autoencoder over 3-D patches: visible tokens through the encoder,
// one shared learned mask token re-inserted at every masked slot, a light
// decoder, and MSE on the masked patches only.
template <typename T>
class Mae {
public:
    Mae(const ViT3DConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = Rng(seed).derive(0x3ae);
        const int64_t c = cfg_.embed_dim, cd = cfg_.decoder_dim, p = cfg_.patch_voxels();
        patch_embed_ = Linear<T>(ps_, "encoder.patch_embed", p, c, rng);
        for (int64_t i = 0; i < cfg_.encoder_depth; ++i)
            enc_blocks_.emplace_back(ps_, "encoder.block" + std::to_string(i), c,
                                     cfg_.encoder_heads, 4 * c, rng);
        enc_norm_ = LayerNormModule<T>(ps_, "encoder.norm", c);
        enc_to_dec_ = Linear<T>(ps_, "decoder.embed", c, cd, rng);
        mask_token_ = ps_.create("decoder.mask_token", Tensor<T>::randn({cd}, rng, static_cast<T>(0.02)));
        for (int64_t i = 0; i < cfg_.decoder_depth; ++i)
            dec_blocks_.emplace_back(ps_, "decoder.block" + std::to_string(i), cd,
                                     cfg_.decoder_heads, 4 * cd, rng);
        dec_norm_ = LayerNormModule<T>(ps_, "decoder.norm", cd);
        dec_head_ = Linear<T>(ps_, "decoder.head", cd, p, rng);
        pos_enc_ = sincos_pos_embed_3d<T>(cfg_.grid(), c);
        pos_dec_ = sincos_pos_embed_3d<T>(cfg_.grid(), cd);
    }

    const ViT3DConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return ps_; }
    const ParamStore<T>& params() const { return ps_; }
    Var<T> mask_token() const { return mask_token_; }

    // all tokens, no masking: (B, N, C) with the patch grid attached
    TokenBatch<T> encode(const Tensor<T>& patches) const {
        Var<T> x = embed(patches);
        for (const auto& blk : enc_blocks_) x = blk.forward(x, false, nullptr);
        x = enc_norm_.forward(x);
        return TokenBatch<T>{x, cfg_.grid().dims};
    }

    struct MaeResult {
        Var<T> recon; // (B, N, patch_voxels), all positions
        Var<T> loss;  // masked-position MSE
        MaskPlan plan;
    };

    MaeResult forward_mae(const Tensor<T>& patches, Rng& rng) const {
        MaskPlan plan = MaskPlan::draw(cfg_.grid().count(), cfg_.mask_ratio, rng);
        Var<T> recon = reconstruct(patches, plan);
        Var<T> loss = masked_mse(recon, patches, plan);
        return MaeResult{recon, loss, plan};
    }

    Var<T> reconstruct(const Tensor<T>& patches, const MaskPlan& plan) const {
        const int64_t b = patches.dim(0);
        const int64_t n_mask = static_cast<int64_t>(plan.masked.size());
        Var<T> x = embed(patches);
        x = gather(x, 1, plan.keep); // visible tokens only
        for (const auto& blk : enc_blocks_) x = blk.forward(x, false, nullptr);
        x = enc_norm_.forward(x);
        Var<T> vis = enc_to_dec_.forward(x); // (B, n_keep, Cd)
        Var<T> mask_tok = tile_leading(tile_leading(mask_token_, n_mask), b); // (B, n_mask, Cd)
        Var<T> seq = concat<T>({vis, mask_tok}, 1);   // shuffled order: keep ++ masked
        seq = gather(seq, 1, plan.restore);           // back to original token order
        seq = add(seq, Var<T>::constant(pos_dec_));   // decoder positions, added after re-insertion
        for (const auto& blk : dec_blocks_) seq = blk.forward(seq, false, nullptr);
        seq = dec_norm_.forward(seq);
        return dec_head_.forward(seq); // (B, N, P)
    }

    Var<T> masked_mse(const Var<T>& recon, const Tensor<T>& patches, const MaskPlan& plan) const {
        Var<T> pred = gather(recon, 1, plan.masked);
        Var<T> target = gather(Var<T>::constant(patches), 1, plan.masked);
        return mse_loss(pred, target);
    }

private:
    Var<T> embed(const Tensor<T>& patches) const {
        if (patches.ndim() != 3 || patches.dim(1) != cfg_.grid().count() ||
            patches.dim(2) != cfg_.patch_voxels())
            throw FormatError("mae: patch tensor " + shape_str(patches.shape) +
                              " does not match config");
        Var<T> x = patch_embed_.forward(Var<T>::constant(patches));
        return add(x, Var<T>::constant(pos_enc_)); // (N, C) broadcasts over batch
    }

    ViT3DConfig cfg_;
    ParamStore<T> ps_;
    Linear<T> patch_embed_;
    std::vector<TransformerBlock<T>> enc_blocks_;
    LayerNormModule<T> enc_norm_;
    Linear<T> enc_to_dec_;
    Var<T> mask_token_;
    std::vector<TransformerBlock<T>> dec_blocks_;
    LayerNormModule<T> dec_norm_;
    Linear<T> dec_head_;
    Tensor<T> pos_enc_, pos_dec_;
};

} // namespace voxlm
