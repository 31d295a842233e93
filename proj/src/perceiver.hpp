#pragma once

#include "vit3d.hpp"

namespace voxlm {

enum class PerceiverKind { Conv3D, GlobalQformer, LocalQformer, MlpMixer, AvgPool, MaxPool };

inline const char* to_string(PerceiverKind k) {
    switch (k) {
        case PerceiverKind::Conv3D: return "conv3d";
        case PerceiverKind::GlobalQformer: return "global_qformer";
        case PerceiverKind::LocalQformer: return "local_qformer";
        case PerceiverKind::MlpMixer: return "mlp_mixer";
        case PerceiverKind::AvgPool: return "avg_pool";
        case PerceiverKind::MaxPool: return "max_pool";
    }
    return "?";
}

inline PerceiverKind perceiver_kind_from(const std::string& s) {
    for (PerceiverKind k : {PerceiverKind::Conv3D, PerceiverKind::GlobalQformer,
                            PerceiverKind::LocalQformer, PerceiverKind::MlpMixer,
                            PerceiverKind::AvgPool, PerceiverKind::MaxPool})
        if (s == to_string(k)) return k;
    throw FormatError("perceiver: unknown kind '" + s + "'");
}

struct PerceiverSpec {
    PerceiverKind kind = PerceiverKind::Conv3D;
    int64_t k = 2;
    int64_t out_channels = 64;
    int64_t qformer_layers = 2;
    int64_t qformer_heads = 4;
    int64_t mixer_expansion = 4;

    void validate(const std::array<int64_t, 3>& grid) const {
        if (k < 1) throw FormatError("perceiver: k must be >= 1");
        if (out_channels < 1) throw FormatError("perceiver: out_channels must be >= 1");
        for (int a = 0; a < 3; ++a)
            if (grid[a] % k)
                throw FormatError("perceiver: k=" + std::to_string(k) +
                                  " does not divide grid axis " + std::to_string(a) + " of (" +
                                  std::to_string(grid[0]) + "," + std::to_string(grid[1]) + "," +
                                  std::to_string(grid[2]) + ")");
    }

    std::array<int64_t, 3> out_grid(const std::array<int64_t, 3>& grid) const {
        return {grid[0] / k, grid[1] / k, grid[2] / k};
    }

    int64_t out_tokens(const std::array<int64_t, 3>& grid) const {
        auto g = out_grid(grid);
        return g[0] * g[1] * g[2];
    }
};

// (B, N, C) -> (B, C, H, W, D), inverting the patchify token order
template <typename T>
Var<T> to_3d(const TokenBatch<T>& x) {
    const auto& g = x.grid;
    const int64_t b = x.values.shape()[0], n = x.values.shape()[1], c = x.values.shape()[2];
    if (n != g[0] * g[1] * g[2])
        throw FormatError("to_3d: token count " + std::to_string(n) + " does not match grid");
    return permute(reshape(x.values, {b, g[0], g[1], g[2], c}), {0, 4, 1, 2, 3});
}

// (B, C, H, W, D) -> token batch with the given grid attached
template <typename T>
TokenBatch<T> to_sequence(const Var<T>& x3d, const std::array<int64_t, 3>& grid) {
    const Shape& s = x3d.shape();
    Var<T> seq = reshape(permute(x3d, {0, 2, 3, 4, 1}), {s[0], s[2] * s[3] * s[4], s[1]});
    return TokenBatch<T>{seq, grid};
}

// non-overlapping k^3 block mean/max: (B, C, H, W, D) -> (B, C, M, k^3) -> reduce
template <typename T>
Var<T> pool_blocks(const Var<T>& x3d, int64_t k, bool use_max) {
    const Shape& s = x3d.shape();
    const int64_t b = s[0], c = s[1], h = s[2] / k, w = s[3] / k, d = s[4] / k;
    Var<T> r = reshape(x3d, {b, c, h, k, w, k, d, k});
    r = permute(r, {0, 1, 2, 4, 6, 3, 5, 7});
    r = reshape(r, {b, c, h * w * d, k * k * k});
    return use_max ? reduce_max(r) : reduce_mean(r); // (B, C, M)
}

// block-major token permutation used by the local qformer: all k^3 tokens of
// output block 0 first, then block 1, ...
inline std::vector<int64_t> block_major_order(const std::array<int64_t, 3>& grid, int64_t k) {
    const int64_t H = grid[0], W = grid[1], D = grid[2];
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(H * W * D));
    for (int64_t bh = 0; bh < H / k; ++bh)
        for (int64_t bw = 0; bw < W / k; ++bw)
            for (int64_t bd = 0; bd < D / k; ++bd)
                for (int64_t ih = 0; ih < k; ++ih)
                    for (int64_t iw = 0; iw < k; ++iw)
                        for (int64_t id = 0; id < k; ++id)
                            idx.push_back((bh * k + ih) * (W * D) + (bw * k + iw) * D + (bd * k + id));
    return idx;
}

// One cross-attention layer of a query former: learned queries refine
// against the token sequence, then pass through a feed-forward, both with
// residuals.
template <typename T>
struct QformerLayer {
    LayerNormModule<T> ln_q, ln_kv, ln_ff;
    MultiHeadAttention<T> attn;
    FeedForward<T> ffn;

    QformerLayer() = default;
    QformerLayer(ParamStore<T>& ps, const std::string& name, int64_t dim, int64_t heads, Rng& rng)
        : ln_q(ps, name + ".ln_q", dim),
          ln_kv(ps, name + ".ln_kv", dim),
          ln_ff(ps, name + ".ln_ff", dim),
          attn(ps, name + ".attn", dim, heads, rng),
          ffn(ps, name + ".ffn", dim, 4 * dim, rng) {}

    Var<T> forward(const Var<T>& q, const Var<T>& kv) const {
        Var<T> h = add(q, attn.forward(ln_q.forward(q), ln_kv.forward(kv), false, nullptr));
        return add(h, ffn.forward(ln_ff.forward(h)));
    }
};

// Token aggregator mapping (B, N, C) -> (B, N/k^3, C'). Six interchangeable
// strategies behind one forward(); weights live in the ParamStore handed in
// at construction under the given prefix.
template <typename T>
class Perceiver {
public:
    Perceiver(const PerceiverSpec& spec, int64_t in_channels, std::array<int64_t, 3> grid,
              ParamStore<T>& ps, const std::string& prefix, Rng& rng)
        : spec_(spec), c_in_(in_channels), grid_(grid) {
        spec.validate(grid);
        const int64_t n = grid[0] * grid[1] * grid[2];
        const int64_t m = spec.out_tokens(grid);
        const int64_t c = in_channels, co = spec.out_channels;
        switch (spec.kind) {
            case PerceiverKind::Conv3D: {
                const double std = std::sqrt(2.0 / static_cast<double>(c * spec.k * spec.k * spec.k + co));
                conv_w_ = ps.create(prefix + ".conv.w",
                                    Tensor<T>::randn({co, c, spec.k, spec.k, spec.k}, rng,
                                                     static_cast<T>(std)));
                conv_b_ = ps.create(prefix + ".conv.b", Tensor<T>::zeros({co}));
                break;
            }
            case PerceiverKind::AvgPool:
            case PerceiverKind::MaxPool:
                proj_ = Linear<T>(ps, prefix + ".proj", c, co, rng);
                break;
            case PerceiverKind::MlpMixer: {
                mixer_ln1_ = LayerNormModule<T>(ps, prefix + ".ln1", c);
                mixer_ln2_ = LayerNormModule<T>(ps, prefix + ".ln2", c);
                token_mix_w_ = ps.create(prefix + ".token_mix.w",
                                         Tensor<T>::randn({n, m}, rng,
                                                          static_cast<T>(std::sqrt(2.0 / static_cast<double>(n + m)))));
                token_mix_b_ = ps.create(prefix + ".token_mix.b", Tensor<T>::zeros({m}));
                mixer_fc1_ = Linear<T>(ps, prefix + ".channel.fc1", c, spec.mixer_expansion * c, rng);
                mixer_fc2_ = Linear<T>(ps, prefix + ".channel.fc2", spec.mixer_expansion * c, co, rng);
                break;
            }
            case PerceiverKind::GlobalQformer:
            case PerceiverKind::LocalQformer: {
                queries_ = ps.create(prefix + ".queries",
                                     Tensor<T>::randn({m, c}, rng, static_cast<T>(0.02)));
                for (int64_t i = 0; i < spec.qformer_layers; ++i)
                    q_layers_.emplace_back(ps, prefix + ".layer" + std::to_string(i), c,
                                           spec.qformer_heads, rng);
                proj_ = Linear<T>(ps, prefix + ".proj", c, co, rng);
                break;
            }
        }
    }

    const PerceiverSpec& spec() const { return spec_; }

    TokenBatch<T> forward(const TokenBatch<T>& x) const {
        if (x.grid != grid_)
            throw FormatError("perceiver: token batch grid does not match construction grid");
        spec_.validate(x.grid);
        const int64_t b = x.values.shape()[0], n = x.values.shape()[1];
        const int64_t k3 = spec_.k * spec_.k * spec_.k;
        const int64_t m = n / k3;
        const auto out_grid = spec_.out_grid(x.grid);
        Var<T> out;
        switch (spec_.kind) {
            case PerceiverKind::Conv3D:
                return to_sequence(conv3d(to_3d(x), conv_w_, conv_b_), out_grid);
            case PerceiverKind::AvgPool:
            case PerceiverKind::MaxPool: {
                Var<T> pooled = pool_blocks(to_3d(x), spec_.k, spec_.kind == PerceiverKind::MaxPool);
                out = proj_.forward(permute(pooled, {0, 2, 1})); // (B, M, C) -> (B, M, C')
                break;
            }
            case PerceiverKind::MlpMixer: {
                Var<T> h = mixer_ln1_.forward(x.values);            // (B, N, C)
                h = permute(h, {0, 2, 1});                          // (B, C, N)
                h = add(matmul(h, token_mix_w_), token_mix_b_);     // (B, C, M)
                h = permute(h, {0, 2, 1});                          // (B, M, C)
                h = mixer_ln2_.forward(h);
                out = mixer_fc2_.forward(gelu(mixer_fc1_.forward(h)));
                break;
            }
            case PerceiverKind::GlobalQformer: {
                Var<T> q = tile_leading(queries_, b); // (B, M, C)
                for (const auto& layer : q_layers_) q = layer.forward(q, x.values);
                out = proj_.forward(q);
                break;
            }
            case PerceiverKind::LocalQformer: {
                Var<T> kv = gather(x.values, 1, block_major_order(x.grid, spec_.k));
                kv = reshape(kv, {b * m, k3, c_in_});
                Var<T> q = reshape(tile_leading(queries_, b), {b * m, 1, c_in_});
                for (const auto& layer : q_layers_) q = layer.forward(q, kv);
                out = proj_.forward(reshape(q, {b, m, c_in_}));
                break;
            }
        }
        return TokenBatch<T>{out, out_grid};
    }

private:
    PerceiverSpec spec_;
    int64_t c_in_;
    std::array<int64_t, 3> grid_;
    Var<T> conv_w_, conv_b_;
    Linear<T> proj_;
    LayerNormModule<T> mixer_ln1_, mixer_ln2_;
    Var<T> token_mix_w_, token_mix_b_;
    Linear<T> mixer_fc1_, mixer_fc2_;
    Var<T> queries_;
    std::vector<QformerLayer<T>> q_layers_;
};

// exact trainable-parameter count for a perceiver configuration
inline int64_t perceiver_param_count(const PerceiverSpec& spec, int64_t in_channels,
                                     const std::array<int64_t, 3>& grid) {
    ParamStore<double> ps;
    Rng rng(0);
    Perceiver<double> p(spec, in_channels, grid, ps, "perceiver", rng);
    return ps.total_elements();
}

} // namespace voxlm
