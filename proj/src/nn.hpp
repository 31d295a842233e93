#pragma once

#include <optional>
#include <string>
#include <unordered_map>

#include "autodiff.hpp"
#include "rng.hpp"

namespace voxlm {

// Named parameter registry for one model instance. Modules create their
// parameters here; the optimizer and the checkpoint layer work off the
// registration order, which is deterministic for a given architecture.
template <typename T>
class ParamStore {
public:
    Var<T> create(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw std::runtime_error("duplicate parameter name: " + name);
        Var<T> v = Var<T>::param(std::move(init));
        index_[name] = params_.size();
        params_.push_back({name, v});
        return v;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Var<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return params_[it->second].second;
    }

    const std::vector<std::pair<std::string, Var<T>>>& entries() const { return params_; }

    std::vector<Var<T>> all() const {
        std::vector<Var<T>> out;
        for (auto& [n, v] : params_) out.push_back(v);
        return out;
    }

    std::vector<Var<T>> matching(const std::function<bool(const std::string&)>& pred) const {
        std::vector<Var<T>> out;
        for (auto& [n, v] : params_) {
            if (pred(n)) out.push_back(v);
        }
        return out;
    }

    void zero_grads() {
        for (auto& [n, v] : params_) v.zero_grad();
    }

    // mark everything matching as trainable, the rest frozen
    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for (auto& [n, v] : params_) v.set_requires_grad(pred(n));
    }

    int64_t total_elements() const {
        int64_t n = 0;
        for (auto& [name, v] : params_) n += v.numel();
        return n;
    }

    std::vector<std::pair<std::string, Tensor<float>>> snapshot() const {
        std::vector<std::pair<std::string, Tensor<float>>> out;
        for (auto& [n, v] : params_) out.push_back({n, v.val().template cast<float>()});
        return out;
    }

    // overwrite registered parameters from (name -> f32 tensor); every
    // registered parameter must be present with a matching shape
    void restore(const std::unordered_map<std::string, Tensor<float>>& table) {
        restore_filtered(table, [](const std::string&) { return true; });
    }

    // restore only the parameters the predicate selects; those must all be
    // present with matching shapes
    void restore_filtered(const std::unordered_map<std::string, Tensor<float>>& table,
                          const std::function<bool(const std::string&)>& want) {
        for (auto& [n, v] : params_) {
            if (!want(n)) continue;
            auto it = table.find(n);
            if (it == table.end()) throw std::runtime_error("checkpoint is missing parameter: " + n);
            if (it->second.shape != v.shape())
                throw std::runtime_error("checkpoint shape mismatch for " + n + ": file " +
                                         shape_str(it->second.shape) + " vs model " +
                                         shape_str(v.shape()));
            v.val_mut() = it->second.template cast<T>();
        }
    }

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

struct AdamConfig {
    double lr = 1.5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr_decay = 0.95; // multiplicative, applied per epoch
};

// Adam with bias correction. Only the parameters handed in are ever touched.
template <typename T>
class Adam {
public:
    Adam(std::vector<Var<T>> params, AdamConfig cfg) : cfg_(cfg) {
        for (auto& p : params) {
            Slot s;
            s.p = p;
            s.m.assign(static_cast<size_t>(p.numel()), T(0));
            s.v.assign(static_cast<size_t>(p.numel()), T(0));
            slots_.push_back(std::move(s));
        }
    }

    void set_epoch(int64_t epoch) { lr_eff_ = cfg_.lr * std::pow(cfg_.lr_decay, static_cast<double>(epoch)); }

    double lr() const { return lr_eff_; }
    int64_t step_count() const { return t_; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& s : slots_) {
            Tensor<T> g = s.p.grad_or_zero();
            T* p = s.p.val_mut().ptr();
            for (int64_t i = 0; i < s.p.numel(); ++i) {
                double gi = g.data[i];
                double m = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
                double v = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                s.m[i] = static_cast<T>(m);
                s.v[i] = static_cast<T>(v);
                double update = lr_eff_ * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                p[i] = static_cast<T>(p[i] - update);
            }
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.p.zero_grad();
    }

private:
    struct Slot {
        Var<T> p;
        std::vector<T> m, v;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    double lr_eff_ = cfg_.lr;
    int64_t t_ = 0;
};

// interleaved sin/cos table: row p, channels [sin(p*w0), cos(p*w0), sin(p*w1), ...]
template <typename T>
Tensor<T> sincos_table_1d(int64_t len, int64_t dim) {
    if (dim % 2) throw ShapeError("sincos_table_1d: dim must be even");
    Tensor<T> out({len, dim});
    const int64_t nf = dim / 2;
    for (int64_t p = 0; p < len; ++p)
        for (int64_t i = 0; i < nf; ++i) {
            double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
            double a = static_cast<double>(p) * omega;
            out.data[p * dim + 2 * i] = static_cast<T>(std::sin(a));
            out.data[p * dim + 2 * i + 1] = static_cast<T>(std::cos(a));
        }
    return out;
}

// dropout as a sampled mask; pass rng=nullptr for eval mode (identity)
template <typename T>
Var<T> dropout(const Var<T>& x, double p, Rng* rng) {
    if (!rng || p <= 0.0) return x;
    Tensor<T> mask(x.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (auto& m : mask.data) m = (rng->uniform() < p) ? T(0) : keep_scale;
    return mul(x, Var<T>::constant(std::move(mask)));
}

template <typename T>
struct Linear {
    Var<T> w; // (in, out)
    Var<T> b; // (out)

    Linear() = default;
    Linear(ParamStore<T>& ps, const std::string& name, int64_t in, int64_t out, Rng& rng,
           double init_std = -1.0) {
        if (init_std < 0) init_std = std::sqrt(2.0 / static_cast<double>(in + out));
        w = ps.create(name + ".w", Tensor<T>::randn({in, out}, rng, static_cast<T>(init_std)));
        b = ps.create(name + ".b", Tensor<T>::zeros({out}));
    }

    Var<T> forward(const Var<T>& x) const { return add(matmul(x, w), b); }
};

// Low-rank adapter on one linear map: out = base(x) + (alpha/r) * dropout(x) A B.
// A gets a small gaussian init, B starts at zero so the adapted map equals
// the base map until training moves it.
template <typename T>
struct LoRAAdapter {
    Var<T> a; // (in, r)
    Var<T> b; // (r, out)
    double scaling = 1.0;
    double dropout_p = 0.0;

    LoRAAdapter() = default;
    LoRAAdapter(ParamStore<T>& ps, const std::string& name, int64_t in, int64_t out, int64_t rank,
                double alpha, double drop, Rng& rng) {
        a = ps.create(name + ".lora_a", Tensor<T>::randn({in, rank}, rng, static_cast<T>(0.01)));
        b = ps.create(name + ".lora_b", Tensor<T>::zeros({rank, out}));
        scaling = alpha / static_cast<double>(rank);
        dropout_p = drop;
    }

    bool defined() const { return a.defined(); }

    Var<T> delta(const Var<T>& x, Rng* train_rng) const {
        Var<T> h = dropout(x, dropout_p, train_rng);
        return scale(matmul(matmul(h, a), b), scaling);
    }

    // merged weight W + (alpha/r) A B, for export/inspection
    Tensor<T> merged_weight(const Tensor<T>& base_w) const {
        const int64_t in = base_w.shape[0], out = base_w.shape[1], r = a.shape()[1];
        Tensor<T> m = base_w;
        for (int64_t i = 0; i < in; ++i)
            for (int64_t o = 0; o < out; ++o) {
                double s = 0;
                for (int64_t j = 0; j < r; ++j)
                    s += static_cast<double>(a.val().data[i * r + j]) * b.val().data[j * out + o];
                m.data[i * out + o] += static_cast<T>(scaling * s);
            }
        return m;
    }
};

template <typename T>
struct LayerNormModule {
    Var<T> gamma, beta;

    LayerNormModule() = default;
    LayerNormModule(ParamStore<T>& ps, const std::string& name, int64_t dim) {
        gamma = ps.create(name + ".gamma", Tensor<T>::full({dim}, T(1)));
        beta = ps.create(name + ".beta", Tensor<T>::zeros({dim}));
    }

    Var<T> forward(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
};

// Multi-head attention. Self-attention when kv == q input; also used as
// cross-attention by the query-token perceivers. LoRA adapters, when
// attached, sit on the q and v projections.
template <typename T>
struct MultiHeadAttention {
    Linear<T> wq, wk, wv, wo;
    std::optional<LoRAAdapter<T>> lora_q, lora_v;
    int64_t heads = 1;
    int64_t dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& ps, const std::string& name, int64_t d, int64_t h, Rng& rng)
        : wq(ps, name + ".wq", d, d, rng),
          wk(ps, name + ".wk", d, d, rng),
          wv(ps, name + ".wv", d, d, rng),
          wo(ps, name + ".wo", d, d, rng),
          heads(h),
          dim(d) {
        if (d % h) throw ShapeError("attention: dim must be divisible by heads");
    }

    void attach_lora(ParamStore<T>& ps, const std::string& name, int64_t rank, double alpha,
                     double drop, Rng& rng) {
        lora_q.emplace(ps, name + ".wq", dim, dim, rank, alpha, drop, rng);
        lora_v.emplace(ps, name + ".wv", dim, dim, rank, alpha, drop, rng);
    }

    Var<T> project(const Linear<T>& lin, const std::optional<LoRAAdapter<T>>& lora,
                   const Var<T>& x, Rng* train_rng) const {
        Var<T> y = lin.forward(x);
        if (lora) y = add(y, lora->delta(x, train_rng));
        return y;
    }

    // q_in (B, Tq, C), kv_in (B, Tk, C) -> (B, Tq, C)
    Var<T> forward(const Var<T>& q_in, const Var<T>& kv_in, bool causal, Rng* train_rng) const {
        const int64_t b = q_in.shape()[0], tq = q_in.shape()[1], tk = kv_in.shape()[1];
        const int64_t dh = dim / heads;
        auto split = [&](const Var<T>& x, int64_t t) {
            return permute(reshape(x, {b, t, heads, dh}), {0, 2, 1, 3}); // (B, h, T, dh)
        };
        Var<T> q = split(project(wq, lora_q, q_in, train_rng), tq);
        Var<T> k = split(wk.forward(kv_in), tk);
        Var<T> v = split(project(wv, lora_v, kv_in, train_rng), tk);
        Var<T> scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) {
            if (tq != tk) throw ShapeError("attention: causal mask needs square score matrix");
            Tensor<T> mask({tq, tq});
            for (int64_t i = 0; i < tq; ++i)
                for (int64_t j = 0; j < tq; ++j)
                    mask.data[i * tq + j] = (j > i) ? static_cast<T>(-1e9) : T(0);
            scores = add(scores, Var<T>::constant(std::move(mask)));
        }
        Var<T> ctx = matmul(softmax(scores), v);                      // (B, h, Tq, dh)
        Var<T> merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, tq, dim});
        return wo.forward(merged);
    }
};

template <typename T>
struct FeedForward {
    Linear<T> fc1, fc2;

    FeedForward() = default;
    FeedForward(ParamStore<T>& ps, const std::string& name, int64_t d, int64_t hidden, Rng& rng)
        : fc1(ps, name + ".fc1", d, hidden, rng), fc2(ps, name + ".fc2", hidden, d, rng) {}

    Var<T> forward(const Var<T>& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

// pre-norm transformer block
template <typename T>
struct TransformerBlock {
    LayerNormModule<T> ln1, ln2;
    MultiHeadAttention<T> attn;
    FeedForward<T> ffn;

    TransformerBlock() = default;
    TransformerBlock(ParamStore<T>& ps, const std::string& name, int64_t d, int64_t heads,
                     int64_t ff_hidden, Rng& rng)
        : ln1(ps, name + ".ln1", d),
          ln2(ps, name + ".ln2", d),
          attn(ps, name + ".attn", d, heads, rng),
          ffn(ps, name + ".ffn", d, ff_hidden, rng) {}

    Var<T> forward(const Var<T>& x, bool causal, Rng* train_rng) const {
        Var<T> n1 = ln1.forward(x);
        Var<T> h = add(x, attn.forward(n1, n1, causal, train_rng));
        return add(h, ffn.forward(ln2.forward(h)));
    }
};

} // namespace voxlm
