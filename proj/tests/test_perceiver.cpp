#include <doctest.h>

#include "perceiver.hpp"
#include "testutil.hpp"

using namespace voxlm;

namespace {

template <typename T>
TokenBatch<T> random_tokens(int64_t b, std::array<int64_t, 3> grid, int64_t c, Rng& rng) {
    int64_t n = grid[0] * grid[1] * grid[2];
    return TokenBatch<T>{Var<T>::constant(Tensor<T>::randn({b, n, c}, rng)), grid};
}

PerceiverSpec spec_of(PerceiverKind kind, int64_t k, int64_t co) {
    PerceiverSpec s;
    s.kind = kind;
    s.k = k;
    s.out_channels = co;
    s.qformer_heads = 2;
    return s;
}

constexpr PerceiverKind kAllKinds[] = {PerceiverKind::Conv3D,       PerceiverKind::GlobalQformer,
                                       PerceiverKind::LocalQformer, PerceiverKind::MlpMixer,
                                       PerceiverKind::AvgPool,      PerceiverKind::MaxPool};

} // namespace

TEST_SUITE("perceiver") {

TEST_CASE("to_3d layout puts token zero at the grid origin") {
    Rng rng(1);
    auto x = random_tokens<double>(2, {3, 4, 5}, 6, rng);
    Var<double> x3d = to_3d(x);
    CHECK(x3d.shape() == Shape{2, 6, 3, 4, 5});
    // x3d[b, c, 0, 0, 0] == tokens[b, 0, c]
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t c = 0; c < 6; ++c)
            CHECK(x3d.val().data[static_cast<size_t>((b * 6 + c) * 60)] ==
                  x.values.val().data[static_cast<size_t>((b * 60 + 0) * 6 + c)]);
    // and token n=1 is grid cell (0,0,1)
    for (int64_t c = 0; c < 6; ++c)
        CHECK(x3d.val().data[static_cast<size_t>((0 * 6 + c) * 60 + 1)] ==
              x.values.val().data[static_cast<size_t>(1 * 6 + c)]);
}

TEST_CASE("to_sequence inverts to_3d") {
    Rng rng(2);
    auto x = random_tokens<double>(2, {2, 3, 4}, 5, rng);
    TokenBatch<double> rt = to_sequence(to_3d(x), x.grid);
    CHECK(rt.values.val().data == x.values.val().data);
}

TEST_CASE("identity k=1 convolution reproduces the sequence") {
    Rng rng(3);
    const int64_t c = 4;
    auto x = random_tokens<double>(1, {2, 2, 2}, c, rng);
    Tensor<double> w({c, c, 1, 1, 1});
    for (int64_t i = 0; i < c; ++i) w.data[static_cast<size_t>(i * c + i)] = 1.0;
    Var<double> y = conv3d(to_3d(x), Var<double>::constant(w),
                           Var<double>::constant(Tensor<double>::zeros({c})));
    TokenBatch<double> seq = to_sequence(y, x.grid);
    for (int64_t i = 0; i < x.values.numel(); ++i)
        CHECK(seq.values.val().data[static_cast<size_t>(i)] ==
              doctest::Approx(x.values.val().data[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("every kind satisfies the (B, N/k^3, C') contract") {
    Rng rng(4);
    const std::array<int64_t, 3> grid{4, 4, 2};
    for (PerceiverKind kind : kAllKinds) {
        PerceiverSpec spec = spec_of(kind, 2, 5);
        ParamStore<double> ps;
        Rng wrng(100);
        Perceiver<double> p(spec, 8, grid, ps, "perceiver", wrng);
        auto x = random_tokens<double>(2, grid, 8, rng);
        TokenBatch<double> y = p.forward(x);
        CHECK(y.values.shape() == Shape{2, 4, 5});
        CHECK(y.grid == std::array<int64_t, 3>{2, 2, 1});
        // deterministic given weights
        TokenBatch<double> y2 = p.forward(x);
        CHECK(y2.values.val().data == y.values.val().data);
    }
}

TEST_CASE("paper-scale token ledger: 2744 -> 343") {
    PerceiverSpec spec = spec_of(PerceiverKind::Conv3D, 2, 4096);
    std::array<int64_t, 3> grid{14, 14, 14};
    CHECK(grid[0] * grid[1] * grid[2] == 2744);
    CHECK(spec.out_tokens(grid) == 343);
}

TEST_CASE("toy ledger: 512 -> 64") {
    PerceiverSpec spec = spec_of(PerceiverKind::Conv3D, 2, 64);
    CHECK(spec.out_tokens({8, 8, 8}) == 64);
}

TEST_CASE("indivisible k is a configuration error naming the grid") {
    PerceiverSpec spec = spec_of(PerceiverKind::Conv3D, 3, 8);
    CHECK_THROWS_WITH_AS(spec.validate({8, 8, 8}), doctest::Contains("k=3"), FormatError);
}

TEST_CASE("block pooling matches the tiny fixture") {
    // one channel, 2x2x2 grid holding 0..7 -> mean 3.5, max 7
    Tensor<double> t({1, 1, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) t.data[static_cast<size_t>(i)] = static_cast<double>(i);
    Var<double> x = Var<double>::constant(t);
    CHECK(pool_blocks(x, 2, false).val().data[0] == doctest::Approx(3.5));
    CHECK(pool_blocks(x, 2, true).val().data[0] == doctest::Approx(7.0));
}

TEST_CASE("pooling equals the brute-force block reduce") {
    Rng rng(5);
    const std::array<int64_t, 3> grid{4, 2, 6};
    const int64_t c = 3, k = 2, b = 2;
    for (int trial = 0; trial < 10; ++trial) {
        auto x = random_tokens<double>(b, grid, c, rng);
        Var<double> x3d = to_3d(x);
        Var<double> avg = pool_blocks(x3d, k, false);
        Var<double> mx = pool_blocks(x3d, k, true);
        const auto og = std::array<int64_t, 3>{grid[0] / k, grid[1] / k, grid[2] / k};
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t oh = 0; oh < og[0]; ++oh)
                    for (int64_t ow = 0; ow < og[1]; ++ow)
                        for (int64_t od = 0; od < og[2]; ++od) {
                            double sum = 0, best = -1e300;
                            for (int64_t ih = 0; ih < k; ++ih)
                                for (int64_t iw = 0; iw < k; ++iw)
                                    for (int64_t id = 0; id < k; ++id) {
                                        int64_t idx =
                                            (((bi * c + ci) * grid[0] + oh * k + ih) * grid[1] +
                                             ow * k + iw) * grid[2] + od * k + id;
                                        double v = x3d.val().data[static_cast<size_t>(idx)];
                                        sum += v;
                                        best = std::max(best, v);
                                    }
                            int64_t m = (oh * og[1] + ow) * og[2] + od;
                            int64_t oidx = (bi * c + ci) * (og[0] * og[1] * og[2]) + m;
                            double mean_ref = sum / (k * k * k);
                            double got_mean = avg.val().data[static_cast<size_t>(oidx)];
                            CHECK(std::abs(got_mean - mean_ref) <=
                                  1e-6 * std::max(1.0, std::abs(mean_ref)));
                            CHECK(mx.val().data[static_cast<size_t>(oidx)] == best);
                        }
    }
}

TEST_CASE("uniform-average convolution equals avg pooling with identity projection") {
    Rng rng(6);
    const std::array<int64_t, 3> grid{4, 4, 2};
    const int64_t c = 6, k = 2;
    auto x = random_tokens<double>(2, grid, c, rng);

    // conv kernel: w[co][ci][...] = (co == ci) / k^3, zero bias
    Tensor<double> w({c, c, k, k, k});
    const double inv = 1.0 / static_cast<double>(k * k * k);
    for (int64_t co = 0; co < c; ++co)
        for (int64_t kx = 0; kx < k; ++kx)
            for (int64_t ky = 0; ky < k; ++ky)
                for (int64_t kz = 0; kz < k; ++kz)
                    w.data[static_cast<size_t>((((co * c + co) * k + kx) * k + ky) * k + kz)] = inv;
    Var<double> conv_out = conv3d(to_3d(x), Var<double>::constant(w),
                                  Var<double>::constant(Tensor<double>::zeros({c})));
    TokenBatch<double> conv_seq = to_sequence(conv_out, {2, 2, 1});

    Var<double> pooled = permute(pool_blocks(to_3d(x), k, false), {0, 2, 1}); // identity projection
    for (int64_t i = 0; i < conv_seq.values.numel(); ++i)
        CHECK(std::abs(conv_seq.values.val().data[static_cast<size_t>(i)] -
                       pooled.val().data[static_cast<size_t>(i)]) < 1e-5);
}

TEST_CASE("local kinds touch exactly one output token per input perturbation") {
    Rng rng(7);
    const std::array<int64_t, 3> grid{4, 4, 2};
    const int64_t c = 8, k = 2;
    for (PerceiverKind kind :
         {PerceiverKind::Conv3D, PerceiverKind::AvgPool, PerceiverKind::MaxPool,
          PerceiverKind::LocalQformer}) {
        PerceiverSpec spec = spec_of(kind, k, 5);
        ParamStore<double> ps;
        Rng wrng(200);
        Perceiver<double> p(spec, c, grid, ps, "perceiver", wrng);
        auto x = random_tokens<double>(1, grid, c, rng);
        TokenBatch<double> base = p.forward(x);

        const int64_t token = 9; // grid cell (1, 0, 1) -> block (0, 0, 0)
        Tensor<double> bumped = x.values.val();
        for (int64_t ch = 0; ch < c; ++ch) bumped.data[static_cast<size_t>(token * c + ch)] += 10.0;
        TokenBatch<double> out = p.forward(TokenBatch<double>{Var<double>::constant(bumped), grid});

        int changed = 0;
        const int64_t m = base.values.shape()[1], co = base.values.shape()[2];
        for (int64_t t = 0; t < m; ++t) {
            bool diff = false;
            for (int64_t ch = 0; ch < co; ++ch)
                if (out.values.val().data[static_cast<size_t>(t * co + ch)] !=
                    base.values.val().data[static_cast<size_t>(t * co + ch)])
                    diff = true;
            if (diff) ++changed;
        }
        CHECK(changed == 1);
    }
}

TEST_CASE("global qformer mixes a perturbation into several output tokens") {
    Rng rng(8);
    const std::array<int64_t, 3> grid{4, 4, 2};
    const int64_t c = 8;
    PerceiverSpec spec = spec_of(PerceiverKind::GlobalQformer, 2, 5);
    ParamStore<double> ps;
    Rng wrng(300);
    Perceiver<double> p(spec, c, grid, ps, "perceiver", wrng);
    auto x = random_tokens<double>(1, grid, c, rng);
    TokenBatch<double> base = p.forward(x);

    Tensor<double> bumped = x.values.val();
    for (int64_t ch = 0; ch < c; ++ch) bumped.data[static_cast<size_t>(9 * c + ch)] += 10.0;
    TokenBatch<double> out = p.forward(TokenBatch<double>{Var<double>::constant(bumped), grid});

    int changed = 0;
    const int64_t m = base.values.shape()[1], co = base.values.shape()[2];
    for (int64_t t = 0; t < m; ++t)
        for (int64_t ch = 0; ch < co; ++ch)
            if (out.values.val().data[static_cast<size_t>(t * co + ch)] !=
                base.values.val().data[static_cast<size_t>(t * co + ch)]) {
                ++changed;
                break;
            }
    CHECK(changed > 1);
}

TEST_CASE("parameter counts match the documented arithmetic") {
    const std::array<int64_t, 3> grid{8, 8, 8};
    CHECK(perceiver_param_count(spec_of(PerceiverKind::Conv3D, 2, 64), 64, grid) == 32832);
    CHECK(perceiver_param_count(spec_of(PerceiverKind::AvgPool, 2, 64), 64, grid) == 4160);
    CHECK(perceiver_param_count(spec_of(PerceiverKind::MaxPool, 2, 64), 64, grid) ==
          perceiver_param_count(spec_of(PerceiverKind::AvgPool, 2, 64), 64, grid));
}

TEST_CASE("every kind passes the finite-difference gradient oracle") {
    const std::array<int64_t, 3> grid{2, 2, 2};
    const int64_t c = 4;
    for (PerceiverKind kind : kAllKinds) {
        PerceiverSpec spec = spec_of(kind, 2, 3);
        ParamStore<double> ps;
        Rng wrng(400);
        Perceiver<double> p(spec, c, grid, ps, "perceiver", wrng);
        Rng rng(9);
        Var<double> input = Var<double>::param(Tensor<double>::randn({1, 8, c}, rng));

        std::vector<Var<double>> leaves = ps.all();
        leaves.push_back(input);
        auto loss_fn = [&] {
            TokenBatch<double> tb{input, grid};
            Rng prng(500);
            auto wsum = Var<double>::constant(
                Tensor<double>::randn({1, 1, spec.out_channels}, prng));
            return sum_all(mul(p.forward(tb).values, wsum));
        };
        ps.zero_grads();
        CHECK(testutil::max_rel_grad_err(leaves, loss_fn) < 1e-4);
    }
}

} // TEST_SUITE
