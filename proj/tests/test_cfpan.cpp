#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fsdet/cfpan.hpp"
#include "fsdet/gradcheck.hpp"

using namespace fsdet;
using namespace fsdet::nn;
using namespace fsdet::neck;
using ad::Var;

namespace {

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Naive CBAM channel attention recomputation: pooled vectors and explicit
// matrix products, independent of the op implementations.
std::vector<double> naive_channel_attention(const Tensor& f, const CbamParams& p) {
    const std::int64_t B = f.dim(0), C = f.dim(1), HW = f.dim(2) * f.dim(3);
    std::vector<double> out(static_cast<std::size_t>(B * C));
    for (std::int64_t b = 0; b < B; ++b) {
        std::vector<double> avg(static_cast<std::size_t>(C)), mx(static_cast<std::size_t>(C));
        for (std::int64_t c = 0; c < C; ++c) {
            double acc = -1e300, sum = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) {
                const double v = f[(b * C + c) * HW + i];
                sum += v;
                acc = std::max(acc, v);
            }
            avg[static_cast<std::size_t>(c)] = sum / static_cast<double>(HW);
            mx[static_cast<std::size_t>(c)] = acc;
        }
        auto mlp = [&](const std::vector<double>& v) {
            std::vector<double> hidden(static_cast<std::size_t>(p.hidden));
            for (std::int64_t h = 0; h < p.hidden; ++h) {
                double acc = p.mlp_b1.val()[h];
                for (std::int64_t c = 0; c < C; ++c) {
                    acc += p.mlp_w1.val()[h * C + c] * v[static_cast<std::size_t>(c)];
                }
                hidden[static_cast<std::size_t>(h)] = std::max(0.0, acc);
            }
            std::vector<double> out2(static_cast<std::size_t>(C));
            for (std::int64_t c = 0; c < C; ++c) {
                double acc = p.mlp_b2.val()[c];
                for (std::int64_t h = 0; h < p.hidden; ++h) {
                    acc += p.mlp_w2.val()[c * p.hidden + h] * hidden[static_cast<std::size_t>(h)];
                }
                out2[static_cast<std::size_t>(c)] = acc;
            }
            return out2;
        };
        const auto a = mlp(avg), m = mlp(mx);
        for (std::int64_t c = 0; c < C; ++c) {
            out[static_cast<std::size_t>(b * C + c)] =
                sigmoid_ref(a[static_cast<std::size_t>(c)] + m[static_cast<std::size_t>(c)]);
        }
    }
    return out;
}

// Naive spatial attention: channel reductions + direct 7x7 loop convolution.
Tensor naive_spatial_attention(const Tensor& f, const CbamParams& p) {
    const std::int64_t B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
    Tensor out({B, 1, H, W});
    for (std::int64_t b = 0; b < B; ++b) {
        Tensor avg({H, W}), mx({H, W});
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                double sum = 0.0, best = -1e300;
                for (std::int64_t c = 0; c < C; ++c) {
                    const double v = f.at4(b, c, y, x);
                    sum += v;
                    best = std::max(best, v);
                }
                avg[y * W + x] = sum / static_cast<double>(C);
                mx[y * W + x] = best;
            }
        }
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                double acc = p.spatial_b.val()[0];
                for (std::int64_t ky = 0; ky < 7; ++ky) {
                    for (std::int64_t kx = 0; kx < 7; ++kx) {
                        const std::int64_t iy = y + ky - 3, ix = x + kx - 3;
                        if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                        acc += p.spatial_w.val().at4(0, 0, ky, kx) * avg[iy * W + ix];
                        acc += p.spatial_w.val().at4(0, 1, ky, kx) * mx[iy * W + ix];
                    }
                }
                out.at4(b, 0, y, x) = sigmoid_ref(acc);
            }
        }
    }
    return out;
}

CbamParams identity_mlp_params() {
    // C = 1, hidden = 1, unit weights, zero biases.
    CbamParams p = CbamParams::zeros(1, 1);
    p.mlp_w1.mutable_val()[0] = 1.0;
    p.mlp_w2.mutable_val()[0] = 1.0;
    return p;
}

Pyramid make_pyramid(Rng& rng, std::int64_t c, std::int64_t base_hw) {
    Pyramid p;
    for (std::int64_t level = 2; level <= 5; ++level) {
        const std::int64_t s = base_hw >> (level - 2);
        p.level(level) = Var::leaf(Tensor::randn({1, c, s, s}, rng), true);
    }
    return p;
}

ConvLayer identity_lateral(std::int64_t channels) {
    ConvSpec spec;
    spec.kernel_size = 1;
    spec.in_channels = channels;
    spec.out_channels = channels;
    ConvLayer l = ConvLayer::zero_init(spec);
    for (std::int64_t c = 0; c < channels; ++c) l.w.mutable_val()[c * channels + c] = 1.0;
    return l;
}

}  // namespace

TEST_CASE("channel_attention: zero input and zero-bias MLP gives 0.5 per channel") {
    Rng rng(1);
    CbamParams p = CbamParams::init(4, 4, rng);
    p.mlp_b1.mutable_val().fill(0.0);
    p.mlp_b2.mutable_val().fill(0.0);
    const Var gate = channel_attention(Var::constant(Tensor::zeros({2, 4, 5, 5})), p);
    REQUIRE(gate.val().shape() == std::vector<std::int64_t>{2, 4, 1, 1});
    for (std::int64_t i = 0; i < gate.val().numel(); ++i) {
        CHECK(gate.val()[i] == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("channel_attention: identity MLP on all-ones single channel gives sigmoid(2)") {
    const CbamParams p = identity_mlp_params();
    const Var gate = channel_attention(Var::constant(Tensor::full({1, 1, 3, 3}, 1.0)), p);
    CHECK(gate.val()[0] == doctest::Approx(0.880797).epsilon(1e-5));
}

TEST_CASE("channel_attention matches the naive oracle on random inputs") {
    Rng rng(2);
    CbamParams p = CbamParams::init(6, 4, rng);
    for (std::int64_t i = 0; i < p.mlp_b1.val().numel(); ++i) {
        p.mlp_b1.mutable_val()[i] = rng.normal(0.0, 0.3);
    }
    const Tensor f = Tensor::randn({2, 6, 4, 4}, rng);
    const Var gate = channel_attention(Var::constant(f), p);
    const auto ref = naive_channel_attention(f, p);
    for (std::int64_t i = 0; i < gate.val().numel(); ++i) {
        CHECK(std::abs(gate.val()[i] - ref[static_cast<std::size_t>(i)]) < 1e-6);
    }
}

TEST_CASE("channel_attention rejects channel mismatch") {
    Rng rng(3);
    const CbamParams p = CbamParams::init(4, 4, rng);
    CHECK_THROWS_AS(channel_attention(Var::constant(Tensor::zeros({1, 3, 2, 2})), p), ShapeError);
}

TEST_CASE("spatial_attention: zero kernel gives sigmoid(bias) everywhere") {
    CbamParams p = CbamParams::zeros(3, 4);
    SUBCASE("zero bias -> 0.5") {
        const Var gate = spatial_attention(Var::constant(Tensor::zeros({1, 3, 6, 6})), p);
        for (std::int64_t i = 0; i < gate.val().numel(); ++i) {
            CHECK(gate.val()[i] == doctest::Approx(0.5).epsilon(1e-12));
        }
    }
    SUBCASE("bias b -> sigmoid(b)") {
        p.spatial_b.mutable_val()[0] = 1.3;
        Rng rng(5);
        const Var gate = spatial_attention(Var::constant(Tensor::randn({1, 3, 6, 6}, rng)), p);
        for (std::int64_t i = 0; i < gate.val().numel(); ++i) {
            CHECK(gate.val()[i] == doctest::Approx(sigmoid_ref(1.3)).epsilon(1e-12));
        }
    }
}

TEST_CASE("spatial_attention matches the naive oracle") {
    Rng rng(6);
    const CbamParams p = CbamParams::init(5, 4, rng);
    const Tensor f = Tensor::randn({2, 5, 6, 7}, rng);
    const Var gate = spatial_attention(Var::constant(f), p);
    const Tensor ref = naive_spatial_attention(f, p);
    CHECK(max_abs_diff(gate.val(), ref) < 1e-6);
}

TEST_CASE("apply_cbam degenerate and bounding properties") {
    SUBCASE("all-zero params gate twice by 0.5: P5 = 0.25 C5") {
        Rng rng(7);
        const Tensor c5 = Tensor::randn({1, 4, 4, 4}, rng);
        const Var out = apply_cbam(Var::constant(c5), CbamParams::zeros(4, 4));
        for (std::int64_t i = 0; i < out.val().numel(); ++i) {
            CHECK(out.val()[i] == doctest::Approx(0.25 * c5[i]).epsilon(1e-9));
        }
    }
    SUBCASE("zero input stays zero for any params") {
        Rng rng(8);
        const Var out = apply_cbam(Var::constant(Tensor::zeros({1, 4, 4, 4})),
                                   CbamParams::init(4, 4, rng));
        for (std::int64_t i = 0; i < out.val().numel(); ++i) CHECK(out.val()[i] == 0.0);
    }
    SUBCASE("gates never increase magnitude: |P5| <= |C5| elementwise") {
        Rng rng(9);
        const Tensor c5 = Tensor::randn({2, 4, 5, 5}, rng);
        const Var out = apply_cbam(Var::constant(c5), CbamParams::init(4, 4, rng));
        for (std::int64_t i = 0; i < out.val().numel(); ++i) {
            CHECK(std::abs(out.val()[i]) <= std::abs(c5[i]) + 1e-12);
        }
    }
    SUBCASE("attention maps stay strictly inside (0,1)") {
        Rng rng(10);
        const CbamParams p = CbamParams::init(4, 4, rng);
        const Tensor f = Tensor::randn({1, 4, 6, 6}, rng);
        const Var mc = channel_attention(Var::constant(f), p);
        const Var ms = spatial_attention(Var::constant(f), p);
        for (std::int64_t i = 0; i < mc.val().numel(); ++i) {
            CHECK(mc.val()[i] > 0.0);
            CHECK(mc.val()[i] < 1.0);
        }
        for (std::int64_t i = 0; i < ms.val().numel(); ++i) {
            CHECK(ms.val()[i] > 0.0);
            CHECK(ms.val()[i] < 1.0);
        }
    }
}

TEST_CASE("fuse_level: constant fields under equal logits stay constant") {
    CfpanConfig cfg;
    cfg.out_channels = 3;
    Rng rng(11);
    Cfpan neck = Cfpan::init(cfg, {3, 3, 3, 3}, {std::pair{8L, 8L}, {4L, 4L}, {2L, 2L}, {1L, 1L}},
                             rng);
    const ConvLayer ident = identity_lateral(3);
    FusionWeights w{Var::leaf(Tensor::zeros({1, 1, 8, 8}), true),
                    Var::leaf(Tensor::zeros({1, 1, 8, 8}), true),
                    Var::leaf(Tensor::zeros({1, 1, 8, 8}), true)};
    const Var out = neck.fuse_level(Var::constant(Tensor::full({1, 3, 4, 4}, 3.0)),
                                    Var::constant(Tensor::full({1, 3, 4, 4}, 3.0)),
                                    Var::constant(Tensor::full({1, 3, 8, 8}, 3.0)), w, ident, ident);
    for (std::int64_t i = 0; i < out.val().numel(); ++i) {
        CHECK(out.val()[i] == doctest::Approx(3.0).epsilon(1e-9));
    }
}

TEST_CASE("fuse_level: saturated gamma logit selects the lateral path") {
    CfpanConfig cfg;
    cfg.out_channels = 2;
    Rng rng(12);
    Cfpan neck = Cfpan::init(cfg, {2, 2, 2, 2}, {std::pair{6L, 6L}, {3L, 3L}, {1L, 1L}, {1L, 1L}},
                             rng);
    const ConvLayer ident = identity_lateral(2);
    FusionWeights w{Var::leaf(Tensor::zeros({1, 1, 6, 6}), true),
                    Var::leaf(Tensor::zeros({1, 1, 6, 6}), true),
                    Var::leaf(Tensor::full({1, 1, 6, 6}, 20.0), true)};
    const Tensor cur = Tensor::randn({1, 2, 6, 6}, rng);
    const Var out = neck.fuse_level(Var::constant(Tensor::randn({1, 2, 3, 3}, rng)),
                                    Var::constant(Tensor::randn({1, 2, 3, 3}, rng)),
                                    Var::constant(cur), w, ident, ident);
    CHECK(max_abs_diff(out.val(), cur) < 1e-6);
}

TEST_CASE("softmax3 simplex property over random logit triples") {
    Rng rng(13);
    for (int i = 0; i < 1000; ++i) {
        const auto w = Cfpan::softmax3(rng.normal(0, 5), rng.normal(0, 5), rng.normal(0, 5));
        CHECK(std::abs(w[0] + w[1] + w[2] - 1.0) < 1e-6);
        for (double v : w) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("cfpan_forward: shape contract and degenerate identity") {
    SUBCASE("shapes mirror input resolutions with d channels") {
        CfpanConfig cfg;
        cfg.out_channels = 6;
        Rng rng(14);
        Cfpan neck = Cfpan::init(cfg, {3, 4, 5, 6},
                                 {std::pair{16L, 16L}, {8L, 8L}, {4L, 4L}, {2L, 2L}}, rng);
        Pyramid c;
        c.level(2) = Var::constant(Tensor::randn({1, 3, 16, 16}, rng));
        c.level(3) = Var::constant(Tensor::randn({1, 4, 8, 8}, rng));
        c.level(4) = Var::constant(Tensor::randn({1, 5, 4, 4}, rng));
        c.level(5) = Var::constant(Tensor::randn({1, 6, 2, 2}, rng));
        const Pyramid p = neck.forward(c);
        CHECK(p.level(2).val().shape() == std::vector<std::int64_t>{1, 6, 16, 16});
        CHECK(p.level(3).val().shape() == std::vector<std::int64_t>{1, 6, 8, 8});
        CHECK(p.level(4).val().shape() == std::vector<std::int64_t>{1, 6, 4, 4});
        CHECK(p.level(5).val().shape() == std::vector<std::int64_t>{1, 6, 2, 2});
    }
    SUBCASE("zero CBAM + one-hot gamma + identity laterals reproduce C") {
        CfpanConfig cfg;
        cfg.out_channels = 3;
        Rng rng(15);
        Cfpan neck = Cfpan::init(cfg, {3, 3, 3, 3},
                                 {std::pair{16L, 16L}, {8L, 8L}, {4L, 4L}, {2L, 2L}}, rng);
        neck.cbam() = CbamParams::zeros(3, cfg.cbam_reduction);
        for (std::int64_t level = 2; level <= 5; ++level) {
            neck.lateral(level) = identity_lateral(3);
        }
        for (std::int64_t level = 2; level <= 4; ++level) {
            neck.fusion(level).logit_cur.mutable_val().fill(40.0);
        }
        Pyramid c;
        c.level(2) = Var::constant(Tensor::randn({1, 3, 16, 16}, rng));
        c.level(3) = Var::constant(Tensor::randn({1, 3, 8, 8}, rng));
        c.level(4) = Var::constant(Tensor::randn({1, 3, 4, 4}, rng));
        c.level(5) = Var::constant(Tensor::randn({1, 3, 2, 2}, rng));
        const Pyramid p = neck.forward(c);
        for (std::int64_t level = 2; level <= 4; ++level) {
            CHECK(max_abs_diff(p.level(level).val(), c.level(level).val()) < 1e-6);
        }
        Tensor quarter = c.level(5).val();
        quarter *= 0.25;
        CHECK(max_abs_diff(p.level(5).val(), quarter) < 1e-9);
    }
    SUBCASE("missing level -> structured error") {
        CfpanConfig cfg;
        cfg.out_channels = 3;
        Rng rng(16);
        Cfpan neck = Cfpan::init(cfg, {3, 3, 3, 3},
                                 {std::pair{8L, 8L}, {4L, 4L}, {2L, 2L}, {1L, 1L}}, rng);
        Pyramid c;
        c.level(2) = Var::constant(Tensor::randn({1, 3, 8, 8}, rng));
        CHECK_THROWS_AS(neck.forward(c), ShapeError);
    }
    SUBCASE("resolution ratio != 2 -> structured error") {
        CfpanConfig cfg;
        cfg.out_channels = 2;
        Rng rng(17);
        Cfpan neck = Cfpan::init(cfg, {2, 2, 2, 2},
                                 {std::pair{6L, 6L}, {3L, 3L}, {1L, 1L}, {1L, 1L}}, rng);
        const ConvLayer ident = identity_lateral(2);
        FusionWeights w{Var::leaf(Tensor::zeros({1, 1, 6, 6}), true),
                        Var::leaf(Tensor::zeros({1, 1, 6, 6}), true),
                        Var::leaf(Tensor::zeros({1, 1, 6, 6}), true)};
        CHECK_THROWS_AS(
            neck.fuse_level(Var::constant(Tensor::zeros({1, 2, 3, 3})),
                            Var::constant(Tensor::zeros({1, 2, 3, 3})),
                            Var::constant(Tensor::zeros({1, 2, 5, 5})), w, ident, ident),
            ShapeError);
    }
}

TEST_CASE("gradcheck: CBAM block") {
    Rng rng(18);
    CbamParams p = CbamParams::init(3, 4, rng);
    Var x = Var::leaf(Tensor::randn({1, 3, 5, 5}, rng), true);
    const Tensor probe = Tensor::randn({1, 3, 5, 5}, rng);
    const auto res = gradcheck(
        [&]() { return weighted_sum(apply_cbam(x, p), probe); },
        {x, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2, p.spatial_w, p.spatial_b}, 1e-5,
        {"x", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "spatial_w", "spatial_b"});
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradcheck: fuse_level wrt inputs and logits") {
    CfpanConfig cfg;
    cfg.out_channels = 2;
    Rng rng(19);
    Cfpan neck = Cfpan::init(cfg, {2, 2, 2, 2}, {std::pair{4L, 4L}, {2L, 2L}, {1L, 1L}, {1L, 1L}},
                             rng);
    Var p_next = Var::leaf(Tensor::randn({1, 2, 2, 2}, rng), true);
    Var c_next = Var::leaf(Tensor::randn({1, 2, 2, 2}, rng), true);
    Var c_cur = Var::leaf(Tensor::randn({1, 2, 4, 4}, rng), true);
    FusionWeights w{Var::leaf(Tensor::randn({1, 1, 4, 4}, rng, 0.5), true),
                    Var::leaf(Tensor::randn({1, 1, 4, 4}, rng, 0.5), true),
                    Var::leaf(Tensor::randn({1, 1, 4, 4}, rng, 0.5), true)};
    const ConvLayer lat_next = neck.lateral(3);
    const ConvLayer lat_cur = neck.lateral(2);
    const Tensor probe = Tensor::randn({1, 2, 4, 4}, rng);
    const auto res = gradcheck(
        [&]() {
            return weighted_sum(neck.fuse_level(p_next, c_next, c_cur, w, lat_next, lat_cur), probe);
        },
        {p_next, c_next, c_cur, w.logit_up_p, w.logit_up_c, w.logit_cur, lat_next.w, lat_cur.w},
        1e-5, {"p_next", "c_next", "c_cur", "logit_a", "logit_b", "logit_g", "lat_next_w",
               "lat_cur_w"});
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradcheck: full neck on a 1x4x16x16 pyramid") {
    CfpanConfig cfg;
    cfg.out_channels = 4;
    Rng rng(20);
    Cfpan neck = Cfpan::init(cfg, {4, 4, 4, 4}, {std::pair{16L, 16L}, {8L, 8L}, {4L, 4L}, {2L, 2L}},
                             rng);
    Pyramid c = make_pyramid(rng, 4, 16);
    const Tensor probe = Tensor::randn({1, 4, 16, 16}, rng);
    const auto res = gradcheck(
        [&]() { return weighted_sum(neck.forward(c).level(2), probe); },
        {c.level(2), c.level(3), c.level(4), c.level(5)}, 1e-5, {"C2", "C3", "C4", "C5"});
    CHECK(res.max_rel_error < 1e-4);
}
