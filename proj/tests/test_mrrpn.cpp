#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fsdet/gradcheck.hpp"
#include "fsdet/layers.hpp"
#include "fsdet/mrrpn.hpp"

using namespace fsdet;
using namespace fsdet::nn;
using namespace fsdet::rpn;
using ad::Var;

namespace {

MrrpnConfig small_config(std::int64_t stages = 3, std::int64_t channels = 8) {
    MrrpnConfig cfg;
    cfg.num_stages = stages;
    cfg.dilations.assign(static_cast<std::size_t>(stages - 1), 2);
    cfg.pos_iou_thresholds.clear();
    for (std::int64_t t = 0; t < stages; ++t) {
        cfg.pos_iou_thresholds.push_back(std::min(0.5 + 0.1 * static_cast<double>(t), 0.7));
    }
    cfg.channels = channels;
    cfg.anchors.strides = {4, 8, 16, 32};
    cfg.anchors.scales = {std::vector<double>{8.0}, {16.0}, {32.0}, {64.0}};
    cfg.anchors.ratios = {1.0};
    return cfg;
}

neck::Pyramid random_pyramid(Rng& rng, std::int64_t c, std::int64_t base) {
    neck::Pyramid p;
    for (std::int64_t level = 2; level <= 5; ++level) {
        const std::int64_t s = base >> (level - 2);
        p.level(level) = Var::constant(Tensor::randn({1, c, s, s}, rng, 0.5));
    }
    return p;
}

}  // namespace

TEST_CASE("generate_anchors: centers, counts, ratio convention") {
    AnchorConfig cfg;
    cfg.strides = {16, 16, 16, 16};
    cfg.scales = {std::vector<double>{32.0}, {32.0}, {32.0}, {32.0}};
    cfg.ratios = {1.0};
    SUBCASE("cell (0,0) with stride 16 scale 32 centers at (8,8)") {
        const auto anchors = generate_anchors(cfg, 2, 1, 1);
        REQUIRE(anchors.size() == 1);
        CHECK(anchors[0].x1 == doctest::Approx(-8.0));
        CHECK(anchors[0].y1 == doctest::Approx(-8.0));
        CHECK(anchors[0].x2 == doctest::Approx(24.0));
        CHECK(anchors[0].y2 == doctest::Approx(24.0));
    }
    SUBCASE("4x4 map, 2 scales, 3 ratios -> 96 anchors") {
        cfg.scales[0] = {16.0, 32.0};
        cfg.ratios = {0.5, 1.0, 2.0};
        CHECK(generate_anchors(cfg, 2, 4, 4).size() == 96);
    }
    SUBCASE("ratio 2 preserves area: w = 32/sqrt(2), h = 32*sqrt(2)") {
        cfg.ratios = {2.0};
        const auto anchors = generate_anchors(cfg, 2, 1, 1);
        REQUIRE(anchors.size() == 1);
        CHECK(anchors[0].width() == doctest::Approx(32.0 / std::sqrt(2.0)).epsilon(1e-9));
        CHECK(anchors[0].height() == doctest::Approx(32.0 * std::sqrt(2.0)).epsilon(1e-9));
        CHECK(anchors[0].area() == doctest::Approx(32.0 * 32.0).epsilon(1e-6));
    }
    SUBCASE("empty scales rejected") {
        cfg.scales[0] = {};
        CHECK_THROWS_AS(generate_anchors(cfg, 2, 2, 2), ConfigError);
    }
}

TEST_CASE("encode/decode: identity, round trip, normalized shift") {
    const Box anchor{0, 0, 16, 16};
    SUBCASE("zero deltas decode to the anchor") {
        const Box b = decode_box(anchor, {0, 0, 0, 0}, 100, 100);
        CHECK(b.x1 == doctest::Approx(0.0));
        CHECK(b.y1 == doctest::Approx(0.0));
        CHECK(b.x2 == doctest::Approx(16.0));
        CHECK(b.y2 == doctest::Approx(16.0));
    }
    SUBCASE("dx=0.5 shifts the center by 8 px in x") {
        const Box b = decode_box(anchor, {0.5, 0, 0, 0}, 100, 100);
        CHECK(b.cx() == doctest::Approx(16.0));
        CHECK(b.cy() == doctest::Approx(8.0));
    }
    SUBCASE("round trip on 100 random pairs stays under 1e-4 px") {
        Rng rng(21);
        for (int i = 0; i < 100; ++i) {
            const double ax = rng.uniform(0, 60), ay = rng.uniform(0, 60);
            const Box a{ax, ay, ax + rng.uniform(4, 30), ay + rng.uniform(4, 30)};
            const double tx = rng.uniform(0, 60), ty = rng.uniform(0, 60);
            const Box t{tx, ty, tx + rng.uniform(4, 30), ty + rng.uniform(4, 30)};
            const Box back = decode_box(a, encode_box(a, t), 128, 128);
            CHECK(std::abs(back.x1 - t.x1) < 1e-4);
            CHECK(std::abs(back.y1 - t.y1) < 1e-4);
            CHECK(std::abs(back.x2 - t.x2) < 1e-4);
            CHECK(std::abs(back.y2 - t.y2) < 1e-4);
        }
    }
    SUBCASE("non-positive target extent rejected") {
        CHECK_THROWS_AS(encode_box(anchor, Box{5, 5, 5, 9}), DataError);
    }
}

TEST_CASE("assign_targets: identity, disjoint, threshold walk") {
    MrrpnConfig cfg = small_config();
    const std::vector<Box> gt = {{10, 10, 30, 30}};
    SUBCASE("box identical to gt is positive at every stage") {
        for (std::int64_t stage = 1; stage <= 3; ++stage) {
            const auto a = assign_targets({{10, 10, 30, 30}}, gt, stage, cfg);
            CHECK(a.labels[0] == BoxLabel::kPositive);
            CHECK(a.matched_gt[0] == 0);
        }
    }
    SUBCASE("disjoint box is negative at every stage") {
        for (std::int64_t stage = 1; stage <= 3; ++stage) {
            const auto a = assign_targets({{50, 50, 70, 70}, {10, 10, 30, 30}}, gt, stage, cfg);
            CHECK(a.labels[0] == BoxLabel::kNegative);
        }
    }
    SUBCASE("IoU 0.55 walks positive -> ignore -> band check at stage 3") {
        // Probe inside the gt: IoU = inter/gt_area = 11*20/400 = 0.55. A
        // second exact-match box holds the argmax so the force-match rule
        // does not flip the probe.
        const Box probe{10, 10, 21, 30};
        REQUIRE(iou(probe, gt[0]) == doctest::Approx(0.55).epsilon(1e-9));
        const std::vector<Box> boxes = {probe, {10, 10, 30, 30}};
        const auto s1 = assign_targets(boxes, gt, 1, cfg);
        CHECK(s1.labels[0] == BoxLabel::kPositive);
        const auto s2 = assign_targets(boxes, gt, 2, cfg);
        CHECK(s2.labels[0] == BoxLabel::kIgnore);  // 0.55 in [0.4, 0.6)
        const auto s3 = assign_targets(boxes, gt, 3, cfg);
        CHECK(s3.labels[0] == BoxLabel::kIgnore);  // 0.55 >= 0.7 - 0.2 band
    }
    SUBCASE("no gt boxes -> all negative") {
        const auto a = assign_targets({{0, 0, 5, 5}}, {}, 1, cfg);
        CHECK(a.labels[0] == BoxLabel::kNegative);
    }
}

TEST_CASE("iou_loss: hand geometry and degenerate guard") {
    SUBCASE("pred == gt -> 0") {
        const Var pred = Var::leaf(Tensor({1, 4}, {1, 2, 5, 6}), true);
        const Var loss = iou_loss_rows(pred, Tensor({1, 4}, {1, 2, 5, 6}));
        CHECK(loss.val()[0] == doctest::Approx(0.0));
    }
    SUBCASE("disjoint -> 1") {
        const Var pred = Var::leaf(Tensor({1, 4}, {0, 0, 1, 1}), true);
        const Var loss = iou_loss_rows(pred, Tensor({1, 4}, {5, 5, 6, 6}));
        CHECK(loss.val()[0] == doctest::Approx(1.0));
    }
    SUBCASE("hand case: inter 2, union 6 -> loss 2/3") {
        const Var pred = Var::leaf(Tensor({1, 4}, {0, 0, 2, 2}), true);
        const Var loss = iou_loss_rows(pred, Tensor({1, 4}, {1, 0, 3, 2}));
        CHECK(loss.val()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-9));
    }
    SUBCASE("degenerate pred -> loss 1 and zero gradient") {
        Var pred = Var::leaf(Tensor({1, 4}, {3, 3, 3, 3}), true);
        Var loss = mean(iou_loss_rows(pred, Tensor({1, 4}, {1, 1, 4, 4})));
        CHECK(loss.val()[0] == doctest::Approx(1.0));
        ad::backward(loss);
        for (int i = 0; i < 4; ++i) CHECK(pred.grad()[i] == 0.0);
    }
    SUBCASE("gradcheck away from kinks") {
        Var pred = Var::leaf(Tensor({2, 4}, {1.2, 0.7, 4.8, 3.9, 0.3, 0.2, 2.2, 2.7}), true);
        const Tensor gt({2, 4}, {1.0, 1.0, 5.0, 4.0, 0.0, 0.0, 2.0, 3.0});
        const auto res = gradcheck([&]() { return mean(iou_loss_rows(pred, gt)); }, {pred}, 1e-6,
                                   {"pred"});
        CHECK(res.max_rel_error < 1e-4);
    }
}

TEST_CASE("mrrpn_loss: paper constants and linearity") {
    MrrpnConfig cfg = small_config(3);
    SUBCASE("alpha=7, lambda=1.4, L_reg=0.1 each, L_cls=0.2 -> 3.14") {
        CHECK(mrrpn_loss_value({0.1, 0.1, 0.1}, 0.2, cfg) == doctest::Approx(3.14).epsilon(1e-12));
        std::vector<Var> regs;
        for (int i = 0; i < 3; ++i) regs.push_back(Var::constant(Tensor({1}, {0.1})));
        const Var cls = Var::constant(Tensor({1}, {0.2}));
        CHECK(mrrpn_loss(regs, cls, cfg).val()[0] == doctest::Approx(3.14).epsilon(1e-12));
    }
    SUBCASE("zero regression terms leave exactly L_cls") {
        CHECK(mrrpn_loss_value({0, 0, 0}, 0.37, cfg) == doctest::Approx(0.37).epsilon(1e-15));
    }
    SUBCASE("scaling every L_reg by c scales the regression term by c") {
        const double base = mrrpn_loss_value({0.2, 0.3, 0.1}, 0.0, cfg);
        const double scaled = mrrpn_loss_value({0.6, 0.9, 0.3}, 0.0, cfg);
        CHECK(scaled == doctest::Approx(3.0 * base).epsilon(1e-12));
    }
    SUBCASE("length mismatch rejected") {
        CHECK_THROWS_AS(mrrpn_loss_value({0.1, 0.1}, 0.0, cfg), ShapeError);
    }
}

TEST_CASE("refine stages: zero delta heads are the identity on boxes") {
    MrrpnConfig cfg = small_config(3, 8);
    Rng rng(22);
    Mrrpn head = Mrrpn::init(cfg, rng);
    for (auto& h : head.params().delta_heads) {
        h.w.mutable_val().fill(0.0);
        h.b.mutable_val().fill(0.0);
    }
    head.params().objectness_head.w.mutable_val().fill(0.0);
    head.params().objectness_head.b.mutable_val().fill(0.0);
    neck::Pyramid p = random_pyramid(rng, 8, 32);
    const auto results = head.run_level(p.level(2), 2, 128, 128);
    REQUIRE(results.size() == 3);
    const auto anchors = generate_anchors(cfg.anchors, 2, 32, 32);
    for (const auto& stage : results) {
        REQUIRE(stage.boxes.val().dim(0) == static_cast<std::int64_t>(anchors.size()));
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            // clipped to the image, otherwise exactly the anchor
            const Box expect = decode_box(anchors[i], {0, 0, 0, 0}, 128, 128);
            CHECK(stage.boxes.val()[static_cast<std::int64_t>(i) * 4 + 0] ==
                  doctest::Approx(expect.x1).epsilon(1e-12));
            CHECK(stage.boxes.val()[static_cast<std::int64_t>(i) * 4 + 3] ==
                  doctest::Approx(expect.y2).epsilon(1e-12));
        }
    }
    SUBCASE("objectness head zeroed gives logits 0, scores 0.5") {
        for (std::int64_t i = 0; i < results.back().objectness.val().numel(); ++i) {
            CHECK(results.back().objectness.val()[i] == 0.0);
        }
    }
}

TEST_CASE("refine stage: constant delta head shifts every box by the encoded amount") {
    MrrpnConfig cfg = small_config(2, 4);
    Rng rng(23);
    Mrrpn head = Mrrpn::init(cfg, rng);
    // hand-set constant delta head output via bias over zeroed weights
    head.params().delta_heads[0].w.mutable_val().fill(0.0);
    head.params().delta_heads[0].b.mutable_val()[0] = 0.25;   // dx
    head.params().delta_heads[0].b.mutable_val()[1] = -0.1;   // dy
    head.params().delta_heads[0].b.mutable_val()[2] = 0.2;    // dw
    head.params().delta_heads[0].b.mutable_val()[3] = 0.05;   // dh
    neck::Pyramid p = random_pyramid(rng, 4, 32);
    const auto results = head.run_level(p.level(3), 3, 256, 256);
    const auto anchors = generate_anchors(cfg.anchors, 3, 16, 16);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const Box expect = decode_box(anchors[i], {0.25, -0.1, 0.2, 0.05}, 256, 256);
        for (int k = 0; k < 4; ++k) {
            const double got = results[0].boxes.val()[static_cast<std::int64_t>(i) * 4 + k];
            const double want = k == 0 ? expect.x1 : k == 1 ? expect.y1 : k == 2 ? expect.x2
                                                                                 : expect.y2;
            CHECK(got == doctest::Approx(want).epsilon(1e-9));
        }
    }
}

TEST_CASE("stage feature maps keep their spatial extent") {
    MrrpnConfig cfg = small_config(3, 8);
    Rng rng(24);
    Mrrpn head = Mrrpn::init(cfg, rng);
    neck::Pyramid p = random_pyramid(rng, 8, 32);
    // borrow the internal runner through run_level; boxes count fixed means
    // the per-stage features kept H x W (delta gather would throw otherwise)
    const auto results = head.run_level(p.level(2), 2, 128, 128);
    CHECK(results.size() == 3);
}

TEST_CASE("final stage with zero offsets equals a standard conv stage") {
    MrrpnConfig cfg = small_config(1, 6);
    Rng rng(25);
    Mrrpn head = Mrrpn::init(cfg, rng);
    // offset conv is zero-initialized, so the deformable final stage must
    // match a plain conv2d with the same kernel
    neck::Pyramid p = random_pyramid(rng, 6, 32);
    const Var feats = p.level(4);
    const auto results = head.run_level(feats, 4, 128, 128);
    const Var plain = relu(conv2d(feats, head.params().deform_conv.w, head.params().deform_conv.b,
                                  head.params().deform_conv.spec));
    const Var delta_map = head.params().delta_heads[0].forward(plain);
    // run_level's final features are not exposed; compare through the boxes
    // path instead: zero delta head means anchors either way, so compare the
    // objectness map which reads the deformable features.
    const Var obj_plain = head.params().objectness_head.forward(plain);
    (void)delta_map;
    const auto anchors = generate_anchors(cfg.anchors, 4, 8, 8);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const std::int64_t gx = std::clamp<std::int64_t>(
            static_cast<std::int64_t>(anchors[i].cx() / 16.0), 0, 7);
        const std::int64_t gy = std::clamp<std::int64_t>(
            static_cast<std::int64_t>(anchors[i].cy() / 16.0), 0, 7);
        CHECK(results.back().objectness.val()[static_cast<std::int64_t>(i)] ==
              doctest::Approx(obj_plain.val().at4(0, 0, gy, gx)).epsilon(1e-9));
    }
}

TEST_CASE("parameter count strictly increases with stage count") {
    Rng rng(26);
    std::int64_t prev = 0;
    for (std::int64_t n = 1; n <= 4; ++n) {
        MrrpnConfig cfg = small_config(n, 8);
        Mrrpn head = Mrrpn::init(cfg, rng);
        ParamSet ps;
        head.register_params(ps, "rpn");
        const std::int64_t count = ps.total_count();
        if (n > 1) CHECK(count > prev);
        prev = count;
    }
}

TEST_CASE("mrrpn forward_train and propose behave deterministically") {
    MrrpnConfig cfg = small_config(2, 6);
    cfg.post_nms = 16;
    Rng rng(27);
    Mrrpn head = Mrrpn::init(cfg, rng);
    // make objectness non-trivial
    for (std::int64_t i = 0; i < head.params().objectness_head.w.val().numel(); ++i) {
        head.params().objectness_head.w.mutable_val()[i] = rng.normal(0.0, 0.2);
    }
    Rng data_rng(28);
    neck::Pyramid p = random_pyramid(data_rng, 6, 32);
    const std::vector<Box> gt = {{20, 20, 52, 52}, {70, 80, 100, 110}};

    Rng rng_a(5), rng_b(5);
    MrrpnPlan plan;
    const auto la = head.forward_train(p, gt, 128, 128, rng_a, nullptr, &plan);
    const auto lb = head.forward_train(p, gt, 128, 128, rng_b, nullptr, nullptr);
    REQUIRE(la.stage_reg.size() == 2);
    CHECK(la.stage_reg[0].val()[0] == doctest::Approx(lb.stage_reg[0].val()[0]).epsilon(1e-15));
    CHECK(la.cls.val()[0] == doctest::Approx(lb.cls.val()[0]).epsilon(1e-15));

    SUBCASE("replay reproduces the recorded losses exactly") {
        Rng rng_c(99);  // replay ignores the rng
        const auto lc = head.forward_train(p, gt, 128, 128, rng_c, &plan, nullptr);
        CHECK(lc.stage_reg[0].val()[0] == doctest::Approx(la.stage_reg[0].val()[0]).epsilon(1e-15));
        CHECK(lc.cls.val()[0] == doctest::Approx(la.cls.val()[0]).epsilon(1e-15));
    }

    SUBCASE("proposals are deterministic and capped") {
        const auto pa = head.propose(p, 128, 128);
        const auto pb = head.propose(p, 128, 128);
        REQUIRE(pa.size() == pb.size());
        CHECK(static_cast<std::int64_t>(pa.size()) <= cfg.post_nms);
        for (std::size_t i = 0; i < pa.size(); ++i) {
            CHECK(pa[i].score == pb[i].score);
            CHECK(pa[i].box.x1 == pb[i].box.x1);
        }
    }

    SUBCASE("boxes stay valid and clipped at every stage") {
        const auto results = head.run_level(p.level(2), 2, 128, 128);
        for (const auto& stage : results) {
            for (std::int64_t i = 0; i < stage.boxes.val().dim(0); ++i) {
                const double x1 = stage.boxes.val()[i * 4], y1 = stage.boxes.val()[i * 4 + 1];
                const double x2 = stage.boxes.val()[i * 4 + 2], y2 = stage.boxes.val()[i * 4 + 3];
                CHECK(x2 > x1);
                CHECK(y2 > y1);
                CHECK(x1 >= 0.0);
                CHECK(y1 >= 0.0);
                CHECK(x2 <= 128.0);
                CHECK(y2 <= 128.0);
            }
        }
    }
}

TEST_CASE("gradcheck: deformable final stage through the objectness read") {
    MrrpnConfig cfg = small_config(1, 4);
    Rng rng(29);
    Mrrpn head = Mrrpn::init(cfg, rng);
    // non-zero offset conv bias so the deformable path is exercised away
    // from the integer grid
    for (std::int64_t i = 0; i < head.params().offset_conv.b.val().numel(); ++i) {
        head.params().offset_conv.b.mutable_val()[i] = 0.3;
    }
    for (std::int64_t i = 0; i < head.params().objectness_head.w.val().numel(); ++i) {
        head.params().objectness_head.w.mutable_val()[i] = rng.normal(0.0, 0.3);
    }
    Var feats = Var::leaf(Tensor::randn({1, 4, 8, 8}, rng, 0.5), true);
    Rng probe_rng(30);
    const Tensor probe = Tensor::randn({64}, probe_rng);
    const auto res = gradcheck(
        [&]() {
            const auto results = head.run_level(feats, 4, 128, 128);
            return weighted_sum(results.back().objectness, probe);
        },
        {feats, head.params().deform_conv.w, head.params().offset_conv.w,
         head.params().offset_conv.b},
        1e-5, {"features", "deform_w", "offset_w", "offset_b"});
    CHECK(res.max_rel_error < 1e-4);
}
