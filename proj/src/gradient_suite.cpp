#include "fsdet/gradient_suite.hpp"

#include "fsdet/detector.hpp"
#include "fsdet/gradcheck.hpp"

namespace fsdet::nn {

using ad::Var;
using det::DetectorConfig;

namespace {

GradSuiteRow row(const std::string& op, const GradCheckResult& res, double threshold) {
    return {op, res.max_rel_error, threshold, res.worst_coordinate, res.max_rel_error < threshold};
}

ConvSpec spec3(std::int64_t cin, std::int64_t cout, std::int64_t r, std::int64_t p) {
    ConvSpec s;
    s.kernel_size = 3;
    s.in_channels = cin;
    s.out_channels = cout;
    s.dilation = r;
    s.padding = p;
    return s;
}

}  // namespace

std::vector<GradSuiteRow> run_gradient_suite() {
    std::vector<GradSuiteRow> rows;
    Rng rng(20240601);

    {
        Var x = Var::leaf(Tensor::randn({1, 2, 6, 6}, rng), true);
        Var w = Var::leaf(Tensor::randn({3, 2, 3, 3}, rng), true);
        Var b = Var::leaf(Tensor::randn({3}, rng), true);
        const Tensor probe = Tensor::randn({1, 3, 4, 4}, rng);
        rows.push_back(row("conv2d (dilated r=2)",
                           gradcheck([&]() {
                               return weighted_sum(conv2d(x, w, b, spec3(2, 3, 2, 1)), probe);
                           }, {x, w, b}),
                           1e-4));
    }
    {
        Var x = Var::leaf(Tensor::randn({1, 2, 6, 6}, rng), true);
        Var w = Var::leaf(Tensor::randn({2, 2, 3, 3}, rng), true);
        Tensor off_t({1, 18, 6, 6});
        for (std::int64_t i = 0; i < off_t.numel(); ++i) off_t[i] = 0.15 + 0.3 * rng.uniform();
        Var off = Var::leaf(std::move(off_t), true);
        const Tensor probe = Tensor::randn({1, 2, 6, 6}, rng);
        rows.push_back(row("deformable_conv2d (incl. offsets)",
                           gradcheck([&]() {
                               return weighted_sum(
                                   deformable_conv2d(x, w, Var(), off, spec3(2, 2, 1, 1)), probe);
                           }, {x, w, off}),
                           1e-4));
    }
    {
        Var x = Var::leaf(Tensor::randn({1, 3, 4, 5}, rng), true);
        const Tensor probe = Tensor::randn({1, 3, 8, 10}, rng);
        rows.push_back(row("bilinear_upsample",
                           gradcheck([&]() { return weighted_sum(bilinear_upsample(x, 2), probe); },
                                     {x}),
                           1e-4));
    }
    {
        neck::CbamParams p = neck::CbamParams::init(3, 4, rng);
        Var x = Var::leaf(Tensor::randn({1, 3, 5, 5}, rng), true);
        const Tensor probe = Tensor::randn({1, 3, 5, 5}, rng);
        rows.push_back(row("cbam",
                           gradcheck([&]() { return weighted_sum(neck::apply_cbam(x, p), probe); },
                                     {x, p.mlp_w1, p.mlp_w2, p.spatial_w, p.spatial_b}),
                           1e-4));
    }
    {
        neck::CfpanConfig cfg;
        cfg.out_channels = 3;
        neck::Cfpan fpn = neck::Cfpan::init(
            cfg, {3, 3, 3, 3}, {std::pair{4L, 4L}, {2L, 2L}, {1L, 1L}, {1L, 1L}}, rng);
        Var p_next = Var::leaf(Tensor::randn({1, 3, 2, 2}, rng), true);
        Var c_next = Var::leaf(Tensor::randn({1, 3, 2, 2}, rng), true);
        Var c_cur = Var::leaf(Tensor::randn({1, 3, 4, 4}, rng), true);
        neck::FusionWeights w{Var::leaf(Tensor::randn({1, 1, 4, 4}, rng, 0.4), true),
                              Var::leaf(Tensor::randn({1, 1, 4, 4}, rng, 0.4), true),
                              Var::leaf(Tensor::randn({1, 1, 4, 4}, rng, 0.4), true)};
        const Tensor probe = Tensor::randn({1, 3, 4, 4}, rng);
        rows.push_back(row(
            "fuse_level",
            gradcheck(
                [&]() {
                    return weighted_sum(
                        fpn.fuse_level(p_next, c_next, c_cur, w, fpn.lateral(3), fpn.lateral(2)),
                        probe);
                },
                {p_next, c_next, c_cur, w.logit_up_p, w.logit_up_c, w.logit_cur}),
            1e-4));
    }
    {
        Var f = Var::leaf(Tensor::randn({1, 2, 6, 6}, rng), true);
        const std::vector<Box> boxes = {{2.3, 1.7, 15.2, 17.9}, {4.4, 6.1, 20.0, 21.5}};
        const Tensor probe = Tensor::randn({2, 2, 3, 3}, rng);
        rows.push_back(row("roi_align",
                           gradcheck([&]() {
                               return weighted_sum(roi_align(f, boxes, 0.25, 3), probe);
                           }, {f}),
                           1e-4));
    }
    {
        Var pred = Var::leaf(Tensor({2, 4}, {1.2, 0.7, 4.8, 3.9, 0.3, 0.2, 2.2, 2.7}), true);
        const Tensor gt({2, 4}, {1.0, 1.0, 5.0, 4.0, 0.0, 0.0, 2.0, 3.0});
        rows.push_back(row("iou_loss",
                           gradcheck([&]() { return mean(iou_loss_rows(pred, gt)); }, {pred}, 1e-6),
                           1e-4));
    }
    {
        gcl::GclConfig cfg;
        cfg.placeholders = 2;
        gcl::ClassifierLayout layout = gcl::ClassifierLayout::make({"a", "b"}, 2);
        Var features = Var::leaf(Tensor::randn({4, 6}, rng), true);
        Var weights = Var::leaf(Tensor::randn({5, 6}, rng), true);
        const std::vector<std::int64_t> labels = {0, 1, 2, 0};
        rows.push_back(row("gcl_base_loss",
                           gradcheck([&]() {
                               const Var logits = cosine_logits(features, weights, 20.0);
                               return gcl::gcl_base_loss(logits, labels, layout, cfg).total;
                           }, {features, weights}),
                           1e-4));
        gcl::ClassifierLayout active = gcl::activate_placeholders(layout, {"n0"});
        const std::vector<std::int64_t> ft_labels = {0, 1, 3, 2};
        rows.push_back(row("gcl_finetune_loss",
                           gradcheck([&]() {
                               const Var logits = cosine_logits(features, weights, 20.0);
                               return gcl::gcl_finetune_loss(logits, ft_labels, active, cfg, weights)
                                   .total;
                           }, {features, weights}),
                           1e-4));
    }
    {
        // Composed per-image training loss on a micro detector, with the
        // discrete structure frozen and the evaluation point nudged off the
        // bilinear and clipping kinks.
        DetectorConfig cfg;
        cfg.image_size = 32;
        cfg.backbone.widths = {2, 2, 2, 2};
        cfg.neck.out_channels = 4;
        cfg.neck.cbam_reduction = 2;
        cfg.mrrpn.channels = 4;
        cfg.mrrpn.num_stages = 2;
        cfg.mrrpn.dilations = {2};
        cfg.mrrpn.pos_iou_thresholds = {0.5, 0.6};
        cfg.mrrpn.anchors.strides = {4, 8, 16, 32};
        cfg.mrrpn.anchors.scales = {std::vector<double>{4.0}, {8.0}, {16.0}, {32.0}};
        cfg.mrrpn.anchors.ratios = {1.0};
        cfg.mrrpn.pre_nms = 64;
        cfg.mrrpn.post_nms = 16;
        cfg.gcl.placeholders = 2;
        cfg.roi.output_size = 3;
        cfg.roi.feature_dim = 8;
        cfg.roi.canonical_size = 8.0;
        cfg.roi.canonical_level = 3;
        cfg.roi.train_samples = 8;
        cfg.roi.train_positive_cap = 4;
        det::Detector detector = det::Detector::init(cfg, {"a", "b"}, 11);
        detector.params().get("rpn.final.offset.b").mutable_val().fill(0.3);
        detector.params().get("rpn.stage1.delta.b").mutable_val().fill(0.01);
        detector.params().get("rpn.stage2.delta.b").mutable_val().fill(0.01);

        data::AnnotatedImage img;
        img.image = Tensor({3, 32, 32});
        for (std::int64_t c = 0; c < 3; ++c) {
            for (std::int64_t y = 0; y < 32; ++y) {
                for (std::int64_t x = 0; x < 32; ++x) {
                    const bool inside = x >= 3 && x < 17 && y >= 5 && y < 19;
                    img.image.at3(c, y, x) = inside ? 0.9 : 0.1 + 0.05 * static_cast<double>(c);
                }
            }
        }
        img.objects.push_back({Box{3, 5, 17, 19}, 1, false});

        Rng plan_rng(13);
        det::TrainPlan plan;
        (void)detector.image_loss(img, false, plan_rng, nullptr, &plan);
        std::vector<Var> leaves = {detector.params().get("backbone.stem.w"),
                                   detector.params().get("backbone.stem.b"),
                                   detector.params().get("neck.fusion3.logit_cur"),
                                   detector.params().get("rpn.final.offset.b"),
                                   detector.params().get("rpn.stage1.delta.b"),
                                   detector.params().get("roi_head.fc.b"),
                                   detector.params().get("classifier.weights")};
        rows.push_back(row("composed training loss",
                           gradcheck([&]() {
                               Rng r(1);
                               return detector.image_loss(img, false, r, &plan, nullptr).total;
                           }, leaves),
                           1e-3));
    }
    return rows;
}

}  // namespace fsdet::nn
