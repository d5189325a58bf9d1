#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "fsdet/evaluation.hpp"
#include "fsdet/rng.hpp"

using namespace fsdet;
using namespace fsdet::eval;

namespace {

// Brute-force AP oracle: for every detection prefix (in score order), the
// true-positive count is the size of the maximum matching between prefix
// detections and ground truths (IoU >= threshold, same image), found by
// enumerating all injective assignments. AP integrates the resulting PR
// points all-points style. Independent of the production matching code.
double exhaustive_ap(const std::vector<ClassDetection>& detections,
                     const std::vector<ClassGroundTruth>& gts, double thr) {
    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detections[a].score > detections[b].score;
    });
    const std::int64_t G = static_cast<std::int64_t>(gts.size());

    auto max_matching = [&](std::size_t prefix) {
        std::vector<std::int64_t> best{0};
        std::vector<bool> used(gts.size(), false);
        std::function<void(std::size_t, std::int64_t)> rec = [&](std::size_t di, std::int64_t acc) {
            best[0] = std::max(best[0], acc);
            if (di >= prefix) return;
            rec(di + 1, acc);  // detection left unmatched
            const auto& det = detections[order[di]];
            for (std::size_t gi = 0; gi < gts.size(); ++gi) {
                if (used[gi] || gts[gi].image_id != det.image_id) continue;
                if (iou(det.box, gts[gi].box) < thr) continue;
                used[gi] = true;
                rec(di + 1, acc + 1);
                used[gi] = false;
            }
        };
        rec(0, 0);
        return best[0];
    };

    std::vector<double> precision, recall;
    for (std::size_t k = 1; k <= detections.size(); ++k) {
        const std::int64_t tp = max_matching(k);
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(G));
    }
    if (precision.empty()) return 0.0;
    for (std::int64_t i = static_cast<std::int64_t>(precision.size()) - 2; i >= 0; --i) {
        precision[static_cast<std::size_t>(i)] =
            std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i + 1)]);
    }
    double ap = 0.0, prev = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev) * precision[i];
        prev = recall[i];
    }
    return ap;
}

}  // namespace

TEST_CASE("iou hand values") {
    CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == doctest::Approx(1.0));
    CHECK(iou({0, 0, 2, 2}, {5, 5, 6, 6}) == doctest::Approx(0.0));
    CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-9));
}

TEST_CASE("nms: single box, duplicate suppression, hand trace") {
    SUBCASE("single box kept") {
        CHECK(nms({{0, 0, 2, 2}}, {0.7}, 0.5) == std::vector<std::int64_t>{0});
    }
    SUBCASE("two identical boxes keep only the higher score") {
        const auto kept = nms({{0, 0, 2, 2}, {0, 0, 2, 2}}, {0.9, 0.8}, 0.5);
        CHECK(kept == std::vector<std::int64_t>{0});
    }
    SUBCASE("A overlaps B, C disjoint -> keep {A, C}") {
        // IoU(A,B) = 0.6: B inside A sharing 60% area? construct: A area 100,
        // B area 60 inside A: IoU = 60/100 = 0.6.
        const Box A{0, 0, 10, 10};
        const Box B{0, 0, 10, 6};
        const Box C{50, 50, 60, 60};
        REQUIRE(iou(A, B) == doctest::Approx(0.6).epsilon(1e-9));
        const auto kept = nms({A, B, C}, {0.9, 0.8, 0.7}, 0.5);
        CHECK(kept == std::vector<std::int64_t>{0, 2});
    }
    SUBCASE("order independence for distinct scores") {
        Rng rng(41);
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (int i = 0; i < 12; ++i) {
            const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
            boxes.push_back({x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)});
            scores.push_back(0.99 - 0.05 * i);
        }
        const auto base = nms(boxes, scores, 0.4);
        std::vector<Box> kept_boxes;
        for (auto k : base) kept_boxes.push_back(boxes[static_cast<std::size_t>(k)]);
        // permute inputs, map kept back
        std::vector<std::size_t> perm(boxes.size());
        std::iota(perm.begin(), perm.end(), 0);
        Rng prng(42);
        prng.shuffle(perm);
        std::vector<Box> pboxes;
        std::vector<double> pscores;
        for (auto i : perm) {
            pboxes.push_back(boxes[i]);
            pscores.push_back(scores[i]);
        }
        const auto permuted = nms(pboxes, pscores, 0.4);
        std::vector<Box> kept_permuted;
        for (auto k : permuted) kept_permuted.push_back(pboxes[static_cast<std::size_t>(k)]);
        REQUIRE(kept_boxes.size() == kept_permuted.size());
        for (std::size_t i = 0; i < kept_boxes.size(); ++i) {
            CHECK(kept_boxes[i].x1 == kept_permuted[i].x1);
            CHECK(kept_boxes[i].y1 == kept_permuted[i].y1);
        }
    }
}

TEST_CASE("average_precision: trivial and hand PR cases") {
    SUBCASE("all gt matched by higher-scored TPs -> AP 1") {
        std::vector<ClassGroundTruth> gts = {{0, {0, 0, 10, 10}}, {1, {5, 5, 20, 20}}};
        std::vector<ClassDetection> dets = {{0, 0.9, {0, 0, 10, 10}},
                                            {1, 0.8, {5, 5, 20, 20}},
                                            {0, 0.3, {50, 50, 60, 60}}};
        CHECK(average_precision(dets, gts, 0.5).value() == doctest::Approx(1.0));
    }
    SUBCASE("no detections -> AP 0") {
        std::vector<ClassGroundTruth> gts = {{0, {0, 0, 10, 10}}};
        CHECK(average_precision({}, gts, 0.5).value() == doctest::Approx(0.0));
    }
    SUBCASE("2 gt, [TP 0.9, FP 0.8] -> AP 0.5") {
        std::vector<ClassGroundTruth> gts = {{0, {0, 0, 10, 10}}, {0, {30, 30, 44, 44}}};
        std::vector<ClassDetection> dets = {{0, 0.9, {0, 0, 10, 10}}, {0, 0.8, {60, 60, 70, 70}}};
        CHECK(average_precision(dets, gts, 0.5).value() == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("zero gt -> AP undefined") {
        std::vector<ClassDetection> dets = {{0, 0.9, {0, 0, 10, 10}}};
        CHECK_FALSE(average_precision(dets, {}, 0.5).has_value());
    }
    SUBCASE("greedy matching never double-counts a gt") {
        std::vector<ClassGroundTruth> gts = {{0, {0, 0, 10, 10}}};
        std::vector<ClassDetection> dets = {{0, 0.9, {0, 0, 10, 10}}, {0, 0.8, {0, 0, 10, 10}}};
        // second detection is a duplicate -> FP; AP stays 1.0 up to recall 1
        // then precision drops; all-points AP = 1.0 * 1.0 = 1.0
        CHECK(average_precision(dets, gts, 0.5).value() == doctest::Approx(1.0));
    }
}

TEST_CASE("average_precision matches the exhaustive-matching oracle on small scenes") {
    // Scenarios with at most 4 boxes; each detection overlaps at most one gt
    // so greedy per-detection matching attains the maximum matching.
    struct Scene {
        std::vector<ClassGroundTruth> gts;
        std::vector<ClassDetection> dets;
    };
    std::vector<Scene> scenes;
    scenes.push_back({{{0, {0, 0, 10, 10}}, {0, {20, 20, 34, 34}}},
                      {{0, 0.9, {1, 0, 11, 10}}, {0, 0.8, {20, 20, 33, 35}},
                       {0, 0.7, {60, 0, 70, 10}}}});
    scenes.push_back({{{0, {0, 0, 8, 8}}, {1, {0, 0, 8, 8}}},
                      {{0, 0.6, {0, 0, 8, 9}}, {1, 0.5, {0, 1, 8, 8}}, {1, 0.4, {40, 40, 50, 50}},
                       {0, 0.3, {0, 0, 8, 8}}}});
    scenes.push_back({{{0, {10, 10, 30, 30}}},
                      {{0, 0.9, {50, 50, 70, 70}}, {0, 0.8, {11, 10, 30, 30}}}});
    scenes.push_back({{{2, {0, 0, 16, 16}}, {2, {40, 0, 56, 16}}, {2, {0, 40, 16, 56}}},
                      {{2, 0.95, {0, 0, 15, 16}}, {2, 0.85, {41, 0, 56, 16}},
                       {2, 0.75, {0, 41, 16, 56}}, {2, 0.65, {80, 80, 90, 90}}}});
    for (const auto& scene : scenes) {
        const double got = average_precision(scene.dets, scene.gts, 0.5).value();
        const double want = exhaustive_ap(scene.dets, scene.gts, 0.5);
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("AP is monotone non-increasing when a TP turns into an FP") {
    std::vector<ClassGroundTruth> gts = {{0, {0, 0, 10, 10}}, {0, {20, 20, 30, 30}}};
    std::vector<ClassDetection> dets = {{0, 0.9, {0, 0, 10, 10}}, {0, 0.8, {20, 20, 30, 30}}};
    const double before = average_precision(dets, gts, 0.5).value();
    dets[1].box = {60, 60, 70, 70};  // relabel the second detection FP
    const double after = average_precision(dets, gts, 0.5).value();
    CHECK(after <= before + 1e-12);
}

TEST_CASE("EvalReport serialization is deterministic and reconstructs mAP") {
    EvalReport r;
    r.split_id = "synthetic";
    r.shot = 10;
    r.seed = 3;
    r.image_count = 5;
    r.per_class_ap = {{"a", 0.5}, {"b", 0.25}};
    r.map_base = 0.375;
    r.map_novel = 0.0;
    const std::string j1 = r.to_json();
    const std::string j2 = r.to_json();
    CHECK(j1 == j2);
    double mean = 0.0;
    for (const auto& [_, ap] : r.per_class_ap) mean += ap;
    mean /= static_cast<double>(r.per_class_ap.size());
    CHECK(std::abs(mean - r.map_base) < 1e-9);
}
