#include "fsdet/evaluation.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

namespace fsdet::eval {

using ordered_json = nlohmann::ordered_json;

std::optional<double> average_precision(std::vector<ClassDetection> detections,
                                        const std::vector<ClassGroundTruth>& ground_truths,
                                        double iou_threshold) {
    std::int64_t countable = 0;
    for (const auto& g : ground_truths) {
        if (!g.ignore) ++countable;
    }
    if (countable == 0) return std::nullopt;
    if (detections.empty()) return 0.0;

    std::vector<std::size_t> order(detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (detections[a].score != detections[b].score) {
            return detections[a].score > detections[b].score;
        }
        return a < b;
    });

    std::vector<bool> gt_used(ground_truths.size(), false);
    std::vector<int> tp_flags;  // 1 = TP, 0 = FP, -1 = matched an ignored gt
    tp_flags.reserve(order.size());
    for (std::size_t oi : order) {
        const auto& det = detections[oi];
        double best_iou = 0.0;
        std::int64_t best = -1;
        for (std::size_t gi = 0; gi < ground_truths.size(); ++gi) {
            const auto& gt = ground_truths[gi];
            if (gt.image_id != det.image_id || gt_used[gi]) continue;
            const double v = iou(det.box, gt.box);
            if (v >= iou_threshold && v > best_iou) {
                best_iou = v;
                best = static_cast<std::int64_t>(gi);
            }
        }
        if (best < 0) {
            tp_flags.push_back(0);
        } else if (ground_truths[static_cast<std::size_t>(best)].ignore) {
            gt_used[static_cast<std::size_t>(best)] = true;
            tp_flags.push_back(-1);  // neither TP nor FP
        } else {
            gt_used[static_cast<std::size_t>(best)] = true;
            tp_flags.push_back(1);
        }
    }

    std::vector<double> precision, recall;
    std::int64_t tp = 0, fp = 0;
    for (int flag : tp_flags) {
        if (flag < 0) continue;
        if (flag == 1) ++tp;
        else ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(countable));
    }
    if (precision.empty()) return 0.0;

    // All-points interpolation: running max of precision from the right,
    // integrated over recall increments.
    for (std::int64_t i = static_cast<std::int64_t>(precision.size()) - 2; i >= 0; --i) {
        precision[static_cast<std::size_t>(i)] =
            std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i + 1)]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

std::string EvalReport::to_json() const {
    ordered_json j;
    j["schema_version"] = schema_version;
    j["split"] = split_id;
    j["shot"] = shot;
    j["seed"] = seed;
    j["counts"] = {{"images", image_count}, {"gt", gt_count}, {"detections", detection_count}};
    j["iou_threshold"] = 0.5;
    j["interpolation"] = "all-points";
    ordered_json aps = ordered_json::object();
    for (const auto& [name, ap] : per_class_ap) aps[name] = ap;
    j["per_class_ap"] = aps;
    j["map_base"] = map_base;
    j["map_novel"] = map_novel;
    j["notes"] = notes;
    if (!config_echo.empty()) j["config"] = ordered_json::parse(config_echo);
    return j.dump(2) + "\n";
}

}  // namespace fsdet::eval
