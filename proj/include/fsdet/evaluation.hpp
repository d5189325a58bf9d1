#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsdet/boxes.hpp"

namespace fsdet::eval {

struct ClassDetection {
    std::int64_t image_id = 0;
    double score = 0.0;
    Box box;
};

struct ClassGroundTruth {
    std::int64_t image_id = 0;
    Box box;
    bool ignore = false;  // ignored gt neither count toward recall nor flag FPs
};

// All-points interpolated average precision at the given IoU threshold.
// Detections are processed in descending score order (ties by lower index);
// each matches the unmatched ground truth of its image with the highest IoU
// >= threshold. Returns nullopt when no countable ground truth exists.
std::optional<double> average_precision(std::vector<ClassDetection> detections,
                                        const std::vector<ClassGroundTruth>& ground_truths,
                                        double iou_threshold = 0.5);

struct EvalReport {
    std::int64_t schema_version = 1;
    std::string split_id;
    std::int64_t shot = 0;
    std::uint64_t seed = 0;
    std::int64_t image_count = 0;
    std::int64_t gt_count = 0;
    std::int64_t detection_count = 0;
    std::map<std::string, double> per_class_ap;  // classes with gt only
    std::vector<std::string> notes;              // e.g. classes skipped for zero gt
    double map_base = 0.0;
    double map_novel = 0.0;
    std::string config_echo;  // resolved config JSON text

    std::string to_json() const;  // deterministic serialization
};

}  // namespace fsdet::eval
