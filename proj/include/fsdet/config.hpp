#pragma once

#include <cstdint>
#include <string>

#include "fsdet/backbone.hpp"
#include "fsdet/datasets.hpp"
#include "fsdet/gcl.hpp"
#include "fsdet/mrrpn.hpp"

namespace fsdet::det {

struct RoiConfig {
    std::int64_t output_size = 7;
    std::int64_t feature_dim = 128;
    // RoI-to-level rule: level = clamp(canonical_level + floor(log2(sqrt(area)
    // / canonical_size)), 2, 5).
    double canonical_size = 16.0;
    std::int64_t canonical_level = 2;
    std::int64_t train_samples = 32;
    std::int64_t train_positive_cap = 16;
    double fg_iou = 0.5;

    void validate() const;
};

struct TrainConfig {
    double lr_base = 0.005;
    double lr_finetune = 0.001;
    double momentum = 0.9;
    double grad_clip_norm = 5.0;  // global-norm clip; 0 disables
    std::int64_t epochs_base = 6;       // paper-scale 18, desk-scaled by config
    std::int64_t epochs_finetune = 30;  // paper-scale 108, desk-scaled by config
    std::int64_t batch_base = 2;
    std::int64_t batch_finetune = 1;
    std::uint64_t seed = 1;

    void validate() const;
};

struct DetectorConfig {
    std::int64_t image_size = 128;
    BackboneConfig backbone;
    neck::CfpanConfig neck;
    rpn::MrrpnConfig mrrpn;
    gcl::GclConfig gcl;
    RoiConfig roi;
    TrainConfig train;

    void validate() const;
    std::string to_json() const;
    static DetectorConfig from_json(const std::string& text);
};

// One JSON document with command-scoped sections; unknown keys are rejected.
struct RunConfig {
    data::DatasetSpec data;
    std::uint64_t data_seed = 7;
    DetectorConfig model;
    std::string split_id = "synthetic";
    std::int64_t shots = 10;
    std::uint64_t shot_seed = 1;
    double score_thresh = 0.5;
    double nms_thresh = 0.5;

    static RunConfig from_json_file(const std::string& path);
    static RunConfig from_json(const std::string& text);
    std::string to_json() const;
};

}  // namespace fsdet::det
