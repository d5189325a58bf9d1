#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fsdet/boxes.hpp"
#include "fsdet/cfpan.hpp"
#include "fsdet/layers.hpp"
#include "fsdet/loss_ops.hpp"

namespace fsdet::rpn {

using ad::Var;
using neck::Pyramid;

struct MrrpnConfig {
    std::int64_t num_stages = 3;                    // N
    std::vector<std::int64_t> dilations = {2, 2};   // stages 1..N-1
    double stage_loss_weight = 7.0;                 // alpha^tau, shared across stages
    double balance = 1.4;                           // lambda
    std::vector<double> pos_iou_thresholds = {0.5, 0.6, 0.7};  // per stage
    double neg_margin = 0.2;
    double force_match_floor = 0.3;  // argmax rule needs at least this IoU
    std::int64_t channels = 64;  // matches the neck width
    std::int64_t pre_nms = 1000;
    std::int64_t post_nms = 100;
    double nms_thresh = 0.7;
    std::int64_t reg_samples = 64;   // positive cap per image for the IoU loss
    std::int64_t cls_samples = 128;  // objectness sample cap per level
    // Objectness labels on the final-stage boxes use their own band; the
    // negatives are balanced against the positives so the score does not
    // collapse to the background prior.
    double cls_pos_iou = 0.5;
    double cls_neg_iou = 0.3;
    double cls_neg_ratio = 1.0;
    std::int64_t cls_min_neg = 16;
    AnchorConfig anchors;

    void validate() const;
    double pos_threshold(std::int64_t stage) const;  // 1-based stage index
};

struct MrrpnParams {
    // Stage convs are shared across pyramid levels. Stages 1..N-1 are
    // dilated 3x3 convs, each followed by a 1x1 delta head. The final stage
    // is a deformable 3x3 conv (offset predictor zero-initialized) with
    // sibling delta and objectness heads.
    std::vector<nn::ConvLayer> stage_convs;   // size N-1
    std::vector<nn::ConvLayer> delta_heads;   // size N (per stage)
    nn::ConvLayer offset_conv;                // 3x3 -> 2*9 channels, zero init
    nn::ConvLayer deform_conv;                // 3x3, channels -> channels
    nn::ConvLayer objectness_head;            // 1x1 -> anchors-per-cell

    static MrrpnParams init(const MrrpnConfig& cfg, Rng& rng);
    void register_params(nn::ParamSet& ps, const std::string& prefix) const;
    std::int64_t anchors_per_cell = 0;
};

// Target assignment labels.
enum class BoxLabel : std::int8_t { kNegative = -1, kIgnore = 0, kPositive = 1 };

struct Assignment {
    std::vector<BoxLabel> labels;
    std::vector<std::int64_t> matched_gt;  // valid where positive
};

// Positive iff max-IoU >= threshold(stage) or the box is the argmax for some
// gt; negative iff max-IoU < threshold - neg_margin; otherwise ignore.
// With no gt boxes every box is negative.
Assignment assign_targets(const std::vector<Box>& boxes, const std::vector<Box>& gt,
                          std::int64_t stage, const MrrpnConfig& cfg);

// One refinement stage (1 <= stage <= N-1): dilated conv + relu over the
// incoming features, delta head, per-box delta gather at the box's center
// cell, decode + clip.
struct StageResult {
    Var features;
    Var boxes;       // (M,4)
    Var objectness;  // (M), final stage only
};

// Frozen discrete decisions of one training forward, replayable so that
// finite differences see a smooth function of the parameters.
struct LevelPlan {
    std::vector<std::vector<nn::CellIndex>> delta_cells;  // per stage
    std::vector<std::vector<nn::CellIndex>> obj_cells;    // final stage gather
    std::vector<std::vector<std::int64_t>> reg_rows;      // per stage: sampled positive rows
    std::vector<Tensor> reg_targets;                      // per stage: (|rows|,4) gt
    std::vector<std::int64_t> cls_rows;
    Tensor cls_labels;
};

struct MrrpnPlan {
    std::vector<LevelPlan> levels;  // 2..5
};

struct MrrpnLosses {
    std::vector<Var> stage_reg;  // size N, each a scalar mean IoU loss (0 when no positives)
    Var cls;                     // scalar objectness BCE
    std::int64_t positive_count = 0;
};

class Mrrpn {
public:
    Mrrpn() = default;
    Mrrpn(MrrpnConfig cfg, MrrpnParams params) : cfg_(std::move(cfg)), params_(std::move(params)) {}
    static Mrrpn init(const MrrpnConfig& cfg, Rng& rng);

    const MrrpnConfig& config() const { return cfg_; }
    MrrpnParams& params() { return params_; }
    const MrrpnParams& params() const { return params_; }

    // Runs all stages over one level's feature map (batch 1). Returns the
    // per-stage box matrices and the final objectness.
    std::vector<StageResult> run_level(const Var& feature, std::int64_t level, double image_w,
                                       double image_h) const;

    // Training forward over the full pyramid of one image. When `replay` is
    // null a fresh plan is recorded into `plan_out` (which may also be null);
    // otherwise the recorded discrete structure is reused.
    MrrpnLosses forward_train(const Pyramid& p, const std::vector<Box>& gt, double image_w,
                              double image_h, Rng& rng, const MrrpnPlan* replay = nullptr,
                              MrrpnPlan* plan_out = nullptr) const;

    // Inference: refined boxes + objectness scores -> top-k, NMS, top-k.
    struct Proposal {
        Box box;
        double score;
        std::int64_t level;
    };
    std::vector<Proposal> propose(const Pyramid& p, double image_w, double image_h) const;

    void register_params(nn::ParamSet& ps, const std::string& prefix) const {
        params_.register_params(ps, prefix);
    }

private:
    // Shared stage machinery; records or replays cell/sample structure.
    struct LevelRun {
        std::vector<Var> stage_boxes;  // per stage (M,4)
        Var objectness;                // (M)
    };
    LevelRun run_level_planned(const Var& feature, std::int64_t level, double image_w,
                               double image_h, const LevelPlan* replay, LevelPlan* record) const;

    MrrpnConfig cfg_;
    MrrpnParams params_;
};

// Eq.-faithful multi-stage loss composition:
// L = balance * sum_tau stage_loss_weight * L_reg^tau + L_cls.
Var mrrpn_loss(const std::vector<Var>& stage_reg_losses, const Var& cls_loss,
               const MrrpnConfig& cfg);
double mrrpn_loss_value(const std::vector<double>& stage_reg_losses, double cls_loss,
                        const MrrpnConfig& cfg);

}  // namespace fsdet::rpn
