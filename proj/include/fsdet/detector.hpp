#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fsdet/config.hpp"
#include "fsdet/datasets.hpp"
#include "fsdet/evaluation.hpp"
#include "fsdet/roi_align.hpp"

namespace fsdet::det {

enum class Phase { kBase, kFinetuned };

std::string phase_name(Phase p);

struct Detection {
    Box box;
    std::int64_t class_node = -1;
    std::string class_name;
    double score = 0.0;
};

struct RoiHead {
    nn::ConvLayer conv;       // 3x3 over the pooled window
    nn::LinearLayer fc;       // pooled vector -> feature_dim
    nn::LinearLayer bbox;     // feature_dim -> 4, zero init

    static RoiHead init(std::int64_t channels, const RoiConfig& cfg, Rng& rng);
    ad::Var features(const ad::Var& pooled) const;  // (N,C,S,S) -> (N,feature_dim)
    void register_params(nn::ParamSet& ps, const std::string& prefix) const;
};

// Frozen discrete structure of one training forward; lets gradcheck replay
// the loss as a smooth function of the parameters.
struct RoiPlan {
    std::vector<Box> rois;
    std::vector<std::int64_t> levels;          // pyramid level per roi
    std::vector<std::int64_t> labels;          // classifier node per roi
    std::vector<std::int64_t> positive_rows;   // rows with a box target
    Tensor bbox_targets;                       // (|positive_rows|, 4) encoded deltas
};

struct TrainPlan {
    rpn::MrrpnPlan rpn;
    RoiPlan roi;
    bool flip = false;
};

struct ImageLoss {
    ad::Var total;
    gcl::LossBreakdown breakdown;
    std::int64_t rpn_positives = 0;
};

class Detector {
public:
    static Detector init(const DetectorConfig& cfg, const std::vector<std::string>& base_classes,
                         std::uint64_t seed);

    const DetectorConfig& config() const { return cfg_; }
    const gcl::ClassifierLayout& layout() const { return layout_; }
    Phase phase() const { return phase_; }
    void set_phase(Phase p) { phase_ = p; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    std::int64_t param_count() const { return params_.total_count(); }

    // Binds novel classes. With reserved placeholders this is placeholder
    // activation; with zero placeholders (the standard-loss ablation) the
    // classifier grows freshly initialized nodes instead.
    void activate_novel(const std::vector<std::string>& novel_classes, std::uint64_t seed);

    neck::Pyramid pyramid(const ad::Var& image) const;

    // Full per-image training loss. `replay` freezes the discrete structure
    // (for gradient checking); a fresh plan is recorded into `plan_out`.
    ImageLoss image_loss(const data::AnnotatedImage& image, bool finetune, Rng& rng,
                         const TrainPlan* replay = nullptr, TrainPlan* plan_out = nullptr) const;

    std::vector<Detection> detect(const Tensor& image, double score_thresh,
                                  double nms_thresh) const;

    // Classifier logits over the image's proposals, one row per proposal
    // (columns = all classifier nodes). Used by the sparsity probes.
    Tensor roi_logits(const Tensor& image) const;

    // Simplex deviation of the fusion weights: max |a+b+g-1| over all
    // locations and levels (always ~0 by construction; asserted per step).
    double fusion_simplex_deviation() const;

    std::int64_t roi_level_for_box(const Box& b) const;

    const neck::Cfpan& neck() const { return neck_; }
    const rpn::Mrrpn& rpn() const { return rpn_; }
    ad::Var classifier_weights() const { return classifier_weights_; }

    // Trainer RNG engine state, carried through checkpoints.
    std::string rng_state;

private:
    friend Detector load_checkpoint(const std::string& path);

    void rebuild_params();
    ad::Var roi_features_for(const neck::Pyramid& p, const std::vector<Box>& rois,
                             const std::vector<std::int64_t>& levels) const;

    DetectorConfig cfg_;
    Backbone backbone_;
    neck::Cfpan neck_;
    rpn::Mrrpn rpn_;
    RoiHead roi_head_;
    ad::Var classifier_weights_;  // (total_nodes, feature_dim)
    gcl::ClassifierLayout layout_;
    Phase phase_ = Phase::kBase;
    nn::ParamSet params_;
};

// ---- training drivers --------------------------------------------------------

struct TrainResult {
    Detector detector;
    std::vector<gcl::LossBreakdown> step_log;
    double first_loss = 0.0;
    double last_epoch_mean_loss = 0.0;
    double max_simplex_deviation = 0.0;
};

// Base training: all parameters optimized with SGD + momentum at
// train.lr_base. Dataset must contain base-class labels only.
TrainResult train_base(const data::Dataset& dataset, const data::SplitSpec& split,
                       const DetectorConfig& cfg, std::uint64_t seed,
                       const std::string& log_path = "");

// Fine-tuning: binds novel classes, freezes the backbone (excluded from the
// optimizer), optimizes everything else at train.lr_finetune. The detector
// must be phase=base.
TrainResult fine_tune(Detector detector, const data::Dataset& kshot_dataset,
                      const data::SplitSpec& split, std::uint64_t seed,
                      const std::string& log_path = "");

// ---- checkpoints ---------------------------------------------------------------

void save_checkpoint(const Detector& detector, const std::string& path,
                     const std::string& rng_state = "");
Detector load_checkpoint(const std::string& path);

// ---- evaluation ----------------------------------------------------------------

eval::EvalReport evaluate(const Detector& detector, const data::Dataset& dataset,
                          const data::SplitSpec& split, std::int64_t shot, std::uint64_t seed,
                          double score_thresh = 0.05, double nms_thresh = 0.5);

}  // namespace fsdet::det
