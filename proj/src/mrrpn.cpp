#include "fsdet/mrrpn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fsdet::rpn {

using namespace fsdet::nn;

void MrrpnConfig::validate() const {
    if (num_stages < 1) throw ConfigError("mrrpn: num_stages must be >= 1");
    if (static_cast<std::int64_t>(dilations.size()) != num_stages - 1) {
        throw ConfigError("mrrpn: dilations must list " + std::to_string(num_stages - 1) +
                          " rates, got " + std::to_string(dilations.size()));
    }
    if (stage_loss_weight <= 0.0) throw ConfigError("mrrpn: stage_loss_weight must be > 0");
    if (balance <= 0.0) throw ConfigError("mrrpn: balance must be > 0");
    if (static_cast<std::int64_t>(pos_iou_thresholds.size()) < num_stages) {
        throw ConfigError("mrrpn: need a positive-IoU threshold per stage");
    }
    for (std::size_t i = 1; i < pos_iou_thresholds.size(); ++i) {
        if (pos_iou_thresholds[i] < pos_iou_thresholds[i - 1]) {
            throw ConfigError("mrrpn: positive-IoU thresholds must be nondecreasing");
        }
    }
    anchors.validate();
}

double MrrpnConfig::pos_threshold(std::int64_t stage) const {
    return pos_iou_thresholds.at(static_cast<std::size_t>(stage - 1));
}

MrrpnParams MrrpnParams::init(const MrrpnConfig& cfg, Rng& rng) {
    cfg.validate();
    MrrpnParams p;
    p.anchors_per_cell = cfg.anchors.anchors_per_cell(2);
    for (std::size_t i = 0; i < 4; ++i) {
        if (cfg.anchors.anchors_per_cell(static_cast<std::int64_t>(i) + 2) != p.anchors_per_cell) {
            throw ConfigError("mrrpn: anchors-per-cell must match across levels (shared heads)");
        }
    }
    const std::int64_t A = p.anchors_per_cell;
    for (std::int64_t t = 0; t < cfg.num_stages - 1; ++t) {
        ConvSpec spec;
        spec.kernel_size = 3;
        spec.dilation = cfg.dilations[static_cast<std::size_t>(t)];
        spec.padding = spec.dilation;
        spec.in_channels = cfg.channels;
        spec.out_channels = cfg.channels;
        p.stage_convs.push_back(ConvLayer::he_init(spec, rng));
    }
    for (std::int64_t t = 0; t < cfg.num_stages; ++t) {
        ConvSpec spec;
        spec.kernel_size = 1;
        spec.in_channels = cfg.channels;
        spec.out_channels = A * 4;
        p.delta_heads.push_back(ConvLayer::gaussian_init(spec, rng, 0.01));
    }
    {
        ConvSpec spec;
        spec.kernel_size = 3;
        spec.padding = 1;
        spec.in_channels = cfg.channels;
        spec.out_channels = 18;  // 2 * 3 * 3 offsets
        p.offset_conv = ConvLayer::zero_init(spec);  // starts as a standard conv
    }
    {
        ConvSpec spec;
        spec.kernel_size = 3;
        spec.padding = 1;
        spec.in_channels = cfg.channels;
        spec.out_channels = cfg.channels;
        p.deform_conv = ConvLayer::he_init(spec, rng);
    }
    {
        ConvSpec spec;
        spec.kernel_size = 1;
        spec.in_channels = cfg.channels;
        spec.out_channels = A;
        p.objectness_head = ConvLayer::gaussian_init(spec, rng, 0.01);
    }
    return p;
}

void MrrpnParams::register_params(ParamSet& ps, const std::string& prefix) const {
    for (std::size_t i = 0; i < stage_convs.size(); ++i) {
        stage_convs[i].register_params(ps, prefix + ".stage" + std::to_string(i + 1) + ".conv");
    }
    for (std::size_t i = 0; i < delta_heads.size(); ++i) {
        delta_heads[i].register_params(ps, prefix + ".stage" + std::to_string(i + 1) + ".delta");
    }
    offset_conv.register_params(ps, prefix + ".final.offset");
    deform_conv.register_params(ps, prefix + ".final.deform");
    objectness_head.register_params(ps, prefix + ".final.objectness");
}

Mrrpn Mrrpn::init(const MrrpnConfig& cfg, Rng& rng) {
    return Mrrpn(cfg, MrrpnParams::init(cfg, rng));
}

Assignment assign_targets(const std::vector<Box>& boxes, const std::vector<Box>& gt,
                          std::int64_t stage, const MrrpnConfig& cfg) {
    if (stage < 1 || stage > cfg.num_stages) {
        throw ConfigError("assign_targets: stage " + std::to_string(stage) + " out of range 1.." +
                          std::to_string(cfg.num_stages));
    }
    const double thr = cfg.pos_threshold(stage);
    Assignment a;
    a.labels.assign(boxes.size(), BoxLabel::kNegative);
    a.matched_gt.assign(boxes.size(), -1);
    if (gt.empty()) return a;  // background-only image

    std::vector<double> best_iou(boxes.size(), 0.0);
    std::vector<std::int64_t> best_gt(boxes.size(), -1);
    std::vector<double> gt_best_iou(gt.size(), 0.0);
    std::vector<std::int64_t> gt_argmax(gt.size(), -1);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const double v = iou(boxes[i], gt[j]);
            if (v > best_iou[i]) {
                best_iou[i] = v;
                best_gt[i] = static_cast<std::int64_t>(j);
            }
            if (v > gt_best_iou[j]) {
                gt_best_iou[j] = v;
                gt_argmax[j] = static_cast<std::int64_t>(i);
            }
        }
    }
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (best_iou[i] >= thr) {
            a.labels[i] = BoxLabel::kPositive;
            a.matched_gt[i] = best_gt[i];
        } else if (best_iou[i] >= thr - cfg.neg_margin) {
            a.labels[i] = BoxLabel::kIgnore;
        }
    }
    for (std::size_t j = 0; j < gt.size(); ++j) {
        if (gt_argmax[j] >= 0 && gt_best_iou[j] >= cfg.force_match_floor) {
            const auto i = static_cast<std::size_t>(gt_argmax[j]);
            a.labels[i] = BoxLabel::kPositive;
            a.matched_gt[i] = static_cast<std::int64_t>(j);
        }
    }
    return a;
}

namespace {

Tensor boxes_to_tensor(const std::vector<Box>& boxes) {
    Tensor t({static_cast<std::int64_t>(boxes.size()), 4});
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        t[static_cast<std::int64_t>(i) * 4 + 0] = boxes[i].x1;
        t[static_cast<std::int64_t>(i) * 4 + 1] = boxes[i].y1;
        t[static_cast<std::int64_t>(i) * 4 + 2] = boxes[i].x2;
        t[static_cast<std::int64_t>(i) * 4 + 3] = boxes[i].y2;
    }
    return t;
}

std::vector<Box> tensor_to_boxes(const Tensor& t) {
    std::vector<Box> boxes(static_cast<std::size_t>(t.dim(0)));
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const std::int64_t k = static_cast<std::int64_t>(i) * 4;
        boxes[i] = {t[k], t[k + 1], t[k + 2], t[k + 3]};
    }
    return boxes;
}

// Center cell of each current box on the level grid, with the anchor slot
// fixing the channel group.
std::vector<CellIndex> center_cells(const Tensor& boxes, std::int64_t stride, std::int64_t feat_h,
                                    std::int64_t feat_w, std::int64_t A, std::int64_t channels_per) {
    const std::int64_t M = boxes.dim(0);
    std::vector<CellIndex> cells(static_cast<std::size_t>(M));
    for (std::int64_t i = 0; i < M; ++i) {
        const double cx = 0.5 * (boxes[i * 4] + boxes[i * 4 + 2]);
        const double cy = 0.5 * (boxes[i * 4 + 1] + boxes[i * 4 + 3]);
        const std::int64_t gx = std::clamp<std::int64_t>(
            static_cast<std::int64_t>(std::floor(cx / static_cast<double>(stride))), 0, feat_w - 1);
        const std::int64_t gy = std::clamp<std::int64_t>(
            static_cast<std::int64_t>(std::floor(cy / static_cast<double>(stride))), 0, feat_h - 1);
        const std::int64_t slot = i % A;
        cells[static_cast<std::size_t>(i)] = {slot * channels_per, gy, gx};
    }
    return cells;
}

}  // namespace

Mrrpn::LevelRun Mrrpn::run_level_planned(const Var& feature, std::int64_t level, double image_w,
                                         double image_h, const LevelPlan* replay,
                                         LevelPlan* record) const {
    const auto& fs = feature.val().shape();
    if (fs.size() != 4 || fs[0] != 1) {
        throw ShapeError("mrrpn: per-image features expected (1,C,H,W), got " +
                         feature.val().shape_str());
    }
    const std::int64_t H = fs[2], W = fs[3];
    const std::int64_t stride = cfg_.anchors.stride_for(level);
    const std::int64_t A = params_.anchors_per_cell;
    const std::int64_t N = cfg_.num_stages;

    const std::vector<Box> anchors = generate_anchors(cfg_.anchors, level, H, W);
    Var boxes = ad::Var::constant(boxes_to_tensor(anchors));

    LevelRun run;
    Var feats = feature;
    for (std::int64_t stage = 1; stage <= N; ++stage) {
        Var delta_map;
        if (stage < N) {
            feats = relu(params_.stage_convs[static_cast<std::size_t>(stage - 1)].forward(feats));
            delta_map = params_.delta_heads[static_cast<std::size_t>(stage - 1)].forward(feats);
        } else {
            const Var offsets = params_.offset_conv.forward(feats);
            feats = relu(deformable_conv2d(feats, params_.deform_conv.w, params_.deform_conv.b,
                                           offsets, params_.deform_conv.spec));
            delta_map = params_.delta_heads[static_cast<std::size_t>(stage - 1)].forward(feats);
        }
        std::vector<CellIndex> cells;
        if (replay) {
            cells = replay->delta_cells.at(static_cast<std::size_t>(stage - 1));
        } else {
            cells = center_cells(boxes.val(), stride, H, W, A, 4);
            if (record) record->delta_cells.push_back(cells);
        }
        const Var deltas = gather_cells(delta_map, cells, 4);
        boxes = decode_clip_boxes(boxes, deltas, image_w, image_h);
        run.stage_boxes.push_back(boxes);

        if (stage == N) {
            const Var obj_map = params_.objectness_head.forward(feats);
            std::vector<CellIndex> obj_cells;
            if (replay) {
                obj_cells = replay->obj_cells.at(0);
            } else {
                // Objectness read at the cell that produced the final refinement.
                obj_cells = cells;
                for (auto& c : obj_cells) c.channel_begin /= 4;
                if (record) record->obj_cells.push_back(obj_cells);
            }
            run.objectness = reshape(gather_cells(obj_map, obj_cells, 1),
                                     {static_cast<std::int64_t>(obj_cells.size())});
        }
    }
    return run;
}

std::vector<StageResult> Mrrpn::run_level(const Var& feature, std::int64_t level, double image_w,
                                          double image_h) const {
    LevelRun run = run_level_planned(feature, level, image_w, image_h, nullptr, nullptr);
    std::vector<StageResult> out;
    for (std::size_t i = 0; i < run.stage_boxes.size(); ++i) {
        StageResult r;
        r.boxes = run.stage_boxes[i];
        if (i + 1 == run.stage_boxes.size()) r.objectness = run.objectness;
        out.push_back(std::move(r));
    }
    return out;
}

MrrpnLosses Mrrpn::forward_train(const Pyramid& p, const std::vector<Box>& gt, double image_w,
                                 double image_h, Rng& rng, const MrrpnPlan* replay,
                                 MrrpnPlan* plan_out) const {
    const std::int64_t N = cfg_.num_stages;
    MrrpnPlan recorded;
    recorded.levels.resize(4);

    // Per stage: per-level sampled IoU-loss vectors, concatenated at the end.
    std::vector<std::vector<Var>> stage_losses(static_cast<std::size_t>(N));
    std::vector<Var> cls_logit_parts;
    std::vector<Tensor> cls_label_parts;

    for (std::int64_t level = 2; level <= 5; ++level) {
        const LevelPlan* level_replay =
            replay ? &replay->levels.at(static_cast<std::size_t>(level - 2)) : nullptr;
        LevelPlan* level_record =
            replay ? nullptr : &recorded.levels[static_cast<std::size_t>(level - 2)];

        LevelRun run = run_level_planned(p.level(level), level, image_w, image_h, level_replay,
                                         level_record);

        for (std::int64_t stage = 1; stage <= N; ++stage) {
            const Var& stage_boxes = run.stage_boxes[static_cast<std::size_t>(stage - 1)];
            std::vector<std::int64_t> rows;
            Tensor targets;
            if (level_replay) {
                rows = level_replay->reg_rows.at(static_cast<std::size_t>(stage - 1));
                targets = level_replay->reg_targets.at(static_cast<std::size_t>(stage - 1));
            } else {
                // Assignment uses the stage's *input* boxes (what it refines).
                const Tensor& input_boxes = stage == 1
                    ? boxes_to_tensor(generate_anchors(
                          cfg_.anchors, level, p.level(level).val().dim(2), p.level(level).val().dim(3)))
                    : run.stage_boxes[static_cast<std::size_t>(stage - 2)].val();
                const Assignment assign =
                    assign_targets(tensor_to_boxes(input_boxes), gt, stage, cfg_);
                for (std::size_t i = 0; i < assign.labels.size(); ++i) {
                    if (assign.labels[i] == BoxLabel::kPositive) {
                        rows.push_back(static_cast<std::int64_t>(i));
                    }
                }
                if (static_cast<std::int64_t>(rows.size()) > cfg_.reg_samples) {
                    rng.shuffle(rows);
                    rows.resize(static_cast<std::size_t>(cfg_.reg_samples));
                    std::sort(rows.begin(), rows.end());
                }
                targets = Tensor({std::max<std::int64_t>(1, static_cast<std::int64_t>(rows.size())), 4});
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    const Box& g = gt[static_cast<std::size_t>(
                        assign.matched_gt[static_cast<std::size_t>(rows[k])])];
                    targets[static_cast<std::int64_t>(k) * 4 + 0] = g.x1;
                    targets[static_cast<std::int64_t>(k) * 4 + 1] = g.y1;
                    targets[static_cast<std::int64_t>(k) * 4 + 2] = g.x2;
                    targets[static_cast<std::int64_t>(k) * 4 + 3] = g.y2;
                }
                level_record->reg_rows.push_back(rows);
                level_record->reg_targets.push_back(targets);
            }
            if (!rows.empty()) {
                stage_losses[static_cast<std::size_t>(stage - 1)].push_back(
                    iou_loss_rows(gather_rows(stage_boxes, rows), targets));
            }
        }

        // Objectness samples from the final-stage boxes, with a dedicated
        // label band and pos/neg balancing.
        std::vector<std::int64_t> cls_rows;
        Tensor cls_labels;
        if (level_replay) {
            cls_rows = level_replay->cls_rows;
            cls_labels = level_replay->cls_labels;
        } else {
            const std::vector<Box> final_boxes = tensor_to_boxes(run.stage_boxes.back().val());
            std::vector<std::int64_t> pos, neg;
            if (gt.empty()) {
                for (std::size_t i = 0; i < final_boxes.size(); ++i) {
                    neg.push_back(static_cast<std::int64_t>(i));
                }
            } else {
                std::vector<double> best(final_boxes.size(), 0.0);
                std::vector<double> gt_best(gt.size(), 0.0);
                std::vector<std::int64_t> gt_arg(gt.size(), -1);
                for (std::size_t i = 0; i < final_boxes.size(); ++i) {
                    for (std::size_t j = 0; j < gt.size(); ++j) {
                        const double v = iou(final_boxes[i], gt[j]);
                        best[i] = std::max(best[i], v);
                        if (v > gt_best[j]) {
                            gt_best[j] = v;
                            gt_arg[j] = static_cast<std::int64_t>(i);
                        }
                    }
                }
                std::vector<std::int8_t> lab(final_boxes.size(), 0);
                for (std::size_t i = 0; i < final_boxes.size(); ++i) {
                    if (best[i] >= cfg_.cls_pos_iou) lab[i] = 1;
                    else if (best[i] < cfg_.cls_neg_iou) lab[i] = -1;
                }
                for (std::size_t j = 0; j < gt.size(); ++j) {
                    if (gt_arg[j] >= 0 && gt_best[j] >= cfg_.force_match_floor) {
                        lab[static_cast<std::size_t>(gt_arg[j])] = 1;
                    }
                }
                for (std::size_t i = 0; i < final_boxes.size(); ++i) {
                    if (lab[i] == 1) pos.push_back(static_cast<std::int64_t>(i));
                    if (lab[i] == -1) neg.push_back(static_cast<std::int64_t>(i));
                }
            }
            const std::int64_t pos_cap = cfg_.cls_samples / 2;
            if (static_cast<std::int64_t>(pos.size()) > pos_cap) {
                rng.shuffle(pos);
                pos.resize(static_cast<std::size_t>(pos_cap));
            }
            const std::int64_t neg_cap = std::min(
                cfg_.cls_samples - static_cast<std::int64_t>(pos.size()),
                std::max(cfg_.cls_min_neg,
                         static_cast<std::int64_t>(cfg_.cls_neg_ratio *
                                                   static_cast<double>(pos.size()))));
            if (static_cast<std::int64_t>(neg.size()) > neg_cap) {
                rng.shuffle(neg);
                neg.resize(static_cast<std::size_t>(neg_cap));
            }
            cls_rows = pos;
            cls_rows.insert(cls_rows.end(), neg.begin(), neg.end());
            std::sort(cls_rows.begin(), cls_rows.end());
            cls_labels = Tensor({std::max<std::int64_t>(1, static_cast<std::int64_t>(cls_rows.size()))});
            std::vector<bool> is_pos(run.stage_boxes.back().val().dim(0), false);
            for (std::int64_t i : pos) is_pos[static_cast<std::size_t>(i)] = true;
            for (std::size_t k = 0; k < cls_rows.size(); ++k) {
                cls_labels[static_cast<std::int64_t>(k)] =
                    is_pos[static_cast<std::size_t>(cls_rows[k])] ? 1.0 : 0.0;
            }
            level_record->cls_rows = cls_rows;
            level_record->cls_labels = cls_labels;
        }
        if (!cls_rows.empty()) {
            std::vector<std::int64_t> idx = cls_rows;
            Var sel = gather_rows(reshape(run.objectness, {run.objectness.val().numel(), 1}), idx);
            cls_logit_parts.push_back(reshape(sel, {static_cast<std::int64_t>(idx.size())}));
            cls_label_parts.push_back(cls_labels);
        }
    }

    MrrpnLosses out;
    for (std::int64_t stage = 0; stage < N; ++stage) {
        auto& parts = stage_losses[static_cast<std::size_t>(stage)];
        if (parts.empty()) {
            out.stage_reg.push_back(ad::Var::constant(Tensor({1})));
        } else {
            const Var losses = concat_vecs(parts);
            out.positive_count += losses.val().numel();
            out.stage_reg.push_back(mean(losses));
        }
    }
    if (cls_logit_parts.empty()) {
        out.cls = ad::Var::constant(Tensor({1}));
    } else {
        std::int64_t total = 0;
        for (const auto& t : cls_label_parts) total += t.numel();
        Tensor labels({total});
        std::int64_t off = 0;
        for (const auto& t : cls_label_parts) {
            std::copy_n(t.data(), t.numel(), labels.data() + off);
            off += t.numel();
        }
        out.cls = bce_with_logits_mean(concat_vecs(cls_logit_parts), labels);
    }
    if (plan_out && !replay) *plan_out = std::move(recorded);
    return out;
}

std::vector<Mrrpn::Proposal> Mrrpn::propose(const Pyramid& p, double image_w,
                                            double image_h) const {
    std::vector<Proposal> all;
    for (std::int64_t level = 2; level <= 5; ++level) {
        LevelRun run = run_level_planned(p.level(level), level, image_w, image_h, nullptr, nullptr);
        const Tensor& boxes = run.stage_boxes.back().val();
        const Tensor& obj = run.objectness.val();
        for (std::int64_t i = 0; i < boxes.dim(0); ++i) {
            Proposal pr;
            pr.box = {boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]};
            pr.score = 1.0 / (1.0 + std::exp(-obj[i]));
            pr.level = level;
            all.push_back(pr);
        }
    }
    std::vector<std::int64_t> order(all.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        if (all[static_cast<std::size_t>(a)].score != all[static_cast<std::size_t>(b)].score) {
            return all[static_cast<std::size_t>(a)].score > all[static_cast<std::size_t>(b)].score;
        }
        return a < b;
    });
    if (static_cast<std::int64_t>(order.size()) > cfg_.pre_nms) {
        order.resize(static_cast<std::size_t>(cfg_.pre_nms));
    }
    std::vector<Box> cand;
    std::vector<double> scores;
    std::vector<std::int64_t> src;
    for (std::int64_t i : order) {
        cand.push_back(all[static_cast<std::size_t>(i)].box);
        scores.push_back(all[static_cast<std::size_t>(i)].score);
        src.push_back(i);
    }
    const std::vector<std::int64_t> kept = nms(cand, scores, cfg_.nms_thresh);
    std::vector<Proposal> out;
    for (std::int64_t k : kept) {
        if (static_cast<std::int64_t>(out.size()) >= cfg_.post_nms) break;
        out.push_back(all[static_cast<std::size_t>(src[static_cast<std::size_t>(k)])]);
    }
    return out;
}

Var mrrpn_loss(const std::vector<Var>& stage_reg_losses, const Var& cls_loss,
               const MrrpnConfig& cfg) {
    if (static_cast<std::int64_t>(stage_reg_losses.size()) != cfg.num_stages) {
        throw ShapeError("mrrpn_loss: expected " + std::to_string(cfg.num_stages) +
                         " stage losses, got " + std::to_string(stage_reg_losses.size()));
    }
    std::vector<Var> terms;
    for (const auto& l : stage_reg_losses) {
        terms.push_back(scale(l, cfg.balance * cfg.stage_loss_weight));
    }
    terms.push_back(cls_loss);
    return add_scalars(terms);
}

double mrrpn_loss_value(const std::vector<double>& stage_reg_losses, double cls_loss,
                        const MrrpnConfig& cfg) {
    if (static_cast<std::int64_t>(stage_reg_losses.size()) != cfg.num_stages) {
        throw ShapeError("mrrpn_loss: expected " + std::to_string(cfg.num_stages) +
                         " stage losses, got " + std::to_string(stage_reg_losses.size()));
    }
    double acc = 0.0;
    for (double l : stage_reg_losses) acc += cfg.stage_loss_weight * l;
    return cfg.balance * acc + cls_loss;
}

}  // namespace fsdet::rpn
