#include "fsdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

namespace fsdet::det {

using namespace fsdet::nn;
using ordered_json = nlohmann::ordered_json;

std::string phase_name(Phase p) { return p == Phase::kBase ? "base" : "finetuned"; }

namespace {
// Input pixels in [0,1] are centered and rescaled to roughly unit variance
// before the stem.
constexpr double kPixelShift = 0.5;
constexpr double kPixelScale = 4.0;
}  // namespace

RoiHead RoiHead::init(std::int64_t channels, const RoiConfig& cfg, Rng& rng) {
    RoiHead h;
    ConvSpec spec;
    spec.kernel_size = 3;
    spec.padding = 1;
    spec.in_channels = channels;
    spec.out_channels = channels;
    h.conv = ConvLayer::he_init(spec, rng);
    // Flattened pooled window: spatial layout carries the shape cues the
    // classifier needs.
    h.fc = LinearLayer::he_init(channels * cfg.output_size * cfg.output_size, cfg.feature_dim, rng);
    h.bbox = LinearLayer::gaussian_init(cfg.feature_dim, 4, rng, 0.01);
    return h;
}

ad::Var RoiHead::features(const ad::Var& pooled) const {
    const ad::Var x = relu(conv.forward(pooled));
    const auto& s = x.val().shape();
    const ad::Var flat = reshape(x, {s[0], s[1] * s[2] * s[3]});
    return relu(fc.forward(flat));
}

void RoiHead::register_params(ParamSet& ps, const std::string& prefix) const {
    conv.register_params(ps, prefix + ".conv");
    fc.register_params(ps, prefix + ".fc");
    bbox.register_params(ps, prefix + ".bbox");
}

Detector Detector::init(const DetectorConfig& cfg, const std::vector<std::string>& base_classes,
                        std::uint64_t seed) {
    cfg.validate();
    Detector d;
    d.cfg_ = cfg;
    Rng rng(splitmix64(seed ^ 0x5eedULL));
    d.backbone_ = Backbone::init(cfg.backbone, rng);

    const std::int64_t s = cfg.image_size;
    const std::array<std::pair<std::int64_t, std::int64_t>, 4> level_sizes = {
        std::pair{s / 4, s / 4}, {s / 8, s / 8}, {s / 16, s / 16}, {s / 32, s / 32}};
    d.neck_ = neck::Cfpan::init(cfg.neck, d.backbone_.out_channels(), level_sizes, rng);
    d.rpn_ = rpn::Mrrpn::init(cfg.mrrpn, rng);
    d.roi_head_ = RoiHead::init(cfg.neck.out_channels, cfg.roi, rng);

    d.layout_ = gcl::ClassifierLayout::make(base_classes, cfg.gcl.placeholders);
    d.classifier_weights_ = ad::Var::leaf(
        Tensor::randn({d.layout_.total_nodes(), cfg.roi.feature_dim}, rng, 0.01), true);
    d.rebuild_params();
    return d;
}

void Detector::rebuild_params() {
    params_ = ParamSet();
    backbone_.register_params(params_, "backbone");
    neck_.register_params(params_, "neck");
    rpn_.register_params(params_, "rpn");
    roi_head_.register_params(params_, "roi_head");
    params_.add("classifier.weights", classifier_weights_);
}

void Detector::activate_novel(const std::vector<std::string>& novel_classes, std::uint64_t seed) {
    if (layout_.placeholders > 0) {
        layout_ = gcl::activate_placeholders(layout_, novel_classes);
        return;
    }
    // Standard-loss ablation: no reserved nodes, grow the classifier.
    std::vector<std::string> sorted = novel_classes;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    const std::int64_t extra = static_cast<std::int64_t>(sorted.size());
    const std::int64_t d = cfg_.roi.feature_dim;
    Rng rng(splitmix64(seed ^ 0x9e1bULL));
    Tensor grown({layout_.total_nodes() + extra, d});
    std::copy_n(classifier_weights_.val().data(), classifier_weights_.val().numel(), grown.data());
    for (std::int64_t i = 0; i < extra * d; ++i) {
        grown[classifier_weights_.val().numel() + i] = rng.normal(0.0, 0.01);
    }
    classifier_weights_ = ad::Var::leaf(std::move(grown), true);
    layout_.placeholders = extra;
    layout_ = gcl::activate_placeholders(layout_, sorted);
    rebuild_params();
}

neck::Pyramid Detector::pyramid(const ad::Var& image) const {
    return neck_.forward(backbone_.forward(image));
}

std::int64_t Detector::roi_level_for_box(const Box& b) const {
    const double size = std::sqrt(std::max(b.area(), 1e-9));
    const double raw = static_cast<double>(cfg_.roi.canonical_level) +
                       std::floor(std::log2(size / cfg_.roi.canonical_size));
    return std::clamp<std::int64_t>(static_cast<std::int64_t>(raw), 2, 5);
}

ad::Var Detector::roi_features_for(const neck::Pyramid& p, const std::vector<Box>& rois,
                                   const std::vector<std::int64_t>& levels) const {
    // Group by level, align each group, then restore original row order.
    const std::int64_t n = static_cast<std::int64_t>(rois.size());
    std::vector<ad::Var> parts;
    std::vector<std::int64_t> part_rows;
    part_rows.reserve(static_cast<std::size_t>(n));
    for (std::int64_t level = 2; level <= 5; ++level) {
        std::vector<Box> group;
        for (std::int64_t i = 0; i < n; ++i) {
            if (levels[static_cast<std::size_t>(i)] == level) {
                group.push_back(rois[static_cast<std::size_t>(i)]);
                part_rows.push_back(i);
            }
        }
        if (group.empty()) continue;
        const double scale = 1.0 / static_cast<double>(cfg_.mrrpn.anchors.stride_for(level));
        parts.push_back(roi_head_.features(
            roi_align(p.level(level), group, scale, cfg_.roi.output_size)));
    }
    // Scatter rows back: build permutation old_row -> concat position.
    std::vector<std::int64_t> inverse(static_cast<std::size_t>(n));
    for (std::size_t pos = 0; pos < part_rows.size(); ++pos) {
        inverse[static_cast<std::size_t>(part_rows[pos])] = static_cast<std::int64_t>(pos);
    }
    ad::Var stacked;
    if (parts.size() == 1) {
        stacked = parts[0];
    } else {
        // concat along rows via gather over a virtual concatenation
        std::vector<ad::Var> flat;
        for (auto& v : parts) flat.push_back(v);
        // Rows concatenate by building a single matrix op:
        std::int64_t dim = flat[0].val().dim(1);
        std::int64_t total = 0;
        for (auto& v : flat) total += v.val().dim(0);
        std::vector<ad::Var> as_vec;
        for (auto& v : flat) as_vec.push_back(reshape(v, {v.val().numel()}));
        stacked = reshape(concat_vecs(as_vec), {total, dim});
    }
    return gather_rows(stacked, inverse);
}

namespace {

struct RoiSample {
    std::vector<Box> rois;
    std::vector<std::int64_t> levels;
    std::vector<std::int64_t> labels;
    std::vector<std::int64_t> positive_rows;
    Tensor bbox_targets;
};

}  // namespace

ImageLoss Detector::image_loss(const data::AnnotatedImage& image, bool finetune, Rng& rng,
                               const TrainPlan* replay, TrainPlan* plan_out) const {
    if (image.image.rank() != 3 || image.image.dim(0) != 3) {
        throw ShapeError("image_loss: expected (3,H,W) image tensor");
    }
    const std::int64_t H = image.image.dim(1), W = image.image.dim(2);
    if (H != cfg_.image_size || W != cfg_.image_size) {
        throw DataError("image_loss: image " + std::to_string(W) + "x" + std::to_string(H) +
                        " does not match configured size " + std::to_string(cfg_.image_size));
    }

    // Optional horizontal flip (seeded). The replayed plan fixes the choice.
    const bool flip = replay ? replay->flip : (rng.uniform() < 0.5);
    if (plan_out) plan_out->flip = flip;

    Tensor img_t({1, 3, H, W});
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const std::int64_t sx = flip ? W - 1 - x : x;
                img_t.at4(0, c, y, x) =
                    (image.image[(c * H + y) * W + sx] - kPixelShift) * kPixelScale;
            }
        }
    }
    std::vector<Box> gt, ignored;
    std::vector<std::int64_t> gt_nodes;
    for (const auto& obj : image.objects) {
        Box b = obj.box;
        if (flip) {
            const double x1 = static_cast<double>(W) - b.x2;
            const double x2 = static_cast<double>(W) - b.x1;
            b.x1 = x1;
            b.x2 = x2;
        }
        if (obj.ignore) {
            ignored.push_back(b);
            continue;
        }
        gt.push_back(b);
        gt_nodes.push_back(obj.class_id);  // caller remapped ids to nodes
    }

    const ad::Var image_var = ad::Var::constant(std::move(img_t));
    const neck::Pyramid p = pyramid(image_var);

    // --- MRRPN losses -------------------------------------------------------
    rpn::MrrpnPlan rpn_plan;
    rpn::MrrpnLosses rpn_losses =
        rpn_.forward_train(p, gt, static_cast<double>(W), static_cast<double>(H), rng,
                           replay ? &replay->rpn : nullptr, plan_out ? &rpn_plan : nullptr);
    if (plan_out) plan_out->rpn = std::move(rpn_plan);
    const ad::Var rpn_total = rpn::mrrpn_loss(rpn_losses.stage_reg, rpn_losses.cls, cfg_.mrrpn);

    // --- RoI sampling ---------------------------------------------------------
    RoiSample sample;
    if (replay) {
        sample.rois = replay->roi.rois;
        sample.levels = replay->roi.levels;
        sample.labels = replay->roi.labels;
        sample.positive_rows = replay->roi.positive_rows;
        sample.bbox_targets = replay->roi.bbox_targets;
    } else {
        std::vector<Box> candidates;
        {
            // Proposals from the current detector state plus the gt boxes.
            neck::Pyramid detached;
            for (std::int64_t level = 2; level <= 5; ++level) {
                detached.level(level) = ad::Var::constant(p.level(level).val());
            }
            const auto proposals =
                rpn_.propose(detached, static_cast<double>(W), static_cast<double>(H));
            for (const auto& pr : proposals) candidates.push_back(pr.box);
        }
        for (const auto& g : gt) candidates.push_back(g);

        std::vector<std::int64_t> pos, neg;
        std::vector<std::int64_t> matched(candidates.size(), -1);
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            double best = 0.0;
            std::int64_t best_j = -1;
            for (std::size_t j = 0; j < gt.size(); ++j) {
                const double v = iou(candidates[i], gt[j]);
                if (v > best) {
                    best = v;
                    best_j = static_cast<std::int64_t>(j);
                }
            }
            if (best >= cfg_.roi.fg_iou) {
                pos.push_back(static_cast<std::int64_t>(i));
                matched[i] = best_j;
                continue;
            }
            // Candidates on masked instances are dropped entirely.
            bool on_ignored = false;
            for (const auto& ig : ignored) {
                if (iou(candidates[i], ig) >= cfg_.roi.fg_iou) {
                    on_ignored = true;
                    break;
                }
            }
            if (!on_ignored) neg.push_back(static_cast<std::int64_t>(i));
        }
        if (static_cast<std::int64_t>(pos.size()) > cfg_.roi.train_positive_cap) {
            rng.shuffle(pos);
            pos.resize(static_cast<std::size_t>(cfg_.roi.train_positive_cap));
        }
        const std::int64_t neg_cap =
            std::max<std::int64_t>(1, cfg_.roi.train_samples - static_cast<std::int64_t>(pos.size()));
        if (static_cast<std::int64_t>(neg.size()) > neg_cap) {
            rng.shuffle(neg);
            neg.resize(static_cast<std::size_t>(neg_cap));
        }
        std::vector<std::int64_t> chosen = pos;
        chosen.insert(chosen.end(), neg.begin(), neg.end());
        std::sort(chosen.begin(), chosen.end());

        std::vector<std::array<double, 4>> targets;
        for (std::size_t row = 0; row < chosen.size(); ++row) {
            const std::int64_t i = chosen[row];
            const Box& b = candidates[static_cast<std::size_t>(i)];
            sample.rois.push_back(b);
            sample.levels.push_back(roi_level_for_box(b));
            const std::int64_t j = matched[static_cast<std::size_t>(i)];
            const bool is_pos = std::find(pos.begin(), pos.end(), i) != pos.end();
            if (is_pos && j >= 0) {
                sample.labels.push_back(gt_nodes[static_cast<std::size_t>(j)]);
                sample.positive_rows.push_back(static_cast<std::int64_t>(row));
                targets.push_back(encode_box(b, gt[static_cast<std::size_t>(j)]));
            } else {
                sample.labels.push_back(layout_.background_node());
            }
        }
        sample.bbox_targets =
            Tensor({std::max<std::int64_t>(1, static_cast<std::int64_t>(targets.size())), 4});
        for (std::size_t k = 0; k < targets.size(); ++k) {
            for (int c = 0; c < 4; ++c) {
                sample.bbox_targets[static_cast<std::int64_t>(k) * 4 + c] = targets[k][static_cast<std::size_t>(c)];
            }
        }
        if (plan_out) {
            plan_out->roi.rois = sample.rois;
            plan_out->roi.levels = sample.levels;
            plan_out->roi.labels = sample.labels;
            plan_out->roi.positive_rows = sample.positive_rows;
            plan_out->roi.bbox_targets = sample.bbox_targets;
        }
    }

    ImageLoss out;
    out.rpn_positives = rpn_losses.positive_count;

    gcl::GclLoss cls_loss;
    ad::Var bbox_loss;
    if (!sample.rois.empty()) {
        const ad::Var feats = roi_features_for(p, sample.rois, sample.levels);
        const ad::Var logits = cosine_logits(feats, classifier_weights_, cfg_.gcl.cosine_scale);
        if (!finetune) {
            cls_loss = gcl::gcl_base_loss(logits, sample.labels, layout_, cfg_.gcl);
        } else if (cfg_.gcl.placeholders > 0 || layout_.activated()) {
            cls_loss = gcl::gcl_finetune_loss(logits, sample.labels, layout_, cfg_.gcl,
                                              classifier_weights_);
        }
        if (!sample.positive_rows.empty()) {
            const ad::Var deltas = roi_head_.bbox.forward(gather_rows(feats, sample.positive_rows));
            bbox_loss = smooth_l1_rows_mean(deltas, sample.bbox_targets);
        }
    }

    // --- composition ------------------------------------------------------------
    std::vector<ad::Var> terms = {rpn_total};
    if (cls_loss.total.defined()) terms.push_back(cls_loss.total);
    if (bbox_loss.defined()) terms.push_back(bbox_loss);
    out.total = add_scalars(terms);

    // Weighted contributions; the breakdown total is their plain sum.
    for (std::size_t t = 0; t < rpn_losses.stage_reg.size(); ++t) {
        out.breakdown.components["rpn_reg_stage" + std::to_string(t + 1)] =
            cfg_.mrrpn.balance * cfg_.mrrpn.stage_loss_weight *
            rpn_losses.stage_reg[t].val()[0];
    }
    out.breakdown.components["rpn_cls"] = rpn_losses.cls.val()[0];
    if (cls_loss.total.defined()) {
        for (const auto& [name, v] : cls_loss.components) {
            out.breakdown.components[name] = v.val()[0];
        }
    }
    out.breakdown.components["bbox"] = bbox_loss.defined() ? bbox_loss.val()[0] : 0.0;
    out.breakdown.total = out.total.val()[0];
    return out;
}

std::vector<Detection> Detector::detect(const Tensor& image, double score_thresh,
                                        double nms_thresh) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("detect: expected (3,H,W) image tensor");
    }
    const std::int64_t H = image.dim(1), W = image.dim(2);
    if (H != cfg_.image_size || W != cfg_.image_size) {
        throw DataError("detect: image size mismatch with configured " +
                        std::to_string(cfg_.image_size));
    }
    Tensor img_t({1, 3, H, W}, image.vec());
    for (std::int64_t i = 0; i < img_t.numel(); ++i) {
        img_t[i] = (img_t[i] - kPixelShift) * kPixelScale;
    }
    const neck::Pyramid p = pyramid(ad::Var::constant(std::move(img_t)));
    const auto proposals = rpn_.propose(p, static_cast<double>(W), static_cast<double>(H));
    if (proposals.empty()) return {};

    std::vector<Box> rois;
    std::vector<std::int64_t> levels;
    for (const auto& pr : proposals) {
        rois.push_back(pr.box);
        levels.push_back(roi_level_for_box(pr.box));
    }
    const ad::Var feats = roi_features_for(p, rois, levels);
    const ad::Var logits = cosine_logits(feats, classifier_weights_, cfg_.gcl.cosine_scale);
    const ad::Var deltas = roi_head_.bbox.forward(feats);

    const auto active = layout_.active_nodes();
    const std::int64_t K = layout_.total_nodes();
    std::vector<Detection> all;
    for (std::size_t i = 0; i < rois.size(); ++i) {
        // Softmax over active nodes.
        double m = -1e300;
        for (std::int64_t c : active) {
            m = std::max(m, logits.val()[static_cast<std::int64_t>(i) * K + c]);
        }
        double z = 0.0;
        for (std::int64_t c : active) {
            z += std::exp(logits.val()[static_cast<std::int64_t>(i) * K + c] - m);
        }
        const std::array<double, 4> d = {deltas.val()[static_cast<std::int64_t>(i) * 4 + 0],
                                         deltas.val()[static_cast<std::int64_t>(i) * 4 + 1],
                                         deltas.val()[static_cast<std::int64_t>(i) * 4 + 2],
                                         deltas.val()[static_cast<std::int64_t>(i) * 4 + 3]};
        const Box refined =
            decode_box(rois[i], d, static_cast<double>(W), static_cast<double>(H));
        for (std::int64_t c : active) {
            if (c == layout_.background_node()) continue;
            const double prob =
                std::exp(logits.val()[static_cast<std::int64_t>(i) * K + c] - m) / z;
            if (prob < score_thresh) continue;
            Detection det;
            det.box = refined;
            det.class_node = c;
            det.class_name = layout_.class_for_node(c);
            det.score = prob;
            all.push_back(std::move(det));
        }
    }

    // Per-class NMS, then global score ordering.
    std::vector<Detection> kept;
    for (std::int64_t c : active) {
        if (c == layout_.background_node()) continue;
        std::vector<Box> boxes;
        std::vector<double> scores;
        std::vector<std::size_t> src;
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (all[i].class_node == c) {
                boxes.push_back(all[i].box);
                scores.push_back(all[i].score);
                src.push_back(i);
            }
        }
        if (boxes.empty()) continue;
        for (std::int64_t k : nms(boxes, scores, nms_thresh)) {
            kept.push_back(all[src[static_cast<std::size_t>(k)]]);
        }
    }
    std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.class_node < b.class_node;
    });
    return kept;
}

Tensor Detector::roi_logits(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("roi_logits: expected (3,H,W) image tensor");
    }
    const std::int64_t H = image.dim(1), W = image.dim(2);
    Tensor img_t({1, 3, H, W}, image.vec());
    for (std::int64_t i = 0; i < img_t.numel(); ++i) {
        img_t[i] = (img_t[i] - kPixelShift) * kPixelScale;
    }
    const neck::Pyramid p = pyramid(ad::Var::constant(std::move(img_t)));
    const auto proposals = rpn_.propose(p, static_cast<double>(W), static_cast<double>(H));
    if (proposals.empty()) return Tensor({1, layout_.total_nodes()});
    std::vector<Box> rois;
    std::vector<std::int64_t> levels;
    for (const auto& pr : proposals) {
        rois.push_back(pr.box);
        levels.push_back(roi_level_for_box(pr.box));
    }
    const ad::Var feats = roi_features_for(p, rois, levels);
    return cosine_logits(feats, classifier_weights_, cfg_.gcl.cosine_scale).val();
}

double Detector::fusion_simplex_deviation() const {
    if (!cfg_.neck.adaptive_fusion) return 0.0;
    double worst = 0.0;
    for (std::int64_t level = 2; level <= 4; ++level) {
        const auto& f = neck_.fusion(level);
        for (std::int64_t i = 0; i < f.logit_up_p.val().numel(); ++i) {
            const auto w = neck::Cfpan::softmax3(f.logit_up_p.val()[i], f.logit_up_c.val()[i],
                                                 f.logit_cur.val()[i]);
            worst = std::max(worst, std::abs(w[0] + w[1] + w[2] - 1.0));
        }
    }
    return worst;
}

// ---- training drivers ----------------------------------------------------------

namespace {

class SgdMomentum {
public:
    SgdMomentum(ParamSet& params, double lr, double momentum, double clip_norm,
                const std::string& freeze_prefix = "")
        : params_(params),
          lr_(lr),
          momentum_(momentum),
          clip_norm_(clip_norm),
          freeze_prefix_(freeze_prefix) {
        for (const auto& [name, v] : params.items()) {
            velocities_.emplace_back(Tensor::zeros(v.val().shape()));
        }
    }

    void step() {
        double clip_scale = 1.0;
        if (clip_norm_ > 0.0) {
            double norm2 = 0.0;
            for (const auto& [name, v] : params_.items()) {
                if (is_frozen(name) || !v.node()->grad_ready) continue;
                const Tensor& g = v.node()->grad;
                for (std::int64_t i = 0; i < g.numel(); ++i) norm2 += g[i] * g[i];
            }
            const double norm = std::sqrt(norm2);
            if (norm > clip_norm_) clip_scale = clip_norm_ / norm;
        }
        std::size_t idx = 0;
        for (auto& [name, v] : params_.items()) {
            Tensor& vel = velocities_[idx++];
            if (is_frozen(name) || !v.node()->grad_ready) continue;
            ad::Var var = v;
            Tensor& grad = var.node()->grad;
            Tensor& value = var.mutable_val();
            for (std::int64_t i = 0; i < value.numel(); ++i) {
                vel[i] = momentum_ * vel[i] - lr_ * clip_scale * grad[i];
                value[i] += vel[i];
            }
        }
    }

private:
    bool is_frozen(const std::string& name) const {
        return !freeze_prefix_.empty() && name.rfind(freeze_prefix_, 0) == 0;
    }

    ParamSet& params_;
    double lr_;
    double momentum_;
    double clip_norm_;
    std::string freeze_prefix_;
    std::vector<Tensor> velocities_;
};

// Remaps dataset class ids to classifier nodes, validating phase constraints.
data::Dataset relabel_to_nodes(const data::Dataset& dataset, const gcl::ClassifierLayout& layout,
                               bool allow_novel) {
    data::Dataset out = dataset;
    for (auto& img : out.images) {
        for (auto& obj : img.objects) {
            if (obj.ignore) continue;
            const std::string& name = dataset.class_names.at(static_cast<std::size_t>(obj.class_id));
            std::int64_t node = -1;
            try {
                node = layout.node_for_class(name);
            } catch (const Error&) {
                throw DataError("training: instance of class '" + name +
                                "' is not representable in the current phase");
            }
            if (!allow_novel && !layout.is_base_node(node)) {
                throw DataError("base training: novel-labeled instance of class '" + name + "'");
            }
            obj.class_id = node;
        }
    }
    return out;
}

void append_log(std::ofstream* log, std::int64_t step, std::int64_t epoch,
                const gcl::LossBreakdown& b, double simplex_dev) {
    if (!log || !log->is_open()) return;
    ordered_json j;
    j["step"] = step;
    j["epoch"] = epoch;
    j["total"] = b.total;
    ordered_json comp = ordered_json::object();
    for (const auto& [k, v] : b.components) comp[k] = v;
    j["components"] = comp;
    j["simplex_max_dev"] = simplex_dev;
    (*log) << j.dump() << "\n";
}

TrainResult run_training(Detector detector, const data::Dataset& node_dataset, bool finetune,
                         std::uint64_t seed, const std::string& log_path) {
    const TrainConfig& tc = detector.config().train;
    const double lr = finetune ? tc.lr_finetune : tc.lr_base;
    const std::int64_t epochs = finetune ? tc.epochs_finetune : tc.epochs_base;
    const std::int64_t batch = finetune ? tc.batch_finetune : tc.batch_base;

    std::ofstream log;
    if (!log_path.empty()) log.open(log_path, std::ios::trunc);

    TrainResult result;
    result.detector = std::move(detector);
    SgdMomentum opt(result.detector.params(), lr, tc.momentum, tc.grad_clip_norm,
                    finetune ? "backbone" : "");
    Rng rng(splitmix64(seed ^ (finetune ? 0xf17eULL : 0xba5eULL)));
    std::int64_t step = 0;
    double epoch_loss_acc = 0.0;
    std::int64_t epoch_loss_count = 0;

    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order(node_dataset.images.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        epoch_loss_acc = 0.0;
        epoch_loss_count = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
            result.detector.params().zero_grads();
            gcl::LossBreakdown batch_breakdown;
            double batch_total = 0.0;
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t k = start; k < end; ++k) {
                ImageLoss il = result.detector.image_loss(node_dataset.images[order[k]], finetune,
                                                          rng, nullptr, nullptr);
                ad::Var scaled = scale(il.total, inv);
                ad::backward(scaled);
                batch_total += il.breakdown.total * inv;
                for (const auto& [name, v] : il.breakdown.components) {
                    batch_breakdown.components[name] += v * inv;
                }
            }
            if (!std::isfinite(batch_total)) {
                throw Error("training: non-finite loss at step " + std::to_string(step));
            }
            batch_breakdown.total = batch_total;
            opt.step();
            const double dev = result.detector.fusion_simplex_deviation();
            result.max_simplex_deviation = std::max(result.max_simplex_deviation, dev);
            if (step == 0) result.first_loss = batch_total;
            append_log(log.is_open() ? &log : nullptr, step, epoch, batch_breakdown, dev);
            result.step_log.push_back(batch_breakdown);
            epoch_loss_acc += batch_total;
            ++epoch_loss_count;
            ++step;
        }
    }
    result.last_epoch_mean_loss =
        epoch_loss_count > 0 ? epoch_loss_acc / static_cast<double>(epoch_loss_count) : 0.0;
    return result;
}

}  // namespace

TrainResult train_base(const data::Dataset& dataset, const data::SplitSpec& split,
                       const DetectorConfig& cfg, std::uint64_t seed,
                       const std::string& log_path) {
    split.validate(dataset.class_names);
    Detector detector = Detector::init(cfg, split.base_classes, seed);
    const data::Dataset nodes = relabel_to_nodes(dataset, detector.layout(), false);
    TrainResult result = run_training(std::move(detector), nodes, false, seed, log_path);
    result.detector.set_phase(Phase::kBase);
    return result;
}

TrainResult fine_tune(Detector detector, const data::Dataset& kshot_dataset,
                      const data::SplitSpec& split, std::uint64_t seed,
                      const std::string& log_path) {
    if (detector.phase() != Phase::kBase) {
        throw ProtocolError("fine_tune: checkpoint is already finetuned (single-episode protocol)");
    }
    split.validate(kshot_dataset.class_names);
    detector.activate_novel(split.novel_classes, seed);
    const data::Dataset nodes = relabel_to_nodes(kshot_dataset, detector.layout(), true);
    TrainResult result = run_training(std::move(detector), nodes, true, seed, log_path);
    result.detector.set_phase(Phase::kFinetuned);
    return result;
}

eval::EvalReport evaluate(const Detector& detector, const data::Dataset& dataset,
                          const data::SplitSpec& split, std::int64_t shot, std::uint64_t seed,
                          double score_thresh, double nms_thresh) {
    split.validate(dataset.class_names);
    const auto& layout = detector.layout();
    for (const auto& name : split.novel_classes) {
        bool bound = false;
        for (const auto& b : layout.novel_classes) bound = bound || b == name;
        if (!bound) {
            throw ProtocolError("evaluate: novel class '" + name +
                                "' is not bound in the checkpoint (phase=" +
                                phase_name(detector.phase()) + ")");
        }
    }

    eval::EvalReport report;
    report.shot = shot;
    report.seed = seed;
    report.image_count = static_cast<std::int64_t>(dataset.images.size());

    std::map<std::string, std::vector<eval::ClassDetection>> dets;
    std::map<std::string, std::vector<eval::ClassGroundTruth>> gts;
    std::int64_t image_id = 0;
    for (const auto& img : dataset.images) {
        for (const auto& obj : img.objects) {
            const std::string& name = dataset.class_names.at(static_cast<std::size_t>(obj.class_id));
            gts[name].push_back({image_id, obj.box, obj.ignore});
            if (!obj.ignore) ++report.gt_count;
        }
        for (const auto& det : detector.detect(img.image, score_thresh, nms_thresh)) {
            dets[det.class_name].push_back({image_id, det.score, det.box});
            ++report.detection_count;
        }
        ++image_id;
    }

    auto map_over = [&](const std::vector<std::string>& classes) {
        double acc = 0.0;
        std::int64_t n = 0;
        for (const auto& name : classes) {
            const auto it = gts.find(name);
            if (it == gts.end()) {
                report.notes.push_back("class '" + name + "' skipped: no ground truth");
                continue;
            }
            const auto ap = eval::average_precision(dets[name], it->second, 0.5);
            if (!ap.has_value()) {
                report.notes.push_back("class '" + name + "' skipped: no countable ground truth");
                continue;
            }
            report.per_class_ap[name] = *ap;
            acc += *ap;
            ++n;
        }
        return n > 0 ? acc / static_cast<double>(n) : 0.0;
    };
    report.map_base = map_over(split.base_classes);
    report.map_novel = map_over(split.novel_classes);
    return report;
}

}  // namespace fsdet::det
