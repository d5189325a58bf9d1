#include "fsdet/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace fsdet::det {

using ordered_json = nlohmann::ordered_json;

void RoiConfig::validate() const {
    if (output_size < 1 || feature_dim < 1 || canonical_size <= 0.0 || train_samples < 1 ||
        train_positive_cap < 1 || fg_iou <= 0.0 || fg_iou >= 1.0) {
        throw ConfigError("roi config: invalid field");
    }
    if (canonical_level < 2 || canonical_level > 5) {
        throw ConfigError("roi config: canonical_level must be in 2..5");
    }
}

void TrainConfig::validate() const {
    if (lr_base <= 0.0 || lr_finetune <= 0.0 || momentum < 0.0 || momentum >= 1.0 ||
        epochs_base < 1 || epochs_finetune < 1 || batch_base < 1 || batch_finetune < 1) {
        throw ConfigError("train config: invalid field");
    }
}

void DetectorConfig::validate() const {
    if (image_size < 32 || image_size % 32 != 0) {
        throw ConfigError("detector config: image_size must be a positive multiple of 32");
    }
    backbone.validate();
    if (neck.out_channels != mrrpn.channels) {
        throw ConfigError("detector config: neck width and mrrpn channels must match");
    }
    mrrpn.validate();
    gcl.validate();
    roi.validate();
    train.validate();
}

namespace {

void reject_unknown(const ordered_json& j, const std::set<std::string>& known,
                    const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) {
            throw ConfigError("config: unknown key '" + where + key + "'");
        }
    }
}

ordered_json detector_to_json(const DetectorConfig& c) {
    ordered_json j;
    j["image_size"] = c.image_size;
    j["backbone"] = {{"widths", c.backbone.widths}, {"in_channels", c.backbone.in_channels}};
    j["neck"] = {{"out_channels", c.neck.out_channels},
                 {"cbam_reduction", c.neck.cbam_reduction},
                 {"use_cbam", c.neck.use_cbam},
                 {"adaptive_fusion", c.neck.adaptive_fusion},
                 {"frozen_weights", {c.neck.frozen_weights[0], c.neck.frozen_weights[1],
                                     c.neck.frozen_weights[2]}},
                 {"logit_jitter", c.neck.logit_jitter}};
    j["mrrpn"] = {{"num_stages", c.mrrpn.num_stages},
                  {"dilations", c.mrrpn.dilations},
                  {"stage_loss_weight", c.mrrpn.stage_loss_weight},
                  {"balance", c.mrrpn.balance},
                  {"pos_iou_thresholds", c.mrrpn.pos_iou_thresholds},
                  {"neg_margin", c.mrrpn.neg_margin},
                  {"force_match_floor", c.mrrpn.force_match_floor},
                  {"channels", c.mrrpn.channels},
                  {"pre_nms", c.mrrpn.pre_nms},
                  {"post_nms", c.mrrpn.post_nms},
                  {"nms_thresh", c.mrrpn.nms_thresh},
                  {"reg_samples", c.mrrpn.reg_samples},
                  {"cls_samples", c.mrrpn.cls_samples},
                  {"cls_pos_iou", c.mrrpn.cls_pos_iou},
                  {"cls_neg_iou", c.mrrpn.cls_neg_iou},
                  {"cls_neg_ratio", c.mrrpn.cls_neg_ratio},
                  {"cls_min_neg", c.mrrpn.cls_min_neg},
                  {"anchor_strides", c.mrrpn.anchors.strides},
                  {"anchor_scales", c.mrrpn.anchors.scales},
                  {"anchor_ratios", c.mrrpn.anchors.ratios}};
    j["gcl"] = {{"lambda_placeholder", c.gcl.lambda_placeholder},
                {"lambda_regularization", c.gcl.lambda_regularization},
                {"cosine_scale", c.gcl.cosine_scale},
                {"placeholders", c.gcl.placeholders}};
    j["roi"] = {{"output_size", c.roi.output_size},
                {"feature_dim", c.roi.feature_dim},
                {"canonical_size", c.roi.canonical_size},
                {"canonical_level", c.roi.canonical_level},
                {"train_samples", c.roi.train_samples},
                {"train_positive_cap", c.roi.train_positive_cap},
                {"fg_iou", c.roi.fg_iou}};
    j["train"] = {{"lr_base", c.train.lr_base},
                  {"lr_finetune", c.train.lr_finetune},
                  {"momentum", c.train.momentum},
                  {"grad_clip_norm", c.train.grad_clip_norm},
                  {"epochs_base", c.train.epochs_base},
                  {"epochs_finetune", c.train.epochs_finetune},
                  {"batch_base", c.train.batch_base},
                  {"batch_finetune", c.train.batch_finetune},
                  {"seed", c.train.seed}};
    return j;
}

DetectorConfig detector_from_json(const ordered_json& j) {
    DetectorConfig c;
    reject_unknown(j, {"image_size", "backbone", "neck", "mrrpn", "gcl", "roi", "train"}, "model.");
    c.image_size = j.value("image_size", c.image_size);
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        reject_unknown(b, {"widths", "in_channels"}, "model.backbone.");
        if (b.contains("widths")) c.backbone.widths = b.at("widths").get<std::vector<std::int64_t>>();
        c.backbone.in_channels = b.value("in_channels", c.backbone.in_channels);
    }
    if (j.contains("neck")) {
        const auto& n = j.at("neck");
        reject_unknown(n, {"out_channels", "cbam_reduction", "use_cbam", "adaptive_fusion",
                           "frozen_weights", "logit_jitter"}, "model.neck.");
        c.neck.out_channels = n.value("out_channels", c.neck.out_channels);
        c.neck.cbam_reduction = n.value("cbam_reduction", c.neck.cbam_reduction);
        c.neck.use_cbam = n.value("use_cbam", c.neck.use_cbam);
        c.neck.adaptive_fusion = n.value("adaptive_fusion", c.neck.adaptive_fusion);
        if (n.contains("frozen_weights")) {
            const auto w = n.at("frozen_weights").get<std::vector<double>>();
            if (w.size() != 3) throw ConfigError("config: frozen_weights must list 3 values");
            for (int i = 0; i < 3; ++i) c.neck.frozen_weights[i] = w[static_cast<std::size_t>(i)];
        }
        c.neck.logit_jitter = n.value("logit_jitter", c.neck.logit_jitter);
    }
    if (j.contains("mrrpn")) {
        const auto& m = j.at("mrrpn");
        reject_unknown(m, {"num_stages", "dilations", "stage_loss_weight", "balance",
                           "pos_iou_thresholds", "neg_margin", "force_match_floor", "channels",
                           "pre_nms", "post_nms", "nms_thresh", "reg_samples", "cls_samples",
                           "cls_pos_iou", "cls_neg_iou", "cls_neg_ratio", "cls_min_neg",
                           "anchor_strides", "anchor_scales", "anchor_ratios"}, "model.mrrpn.");
        c.mrrpn.num_stages = m.value("num_stages", c.mrrpn.num_stages);
        if (m.contains("dilations")) {
            c.mrrpn.dilations = m.at("dilations").get<std::vector<std::int64_t>>();
        } else if (c.mrrpn.num_stages != 3) {
            c.mrrpn.dilations.assign(static_cast<std::size_t>(c.mrrpn.num_stages - 1), 2);
        }
        c.mrrpn.stage_loss_weight = m.value("stage_loss_weight", c.mrrpn.stage_loss_weight);
        c.mrrpn.balance = m.value("balance", c.mrrpn.balance);
        if (m.contains("pos_iou_thresholds")) {
            c.mrrpn.pos_iou_thresholds = m.at("pos_iou_thresholds").get<std::vector<double>>();
        } else if (c.mrrpn.num_stages != 3) {
            // Progressive defaults extended/truncated around {0.5,0.6,0.7}.
            c.mrrpn.pos_iou_thresholds.clear();
            for (std::int64_t t = 0; t < c.mrrpn.num_stages; ++t) {
                c.mrrpn.pos_iou_thresholds.push_back(std::min(0.5 + 0.1 * static_cast<double>(t), 0.7));
            }
        }
        c.mrrpn.neg_margin = m.value("neg_margin", c.mrrpn.neg_margin);
        c.mrrpn.force_match_floor = m.value("force_match_floor", c.mrrpn.force_match_floor);
        c.mrrpn.channels = m.value("channels", c.mrrpn.channels);
        c.mrrpn.pre_nms = m.value("pre_nms", c.mrrpn.pre_nms);
        c.mrrpn.post_nms = m.value("post_nms", c.mrrpn.post_nms);
        c.mrrpn.nms_thresh = m.value("nms_thresh", c.mrrpn.nms_thresh);
        c.mrrpn.reg_samples = m.value("reg_samples", c.mrrpn.reg_samples);
        c.mrrpn.cls_samples = m.value("cls_samples", c.mrrpn.cls_samples);
        c.mrrpn.cls_pos_iou = m.value("cls_pos_iou", c.mrrpn.cls_pos_iou);
        c.mrrpn.cls_neg_iou = m.value("cls_neg_iou", c.mrrpn.cls_neg_iou);
        c.mrrpn.cls_neg_ratio = m.value("cls_neg_ratio", c.mrrpn.cls_neg_ratio);
        c.mrrpn.cls_min_neg = m.value("cls_min_neg", c.mrrpn.cls_min_neg);
        if (m.contains("anchor_strides")) {
            const auto v = m.at("anchor_strides").get<std::vector<std::int64_t>>();
            if (v.size() != 4) throw ConfigError("config: anchor_strides must list 4 values");
            std::copy(v.begin(), v.end(), c.mrrpn.anchors.strides.begin());
        }
        if (m.contains("anchor_scales")) {
            const auto v = m.at("anchor_scales").get<std::vector<std::vector<double>>>();
            if (v.size() != 4) throw ConfigError("config: anchor_scales must list 4 levels");
            std::copy(v.begin(), v.end(), c.mrrpn.anchors.scales.begin());
        }
        if (m.contains("anchor_ratios")) {
            c.mrrpn.anchors.ratios = m.at("anchor_ratios").get<std::vector<double>>();
        }
    }
    if (j.contains("gcl")) {
        const auto& g = j.at("gcl");
        reject_unknown(g, {"lambda_placeholder", "lambda_regularization", "cosine_scale",
                           "placeholders"}, "model.gcl.");
        c.gcl.lambda_placeholder = g.value("lambda_placeholder", c.gcl.lambda_placeholder);
        c.gcl.lambda_regularization = g.value("lambda_regularization", c.gcl.lambda_regularization);
        c.gcl.cosine_scale = g.value("cosine_scale", c.gcl.cosine_scale);
        c.gcl.placeholders = g.value("placeholders", c.gcl.placeholders);
    }
    if (j.contains("roi")) {
        const auto& r = j.at("roi");
        reject_unknown(r, {"output_size", "feature_dim", "canonical_size", "canonical_level",
                           "train_samples", "train_positive_cap", "fg_iou"}, "model.roi.");
        c.roi.output_size = r.value("output_size", c.roi.output_size);
        c.roi.feature_dim = r.value("feature_dim", c.roi.feature_dim);
        c.roi.canonical_size = r.value("canonical_size", c.roi.canonical_size);
        c.roi.canonical_level = r.value("canonical_level", c.roi.canonical_level);
        c.roi.train_samples = r.value("train_samples", c.roi.train_samples);
        c.roi.train_positive_cap = r.value("train_positive_cap", c.roi.train_positive_cap);
        c.roi.fg_iou = r.value("fg_iou", c.roi.fg_iou);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        reject_unknown(t, {"lr_base", "lr_finetune", "momentum", "grad_clip_norm", "epochs_base",
                           "epochs_finetune", "batch_base", "batch_finetune", "seed"},
                       "model.train.");
        c.train.lr_base = t.value("lr_base", c.train.lr_base);
        c.train.lr_finetune = t.value("lr_finetune", c.train.lr_finetune);
        c.train.momentum = t.value("momentum", c.train.momentum);
        c.train.grad_clip_norm = t.value("grad_clip_norm", c.train.grad_clip_norm);
        c.train.epochs_base = t.value("epochs_base", c.train.epochs_base);
        c.train.epochs_finetune = t.value("epochs_finetune", c.train.epochs_finetune);
        c.train.batch_base = t.value("batch_base", c.train.batch_base);
        c.train.batch_finetune = t.value("batch_finetune", c.train.batch_finetune);
        c.train.seed = t.value("seed", c.train.seed);
    }
    c.validate();
    return c;
}

}  // namespace

std::string DetectorConfig::to_json() const { return detector_to_json(*this).dump(2); }

DetectorConfig DetectorConfig::from_json(const std::string& text) {
    return detector_from_json(ordered_json::parse(text));
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json(text);
}

RunConfig RunConfig::from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: JSON parse error: " + std::string(e.what()));
    }
    RunConfig c;
    reject_unknown(j, {"data", "model", "eval"}, "");
    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d, {"image_size", "num_classes", "min_objects", "max_objects", "min_scale",
                           "max_scale", "clutter", "image_count", "seed"}, "data.");
        c.data.image_size = d.value("image_size", c.data.image_size);
        c.data.num_classes = d.value("num_classes", c.data.num_classes);
        c.data.min_objects = d.value("min_objects", c.data.min_objects);
        c.data.max_objects = d.value("max_objects", c.data.max_objects);
        c.data.min_scale = d.value("min_scale", c.data.min_scale);
        c.data.max_scale = d.value("max_scale", c.data.max_scale);
        c.data.clutter = d.value("clutter", c.data.clutter);
        c.data.image_count = d.value("image_count", c.data.image_count);
        c.data_seed = d.value("seed", c.data_seed);
    }
    if (j.contains("model")) c.model = detector_from_json(j.at("model"));
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        reject_unknown(e, {"split", "shots", "shot_seed", "score_thresh", "nms_thresh"}, "eval.");
        c.split_id = e.value("split", c.split_id);
        c.shots = e.value("shots", c.shots);
        c.shot_seed = e.value("shot_seed", c.shot_seed);
        c.score_thresh = e.value("score_thresh", c.score_thresh);
        c.nms_thresh = e.value("nms_thresh", c.nms_thresh);
    }
    return c;
}

std::string RunConfig::to_json() const {
    ordered_json j;
    j["data"] = {{"image_size", data.image_size},   {"num_classes", data.num_classes},
                 {"min_objects", data.min_objects}, {"max_objects", data.max_objects},
                 {"min_scale", data.min_scale},     {"max_scale", data.max_scale},
                 {"clutter", data.clutter},         {"image_count", data.image_count},
                 {"seed", data_seed}};
    j["model"] = detector_to_json(model);
    j["eval"] = {{"split", split_id},
                 {"shots", shots},
                 {"shot_seed", shot_seed},
                 {"score_thresh", score_thresh},
                 {"nms_thresh", nms_thresh}};
    return j.dump(2);
}

}  // namespace fsdet::det
