#include "fsdet/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace fsdet {

double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

std::array<double, 4> encode_box(const Box& anchor, const Box& target) {
    if (target.width() <= 0.0 || target.height() <= 0.0) {
        throw DataError("encode_box: non-positive target extent (w=" + std::to_string(target.width()) +
                        ", h=" + std::to_string(target.height()) + ")");
    }
    const double wa = anchor.width(), ha = anchor.height();
    return {(target.cx() - anchor.cx()) / wa, (target.cy() - anchor.cy()) / ha,
            std::log(target.width() / wa), std::log(target.height() / ha)};
}

Box decode_box(const Box& anchor, const std::array<double, 4>& deltas, double image_w,
               double image_h) {
    const double wa = anchor.width(), ha = anchor.height();
    const double dw = std::clamp(deltas[2], -kDeltaClamp, kDeltaClamp);
    const double dh = std::clamp(deltas[3], -kDeltaClamp, kDeltaClamp);
    const double cx = anchor.cx() + deltas[0] * wa;
    const double cy = anchor.cy() + deltas[1] * ha;
    const double w = wa * std::exp(dw);
    const double h = ha * std::exp(dh);
    constexpr double eps = 1e-3;
    Box b;
    b.x1 = std::clamp(cx - 0.5 * w, 0.0, image_w - eps);
    b.x2 = std::clamp(cx + 0.5 * w, b.x1 + eps, image_w);
    b.y1 = std::clamp(cy - 0.5 * h, 0.0, image_h - eps);
    b.y2 = std::clamp(cy + 0.5 * h, b.y1 + eps, image_h);
    return b;
}

void AnchorConfig::validate() const {
    if (ratios.empty()) throw ConfigError("anchor config: empty ratio list");
    for (std::size_t i = 0; i < 4; ++i) {
        if (scales[i].empty()) {
            throw ConfigError("anchor config: empty scale list at level " + std::to_string(i + 2));
        }
        if (strides[i] < 1) throw ConfigError("anchor config: stride must be >= 1");
    }
}

std::vector<Box> generate_anchors(const AnchorConfig& cfg, std::int64_t level, std::int64_t feat_h,
                                  std::int64_t feat_w) {
    cfg.validate();
    const double stride = static_cast<double>(cfg.stride_for(level));
    const auto& scales = cfg.scales_for(level);
    std::vector<Box> anchors;
    anchors.reserve(static_cast<std::size_t>(feat_h * feat_w) * scales.size() * cfg.ratios.size());
    for (std::int64_t j = 0; j < feat_h; ++j) {
        for (std::int64_t i = 0; i < feat_w; ++i) {
            const double cx = stride * (static_cast<double>(i) + 0.5);
            const double cy = stride * (static_cast<double>(j) + 0.5);
            for (double scale : scales) {
                for (double ratio : cfg.ratios) {
                    const double w = scale / std::sqrt(ratio);
                    const double h = scale * std::sqrt(ratio);
                    anchors.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
                }
            }
        }
    }
    return anchors;
}

std::vector<std::int64_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                              double threshold) {
    if (boxes.size() != scores.size()) {
        throw ShapeError("nms: boxes and scores length mismatch");
    }
    std::vector<std::int64_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
            return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
        }
        return a < b;
    });
    std::vector<std::int64_t> kept;
    std::vector<bool> suppressed(boxes.size(), false);
    for (std::int64_t idx : order) {
        if (suppressed[static_cast<std::size_t>(idx)]) continue;
        kept.push_back(idx);
        for (std::int64_t other : order) {
            if (other == idx || suppressed[static_cast<std::size_t>(other)]) continue;
            if (iou(boxes[static_cast<std::size_t>(idx)], boxes[static_cast<std::size_t>(other)]) >
                threshold) {
                suppressed[static_cast<std::size_t>(other)] = true;
            }
        }
    }
    return kept;
}

}  // namespace fsdet
