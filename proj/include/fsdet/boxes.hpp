#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fsdet/errors.hpp"

namespace fsdet {

// Axis-aligned box, corner convention, continuous coordinates.
struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool valid() const { return x2 > x1 && y2 > y1; }
};

double iou(const Box& a, const Box& b);

// Standard delta parameterization: (dx,dy) normalized by anchor size,
// (dw,dh) logarithmic. Throws on non-positive target extents.
std::array<double, 4> encode_box(const Box& anchor, const Box& target);

// Inverse of encode_box; clips the result into [0,image_w] x [0,image_h]
// and enforces a strictly positive extent. |dw|,|dh| are clamped to
// kDeltaClamp before exponentiation.
inline constexpr double kDeltaClamp = 4.0;
Box decode_box(const Box& anchor, const std::array<double, 4>& deltas, double image_w,
               double image_h);

struct AnchorConfig {
    // Indexed by pyramid level 2..5.
    std::array<std::int64_t, 4> strides = {4, 8, 16, 32};
    std::array<std::vector<double>, 4> scales = {
        std::vector<double>{16.0}, {32.0}, {64.0}, {128.0}};
    std::vector<double> ratios = {0.5, 1.0, 2.0};  // h/w, area preserving

    std::int64_t stride_for(std::int64_t level) const {
        return strides.at(static_cast<std::size_t>(level - 2));
    }
    const std::vector<double>& scales_for(std::int64_t level) const {
        return scales.at(static_cast<std::size_t>(level - 2));
    }
    std::int64_t anchors_per_cell(std::int64_t level) const {
        return static_cast<std::int64_t>(scales_for(level).size() * ratios.size());
    }
    void validate() const;
};

// Anchors for one level in deterministic order: cells row-major, then scale,
// then ratio. Centers sit at (stride*(i+0.5), stride*(j+0.5)).
std::vector<Box> generate_anchors(const AnchorConfig& cfg, std::int64_t level,
                                  std::int64_t feat_h, std::int64_t feat_w);

// Greedy descending-score suppression; ties broken by lower index.
std::vector<std::int64_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                              double threshold);

}  // namespace fsdet
