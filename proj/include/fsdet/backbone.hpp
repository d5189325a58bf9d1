#pragma once

#include <array>
#include <vector>

#include "fsdet/cfpan.hpp"
#include "fsdet/layers.hpp"

namespace fsdet::det {

struct BackboneConfig {
    std::vector<std::int64_t> widths = {16, 32, 64, 64};  // C2..C5
    std::int64_t in_channels = 3;

    void validate() const {
        if (widths.size() != 4) throw ConfigError("backbone: widths must list C2..C5 (4 entries)");
        for (auto w : widths) {
            if (w < 1) throw ConfigError("backbone: widths must be >= 1");
        }
    }
};

// Plain 4-stage convnet emitting C2..C5 at strides 4/8/16/32. Each stage is
// a stride-2 3x3 conv followed by a stride-1 3x3 conv, both ReLU.
class Backbone {
public:
    static Backbone init(const BackboneConfig& cfg, Rng& rng);

    neck::Pyramid forward(const ad::Var& image) const;

    void register_params(nn::ParamSet& ps, const std::string& prefix) const;

    const BackboneConfig& config() const { return cfg_; }
    std::array<std::int64_t, 4> out_channels() const {
        return {cfg_.widths[0], cfg_.widths[1], cfg_.widths[2], cfg_.widths[3]};
    }

private:
    BackboneConfig cfg_;
    nn::ConvLayer stem_;                      // stride 2
    std::array<nn::ConvLayer, 4> down_;      // stride 2 per stage
    std::array<nn::ConvLayer, 4> refine_;    // stride 1 per stage
};

}  // namespace fsdet::det
