#include "fsdet/backbone.hpp"

namespace fsdet::det {

using namespace fsdet::nn;

Backbone Backbone::init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone b;
    b.cfg_ = cfg;
    {
        ConvSpec spec;
        spec.kernel_size = 3;
        spec.stride = 2;
        spec.padding = 1;
        spec.in_channels = cfg.in_channels;
        spec.out_channels = cfg.widths[0];
        b.stem_ = ConvLayer::he_init(spec, rng);
    }
    std::int64_t prev = cfg.widths[0];
    for (std::size_t stage = 0; stage < 4; ++stage) {
        const std::int64_t width = cfg.widths[stage];
        ConvSpec down;
        down.kernel_size = 3;
        down.stride = 2;
        down.padding = 1;
        down.in_channels = prev;
        down.out_channels = width;
        b.down_[stage] = ConvLayer::he_init(down, rng);
        ConvSpec refine;
        refine.kernel_size = 3;
        refine.padding = 1;
        refine.in_channels = width;
        refine.out_channels = width;
        b.refine_[stage] = ConvLayer::he_init(refine, rng);
        prev = width;
    }
    return b;
}

neck::Pyramid Backbone::forward(const ad::Var& image) const {
    neck::Pyramid p;
    ad::Var x = relu(stem_.forward(image));
    for (std::int64_t level = 2; level <= 5; ++level) {
        const std::size_t stage = static_cast<std::size_t>(level - 2);
        x = relu(down_[stage].forward(x));
        x = relu(refine_[stage].forward(x));
        p.level(level) = x;
    }
    return p;
}

void Backbone::register_params(ParamSet& ps, const std::string& prefix) const {
    stem_.register_params(ps, prefix + ".stem");
    for (std::size_t stage = 0; stage < 4; ++stage) {
        down_[stage].register_params(ps, prefix + ".stage" + std::to_string(stage + 2) + ".down");
        refine_[stage].register_params(ps, prefix + ".stage" + std::to_string(stage + 2) + ".refine");
    }
}

}  // namespace fsdet::det
