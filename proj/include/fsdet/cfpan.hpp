#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fsdet/layers.hpp"

namespace fsdet::neck {

using ad::Var;

// Feature maps for pyramid levels 2..5. Index i holds level i+2. Spatial
// resolution must halve exactly from each level to the next.
struct Pyramid {
    std::array<Var, 4> levels;

    const Var& level(std::int64_t n) const {
        if (n < 2 || n > 5) throw ShapeError("pyramid level " + std::to_string(n) + " out of range");
        if (!levels[static_cast<std::size_t>(n - 2)].defined()) {
            throw ShapeError("pyramid level " + std::to_string(n) + " missing");
        }
        return levels[static_cast<std::size_t>(n - 2)];
    }
    Var& level(std::int64_t n) {
        if (n < 2 || n > 5) throw ShapeError("pyramid level " + std::to_string(n) + " out of range");
        return levels[static_cast<std::size_t>(n - 2)];
    }
    void validate_halving() const;
};

struct CbamParams {
    Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // shared MLP: C -> C/rho -> C
    Var spatial_w, spatial_b;            // 7x7 conv over [avg ; max], 2 -> 1 channels
    std::int64_t channels = 0;
    std::int64_t hidden = 0;

    static CbamParams init(std::int64_t channels, std::int64_t reduction, Rng& rng);
    static CbamParams zeros(std::int64_t channels, std::int64_t reduction);
    void register_params(nn::ParamSet& ps, const std::string& prefix) const;
};

// Channel gate: sigmoid(MLP(avgpool) + MLP(maxpool)) -> (B,C,1,1).
Var channel_attention(const Var& f, const CbamParams& params);

// Spatial gate: sigmoid(Conv7x7([avg-over-channels ; max-over-channels])) -> (B,1,H,W).
Var spatial_attention(const Var& f, const CbamParams& params);

// Channel gate then spatial gate, both multiplied in.
Var apply_cbam(const Var& c5, const CbamParams& params);

// Per fused level: three learnable logit maps at the output resolution.
// Pointwise softmax over the triple yields weights on the simplex.
struct FusionWeights {
    Var logit_up_p;    // alpha: weight of upsampled P_{n+1}
    Var logit_up_c;    // beta: weight of upsampled lateral(C_{n+1})
    Var logit_cur;     // gamma: weight of lateral(C_n)
};

struct CfpanConfig {
    std::int64_t out_channels = 64;  // d
    std::int64_t cbam_reduction = 4;
    bool use_cbam = true;
    // adaptive = learnable softmax weights; otherwise the logits are ignored
    // and the frozen triple below is used (static top-down baseline).
    bool adaptive_fusion = true;
    double frozen_weights[3] = {0.5, 0.0, 0.5};
    double logit_jitter = 0.0;  // optional seeded Gaussian jitter on the zero logits
};

class Cfpan {
public:
    // channel widths of C2..C5 and their spatial sizes (H,W per level).
    static Cfpan init(const CfpanConfig& cfg, const std::array<std::int64_t, 4>& in_channels,
                      const std::array<std::pair<std::int64_t, std::int64_t>, 4>& level_sizes,
                      Rng& rng);

    Pyramid forward(const Pyramid& c) const;

    // Fuses one level: P_n = a*U(P_next) + b*U(lat_next(C_next)) + g*lat_cur(C_cur)
    // with (a,b,g) = pointwise softmax of the three logit maps.
    Var fuse_level(const Var& p_next, const Var& c_next, const Var& c_cur,
                   const FusionWeights& weights, const nn::ConvLayer& lat_next,
                   const nn::ConvLayer& lat_cur) const;

    void register_params(nn::ParamSet& ps, const std::string& prefix) const;

    const CfpanConfig& config() const { return cfg_; }
    CbamParams& cbam() { return cbam_; }
    const CbamParams& cbam() const { return cbam_; }
    nn::ConvLayer& lateral(std::int64_t level) { return laterals_[static_cast<std::size_t>(level - 2)]; }
    const nn::ConvLayer& lateral(std::int64_t level) const {
        return laterals_[static_cast<std::size_t>(level - 2)];
    }
    FusionWeights& fusion(std::int64_t level) { return fusion_[static_cast<std::size_t>(level - 2)]; }
    const FusionWeights& fusion(std::int64_t level) const {
        return fusion_[static_cast<std::size_t>(level - 2)];
    }

    // Softmax of a logit triple at one location; exposed for invariant tests.
    static std::array<double, 3> softmax3(double a, double b, double c);

private:
    CfpanConfig cfg_;
    CbamParams cbam_;
    std::array<nn::ConvLayer, 4> laterals_;  // levels 2..5
    std::array<FusionWeights, 3> fusion_;    // levels 2..4
};

}  // namespace fsdet::neck
