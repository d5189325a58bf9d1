#include "fsdet/cfpan.hpp"

#include <cmath>

namespace fsdet::neck {

using namespace fsdet::nn;

void Pyramid::validate_halving() const {
    for (std::int64_t n = 2; n <= 4; ++n) {
        const auto& cur = level(n).val().shape();
        const auto& next = level(n + 1).val().shape();
        if (cur[2] != 2 * next[2] || cur[3] != 2 * next[3]) {
            throw ShapeError("pyramid: level " + std::to_string(n) + " " + level(n).val().shape_str() +
                             " is not exactly 2x level " + std::to_string(n + 1) + " " +
                             level(n + 1).val().shape_str());
        }
    }
}

CbamParams CbamParams::init(std::int64_t channels, std::int64_t reduction, Rng& rng) {
    CbamParams p;
    p.channels = channels;
    p.hidden = std::max<std::int64_t>(1, channels / reduction);
    p.mlp_w1 = ad::Var::leaf(
        Tensor::randn({p.hidden, channels}, rng, std::sqrt(2.0 / static_cast<double>(channels))), true);
    p.mlp_b1 = ad::Var::leaf(Tensor::zeros({p.hidden}), true);
    p.mlp_w2 = ad::Var::leaf(
        Tensor::randn({channels, p.hidden}, rng, std::sqrt(2.0 / static_cast<double>(p.hidden))), true);
    p.mlp_b2 = ad::Var::leaf(Tensor::zeros({channels}), true);
    p.spatial_w = ad::Var::leaf(Tensor::randn({1, 2, 7, 7}, rng, std::sqrt(2.0 / (2.0 * 49.0))), true);
    p.spatial_b = ad::Var::leaf(Tensor::zeros({1}), true);
    return p;
}

CbamParams CbamParams::zeros(std::int64_t channels, std::int64_t reduction) {
    CbamParams p;
    p.channels = channels;
    p.hidden = std::max<std::int64_t>(1, channels / reduction);
    p.mlp_w1 = ad::Var::leaf(Tensor::zeros({p.hidden, channels}), true);
    p.mlp_b1 = ad::Var::leaf(Tensor::zeros({p.hidden}), true);
    p.mlp_w2 = ad::Var::leaf(Tensor::zeros({channels, p.hidden}), true);
    p.mlp_b2 = ad::Var::leaf(Tensor::zeros({channels}), true);
    p.spatial_w = ad::Var::leaf(Tensor::zeros({1, 2, 7, 7}), true);
    p.spatial_b = ad::Var::leaf(Tensor::zeros({1}), true);
    return p;
}

void CbamParams::register_params(ParamSet& ps, const std::string& prefix) const {
    ps.add(prefix + ".mlp_w1", mlp_w1);
    ps.add(prefix + ".mlp_b1", mlp_b1);
    ps.add(prefix + ".mlp_w2", mlp_w2);
    ps.add(prefix + ".mlp_b2", mlp_b2);
    ps.add(prefix + ".spatial_w", spatial_w);
    ps.add(prefix + ".spatial_b", spatial_b);
}

namespace {

Var shared_mlp(const Var& v, const CbamParams& p) {
    return linear(relu(linear(v, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
}

}  // namespace

Var channel_attention(const Var& f, const CbamParams& params) {
    const auto& s = f.val().shape();
    if (s.size() != 4) throw ShapeError("channel_attention: expects 4-D input");
    if (s[1] != params.channels) {
        throw ShapeError("channel_attention: input channels " + std::to_string(s[1]) +
                         " != params channels " + std::to_string(params.channels));
    }
    const Var avg = global_avg_pool(f);  // (B,C)
    const Var mx = global_max_pool(f);
    const Var gate = sigmoid(add(shared_mlp(avg, params), shared_mlp(mx, params)));
    return reshape(gate, {s[0], s[1], 1, 1});
}

Var spatial_attention(const Var& f, const CbamParams& params) {
    const auto& s = f.val().shape();
    if (s.size() != 4) throw ShapeError("spatial_attention: expects 4-D input");
    const Var pooled = concat_channels(channel_mean(f), channel_max(f));  // (B,2,H,W)
    ConvSpec spec;
    spec.kernel_size = 7;
    spec.padding = 3;
    spec.in_channels = 2;
    spec.out_channels = 1;
    return sigmoid(conv2d(pooled, params.spatial_w, params.spatial_b, spec));
}

Var apply_cbam(const Var& c5, const CbamParams& params) {
    const Var refined = mul_gate(c5, channel_attention(c5, params));
    return mul_gate(refined, spatial_attention(refined, params));
}

std::array<double, 3> Cfpan::softmax3(double a, double b, double c) {
    const double m = std::max({a, b, c});
    const double ea = std::exp(a - m), eb = std::exp(b - m), ec = std::exp(c - m);
    const double s = ea + eb + ec;
    return {ea / s, eb / s, ec / s};
}

Cfpan Cfpan::init(const CfpanConfig& cfg, const std::array<std::int64_t, 4>& in_channels,
                  const std::array<std::pair<std::int64_t, std::int64_t>, 4>& level_sizes,
                  Rng& rng) {
    Cfpan n;
    n.cfg_ = cfg;
    n.cbam_ = CbamParams::init(in_channels[3], cfg.cbam_reduction, rng);
    for (std::size_t i = 0; i < 4; ++i) {
        ConvSpec spec;
        spec.kernel_size = 1;
        spec.in_channels = in_channels[i];
        spec.out_channels = cfg.out_channels;
        n.laterals_[i] = ConvLayer::he_init(spec, rng);
    }
    for (std::size_t i = 0; i < 3; ++i) {  // fused levels 2..4
        const auto [h, w] = level_sizes[i];
        auto make_logit = [&]() {
            Tensor t({1, 1, h, w});
            if (cfg.logit_jitter > 0.0) {
                for (std::int64_t k = 0; k < t.numel(); ++k) t[k] = rng.normal(0.0, cfg.logit_jitter);
            }
            return ad::Var::leaf(std::move(t), true);
        };
        n.fusion_[i] = {make_logit(), make_logit(), make_logit()};
    }
    return n;
}

Var Cfpan::fuse_level(const Var& p_next, const Var& c_next, const Var& c_cur,
                      const FusionWeights& weights, const ConvLayer& lat_next,
                      const ConvLayer& lat_cur) const {
    const auto& ps = p_next.val().shape();
    const auto& cs = c_next.val().shape();
    const auto& us = c_cur.val().shape();
    if (ps[2] != cs[2] || ps[3] != cs[3]) {
        throw ShapeError("fuse_level: P_next " + p_next.val().shape_str() + " and C_next " +
                         c_next.val().shape_str() + " must share resolution");
    }
    if (us[2] != 2 * ps[2] || us[3] != 2 * ps[3]) {
        throw ShapeError("fuse_level: C_cur " + c_cur.val().shape_str() +
                         " must be exactly 2x the resolution of P_next " + p_next.val().shape_str());
    }

    const Var up_p = bilinear_upsample(p_next, 2);
    const Var up_c = bilinear_upsample(lat_next.forward(c_next), 2);
    const Var cur = lat_cur.forward(c_cur);

    if (!cfg_.adaptive_fusion) {
        // Static top-down baseline with the frozen weight triple.
        return add(add(scale(up_p, cfg_.frozen_weights[0]), scale(up_c, cfg_.frozen_weights[1])),
                   scale(cur, cfg_.frozen_weights[2]));
    }

    // Pointwise softmax over the three logit maps. Subtracting the pointwise
    // max (a constant w.r.t. the graph) leaves values and gradients unchanged.
    Tensor m(weights.logit_up_p.val().shape());
    for (std::int64_t i = 0; i < m.numel(); ++i) {
        m[i] = -std::max({weights.logit_up_p.val()[i], weights.logit_up_c.val()[i],
                          weights.logit_cur.val()[i]});
    }
    const Var shift = ad::Var::constant(std::move(m));
    const Var ea = exp_op(add(weights.logit_up_p, shift));
    const Var eb = exp_op(add(weights.logit_up_c, shift));
    const Var ec = exp_op(add(weights.logit_cur, shift));
    const Var denom = add(add(ea, eb), ec);
    const Var alpha = div(ea, denom);
    const Var beta = div(eb, denom);
    const Var gamma = div(ec, denom);

    return add(add(mul_gate(up_p, alpha), mul_gate(up_c, beta)), mul_gate(cur, gamma));
}

Pyramid Cfpan::forward(const Pyramid& c) const {
    c.validate_halving();
    Pyramid out;
    const Var& c5 = c.level(5);
    out.level(5) = cfg_.use_cbam ? laterals_[3].forward(apply_cbam(c5, cbam_))
                                 : laterals_[3].forward(c5);
    for (std::int64_t n = 4; n >= 2; --n) {
        out.level(n) = fuse_level(out.level(n + 1), c.level(n + 1), c.level(n),
                                  fusion_[static_cast<std::size_t>(n - 2)],
                                  laterals_[static_cast<std::size_t>(n - 1)],
                                  laterals_[static_cast<std::size_t>(n - 2)]);
    }
    return out;
}

void Cfpan::register_params(ParamSet& ps, const std::string& prefix) const {
    cbam_.register_params(ps, prefix + ".cbam");
    for (std::size_t i = 0; i < 4; ++i) {
        laterals_[i].register_params(ps, prefix + ".lateral" + std::to_string(i + 2));
    }
    if (cfg_.adaptive_fusion) {
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string base = prefix + ".fusion" + std::to_string(i + 2);
            ps.add(base + ".logit_up_p", fusion_[i].logit_up_p);
            ps.add(base + ".logit_up_c", fusion_[i].logit_up_c);
            ps.add(base + ".logit_cur", fusion_[i].logit_cur);
        }
    }
}

}  // namespace fsdet::neck
