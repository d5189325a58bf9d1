#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fsdet/nn_ops.hpp"
#include "fsdet/rng.hpp"

namespace fsdet::nn {

// Named, ordered collection of trainable leaves. Iteration order is the
// registration order, which fixes the serialization layout and makes
// optimizer sweeps deterministic.
class ParamSet {
public:
    void add(const std::string& name, ad::Var v) {
        for (const auto& [n, _] : items_) {
            if (n == name) throw Error("ParamSet: duplicate parameter name " + name);
        }
        items_.emplace_back(name, std::move(v));
    }

    ad::Var get(const std::string& name) const {
        for (const auto& [n, v] : items_) {
            if (n == name) return v;
        }
        throw Error("ParamSet: unknown parameter " + name);
    }

    const std::vector<std::pair<std::string, ad::Var>>& items() const { return items_; }

    void zero_grads() {
        for (auto& [_, v] : items_) v.node()->zero_grad();
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [_, v] : items_) n += v.val().numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, ad::Var>> items_;
};

struct ConvLayer {
    ad::Var w, b;
    ConvSpec spec;

    static ConvLayer he_init(const ConvSpec& spec, Rng& rng) {
        spec.validate();
        ConvLayer l;
        l.spec = spec;
        const double fan_in =
            static_cast<double>(spec.in_channels * spec.kernel_size * spec.kernel_size);
        l.w = ad::Var::leaf(
            Tensor::randn({spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size},
                          rng, std::sqrt(2.0 / fan_in)),
            true);
        l.b = ad::Var::leaf(Tensor::zeros({spec.out_channels}), true);
        return l;
    }

    static ConvLayer zero_init(const ConvSpec& spec) {
        spec.validate();
        ConvLayer l;
        l.spec = spec;
        l.w = ad::Var::leaf(
            Tensor::zeros({spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size}),
            true);
        l.b = ad::Var::leaf(Tensor::zeros({spec.out_channels}), true);
        return l;
    }

    // Small-Gaussian head initialization (prediction heads).
    static ConvLayer gaussian_init(const ConvSpec& spec, Rng& rng, double stddev) {
        spec.validate();
        ConvLayer l;
        l.spec = spec;
        l.w = ad::Var::leaf(
            Tensor::randn({spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size},
                          rng, stddev),
            true);
        l.b = ad::Var::leaf(Tensor::zeros({spec.out_channels}), true);
        return l;
    }

    ad::Var forward(const ad::Var& x) const { return conv2d(x, w, b, spec); }

    void register_params(ParamSet& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

struct LinearLayer {
    ad::Var w, b;  // (out,in), (out)

    static LinearLayer he_init(std::int64_t in, std::int64_t out, Rng& rng) {
        LinearLayer l;
        l.w = ad::Var::leaf(Tensor::randn({out, in}, rng, std::sqrt(2.0 / static_cast<double>(in))),
                            true);
        l.b = ad::Var::leaf(Tensor::zeros({out}), true);
        return l;
    }

    static LinearLayer zero_init(std::int64_t in, std::int64_t out) {
        LinearLayer l;
        l.w = ad::Var::leaf(Tensor::zeros({out, in}), true);
        l.b = ad::Var::leaf(Tensor::zeros({out}), true);
        return l;
    }

    static LinearLayer gaussian_init(std::int64_t in, std::int64_t out, Rng& rng, double stddev) {
        LinearLayer l;
        l.w = ad::Var::leaf(Tensor::randn({out, in}, rng, stddev), true);
        l.b = ad::Var::leaf(Tensor::zeros({out}), true);
        return l;
    }

    ad::Var forward(const ad::Var& x) const { return linear(x, w, b); }

    void register_params(ParamSet& ps, const std::string& prefix) const {
        ps.add(prefix + ".w", w);
        ps.add(prefix + ".b", b);
    }
};

}  // namespace fsdet::nn
