#include "fsdet/roi_align.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace fsdet::nn {

using ad::make_op;
using ad::Node;

namespace {
constexpr std::int64_t kSamplesPerAxis = 2;

struct SamplePoint {
    std::int64_t y0, x0;
    double wy, wx;  // fractional weights toward y0+1 / x0+1
};

}  // namespace

Var roi_align(const Var& features, const std::vector<Box>& boxes, double spatial_scale,
              std::int64_t output_size) {
    const auto& fs = features.val().shape();
    if (fs.size() != 4 || fs[0] != 1) {
        throw ShapeError("roi_align: expects (1,C,H,W) features, got " + features.val().shape_str());
    }
    if (output_size < 1) throw ShapeError("roi_align: output_size must be >= 1");
    const std::int64_t C = fs[1], H = fs[2], W = fs[3];
    const std::int64_t N = static_cast<std::int64_t>(boxes.size());
    const std::int64_t S = output_size;
    if (N == 0) throw ShapeError("roi_align: empty box list");

    const double fw = static_cast<double>(W), fh = static_cast<double>(H);
    for (const auto& b : boxes) {
        if (b.x2 * spatial_scale < 0.0 || b.x1 * spatial_scale > fw || b.y2 * spatial_scale < 0.0 ||
            b.y1 * spatial_scale > fh) {
            throw DataError("roi_align: box fully outside the feature extent");
        }
    }

    // Precompute sampling points: N * S * S * 2 * 2 samples.
    const std::int64_t per_bin = kSamplesPerAxis * kSamplesPerAxis;
    auto samples = std::make_shared<std::vector<SamplePoint>>();
    samples->resize(static_cast<std::size_t>(N * S * S * per_bin));
    for (std::int64_t n = 0; n < N; ++n) {
        const Box& b = boxes[static_cast<std::size_t>(n)];
        const double x1 = b.x1 * spatial_scale, y1 = b.y1 * spatial_scale;
        const double bw = std::max(b.width() * spatial_scale, 1e-6) / static_cast<double>(S);
        const double bh = std::max(b.height() * spatial_scale, 1e-6) / static_cast<double>(S);
        for (std::int64_t iy = 0; iy < S; ++iy) {
            for (std::int64_t ix = 0; ix < S; ++ix) {
                for (std::int64_t sy = 0; sy < kSamplesPerAxis; ++sy) {
                    for (std::int64_t sx = 0; sx < kSamplesPerAxis; ++sx) {
                        double py = y1 + (static_cast<double>(iy) +
                                          (static_cast<double>(sy) + 0.5) / kSamplesPerAxis) * bh - 0.5;
                        double px = x1 + (static_cast<double>(ix) +
                                          (static_cast<double>(sx) + 0.5) / kSamplesPerAxis) * bw - 0.5;
                        py = std::clamp(py, 0.0, fh - 1.0);
                        px = std::clamp(px, 0.0, fw - 1.0);
                        const double fy = std::floor(py), fx = std::floor(px);
                        SamplePoint sp;
                        sp.y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), H - 1);
                        sp.x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), W - 1);
                        sp.wy = py - static_cast<double>(sp.y0);
                        sp.wx = px - static_cast<double>(sp.x0);
                        (*samples)[static_cast<std::size_t>((((n * S + iy) * S + ix) * per_bin) +
                                                           sy * kSamplesPerAxis + sx)] = sp;
                    }
                }
            }
        }
    }

    Tensor out({N, C, S, S});
    const double* fp = features.val().data();
    const double inv = 1.0 / static_cast<double>(per_bin);
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* plane = fp + c * H * W;
            for (std::int64_t iy = 0; iy < S; ++iy) {
                for (std::int64_t ix = 0; ix < S; ++ix) {
                    double acc = 0.0;
                    for (std::int64_t k = 0; k < per_bin; ++k) {
                        const SamplePoint& sp =
                            (*samples)[static_cast<std::size_t>((((n * S + iy) * S + ix) * per_bin) + k)];
                        const std::int64_t y1i = std::min(sp.y0 + 1, H - 1);
                        const std::int64_t x1i = std::min(sp.x0 + 1, W - 1);
                        acc += (1.0 - sp.wy) * ((1.0 - sp.wx) * plane[sp.y0 * W + sp.x0] +
                                                sp.wx * plane[sp.y0 * W + x1i]) +
                               sp.wy * ((1.0 - sp.wx) * plane[y1i * W + sp.x0] +
                                        sp.wx * plane[y1i * W + x1i]);
                    }
                    out[((n * C + c) * S + iy) * S + ix] = acc * inv;
                }
            }
        }
    }

    return make_op(std::move(out), {features}, [features, samples, N, C, H, W, S, per_bin, inv](Node& n) {
        n.backward = [&n, features, samples, N, C, H, W, S, per_bin, inv]() {
            double* gf = features.node()->ensure_grad().data();
            for (std::int64_t b = 0; b < N; ++b) {
                for (std::int64_t c = 0; c < C; ++c) {
                    double* gplane = gf + c * H * W;
                    for (std::int64_t iy = 0; iy < S; ++iy) {
                        for (std::int64_t ix = 0; ix < S; ++ix) {
                            const double g = n.grad[((b * C + c) * S + iy) * S + ix] * inv;
                            if (g == 0.0) continue;
                            for (std::int64_t k = 0; k < per_bin; ++k) {
                                const SamplePoint& sp = (*samples)[static_cast<std::size_t>(
                                    (((b * S + iy) * S + ix) * per_bin) + k)];
                                const std::int64_t y1i = std::min(sp.y0 + 1, H - 1);
                                const std::int64_t x1i = std::min(sp.x0 + 1, W - 1);
                                gplane[sp.y0 * W + sp.x0] += g * (1.0 - sp.wy) * (1.0 - sp.wx);
                                gplane[sp.y0 * W + x1i] += g * (1.0 - sp.wy) * sp.wx;
                                gplane[y1i * W + sp.x0] += g * sp.wy * (1.0 - sp.wx);
                                gplane[y1i * W + x1i] += g * sp.wy * sp.wx;
                            }
                        }
                    }
                }
            }
        };
    });
}

}  // namespace fsdet::nn
