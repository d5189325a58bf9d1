#include <algorithm>
#include <cmath>
#include <memory>

#include "fsdet/nn_ops.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fsdet::nn {

using ad::make_op;
using ad::Node;

void ConvSpec::validate() const {
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw ShapeError("conv: kernel_size must be odd and >= 1, got " + std::to_string(kernel_size));
    }
    if (dilation < 1) throw ShapeError("conv: dilation must be >= 1, got " + std::to_string(dilation));
    if (stride < 1) throw ShapeError("conv: stride must be >= 1, got " + std::to_string(stride));
    if (padding < 0) throw ShapeError("conv: padding must be >= 0, got " + std::to_string(padding));
    if (in_channels < 1 || out_channels < 1) {
        throw ShapeError("conv: channel counts must be >= 1");
    }
}

std::int64_t ConvSpec::out_size(std::int64_t in) const {
    const std::int64_t out = (in + 2 * padding - receptive_field()) / stride + 1;
    if (out < 1) {
        throw ShapeError("conv: output size < 1 for input extent " + std::to_string(in) +
                         " with receptive field " + std::to_string(receptive_field()) + " and padding " +
                         std::to_string(padding));
    }
    return out;
}

namespace {

void check_conv_args(const Var& x, const Var& w, const Var& bias, const ConvSpec& spec) {
    spec.validate();
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    if (xs.size() != 4) throw ShapeError("conv: input must be 4-D, got " + x.val().shape_str());
    if (ws.size() != 4) throw ShapeError("conv: weights must be 4-D, got " + w.val().shape_str());
    if (xs[1] != spec.in_channels) {
        throw ShapeError("conv: input channels " + std::to_string(xs[1]) + " != spec in_channels " +
                         std::to_string(spec.in_channels));
    }
    if (ws[0] != spec.out_channels || ws[1] != spec.in_channels || ws[2] != spec.kernel_size ||
        ws[3] != spec.kernel_size) {
        throw ShapeError("conv: weight shape " + w.val().shape_str() + " inconsistent with spec");
    }
    if (bias.defined() && (bias.val().rank() != 1 || bias.val().dim(0) != spec.out_channels)) {
        throw ShapeError("conv: bias shape " + bias.val().shape_str() + " != (out_channels)");
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, const ConvSpec& spec) {
    check_conv_args(x, w, bias, spec);
    const auto& xs = x.val().shape();
    const std::int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const std::int64_t K = spec.kernel_size, r = spec.dilation, s = spec.stride, p = spec.padding;
    const std::int64_t Cout = spec.out_channels;
    const std::int64_t OH = spec.out_size(H), OW = spec.out_size(W);

    Tensor out({B, Cout, OH, OW});
    const double* xp = x.val().data();
    const double* wp = w.val().data();
    double* op = out.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t o = 0; o < Cout; ++o) {
            double* oplane = op + (b * Cout + o) * OH * OW;
            const double bval = bias.defined() ? bias.val()[o] : 0.0;
            for (std::int64_t i = 0; i < OH * OW; ++i) oplane[i] = bval;
            for (std::int64_t c = 0; c < Cin; ++c) {
                const double* xplane = xp + (b * Cin + c) * H * W;
                for (std::int64_t ky = 0; ky < K; ++ky) {
                    for (std::int64_t kx = 0; kx < K; ++kx) {
                        const double wv = wp[((o * Cin + c) * K + ky) * K + kx];
                        if (wv == 0.0) continue;
                        // valid output range so that the sampled tap is in bounds
                        const std::int64_t off_y = r * ky - p, off_x = r * kx - p;
                        const std::int64_t oy_lo = std::max<std::int64_t>(0, (-off_y + s - 1) / s);
                        const std::int64_t oy_hi = std::min(OH, (H - off_y + s - 1) / s);
                        const std::int64_t ox_lo = std::max<std::int64_t>(0, (-off_x + s - 1) / s);
                        const std::int64_t ox_hi = std::min(OW, (W - off_x + s - 1) / s);
                        for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
                            const double* xrow = xplane + (oy * s + off_y) * W + off_x;
                            double* orow = oplane + oy * OW;
                            if (s == 1) {
                                for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                                    orow[ox] += wv * xrow[ox];
                                }
                            } else {
                                for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                                    orow[ox] += wv * xrow[ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    std::vector<Var> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents),
                   [x, w, bias, spec, B, Cin, H, W, K, r, s, p, Cout, OH, OW](Node& n) {
        n.backward = [&n, x, w, bias, B, Cin, H, W, K, r, s, p, Cout, OH, OW]() {
            const double* gy = n.grad.data();
            const double* xp = x.val().data();
            const double* wp = w.val().data();
            if (x.node()->requires_grad) {
                double* gx = x.node()->ensure_grad().data();
#pragma omp parallel for collapse(2) schedule(static)
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < Cin; ++c) {
                        double* gxplane = gx + (b * Cin + c) * H * W;
                        for (std::int64_t o = 0; o < Cout; ++o) {
                            const double* gyplane = gy + (b * Cout + o) * OH * OW;
                            for (std::int64_t ky = 0; ky < K; ++ky) {
                                for (std::int64_t kx = 0; kx < K; ++kx) {
                                    const double wv = wp[((o * Cin + c) * K + ky) * K + kx];
                                    if (wv == 0.0) continue;
                                    const std::int64_t off_y = r * ky - p, off_x = r * kx - p;
                                    const std::int64_t oy_lo = std::max<std::int64_t>(0, (-off_y + s - 1) / s);
                                    const std::int64_t oy_hi = std::min(OH, (H - off_y + s - 1) / s);
                                    const std::int64_t ox_lo = std::max<std::int64_t>(0, (-off_x + s - 1) / s);
                                    const std::int64_t ox_hi = std::min(OW, (W - off_x + s - 1) / s);
                                    for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
                                        double* gxrow = gxplane + (oy * s + off_y) * W + off_x;
                                        const double* gyrow = gyplane + oy * OW;
                                        for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                                            gxrow[ox * s] += wv * gyrow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (w.node()->requires_grad) {
                double* gw = w.node()->ensure_grad().data();
#pragma omp parallel for collapse(2) schedule(static)
                for (std::int64_t o = 0; o < Cout; ++o) {
                    for (std::int64_t c = 0; c < Cin; ++c) {
                        for (std::int64_t ky = 0; ky < K; ++ky) {
                            for (std::int64_t kx = 0; kx < K; ++kx) {
                                const std::int64_t off_y = r * ky - p, off_x = r * kx - p;
                                const std::int64_t oy_lo = std::max<std::int64_t>(0, (-off_y + s - 1) / s);
                                const std::int64_t oy_hi = std::min(OH, (H - off_y + s - 1) / s);
                                const std::int64_t ox_lo = std::max<std::int64_t>(0, (-off_x + s - 1) / s);
                                const std::int64_t ox_hi = std::min(OW, (W - off_x + s - 1) / s);
                                double acc = 0.0;
                                for (std::int64_t b = 0; b < B; ++b) {
                                    const double* gyplane = gy + (b * Cout + o) * OH * OW;
                                    const double* xplane = xp + (b * Cin + c) * H * W;
                                    for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
                                        const double* xrow = xplane + (oy * s + off_y) * W + off_x;
                                        const double* gyrow = gyplane + oy * OW;
                                        for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                                            acc += gyrow[ox] * xrow[ox * s];
                                        }
                                    }
                                }
                                gw[((o * Cin + c) * K + ky) * K + kx] += acc;
                            }
                        }
                    }
                }
            }
            if (bias.defined() && bias.node()->requires_grad) {
                double* gb = bias.node()->ensure_grad().data();
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < Cout; ++o) {
                        const double* gyplane = gy + (b * Cout + o) * OH * OW;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < OH * OW; ++i) acc += gyplane[i];
                        gb[o] += acc;
                    }
                }
            }
        };
    });
}

namespace {

// Bilinear read with zero outside the image. Returns value and accumulates
// the four corner weights for reuse in the backward pass.
struct BilinearTaps {
    std::int64_t y0, x0;
    double wy1, wx1;  // fractional parts
};

inline BilinearTaps bilinear_taps(double py, double px) {
    const double fy = std::floor(py), fx = std::floor(px);
    return {static_cast<std::int64_t>(fy), static_cast<std::int64_t>(fx), py - fy, px - fx};
}

inline double bilinear_read(const double* plane, std::int64_t H, std::int64_t W,
                            const BilinearTaps& t) {
    const std::int64_t y0 = t.y0, x0 = t.x0, y1 = y0 + 1, x1 = x0 + 1;
    const double w00 = (1.0 - t.wy1) * (1.0 - t.wx1);
    const double w01 = (1.0 - t.wy1) * t.wx1;
    const double w10 = t.wy1 * (1.0 - t.wx1);
    const double w11 = t.wy1 * t.wx1;
    double v = 0.0;
    if (y0 >= 0 && y0 < H) {
        if (x0 >= 0 && x0 < W) v += w00 * plane[y0 * W + x0];
        if (x1 >= 0 && x1 < W) v += w01 * plane[y0 * W + x1];
    }
    if (y1 >= 0 && y1 < H) {
        if (x0 >= 0 && x0 < W) v += w10 * plane[y1 * W + x0];
        if (x1 >= 0 && x1 < W) v += w11 * plane[y1 * W + x1];
    }
    return v;
}

// d(sample)/d(py) and d(sample)/d(px) for the zero-outside convention.
inline void bilinear_coord_grad(const double* plane, std::int64_t H, std::int64_t W,
                                const BilinearTaps& t, double* dpy, double* dpx) {
    const std::int64_t y0 = t.y0, x0 = t.x0, y1 = y0 + 1, x1 = x0 + 1;
    auto at = [&](std::int64_t y, std::int64_t x) -> double {
        return (y >= 0 && y < H && x >= 0 && x < W) ? plane[y * W + x] : 0.0;
    };
    const double v00 = at(y0, x0), v01 = at(y0, x1), v10 = at(y1, x0), v11 = at(y1, x1);
    *dpy = (v10 - v00) * (1.0 - t.wx1) + (v11 - v01) * t.wx1;
    *dpx = (v01 - v00) * (1.0 - t.wy1) + (v11 - v10) * t.wy1;
}

inline void bilinear_scatter(double* plane, std::int64_t H, std::int64_t W, const BilinearTaps& t,
                             double g) {
    const std::int64_t y0 = t.y0, x0 = t.x0, y1 = y0 + 1, x1 = x0 + 1;
    if (y0 >= 0 && y0 < H) {
        if (x0 >= 0 && x0 < W) plane[y0 * W + x0] += g * (1.0 - t.wy1) * (1.0 - t.wx1);
        if (x1 >= 0 && x1 < W) plane[y0 * W + x1] += g * (1.0 - t.wy1) * t.wx1;
    }
    if (y1 >= 0 && y1 < H) {
        if (x0 >= 0 && x0 < W) plane[y1 * W + x0] += g * t.wy1 * (1.0 - t.wx1);
        if (x1 >= 0 && x1 < W) plane[y1 * W + x1] += g * t.wy1 * t.wx1;
    }
}

}  // namespace

Var deformable_conv2d(const Var& x, const Var& w, const Var& bias, const Var& offsets,
                      const ConvSpec& spec) {
    check_conv_args(x, w, bias, spec);
    const auto& xs = x.val().shape();
    const std::int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const std::int64_t K = spec.kernel_size, r = spec.dilation, s = spec.stride, p = spec.padding;
    const std::int64_t Cout = spec.out_channels;
    const std::int64_t OH = spec.out_size(H), OW = spec.out_size(W);
    const std::int64_t T = K * K;

    const auto& os = offsets.val().shape();
    if (os.size() != 4 || os[0] != B || os[1] != 2 * T || os[2] != OH || os[3] != OW) {
        throw ShapeError("deformable_conv2d: offset shape " + offsets.val().shape_str() +
                         " != (B," + std::to_string(2 * T) + "," + std::to_string(OH) + "," +
                         std::to_string(OW) + ")");
    }

    Tensor out({B, Cout, OH, OW});
    const double* xp = x.val().data();
    const double* wp = w.val().data();
    const double* fp = offsets.val().data();
    double* op = out.data();

#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        std::vector<double> samples(static_cast<std::size_t>(T * Cin));
        for (std::int64_t oy = 0; oy < OH; ++oy) {
            for (std::int64_t ox = 0; ox < OW; ++ox) {
                for (std::int64_t t = 0; t < T; ++t) {
                    const std::int64_t ky = t / K, kx = t % K;
                    const double dy = fp[((b * 2 * T + 2 * t) * OH + oy) * OW + ox];
                    const double dx = fp[((b * 2 * T + 2 * t + 1) * OH + oy) * OW + ox];
                    const double py = static_cast<double>(oy * s - p + r * ky) + dy;
                    const double px = static_cast<double>(ox * s - p + r * kx) + dx;
                    const BilinearTaps taps = bilinear_taps(py, px);
                    for (std::int64_t c = 0; c < Cin; ++c) {
                        samples[static_cast<std::size_t>(t * Cin + c)] =
                            bilinear_read(xp + (b * Cin + c) * H * W, H, W, taps);
                    }
                }
                for (std::int64_t o = 0; o < Cout; ++o) {
                    const double* wrow = wp + o * Cin * T;
                    double acc = bias.defined() ? bias.val()[o] : 0.0;
                    // weight layout (o,c,ky,kx); samples laid out (t,c)
                    for (std::int64_t c = 0; c < Cin; ++c) {
                        for (std::int64_t t = 0; t < T; ++t) {
                            acc += wrow[c * T + t] * samples[static_cast<std::size_t>(t * Cin + c)];
                        }
                    }
                    op[((b * Cout + o) * OH + oy) * OW + ox] = acc;
                }
            }
        }
    }

    std::vector<Var> parents = {x, w, offsets};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents),
                   [x, w, bias, offsets, B, Cin, H, W, K, r, s, p, Cout, OH, OW, T](Node& n) {
        n.backward = [&n, x, w, bias, offsets, B, Cin, H, W, K, r, s, p, Cout, OH, OW, T]() {
            const double* gy = n.grad.data();
            const double* xp = x.val().data();
            const double* wp = w.val().data();
            const double* fp = offsets.val().data();
            const bool need_x = x.node()->requires_grad;
            const bool need_w = w.node()->requires_grad;
            const bool need_f = offsets.node()->requires_grad;
            double* gx = need_x ? x.node()->ensure_grad().data() : nullptr;
            double* gw = need_w ? w.node()->ensure_grad().data() : nullptr;
            double* gf = need_f ? offsets.node()->ensure_grad().data() : nullptr;
            std::vector<double> dsamp(static_cast<std::size_t>(Cin));
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t oy = 0; oy < OH; ++oy) {
                    for (std::int64_t ox = 0; ox < OW; ++ox) {
                        for (std::int64_t t = 0; t < T; ++t) {
                            const std::int64_t ky = t / K, kx = t % K;
                            const double dy = fp[((b * 2 * T + 2 * t) * OH + oy) * OW + ox];
                            const double dx = fp[((b * 2 * T + 2 * t + 1) * OH + oy) * OW + ox];
                            const double py = static_cast<double>(oy * s - p + r * ky) + dy;
                            const double px = static_cast<double>(ox * s - p + r * kx) + dx;
                            const BilinearTaps taps = bilinear_taps(py, px);
                            // dL/dsample per channel
                            for (std::int64_t c = 0; c < Cin; ++c) dsamp[static_cast<std::size_t>(c)] = 0.0;
                            for (std::int64_t o = 0; o < Cout; ++o) {
                                const double g = gy[((b * Cout + o) * OH + oy) * OW + ox];
                                if (g == 0.0) continue;
                                const double* wrow = wp + o * Cin * T;
                                for (std::int64_t c = 0; c < Cin; ++c) {
                                    dsamp[static_cast<std::size_t>(c)] += g * wrow[c * T + t];
                                }
                            }
                            double gpy = 0.0, gpx = 0.0;
                            for (std::int64_t c = 0; c < Cin; ++c) {
                                const double ds = dsamp[static_cast<std::size_t>(c)];
                                const double* plane = xp + (b * Cin + c) * H * W;
                                if (need_x && ds != 0.0) {
                                    bilinear_scatter(gx + (b * Cin + c) * H * W, H, W, taps, ds);
                                }
                                if (need_f && ds != 0.0) {
                                    double dpy, dpx;
                                    bilinear_coord_grad(plane, H, W, taps, &dpy, &dpx);
                                    gpy += ds * dpy;
                                    gpx += ds * dpx;
                                }
                                if (need_w) {
                                    const double sample = bilinear_read(plane, H, W, taps);
                                    for (std::int64_t o = 0; o < Cout; ++o) {
                                        const double g = gy[((b * Cout + o) * OH + oy) * OW + ox];
                                        if (g != 0.0) gw[(o * Cin + c) * T + t] += g * sample;
                                    }
                                }
                            }
                            if (need_f) {
                                gf[((b * 2 * T + 2 * t) * OH + oy) * OW + ox] += gpy;
                                gf[((b * 2 * T + 2 * t + 1) * OH + oy) * OW + ox] += gpx;
                            }
                        }
                    }
                }
            }
            if (bias.defined() && bias.node()->requires_grad) {
                double* gb = bias.node()->ensure_grad().data();
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < Cout; ++o) {
                        const double* gyplane = gy + (b * Cout + o) * OH * OW;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < OH * OW; ++i) acc += gyplane[i];
                        gb[o] += acc;
                    }
                }
            }
        };
    });
}

Var bilinear_upsample(const Var& x, std::int64_t factor) {
    if (factor < 2) throw ShapeError("bilinear_upsample: factor must be >= 2");
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("bilinear_upsample: expects 4-D input");
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    const std::int64_t OH = H * factor, OW = W * factor;
    Tensor out({B, C, OH, OW});

    // Precompute per-axis source indices and weights (shared by all planes).
    std::vector<std::int64_t> y0(static_cast<std::size_t>(OH)), y1(static_cast<std::size_t>(OH));
    std::vector<double> wy(static_cast<std::size_t>(OH));
    for (std::int64_t oy = 0; oy < OH; ++oy) {
        const double sy = (static_cast<double>(oy) + 0.5) / static_cast<double>(factor) - 0.5;
        const double fy = std::floor(sy);
        const double fr = sy - fy;
        std::int64_t a = static_cast<std::int64_t>(fy);
        y0[oy] = std::clamp<std::int64_t>(a, 0, H - 1);
        y1[oy] = std::clamp<std::int64_t>(a + 1, 0, H - 1);
        wy[oy] = fr;
    }
    std::vector<std::int64_t> x0(static_cast<std::size_t>(OW)), x1(static_cast<std::size_t>(OW));
    std::vector<double> wx(static_cast<std::size_t>(OW));
    for (std::int64_t ox = 0; ox < OW; ++ox) {
        const double sx = (static_cast<double>(ox) + 0.5) / static_cast<double>(factor) - 0.5;
        const double fx = std::floor(sx);
        const double fr = sx - fx;
        std::int64_t a = static_cast<std::int64_t>(fx);
        x0[ox] = std::clamp<std::int64_t>(a, 0, W - 1);
        x1[ox] = std::clamp<std::int64_t>(a + 1, 0, W - 1);
        wx[ox] = fr;
    }

    const double* xp = x.val().data();
    double* op = out.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* plane = xp + bc * H * W;
        double* oplane = op + bc * OH * OW;
        for (std::int64_t oy = 0; oy < OH; ++oy) {
            const double* r0 = plane + y0[oy] * W;
            const double* r1 = plane + y1[oy] * W;
            const double fy = wy[oy];
            double* orow = oplane + oy * OW;
            for (std::int64_t ox = 0; ox < OW; ++ox) {
                const double top = r0[x0[ox]] * (1.0 - wx[ox]) + r0[x1[ox]] * wx[ox];
                const double bot = r1[x0[ox]] * (1.0 - wx[ox]) + r1[x1[ox]] * wx[ox];
                orow[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }

    auto ys0 = std::make_shared<std::vector<std::int64_t>>(std::move(y0));
    auto ys1 = std::make_shared<std::vector<std::int64_t>>(std::move(y1));
    auto wys = std::make_shared<std::vector<double>>(std::move(wy));
    auto xs0 = std::make_shared<std::vector<std::int64_t>>(std::move(x0));
    auto xs1 = std::make_shared<std::vector<std::int64_t>>(std::move(x1));
    auto wxs = std::make_shared<std::vector<double>>(std::move(wx));
    return make_op(std::move(out), {x}, [=](Node& n) {
        n.backward = [&n, x, B, C, H, W, OH, OW, ys0, ys1, wys, xs0, xs1, wxs]() {
            double* gx = x.node()->ensure_grad().data();
            const double* gy = n.grad.data();
#pragma omp parallel for schedule(static)
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                double* gplane = gx + bc * H * W;
                const double* gyplane = gy + bc * OH * OW;
                for (std::int64_t oy = 0; oy < OH; ++oy) {
                    const double fy = (*wys)[oy];
                    for (std::int64_t ox = 0; ox < OW; ++ox) {
                        const double g = gyplane[oy * OW + ox];
                        if (g == 0.0) continue;
                        const double fx = (*wxs)[ox];
                        gplane[(*ys0)[oy] * W + (*xs0)[ox]] += g * (1.0 - fy) * (1.0 - fx);
                        gplane[(*ys0)[oy] * W + (*xs1)[ox]] += g * (1.0 - fy) * fx;
                        gplane[(*ys1)[oy] * W + (*xs0)[ox]] += g * fy * (1.0 - fx);
                        gplane[(*ys1)[oy] * W + (*xs1)[ox]] += g * fy * fx;
                    }
                }
            }
        };
    });
}

}  // namespace fsdet::nn
