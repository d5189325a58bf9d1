#include "fsdet/loss_ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>

namespace fsdet::nn {

using ad::make_op;
using ad::Node;

namespace {

void check_rows4(const Var& v, const char* op) {
    const auto& s = v.val().shape();
    if (s.size() != 2 || s[1] != 4) {
        throw ShapeError(std::string(op) + ": expects (N,4), got " + v.val().shape_str());
    }
}

}  // namespace

Var decode_clip_boxes(const Var& base, const Var& deltas, double image_w, double image_h) {
    check_rows4(base, "decode_clip_boxes");
    check_rows4(deltas, "decode_clip_boxes");
    if (base.val().dim(0) != deltas.val().dim(0)) {
        throw ShapeError("decode_clip_boxes: row count mismatch");
    }
    const std::int64_t N = base.val().dim(0);
    Tensor out({N, 4});
    // Saturation flags per output coordinate steer the backward pass:
    // 0 = pass-through, 1 = clipped (zero grad), 2 = x2/y2 pinned to x1/y1+eps.
    auto sat = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(N * 4), 0);
    auto dwclamped = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(N * 2), 0);
    constexpr double eps = 1e-3;

    for (std::int64_t i = 0; i < N; ++i) {
        const double bx1 = base.val()[i * 4 + 0], by1 = base.val()[i * 4 + 1];
        const double bx2 = base.val()[i * 4 + 2], by2 = base.val()[i * 4 + 3];
        const double dx = deltas.val()[i * 4 + 0], dy = deltas.val()[i * 4 + 1];
        double dw = deltas.val()[i * 4 + 2], dh = deltas.val()[i * 4 + 3];
        if (dw < -kDeltaClamp || dw > kDeltaClamp) {
            dw = std::clamp(dw, -kDeltaClamp, kDeltaClamp);
            (*dwclamped)[static_cast<std::size_t>(i * 2)] = 1;
        }
        if (dh < -kDeltaClamp || dh > kDeltaClamp) {
            dh = std::clamp(dh, -kDeltaClamp, kDeltaClamp);
            (*dwclamped)[static_cast<std::size_t>(i * 2 + 1)] = 1;
        }
        const double wa = bx2 - bx1, ha = by2 - by1;
        const double cx = 0.5 * (bx1 + bx2) + dx * wa;
        const double cy = 0.5 * (by1 + by2) + dy * ha;
        const double w = wa * std::exp(dw);
        const double h = ha * std::exp(dh);
        const double rx1 = cx - 0.5 * w, rx2 = cx + 0.5 * w;
        const double ry1 = cy - 0.5 * h, ry2 = cy + 0.5 * h;

        double ox1 = rx1, ox2 = rx2, oy1 = ry1, oy2 = ry2;
        auto clip = [&](double v, double lo, double hi, std::int64_t k) {
            if (v < lo || v > hi) {
                (*sat)[static_cast<std::size_t>(i * 4 + k)] = 1;
                return std::clamp(v, lo, hi);
            }
            return v;
        };
        ox1 = clip(ox1, 0.0, image_w - eps, 0);
        oy1 = clip(oy1, 0.0, image_h - eps, 1);
        ox2 = clip(ox2, 0.0, image_w, 2);
        oy2 = clip(oy2, 0.0, image_h, 3);
        if (ox2 < ox1 + eps) {
            ox2 = ox1 + eps;
            (*sat)[static_cast<std::size_t>(i * 4 + 2)] = 2;
        }
        if (oy2 < oy1 + eps) {
            oy2 = oy1 + eps;
            (*sat)[static_cast<std::size_t>(i * 4 + 3)] = 2;
        }
        out[i * 4 + 0] = ox1;
        out[i * 4 + 1] = oy1;
        out[i * 4 + 2] = ox2;
        out[i * 4 + 3] = oy2;
    }

    return make_op(std::move(out), {base, deltas},
                   [base, deltas, sat, dwclamped, N](Node& n) {
        n.backward = [&n, base, deltas, sat, dwclamped, N]() {
            const bool need_base = base.node()->requires_grad;
            const bool need_delta = deltas.node()->requires_grad;
            double* gb = need_base ? base.node()->ensure_grad().data() : nullptr;
            double* gd = need_delta ? deltas.node()->ensure_grad().data() : nullptr;
            for (std::int64_t i = 0; i < N; ++i) {
                const double bx1 = base.val()[i * 4 + 0], by1 = base.val()[i * 4 + 1];
                const double bx2 = base.val()[i * 4 + 2], by2 = base.val()[i * 4 + 3];
                const double dx = deltas.val()[i * 4 + 0], dy = deltas.val()[i * 4 + 1];
                const double dw = std::clamp(deltas.val()[i * 4 + 2], -kDeltaClamp, kDeltaClamp);
                const double dh = std::clamp(deltas.val()[i * 4 + 3], -kDeltaClamp, kDeltaClamp);
                const double wa = bx2 - bx1, ha = by2 - by1;
                const double ew = std::exp(dw), eh = std::exp(dh);
                const double w = wa * ew, h = ha * eh;

                // Incoming grads with saturation applied. A "2" flag means
                // the coordinate was pinned to its sibling, so its gradient
                // reroutes through the sibling's path.
                double g[4];
                for (int k = 0; k < 4; ++k) g[k] = n.grad[i * 4 + k];
                // Pinned x2/y2 reroute through the sibling first, then the
                // clip saturation zeroes whatever landed on a clipped coord.
                for (int k : {2, 3}) {
                    const auto flag = (*sat)[static_cast<std::size_t>(i * 4 + k)];
                    if (flag == 1) {
                        g[k] = 0.0;
                    } else if (flag == 2) {
                        g[k - 2] += g[k];  // d(x2)/d(x1) = 1 when pinned
                        g[k] = 0.0;
                    }
                }
                for (int k : {0, 1}) {
                    if ((*sat)[static_cast<std::size_t>(i * 4 + k)] == 1) g[k] = 0.0;
                }

                const bool dwc = (*dwclamped)[static_cast<std::size_t>(i * 2)] != 0;
                const bool dhc = (*dwclamped)[static_cast<std::size_t>(i * 2 + 1)] != 0;

                if (need_delta) {
                    // x1 = cx - w/2, x2 = cx + w/2 with cx = cxa + dx*wa, w = wa*e^dw
                    gd[i * 4 + 0] += (g[0] + g[2]) * wa;
                    gd[i * 4 + 1] += (g[1] + g[3]) * ha;
                    if (!dwc) gd[i * 4 + 2] += (-g[0] + g[2]) * 0.5 * w;
                    if (!dhc) gd[i * 4 + 3] += (-g[1] + g[3]) * 0.5 * h;
                }
                if (need_base) {
                    gb[i * 4 + 0] += g[0] * (0.5 - dx + 0.5 * ew) + g[2] * (0.5 - dx - 0.5 * ew);
                    gb[i * 4 + 2] += g[0] * (0.5 + dx - 0.5 * ew) + g[2] * (0.5 + dx + 0.5 * ew);
                    gb[i * 4 + 1] += g[1] * (0.5 - dy + 0.5 * eh) + g[3] * (0.5 - dy - 0.5 * eh);
                    gb[i * 4 + 3] += g[1] * (0.5 + dy - 0.5 * eh) + g[3] * (0.5 + dy + 0.5 * eh);
                }
            }
        };
    });
}

Var iou_loss_rows(const Var& pred, const Tensor& gt) {
    check_rows4(pred, "iou_loss_rows");
    if (!pred.val().same_shape(gt)) {
        throw ShapeError("iou_loss_rows: pred " + pred.val().shape_str() + " vs gt " + gt.shape_str());
    }
    const std::int64_t N = pred.val().dim(0);
    Tensor out({std::max<std::int64_t>(N, 1)});
    auto gtCopy = std::make_shared<Tensor>(gt);
    for (std::int64_t i = 0; i < N; ++i) {
        const Box p{pred.val()[i * 4], pred.val()[i * 4 + 1], pred.val()[i * 4 + 2],
                    pred.val()[i * 4 + 3]};
        const Box g{gt[i * 4], gt[i * 4 + 1], gt[i * 4 + 2], gt[i * 4 + 3]};
        if (p.area() <= 0.0) {
            out[i] = 1.0;  // degenerate guard: loss 1, zero gradient
        } else {
            out[i] = 1.0 - iou(p, g);
        }
    }
    return make_op(std::move(out), {pred}, [pred, gtCopy, N](Node& n) {
        n.backward = [&n, pred, gtCopy, N]() {
            double* gp = pred.node()->ensure_grad().data();
            for (std::int64_t i = 0; i < N; ++i) {
                const double go = n.grad[i];
                if (go == 0.0) continue;
                const double px1 = pred.val()[i * 4], py1 = pred.val()[i * 4 + 1];
                const double px2 = pred.val()[i * 4 + 2], py2 = pred.val()[i * 4 + 3];
                const double gx1 = (*gtCopy)[i * 4], gy1 = (*gtCopy)[i * 4 + 1];
                const double gx2 = (*gtCopy)[i * 4 + 2], gy2 = (*gtCopy)[i * 4 + 3];
                const double pw = px2 - px1, ph = py2 - py1;
                if (pw <= 0.0 || ph <= 0.0) continue;
                const double iw = std::min(px2, gx2) - std::max(px1, gx1);
                const double ih = std::min(py2, gy2) - std::max(py1, gy1);
                const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
                const double ga = (gx2 - gx1) * (gy2 - gy1);
                const double uni = pw * ph + ga - inter;
                if (uni <= 0.0) continue;

                // d(inter)/d(pred coords)
                double di[4] = {0, 0, 0, 0};
                if (inter > 0.0) {
                    if (px1 > gx1) di[0] = -ih;
                    if (py1 > gy1) di[1] = -iw;
                    if (px2 < gx2) di[2] = ih;
                    if (py2 < gy2) di[3] = iw;
                }
                // d(pred area)/d(pred coords)
                const double da[4] = {-ph, -pw, ph, pw};
                const double inv_u = 1.0 / uni;
                for (int k = 0; k < 4; ++k) {
                    const double du = da[k] - di[k];
                    const double diou = (di[k] * uni - inter * du) * inv_u * inv_u;
                    gp[i * 4 + k] += go * (-diou);
                }
            }
        };
    });
}

Var bce_with_logits_mean(const Var& logits, const Tensor& labels) {
    if (logits.val().numel() != labels.numel()) {
        throw ShapeError("bce_with_logits_mean: size mismatch");
    }
    const std::int64_t N = logits.val().numel();
    if (N == 0) throw ShapeError("bce_with_logits_mean: empty input");
    double acc = 0.0;
    for (std::int64_t i = 0; i < N; ++i) {
        const double z = logits.val()[i], y = labels[i];
        acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(N);
    auto labCopy = std::make_shared<Tensor>(labels);
    return make_op(std::move(out), {logits}, [logits, labCopy, N](Node& n) {
        n.backward = [&n, logits, labCopy, N]() {
            double* g = logits.node()->ensure_grad().data();
            const double scale = n.grad[0] / static_cast<double>(N);
            for (std::int64_t i = 0; i < N; ++i) {
                const double z = logits.val()[i];
                const double s = 1.0 / (1.0 + std::exp(-z));
                g[i] += scale * (s - (*labCopy)[i]);
            }
        };
    });
}

Var masked_ce_rows(const Var& logits, const std::vector<std::int64_t>& active,
                   const std::vector<std::int64_t>& labels,
                   const std::vector<std::int64_t>& rows) {
    const auto& s = logits.val().shape();
    if (s.size() != 2) throw ShapeError("masked_ce_rows: logits must be 2-D");
    if (labels.size() != static_cast<std::size_t>(s[0])) {
        throw ShapeError("masked_ce_rows: labels length mismatch");
    }
    if (active.empty()) throw ShapeError("masked_ce_rows: empty active set");
    if (rows.empty()) throw ShapeError("masked_ce_rows: empty row subset");
    const std::int64_t K = s[1];
    for (std::int64_t c : active) {
        if (c < 0 || c >= K) throw ShapeError("masked_ce_rows: active column out of range");
    }

    const std::int64_t R = static_cast<std::int64_t>(rows.size());
    Tensor out({R});
    for (std::int64_t ri = 0; ri < R; ++ri) {
        const std::int64_t i = rows[static_cast<std::size_t>(ri)];
        const std::int64_t label = labels[static_cast<std::size_t>(i)];
        bool label_active = false;
        double m = -1e300;
        for (std::int64_t c : active) {
            m = std::max(m, logits.val()[i * K + c]);
            label_active = label_active || c == label;
        }
        if (!label_active) {
            throw DataError("masked_ce_rows: label node " + std::to_string(label) +
                            " not in the active softmax support");
        }
        double lse = 0.0;
        for (std::int64_t c : active) lse += std::exp(logits.val()[i * K + c] - m);
        out[ri] = m + std::log(lse) - logits.val()[i * K + label];
    }
    auto activeCopy = std::make_shared<std::vector<std::int64_t>>(active);
    auto labelCopy = std::make_shared<std::vector<std::int64_t>>(labels);
    auto rowCopy = std::make_shared<std::vector<std::int64_t>>(rows);
    return make_op(std::move(out), {logits}, [logits, activeCopy, labelCopy, rowCopy, K](Node& n) {
        n.backward = [&n, logits, activeCopy, labelCopy, rowCopy, K]() {
            double* g = logits.node()->ensure_grad().data();
            for (std::size_t ri = 0; ri < rowCopy->size(); ++ri) {
                const double go = n.grad[static_cast<std::int64_t>(ri)];
                if (go == 0.0) continue;
                const std::int64_t i = (*rowCopy)[ri];
                const std::int64_t label = (*labelCopy)[static_cast<std::size_t>(i)];
                double m = -1e300;
                for (std::int64_t c : *activeCopy) m = std::max(m, logits.val()[i * K + c]);
                double z = 0.0;
                for (std::int64_t c : *activeCopy) z += std::exp(logits.val()[i * K + c] - m);
                for (std::int64_t c : *activeCopy) {
                    const double p = std::exp(logits.val()[i * K + c] - m) / z;
                    g[i * K + c] += go * (p - (c == label ? 1.0 : 0.0));
                }
            }
        };
    });
}

Var l1_mean_cols(const Var& logits, const std::vector<std::int64_t>& cols) {
    const auto& s = logits.val().shape();
    if (s.size() != 2) throw ShapeError("l1_mean_cols: logits must be 2-D");
    if (cols.empty()) throw ShapeError("l1_mean_cols: empty column set");
    const std::int64_t N = s[0], K = s[1];
    double acc = 0.0;
    for (std::int64_t i = 0; i < N; ++i) {
        for (std::int64_t c : cols) acc += std::abs(logits.val()[i * K + c]);
    }
    const double denom = static_cast<double>(N) * static_cast<double>(cols.size());
    Tensor out({1});
    out[0] = acc / denom;
    auto colCopy = std::make_shared<std::vector<std::int64_t>>(cols);
    return make_op(std::move(out), {logits}, [logits, colCopy, N, K, denom](Node& n) {
        n.backward = [&n, logits, colCopy, N, K, denom]() {
            double* g = logits.node()->ensure_grad().data();
            const double scale = n.grad[0] / denom;
            for (std::int64_t i = 0; i < N; ++i) {
                for (std::int64_t c : *colCopy) {
                    const double v = logits.val()[i * K + c];
                    if (v > 0.0) {
                        g[i * K + c] += scale;
                    } else if (v < 0.0) {
                        g[i * K + c] -= scale;
                    }
                }
            }
        };
    });
}

namespace {
std::atomic<std::uint64_t> g_zero_norm_count{0};
}

std::uint64_t cosine_zero_norm_count() { return g_zero_norm_count.load(); }
void reset_cosine_zero_norm_count() { g_zero_norm_count.store(0); }

Var cosine_logits(const Var& features, const Var& weights, double scale) {
    const auto& fs = features.val().shape();
    const auto& ws = weights.val().shape();
    if (fs.size() != 2 || ws.size() != 2 || fs[1] != ws[1]) {
        throw ShapeError("cosine_logits: features " + features.val().shape_str() + " vs weights " +
                         weights.val().shape_str());
    }
    constexpr double kNormFloor = 1e-8;
    const std::int64_t N = fs[0], D = fs[1], M = ws[0];

    auto fnorm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N));
    auto wnorm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(M));
    auto ffloored = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(N), 0);
    auto wfloored = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(M), 0);
    for (std::int64_t i = 0; i < N; ++i) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < D; ++k) {
            const double v = features.val()[i * D + k];
            acc += v * v;
        }
        double nrm = std::sqrt(acc);
        if (nrm < kNormFloor) {
            nrm = kNormFloor;
            (*ffloored)[static_cast<std::size_t>(i)] = 1;
            g_zero_norm_count.fetch_add(1);
        }
        (*fnorm)[static_cast<std::size_t>(i)] = nrm;
    }
    for (std::int64_t j = 0; j < M; ++j) {
        double acc = 0.0;
        for (std::int64_t k = 0; k < D; ++k) {
            const double v = weights.val()[j * D + k];
            acc += v * v;
        }
        double nrm = std::sqrt(acc);
        if (nrm < kNormFloor) {
            nrm = kNormFloor;
            (*wfloored)[static_cast<std::size_t>(j)] = 1;
            g_zero_norm_count.fetch_add(1);
        }
        (*wnorm)[static_cast<std::size_t>(j)] = nrm;
    }

    Tensor out({N, M});
    for (std::int64_t i = 0; i < N; ++i) {
        for (std::int64_t j = 0; j < M; ++j) {
            double dot = 0.0;
            for (std::int64_t k = 0; k < D; ++k) {
                dot += features.val()[i * D + k] * weights.val()[j * D + k];
            }
            out[i * M + j] = scale * dot /
                             ((*fnorm)[static_cast<std::size_t>(i)] * (*wnorm)[static_cast<std::size_t>(j)]);
        }
    }
    return make_op(std::move(out), {features, weights},
                   [features, weights, scale, fnorm, wnorm, ffloored, wfloored, N, D, M](Node& n) {
        n.backward = [&n, features, weights, scale, fnorm, wnorm, ffloored, wfloored, N, D, M]() {
            const bool need_f = features.node()->requires_grad;
            const bool need_w = weights.node()->requires_grad;
            double* gf = need_f ? features.node()->ensure_grad().data() : nullptr;
            double* gw = need_w ? weights.node()->ensure_grad().data() : nullptr;
            for (std::int64_t i = 0; i < N; ++i) {
                const double nf = (*fnorm)[static_cast<std::size_t>(i)];
                const bool ff = (*ffloored)[static_cast<std::size_t>(i)] != 0;
                for (std::int64_t j = 0; j < M; ++j) {
                    const double go = n.grad[i * M + j];
                    if (go == 0.0) continue;
                    const double nw = (*wnorm)[static_cast<std::size_t>(j)];
                    const bool wf = (*wfloored)[static_cast<std::size_t>(j)] != 0;
                    const double logit = n.value[i * M + j];  // s * cos
                    const double inv = scale / (nf * nw);
                    if (need_f && !ff) {
                        for (std::int64_t k = 0; k < D; ++k) {
                            const double fk = features.val()[i * D + k];
                            const double wk = weights.val()[j * D + k];
                            gf[i * D + k] += go * (inv * wk - logit * fk / (nf * nf));
                        }
                    }
                    if (need_w && !wf) {
                        for (std::int64_t k = 0; k < D; ++k) {
                            const double fk = features.val()[i * D + k];
                            const double wk = weights.val()[j * D + k];
                            gw[j * D + k] += go * (inv * fk - logit * wk / (nw * nw));
                        }
                    }
                }
            }
        };
    });
}

Var smooth_l1_rows_mean(const Var& pred, const Tensor& target) {
    if (!pred.val().same_shape(target)) {
        throw ShapeError("smooth_l1_rows_mean: shape mismatch");
    }
    const auto& s = pred.val().shape();
    if (s.size() != 2) throw ShapeError("smooth_l1_rows_mean: expects 2-D input");
    const std::int64_t N = s[0], D = s[1];
    double acc = 0.0;
    for (std::int64_t i = 0; i < N * D; ++i) {
        const double d = pred.val()[i] - target[i];
        acc += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
    }
    Tensor out({1});
    out[0] = acc / static_cast<double>(N);
    auto tgt = std::make_shared<Tensor>(target);
    return make_op(std::move(out), {pred}, [pred, tgt, N, D](Node& n) {
        n.backward = [&n, pred, tgt, N, D]() {
            double* g = pred.node()->ensure_grad().data();
            const double scale = n.grad[0] / static_cast<double>(N);
            for (std::int64_t i = 0; i < N * D; ++i) {
                const double d = pred.val()[i] - (*tgt)[i];
                g[i] += scale * (std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0));
            }
        };
    });
}

Var concat_vecs(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_vecs: empty part list");
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.val().rank() != 1) throw ShapeError("concat_vecs: expects 1-D parts");
        total += p.val().numel();
    }
    Tensor out({total});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.val().data(), p.val().numel(), out.data() + off);
        off += p.val().numel();
    }
    return make_op(std::move(out), parts, [parts](Node& n) {
        n.backward = [&n, parts]() {
            std::int64_t off = 0;
            for (const auto& p : parts) {
                const std::int64_t len = p.val().numel();
                if (p.node()->requires_grad) {
                    double* g = p.node()->ensure_grad().data();
                    for (std::int64_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
                }
                off += len;
            }
        };
    });
}

}  // namespace fsdet::nn
