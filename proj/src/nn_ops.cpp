#include "fsdet/nn_ops.hpp"

#include <algorithm>
#include <cmath>

namespace fsdet::nn {

using ad::make_op;
using ad::Node;

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val())) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.val().shape_str() + " vs " +
                         b.val().shape_str());
    }
}

}  // namespace

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.val();
    out += b.val();
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        n.backward = [&n, a, b]() {
            if (a.node()->requires_grad) a.node()->ensure_grad() += n.grad;
            if (b.node()->requires_grad) b.node()->ensure_grad() += n.grad;
        };
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        n.backward = [&n, a, b]() {
            if (a.node()->requires_grad) a.node()->ensure_grad() += n.grad;
            if (b.node()->requires_grad) {
                Tensor& g = b.node()->ensure_grad();
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
            }
        };
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        n.backward = [&n, a, b]() {
            if (a.node()->requires_grad) {
                Tensor& g = a.node()->ensure_grad();
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b.val()[i];
            }
            if (b.node()->requires_grad) {
                Tensor& g = b.node()->ensure_grad();
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a.val()[i];
            }
        };
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.val();
    out *= s;
    return make_op(std::move(out), {a}, [a, s](Node& n) {
        n.backward = [&n, a, s]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * n.grad[i];
        };
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return make_op(std::move(out), {a}, [a](Node& n) {
        n.backward = [&n, a]() { a.node()->ensure_grad() += n.grad; };
    });
}

Var relu(const Var& a) {
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, out[i]);
    return make_op(std::move(out), {a}, [a](Node& n) {
        n.backward = [&n, a]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                if (a.val()[i] > 0.0) g[i] += n.grad[i];
            }
        };
    });
}

Var sigmoid(const Var& a) {
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    return make_op(std::move(out), {a}, [a](Node& n) {
        n.backward = [&n, a]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                const double y = n.value[i];
                g[i] += n.grad[i] * y * (1.0 - y);
            }
        };
    });
}

Var exp_op(const Var& a) {
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    return make_op(std::move(out), {a}, [a](Node& n) {
        n.backward = [&n, a]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * n.value[i];
        };
    });
}

Var div(const Var& a, const Var& b) {
    check_same_shape(a, b, "div");
    Tensor out = a.val();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= b.val()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        n.backward = [&n, a, b]() {
            if (a.node()->requires_grad) {
                Tensor& g = a.node()->ensure_grad();
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / b.val()[i];
            }
            if (b.node()->requires_grad) {
                Tensor& g = b.node()->ensure_grad();
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    g[i] -= n.grad[i] * a.val()[i] / (b.val()[i] * b.val()[i]);
                }
            }
        };
    });
}

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
    if (shape_numel(shape) != a.val().numel()) {
        throw ShapeError("reshape: element count mismatch");
    }
    Tensor out(std::move(shape), a.val().vec());
    return make_op(std::move(out), {a}, [a](Node& n) {
        n.backward = [&n, a]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        };
    });
}

Var mul_gate(const Var& x, const Var& gate) {
    const auto& xs = x.val().shape();
    const auto& gs = gate.val().shape();
    if (xs.size() != 4 || gs.size() != 4) throw ShapeError("mul_gate: expects 4-D tensors");
    const std::int64_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const bool channel_gate = gs[0] == B && gs[1] == C && gs[2] == 1 && gs[3] == 1;
    const bool spatial_gate = gs[0] == B && gs[1] == 1 && gs[2] == H && gs[3] == W;
    const bool shared_map = gs[0] == 1 && gs[1] == 1 && gs[2] == H && gs[3] == W;
    if (!channel_gate && !spatial_gate && !shared_map) {
        throw ShapeError("mul_gate: gate shape " + gate.val().shape_str() +
                         " does not broadcast against " + x.val().shape_str());
    }
    Tensor out(x.val().shape());
    const double* xp = x.val().data();
    const double* gp = gate.val().data();
    double* op = out.data();
    const std::int64_t HW = H * W;
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xrow = xp + (b * C + c) * HW;
            double* orow = op + (b * C + c) * HW;
            if (channel_gate) {
                const double g = gp[b * C + c];
                for (std::int64_t i = 0; i < HW; ++i) orow[i] = xrow[i] * g;
            } else {
                const double* grow = gp + (spatial_gate ? b * HW : 0);
                for (std::int64_t i = 0; i < HW; ++i) orow[i] = xrow[i] * grow[i];
            }
        }
    }
    return make_op(std::move(out), {x, gate},
                   [x, gate, B, C, HW, channel_gate, spatial_gate](Node& n) {
        n.backward = [&n, x, gate, B, C, HW, channel_gate, spatial_gate]() {
            const double* xp = x.val().data();
            const double* gp = gate.val().data();
            if (x.node()->requires_grad) {
                double* gx = x.node()->ensure_grad().data();
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t base = (b * C + c) * HW;
                        if (channel_gate) {
                            const double g = gp[b * C + c];
                            for (std::int64_t i = 0; i < HW; ++i) gx[base + i] += n.grad[base + i] * g;
                        } else {
                            const double* grow = gp + (spatial_gate ? b * HW : 0);
                            for (std::int64_t i = 0; i < HW; ++i) gx[base + i] += n.grad[base + i] * grow[i];
                        }
                    }
                }
            }
            if (gate.node()->requires_grad) {
                double* gg = gate.node()->ensure_grad().data();
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t base = (b * C + c) * HW;
                        if (channel_gate) {
                            double acc = 0.0;
                            for (std::int64_t i = 0; i < HW; ++i) acc += n.grad[base + i] * xp[base + i];
                            gg[b * C + c] += acc;
                        } else {
                            double* grow = gg + (spatial_gate ? b * HW : 0);
                            for (std::int64_t i = 0; i < HW; ++i) grow[i] += n.grad[base + i] * xp[base + i];
                        }
                    }
                }
            }
        };
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    const auto& xs = x.val().shape();
    const auto& ws = w.val().shape();
    if (xs.size() != 2 || ws.size() != 2) throw ShapeError("linear: expects 2-D tensors");
    if (xs[1] != ws[1]) {
        throw ShapeError("linear: feature dim mismatch, x " + x.val().shape_str() + " vs w " +
                         w.val().shape_str());
    }
    const std::int64_t N = xs[0], D = xs[1], M = ws[0];
    Tensor out({N, M});
    for (std::int64_t i = 0; i < N; ++i) {
        const double* xr = x.val().data() + i * D;
        double* orow = out.data() + i * M;
        for (std::int64_t j = 0; j < M; ++j) {
            const double* wr = w.val().data() + j * D;
            double acc = bias.defined() ? bias.val()[j] : 0.0;
            for (std::int64_t k = 0; k < D; ++k) acc += xr[k] * wr[k];
            orow[j] = acc;
        }
    }
    std::vector<Var> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op(std::move(out), std::move(parents), [x, w, bias, N, D, M](Node& n) {
        n.backward = [&n, x, w, bias, N, D, M]() {
            if (x.node()->requires_grad) {
                double* gx = x.node()->ensure_grad().data();
                for (std::int64_t i = 0; i < N; ++i) {
                    for (std::int64_t j = 0; j < M; ++j) {
                        const double g = n.grad[i * M + j];
                        const double* wr = w.val().data() + j * D;
                        double* gxr = gx + i * D;
                        for (std::int64_t k = 0; k < D; ++k) gxr[k] += g * wr[k];
                    }
                }
            }
            if (w.node()->requires_grad) {
                double* gw = w.node()->ensure_grad().data();
                for (std::int64_t i = 0; i < N; ++i) {
                    const double* xr = x.val().data() + i * D;
                    for (std::int64_t j = 0; j < M; ++j) {
                        const double g = n.grad[i * M + j];
                        double* gwr = gw + j * D;
                        for (std::int64_t k = 0; k < D; ++k) gwr[k] += g * xr[k];
                    }
                }
            }
            if (bias.defined() && bias.node()->requires_grad) {
                double* gb = bias.node()->ensure_grad().data();
                for (std::int64_t i = 0; i < N; ++i) {
                    for (std::int64_t j = 0; j < M; ++j) gb[j] += n.grad[i * M + j];
                }
            }
        };
    });
}

Var global_avg_pool(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("global_avg_pool: expects 4-D input");
    const std::int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({B, C});
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* p = x.val().data() + bc * HW;
        double acc = 0.0;
        for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
        out[bc] = acc / static_cast<double>(HW);
    }
    return make_op(std::move(out), {x}, [x, B, C, HW](Node& n) {
        n.backward = [&n, x, B, C, HW]() {
            double* gx = x.node()->ensure_grad().data();
            const double inv = 1.0 / static_cast<double>(HW);
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                const double g = n.grad[bc] * inv;
                double* row = gx + bc * HW;
                for (std::int64_t i = 0; i < HW; ++i) row[i] += g;
            }
        };
    });
}

Var global_max_pool(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("global_max_pool: expects 4-D input");
    const std::int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({B, C});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B * C));
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* p = x.val().data() + bc * HW;
        std::int64_t best = 0;
        for (std::int64_t i = 1; i < HW; ++i) {
            if (p[i] > p[best]) best = i;  // first max wins on ties
        }
        (*argmax)[static_cast<std::size_t>(bc)] = best;
        out[bc] = p[best];
    }
    return make_op(std::move(out), {x}, [x, argmax, B, C, HW](Node& n) {
        n.backward = [&n, x, argmax, B, C, HW]() {
            double* gx = x.node()->ensure_grad().data();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                gx[bc * HW + (*argmax)[static_cast<std::size_t>(bc)]] += n.grad[bc];
            }
        };
    });
}

Var channel_mean(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("channel_mean: expects 4-D input");
    const std::int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({B, 1, s[2], s[3]});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < HW; ++i) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < C; ++c) acc += x.val()[(b * C + c) * HW + i];
            out[b * HW + i] = acc / static_cast<double>(C);
        }
    }
    return make_op(std::move(out), {x}, [x, B, C, HW](Node& n) {
        n.backward = [&n, x, B, C, HW]() {
            double* gx = x.node()->ensure_grad().data();
            const double inv = 1.0 / static_cast<double>(C);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t i = 0; i < HW; ++i) {
                    const double g = n.grad[b * HW + i] * inv;
                    for (std::int64_t c = 0; c < C; ++c) gx[(b * C + c) * HW + i] += g;
                }
            }
        };
    });
}

Var channel_max(const Var& x) {
    const auto& s = x.val().shape();
    if (s.size() != 4) throw ShapeError("channel_max: expects 4-D input");
    const std::int64_t B = s[0], C = s[1], HW = s[2] * s[3];
    Tensor out({B, 1, s[2], s[3]});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B * HW));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < HW; ++i) {
            std::int64_t best = 0;
            double bv = x.val()[(b * C) * HW + i];
            for (std::int64_t c = 1; c < C; ++c) {
                const double v = x.val()[(b * C + c) * HW + i];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            (*argmax)[static_cast<std::size_t>(b * HW + i)] = best;
            out[b * HW + i] = bv;
        }
    }
    return make_op(std::move(out), {x}, [x, argmax, B, C, HW](Node& n) {
        n.backward = [&n, x, argmax, B, C, HW]() {
            double* gx = x.node()->ensure_grad().data();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t i = 0; i < HW; ++i) {
                    const std::int64_t c = (*argmax)[static_cast<std::size_t>(b * HW + i)];
                    gx[(b * C + c) * HW + i] += n.grad[b * HW + i];
                }
            }
        };
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const auto& as = a.val().shape();
    const auto& bs = b.val().shape();
    if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
        throw ShapeError("concat_channels: incompatible shapes " + a.val().shape_str() + " and " +
                         b.val().shape_str());
    }
    const std::int64_t B = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
    Tensor out({B, Ca + Cb, as[2], as[3]});
    for (std::int64_t bidx = 0; bidx < B; ++bidx) {
        std::copy_n(a.val().data() + bidx * Ca * HW, Ca * HW, out.data() + bidx * (Ca + Cb) * HW);
        std::copy_n(b.val().data() + bidx * Cb * HW, Cb * HW,
                    out.data() + bidx * (Ca + Cb) * HW + Ca * HW);
    }
    return make_op(std::move(out), {a, b}, [a, b, B, Ca, Cb, HW](Node& n) {
        n.backward = [&n, a, b, B, Ca, Cb, HW]() {
            if (a.node()->requires_grad) {
                double* ga = a.node()->ensure_grad().data();
                for (std::int64_t bi = 0; bi < B; ++bi) {
                    const double* g = n.grad.data() + bi * (Ca + Cb) * HW;
                    for (std::int64_t i = 0; i < Ca * HW; ++i) ga[bi * Ca * HW + i] += g[i];
                }
            }
            if (b.node()->requires_grad) {
                double* gb = b.node()->ensure_grad().data();
                for (std::int64_t bi = 0; bi < B; ++bi) {
                    const double* g = n.grad.data() + bi * (Ca + Cb) * HW + Ca * HW;
                    for (std::int64_t i = 0; i < Cb * HW; ++i) gb[bi * Cb * HW + i] += g[i];
                }
            }
        };
    });
}

Var sum(const Var& a) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.val().numel(); ++i) acc += a.val()[i];
    Tensor out({1});
    out[0] = acc;
    return make_op(std::move(out), {a}, [a](Node& n) {
        n.backward = [&n, a]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
        };
    });
}

Var mean(const Var& a) {
    const double inv = 1.0 / static_cast<double>(a.val().numel());
    return scale(sum(a), inv);
}

Var sum_squares(const Var& a) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.val().numel(); ++i) acc += a.val()[i] * a.val()[i];
    Tensor out({1});
    out[0] = acc;
    return make_op(std::move(out), {a}, [a](Node& n) {
        n.backward = [&n, a]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += 2.0 * a.val()[i] * n.grad[0];
        };
    });
}

Var weighted_sum(const Var& a, const Tensor& w) {
    if (a.val().numel() != w.numel()) throw ShapeError("weighted_sum: size mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.val().numel(); ++i) acc += a.val()[i] * w[i];
    Tensor out({1});
    out[0] = acc;
    auto wcopy = std::make_shared<Tensor>(w);
    return make_op(std::move(out), {a}, [a, wcopy](Node& n) {
        n.backward = [&n, a, wcopy]() {
            Tensor& g = a.node()->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += (*wcopy)[i] * n.grad[0];
        };
    });
}

Var add_scalars(const std::vector<Var>& terms) {
    if (terms.empty()) return Var::constant(Tensor({1}));
    double acc = 0.0;
    for (const auto& t : terms) {
        if (t.val().numel() != 1) throw ShapeError("add_scalars: non-scalar term");
        acc += t.val()[0];
    }
    Tensor out({1});
    out[0] = acc;
    return make_op(std::move(out), terms, [terms](Node& n) {
        n.backward = [&n, terms]() {
            for (const auto& t : terms) {
                if (t.node()->requires_grad) t.node()->ensure_grad()[0] += n.grad[0];
            }
        };
    });
}

Var gather_cells(const Var& x, const std::vector<CellIndex>& cells, std::int64_t count) {
    const auto& s = x.val().shape();
    if (s.size() != 4 || s[0] != 1) throw ShapeError("gather_cells: expects (1,C,H,W) input");
    const std::int64_t C = s[1], H = s[2], W = s[3];
    const std::int64_t N = static_cast<std::int64_t>(cells.size());
    Tensor out({N, count});
    for (std::int64_t i = 0; i < N; ++i) {
        const auto& cell = cells[static_cast<std::size_t>(i)];
        if (cell.channel_begin < 0 || cell.channel_begin + count > C || cell.y < 0 || cell.y >= H ||
            cell.x < 0 || cell.x >= W) {
            throw ShapeError("gather_cells: cell out of range");
        }
        for (std::int64_t k = 0; k < count; ++k) {
            out[i * count + k] = x.val()[((cell.channel_begin + k) * H + cell.y) * W + cell.x];
        }
    }
    auto cellsCopy = std::make_shared<std::vector<CellIndex>>(cells);
    return make_op(std::move(out), {x}, [x, cellsCopy, count, H, W](Node& n) {
        n.backward = [&n, x, cellsCopy, count, H, W]() {
            double* gx = x.node()->ensure_grad().data();
            for (std::size_t i = 0; i < cellsCopy->size(); ++i) {
                const auto& cell = (*cellsCopy)[i];
                for (std::int64_t k = 0; k < count; ++k) {
                    gx[((cell.channel_begin + k) * H + cell.y) * W + cell.x] +=
                        n.grad[static_cast<std::int64_t>(i) * count + k];
                }
            }
        };
    });
}

Var gather_rows(const Var& x, const std::vector<std::int64_t>& rows) {
    const auto& s = x.val().shape();
    if (s.size() != 2) throw ShapeError("gather_rows: expects 2-D input");
    const std::int64_t D = s[1];
    const std::int64_t M = static_cast<std::int64_t>(rows.size());
    Tensor out({std::max<std::int64_t>(M, 1), D});
    if (M == 0) throw ShapeError("gather_rows: empty row set");
    for (std::int64_t i = 0; i < M; ++i) {
        const std::int64_t r = rows[static_cast<std::size_t>(i)];
        if (r < 0 || r >= s[0]) throw ShapeError("gather_rows: row index out of range");
        std::copy_n(x.val().data() + r * D, D, out.data() + i * D);
    }
    auto rowsCopy = std::make_shared<std::vector<std::int64_t>>(rows);
    return make_op(std::move(out), {x}, [x, rowsCopy, D](Node& n) {
        n.backward = [&n, x, rowsCopy, D]() {
            double* gx = x.node()->ensure_grad().data();
            for (std::size_t i = 0; i < rowsCopy->size(); ++i) {
                const std::int64_t r = (*rowsCopy)[i];
                for (std::int64_t k = 0; k < D; ++k) {
                    gx[r * D + k] += n.grad[static_cast<std::int64_t>(i) * D + k];
                }
            }
        };
    });
}

}  // namespace fsdet::nn
