#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "fsdet/autodiff.hpp"

namespace fsdet::nn {

using ad::Var;

struct ConvSpec {
    std::int64_t kernel_size = 3;  // odd
    std::int64_t dilation = 1;     // r >= 1
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;

    std::int64_t receptive_field() const { return (kernel_size - 1) * dilation + 1; }
    void validate() const;
    std::int64_t out_size(std::int64_t in) const;
};

// ---- convolutions ----------------------------------------------------------

// Zero-padded 2-D convolution. x: (B,Cin,H,W), w: (Cout,Cin,k,k),
// bias: (Cout) or an undefined Var for none.
Var conv2d(const Var& x, const Var& w, const Var& bias, const ConvSpec& spec);

// Deformable convolution: every kernel tap samples the input at its nominal
// grid position plus a learned (dy,dx) offset, via bilinear interpolation
// that reads zero outside the image. offsets: (B, 2*k*k, OH, OW), channel
// 2*t is dy and 2*t+1 is dx for tap t = ky*k + kx.
Var deformable_conv2d(const Var& x, const Var& w, const Var& bias, const Var& offsets,
                      const ConvSpec& spec);

// ---- resampling and pooling ------------------------------------------------

// Integer-factor bilinear upsampling with half-pixel centers: output pixel
// (y,x) samples the input at ((y+0.5)/f - 0.5, (x+0.5)/f - 0.5) with edge
// clamping, so constant planes map to constant planes.
Var bilinear_upsample(const Var& x, std::int64_t factor);

Var global_avg_pool(const Var& x);  // (B,C,H,W) -> (B,C)
Var global_max_pool(const Var& x);  // (B,C,H,W) -> (B,C)

// Per-pixel mean/max over the channel axis: (B,C,H,W) -> (B,1,H,W).
Var channel_mean(const Var& x);
Var channel_max(const Var& x);

Var concat_channels(const Var& a, const Var& b);

// ---- elementwise and linear algebra ----------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp_op(const Var& a);
Var div(const Var& a, const Var& b);
Var reshape(const Var& a, std::vector<std::int64_t> shape);

// Gate multiplications with broadcasting: gate shape (B,C,1,1) or (B,1,H,W)
// against x of shape (B,C,H,W). Also accepts gate (1,1,H,W) shared over
// batch and channels (fusion weight maps).
Var mul_gate(const Var& x, const Var& gate);

// x: (N,D), w: (M,D), bias: (M) or undefined -> (N,M) with y = x w^T + b.
Var linear(const Var& x, const Var& w, const Var& bias);

// ---- reductions -------------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_squares(const Var& a);                     // scalar sum of squares
Var weighted_sum(const Var& a, const Tensor& w);   // scalar dot(a, w)
Var add_scalars(const std::vector<Var>& terms);    // scalar sum

// ---- gathers ----------------------------------------------------------------

struct CellIndex {
    std::int64_t channel_begin = 0;
    std::int64_t y = 0;
    std::int64_t x = 0;
};

// From x (1,C,H,W) gathers rows [channel_begin .. channel_begin+count) at a
// fixed spatial cell per entry -> (N, count).
Var gather_cells(const Var& x, const std::vector<CellIndex>& cells, std::int64_t count);

// Row subset of a (N,D) matrix -> (M,D).
Var gather_rows(const Var& x, const std::vector<std::int64_t>& rows);

}  // namespace fsdet::nn
