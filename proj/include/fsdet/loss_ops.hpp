#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fsdet/boxes.hpp"
#include "fsdet/nn_ops.hpp"

namespace fsdet::nn {

// Differentiable decode + clip over (N,4) row matrices [x1,y1,x2,y2] and
// deltas [dx,dy,dw,dh]. Mirrors fsdet::decode_box row by row; gradients pass
// through unclipped coordinates and vanish where the clip saturates.
Var decode_clip_boxes(const Var& base, const Var& deltas, double image_w, double image_h);

// Per-row IoU loss 1 - IoU(pred, gt) in [0,1]; gt rows are constants.
// Degenerate rows (non-positive pred or union area) contribute loss 1 with
// zero gradient.
Var iou_loss_rows(const Var& pred, const Tensor& gt);

// Mean binary cross-entropy with logits; labels in {0,1}.
Var bce_with_logits_mean(const Var& logits, const Tensor& labels);

// Per-row cross-entropy over the softmax restricted to active columns.
// labels[i] must be a member of `active`; rows selects a subset of logits'
// rows (all rows when empty is not allowed - caller guards emptiness).
Var masked_ce_rows(const Var& logits, const std::vector<std::int64_t>& active,
                   const std::vector<std::int64_t>& labels,
                   const std::vector<std::int64_t>& rows);

// Mean |logit| over all rows x selected columns (sparse activation term).
Var l1_mean_cols(const Var& logits, const std::vector<std::int64_t>& cols);

// Scaled cosine-similarity logits: s * <f_i, w_j> / (max(|f_i|,eps) * max(|w_j|,eps)).
// Vectors whose norm hits the 1e-8 floor produce the floored value and
// receive no gradient; each occurrence bumps the zero-norm debug counter.
Var cosine_logits(const Var& features, const Var& weights, double scale);
std::uint64_t cosine_zero_norm_count();
void reset_cosine_zero_norm_count();

// Smooth-L1 (Huber, delta=1) summed over coordinates, averaged over rows.
Var smooth_l1_rows_mean(const Var& pred, const Tensor& target);

// Concatenation of 1-D value vectors.
Var concat_vecs(const std::vector<Var>& parts);

}  // namespace fsdet::nn
