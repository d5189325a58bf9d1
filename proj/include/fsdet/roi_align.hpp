#pragma once

#include <vector>

#include "fsdet/boxes.hpp"
#include "fsdet/nn_ops.hpp"

namespace fsdet::nn {

// Average RoI align: each of the output_size x output_size bins averages a
// fixed 2x2 grid of bilinear samples. Box coordinates are image-space and
// mapped to the feature grid by spatial_scale with aligned half-pixel
// centers (feature coord = image coord * scale - 0.5); sample coordinates
// are clamped to the feature extent, so constant planes pool to the constant
// for any box. Differentiable w.r.t. the features.
Var roi_align(const Var& features, const std::vector<Box>& boxes, double spatial_scale,
              std::int64_t output_size);

}  // namespace fsdet::nn
