#pragma once

#include <torch/torch.h>

namespace rsam {

/// Splits B×C×H×W images into non-overlapping p×p patches.
///
/// Returns B×N×(C·p·p) with patches in row-major grid order and each patch
/// flattened as (channel, row, column). Throws ShapeError when H or W is not
/// divisible by p.
torch::Tensor patchify(const torch::Tensor& images, int64_t patch_size);

/// B×N×D tokens on a grid_h×grid_w lattice -> B×D×grid_h×grid_w.
torch::Tensor tokens_to_spatial(const torch::Tensor& tokens, int64_t grid_h, int64_t grid_w);

/// B×D×h×w -> B×(h·w)×D, row-major.
torch::Tensor spatial_to_tokens(const torch::Tensor& spatial);

/// Accepts C×H×W or B×C×H×W; returns a 4-D view.
torch::Tensor as_batch(const torch::Tensor& images);

}  // namespace rsam
