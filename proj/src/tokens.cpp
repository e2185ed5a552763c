#include "rsam/tokens.hpp"

#include "rsam/errors.hpp"

namespace rsam {

torch::Tensor as_batch(const torch::Tensor& images) {
  if (images.dim() == 3) return images.unsqueeze(0);
  if (images.dim() == 4) return images;
  throw ShapeError("expected C×H×W or B×C×H×W image, got " + std::to_string(images.dim()) +
                   " dims");
}

torch::Tensor patchify(const torch::Tensor& images, int64_t patch_size) {
  if (patch_size < 1) throw ShapeError("patch size must be positive");
  const auto x = as_batch(images);
  const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (h % patch_size != 0 || w % patch_size != 0) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by patch size " + std::to_string(patch_size));
  }
  const int64_t gh = h / patch_size, gw = w / patch_size;
  // B, C, gh, p, gw, p -> B, gh, gw, C, p, p
  return x.reshape({b, c, gh, patch_size, gw, patch_size})
      .permute({0, 2, 4, 1, 3, 5})
      .reshape({b, gh * gw, c * patch_size * patch_size});
}

torch::Tensor tokens_to_spatial(const torch::Tensor& tokens, int64_t grid_h, int64_t grid_w) {
  if (tokens.dim() != 3 || tokens.size(1) != grid_h * grid_w) {
    throw ShapeError("token grid does not match a " + std::to_string(grid_h) + "x" +
                     std::to_string(grid_w) + " lattice");
  }
  return tokens.transpose(1, 2).reshape({tokens.size(0), tokens.size(2), grid_h, grid_w});
}

torch::Tensor spatial_to_tokens(const torch::Tensor& spatial) {
  if (spatial.dim() != 4) throw ShapeError("expected B×D×h×w feature map");
  return spatial.flatten(2).transpose(1, 2);
}

}  // namespace rsam
