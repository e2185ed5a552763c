#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace rsam {

/// Line plot of a series (e.g. loss per epoch) written as PNG.
void plot_curve(const std::vector<double>& values, const std::string& title,
                const std::filesystem::path& path);

/// Bar chart, one bar per label.
void plot_bars(const std::vector<std::string>& labels, const std::vector<double>& values,
               const std::string& title, const std::filesystem::path& path);

/// Image | ground truth | prediction, side by side. `image` is 3×H×W in
/// [0, 1]; masks are H×W with non-zero foreground. `gt` may be undefined.
void save_overlay(const torch::Tensor& image, const torch::Tensor& gt, const torch::Tensor& pred,
                  const std::filesystem::path& path);

/// Writes an H×W binary mask as an 8-bit PNG with values {0, 255}.
void write_mask_png(const torch::Tensor& mask, const std::filesystem::path& path);

/// Reads a byte mask written by write_mask_png (or any {0,1}/{0,255} mask).
torch::Tensor read_mask_png(const std::filesystem::path& path);

}  // namespace rsam
