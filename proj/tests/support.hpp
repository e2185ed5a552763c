#pragma once

// Independent reference implementations and fixtures shared by the tests.
// Nothing here calls into the library code it is used to check.

#include <torch/torch.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <unistd.h>

#include "rsam/model.hpp"

namespace rsam::test {

/// Zeroing rule of the frequency mask, evaluated straight from its definition.
inline bool mask_zeroes(int64_t i, int64_t j, int64_t h, int64_t w, double tau) {
  const double di = static_cast<double>(i) - static_cast<double>(h) / 2.0;
  const double dj = static_cast<double>(j) - static_cast<double>(w) / 2.0;
  return 4.0 * std::abs(di * dj) / static_cast<double>(h * w) <= tau;
}

/// High-frequency component of one H×W plane by explicit DFT sums.
///
/// Unshifted frequency u sits at (u + H/2) mod H in the centred spectrum
/// (integer halving, matching the usual shift convention), so the mask is
/// looked up there.
inline std::vector<double> hfc_by_dft(const std::vector<double>& x, int64_t h, int64_t w, double keep_tau,
                                      bool low_pass = false) {
  using cd = std::complex<double>;
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<cd> spectrum(h * w);
  for (int64_t u = 0; u < h; ++u) {
    for (int64_t v = 0; v < w; ++v) {
      cd acc = 0.0;
      for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
          const double angle = -two_pi * (static_cast<double>(u * r) / h + static_cast<double>(v * c) / w);
          acc += x[r * w + c] * cd(std::cos(angle), std::sin(angle));
        }
      }
      const bool zeroed = mask_zeroes((u + h / 2) % h, (v + w / 2) % w, h, w, keep_tau);
      spectrum[u * w + v] = (zeroed != low_pass) ? cd(0.0) : acc;
    }
  }
  std::vector<double> out(h * w);
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      cd acc = 0.0;
      for (int64_t u = 0; u < h; ++u) {
        for (int64_t v = 0; v < w; ++v) {
          const double angle = two_pi * (static_cast<double>(u * r) / h + static_cast<double>(v * c) / w);
          acc += spectrum[u * w + v] * cd(std::cos(angle), std::sin(angle));
        }
      }
      out[r * w + c] = acc.real() / static_cast<double>(h * w);
    }
  }
  return out;
}

inline std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous().flatten();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

/// A fresh, empty scratch directory unique to this process.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("rsam_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// depth 2, D 64, patch 8, 64 px: the toy model used for training checks.
inline ModelConfig toy_config(uint64_t seed = 0) {
  ModelConfig c;
  c.vit.image_size = 64;
  c.vit.patch_size = 8;
  c.vit.depth = 2;
  c.vit.embed_dim = 64;
  c.vit.heads = 4;
  c.vit.neck_dim = 32;
  c.vit.adapter_bottleneck = 16;
  c.decoder.transformer_dim = 32;
  c.seed = seed;
  return c.resolved();
}

/// depth 1, D 8 on 16 px images: small enough for finite differences.
inline ModelConfig tiny_config(uint64_t seed = 0) {
  ModelConfig c;
  c.vit.image_size = 16;
  c.vit.patch_size = 4;
  c.vit.depth = 1;
  c.vit.embed_dim = 8;
  c.vit.heads = 2;
  c.vit.neck_dim = 8;
  c.vit.adapter_bottleneck = 4;
  c.prompt.tune_dim = 2;
  c.decoder.transformer_dim = 8;
  c.decoder.heads = 2;
  c.decoder.mlp_dim = 16;
  c.decoder.depth = 1;
  c.seed = seed;
  return c.resolved();
}

/// Adds seeded noise to every parameter so that zero-initialised branches
/// carry signal and gradients.
inline void perturb_parameters(torch::nn::Module& module, uint64_t seed, double scale) {
  torch::NoGradGuard guard;
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  for (auto& p : module.parameters()) {
    p.add_(torch::randn(p.sizes(), gen, torch::TensorOptions().dtype(p.scalar_type())) * scale);
  }
}

inline torch::Tensor random_images(int64_t batch, int64_t size, uint64_t seed,
                                   torch::Dtype dtype = torch::kFloat32) {
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  return torch::rand({batch, 3, size, size}, gen, torch::TensorOptions().dtype(dtype));
}

}  // namespace rsam::test
