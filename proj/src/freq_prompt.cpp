#include "rsam/freq_prompt.hpp"

#include <cmath>
#include <string>

#include "rsam/errors.hpp"
#include "rsam/tokens.hpp"

namespace rsam {

namespace {

bool zeroed(int64_t i, int64_t j, int64_t h, int64_t w, double tau) {
  const double di = static_cast<double>(i) - static_cast<double>(h) / 2.0;
  const double dj = static_cast<double>(j) - static_cast<double>(w) / 2.0;
  return 4.0 * std::abs(di * dj) / (static_cast<double>(h) * static_cast<double>(w)) <= tau;
}

}  // namespace

bool HfcMask::passes(int64_t row, int64_t col) const {
  return grid[row][col].item<double>() != 0.0;
}

int64_t HfcMask::zero_count() const { return (grid == 0).sum().item<int64_t>(); }

HfcMask make_hfc_mask(int64_t height, int64_t width, double tau) {
  if (height < 2 || width < 2) {
    throw ParameterError("mask needs at least 2x2 pixels, got " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw ParameterError("mask ratio tau must lie in [0, 1], got " + std::to_string(tau));
  }
  auto grid = torch::ones({height, width}, torch::kFloat64);
  auto acc = grid.accessor<double, 2>();
  for (int64_t i = 0; i < height; ++i) {
    for (int64_t j = 0; j < width; ++j) {
      if (zeroed(i, j, height, width, tau)) acc[i][j] = 0.0;
    }
  }
  return HfcMask{height, width, tau, grid};
}

torch::Tensor apply_spectral_mask(const torch::Tensor& image, const torch::Tensor& mask) {
  if (image.dim() < 2) throw ShapeError("spectral masking needs at least 2 dims");
  const int64_t h = image.size(-2), w = image.size(-1);
  if (mask.dim() != 2 || mask.size(0) != h || mask.size(1) != w) {
    throw ShapeError("mask shape does not match image plane " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  if (!torch::isfinite(image).all().item<bool>()) {
    throw DataError("image contains non-finite values");
  }
  const std::vector<int64_t> dims{-2, -1};
  auto spectrum = torch::fft::fftshift(torch::fft::fft2(image), dims);
  spectrum = spectrum * mask.to(image.scalar_type());
  return torch::real(torch::fft::ifft2(torch::fft::ifftshift(spectrum, dims)));
}

torch::Tensor extract_hfc(const torch::Tensor& image, double tau) {
  if (image.dim() != 3 && image.dim() != 4) {
    throw ShapeError("expected C×H×W or B×C×H×W image");
  }
  const auto mask = make_hfc_mask(image.size(-2), image.size(-1), tau);
  return apply_spectral_mask(image, mask.grid);
}

void PromptGeneratorConfig::validate() const {
  if (embed_dim < 1) throw ConfigError("prompt generator embed_dim must be positive");
  if (tune_dim < 1 || tune_dim > embed_dim) {
    throw ConfigError("tune_dim must lie in [1, embed_dim], got " + std::to_string(tune_dim));
  }
  if (depth < 1) throw ConfigError("prompt generator depth must be >= 1");
  if (in_channels < 1 || patch_size < 1) {
    throw ConfigError("prompt generator needs positive channels and patch size");
  }
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
}

PromptGeneratorImpl::PromptGeneratorImpl(PromptGeneratorConfig config) : config_(config) {
  config_.validate();
  if (!config_.use_fpe && !config_.use_fhfc) {
    throw ConfigError("prompt generator needs at least one of the F_pe and F_hfc branches");
  }
  const auto d = config_.embed_dim, t = config_.tune_dim;
  if (config_.use_fpe) {
    embedding_tune = register_module("embedding_tune", torch::nn::Linear(d, t));
  }
  if (config_.use_fhfc) {
    const auto patch_dim = config_.in_channels * config_.patch_size * config_.patch_size;
    hfc_embed = register_module("hfc_embed", torch::nn::Linear(patch_dim, t));
  }
  tune = register_module("tune", torch::nn::ModuleList());
  for (int64_t i = 0; i < config_.depth; ++i) tune->push_back(torch::nn::Linear(t, t));
  up = register_module("up", torch::nn::Linear(t, d));
}

torch::Tensor PromptGeneratorImpl::tune_embedding(const torch::Tensor& fpe_raw) {
  if (!embedding_tune) throw ConfigError("embedding-feature branch is disabled");
  if (fpe_raw.dim() != 3 || fpe_raw.size(2) != config_.embed_dim) {
    throw ShapeError("embedding tokens must be B×N×" + std::to_string(config_.embed_dim));
  }
  return config_.fpe_scale * embedding_tune->forward(fpe_raw);
}

torch::Tensor PromptGeneratorImpl::embed_hfc(const torch::Tensor& hfc) {
  if (!hfc_embed) throw ConfigError("high-frequency branch is disabled");
  const auto batch = as_batch(hfc);
  if (batch.size(1) != config_.in_channels) {
    throw ShapeError("HFC image has " + std::to_string(batch.size(1)) + " channels, expected " +
                     std::to_string(config_.in_channels));
  }
  return hfc_embed->forward(patchify(batch, config_.patch_size));
}

torch::Tensor PromptGeneratorImpl::generate_prompt(const torch::Tensor& fpe,
                                                   const torch::Tensor& fhfc,
                                                   int64_t layer) {
  if (layer < 0 || layer >= config_.depth) {
    throw ParameterError("prompt layer " + std::to_string(layer) + " outside [0, " +
                         std::to_string(config_.depth) + ")");
  }
  if (fpe.sizes() != fhfc.sizes() || fpe.dim() != 3 || fpe.size(2) != config_.tune_dim) {
    throw ShapeError("F_pe and F_hfc must share shape B×N×" + std::to_string(config_.tune_dim));
  }
  auto* tune_layer = tune[static_cast<size_t>(layer)]->as<torch::nn::LinearImpl>();
  return up->forward(torch::gelu(tune_layer->forward(fpe + fhfc)));
}

std::vector<torch::Tensor> PromptGeneratorImpl::forward(const torch::Tensor& patch_tokens,
                                                        const torch::Tensor& hfc) {
  torch::Tensor fpe, fhfc;
  if (config_.use_fpe) fpe = tune_embedding(patch_tokens);
  if (config_.use_fhfc) fhfc = embed_hfc(hfc);
  if (!fpe.defined()) fpe = torch::zeros_like(fhfc);
  if (!fhfc.defined()) fhfc = torch::zeros_like(fpe);

  std::vector<torch::Tensor> prompts;
  prompts.reserve(static_cast<size_t>(config_.depth));
  for (int64_t i = 0; i < config_.depth; ++i) prompts.push_back(generate_prompt(fpe, fhfc, i));
  return prompts;
}

}  // namespace rsam
