#pragma once

#include <torch/torch.h>

#include <vector>

namespace rsam {

/// Binary frequency-domain mask over a centre-shifted spectrum.
///
/// A pixel is zeroed when 4·|(i − H/2)(j − W/2)| / (H·W) ≤ tau, with H/2 and
/// W/2 kept real-valued so odd sizes need no special casing.
struct HfcMask {
  int64_t height = 0;
  int64_t width = 0;
  double tau = 0.0;
  torch::Tensor grid;  // H×W float64, values in {0, 1}

  bool passes(int64_t row, int64_t col) const;
  int64_t zero_count() const;
};

HfcMask make_hfc_mask(int64_t height, int64_t width, double tau);

/// Multiplies the centred spectrum of every H×W plane by `mask` and returns the
/// real part of the inverse transform. Works on any tensor whose trailing two
/// dims are H×W; the mask must be H×W.
torch::Tensor apply_spectral_mask(const torch::Tensor& image, const torch::Tensor& mask);

/// High-frequency component of a C×H×W or B×C×H×W image; channels are handled
/// independently and keep their count.
torch::Tensor extract_hfc(const torch::Tensor& image, double tau);

struct PromptGeneratorConfig {
  int64_t embed_dim = 64;
  int64_t tune_dim = 4;
  int64_t depth = 2;
  int64_t in_channels = 3;
  int64_t patch_size = 8;
  double fpe_scale = 1.0;
  double tau = 0.25;
  bool use_fpe = true;
  bool use_fhfc = true;

  void validate() const;
};

/// Per-layer prompt generator fed by tuned patch embeddings and HFC tokens.
///
///   P^i = up(GELU(tune_i(F_pe + F_hfc)))
///
/// `tune_i` is a separate linear layer per encoder block while `up` is shared.
/// Either input branch can be disabled, in which case its term is zero and its
/// projection is not allocated.
class PromptGeneratorImpl : public torch::nn::Module {
 public:
  explicit PromptGeneratorImpl(PromptGeneratorConfig config);

  /// fpe_scale · Linear(D → tune_dim) applied to raw patch tokens.
  torch::Tensor tune_embedding(const torch::Tensor& fpe_raw);

  /// Patch-wise linear projection of an HFC image to tune_dim tokens.
  torch::Tensor embed_hfc(const torch::Tensor& hfc);

  torch::Tensor generate_prompt(const torch::Tensor& fpe, const torch::Tensor& fhfc,
                                int64_t layer);

  /// One prompt per encoder layer. `patch_tokens` is the backbone patch
  /// embedding (before position encoding), `hfc` the HFC image batch.
  std::vector<torch::Tensor> forward(const torch::Tensor& patch_tokens, const torch::Tensor& hfc);

  const PromptGeneratorConfig& config() const { return config_; }

  torch::nn::Linear embedding_tune{nullptr};
  torch::nn::Linear hfc_embed{nullptr};
  torch::nn::ModuleList tune{nullptr};
  torch::nn::Linear up{nullptr};

 private:
  PromptGeneratorConfig config_;
};
TORCH_MODULE(PromptGenerator);

}  // namespace rsam
