#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rsam/decoder.hpp"
#include "rsam/freq_prompt.hpp"
#include "rsam/vit_adapter.hpp"

namespace rsam {

/// Full model configuration. Prompt-generator fields left at 0 inherit from
/// the encoder (tune_dim 0 means embed_dim / 16); a non-zero value that
/// disagrees with the encoder is a configuration error.
struct ModelConfig {
  ViTConfig vit;
  PromptGeneratorConfig prompt{.embed_dim = 0, .tune_dim = 0, .depth = 0, .in_channels = 0,
                               .patch_size = 0};
  DecoderConfig decoder;
  bool use_fpe = true;
  bool use_fhfc = true;
  bool use_adapter_scale = true;
  double tau = 0.25;
  uint64_t seed = 0;
  // Freeze-policy override: train the backbone too.
  bool train_backbone = false;

  bool adapter_feature_enabled() const { return use_fpe || use_fhfc; }

  /// Copy with derived fields filled in and cross-module dims checked.
  ModelConfig resolved() const;
};

class RsamSegImpl : public torch::nn::Module {
 public:
  explicit RsamSegImpl(ModelConfig config);

  /// B×C×H×W images -> B×1×H×W logits.
  torch::Tensor forward(const torch::Tensor& images);

  /// Per-layer prompts for a batch; empty when Adapter-Feature is disabled.
  std::vector<torch::Tensor> prompts(const torch::Tensor& images, const torch::Tensor& patch_tokens);

  const ModelConfig& config() const { return config_; }

  ViTEncoder encoder{nullptr};
  PromptGenerator prompt{nullptr};
  MaskDecoder decoder{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(RsamSeg);

/// Builds and initializes a model from `config.seed`.
RsamSeg build_model(const ModelConfig& config);

/// Re-draws every parameter and buffer. Each tensor's values depend only on
/// (seed, name), so ablated builds share the weights they have in common.
///
/// Biases and norm shifts start at 0, norm gains at 1, adapter and prompt
/// up-projections at 0, everything else from a normal(0, 0.02) truncated at
/// two standard deviations. The decoder's Fourier-feature matrix is N(0, 1).
void initialize_parameters(torch::nn::Module& module, uint64_t seed);

enum class ParamGroup { backbone, adapter_scale, adapter_feature, decoder };

std::string_view group_name(ParamGroup group);
ParamGroup group_of(std::string_view parameter_name);

struct ParameterEntry {
  std::string name;
  ParamGroup group;
  bool trainable;
  int64_t numel;
};

struct ParameterRegistry {
  std::vector<ParameterEntry> entries;

  int64_t total() const;
  int64_t count(ParamGroup group) const;
  int64_t trainable() const;
  int64_t frozen() const { return total() - trainable(); }
};

/// Snapshot of the model's parameters, their groups and current trainability.
ParameterRegistry describe_parameters(torch::nn::Module& model);

/// Freezes the backbone group and marks adapters, prompt generator and
/// decoder trainable. `train_backbone` keeps the backbone trainable as well.
ParameterRegistry freeze_policy(RsamSegImpl& model, bool train_backbone = false);

struct ParameterCounts {
  int64_t backbone = 0;
  int64_t adapter_scale = 0;
  int64_t adapter_feature = 0;
  int64_t decoder = 0;

  int64_t total() const { return backbone + adapter_scale + adapter_feature + decoder; }
  int64_t trainable() const { return adapter_scale + adapter_feature + decoder; }
};

/// Per-group parameter counts from the architecture formulas alone.
ParameterCounts closed_form_counts(const ModelConfig& config);

}  // namespace rsam
