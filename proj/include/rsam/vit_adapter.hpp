#pragma once

#include <torch/torch.h>

#include <vector>

namespace rsam {

struct ViTConfig {
  int64_t image_size = 64;
  int64_t patch_size = 8;
  int64_t in_channels = 3;
  int64_t depth = 2;
  int64_t embed_dim = 64;
  int64_t heads = 4;
  double mlp_ratio = 4.0;
  int64_t neck_dim = 32;
  int64_t adapter_bottleneck = 16;
  double adapter_scale = 0.5;
  bool use_adapter_scale = true;

  void validate() const;
  int64_t grid() const { return image_size / patch_size; }
  int64_t num_tokens() const { return grid() * grid(); }
  int64_t mlp_hidden() const;
};

/// Bottleneck adapter: scale · Up(ReLU(Down(x))). Shape preserving.
class AdapterScaleImpl : public torch::nn::Module {
 public:
  AdapterScaleImpl(int64_t dim, int64_t bottleneck, double scale = 0.5);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t dim() const { return dim_; }
  double scale() const { return scale_; }

  torch::nn::Linear down{nullptr};
  torch::nn::Linear up{nullptr};

 private:
  int64_t dim_;
  double scale_;
};
TORCH_MODULE(AdapterScale);

class AttentionImpl : public torch::nn::Module {
 public:
  AttentionImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear proj{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(Attention);

class MlpBlockImpl : public torch::nn::Module {
 public:
  MlpBlockImpl(int64_t dim, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(MlpBlock);

/// Channel-wise layer norm over B×C×H×W maps.
class LayerNorm2dImpl : public torch::nn::Module {
 public:
  explicit LayerNorm2dImpl(int64_t channels, double eps = 1e-6);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  double eps_;
};
TORCH_MODULE(LayerNorm2d);

/// Pre-norm transformer block with two Adapter-Scale modules.
///
///   h   = x + prompt
///   h   = h + Attn(LN1(h + A1(h)))
///   out = h + MLP(LN2(h)) + A2(LN2(h))
///
/// A1 sits in series in front of attention (in residual form, so a zero
/// up-projection is an identity) and A2 runs parallel to the MLP branch.
/// Without adapters this is a plain pre-norm ViT block.
class BlockImpl : public torch::nn::Module {
 public:
  explicit BlockImpl(const ViTConfig& config);

  /// `prompt` may be undefined, meaning no prompt is injected.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& prompt = {});

  bool has_adapters() const { return static_cast<bool>(adapter_attn); }

  torch::nn::LayerNorm norm1{nullptr};
  Attention attn{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  MlpBlock mlp{nullptr};
  AdapterScale adapter_attn{nullptr};
  AdapterScale adapter_mlp{nullptr};

 private:
  int64_t dim_;
};
TORCH_MODULE(Block);

/// Per-patch linear projection to the embedding width, row-major token order.
class PatchEmbedImpl : public torch::nn::Module {
 public:
  explicit PatchEmbedImpl(const ViTConfig& config);
  torch::Tensor forward(const torch::Tensor& images);

  torch::nn::Linear proj{nullptr};

 private:
  int64_t patch_size_;
  int64_t in_channels_;
};
TORCH_MODULE(PatchEmbed);

/// 1x1 conv -> LN2d -> 3x3 conv -> LN2d, as in the SAM image encoder neck.
class NeckImpl : public torch::nn::Module {
 public:
  NeckImpl(int64_t in_dim, int64_t out_dim);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr};
  LayerNorm2d ln1{nullptr};
  torch::nn::Conv2d conv2{nullptr};
  LayerNorm2d ln2{nullptr};
};
TORCH_MODULE(Neck);

struct EncoderOutput {
  torch::Tensor tokens;   // B×N×D after the last block
  torch::Tensor spatial;  // B×neck_dim×(H/p)×(W/p)
};

class ViTEncoderImpl : public torch::nn::Module {
 public:
  explicit ViTEncoderImpl(ViTConfig config);

  /// Patch embedding before position encoding (the F_pe source).
  torch::Tensor patch_tokens(const torch::Tensor& images);

  /// Runs position encoding, the blocks and the neck. `prompts` is either
  /// empty or holds one B×N×D tensor per block, injected before that block.
  EncoderOutput forward_tokens(const torch::Tensor& patch_tokens,
                               const std::vector<torch::Tensor>& prompts);

  EncoderOutput encode(const torch::Tensor& images, const std::vector<torch::Tensor>& prompts);

  const ViTConfig& config() const { return config_; }

  PatchEmbed patch_embed{nullptr};
  torch::Tensor pos_embed;
  torch::nn::ModuleList blocks{nullptr};
  Neck neck{nullptr};

 private:
  ViTConfig config_;
};
TORCH_MODULE(ViTEncoder);

}  // namespace rsam
