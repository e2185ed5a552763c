#pragma once

#include <torch/torch.h>

#include "rsam/vit_adapter.hpp"

namespace rsam {

struct DecoderConfig {
  int64_t transformer_dim = 32;
  int64_t depth = 2;
  int64_t heads = 4;
  int64_t mlp_dim = 128;
  int64_t attention_downsample = 2;
  int64_t upscale_stages = 2;
  int64_t output_channels = 1;
  // When importing external weights, keep the learned output tokens rather
  // than re-drawing them.
  bool inherit_tokens = true;

  void validate() const;
  /// Channel width after upscale stage `stage` (dim/4, dim/8, ...).
  int64_t upscale_channels(int64_t stage) const;
};

/// Attention with an optional internal down-projection, q/k/v given apart.
class DecoderAttentionImpl : public torch::nn::Module {
 public:
  DecoderAttentionImpl(int64_t dim, int64_t heads, int64_t downsample);
  torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

 private:
  int64_t heads_;
  int64_t internal_dim_;
};
TORCH_MODULE(DecoderAttention);

/// Token self-attention, token->image cross-attention, token MLP, then
/// image->token cross-attention.
class TwoWayBlockImpl : public torch::nn::Module {
 public:
  TwoWayBlockImpl(const DecoderConfig& config, bool skip_first_pe);
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& queries,
                                                  const torch::Tensor& keys,
                                                  const torch::Tensor& query_pe,
                                                  const torch::Tensor& key_pe);

  DecoderAttention self_attn{nullptr};
  torch::nn::LayerNorm norm1{nullptr};
  DecoderAttention cross_token_to_image{nullptr};
  torch::nn::LayerNorm norm2{nullptr};
  torch::nn::Linear mlp_fc1{nullptr}, mlp_fc2{nullptr};
  torch::nn::LayerNorm norm3{nullptr};
  torch::nn::LayerNorm norm4{nullptr};
  DecoderAttention cross_image_to_token{nullptr};

 private:
  bool skip_first_pe_;
};
TORCH_MODULE(TwoWayBlock);

class TwoWayTransformerImpl : public torch::nn::Module {
 public:
  explicit TwoWayTransformerImpl(const DecoderConfig& config);

  /// image: B×C×h×w, image_pe: B×C×h×w, tokens: B×T×C.
  /// Returns (tokens B×T×C, image tokens B×hw×C).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& image,
                                                  const torch::Tensor& image_pe,
                                                  const torch::Tensor& tokens);

  torch::nn::ModuleList layers{nullptr};
  DecoderAttention final_attn{nullptr};
  torch::nn::LayerNorm norm_final{nullptr};
};
TORCH_MODULE(TwoWayTransformer);

/// Prompt-free SAM-style mask decoder with a single mask output.
///
/// Sparse prompts are absent and the dense prompt is the zero grid, so the
/// decoder attends between its two learned tokens (context and mask) and the
/// image embedding only. The mask token output drives a hypernetwork whose
/// dot product with the upscaled embedding gives per-pixel logits.
class MaskDecoderImpl : public torch::nn::Module {
 public:
  explicit MaskDecoderImpl(DecoderConfig config);

  /// embedding: B×C×h×w. Returns B×1×out_h×out_w logits.
  torch::Tensor forward(const torch::Tensor& embedding, int64_t out_h, int64_t out_w);

  /// Random Fourier position encoding of an h×w grid, C×h×w.
  torch::Tensor position_encoding(int64_t h, int64_t w) const;

  const DecoderConfig& config() const { return config_; }

  torch::Tensor context_token;
  torch::Tensor mask_token;
  TwoWayTransformer transformer{nullptr};
  torch::nn::ModuleList upscale_convs{nullptr};
  torch::nn::ModuleList upscale_norms{nullptr};
  torch::nn::ModuleList hyper{nullptr};
  torch::Tensor mask_bias;
  torch::Tensor pe_gaussian;

 private:
  DecoderConfig config_;
};
TORCH_MODULE(MaskDecoder);

/// 1 where sigmoid(logit) > threshold, else 0. Returned as uint8 with the
/// logits' shape.
torch::Tensor logits_to_mask(const torch::Tensor& logits, double threshold = 0.5);

}  // namespace rsam
