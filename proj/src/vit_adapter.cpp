#include "rsam/vit_adapter.hpp"

#include <cmath>
#include <string>

#include "rsam/errors.hpp"
#include "rsam/tokens.hpp"

namespace rsam {

namespace {

void require_dim(const torch::Tensor& x, int64_t dim, const char* what) {
  if (x.dim() != 3 || x.size(2) != dim) {
    throw ShapeError(std::string(what) + " expects B×N×" + std::to_string(dim) + " tokens");
  }
}

}  // namespace

void ViTConfig::validate() const {
  if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " must be a positive multiple of patch_size " + std::to_string(patch_size));
  }
  if (depth < 1) throw ConfigError("encoder depth must be >= 1");
  if (heads < 1 || embed_dim % heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " must be divisible by heads " +
                      std::to_string(heads));
  }
  if (in_channels < 1 || neck_dim < 1) throw ConfigError("channels must be positive");
  if (mlp_ratio <= 0.0 || mlp_hidden() < 1) throw ConfigError("mlp_ratio must be positive");
  if (use_adapter_scale && (adapter_bottleneck < 1 || adapter_bottleneck >= embed_dim)) {
    throw ConfigError("adapter bottleneck must lie in [1, embed_dim)");
  }
}

int64_t ViTConfig::mlp_hidden() const {
  return static_cast<int64_t>(std::llround(static_cast<double>(embed_dim) * mlp_ratio));
}

AdapterScaleImpl::AdapterScaleImpl(int64_t dim, int64_t bottleneck, double scale)
    : dim_(dim), scale_(scale) {
  if (bottleneck < 1 || bottleneck >= dim) {
    throw ConfigError("adapter bottleneck " + std::to_string(bottleneck) +
                      " must be smaller than dim " + std::to_string(dim));
  }
  down = register_module("down", torch::nn::Linear(dim, bottleneck));
  up = register_module("up", torch::nn::Linear(bottleneck, dim));
}

torch::Tensor AdapterScaleImpl::forward(const torch::Tensor& x) {
  if (x.dim() < 1 || x.size(-1) != dim_) {
    throw ShapeError("adapter expects trailing dim " + std::to_string(dim_));
  }
  return scale_ * up->forward(torch::relu(down->forward(x)));
}

AttentionImpl::AttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x) {
  const int64_t b = x.size(0), n = x.size(1), d = x.size(2);
  const int64_t head_dim = d / heads_;
  // B, N, 3, heads, hd -> 3, B, heads, N, hd
  auto qkv_t = qkv->forward(x).reshape({b, n, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv_t[0], k = qkv_t[1], v = qkv_t[2];
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(double(head_dim)), -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, d});
  return proj->forward(out);
}

MlpBlockImpl::MlpBlockImpl(int64_t dim, int64_t hidden) {
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor MlpBlockImpl::forward(const torch::Tensor& x) {
  return fc2->forward(torch::gelu(fc1->forward(x)));
}

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels, double eps) : eps_(eps) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x) {
  auto mean = x.mean(1, true);
  auto var = (x - mean).pow(2).mean(1, true);
  auto y = (x - mean) / torch::sqrt(var + eps_);
  return weight.view({1, -1, 1, 1}) * y + bias.view({1, -1, 1, 1});
}

BlockImpl::BlockImpl(const ViTConfig& config) : dim_(config.embed_dim) {
  const auto ln = torch::nn::LayerNormOptions({config.embed_dim}).eps(1e-6);
  norm1 = register_module("norm1", torch::nn::LayerNorm(ln));
  attn = register_module("attn", Attention(config.embed_dim, config.heads));
  norm2 = register_module("norm2", torch::nn::LayerNorm(ln));
  mlp = register_module("mlp", MlpBlock(config.embed_dim, config.mlp_hidden()));
  if (config.use_adapter_scale) {
    adapter_attn = register_module(
        "adapter_attn", AdapterScale(config.embed_dim, config.adapter_bottleneck, config.adapter_scale));
    adapter_mlp = register_module(
        "adapter_mlp", AdapterScale(config.embed_dim, config.adapter_bottleneck, config.adapter_scale));
  }
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x, const torch::Tensor& prompt) {
  require_dim(x, dim_, "block");
  auto h = x;
  if (prompt.defined()) {
    if (prompt.sizes() != x.sizes()) throw ShapeError("prompt shape must match block input");
    h = h + prompt;
  }
  auto attn_in = adapter_attn ? h + adapter_attn->forward(h) : h;
  h = h + attn->forward(norm1->forward(attn_in));
  auto normed = norm2->forward(h);
  auto out = h + mlp->forward(normed);
  if (adapter_mlp) out = out + adapter_mlp->forward(normed);
  return out;
}

PatchEmbedImpl::PatchEmbedImpl(const ViTConfig& config)
    : patch_size_(config.patch_size), in_channels_(config.in_channels) {
  proj = register_module(
      "proj", torch::nn::Linear(config.in_channels * config.patch_size * config.patch_size,
                                config.embed_dim));
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& images) {
  const auto batch = as_batch(images);
  if (batch.size(1) != in_channels_) {
    throw ShapeError("image has " + std::to_string(batch.size(1)) + " channels, expected " +
                     std::to_string(in_channels_));
  }
  return proj->forward(patchify(batch, patch_size_));
}

NeckImpl::NeckImpl(int64_t in_dim, int64_t out_dim) {
  conv1 = register_module("conv1",
                          torch::nn::Conv2d(torch::nn::Conv2dOptions(in_dim, out_dim, 1).bias(false)));
  ln1 = register_module("ln1", LayerNorm2d(out_dim));
  conv2 = register_module(
      "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_dim, out_dim, 3).padding(1).bias(false)));
  ln2 = register_module("ln2", LayerNorm2d(out_dim));
}

torch::Tensor NeckImpl::forward(const torch::Tensor& x) {
  return ln2->forward(conv2->forward(ln1->forward(conv1->forward(x))));
}

ViTEncoderImpl::ViTEncoderImpl(ViTConfig config) : config_(config) {
  config_.validate();
  patch_embed = register_module("patch_embed", PatchEmbed(config_));
  pos_embed = register_parameter("pos_embed", torch::zeros({1, config_.num_tokens(), config_.embed_dim}));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < config_.depth; ++i) blocks->push_back(Block(config_));
  neck = register_module("neck", Neck(config_.embed_dim, config_.neck_dim));
}

torch::Tensor ViTEncoderImpl::patch_tokens(const torch::Tensor& images) {
  const auto batch = as_batch(images);
  if (batch.size(2) != config_.image_size || batch.size(3) != config_.image_size) {
    throw ShapeError("encoder expects " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + " images");
  }
  return patch_embed->forward(batch);
}

EncoderOutput ViTEncoderImpl::forward_tokens(const torch::Tensor& patch_tokens,
                                             const std::vector<torch::Tensor>& prompts) {
  if (!prompts.empty() && static_cast<int64_t>(prompts.size()) != config_.depth) {
    throw ConfigError("got " + std::to_string(prompts.size()) + " prompts for " +
                      std::to_string(config_.depth) + " blocks");
  }
  require_dim(patch_tokens, config_.embed_dim, "encoder");
  if (patch_tokens.size(1) != config_.num_tokens()) {
    throw ShapeError("encoder expects " + std::to_string(config_.num_tokens()) + " tokens");
  }
  auto x = patch_tokens + pos_embed;
  for (size_t i = 0; i < blocks->size(); ++i) {
    auto* block = blocks[i]->as<BlockImpl>();
    x = block->forward(x, prompts.empty() ? torch::Tensor() : prompts[i]);
  }
  auto spatial = neck->forward(tokens_to_spatial(x, config_.grid(), config_.grid()));
  return EncoderOutput{x, spatial};
}

EncoderOutput ViTEncoderImpl::encode(const torch::Tensor& images,
                                     const std::vector<torch::Tensor>& prompts) {
  return forward_tokens(patch_tokens(images), prompts);
}

}  // namespace rsam
