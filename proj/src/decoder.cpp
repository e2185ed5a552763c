#include "rsam/decoder.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "rsam/errors.hpp"
#include "rsam/tokens.hpp"

namespace rsam {

void DecoderConfig::validate() const {
  if (transformer_dim < 1 || heads < 1 || depth < 1 || mlp_dim < 1) {
    throw ConfigError("decoder dims, heads, depth and mlp_dim must be positive");
  }
  if (attention_downsample < 1 || transformer_dim % attention_downsample != 0 ||
      (transformer_dim / attention_downsample) % heads != 0 || transformer_dim % heads != 0) {
    throw ConfigError("decoder transformer_dim must split evenly across heads after downsampling");
  }
  if (transformer_dim % 2 != 0) throw ConfigError("decoder transformer_dim must be even");
  if (upscale_stages < 1 || upscale_channels(upscale_stages - 1) < 1 ||
      transformer_dim % (int64_t{1} << (upscale_stages + 1)) != 0) {
    throw ConfigError("decoder transformer_dim too small for " + std::to_string(upscale_stages) +
                      " upscale stages");
  }
  if (output_channels != 1) throw ConfigError("decoder supports a single output channel");
}

int64_t DecoderConfig::upscale_channels(int64_t stage) const {
  return transformer_dim >> (stage + 2);
}

DecoderAttentionImpl::DecoderAttentionImpl(int64_t dim, int64_t heads, int64_t downsample)
    : heads_(heads), internal_dim_(dim / downsample) {
  q_proj = register_module("q_proj", torch::nn::Linear(dim, internal_dim_));
  k_proj = register_module("k_proj", torch::nn::Linear(dim, internal_dim_));
  v_proj = register_module("v_proj", torch::nn::Linear(dim, internal_dim_));
  out_proj = register_module("out_proj", torch::nn::Linear(internal_dim_, dim));
}

torch::Tensor DecoderAttentionImpl::forward(const torch::Tensor& q, const torch::Tensor& k,
                                            const torch::Tensor& v) {
  auto split = [this](const torch::Tensor& x) {
    return x.reshape({x.size(0), x.size(1), heads_, internal_dim_ / heads_}).transpose(1, 2);
  };
  auto qh = split(q_proj->forward(q));
  auto kh = split(k_proj->forward(k));
  auto vh = split(v_proj->forward(v));
  const double head_dim = static_cast<double>(internal_dim_ / heads_);
  auto attn = torch::softmax(torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(head_dim), -1);
  auto out = torch::matmul(attn, vh).transpose(1, 2).reshape({q.size(0), q.size(1), internal_dim_});
  return out_proj->forward(out);
}

TwoWayBlockImpl::TwoWayBlockImpl(const DecoderConfig& config, bool skip_first_pe)
    : skip_first_pe_(skip_first_pe) {
  const auto c = config.transformer_dim;
  const auto ln = torch::nn::LayerNormOptions({c});
  self_attn = register_module("self_attn", DecoderAttention(c, config.heads, 1));
  norm1 = register_module("norm1", torch::nn::LayerNorm(ln));
  cross_token_to_image = register_module(
      "cross_token_to_image", DecoderAttention(c, config.heads, config.attention_downsample));
  norm2 = register_module("norm2", torch::nn::LayerNorm(ln));
  mlp_fc1 = register_module("mlp_fc1", torch::nn::Linear(c, config.mlp_dim));
  mlp_fc2 = register_module("mlp_fc2", torch::nn::Linear(config.mlp_dim, c));
  norm3 = register_module("norm3", torch::nn::LayerNorm(ln));
  norm4 = register_module("norm4", torch::nn::LayerNorm(ln));
  cross_image_to_token = register_module(
      "cross_image_to_token", DecoderAttention(c, config.heads, config.attention_downsample));
}

std::pair<torch::Tensor, torch::Tensor> TwoWayBlockImpl::forward(const torch::Tensor& queries_in,
                                                                 const torch::Tensor& keys_in,
                                                                 const torch::Tensor& query_pe,
                                                                 const torch::Tensor& key_pe) {
  torch::Tensor queries;
  if (skip_first_pe_) {
    queries = self_attn->forward(queries_in, queries_in, queries_in);
  } else {
    auto q = queries_in + query_pe;
    queries = queries_in + self_attn->forward(q, q, queries_in);
  }
  queries = norm1->forward(queries);

  auto q = queries + query_pe;
  auto k = keys_in + key_pe;
  queries = norm2->forward(queries + cross_token_to_image->forward(q, k, keys_in));

  queries = norm3->forward(queries + mlp_fc2->forward(torch::relu(mlp_fc1->forward(queries))));

  q = queries + query_pe;
  k = keys_in + key_pe;
  auto keys = norm4->forward(keys_in + cross_image_to_token->forward(k, q, queries));
  return {queries, keys};
}

TwoWayTransformerImpl::TwoWayTransformerImpl(const DecoderConfig& config) {
  layers = register_module("layers", torch::nn::ModuleList());
  for (int64_t i = 0; i < config.depth; ++i) layers->push_back(TwoWayBlock(config, i == 0));
  final_attn = register_module(
      "final_attn",
      DecoderAttention(config.transformer_dim, config.heads, config.attention_downsample));
  norm_final = register_module("norm_final",
                               torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.transformer_dim})));
}

std::pair<torch::Tensor, torch::Tensor> TwoWayTransformerImpl::forward(const torch::Tensor& image,
                                                                       const torch::Tensor& image_pe,
                                                                       const torch::Tensor& tokens) {
  auto keys = spatial_to_tokens(image);
  auto key_pe = spatial_to_tokens(image_pe);
  auto queries = tokens;
  for (const auto& layer : *layers) {
    std::tie(queries, keys) = layer->as<TwoWayBlockImpl>()->forward(queries, keys, tokens, key_pe);
  }
  auto q = queries + tokens;
  auto k = keys + key_pe;
  queries = norm_final->forward(queries + final_attn->forward(q, k, keys));
  return {queries, keys};
}

MaskDecoderImpl::MaskDecoderImpl(DecoderConfig config) : config_(config) {
  config_.validate();
  const auto c = config_.transformer_dim;
  context_token = register_parameter("context_token", torch::zeros({1, 1, c}));
  mask_token = register_parameter("mask_token", torch::zeros({1, 1, c}));
  transformer = register_module("transformer", TwoWayTransformer(config_));

  upscale_convs = register_module("upscale_convs", torch::nn::ModuleList());
  upscale_norms = register_module("upscale_norms", torch::nn::ModuleList());
  int64_t in_ch = c;
  for (int64_t s = 0; s < config_.upscale_stages; ++s) {
    const auto out_ch = config_.upscale_channels(s);
    upscale_convs->push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(in_ch, out_ch, 2).stride(2)));
    if (s + 1 < config_.upscale_stages) upscale_norms->push_back(LayerNorm2d(out_ch));
    in_ch = out_ch;
  }

  hyper = register_module("hyper", torch::nn::ModuleList());
  hyper->push_back(torch::nn::Linear(c, c));
  hyper->push_back(torch::nn::Linear(c, c));
  hyper->push_back(torch::nn::Linear(c, in_ch));

  mask_bias = register_parameter("mask_bias", torch::zeros({1}));
  pe_gaussian = register_buffer("pe_gaussian", torch::zeros({2, c / 2}));
}

torch::Tensor MaskDecoderImpl::position_encoding(int64_t h, int64_t w) const {
  const auto opts = pe_gaussian.options();
  auto ys = (torch::arange(h, opts) + 0.5) / static_cast<double>(h);
  auto xs = (torch::arange(w, opts) + 0.5) / static_cast<double>(w);
  auto grid = torch::stack(torch::meshgrid({xs, ys}, "xy"), -1);  // h×w×2 (x, y)
  auto proj = torch::matmul(2.0 * grid - 1.0, pe_gaussian) * (2.0 * std::numbers::pi);
  return torch::cat({torch::sin(proj), torch::cos(proj)}, -1).permute({2, 0, 1});
}

torch::Tensor MaskDecoderImpl::forward(const torch::Tensor& embedding, int64_t out_h,
                                       int64_t out_w) {
  if (embedding.dim() != 4 || embedding.size(1) != config_.transformer_dim) {
    throw ConfigError("decoder expects a B×" + std::to_string(config_.transformer_dim) +
                      "×h×w embedding");
  }
  const int64_t b = embedding.size(0), h = embedding.size(2), w = embedding.size(3);
  auto image_pe = position_encoding(h, w).unsqueeze(0).expand({b, -1, -1, -1});
  auto tokens = torch::cat({context_token, mask_token}, 1).expand({b, -1, -1});

  auto [hs, keys] = transformer->forward(embedding, image_pe, tokens);
  auto mask_out = hs.select(1, 1);

  auto x = tokens_to_spatial(keys, h, w);
  for (size_t s = 0; s < upscale_convs->size(); ++s) {
    x = upscale_convs[s]->as<torch::nn::ConvTranspose2dImpl>()->forward(x);
    if (s < upscale_norms->size()) x = upscale_norms[s]->as<LayerNorm2dImpl>()->forward(x);
    x = torch::gelu(x);
  }

  auto hyper_out = mask_out;
  for (size_t i = 0; i < hyper->size(); ++i) {
    hyper_out = hyper[i]->as<torch::nn::LinearImpl>()->forward(hyper_out);
    if (i + 1 < hyper->size()) hyper_out = torch::relu(hyper_out);
  }

  const int64_t uh = x.size(2), uw = x.size(3);
  auto logits = torch::matmul(hyper_out.unsqueeze(1), x.flatten(2)).view({b, 1, uh, uw}) + mask_bias;
  if (uh == out_h && uw == out_w) return logits;
  return torch::nn::functional::interpolate(
      logits, torch::nn::functional::InterpolateFuncOptions()
                  .size(std::vector<int64_t>{out_h, out_w})
                  .mode(torch::kBilinear)
                  .align_corners(false));
}

torch::Tensor logits_to_mask(const torch::Tensor& logits, double threshold) {
  return (torch::sigmoid(logits) > threshold).to(torch::kUInt8);
}

}  // namespace rsam
