#include "rsam/model.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "rsam/errors.hpp"

namespace rsam {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool contains(std::string_view s, std::string_view part) { return s.find(part) != std::string_view::npos; }

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

void trunc_normal(torch::Tensor& t, double stddev, at::Generator& gen) {
  // Inverse-CDF sampling of N(0, stddev) restricted to [-2σ, 2σ].
  const double lo = 0.5 * (1.0 + std::erf(-2.0 / std::sqrt(2.0)));
  const double hi = 0.5 * (1.0 + std::erf(2.0 / std::sqrt(2.0)));
  t.uniform_(2.0 * lo - 1.0, 2.0 * hi - 1.0, gen);
  t.erfinv_().mul_(stddev * std::sqrt(2.0)).clamp_(-2.0 * stddev, 2.0 * stddev);
}

void check_or_inherit(int64_t& field, int64_t value, const char* what) {
  if (field == 0) {
    field = value;
  } else if (field != value) {
    throw ConfigError(std::string("prompt ") + what + " = " + std::to_string(field) +
                      " disagrees with encoder value " + std::to_string(value));
  }
}

}  // namespace

ModelConfig ModelConfig::resolved() const {
  ModelConfig out = *this;
  out.vit.use_adapter_scale = use_adapter_scale;
  out.vit.validate();
  check_or_inherit(out.prompt.embed_dim, vit.embed_dim, "embed_dim");
  check_or_inherit(out.prompt.depth, vit.depth, "depth");
  check_or_inherit(out.prompt.in_channels, vit.in_channels, "in_channels");
  check_or_inherit(out.prompt.patch_size, vit.patch_size, "patch_size");
  if (out.prompt.tune_dim == 0) out.prompt.tune_dim = std::max<int64_t>(1, vit.embed_dim / 16);
  out.prompt.tau = tau;
  out.prompt.use_fpe = use_fpe;
  out.prompt.use_fhfc = use_fhfc;
  if (adapter_feature_enabled()) out.prompt.validate();
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  if (decoder.transformer_dim != vit.neck_dim) {
    throw ConfigError("decoder transformer_dim " + std::to_string(decoder.transformer_dim) +
                      " must equal encoder neck_dim " + std::to_string(vit.neck_dim));
  }
  out.decoder.validate();
  return out;
}

RsamSegImpl::RsamSegImpl(ModelConfig config) : config_(config.resolved()) {
  encoder = register_module("encoder", ViTEncoder(config_.vit));
  if (config_.adapter_feature_enabled()) {
    prompt = register_module("prompt", PromptGenerator(config_.prompt));
  }
  decoder = register_module("decoder", MaskDecoder(config_.decoder));
}

std::vector<torch::Tensor> RsamSegImpl::prompts(const torch::Tensor& images,
                                                const torch::Tensor& patch_tokens) {
  if (!prompt) return {};
  torch::Tensor hfc;
  if (config_.use_fhfc) {
    torch::NoGradGuard no_grad;
    hfc = extract_hfc(images, config_.tau);
  }
  return prompt->forward(patch_tokens, hfc);
}

torch::Tensor RsamSegImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != config_.vit.in_channels ||
      images.size(2) != config_.vit.image_size || images.size(3) != config_.vit.image_size) {
    throw ShapeError("model expects B×" + std::to_string(config_.vit.in_channels) + "×" +
                     std::to_string(config_.vit.image_size) + "×" +
                     std::to_string(config_.vit.image_size) + " images");
  }
  auto tokens = encoder->patch_tokens(images);
  auto embedding = encoder->forward_tokens(tokens, prompts(images, tokens));
  return decoder->forward(embedding.spatial, images.size(2), images.size(3));
}

RsamSeg build_model(const ModelConfig& config) {
  RsamSeg model(config);
  initialize_parameters(*model, model->config().seed);
  return model;
}

void initialize_parameters(torch::nn::Module& module, uint64_t seed) {
  torch::NoGradGuard no_grad;
  for (auto& item : module.named_parameters(true)) {
    const std::string& name = item.key();
    auto& t = item.value();
    auto gen = at::detail::createCPUGenerator(splitmix64(seed ^ fnv1a(name)));
    const bool is_norm = contains(name, "norm") || contains(name, ".ln");
    if (ends_with(name, "bias")) {
      t.zero_();
    } else if (is_norm && ends_with(name, "weight")) {
      t.fill_(1.0);
    } else if (contains(name, "adapter_") && ends_with(name, ".up.weight")) {
      t.zero_();
    } else if (name.starts_with("prompt.up.") || name == "up.weight") {
      t.zero_();
    } else {
      trunc_normal(t, 0.02, gen);
    }
  }
  for (auto& item : module.named_buffers(true)) {
    auto gen = at::detail::createCPUGenerator(splitmix64(seed ^ fnv1a(item.key())));
    item.value().normal_(0.0, 1.0, gen);
  }
}

std::string_view group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::adapter_scale: return "adapter_scale";
    case ParamGroup::adapter_feature: return "adapter_feature";
    case ParamGroup::decoder: return "decoder";
  }
  return "unknown";
}

ParamGroup group_of(std::string_view name) {
  if (name.starts_with("decoder.")) return ParamGroup::decoder;
  if (name.starts_with("prompt.")) return ParamGroup::adapter_feature;
  if (contains(name, ".adapter_")) return ParamGroup::adapter_scale;
  return ParamGroup::backbone;
}

int64_t ParameterRegistry::total() const {
  int64_t n = 0;
  for (const auto& e : entries) n += e.numel;
  return n;
}

int64_t ParameterRegistry::count(ParamGroup group) const {
  int64_t n = 0;
  for (const auto& e : entries) {
    if (e.group == group) n += e.numel;
  }
  return n;
}

int64_t ParameterRegistry::trainable() const {
  int64_t n = 0;
  for (const auto& e : entries) {
    if (e.trainable) n += e.numel;
  }
  return n;
}

ParameterRegistry describe_parameters(torch::nn::Module& model) {
  ParameterRegistry registry;
  for (const auto& item : model.named_parameters(true)) {
    registry.entries.push_back(ParameterEntry{item.key(), group_of(item.key()),
                                              item.value().requires_grad(), item.value().numel()});
  }
  return registry;
}

ParameterRegistry freeze_policy(RsamSegImpl& model, bool train_backbone) {
  for (auto& item : model.named_parameters(true)) {
    const bool trainable = train_backbone || group_of(item.key()) != ParamGroup::backbone;
    item.value().set_requires_grad(trainable);
  }
  return describe_parameters(model);
}

ParameterCounts closed_form_counts(const ModelConfig& raw) {
  const ModelConfig cfg = raw.resolved();
  const auto& v = cfg.vit;
  const int64_t d = v.embed_dim, p = v.patch_size, c_in = v.in_channels;
  const int64_t hidden = v.mlp_hidden(), neck = v.neck_dim;

  ParameterCounts counts;
  const int64_t block = 2 * d                  // norm1
                        + d * 3 * d + 3 * d    // qkv
                        + d * d + d            // proj
                        + 2 * d                // norm2
                        + d * hidden + hidden  // fc1
                        + hidden * d + d;      // fc2
  counts.backbone = (c_in * p * p * d + d)     // patch embedding
                    + v.num_tokens() * d       // position table
                    + v.depth * block
                    + d * neck + 2 * neck          // neck 1x1 conv + LN
                    + 9 * neck * neck + 2 * neck;  // neck 3x3 conv + LN

  if (cfg.use_adapter_scale) {
    const int64_t b = v.adapter_bottleneck;
    counts.adapter_scale = v.depth * 2 * (2 * d * b + d + b);
  }

  if (cfg.adapter_feature_enabled()) {
    const int64_t t = cfg.prompt.tune_dim;
    counts.adapter_feature = v.depth * (t * t + t) + (t * d + d);
    if (cfg.use_fpe) counts.adapter_feature += d * t + t;
    if (cfg.use_fhfc) counts.adapter_feature += c_in * p * p * t + t;
  }

  const auto& dc = cfg.decoder;
  const int64_t c = dc.transformer_dim;
  auto attention = [c](int64_t internal) { return 3 * (c * internal + internal) + internal * c + c; };
  const int64_t cross = attention(c / dc.attention_downsample);
  const int64_t two_way = attention(c) + cross + cross + (c * dc.mlp_dim + dc.mlp_dim) +
                          (dc.mlp_dim * c + c) + 4 * (2 * c);
  int64_t upscale = 0;
  int64_t ch = c;
  for (int64_t s = 0; s < dc.upscale_stages; ++s) {
    const int64_t out = dc.upscale_channels(s);
    upscale += ch * out * 4 + out;
    if (s + 1 < dc.upscale_stages) upscale += 2 * out;
    ch = out;
  }
  const int64_t hyper = 2 * (c * c + c) + (c * ch + ch);
  counts.decoder = 2 * c                             // context + mask tokens
                   + dc.depth * two_way + cross + 2 * c  // blocks, final attention, final norm
                   + upscale + hyper + 1;             // + mask bias
  return counts;
}

}  // namespace rsam
