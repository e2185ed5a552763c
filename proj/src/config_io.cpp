#include "rsam/config_io.hpp"

#include <functional>
#include <string>
#include <unordered_map>

#include "rsam/errors.hpp"

using nlohmann::json;

namespace rsam {

namespace {

using Setter = std::function<void(const json&)>;

template <typename T>
Setter field(T& target) {
  return [&target](const json& v) { target = v.get<T>(); };
}

void apply(const json& j, const std::unordered_map<std::string, Setter>& setters, const char* section) {
  if (j.is_null()) return;
  if (!j.is_object()) throw ConfigError(std::string(section) + " config must be an object");
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown key '" + key + "' in " + section + " config");
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw ConfigError("bad value for " + std::string(section) + "." + key + ": " + e.what());
    }
  }
}

}  // namespace

json to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size},   {"patch_size", c.patch_size},
          {"in_channels", c.in_channels}, {"depth", c.depth},
          {"embed_dim", c.embed_dim},     {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},     {"neck_dim", c.neck_dim},
          {"adapter_bottleneck", c.adapter_bottleneck}, {"adapter_scale", c.adapter_scale}};
}

json to_json(const PromptGeneratorConfig& c) {
  return {{"embed_dim", c.embed_dim},     {"tune_dim", c.tune_dim},     {"depth", c.depth},
          {"in_channels", c.in_channels}, {"patch_size", c.patch_size}, {"fpe_scale", c.fpe_scale}};
}

json to_json(const DecoderConfig& c) {
  return {{"transformer_dim", c.transformer_dim},
          {"depth", c.depth},
          {"heads", c.heads},
          {"mlp_dim", c.mlp_dim},
          {"attention_downsample", c.attention_downsample},
          {"upscale_stages", c.upscale_stages},
          {"output_channels", c.output_channels},
          {"inherit_tokens", c.inherit_tokens}};
}

json to_json(const ModelConfig& c) {
  return {{"vit", to_json(c.vit)},
          {"prompt", to_json(c.prompt)},
          {"decoder", to_json(c.decoder)},
          {"use_fpe", c.use_fpe},
          {"use_fhfc", c.use_fhfc},
          {"use_adapter_scale", c.use_adapter_scale},
          {"tau", c.tau},
          {"seed", c.seed},
          {"train_backbone", c.train_backbone}};
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_max", c.lr_max},
          {"lr_min", c.lr_min},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"deterministic", c.deterministic},
          {"eval_every", c.eval_every},
          {"warmup_steps", c.warmup_steps},
          {"augment_flips", c.augment_flips},
          {"threshold", c.threshold}};
}

void merge_json(const json& j, ViTConfig& c) {
  apply(j,
        {{"image_size", field(c.image_size)},
         {"patch_size", field(c.patch_size)},
         {"in_channels", field(c.in_channels)},
         {"depth", field(c.depth)},
         {"embed_dim", field(c.embed_dim)},
         {"heads", field(c.heads)},
         {"mlp_ratio", field(c.mlp_ratio)},
         {"neck_dim", field(c.neck_dim)},
         {"adapter_bottleneck", field(c.adapter_bottleneck)},
         {"adapter_scale", field(c.adapter_scale)}},
        "vit");
}

void merge_json(const json& j, PromptGeneratorConfig& c) {
  apply(j,
        {{"embed_dim", field(c.embed_dim)},
         {"tune_dim", field(c.tune_dim)},
         {"depth", field(c.depth)},
         {"in_channels", field(c.in_channels)},
         {"patch_size", field(c.patch_size)},
         {"fpe_scale", field(c.fpe_scale)}},
        "prompt");
}

void merge_json(const json& j, DecoderConfig& c) {
  apply(j,
        {{"transformer_dim", field(c.transformer_dim)},
         {"depth", field(c.depth)},
         {"heads", field(c.heads)},
         {"mlp_dim", field(c.mlp_dim)},
         {"attention_downsample", field(c.attention_downsample)},
         {"upscale_stages", field(c.upscale_stages)},
         {"output_channels", field(c.output_channels)},
         {"inherit_tokens", field(c.inherit_tokens)}},
        "decoder");
}

void merge_json(const json& j, ModelConfig& c) {
  apply(j,
        {{"vit", [&c](const json& v) { merge_json(v, c.vit); }},
         {"prompt", [&c](const json& v) { merge_json(v, c.prompt); }},
         {"decoder", [&c](const json& v) { merge_json(v, c.decoder); }},
         {"use_fpe", field(c.use_fpe)},
         {"use_fhfc", field(c.use_fhfc)},
         {"use_adapter_scale", field(c.use_adapter_scale)},
         {"tau", field(c.tau)},
         {"seed", field(c.seed)},
         {"train_backbone", field(c.train_backbone)}},
        "model");
}

void merge_json(const json& j, TrainConfig& c) {
  apply(j,
        {{"epochs", field(c.epochs)},
         {"batch_size", field(c.batch_size)},
         {"lr_max", field(c.lr_max)},
         {"lr_min", field(c.lr_min)},
         {"weight_decay", field(c.weight_decay)},
         {"seed", field(c.seed)},
         {"deterministic", field(c.deterministic)},
         {"eval_every", field(c.eval_every)},
         {"warmup_steps", field(c.warmup_steps)},
         {"augment_flips", field(c.augment_flips)},
         {"threshold", field(c.threshold)}},
        "train");
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  merge_json(j, c);
  return c.resolved();
}

}  // namespace rsam
