#pragma once

#include <json.hpp>

#include "rsam/model.hpp"
#include "rsam/training.hpp"

namespace rsam {

// JSON mappings for the configuration structs. Readers accept partial
// objects: missing keys keep the value already in the target, unknown keys
// raise ConfigError so typos do not pass silently.

nlohmann::json to_json(const ViTConfig& config);
nlohmann::json to_json(const PromptGeneratorConfig& config);
nlohmann::json to_json(const DecoderConfig& config);
nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const TrainConfig& config);

void merge_json(const nlohmann::json& j, ViTConfig& config);
void merge_json(const nlohmann::json& j, PromptGeneratorConfig& config);
void merge_json(const nlohmann::json& j, DecoderConfig& config);
void merge_json(const nlohmann::json& j, ModelConfig& config);
void merge_json(const nlohmann::json& j, TrainConfig& config);

ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace rsam
