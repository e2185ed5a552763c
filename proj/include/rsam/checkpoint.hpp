#pragma once

#include <torch/torch.h>

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rsam/model.hpp"

namespace rsam {

// Archive layout, all integers little-endian:
//
//   "RSAMCKPT"                       8 bytes magic
//   u32 version                      currently 1
//   u64 header length, header bytes  UTF-8 JSON {"config": ..., "meta": ...}
//   u64 tensor count
//   per tensor:
//     u32 name length, name bytes
//     u8  dtype                      1 = float32, 2 = float64
//     u32 rank, i64 dims[rank]
//     raw element data, row-major
//   "RSAMEND\0"                      8 bytes trailer

struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

struct CheckpointMeta {
  int64_t step = 0;
  uint64_t seed = 0;
  std::map<std::string, double> metrics;
};

struct CheckpointArchive {
  nlohmann::json config;  // ModelConfig as JSON; may be null for weight-only archives
  CheckpointMeta meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void write_archive(const CheckpointArchive& archive, const std::filesystem::path& path);

/// Parses the whole file before returning; any truncation or malformed field
/// raises CheckpointError.
CheckpointArchive read_archive(const std::filesystem::path& path);

/// Every parameter and buffer of the model, plus its config.
CheckpointArchive export_model(RsamSegImpl& model, const CheckpointMeta& meta = {});

/// Only the backbone-group parameters.
CheckpointArchive export_backbone(RsamSegImpl& model);

void save_checkpoint(RsamSegImpl& model, const std::filesystem::path& path,
                     const CheckpointMeta& meta = {});

/// Rebuilds the model from the embedded config and loads every tensor. Name
/// or shape mismatches raise CheckpointError naming the tensor.
RsamSeg load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

/// Copies archive tensors into a built model, all or nothing.
void load_tensors(RsamSegImpl& model, const CheckpointArchive& archive);

struct ImportReport {
  std::vector<std::string> matched;
  std::vector<std::string> missing;  // backbone parameters the archive did not provide
  std::vector<std::string> unused;   // archive tensors with no destination
  std::vector<std::string> skipped;  // mapped decoder tokens left alone (inherit_tokens off)
};

/// Overwrites backbone parameters from `archive`. `name_map` maps archive
/// names to model names; unmapped archive names are matched by identity
/// against the backbone only. Non-backbone destinations are written only when
/// named explicitly in `name_map`. Shape conflicts raise ImportError before
/// anything is written.
ImportReport import_backbone(RsamSegImpl& model, const CheckpointArchive& archive,
                             const std::map<std::string, std::string>& name_map = {});

}  // namespace rsam
