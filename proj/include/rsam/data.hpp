#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rsam {

enum class DatasetKind { inria, cloud38, sentinel2_field, deepglobe_road, synthetic };
enum class Split { train, test };

std::string_view kind_name(DatasetKind kind);
/// Accepts the manifest spellings: inria, cloud38, sentinel2-field,
/// deepglobe-road, synthetic. Throws ParameterError otherwise.
DatasetKind parse_kind(std::string_view name);
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

/// Band key for datasets that ship a single RGB raster per scene.
inline constexpr int kRgbComposite = 0;

struct SceneRecord {
  std::string id;
  std::map<int, std::filesystem::path> bands;
  std::optional<std::filesystem::path> label;
  int64_t width = 0;
  int64_t height = 0;
};

/// Band identifiers in output channel order.
struct BandSpec {
  std::vector<int> bands;

  /// cloud38: bands 4, 3, 2 -> R, G, B. Others: the RGB composite.
  static BandSpec for_kind(DatasetKind kind);
};

struct PatchRecord {
  std::string scene_id;
  int64_t row = 0;
  int64_t col = 0;
  int64_t size = 0;
  std::map<int, std::string> bands;  // band id -> raster path or synthetic ref
  std::string label;                 // empty when the patch is unlabeled

  std::string id() const;
};

struct Provenance {
  uint64_t seed = 0;
  double fraction = 1.0;
};

struct DatasetManifest {
  DatasetKind kind = DatasetKind::synthetic;
  Split split = Split::train;
  std::vector<PatchRecord> records;
  Provenance provenance;

  /// Non-empty, no duplicate (scene, origin) pairs.
  void validate() const;
};

/// Reads a raster (8 or 16 bit, 1..4 channels) as C×H×W float32. Colour
/// rasters come back in RGB order.
torch::Tensor read_raster(const std::filesystem::path& path);

/// Binarizes a byte label. Values must all lie in {0, 1} or all in {0, 255};
/// 255-style masks are thresholded at > 127. Returns H×W float32 in {0, 1}.
torch::Tensor binarize_label(const torch::Tensor& raw, std::string_view source);

torch::Tensor compose_bands(const std::map<int, std::filesystem::path>& bands, const BandSpec& spec,
                            std::string_view scene_id);
torch::Tensor compose_bands(const SceneRecord& scene, const BandSpec& spec);

/// Start offsets along one axis: a regular grid whose last tile is shifted
/// inward to end exactly at `length`.
std::vector<int64_t> tile_origins(int64_t length, int64_t patch);

enum class TilePolicy { shift_inward };

std::vector<PatchRecord> tile_scene(const SceneRecord& scene, int64_t patch,
                                    TilePolicy policy = TilePolicy::shift_inward);

enum class NormalizePolicy { per_patch_minmax, none };

/// Per-channel min-max to [0, 1]; constant channels map to 0.
torch::Tensor normalize(const torch::Tensor& image,
                        NormalizePolicy policy = NormalizePolicy::per_patch_minmax);

/// floor(fraction · n) records taken as a prefix of one seeded permutation,
/// so subsets at the same seed nest. fraction == 1 returns the manifest as is.
DatasetManifest fewshot_subset(const DatasetManifest& manifest, double fraction, uint64_t seed);

/// `count` generated patches of filled rectangles and ellipses over textured
/// noise, with exact binary labels. Pixels are a pure function of
/// (seed, index, size).
DatasetManifest synthetic_fixture(int64_t count, int64_t size, uint64_t seed);

struct Sample {
  std::string id;
  torch::Tensor image;  // 3×H×W float32
  torch::Tensor label;  // H×W float32 in {0, 1}; undefined when unlabeled
};

struct LoadOptions {
  NormalizePolicy normalize = NormalizePolicy::per_patch_minmax;
  int64_t resize_to = 0;  // 0 keeps the patch size
};

Sample load_patch(const PatchRecord& record, DatasetKind kind, const LoadOptions& options = {});

/// Line-delimited JSON: a header object, then one object per record.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Scenes found under `root` for one split, following the per-kind layout:
///
///   cloud38          <split>_red/ <split>_green/ <split>_blue/ <split>_gt/
///   inria            <split>/images/ <split>/gt/
///   sentinel2-field  <split>/images/ <split>/masks/
///   deepglobe-road   <split>/<id>_sat.<ext> with <split>/<id>_mask.<ext>
///
/// Scene ids are file stems (band prefixes such as "red_" are stripped for
/// cloud38). Labels are mandatory for the train split.
std::vector<SceneRecord> scan_scenes(DatasetKind kind, const std::filesystem::path& root, Split split);

DatasetManifest build_manifest(DatasetKind kind, const std::vector<SceneRecord>& scenes, Split split,
                               int64_t patch);

}  // namespace rsam
