#include "rsam/data.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "rsam/errors.hpp"

namespace fs = std::filesystem;

namespace rsam {

namespace {

constexpr std::string_view kSyntheticPrefix = "synthetic:";

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool is_raster(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".tif" || ext == ".tiff" || ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> list_rasters(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_raster(entry.path())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void require_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("missing directory " + dir.string());
}

std::string strip_prefix(const std::string& stem, std::string_view prefix) {
  return stem.rfind(prefix, 0) == 0 ? stem.substr(prefix.size()) : stem;
}

std::pair<int64_t, int64_t> raster_size(const fs::path& path) {
  const auto t = read_raster(path);
  return {t.size(1), t.size(2)};
}

struct SyntheticRef {
  uint64_t seed;
  int64_t index;
  int64_t size;
};

std::string make_synthetic_ref(uint64_t seed, int64_t index, int64_t size) {
  return std::string(kSyntheticPrefix) + std::to_string(seed) + ":" + std::to_string(index) + ":" +
         std::to_string(size);
}

SyntheticRef parse_synthetic_ref(const std::string& ref) {
  if (ref.rfind(kSyntheticPrefix, 0) != 0) throw DataError("not a synthetic reference: " + ref);
  std::istringstream in(ref.substr(kSyntheticPrefix.size()));
  SyntheticRef r{};
  char sep1 = 0, sep2 = 0;
  in >> r.seed >> sep1 >> r.index >> sep2 >> r.size;
  if (!in || sep1 != ':' || sep2 != ':' || r.size < 1) throw DataError("malformed synthetic reference: " + ref);
  return r;
}

struct Shape {
  bool ellipse;
  double cy, cx, ry, rx;

  bool contains(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  }
};

// Image and label for one synthetic patch.
std::pair<torch::Tensor, torch::Tensor> render_synthetic(const SyntheticRef& ref) {
  const int64_t s = ref.size;
  std::mt19937_64 rng(mix(ref.seed, static_cast<uint64_t>(ref.index)));

  auto label = torch::zeros({s, s}, torch::kFloat32);
  auto lab = label.accessor<float, 2>();
  for (int attempt = 0;; ++attempt) {
    const int n_shapes = 1 + static_cast<int>(rng() % 3);
    std::vector<Shape> shapes;
    for (int k = 0; k < n_shapes; ++k) {
      Shape sh{};
      sh.ellipse = (rng() & 1) != 0;
      sh.cy = uniform(rng, 0.15, 0.85) * s;
      sh.cx = uniform(rng, 0.15, 0.85) * s;
      sh.ry = uniform(rng, 0.1, 0.25) * s;
      sh.rx = uniform(rng, 0.1, 0.25) * s;
      shapes.push_back(sh);
    }
    int64_t fg = 0;
    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        const double py = y + 0.5, px = x + 0.5;
        const bool inside = std::any_of(shapes.begin(), shapes.end(),
                                        [&](const Shape& sh) { return sh.contains(py, px); });
        lab[y][x] = inside ? 1.0f : 0.0f;
        fg += inside;
      }
    }
    const double frac = static_cast<double>(fg) / static_cast<double>(s * s);
    if ((frac > 0.05 && frac < 0.6) || attempt >= 64) break;
  }

  auto image = torch::empty({3, s, s}, torch::kFloat32);
  auto img = image.accessor<float, 3>();
  for (int64_t c = 0; c < 3; ++c) {
    const double base = uniform(rng, 0.2, 0.45);
    const double lift = uniform(rng, 0.3, 0.45);
    const double fy = uniform(rng, 0.5, 3.0), fx = uniform(rng, 0.5, 3.0);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        const double smooth =
            0.08 * std::sin(2.0 * std::numbers::pi * (fy * y + fx * x) / static_cast<double>(s) + phase);
        const double grain = uniform(rng, -0.06, 0.06);
        double v = base + smooth + grain;
        if (lab[y][x] > 0.5f) v += lift + (((x + y) & 1) ? 0.03 : -0.03);
        img[c][y][x] = static_cast<float>(v);
      }
    }
  }
  return {image, label};
}

torch::Tensor crop(const torch::Tensor& t, int64_t row, int64_t col, int64_t size) {
  if (row < 0 || col < 0 || row + size > t.size(-2) || col + size > t.size(-1)) {
    throw DataError("patch at (" + std::to_string(row) + ", " + std::to_string(col) +
                    ") lies outside the scene");
  }
  return t.narrow(-2, row, size).narrow(-1, col, size);
}

torch::Tensor resize(const torch::Tensor& t, int64_t size, bool nearest) {
  auto batch = t.dim() == 2 ? t.unsqueeze(0).unsqueeze(0) : t.unsqueeze(0);
  namespace F = torch::nn::functional;
  auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{size, size});
  opts = nearest ? opts.mode(torch::kNearest) : opts.mode(torch::kArea);
  auto out = F::interpolate(batch, opts);
  return t.dim() == 2 ? out[0][0] : out[0];
}

}  // namespace

std::string_view kind_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::inria: return "inria";
    case DatasetKind::cloud38: return "cloud38";
    case DatasetKind::sentinel2_field: return "sentinel2-field";
    case DatasetKind::deepglobe_road: return "deepglobe-road";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "unknown";
}

DatasetKind parse_kind(std::string_view name) {
  for (auto k : {DatasetKind::inria, DatasetKind::cloud38, DatasetKind::sentinel2_field,
                 DatasetKind::deepglobe_road, DatasetKind::synthetic}) {
    if (kind_name(k) == name) return k;
  }
  throw ParameterError("unknown dataset kind '" + std::string(name) + "'");
}

std::string_view split_name(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  throw ParameterError("unknown split '" + std::string(name) + "'");
}

BandSpec BandSpec::for_kind(DatasetKind kind) {
  if (kind == DatasetKind::cloud38) return BandSpec{{4, 3, 2}};
  return BandSpec{{kRgbComposite}};
}

std::string PatchRecord::id() const {
  return scene_id + "_r" + std::to_string(row) + "_c" + std::to_string(col);
}

void DatasetManifest::validate() const {
  if (records.empty()) throw DataError("manifest has no records");
  std::set<std::tuple<std::string, int64_t, int64_t>> seen;
  for (const auto& r : records) {
    if (!seen.emplace(r.scene_id, r.row, r.col).second) {
      throw DataError("duplicate patch " + r.id() + " in manifest");
    }
  }
}

torch::Tensor read_raster(const fs::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw DataError("cannot read raster " + path.string());
  if (mat.channels() == 3) {
    cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB);
  } else if (mat.channels() == 4) {
    cv::cvtColor(mat, mat, cv::COLOR_BGRA2RGB);
  }
  cv::Mat f;
  mat.convertTo(f, CV_32F);
  const int64_t h = f.rows, w = f.cols, c = f.channels();
  return torch::from_blob(f.data, {h, w, c}, torch::kFloat32).permute({2, 0, 1}).clone();
}

torch::Tensor binarize_label(const torch::Tensor& raw, std::string_view source) {
  auto plane = raw.dim() == 3 ? raw[0] : raw;
  if (((plane == 0) | (plane == 1)).all().item<bool>()) return plane.to(torch::kFloat32);
  if (((plane == 0) | (plane == 255)).all().item<bool>()) return (plane > 127).to(torch::kFloat32);
  throw DataError("label " + std::string(source) + " has values outside {0,1} and {0,255}");
}

torch::Tensor compose_bands(const std::map<int, fs::path>& bands, const BandSpec& spec,
                            std::string_view scene_id) {
  std::vector<torch::Tensor> channels;
  for (int band : spec.bands) {
    auto it = bands.find(band);
    if (it == bands.end()) {
      throw DataError(band == kRgbComposite
                          ? "scene " + std::string(scene_id) + " has no RGB raster"
                          : "scene " + std::string(scene_id) + " is missing band " + std::to_string(band));
    }
    auto raster = read_raster(it->second);
    if (band == kRgbComposite) {
      if (raster.size(0) < 3) throw DataError("raster " + it->second.string() + " is not RGB");
      return raster.narrow(0, 0, 3).contiguous();
    }
    channels.push_back(raster[0]);
  }
  for (const auto& ch : channels) {
    if (ch.sizes() != channels.front().sizes()) {
      throw DataError("bands of scene " + std::string(scene_id) + " differ in size");
    }
  }
  return torch::stack(channels);
}

torch::Tensor compose_bands(const SceneRecord& scene, const BandSpec& spec) {
  return compose_bands(scene.bands, spec, scene.id);
}

std::vector<int64_t> tile_origins(int64_t length, int64_t patch) {
  if (patch < 1 || patch > length) {
    throw DataError("patch " + std::to_string(patch) + " does not fit in " + std::to_string(length) +
                    " pixels");
  }
  const int64_t n = (length + patch - 1) / patch;
  std::vector<int64_t> origins;
  for (int64_t k = 0; k + 1 < n; ++k) origins.push_back(k * patch);
  origins.push_back(length - patch);
  return origins;
}

std::vector<PatchRecord> tile_scene(const SceneRecord& scene, int64_t patch, TilePolicy) {
  if (patch > scene.width || patch > scene.height) {
    throw DataError("patch " + std::to_string(patch) + " exceeds scene " + scene.id + " (" +
                    std::to_string(scene.width) + "x" + std::to_string(scene.height) + ")");
  }
  std::map<int, std::string> bands;
  for (const auto& [id, path] : scene.bands) bands[id] = path.string();
  const std::string label = scene.label ? scene.label->string() : std::string();

  std::vector<PatchRecord> out;
  for (int64_t row : tile_origins(scene.height, patch)) {
    for (int64_t col : tile_origins(scene.width, patch)) {
      out.push_back(PatchRecord{scene.id, row, col, patch, bands, label});
    }
  }
  return out;
}

torch::Tensor normalize(const torch::Tensor& image, NormalizePolicy policy) {
  if (policy == NormalizePolicy::none) return image;
  const auto lo = image.amin({-2, -1}, true);
  const auto hi = image.amax({-2, -1}, true);
  const auto range = hi - lo;
  return torch::where(range > 0, (image - lo) / torch::where(range > 0, range, torch::ones_like(range)),
                      torch::zeros_like(image));
}

DatasetManifest fewshot_subset(const DatasetManifest& manifest, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ParameterError("few-shot fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  manifest.validate();
  DatasetManifest out = manifest;
  out.provenance = Provenance{seed, fraction};
  if (fraction == 1.0) return out;

  const size_t n = manifest.records.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(mix(seed, 0x6665777368ULL));
  for (size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);

  const auto take = static_cast<size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  if (take == 0) {
    throw DataError("fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                    " records selects nothing");
  }
  out.records.clear();
  for (size_t i = 0; i < take; ++i) out.records.push_back(manifest.records[order[i]]);
  return out;
}

DatasetManifest synthetic_fixture(int64_t count, int64_t size, uint64_t seed) {
  if (count < 1) throw DataError("synthetic fixture needs at least one record");
  if (size < 8) throw DataError("synthetic patches must be at least 8 pixels");
  DatasetManifest m;
  m.kind = DatasetKind::synthetic;
  m.split = Split::train;
  m.provenance = Provenance{seed, 1.0};
  for (int64_t i = 0; i < count; ++i) {
    const auto ref = make_synthetic_ref(seed, i, size);
    char scene[32];
    std::snprintf(scene, sizeof(scene), "syn%04lld", static_cast<long long>(i));
    m.records.push_back(PatchRecord{scene, 0, 0, size, {{kRgbComposite, ref}}, ref});
  }
  return m;
}

Sample load_patch(const PatchRecord& record, DatasetKind kind, const LoadOptions& options) {
  Sample sample;
  sample.id = record.id();
  if (kind == DatasetKind::synthetic) {
    auto it = record.bands.find(kRgbComposite);
    if (it == record.bands.end()) throw DataError("synthetic record " + record.id() + " has no ref");
    auto [image, label] = render_synthetic(parse_synthetic_ref(it->second));
    sample.image = crop(image, record.row, record.col, record.size);
    if (!record.label.empty()) sample.label = crop(label, record.row, record.col, record.size);
  } else {
    std::map<int, fs::path> bands;
    for (const auto& [id, path] : record.bands) bands[id] = path;
    auto scene = compose_bands(bands, BandSpec::for_kind(kind), record.scene_id);
    sample.image = crop(scene, record.row, record.col, record.size).contiguous();
    if (!record.label.empty()) {
      auto raw = read_raster(record.label);
      sample.label = crop(binarize_label(raw, record.label), record.row, record.col, record.size).contiguous();
    }
  }
  sample.image = normalize(sample.image, options.normalize);
  if (options.resize_to > 0 && options.resize_to != record.size) {
    sample.image = resize(sample.image, options.resize_to, false);
    if (sample.label.defined()) sample.label = resize(sample.label, options.resize_to, true);
  }
  return sample;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  nlohmann::json header{{"format", "rsam-manifest"},
                        {"version", 1},
                        {"kind", kind_name(manifest.kind)},
                        {"split", split_name(manifest.split)},
                        {"seed", manifest.provenance.seed},
                        {"fraction", manifest.provenance.fraction}};
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    nlohmann::json bands = nlohmann::json::object();
    for (const auto& [id, p] : r.bands) bands[std::to_string(id)] = p;
    nlohmann::json rec{{"scene", r.scene_id}, {"row", r.row},     {"col", r.col},
                       {"size", r.size},      {"bands", bands}, {"label", r.label}};
    out << rec.dump() << '\n';
  }
  if (!out) throw DataError("failed writing manifest " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  DatasetManifest m;
  std::string line;
  size_t line_no = 0;
  try {
    if (!std::getline(in, line)) throw DataError("manifest " + path.string() + " is empty");
    ++line_no;
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "rsam-manifest") {
      throw DataError("manifest " + path.string() + " has no rsam-manifest header");
    }
    m.kind = parse_kind(header.at("kind").get<std::string>());
    m.split = parse_split(header.at("split").get<std::string>());
    m.provenance.seed = header.value("seed", uint64_t{0});
    m.provenance.fraction = header.value("fraction", 1.0);
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      PatchRecord r;
      r.scene_id = j.at("scene").get<std::string>();
      r.row = j.at("row").get<int64_t>();
      r.col = j.at("col").get<int64_t>();
      r.size = j.at("size").get<int64_t>();
      for (const auto& [key, value] : j.at("bands").items()) r.bands[std::stoi(key)] = value.get<std::string>();
      r.label = j.value("label", std::string());
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + " line " + std::to_string(line_no) + ": " + e.what());
  } catch (const ParameterError& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

std::vector<SceneRecord> scan_scenes(DatasetKind kind, const fs::path& root, Split split) {
  const std::string sp(split_name(split));
  const bool labels_required = split == Split::train;
  std::vector<SceneRecord> scenes;

  auto attach_label = [&](SceneRecord& scene, const fs::path& label_dir, const std::string& stem_hint) {
    if (!fs::is_directory(label_dir)) {
      if (labels_required) throw DataError("missing label directory " + label_dir.string());
      return;
    }
    for (const auto& p : list_rasters(label_dir)) {
      if (p.stem().string() == stem_hint) {
        scene.label = p;
        return;
      }
    }
    if (labels_required) throw DataError("no label for scene " + scene.id + " in " + label_dir.string());
  };

  switch (kind) {
    case DatasetKind::cloud38: {
      const std::map<int, std::string> band_dirs{{4, "red"}, {3, "green"}, {2, "blue"}};
      const fs::path red_dir = root / (sp + "_red");
      require_dir(red_dir);
      const fs::path gt_dir = root / (sp + "_gt");
      if (labels_required) require_dir(gt_dir);
      for (const auto& red : list_rasters(red_dir)) {
        SceneRecord scene;
        scene.id = strip_prefix(red.stem().string(), "red_");
        for (const auto& [band, colour] : band_dirs) {
          const fs::path dir = root / (sp + "_" + colour);
          require_dir(dir);
          for (const auto& p : list_rasters(dir)) {
            if (strip_prefix(p.stem().string(), colour + "_") == scene.id) scene.bands[band] = p;
          }
          if (!scene.bands.count(band)) {
            throw DataError("scene " + scene.id + " is missing band " + std::to_string(band) + " in " +
                            dir.string());
          }
        }
        if (fs::is_directory(gt_dir)) {
          for (const auto& p : list_rasters(gt_dir)) {
            if (strip_prefix(p.stem().string(), "gt_") == scene.id) scene.label = p;
          }
        }
        if (labels_required && !scene.label) {
          throw DataError("no label for scene " + scene.id + " in " + gt_dir.string());
        }
        scenes.push_back(std::move(scene));
      }
      break;
    }
    case DatasetKind::inria:
    case DatasetKind::sentinel2_field: {
      const fs::path image_dir = root / sp / "images";
      const fs::path label_dir = root / sp / (kind == DatasetKind::inria ? "gt" : "masks");
      require_dir(image_dir);
      for (const auto& p : list_rasters(image_dir)) {
        SceneRecord scene;
        scene.id = p.stem().string();
        scene.bands[kRgbComposite] = p;
        attach_label(scene, label_dir, scene.id);
        scenes.push_back(std::move(scene));
      }
      break;
    }
    case DatasetKind::deepglobe_road: {
      const fs::path dir = root / sp;
      require_dir(dir);
      const auto files = list_rasters(dir);
      for (const auto& p : files) {
        const auto stem = p.stem().string();
        if (stem.size() < 4 || stem.substr(stem.size() - 4) != "_sat") continue;
        SceneRecord scene;
        scene.id = stem.substr(0, stem.size() - 4);
        scene.bands[kRgbComposite] = p;
        for (const auto& q : files) {
          if (q.stem().string() == scene.id + "_mask") scene.label = q;
        }
        if (labels_required && !scene.label) {
          throw DataError("no mask " + scene.id + "_mask for scene in " + dir.string());
        }
        scenes.push_back(std::move(scene));
      }
      break;
    }
    case DatasetKind::synthetic:
      throw DataError("synthetic datasets are generated, not scanned");
  }
  if (scenes.empty()) throw DataError("no scenes found under " + root.string());

  for (auto& scene : scenes) {
    std::optional<std::pair<int64_t, int64_t>> dims;
    for (const auto& [band, path] : scene.bands) {
      const auto hw = raster_size(path);
      if (dims && *dims != hw) throw DataError("bands of scene " + scene.id + " differ in size");
      dims = hw;
    }
    scene.height = dims->first;
    scene.width = dims->second;
    if (scene.label && raster_size(*scene.label) != *dims) {
      throw DataError("label of scene " + scene.id + " does not match its image size");
    }
  }
  return scenes;
}

DatasetManifest build_manifest(DatasetKind kind, const std::vector<SceneRecord>& scenes, Split split,
                               int64_t patch) {
  DatasetManifest m;
  m.kind = kind;
  m.split = split;
  for (const auto& scene : scenes) {
    auto tiles = tile_scene(scene, patch);
    m.records.insert(m.records.end(), tiles.begin(), tiles.end());
  }
  m.validate();
  return m;
}

}  // namespace rsam
