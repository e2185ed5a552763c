#include "rsam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "rsam/config_io.hpp"
#include "rsam/errors.hpp"

namespace fs = std::filesystem;

namespace rsam {

namespace {

constexpr char kMagic[8] = {'R', 'S', 'A', 'M', 'C', 'K', 'P', 'T'};
constexpr char kTrailer[8] = {'R', 'S', 'A', 'M', 'E', 'N', 'D', '\0'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kFloat32 = 1;
constexpr uint8_t kFloat64 = 2;

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

void put_elements(std::string& out, const torch::Tensor& t) {
  const auto c = t.contiguous();
  const auto* data = static_cast<const char*>(c.data_ptr());
  const size_t elem = c.element_size();
  if constexpr (std::endian::native == std::endian::little) {
    out.append(data, c.numel() * elem);
  } else {
    for (int64_t i = 0; i < c.numel(); ++i) {
      std::string e(data + i * elem, elem);
      std::reverse(e.begin(), e.end());
      out += e;
    }
  }
}

class Reader {
 public:
  Reader(const std::string& bytes, const fs::path& path) : bytes_(bytes), path_(path) {}

  template <typename T>
  T get() {
    char raw[sizeof(T)];
    take(raw, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  void take(char* dst, size_t n) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError("checkpoint " + path_.string() + " is truncated at byte " +
                            std::to_string(pos_));
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::string string(size_t n) {
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  const fs::path& path_;
  size_t pos_ = 0;
};

nlohmann::json meta_to_json(const CheckpointMeta& meta) {
  return {{"step", meta.step}, {"seed", meta.seed}, {"metrics", meta.metrics}};
}

CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  if (j.is_null()) return m;
  m.step = j.value("step", int64_t{0});
  m.seed = j.value("seed", uint64_t{0});
  if (j.contains("metrics")) m.metrics = j.at("metrics").get<std::map<std::string, double>>();
  return m;
}

std::string shape_string(at::IntArrayRef sizes) {
  std::string s = "[";
  for (size_t i = 0; i < sizes.size(); ++i) s += (i ? ", " : "") + std::to_string(sizes[i]);
  return s + "]";
}

std::map<std::string, torch::Tensor> model_state(RsamSegImpl& model) {
  std::map<std::string, torch::Tensor> state;
  for (auto& item : model.named_parameters(true)) state[item.key()] = item.value();
  for (auto& item : model.named_buffers(true)) state[item.key()] = item.value();
  return state;
}

}  // namespace

const NamedTensor* CheckpointArchive::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_archive(const CheckpointArchive& archive, const fs::path& path) {
  std::string out(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kVersion);
  const std::string header = nlohmann::json{{"config", archive.config}, {"meta", meta_to_json(archive.meta)}}.dump();
  put<uint64_t>(out, header.size());
  out += header;
  put<uint64_t>(out, archive.tensors.size());
  for (const auto& t : archive.tensors) {
    const auto value = t.value.detach().cpu();
    uint8_t dtype = 0;
    if (value.scalar_type() == torch::kFloat32) {
      dtype = kFloat32;
    } else if (value.scalar_type() == torch::kFloat64) {
      dtype = kFloat64;
    } else {
      throw CheckpointError("tensor '" + t.name + "' has an unsupported dtype");
    }
    put<uint32_t>(out, static_cast<uint32_t>(t.name.size()));
    out += t.name;
    put<uint8_t>(out, dtype);
    put<uint32_t>(out, static_cast<uint32_t>(value.dim()));
    for (auto d : value.sizes()) put<int64_t>(out, d);
    put_elements(out, value);
  }
  out.append(kTrailer, sizeof(kTrailer));

  // Write beside the target and rename so readers never see a partial file.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

CheckpointArchive read_archive(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);

  char magic[8];
  r.take(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint archive");
  }
  const auto version = r.get<uint32_t>();
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  CheckpointArchive archive;
  const auto header_len = r.get<uint64_t>();
  try {
    const auto header = nlohmann::json::parse(r.string(header_len));
    archive.config = header.at("config");
    archive.meta = meta_from_json(header.value("meta", nlohmann::json()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint header is malformed: " + std::string(e.what()));
  }

  const auto count = r.get<uint64_t>();
  std::set<std::string> names;
  for (uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.string(r.get<uint32_t>());
    if (!names.insert(t.name).second) throw CheckpointError("duplicate tensor '" + t.name + "'");
    const auto dtype = r.get<uint8_t>();
    if (dtype != kFloat32 && dtype != kFloat64) {
      throw CheckpointError("tensor '" + t.name + "' has unknown dtype code " + std::to_string(dtype));
    }
    const auto rank = r.get<uint32_t>();
    if (rank > 8) throw CheckpointError("tensor '" + t.name + "' has implausible rank");
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) {
      d = r.get<int64_t>();
      if (d < 0) throw CheckpointError("tensor '" + t.name + "' has a negative dimension");
    }
    t.value = torch::empty(dims, dtype == kFloat32 ? torch::kFloat32 : torch::kFloat64);
    const size_t elem = t.value.element_size();
    auto* dst = static_cast<char*>(t.value.data_ptr());
    r.take(dst, static_cast<size_t>(t.value.numel()) * elem);
    if constexpr (std::endian::native == std::endian::big) {
      for (int64_t k = 0; k < t.value.numel(); ++k) std::reverse(dst + k * elem, dst + (k + 1) * elem);
    }
    archive.tensors.push_back(std::move(t));
  }
  char trailer[8];
  r.take(trailer, sizeof(trailer));
  if (std::memcmp(trailer, kTrailer, sizeof(kTrailer)) != 0 || !r.at_end()) {
    throw CheckpointError("checkpoint " + path.string() + " has a corrupt trailer");
  }
  return archive;
}

CheckpointArchive export_model(RsamSegImpl& model, const CheckpointMeta& meta) {
  CheckpointArchive archive;
  archive.config = to_json(model.config());
  archive.meta = meta;
  for (const auto& [name, value] : model_state(model)) archive.tensors.push_back({name, value.detach().clone()});
  return archive;
}

CheckpointArchive export_backbone(RsamSegImpl& model) {
  CheckpointArchive archive;
  for (auto& item : model.named_parameters(true)) {
    if (group_of(item.key()) == ParamGroup::backbone) {
      archive.tensors.push_back({item.key(), item.value().detach().clone()});
    }
  }
  return archive;
}

void save_checkpoint(RsamSegImpl& model, const fs::path& path, const CheckpointMeta& meta) {
  write_archive(export_model(model, meta), path);
}

void load_tensors(RsamSegImpl& model, const CheckpointArchive& archive) {
  auto state = model_state(model);
  for (const auto& t : archive.tensors) {
    auto it = state.find(t.name);
    if (it == state.end()) throw CheckpointError("checkpoint has unexpected tensor '" + t.name + "'");
    if (it->second.sizes() != t.value.sizes()) {
      throw CheckpointError("tensor '" + t.name + "' has shape " + shape_string(t.value.sizes()) +
                            ", model expects " + shape_string(it->second.sizes()));
    }
  }
  for (const auto& [name, value] : state) {
    if (!archive.find(name)) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
  }
  torch::NoGradGuard no_grad;
  for (const auto& t : archive.tensors) {
    auto& dst = state.at(t.name);
    dst.copy_(t.value.to(dst.scalar_type()));
  }
}

RsamSeg load_checkpoint(const fs::path& path, CheckpointMeta* meta) {
  const auto archive = read_archive(path);
  if (archive.config.is_null()) throw CheckpointError("checkpoint " + path.string() + " has no model config");
  ModelConfig config;
  try {
    config = model_config_from_json(archive.config);
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint config is incompatible: " + std::string(e.what()));
  }
  RsamSeg model(config);
  const bool wide = !archive.tensors.empty() && archive.tensors.front().value.scalar_type() == torch::kFloat64;
  if (wide) model->to(torch::kFloat64);
  load_tensors(*model, archive);
  if (meta) *meta = archive.meta;
  return model;
}

ImportReport import_backbone(RsamSegImpl& model, const CheckpointArchive& archive,
                             const std::map<std::string, std::string>& name_map) {
  std::map<std::string, torch::Tensor> params;
  for (auto& item : model.named_parameters(true)) params[item.key()] = item.value();

  ImportReport report;
  std::vector<std::pair<const NamedTensor*, torch::Tensor>> writes;
  std::set<std::string> written;
  for (const auto& t : archive.tensors) {
    const auto mapped = name_map.find(t.name);
    const bool explicit_map = mapped != name_map.end();
    const std::string dest = explicit_map ? mapped->second : t.name;
    auto it = params.find(dest);
    if (it == params.end() || (!explicit_map && group_of(dest) != ParamGroup::backbone)) {
      report.unused.push_back(t.name);
      continue;
    }
    if ((dest == "decoder.context_token" || dest == "decoder.mask_token") &&
        !model.config().decoder.inherit_tokens) {
      report.skipped.push_back(dest);
      continue;
    }
    if (it->second.sizes() != t.value.sizes()) {
      throw ImportError("cannot import '" + t.name + "' into '" + dest + "': shape " +
                        shape_string(t.value.sizes()) + " vs " + shape_string(it->second.sizes()));
    }
    writes.emplace_back(&t, it->second);
    written.insert(dest);
    report.matched.push_back(dest);
  }
  for (const auto& [name, value] : params) {
    if (group_of(name) == ParamGroup::backbone && !written.count(name)) report.missing.push_back(name);
  }
  torch::NoGradGuard no_grad;
  for (auto& [src, dst] : writes) dst.copy_(src->value.to(dst.scalar_type()));
  return report;
}

}  // namespace rsam
