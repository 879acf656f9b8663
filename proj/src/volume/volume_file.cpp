#include <bit>
#include <cstring>
#include <fstream>

#include "zeco/checkpoint.hpp"
#include "zeco/error.hpp"
#include "zeco/volume.hpp"

namespace zeco {

static_assert(std::endian::native == std::endian::little);

namespace {

constexpr char kMagic[8] = {'Z', 'E', 'C', 'O', 'V', 'O', 'L', '\0'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json normalization_json(const NormalizationRecord& n) {
  return {{"method", n.method}, {"lo", n.lo}, {"hi", n.hi}};
}

NormalizationRecord normalization_from(const nlohmann::json& j) {
  return {j.at("method").get<std::string>(), j.at("lo").get<double>(), j.at("hi").get<double>()};
}

void write_container(const nlohmann::json& meta, const void* payload, std::size_t nbytes,
                     const std::filesystem::path& path) {
  const std::string text = meta.dump();
  std::vector<std::uint8_t> file;
  file.reserve(16 + text.size() + nbytes);
  file.insert(file.end(), kMagic, kMagic + 8);
  const std::uint32_t version = kVersion;
  const auto meta_len = static_cast<std::uint32_t>(text.size());
  file.insert(file.end(), reinterpret_cast<const std::uint8_t*>(&version),
              reinterpret_cast<const std::uint8_t*>(&version) + 4);
  file.insert(file.end(), reinterpret_cast<const std::uint8_t*>(&meta_len),
              reinterpret_cast<const std::uint8_t*>(&meta_len) + 4);
  file.insert(file.end(), text.begin(), text.end());
  const auto* p = static_cast<const std::uint8_t*>(payload);
  file.insert(file.end(), p, p + nbytes);
  write_file_atomic(path, file);
}

}  // namespace

void save_volume(const Volume3D& v, const std::filesystem::path& path) {
  v.validate();
  const auto data = v.data.contiguous();
  const nlohmann::json meta = {
      {"kind", "volume"},
      {"dtype", "float32"},
      {"shape", data.sizes().vec()},
      {"intensity_range", {v.intensity_range.first, v.intensity_range.second}},
      {"modality_tag", v.modality_tag},
      {"normalization", normalization_json(v.normalization)},
  };
  write_container(meta, data.data_ptr<float>(), static_cast<std::size_t>(data.numel()) * sizeof(float), path);
}

void save_mask(const SegMask3D& m, const std::filesystem::path& path) {
  m.validate();
  const auto labels = m.labels.contiguous();
  const nlohmann::json meta = {
      {"kind", "mask"},
      {"dtype", "uint8"},
      {"shape", labels.sizes().vec()},
      {"num_classes", m.num_classes},
  };
  write_container(meta, labels.data_ptr<std::uint8_t>(), static_cast<std::size_t>(labels.numel()), path);
}

std::variant<Volume3D, SegMask3D> load_any(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw Error(ErrorCode::HeaderError, path.string() + ": bad magic bytes");
  }
  std::uint32_t version = 0, meta_len = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&meta_len, bytes.data() + 12, 4);
  if (version != kVersion) {
    throw Error(ErrorCode::HeaderError, path.string() + ": unsupported version " + std::to_string(version));
  }
  if (16 + static_cast<std::size_t>(meta_len) > bytes.size()) {
    throw Error(ErrorCode::TruncatedPayload, path.string() + ": metadata block truncated");
  }

  nlohmann::json meta;
  std::vector<std::int64_t> shape;
  std::string kind, dtype;
  try {
    meta = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + meta_len);
    kind = meta.at("kind").get<std::string>();
    dtype = meta.at("dtype").get<std::string>();
    shape = meta.at("shape").get<std::vector<std::int64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MetadataError, path.string() + ": " + e.what());
  }

  const std::size_t elem = dtype == "float32" ? 4 : dtype == "uint8" ? 1 : 0;
  if (elem == 0) throw Error(ErrorCode::MetadataError, path.string() + ": unknown dtype " + dtype);
  std::size_t count = 1;
  for (auto d : shape) {
    if (d < 0) throw Error(ErrorCode::MetadataError, path.string() + ": negative extent");
    count *= static_cast<std::size_t>(d);
  }
  const std::size_t payload_bytes = bytes.size() - 16 - meta_len;
  if (payload_bytes < count * elem) {
    throw Error(ErrorCode::TruncatedPayload, path.string() + ": payload has " + std::to_string(payload_bytes) +
                                                 " bytes, shape needs " + std::to_string(count * elem));
  }
  if (payload_bytes > count * elem) {
    throw Error(ErrorCode::ShapeMismatch, path.string() + ": payload larger than declared shape");
  }
  const auto* payload = bytes.data() + 16 + meta_len;

  try {
    if (kind == "volume" && dtype == "float32" && shape.size() == 4) {
      Volume3D v;
      v.data = torch::empty(shape, torch::kFloat32);
      std::memcpy(v.data.data_ptr<float>(), payload, count * elem);
      const auto range = meta.at("intensity_range").get<std::vector<double>>();
      v.intensity_range = {range.at(0), range.at(1)};
      v.modality_tag = meta.at("modality_tag").get<std::string>();
      v.normalization = normalization_from(meta.at("normalization"));
      return v;
    }
    if (kind == "mask" && dtype == "uint8" && shape.size() == 3) {
      SegMask3D m;
      m.labels = torch::empty(shape, torch::kUInt8);
      std::memcpy(m.labels.data_ptr<std::uint8_t>(), payload, count);
      m.num_classes = meta.at("num_classes").get<int>();
      m.validate();
      return m;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MetadataError, path.string() + ": " + e.what());
  }
  throw Error(ErrorCode::MetadataError, path.string() + ": inconsistent kind/dtype/rank");
}

Volume3D load_volume(const std::filesystem::path& path) {
  auto any = load_any(path);
  if (auto* v = std::get_if<Volume3D>(&any)) return std::move(*v);
  throw Error(ErrorCode::MetadataError, path.string() + " holds a mask, expected a volume");
}

SegMask3D load_mask(const std::filesystem::path& path) {
  auto any = load_any(path);
  if (auto* m = std::get_if<SegMask3D>(&any)) return std::move(*m);
  throw Error(ErrorCode::MetadataError, path.string() + " holds a volume, expected a mask");
}

}  // namespace zeco
