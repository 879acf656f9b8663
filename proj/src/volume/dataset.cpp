#include <cstdio>
#include <fstream>
#include <set>

#include "zeco/checkpoint.hpp"
#include "zeco/error.hpp"
#include "zeco/seed.hpp"
#include "zeco/volume.hpp"

namespace zeco {

std::filesystem::path resolve_entry_path(const std::filesystem::path& manifest_dir, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : manifest_dir / path;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json entries_json = nlohmann::json::array();
  for (const auto& e : entries) {
    entries_json.push_back({{"volume_path", e.volume_path},
                            {"mask_path", e.mask_path},
                            {"seed", e.seed},
                            {"modality_tag", e.modality_tag},
                            {"normalization", {{"method", e.normalization.method},
                                               {"lo", e.normalization.lo},
                                               {"hi", e.normalization.hi}}}});
  }
  return {{"entries", entries_json},
          {"normalization", {{"method", normalization_method}}},
          {"grid_shape", grid_shape}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.normalization_method = j.at("normalization").at("method").get<std::string>();
    m.grid_shape = j.at("grid_shape").get<std::array<std::int64_t, 3>>();
    for (const auto& e : j.at("entries")) {
      DatasetEntry entry;
      entry.volume_path = e.at("volume_path").get<std::string>();
      entry.mask_path = e.at("mask_path").get<std::string>();
      entry.seed = e.at("seed").get<std::uint64_t>();
      entry.modality_tag = e.at("modality_tag").get<std::string>();
      const auto& n = e.at("normalization");
      entry.normalization = {n.at("method").get<std::string>(), n.at("lo").get<double>(), n.at("hi").get<double>()};
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MetadataError, std::string("malformed dataset manifest: ") + e.what());
  }
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  write_text_atomic(path, to_json().dump(2));
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MetadataError, path.string() + ": " + e.what());
  }
  return from_json(j);
}

void DatasetManifest::validate() const {
  std::set<std::string> paths;
  std::set<std::uint64_t> seeds;
  for (const auto& e : entries) {
    if (!paths.insert(e.volume_path).second || !paths.insert(e.mask_path).second) {
      throw Error(ErrorCode::PathCollision, "duplicate path in manifest near " + e.volume_path);
    }
    if (!seeds.insert(e.seed).second) {
      throw Error(ErrorCode::InvalidArgument, "duplicate seed " + std::to_string(e.seed) + " in manifest");
    }
  }
}

void DatasetManifest::verify_files(const std::filesystem::path& manifest_dir) const {
  validate();
  const std::vector<std::int64_t> spatial(grid_shape.begin(), grid_shape.end());
  for (const auto& e : entries) {
    const auto vol = load_volume(resolve_entry_path(manifest_dir, e.volume_path));
    const auto mask = load_mask(resolve_entry_path(manifest_dir, e.mask_path));
    if (vol.data.sizes().slice(1).vec() != spatial || mask.labels.sizes().vec() != spatial) {
      throw Error(ErrorCode::ShapeMismatch, e.volume_path + " does not match manifest grid shape");
    }
  }
}

DatasetManifest build_dataset(const PhantomSpec& spec, int n, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
  if (n < 1) throw Error(ErrorCode::InvalidArgument, "dataset size must be >= 1");
  spec.validate();
  std::filesystem::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.grid_shape = spec.grid_shape;
  std::set<std::string> planned;
  for (int i = 0; i < n; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "phantom_%04d", i);
    DatasetEntry entry;
    entry.volume_path = std::string(stem) + ".vol";
    entry.mask_path = std::string(stem) + "_mask.vol";
    entry.seed = derive_seed(seed, "phantom", static_cast<std::uint64_t>(i));
    entry.modality_tag = spec.modality_tag;
    if (!planned.insert(entry.volume_path).second || !planned.insert(entry.mask_path).second) {
      throw Error(ErrorCode::PathCollision, "output path collision for " + entry.volume_path);
    }
    manifest.entries.push_back(entry);
  }
  manifest.validate();

  // Rebuilding the same dataset in place is fine; overwriting a different one is not.
  const auto manifest_path = out_dir / "manifest.json";
  if (std::filesystem::exists(manifest_path)) {
    const auto existing = DatasetManifest::load(manifest_path);
    bool same = existing.entries.size() == manifest.entries.size() && existing.grid_shape == manifest.grid_shape;
    for (std::size_t i = 0; same && i < existing.entries.size(); ++i) {
      same = existing.entries[i].volume_path == manifest.entries[i].volume_path &&
             existing.entries[i].seed == manifest.entries[i].seed;
    }
    if (!same) {
      throw Error(ErrorCode::PathCollision, out_dir.string() + " already holds a different dataset");
    }
  }

  for (auto& entry : manifest.entries) {
    auto [raw, mask] = generate_phantom(spec, entry.seed);
    auto vol = normalize(raw);
    entry.normalization = vol.normalization;
    save_volume(vol, out_dir / entry.volume_path);
    save_mask(mask, out_dir / entry.mask_path);
  }
  manifest.save(manifest_path);
  return manifest;
}

}  // namespace zeco
