#pragma once

// Dataset manifests and the SADE embedding interchange format.
//
// SADE layout (little-endian):
//   "SADE" | version u32 | image id (u32 length + UTF-8) |
//   original height u32 | original width u32 |
//   downscale numerator u32 | downscale denominator u32 | token size u32 |
//   patch size P u32 | min overlap O u32 |
//   n_y u32 | starts_y u32[n_y] | n_x u32 | starts_x u32[n_x] |
//   layer count u32 | per layer: layer id u32, rows u32, cols u32, D u32 |
//   payload: for each patch (row-major), for each layer: rows*cols*D f32

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoseg/binary_io.hpp"
#include "protoseg/embeddings.hpp"
#include "protoseg/error.hpp"
#include "protoseg/tiler.hpp"

namespace protoseg {

enum class Split { train, test_public, test_private, test_private_mixed };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test_public: return "test_public";
    case Split::test_private: return "test_private";
    case Split::test_private_mixed: return "test_private_mixed";
  }
  return "unknown";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test_public") return Split::test_public;
  if (s == "test_private") return Split::test_private;
  if (s == "test_private_mixed") return Split::test_private_mixed;
  fail_data("unknown split \"" + s + "\"");
}

struct ManifestEntry {
  std::string image_id;
  ImageGeom original;
  std::filesystem::path embeddings;                   // absolute or relative to the working directory
  std::optional<std::filesystem::path> ground_truth;  // test splits only
};

struct DatasetManifest {
  std::string class_name;
  Split split = Split::train;
  std::vector<ManifestEntry> entries;

  const ManifestEntry& entry(const std::string& id) const {
    for (const auto& e : entries) {
      if (e.image_id == id) return e;
    }
    fail_data("manifest has no image \"" + id + "\"");
  }
  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& e : entries) out.push_back(e.image_id);
    return out;
  }
};

// Paths inside the manifest are written relative to `base`.
inline nlohmann::json manifest_to_json(const DatasetManifest& m, const std::filesystem::path& base) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json j = {{"image_id", e.image_id},
                        {"height", e.original.height},
                        {"width", e.original.width},
                        {"embeddings", std::filesystem::relative(e.embeddings, base).generic_string()}};
    if (e.ground_truth) j["ground_truth"] = std::filesystem::relative(*e.ground_truth, base).generic_string();
    entries.push_back(std::move(j));
  }
  return {{"class_name", m.class_name}, {"split", to_string(m.split)}, {"entries", std::move(entries)}};
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  write_text_atomic(path, manifest_to_json(m, base).dump(2) + "\n");
}

inline DatasetManifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base,
                                      const std::string& source) {
  auto need = [&](const nlohmann::json& obj, const char* key, const std::string& where) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(key)) fail_data(source + ": missing field \"" + key + "\"" + where);
    return obj.at(key);
  };
  DatasetManifest m;
  try {
    m.class_name = need(j, "class_name", "").get<std::string>();
    m.split = parse_split(need(j, "split", "").get<std::string>());
    const auto& entries = need(j, "entries", "");
    if (!entries.is_array()) fail_data(source + ": \"entries\" must be an array");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      const std::string where = " in entry " + std::to_string(i);
      ManifestEntry entry;
      entry.image_id = need(e, "image_id", where).get<std::string>();
      if (!seen.insert(entry.image_id).second) fail_data(source + ": duplicate image_id \"" + entry.image_id + "\"");
      entry.original = {need(e, "height", where).get<std::uint32_t>(), need(e, "width", where).get<std::uint32_t>()};
      entry.original.validate();
      entry.embeddings = base / need(e, "embeddings", where).get<std::string>();
      if (!std::filesystem::exists(entry.embeddings)) {
        fail_data(source + ": dangling embeddings path " + entry.embeddings.string() + " for " + entry.image_id);
      }
      if (e.contains("ground_truth") && !e.at("ground_truth").is_null()) {
        if (m.split == Split::train) {
          fail_data(source + ": train split must be anomaly-free (" + entry.image_id + " has a ground-truth mask)");
        }
        entry.ground_truth = base / e.at("ground_truth").get<std::string>();
        if (!std::filesystem::exists(*entry.ground_truth)) {
          fail_data(source + ": dangling ground_truth path " + entry.ground_truth->string() + " for " +
                    entry.image_id);
        }
      }
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    fail_data(source + ": malformed manifest: " + e.what());
  }
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) fail_data(path.string() + ": not valid JSON");
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  return parse_manifest(j, base, path.string());
}

inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline std::vector<char> encode_embeddings(const ImageEmbeddings& img) {
  ByteWriter w;
  w.magic("SADE");
  w.u32(kEmbeddingVersion);
  w.string(img.image_id);
  w.u32(img.original.height);
  w.u32(img.original.width);
  w.u32(img.downscale_num);
  w.u32(img.downscale_den);
  w.u32(img.token_size);
  w.u32(img.grid.patch_size);
  w.u32(img.grid.min_overlap);
  w.u32(static_cast<std::uint32_t>(img.grid.starts_y.size()));
  for (auto s : img.grid.starts_y) w.u32(s);
  w.u32(static_cast<std::uint32_t>(img.grid.starts_x.size()));
  for (auto s : img.grid.starts_x) w.u32(s);
  w.u32(static_cast<std::uint32_t>(img.layer_ids.size()));
  const std::uint32_t side = img.grid.patch_size / img.token_size;
  for (std::size_t l = 0; l < img.layer_ids.size(); ++l) {
    w.u32(img.layer_ids[l]);
    w.u32(side);
    w.u32(side);
    w.u32(static_cast<std::uint32_t>(img.layer_dims[l]));
  }
  if (img.patches.size() != img.grid.count()) fail_internal("embedding patch count does not match grid");
  for (const auto& patch : img.patches) {
    if (patch.size() != img.layer_ids.size()) fail_internal("embedding patch is missing layers");
    for (std::size_t l = 0; l < patch.size(); ++l) {
      if (patch[l].rows != side || patch[l].cols != side || patch[l].channels != img.layer_dims[l]) {
        fail_internal("embedding patch shape does not match header");
      }
      w.floats(patch[l].data);
    }
  }
  return w.bytes();
}

inline ImageEmbeddings decode_embeddings(std::span<const char> bytes, const std::string& source) {
  ByteReader r(bytes, source);
  r.expect_magic("SADE");
  const auto version = r.u32("version");
  if (version != kEmbeddingVersion) fail_data(source + ": unsupported SADE version " + std::to_string(version));
  ImageEmbeddings img;
  img.image_id = r.string("image id");
  img.original.height = r.u32("original height");
  img.original.width = r.u32("original width");
  img.original.validate();
  img.downscale_num = r.u32("downscale numerator");
  img.downscale_den = r.u32("downscale denominator");
  img.token_size = r.u32("token size");
  if (img.token_size == 0) fail_data(source + ": token size must be positive");
  img.scaled = scaled_geom(img.original, img.downscale_num, img.downscale_den);
  img.grid.patch_size = r.u32("patch size");
  img.grid.min_overlap = r.u32("min overlap");
  auto read_starts = [&](const char* what) {
    const auto n = r.u32(what);
    if (n > r.remaining() / 4) fail_data(source + ": truncated while reading " + what + " at byte offset " +
                                         std::to_string(r.offset()));
    std::vector<std::uint32_t> starts(n);
    for (auto& s : starts) s = r.u32(what);
    return starts;
  };
  img.grid.starts_y = read_starts("starts_y");
  img.grid.starts_x = read_starts("starts_x");

  const PatchGrid expected = build_grid(img.scaled, img.grid.patch_size, img.grid.min_overlap);
  if (!(expected == img.grid)) {
    fail_data(source + ": declared patch grid does not match the grid for " +
              shape_string(img.scaled.height, img.scaled.width) + " with P=" + std::to_string(img.grid.patch_size) +
              ", O=" + std::to_string(img.grid.min_overlap));
  }
  if (img.grid.patch_size % img.token_size != 0) fail_data(source + ": patch size is not a multiple of token size");
  const std::uint32_t side = img.grid.patch_size / img.token_size;

  const auto layer_count = r.u32("layer count");
  if (layer_count == 0) fail_data(source + ": no layers");
  for (std::uint32_t l = 0; l < layer_count; ++l) {
    const auto id = r.u32("layer id");
    const auto rows = r.u32("layer rows");
    const auto cols = r.u32("layer cols");
    const auto dim = r.u32("layer dim");
    if (!img.layer_ids.empty() && id <= img.layer_ids.back()) {
      fail_data(source + ": layer ids must be strictly increasing");
    }
    if (rows != side || cols != side) {
      fail_data(source + ": layer " + std::to_string(id) + " token grid " + shape_string(rows, cols) +
                " does not match " + shape_string(side, side) + " tokens per patch");
    }
    if (dim == 0) fail_data(source + ": layer " + std::to_string(id) + " has zero dimension");
    img.layer_ids.push_back(id);
    img.layer_dims.push_back(dim);
  }
  img.patches.resize(img.grid.count());
  for (auto& patch : img.patches) {
    patch.reserve(layer_count);
    for (std::size_t l = 0; l < layer_count; ++l) {
      const std::size_t n = static_cast<std::size_t>(side) * side * img.layer_dims[l];
      auto values = r.floats(n, "embedding payload");
      for (float v : values) {
        if (!std::isfinite(v)) fail_data(source + ": NaN/Inf in embedding payload");
      }
      patch.emplace_back(side, side, img.layer_dims[l], std::move(values));
    }
  }
  r.expect_end();
  return img;
}

inline void write_embeddings(const std::filesystem::path& path, const ImageEmbeddings& img) {
  write_file_atomic(path, encode_embeddings(img));
}

inline ImageEmbeddings read_embeddings(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_embeddings(bytes, path.string());
}

}  // namespace protoseg
