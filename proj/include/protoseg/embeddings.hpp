#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protoseg/tiler.hpp"

namespace protoseg {

// Backbone output for one image: per patch, per layer token embeddings.
struct ImageEmbeddings {
  std::string image_id;
  ImageGeom original;  // geometry of the source photograph
  ImageGeom scaled;    // geometry the backbone saw
  std::uint32_t downscale_num = 5;
  std::uint32_t downscale_den = 8;
  std::uint32_t token_size = kTokenSize;
  PatchGrid grid;
  std::vector<std::uint32_t> layer_ids;            // strictly increasing
  std::vector<std::size_t> layer_dims;             // parallel to layer_ids
  std::vector<std::vector<TokenField>> patches;    // [row-major patch][layer position]

  std::size_t layer_position(std::uint32_t layer_id) const {
    for (std::size_t i = 0; i < layer_ids.size(); ++i) {
      if (layer_ids[i] == layer_id) return i;
    }
    fail_data("image " + image_id + " has no embeddings for layer " + std::to_string(layer_id));
  }

  friend bool operator==(const ImageEmbeddings&, const ImageEmbeddings&) = default;
};

// round(length * num / den), halves rounding up.
inline std::uint32_t scaled_length(std::uint32_t length, std::uint32_t num, std::uint32_t den) {
  if (den == 0 || num == 0) fail_data("downscale factor must be a positive fraction");
  return static_cast<std::uint32_t>((2ull * length * num + den) / (2ull * den));
}

inline ImageGeom scaled_geom(const ImageGeom& original, std::uint32_t num, std::uint32_t den) {
  return {scaled_length(original.height, num, den), scaled_length(original.width, num, den)};
}

// Geometry of output-scale maps and masks: ceil(original / 4).
inline ImageGeom output_geom(const ImageGeom& original) {
  return {(original.height + 3) / 4, (original.width + 3) / 4};
}

// One layer stitched into a full-image token grid.
inline TokenField assemble_layer(const ImageEmbeddings& img, std::uint32_t layer_id,
                                 Alignment alignment = Alignment::strict) {
  const std::size_t pos = img.layer_position(layer_id);
  if (img.patches.size() != img.grid.count()) {
    fail_data("image " + img.image_id + " has " + std::to_string(img.patches.size()) + " patches, grid needs " +
              std::to_string(img.grid.count()));
  }
  std::vector<PatchView> views;
  views.reserve(img.patches.size());
  for (std::size_t p = 0; p < img.patches.size(); ++p) {
    if (img.patches[p].size() <= pos) fail_data("image " + img.image_id + " patch is missing a layer");
    views.push_back({img.grid.index(p), &img.patches[p][pos]});
  }
  return assemble(views, img.grid, img.scaled, img.token_size, alignment);
}

}  // namespace protoseg
