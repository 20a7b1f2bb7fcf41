#pragma once

// Nearest-prototype distance maps, multi-layer fusion and upsampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "protoseg/bank.hpp"
#include "protoseg/binary_io.hpp"
#include "protoseg/embeddings.hpp"
#include "protoseg/grid.hpp"
#include "protoseg/parallel.hpp"
#include "protoseg/tiler.hpp"

namespace protoseg {

struct EmbeddingMap {
  std::uint32_t layer_id = 0;
  TokenField tokens;  // channels = embedding dimension
};

// score(r, c) = min over prototypes of the L2 distance to token (r, c).
inline AnomalyMap nn_distance_map(const TokenField& emb, const FeatureSet& prototypes, std::size_t jobs = 1) {
  if (prototypes.count < 1) fail_data("no prototypes to score against");
  if (emb.channels != prototypes.dim) {
    fail_data("embedding dimension " + std::to_string(emb.channels) + " does not match prototype dimension " +
              std::to_string(prototypes.dim));
  }
  AnomalyMap out{Grid<float>(emb.rows, emb.cols, 0.0f), kTokenScale};
  auto scores = out.scores.values();
  parallel_for(emb.tokens(), jobs, [&](std::size_t t) {
    const auto query = emb.at(t / emb.cols, t % emb.cols);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < prototypes.count; ++j) best = std::min(best, squared_l2(query, prototypes.row(j)));
    scores[t] = static_cast<float>(std::sqrt(best));
  });
  return out;
}

inline AnomalyMap nn_distance_map(const EmbeddingMap& emb, const FeatureSet& prototypes, std::size_t jobs = 1) {
  return nn_distance_map(emb.tokens, prototypes, jobs);
}

// Elementwise mean, accumulated in double in list order.
inline AnomalyMap fuse_layers(std::span<const AnomalyMap> maps) {
  if (maps.empty()) fail_data("no layer maps to fuse");
  const auto& first = maps.front();
  for (const auto& m : maps) {
    if (!m.scores.same_shape(first.scores)) {
      fail_data("layer map geometry mismatch: " + shape_string(m.rows(), m.cols()) + " vs " +
                shape_string(first.rows(), first.cols()));
    }
  }
  AnomalyMap out{Grid<float>(first.rows(), first.cols(), 0.0f), first.scale};
  auto dst = out.scores.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    double sum = 0.0;
    for (const auto& m : maps) sum += m.scores.values()[i];
    dst[i] = static_cast<float>(sum / static_cast<double>(maps.size()));
  }
  return out;
}

struct ScoreOptions {
  // Divide each layer's map by that layer's mean k-NN distance before fusing.
  bool normalize_layers = false;
  Alignment alignment = Alignment::strict;
  std::size_t jobs = 1;
};

// Fused token-scale anomaly map of one image. Per-token nearest distances
// commute with overlap discard, so each layer is stitched first and only
// owned tokens are scored.
inline AnomalyMap score_image(const ImageEmbeddings& img, const MemoryBank& bank,
                              std::span<const std::uint32_t> layers, const ScoreOptions& options = {}) {
  if (layers.empty()) fail_config("no layers selected for scoring");
  std::vector<AnomalyMap> per_layer;
  per_layer.reserve(layers.size());
  for (auto id : layers) {
    const TokenField stitched = assemble_layer(img, id, options.alignment);
    AnomalyMap m = nn_distance_map(stitched, bank.layer(id), options.jobs);
    if (options.normalize_layers) {
      const double tau = bank.layer_tau(id);
      if (tau > 0.0) {
        for (auto& v : m.scores.values()) v = static_cast<float>(v / tau);
      }
    }
    per_layer.push_back(std::move(m));
  }
  return fuse_layers(per_layer);
}

// Bilinear resize with corner-aligned sampling: output corners coincide
// with input corners.
inline AnomalyMap upsample_map(const AnomalyMap& map, const ImageGeom& target, Scale target_scale = kOutputScale) {
  target.validate();
  if (map.scores.empty()) fail_data("cannot upsample an empty map");
  const std::size_t in_r = map.rows(), in_c = map.cols();
  const std::size_t out_r = target.height, out_c = target.width;
  auto coord = [](std::size_t i, std::size_t n_in, std::size_t n_out) {
    if (n_in == 1 || n_out == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
  };
  AnomalyMap out{Grid<float>(out_r, out_c, 0.0f), target_scale};
  for (std::size_t y = 0; y < out_r; ++y) {
    const double fy = coord(y, in_r, out_r);
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), in_r - 1);
    const std::size_t y1 = std::min(y0 + 1, in_r - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_c; ++x) {
      const double fx = coord(x, in_c, out_c);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), in_c - 1);
      const std::size_t x1 = std::min(x0 + 1, in_c - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1.0 - wx) * map.scores(y0, x0) + wx * map.scores(y0, x1);
      const double bottom = (1.0 - wx) * map.scores(y1, x0) + wx * map.scores(y1, x1);
      out.scores(y, x) = static_cast<float>((1.0 - wy) * top + wy * bottom);
    }
  }
  return out;
}

inline constexpr std::uint32_t kMapVersion = 1;

// "SADM" | version u32 | rows u32 | cols u32 | scale num u32 | scale den u32 |
// rows*cols f32
inline std::vector<char> encode_map(const AnomalyMap& map) {
  ByteWriter w;
  w.magic("SADM");
  w.u32(kMapVersion);
  w.u32(static_cast<std::uint32_t>(map.rows()));
  w.u32(static_cast<std::uint32_t>(map.cols()));
  w.u32(map.scale.num);
  w.u32(map.scale.den);
  w.floats(map.scores.values());
  return w.bytes();
}

inline AnomalyMap decode_map(std::span<const char> bytes, const std::string& source) {
  ByteReader r(bytes, source);
  r.expect_magic("SADM");
  const auto version = r.u32("version");
  if (version != kMapVersion) fail_data(source + ": unsupported map version " + std::to_string(version));
  const auto rows = r.u32("rows");
  const auto cols = r.u32("cols");
  const auto num = r.u32("scale numerator");
  const auto den = r.u32("scale denominator");
  if (rows == 0 || cols == 0) fail_data(source + ": empty anomaly map");
  if (num == 0 || den == 0) fail_data(source + ": invalid scale " + std::to_string(num) + "/" + std::to_string(den));
  auto values = r.floats(static_cast<std::size_t>(rows) * cols, "scores");
  r.expect_end();
  for (float v : values) {
    if (!std::isfinite(v) || v < 0.0f) fail_data(source + ": anomaly scores must be finite and non-negative");
  }
  return {Grid<float>(rows, cols, std::move(values)), Scale{num, den}};
}

inline void write_map(const std::filesystem::path& path, const AnomalyMap& map) {
  write_file_atomic(path, encode_map(map));
}

inline AnomalyMap read_map(const std::filesystem::path& path) { return decode_map(read_file(path), path.string()); }

}  // namespace protoseg
