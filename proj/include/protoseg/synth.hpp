#pragma once

// Deterministic synthetic embedding datasets with known anomalies.
//
// Every token draws a latent vector from a Gaussian mixture; each backbone
// layer sees a fixed random linear projection of it plus a little noise.
// Anomalous test images carry one rectangular block of tokens whose latent
// vectors are displaced by a common offset of magnitude delta.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoseg/embeddings.hpp"
#include "protoseg/error.hpp"
#include "protoseg/formats.hpp"
#include "protoseg/mask_io.hpp"
#include "protoseg/random.hpp"
#include "protoseg/tiler.hpp"

namespace protoseg {

struct SynthSpec {
  std::uint64_t seed = 1;
  std::string class_name = "synth";
  std::size_t train_images = 40;
  std::size_t test_anomalous = 20;
  std::size_t test_clean = 20;
  ImageGeom original{512, 384};
  std::uint32_t downscale_num = 5;
  std::uint32_t downscale_den = 8;
  std::uint32_t patch_size = 160;
  std::uint32_t min_overlap = 40;
  std::vector<std::uint32_t> layer_ids{7, 15, 23, 31};
  std::vector<std::size_t> layer_dims{16, 16, 24, 32};
  std::size_t latent_dim = 10;
  std::size_t clusters = 3;
  double cluster_spread = 12.0;  // std of cluster centers
  double sigma = 1.0;            // within-cluster scale
  double truncation = 2.0;       // within-cluster draws are resampled beyond truncation * sigma
  double noise = 0.05;           // per-layer additive noise std
  double delta = 6.0;            // anomaly displacement magnitude
  std::size_t block_rows = 5;
  std::size_t block_cols = 5;

  void validate() const {
    original.validate();
    if (layer_ids.empty() || layer_ids.size() != layer_dims.size()) fail_config("synth: layer ids/dims mismatch");
    for (std::size_t i = 1; i < layer_ids.size(); ++i) {
      if (layer_ids[i] <= layer_ids[i - 1]) fail_config("synth: layer ids must be strictly increasing");
    }
    for (auto d : layer_dims) {
      if (d == 0) fail_config("synth: layer dimension must be positive");
    }
    if (latent_dim == 0 || clusters == 0) fail_config("synth: latent_dim and clusters must be positive");
    if (!(sigma > 0.0)) fail_config("synth: sigma must be positive");
    if (!(truncation >= 0.5)) fail_config("synth: truncation must be at least 0.5");
    if (!(delta > 4.0 * sigma)) fail_config("synth: delta must exceed 4x the inlier cluster std");
    if (train_images == 0) fail_config("synth: need at least one train image");
    const auto grid = build_grid(scaled_geom(original, downscale_num, downscale_den), patch_size, min_overlap);
    for (const auto* starts : {&grid.starts_y, &grid.starts_x}) {
      for (auto s : *starts) {
        if (s % kTokenSize != 0) fail_config("synth: geometry must yield a token-aligned patch grid");
      }
    }
    const auto tokens = token_grid(scaled_geom(original, downscale_num, downscale_den));
    if (test_anomalous > 0 && (block_rows == 0 || block_cols == 0 || block_rows > tokens.rows ||
                               block_cols > tokens.cols)) {
      fail_config("synth: anomaly block does not fit the token grid");
    }
  }
};

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  try {
    s.seed = j.value("seed", s.seed);
    s.class_name = j.value("class_name", s.class_name);
    s.train_images = j.value("train_images", s.train_images);
    s.test_anomalous = j.value("test_anomalous", s.test_anomalous);
    s.test_clean = j.value("test_clean", s.test_clean);
    s.original.height = j.value("height", s.original.height);
    s.original.width = j.value("width", s.original.width);
    s.downscale_num = j.value("downscale_num", s.downscale_num);
    s.downscale_den = j.value("downscale_den", s.downscale_den);
    s.patch_size = j.value("patch_size", s.patch_size);
    s.min_overlap = j.value("min_overlap", s.min_overlap);
    s.layer_ids = j.value("layer_ids", s.layer_ids);
    s.layer_dims = j.value("layer_dims", s.layer_dims);
    s.latent_dim = j.value("latent_dim", s.latent_dim);
    s.clusters = j.value("clusters", s.clusters);
    s.cluster_spread = j.value("cluster_spread", s.cluster_spread);
    s.sigma = j.value("sigma", s.sigma);
    s.truncation = j.value("truncation", s.truncation);
    s.noise = j.value("noise", s.noise);
    s.delta = j.value("delta", s.delta);
    s.block_rows = j.value("block_rows", s.block_rows);
    s.block_cols = j.value("block_cols", s.block_cols);
  } catch (const nlohmann::json::exception& e) {
    fail_config(std::string("invalid synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct SynthImage {
  ImageEmbeddings embeddings;
  BinaryMask token_truth;  // token-scale anomaly mask
};

struct SynthDataset {
  std::vector<SynthImage> train;
  std::vector<SynthImage> test;
};

inline SynthDataset synthesize(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t dz = spec.latent_dim;

  std::vector<std::vector<double>> centers(spec.clusters, std::vector<double>(dz));
  for (auto& c : centers) {
    for (auto& v : c) v = spec.cluster_spread * rng.normal();
  }
  // projections[l] is layer_dims[l] x dz, entries N(0, 1/dz)
  std::vector<std::vector<double>> projections;
  for (auto d : spec.layer_dims) {
    std::vector<double> a(d * dz);
    for (auto& v : a) v = rng.normal() / std::sqrt(static_cast<double>(dz));
    projections.push_back(std::move(a));
  }

  const ImageGeom scaled = scaled_geom(spec.original, spec.downscale_num, spec.downscale_den);
  const PatchGrid grid = build_grid(scaled, spec.patch_size, spec.min_overlap);
  const TokenGridGeom tokens = token_grid(scaled);

  auto make_image = [&](const std::string& id, bool anomalous) {
    std::vector<double> latent(tokens.rows * tokens.cols * dz);
    for (std::size_t t = 0; t < tokens.rows * tokens.cols; ++t) {
      const auto& c = centers[rng.below(spec.clusters)];
      for (std::size_t i = 0; i < dz; ++i) {
        double z = rng.normal();
        while (std::abs(z) > spec.truncation) z = rng.normal();
        latent[t * dz + i] = c[i] + spec.sigma * z;
      }
    }
    BinaryMask truth(tokens.rows, tokens.cols, 0);
    if (anomalous) {
      const std::size_t r0 = rng.below(tokens.rows - spec.block_rows + 1);
      const std::size_t c0 = rng.below(tokens.cols - spec.block_cols + 1);
      std::vector<double> dir(dz);
      double norm = 0.0;
      for (auto& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (std::size_t r = r0; r < r0 + spec.block_rows; ++r) {
        for (std::size_t c = c0; c < c0 + spec.block_cols; ++c) {
          truth(r, c) = 1;
          const std::size_t t = r * tokens.cols + c;
          for (std::size_t i = 0; i < dz; ++i) latent[t * dz + i] += spec.delta * dir[i] / norm;
        }
      }
    }
    SynthImage img;
    auto& e = img.embeddings;
    e.image_id = id;
    e.original = spec.original;
    e.scaled = scaled;
    e.downscale_num = spec.downscale_num;
    e.downscale_den = spec.downscale_den;
    e.token_size = kTokenSize;
    e.grid = grid;
    e.layer_ids = spec.layer_ids;
    e.layer_dims = spec.layer_dims;
    e.patches.assign(grid.count(), {});
    for (std::size_t l = 0; l < spec.layer_ids.size(); ++l) {
      const std::size_t d = spec.layer_dims[l];
      const auto& a = projections[l];
      TokenField global(tokens.rows, tokens.cols, d);
      for (std::size_t t = 0; t < tokens.rows * tokens.cols; ++t) {
        const double* z = &latent[t * dz];
        for (std::size_t o = 0; o < d; ++o) {
          double v = 0.0;
          for (std::size_t i = 0; i < dz; ++i) v += a[o * dz + i] * z[i];
          global.data[t * d + o] = static_cast<float>(v + spec.noise * rng.normal());
        }
      }
      for (std::size_t p = 0; p < grid.count(); ++p) e.patches[p].push_back(crop_patch(global, grid, grid.index(p)));
    }
    img.token_truth = std::move(truth);
    return img;
  };

  auto id_for = [](const char* prefix, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03zu", prefix, i);
    return std::string(buf);
  };
  SynthDataset ds;
  for (std::size_t i = 0; i < spec.train_images; ++i) ds.train.push_back(make_image(id_for("train", i), false));
  for (std::size_t i = 0; i < spec.test_anomalous; ++i) ds.test.push_back(make_image(id_for("anomalous", i), true));
  for (std::size_t i = 0; i < spec.test_clean; ++i) ds.test.push_back(make_image(id_for("clean", i), false));
  return ds;
}

// Writes <out>/train/{manifest.json,*.sade} and
// <out>/test/{manifest.json,*.sade,gt/*.pgm}. Ground truth referenced by the
// manifest is at output scale (ceil(original / 4)); the token-scale masks
// are written alongside as *.token.pgm.
inline void write_synth_dataset(const SynthDataset& ds, const SynthSpec& spec, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  DatasetManifest train{spec.class_name, Split::train, {}};
  for (const auto& img : ds.train) {
    const fs::path path = out / "train" / (img.embeddings.image_id + ".sade");
    write_embeddings(path, img.embeddings);
    train.entries.push_back({img.embeddings.image_id, img.embeddings.original, path, std::nullopt});
  }
  write_manifest(out / "train" / "manifest.json", train);

  DatasetManifest test{spec.class_name, Split::test_public, {}};
  const ImageGeom out_geom = output_geom(spec.original);
  for (const auto& img : ds.test) {
    const auto& id = img.embeddings.image_id;
    const fs::path path = out / "test" / (id + ".sade");
    write_embeddings(path, img.embeddings);
    write_mask(out / "test" / "gt" / (id + ".token.pgm"), img.token_truth);
    const fs::path gt = out / "test" / "gt" / (id + ".pgm");
    write_mask(gt, resize_nearest(img.token_truth, out_geom.height, out_geom.width));
    test.entries.push_back({id, img.embeddings.original, path, gt});
  }
  write_manifest(out / "test" / "manifest.json", test);
}

}  // namespace protoseg
