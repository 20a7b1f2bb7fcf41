#pragma once

// End-to-end commands: bank building, calibration, inference, evaluation.
// One configuration is shared by every class of a run.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoseg/bank.hpp"
#include "protoseg/calibrate.hpp"
#include "protoseg/formats.hpp"
#include "protoseg/mask_io.hpp"
#include "protoseg/metrics.hpp"
#include "protoseg/morph.hpp"
#include "protoseg/scorer.hpp"
#include "protoseg/synth.hpp"

namespace protoseg {

struct PipelineConfig {
  std::uint32_t patch_size = 640;
  std::uint32_t min_overlap = 128;
  std::vector<std::uint32_t> layers{7, 15, 23, 31};
  std::size_t k = 100;
  std::size_t target_size = 50000;
  std::size_t subset_count = 1;
  double percentile = 0.95;
  double gain = 1.4;
  int orientations = 16;
  int radius = 26;
  double gate_factor = 0.8;
  double holdout_fraction = 0.125;
  std::uint64_t seed = 0;
  bool normalize_layers = false;
  Pooling pooling = Pooling::global;
  Alignment alignment = Alignment::strict;
  double fpr_cap = 0.05;

  SubsamplingConfig subsampling() const { return {k, target_size, subset_count, seed}; }
  PostprocessConfig postprocess() const { return {orientations, radius, gate_factor}; }
  ScoreOptions scoring(std::size_t jobs) const { return {normalize_layers, alignment, jobs}; }

  void validate() const {
    if (patch_size == 0 || patch_size <= 2ull * min_overlap) fail_config("patch_size must exceed 2 * min_overlap");
    if (layers.empty()) fail_config("at least one layer is required");
    subsampling().validate();
    if (!(percentile >= 0.0 && percentile <= 1.0)) fail_config("percentile must lie in [0, 1]");
    if (!(gain >= 1.0)) fail_config("gain must be at least 1");
    if (orientations < 1 || radius < 1) fail_config("orientations and radius must be positive");
    if (!(gate_factor > 0.0)) fail_config("gate_factor must be positive");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) fail_config("holdout_fraction must lie in (0, 1)");
    if (!(fpr_cap > 0.0 && fpr_cap <= 1.0)) fail_config("fpr_cap must lie in (0, 1]");
  }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"patch_size", c.patch_size},
          {"min_overlap", c.min_overlap},
          {"layers", c.layers},
          {"k", c.k},
          {"target_size", c.target_size},
          {"subset_count", c.subset_count},
          {"percentile", c.percentile},
          {"gain", c.gain},
          {"orientations", c.orientations},
          {"radius", c.radius},
          {"gate_factor", c.gate_factor},
          {"holdout_fraction", c.holdout_fraction},
          {"seed", c.seed},
          {"normalize_layers", c.normalize_layers},
          {"pooling", to_string(c.pooling)},
          {"token_alignment", c.alignment == Alignment::strict ? "strict" : "nearest"},
          {"fpr_cap", c.fpr_cap}};
}

// Applies the keys present in `j` on top of `base`. Unknown keys are errors.
inline PipelineConfig apply_config(PipelineConfig c, const nlohmann::json& j) {
  if (!j.is_object()) fail_config("configuration must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "patch_size") c.patch_size = v.get<std::uint32_t>();
      else if (key == "min_overlap") c.min_overlap = v.get<std::uint32_t>();
      else if (key == "layers") c.layers = v.get<std::vector<std::uint32_t>>();
      else if (key == "k") c.k = v.get<std::size_t>();
      else if (key == "target_size") c.target_size = v.get<std::size_t>();
      else if (key == "subset_count") c.subset_count = v.get<std::size_t>();
      else if (key == "percentile") c.percentile = v.get<double>();
      else if (key == "gain") c.gain = v.get<double>();
      else if (key == "orientations") c.orientations = v.get<int>();
      else if (key == "radius") c.radius = v.get<int>();
      else if (key == "gate_factor") c.gate_factor = v.get<double>();
      else if (key == "holdout_fraction") c.holdout_fraction = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "normalize_layers") c.normalize_layers = v.get<bool>();
      else if (key == "pooling") c.pooling = parse_pooling(v.get<std::string>());
      else if (key == "token_alignment") {
        const auto s = v.get<std::string>();
        if (s == "strict") c.alignment = Alignment::strict;
        else if (s == "nearest") c.alignment = Alignment::nearest_token;
        else fail_config("token_alignment must be \"strict\" or \"nearest\"");
      } else if (key == "fpr_cap") c.fpr_cap = v.get<double>();
      else if (key == "class_overrides") continue;
      else fail_config("unknown configuration key \"" + key + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    fail_config(std::string("invalid configuration value: ") + e.what());
  }
  c.validate();
  return c;
}

// A configuration document plus optional per-class overrides.
class ConfigDocument {
 public:
  ConfigDocument() = default;
  explicit ConfigDocument(nlohmann::json doc) : doc_(std::move(doc)) {
    if (!doc_.is_object()) fail_config("configuration must be a JSON object");
    base_ = apply_config(PipelineConfig{}, doc_);
  }

  static ConfigDocument load(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) fail_config(path.string() + ": configuration is not valid JSON");
    return ConfigDocument(std::move(j));
  }

  bool has_overrides() const { return doc_.contains("class_overrides") && !doc_.at("class_overrides").empty(); }

  // Challenge mode refuses any per-class deviation from the shared config.
  PipelineConfig for_class(const std::string& class_name, bool strict_challenge) const {
    if (strict_challenge && has_overrides()) {
      fail_config("--strict-challenge: per-class overrides are not permitted");
    }
    if (!has_overrides() || !doc_.at("class_overrides").contains(class_name)) return base_;
    return apply_config(base_, doc_.at("class_overrides").at(class_name));
  }

  PipelineConfig& base() { return base_; }
  const PipelineConfig& base() const { return base_; }

 private:
  nlohmann::json doc_ = nlohmann::json::object();
  PipelineConfig base_;
};

inline ImageEmbeddings load_image(const ManifestEntry& entry, const PipelineConfig& config) {
  ImageEmbeddings img = read_embeddings(entry.embeddings);
  const std::string src = entry.embeddings.string();
  if (img.image_id != entry.image_id) {
    fail_data(src + ": image id \"" + img.image_id + "\" does not match manifest id \"" + entry.image_id + "\"");
  }
  if (!(img.original == entry.original)) fail_data(src + ": geometry does not match the manifest");
  if (img.grid.patch_size != config.patch_size || img.grid.min_overlap != config.min_overlap) {
    fail_data(src + ": embeddings were tiled with P=" + std::to_string(img.grid.patch_size) +
              ", O=" + std::to_string(img.grid.min_overlap) + " but the configuration uses P=" +
              std::to_string(config.patch_size) + ", O=" + std::to_string(config.min_overlap));
  }
  for (auto id : config.layers) img.layer_position(id);
  return img;
}

struct ImageMaps {
  AnomalyMap token;   // fused, token scale
  AnomalyMap output;  // upsampled to ceil(original / 4)
};

// Shared by calibration and inference so both see identical maps.
inline ImageMaps compute_maps(const ImageEmbeddings& img, const MemoryBank& bank, const PipelineConfig& config,
                              std::size_t jobs = 1) {
  ImageMaps maps;
  maps.token = score_image(img, bank, config.layers, config.scoring(jobs));
  maps.output = upsample_map(maps.token, output_geom(img.original));
  return maps;
}

inline std::filesystem::path split_path_for(const std::filesystem::path& bank_path) {
  auto p = bank_path;
  p += ".split.json";
  return p;
}

struct BuildBankResult {
  MemoryBank bank;
  HoldoutSplit split;
};

inline BuildBankResult run_build_bank(const DatasetManifest& manifest, const PipelineConfig& config,
                                      std::size_t jobs = 1) {
  if (manifest.entries.empty()) fail_data("no images in manifest");
  if (manifest.split != Split::train) fail_data("memory banks are built from the train split only");
  const auto ids = manifest.ids();
  BuildBankResult result;
  result.split = split_holdout(ids, config.holdout_fraction, config.seed);

  std::map<std::uint32_t, FeatureSet> features;
  for (auto id : config.layers) features[id].layer_id = id;
  for (const auto& image_id : result.split.bank_ids) {
    const ImageEmbeddings img = load_image(manifest.entry(image_id), config);
    for (auto id : config.layers) {
      const TokenField stitched = assemble_layer(img, id, config.alignment);
      FeatureSet& fs = features[id];
      if (fs.count == 0) fs.dim = stitched.channels;
      if (fs.dim != stitched.channels) fail_data(image_id + ": layer " + std::to_string(id) + " dimension changed");
      fs.data.insert(fs.data.end(), stitched.data.begin(), stitched.data.end());
      fs.count += stitched.tokens();
    }
  }
  result.bank = build_bank(features, config.subsampling(), config.layers, result.split.bank_ids.size(), jobs);
  return result;
}

inline nlohmann::json split_to_json(const HoldoutSplit& split, const PipelineConfig& config) {
  return {{"seed", config.seed},
          {"holdout_fraction", config.holdout_fraction},
          {"bank_ids", split.bank_ids},
          {"holdout_ids", split.holdout_ids}};
}

inline HoldoutSplit read_split(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) fail_data(path.string() + ": split record is not valid JSON");
  try {
    return {j.at("bank_ids").get<std::vector<std::string>>(), j.at("holdout_ids").get<std::vector<std::string>>()};
  } catch (const nlohmann::json::exception& e) {
    fail_data(path.string() + ": malformed split record: " + e.what());
  }
}

inline CalibrationResult run_calibrate(const DatasetManifest& manifest, const MemoryBank& bank,
                                       const HoldoutSplit& split, const PipelineConfig& config, std::size_t jobs = 1) {
  if (split.holdout_ids.empty()) fail_data("split record has no holdout images");
  std::vector<AnomalyMap> maps(split.holdout_ids.size());
  parallel_for(maps.size(), jobs, [&](std::size_t i) {
    const ImageEmbeddings img = load_image(manifest.entry(split.holdout_ids[i]), config);
    maps[i] = compute_maps(img, bank, config).output;
  });
  CalibrationResult cal = estimate_threshold(maps, config.percentile, config.gain, config.pooling);
  cal.holdout_fraction = config.holdout_fraction;
  cal.seed = config.seed;
  return cal;
}

struct InferOptions {
  MaskFormat mask_format = MaskFormat::pgm;
  bool full_resolution = false;  // nearest-upscale masks to the original geometry
  std::size_t jobs = 1;
};

struct InferFailure {
  std::string image_id;
  std::string message;
};

// Per image writes <id>.token.sadm, <id>.sadm and <id>.<pgm|png>. Failures
// are collected; the remaining images still run.
inline std::vector<InferFailure> run_infer(const DatasetManifest& manifest, const MemoryBank& bank,
                                           const CalibrationResult& cal, const PipelineConfig& config,
                                           const std::filesystem::path& out_dir, const InferOptions& opts = {}) {
  std::vector<std::optional<std::string>> errors(manifest.entries.size());
  parallel_for(manifest.entries.size(), opts.jobs, [&](std::size_t i) {
    const auto& entry = manifest.entries[i];
    try {
      const ImageEmbeddings img = load_image(entry, config);
      const ImageMaps maps = compute_maps(img, bank, config);
      BinaryMask mask = postprocess(maps.output, cal, config.postprocess());
      if (opts.full_resolution) mask = resize_nearest(mask, entry.original.height, entry.original.width);
      write_map(out_dir / (entry.image_id + ".token.sadm"), maps.token);
      write_map(out_dir / (entry.image_id + ".sadm"), maps.output);
      write_mask(out_dir / (entry.image_id + extension(opts.mask_format)), mask);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::vector<InferFailure> failures;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (errors[i]) failures.push_back({manifest.entries[i].image_id, *errors[i]});
  }
  return failures;
}

// Predictions for class C live in <dir>/C when that directory exists,
// otherwise directly in <dir>.
inline ClassReport run_evaluate_class(const DatasetManifest& manifest, const std::filesystem::path& pred_dir,
                                      double fpr_cap = 0.05) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::is_directory(pred_dir / manifest.class_name) ? pred_dir / manifest.class_name : pred_dir;
  std::map<std::string, BinaryMask> preds, gts;
  std::map<std::string, AnomalyMap> scores;
  std::string missing;
  bool all_scores = true;
  for (const auto& e : manifest.entries) {
    if (!e.ground_truth) fail_data("manifest entry " + e.image_id + " has no ground truth");
    gts.emplace(e.image_id, read_mask(*e.ground_truth));
    std::optional<fs::path> mask_path;
    for (const char* ext : {".pgm", ".png"}) {
      if (fs::exists(dir / (e.image_id + ext))) {
        mask_path = dir / (e.image_id + ext);
        break;
      }
    }
    if (!mask_path) {
      missing += (missing.empty() ? "" : ", ") + e.image_id;
      continue;
    }
    preds.emplace(e.image_id, read_mask(*mask_path));
    const fs::path map_path = dir / (e.image_id + ".sadm");
    if (fs::exists(map_path)) scores.emplace(e.image_id, read_map(map_path));
    else all_scores = false;
  }
  if (!missing.empty()) fail_data("missing predictions for: " + missing);
  if (!all_scores) scores.clear();
  return evaluate_class(preds, gts, scores, fpr_cap);
}

}  // namespace protoseg
