#pragma once

// Decision threshold from held-out anomaly-free images: a gain-scaled
// percentile of their anomaly-map values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoseg/binary_io.hpp"
#include "protoseg/error.hpp"
#include "protoseg/grid.hpp"
#include "protoseg/random.hpp"

namespace protoseg {

struct HoldoutSplit {
  std::vector<std::string> bank_ids;
  std::vector<std::string> holdout_ids;
};

// Seeded random split; both halves keep the input order. The holdout gets
// round(count * fraction) images, at least one, never all.
inline HoldoutSplit split_holdout(std::span<const std::string> image_ids, double fraction, std::uint64_t seed) {
  if (image_ids.size() < 2) fail_data("need at least 2 images to reserve a calibration holdout");
  if (!(fraction > 0.0 && fraction < 1.0)) fail_config("holdout fraction must lie in (0, 1)");
  const std::size_t n = image_ids.size();
  auto holdout_n = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
  holdout_n = std::clamp<std::size_t>(holdout_n, 1, n - 1);

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<bool> is_holdout(n, false);
  for (std::size_t i = 0; i < holdout_n; ++i) is_holdout[perm[i]] = true;

  HoldoutSplit split;
  for (std::size_t i = 0; i < n; ++i) (is_holdout[i] ? split.holdout_ids : split.bank_ids).push_back(image_ids[i]);
  return split;
}

// Linear interpolation between order statistics at index p * (count - 1).
// Exact: selects the two order statistics rather than sketching.
inline double percentile(std::span<const float> values, double p) {
  if (values.empty()) fail_data("percentile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) fail_config("percentile must lie in [0, 1]");
  std::vector<float> v(values.begin(), values.end());
  const double index = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(index));
  const double frac = index - static_cast<double>(lo);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double lo_value = v[lo];
  if (lo + 1 >= v.size() || frac == 0.0) return lo_value;
  const double hi_value = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo + 1), v.end());
  return lo_value + frac * (hi_value - lo_value);
}

enum class Pooling { global, per_image };

inline std::string to_string(Pooling p) { return p == Pooling::global ? "global" : "per_image"; }
inline Pooling parse_pooling(const std::string& s) {
  if (s == "global") return Pooling::global;
  if (s == "per_image") return Pooling::per_image;
  fail_config("unknown percentile pooling \"" + s + "\"");
}

struct CalibrationResult {
  double threshold = 0.0;
  double percentile = 0.95;
  double gain = 1.4;
  double holdout_fraction = 0.125;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
  std::string bank_hash;
  Pooling pooling = Pooling::global;

  friend bool operator==(const CalibrationResult&, const CalibrationResult&) = default;
};

inline CalibrationResult estimate_threshold(std::span<const AnomalyMap> holdout_maps, double p, double gain,
                                            Pooling pooling = Pooling::global) {
  if (holdout_maps.empty()) fail_data("no holdout maps to calibrate on");
  if (!(gain >= 1.0)) fail_config("gain must be at least 1");
  CalibrationResult result;
  result.percentile = p;
  result.gain = gain;
  result.pooling = pooling;
  for (const auto& m : holdout_maps) {
    if (m.scores.empty()) fail_data("empty holdout map");
    result.sample_count += m.scores.size();
  }
  double base = 0.0;
  if (pooling == Pooling::global) {
    std::vector<float> pooled;
    pooled.reserve(result.sample_count);
    for (const auto& m : holdout_maps) pooled.insert(pooled.end(), m.scores.values().begin(), m.scores.values().end());
    base = percentile(pooled, p);
  } else {
    for (const auto& m : holdout_maps) base += percentile(m.scores.values(), p);
    base /= static_cast<double>(holdout_maps.size());
  }
  result.threshold = gain * base;
  return result;
}

inline nlohmann::json to_json(const CalibrationResult& c) {
  return {{"threshold", c.threshold},
          {"percentile", c.percentile},
          {"gain", c.gain},
          {"holdout_fraction", c.holdout_fraction},
          {"seed", c.seed},
          {"sample_count", c.sample_count},
          {"bank_hash", c.bank_hash},
          {"pooling", to_string(c.pooling)}};
}

inline CalibrationResult calibration_from_json(const nlohmann::json& j, const std::string& source) {
  CalibrationResult c;
  try {
    c.threshold = j.at("threshold").get<double>();
    c.percentile = j.at("percentile").get<double>();
    c.gain = j.at("gain").get<double>();
    c.holdout_fraction = j.at("holdout_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.sample_count = j.at("sample_count").get<std::size_t>();
    c.bank_hash = j.at("bank_hash").get<std::string>();
    c.pooling = parse_pooling(j.value("pooling", std::string("global")));
  } catch (const nlohmann::json::exception& e) {
    fail_data(source + ": invalid calibration file: " + e.what());
  }
  if (!std::isfinite(c.threshold) || c.threshold < 0.0) fail_data(source + ": threshold must be finite and >= 0");
  return c;
}

inline void write_calibration(const std::filesystem::path& path, const CalibrationResult& c) {
  write_text_atomic(path, to_json(c).dump(2) + "\n");
}

inline CalibrationResult read_calibration(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) fail_data(path.string() + ": not valid JSON");
  return calibration_from_json(j, path.string());
}

}  // namespace protoseg
