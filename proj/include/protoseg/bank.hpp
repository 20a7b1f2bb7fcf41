#pragma once

// Prototype memory banks built by k-NN density subsampling.
//
// For each candidate vector the distances to its k nearest neighbours are
// computed (self excluded). Their grand mean is a global radius tau. A
// vector's score is how many of its k neighbours lie strictly closer than
// tau; low scores mark sparse, informative vectors. Vectors are ranked by
// (score, original index) and the first n are kept.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoseg/binary_io.hpp"
#include "protoseg/error.hpp"
#include "protoseg/grid.hpp"
#include "protoseg/parallel.hpp"
#include "protoseg/random.hpp"

namespace protoseg {

struct FeatureSet {
  std::uint32_t layer_id = 0;
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<float> data;  // count x dim, row-major

  FeatureSet() = default;
  FeatureSet(std::uint32_t layer, std::size_t n, std::size_t d, std::vector<float> values)
      : layer_id(layer), count(n), dim(d), data(std::move(values)) {
    validate();
  }

  std::span<const float> row(std::size_t i) const { return std::span<const float>(data).subspan(i * dim, dim); }

  void validate() const {
    if (count < 1 || dim < 1) fail_data("feature set for layer " + std::to_string(layer_id) + " is empty");
    if (data.size() != count * dim) fail_data("feature set payload does not match count x dim");
    for (float v : data) {
      if (!std::isfinite(v)) fail_data("feature set for layer " + std::to_string(layer_id) + " has NaN/Inf entries");
    }
  }

  FeatureSet gather(std::span<const std::size_t> indices) const {
    FeatureSet out;
    out.layer_id = layer_id;
    out.count = indices.size();
    out.dim = dim;
    out.data.reserve(indices.size() * dim);
    for (auto i : indices) {
      const auto r = row(i);
      out.data.insert(out.data.end(), r.begin(), r.end());
    }
    return out;
  }

  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

struct SubsamplingConfig {
  std::size_t k = 100;
  std::size_t target_size = 50000;
  std::size_t subset_count = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) fail_config("k must be at least 1");
    if (target_size < 1) fail_config("target_size must be at least 1");
    if (subset_count < 1) fail_config("subset_count must be at least 1");
  }
};

// Squared differences accumulate in double; the root is taken in double and
// narrowed once.
inline double squared_l2(std::span<const float> a, std::span<const float> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return sum;
}

inline float l2_distance(std::span<const float> a, std::span<const float> b) {
  return static_cast<float>(std::sqrt(squared_l2(a, b)));
}

// Row i holds the k smallest distances from vector i to every other vector,
// ascending.
inline Grid<float> knn_distances(const FeatureSet& features, std::size_t k, std::size_t jobs = 1) {
  if (k < 1) fail_config("k must be at least 1");
  if (k >= features.count) {
    fail_config("k too large: k=" + std::to_string(k) + " needs more than " + std::to_string(features.count) +
                " vectors");
  }
  Grid<float> out(features.count, k);
  parallel_blocks(features.count, jobs, [&](std::size_t begin, std::size_t end) {
    std::vector<float> dist(features.count - 1);
    for (std::size_t i = begin; i < end; ++i) {
      const auto query = features.row(i);
      std::size_t n = 0;
      for (std::size_t j = 0; j < features.count; ++j) {
        if (j != i) dist[n++] = l2_distance(query, features.row(j));
      }
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
      std::copy_n(dist.begin(), k, out.row(i).begin());
    }
  });
  return out;
}

inline double global_tau(const Grid<float>& knn) {
  if (knn.empty()) fail_data("cannot compute tau of an empty distance matrix");
  double sum = 0.0;
  for (float v : knn.values()) sum += v;
  return sum / static_cast<double>(knn.size());
}

inline std::vector<std::uint32_t> subsampling_scores(const Grid<float>& knn, double tau) {
  std::vector<std::uint32_t> scores(knn.rows(), 0);
  for (std::size_t i = 0; i < knn.rows(); ++i) {
    std::uint32_t s = 0;
    for (float d : knn.row(i)) s += static_cast<double>(d) < tau;
    scores[i] = s;
  }
  return scores;
}

// Indices ordered by (score, index).
inline std::vector<std::size_t> rank_by_score(std::span<const std::uint32_t> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

struct Selection {
  std::vector<std::size_t> indices;  // into the source feature set, in retained order
  std::vector<double> taus;          // one per subset
};

inline Selection select_prototype_indices(const FeatureSet& features, std::size_t k, std::size_t target_size,
                                          std::size_t jobs = 1) {
  if (target_size < 1) fail_config("target_size must be at least 1");
  if (target_size > features.count) {
    fail_config("target_size " + std::to_string(target_size) + " exceeds the " + std::to_string(features.count) +
                " available vectors");
  }
  const auto knn = knn_distances(features, k, jobs);
  const double tau = global_tau(knn);
  const auto scores = subsampling_scores(knn, tau);
  auto order = rank_by_score(scores);
  order.resize(target_size);
  return {std::move(order), {tau}};
}

inline FeatureSet select_prototypes(const FeatureSet& features, const SubsamplingConfig& config,
                                    std::size_t jobs = 1) {
  config.validate();
  const auto sel = select_prototype_indices(features, config.k, config.target_size, jobs);
  return features.gather(sel.indices);
}

// Seeded uniform partition into `subset_count` disjoint subsets whose sizes
// differ by at most one. Each subset lists its indices ascending.
inline std::vector<std::vector<std::size_t>> random_partition(std::size_t count, std::size_t subset_count,
                                                              std::uint64_t seed) {
  std::vector<std::size_t> perm(count);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::vector<std::size_t>> subsets(subset_count);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < subset_count; ++s) {
    const std::size_t size = count / subset_count + (s < count % subset_count ? 1 : 0);
    subsets[s].assign(perm.begin() + static_cast<std::ptrdiff_t>(pos),
                      perm.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(subsets[s].begin(), subsets[s].end());
    pos += size;
  }
  return subsets;
}

// Subsampling run independently on random subsets, results concatenated.
// Each subset keeps ceil(target / subsets) vectors (capped at its size).
inline Selection select_prototype_indices_subsetwise(const FeatureSet& features, const SubsamplingConfig& config,
                                                     std::size_t jobs = 1) {
  config.validate();
  if (config.subset_count == 1) return select_prototype_indices(features, config.k, config.target_size, jobs);
  const std::size_t s = config.subset_count;
  if (features.count < s * (config.k + 1)) {
    fail_config("subset too small for k: " + std::to_string(features.count) + " vectors cannot form " +
                std::to_string(s) + " subsets of more than k=" + std::to_string(config.k));
  }
  const std::size_t per_subset = (config.target_size + s - 1) / s;
  Selection merged;
  for (const auto& subset : random_partition(features.count, s, config.seed)) {
    const FeatureSet part = features.gather(subset);
    const auto sel = select_prototype_indices(part, config.k, std::min(per_subset, part.count), jobs);
    for (auto local : sel.indices) merged.indices.push_back(subset[local]);
    merged.taus.push_back(sel.taus.front());
  }
  return merged;
}

inline FeatureSet select_prototypes_subsetwise(const FeatureSet& features, const SubsamplingConfig& config,
                                               std::size_t jobs = 1) {
  return features.gather(select_prototype_indices_subsetwise(features, config, jobs).indices);
}

inline constexpr std::uint32_t kDefaultLayers[] = {7, 15, 23, 31};

class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::map<std::uint32_t, FeatureSet> layers, nlohmann::json metadata)
      : layers_(std::move(layers)), metadata_(std::move(metadata)) {}

  const std::map<std::uint32_t, FeatureSet>& layers() const noexcept { return layers_; }
  const nlohmann::json& metadata() const noexcept { return metadata_; }

  const FeatureSet& layer(std::uint32_t id) const {
    auto it = layers_.find(id);
    if (it == layers_.end()) fail_data("memory bank has no layer " + std::to_string(id));
    return it->second;
  }
  bool has_layer(std::uint32_t id) const { return layers_.contains(id); }

  // Mean k-NN distance recorded while subsampling this layer.
  double layer_tau(std::uint32_t id) const {
    for (const auto& entry : metadata_.at("layers")) {
      if (entry.at("layer_id").get<std::uint32_t>() == id) return entry.at("tau").get<double>();
    }
    fail_data("memory bank metadata has no tau for layer " + std::to_string(id));
  }

 private:
  std::map<std::uint32_t, FeatureSet> layers_;
  nlohmann::json metadata_;
};

// Builds one prototype matrix per required layer. A configured target above
// the number of available vectors keeps all of them.
inline MemoryBank build_bank(const std::map<std::uint32_t, FeatureSet>& per_layer, const SubsamplingConfig& config,
                             std::span<const std::uint32_t> required_layers, std::size_t source_images,
                             std::size_t jobs = 1) {
  config.validate();
  std::string missing;
  for (auto id : required_layers) {
    if (!per_layer.contains(id)) missing += (missing.empty() ? "" : ", ") + std::to_string(id);
  }
  if (!missing.empty()) fail_data("missing layers for memory bank: " + missing);

  std::map<std::uint32_t, FeatureSet> layers;
  nlohmann::json layer_meta = nlohmann::json::array();
  for (auto id : required_layers) {
    const FeatureSet& fs = per_layer.at(id);
    fs.validate();
    SubsamplingConfig effective = config;
    effective.target_size = std::min(config.target_size, fs.count);
    const auto sel = select_prototype_indices_subsetwise(fs, effective, jobs);
    FeatureSet protos = fs.gather(sel.indices);
    const double tau = std::accumulate(sel.taus.begin(), sel.taus.end(), 0.0) / static_cast<double>(sel.taus.size());
    layer_meta.push_back({{"layer_id", id},
                          {"source_count", fs.count},
                          {"dim", fs.dim},
                          {"prototypes", protos.count},
                          {"tau", tau},
                          {"subset_taus", sel.taus}});
    layers.emplace(id, std::move(protos));
  }
  nlohmann::json meta = {
      {"config",
       {{"k", config.k}, {"target_size", config.target_size}, {"subset_count", config.subset_count},
        {"seed", config.seed}, {"metric", "l2"}}},
      {"source_images", source_images},
      {"layers", std::move(layer_meta)},
  };
  return MemoryBank(std::move(layers), std::move(meta));
}

inline constexpr std::uint32_t kBankVersion = 1;

// "SADB" | version u32 | layer count u32 | per layer: id u32, m u64, D u32,
// m*D f32 | metadata length u64 | metadata JSON
inline std::vector<char> encode_bank(const MemoryBank& bank) {
  ByteWriter w;
  w.magic("SADB");
  w.u32(kBankVersion);
  w.u32(static_cast<std::uint32_t>(bank.layers().size()));
  for (const auto& [id, fs] : bank.layers()) {
    w.u32(id);
    w.u64(fs.count);
    w.u32(static_cast<std::uint32_t>(fs.dim));
    w.floats(fs.data);
  }
  const std::string meta = bank.metadata().dump();
  w.u64(meta.size());
  w.raw(meta);
  return w.bytes();
}

inline MemoryBank decode_bank(std::span<const char> bytes, const std::string& source) {
  ByteReader r(bytes, source);
  r.expect_magic("SADB");
  const auto version = r.u32("version");
  if (version != kBankVersion) fail_data(source + ": unsupported bank version " + std::to_string(version));
  const auto layer_count = r.u32("layer count");
  if (layer_count == 0) fail_data(source + ": bank has no layers");
  std::map<std::uint32_t, FeatureSet> layers;
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    const auto id = r.u32("layer id");
    const auto m = r.u64("prototype count");
    const auto dim = r.u32("dimension");
    if (m == 0 || dim == 0) fail_data(source + ": layer " + std::to_string(id) + " is empty");
    if (m > r.remaining() / (sizeof(float) * dim)) {
      fail_data(source + ": truncated while reading prototypes at byte offset " + std::to_string(r.offset()));
    }
    auto data = r.floats(m * dim, "prototypes");
    if (layers.contains(id)) fail_data(source + ": duplicate layer " + std::to_string(id));
    layers.emplace(id, FeatureSet(id, m, dim, std::move(data)));
  }
  const auto meta_len = r.u64("metadata length");
  if (meta_len > r.remaining()) fail_data(source + ": truncated metadata at byte offset " + std::to_string(r.offset()));
  const std::string text = r.raw(meta_len, "metadata");
  r.expect_end();
  nlohmann::json meta = nlohmann::json::parse(text, nullptr, false);
  if (meta.is_discarded() || !meta.is_object()) fail_data(source + ": bank metadata is not a JSON object");
  return MemoryBank(std::move(layers), std::move(meta));
}

inline void write_bank(const std::filesystem::path& path, const MemoryBank& bank) {
  write_file_atomic(path, encode_bank(bank));
}

inline MemoryBank read_bank(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_bank(bytes, path.string());
}

}  // namespace protoseg
