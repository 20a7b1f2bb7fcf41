#pragma once

// Pixel-level segmentation metrics: pooled F1 and partial AU-ROC up to a
// false-positive-rate cap.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoseg/error.hpp"
#include "protoseg/grid.hpp"

namespace protoseg {

struct PixelCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
  PixelCounts& operator+=(const PixelCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const PixelCounts&, const PixelCounts&) = default;
};

inline PixelCounts accumulate_counts(const BinaryMask& pred, const BinaryMask& gt) {
  if (!pred.same_shape(gt)) {
    fail_data("prediction " + shape_string(pred.rows(), pred.cols()) + " does not match ground truth " +
              shape_string(gt.rows(), gt.cols()));
  }
  PixelCounts c;
  auto p = pred.values();
  auto g = gt.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pv = p[i] != 0, gv = g[i] != 0;
    if (pv && gv) ++c.tp;
    else if (pv) ++c.fp;
    else if (gv) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// 2 * precision * recall / (precision + recall). Without true positives the
// score is 0, except that an entirely empty prediction of an entirely empty
// ground truth scores 1.
inline double f1(const PixelCounts& c) {
  if (c.tp == 0) return (c.fp == 0 && c.fn == 0) ? 1.0 : 0.0;
  const double precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  const double recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return 2.0 * (precision * recall) / (precision + recall);
}

struct ScoredPair {
  std::span<const float> scores;
  std::span<const std::uint8_t> labels;
};

inline ScoredPair make_scored_pair(const AnomalyMap& map, const BinaryMask& gt) {
  if (map.rows() != gt.rows() || map.cols() != gt.cols()) {
    fail_data("anomaly map " + shape_string(map.rows(), map.cols()) + " does not match ground truth " +
              shape_string(gt.rows(), gt.cols()));
  }
  return {map.scores.values(), gt.values()};
}

// Area under the ROC curve for FPR in [0, cap], pooled over all pixels and
// swept over every distinct score. The raw area is standardized (McClish)
// so that the chance diagonal maps to 0.5 and a perfect ranking to 1.0:
//   0.5 * (1 + (A - cap^2 / 2) / (cap - cap^2 / 2)).
inline double auroc_capped(std::span<const ScoredPair> pairs, double fpr_cap = 0.05) {
  if (!(fpr_cap > 0.0 && fpr_cap <= 1.0)) fail_config("FPR cap must lie in (0, 1]");
  std::vector<std::pair<float, std::uint8_t>> pooled;
  for (const auto& p : pairs) {
    if (p.scores.size() != p.labels.size()) fail_data("scored pair size mismatch");
    for (std::size_t i = 0; i < p.scores.size(); ++i) pooled.emplace_back(p.scores[i], p.labels[i] != 0);
  }
  std::uint64_t positives = 0;
  for (const auto& [s, l] : pooled) positives += l;
  const std::uint64_t negatives = pooled.size() - positives;
  if (positives == 0 || negatives == 0) fail_data("AU-ROC needs both positive and negative pixels");

  std::sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const double P = static_cast<double>(positives), N = static_cast<double>(negatives);
  double area = 0.0, x0 = 0.0, y0 = 0.0;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < pooled.size();) {
    const float score = pooled[i].first;
    for (; i < pooled.size() && pooled[i].first == score; ++i) (pooled[i].second ? tp : fp) += 1;
    const double x1 = static_cast<double>(fp) / N;
    const double y1 = static_cast<double>(tp) / P;
    if (x1 <= fpr_cap) {
      area += (x1 - x0) * (y0 + y1) / 2.0;
    } else {
      const double y_cap = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0);
      area += (fpr_cap - x0) * (y0 + y_cap) / 2.0;
      break;
    }
    x0 = x1;
    y0 = y1;
  }
  const double chance = fpr_cap * fpr_cap / 2.0;
  return 0.5 * (1.0 + (area - chance) / (fpr_cap - chance));
}

struct ClassReport {
  PixelCounts counts;
  double f1 = 0.0;
  std::optional<double> auroc_capped;  // absent when the class lacks positives or negatives
  std::size_t images = 0;
};

// Metrics for one class. Counts and score/label pixels are pooled over all
// images; `scores` may be empty, in which case AU-ROC is skipped.
inline ClassReport evaluate_class(const std::map<std::string, BinaryMask>& predictions,
                                  const std::map<std::string, BinaryMask>& ground_truth,
                                  const std::map<std::string, AnomalyMap>& scores = {}, double fpr_cap = 0.05) {
  std::string missing;
  for (const auto& [id, gt] : ground_truth) {
    if (!predictions.contains(id) || (!scores.empty() && !scores.contains(id))) {
      missing += (missing.empty() ? "" : ", ") + id;
    }
  }
  if (!missing.empty()) fail_data("missing predictions for: " + missing);

  ClassReport report;
  std::vector<ScoredPair> pairs;
  for (const auto& [id, gt] : ground_truth) {
    report.counts += accumulate_counts(predictions.at(id), gt);
    if (!scores.empty()) pairs.push_back(make_scored_pair(scores.at(id), gt));
    ++report.images;
  }
  report.f1 = f1(report.counts);
  if (!pairs.empty()) {
    const bool has_pos = report.counts.tp + report.counts.fn > 0;
    const bool has_neg = report.counts.fp + report.counts.tn > 0;
    if (has_pos && has_neg) report.auroc_capped = auroc_capped(pairs, fpr_cap);
  }
  return report;
}

struct EvaluationReport {
  std::map<std::string, ClassReport> per_class;
  double mean_f1 = 0.0;
  std::optional<double> mean_auroc;
};

// Unweighted means across classes.
inline EvaluationReport summarize(std::map<std::string, ClassReport> per_class) {
  EvaluationReport r;
  r.per_class = std::move(per_class);
  if (r.per_class.empty()) return r;
  double f1_sum = 0.0, auroc_sum = 0.0;
  std::size_t auroc_n = 0;
  for (const auto& [name, c] : r.per_class) {
    f1_sum += c.f1;
    if (c.auroc_capped) {
      auroc_sum += *c.auroc_capped;
      ++auroc_n;
    }
  }
  r.mean_f1 = f1_sum / static_cast<double>(r.per_class.size());
  if (auroc_n == r.per_class.size()) r.mean_auroc = auroc_sum / static_cast<double>(auroc_n);
  return r;
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [name, c] : r.per_class) {
    per_class[name] = {{"f1", c.f1},
                       {"auroc_capped", c.auroc_capped ? nlohmann::json(*c.auroc_capped) : nlohmann::json()},
                       {"images", c.images},
                       {"counts", {{"tp", c.counts.tp}, {"fp", c.counts.fp}, {"fn", c.counts.fn}, {"tn", c.counts.tn}}}};
  }
  return {{"per_class", per_class},
          {"mean_f1", r.mean_f1},
          {"mean_auroc", r.mean_auroc ? nlohmann::json(*r.mean_auroc) : nlohmann::json()}};
}

// Plain-text table, values in percent.
inline std::string to_table(const EvaluationReport& r) {
  auto pct = [](std::optional<double> v) {
    if (!v) return std::string("     -");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%6.2f", *v * 100.0);
    return std::string(buf);
  };
  std::size_t width = 6;
  for (const auto& [name, c] : r.per_class) width = std::max(width, name.size());
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size(), ' '); };
  std::string out = pad("Object") + "  AU-ROC_0.05  F1 score\n";
  const std::string rule(width + 22, '-');
  out += rule + "\n";
  for (const auto& [name, c] : r.per_class) {
    out += pad(name) + "       " + pct(c.auroc_capped) + "    " + pct(c.f1) + "\n";
  }
  out += rule + "\n";
  out += pad("Mean") + "       " + pct(r.mean_auroc) + "    " + pct(r.mean_f1) + "\n";
  return out;
}

}  // namespace protoseg
