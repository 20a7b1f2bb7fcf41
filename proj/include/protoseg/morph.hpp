#pragma once

// Binary post-processing of anomaly maps: threshold, multi-oriented line
// closing, gating at a laxer threshold, hole filling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "protoseg/calibrate.hpp"
#include "protoseg/error.hpp"
#include "protoseg/grid.hpp"
#include "protoseg/parallel.hpp"

namespace protoseg {

struct Offset {
  int dy = 0;
  int dx = 0;
  friend bool operator==(const Offset&, const Offset&) = default;
  friend auto operator<=>(const Offset&, const Offset&) = default;
};

struct LineElement {
  int radius = 0;
  double angle_deg = 0.0;
  std::vector<Offset> offsets;  // ordered by step along the major axis
};

// score > theta
inline BinaryMask threshold_mask(const AnomalyMap& map, double theta) {
  if (theta < 0.0) fail_config("threshold must be non-negative");
  BinaryMask out(map.rows(), map.cols(), 0);
  auto dst = out.values();
  auto src = map.scores.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]) > theta;
  return out;
}

// Rasterized line segment of 2r+1 pixels through the origin. Steps run
// along the dominant axis; the minor coordinate is rounded half away from
// zero, so the element is point-symmetric. Offsets are (dy, dx) in image
// coordinates (y down).
inline LineElement line_element(int radius, double angle_deg) {
  if (radius < 1) fail_config("line radius must be at least 1");
  if (!(angle_deg >= 0.0 && angle_deg < 180.0)) fail_config("line angle must lie in [0, 180)");
  const double theta = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  LineElement e{radius, angle_deg, {}};
  e.offsets.reserve(2 * static_cast<std::size_t>(radius) + 1);
  const bool x_major = std::abs(c) >= std::abs(s);
  const double slope = x_major ? s / c : c / s;
  for (int t = -radius; t <= radius; ++t) {
    const int minor = static_cast<int>(std::round(t * slope));
    e.offsets.push_back(x_major ? Offset{minor, t} : Offset{t, minor});
  }
  return e;
}

namespace detail {

inline void check_reach(const LineElement& elem, int pad) {
  for (const auto& o : elem.offsets) {
    if (std::abs(o.dy) > pad || std::abs(o.dx) > pad) fail_config("padding smaller than the structuring element");
  }
}

// out(y, x) = OR_o in(y - dy, x - dx); pixels outside the grid are 0.
inline BinaryMask dilate(const BinaryMask& in, std::span<const Offset> offsets) {
  const auto rows = static_cast<std::ptrdiff_t>(in.rows());
  const auto cols = static_cast<std::ptrdiff_t>(in.cols());
  BinaryMask out(in.rows(), in.cols(), 0);
  for (const auto& o : offsets) {
    for (std::ptrdiff_t y = 0; y < rows; ++y) {
      const std::ptrdiff_t sy = y - o.dy;
      if (sy < 0 || sy >= rows) continue;
      const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, o.dx);
      const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(cols, cols + o.dx);
      const std::uint8_t* src = in.row(static_cast<std::size_t>(sy)).data();
      std::uint8_t* dst = out.row(static_cast<std::size_t>(y)).data();
      for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] |= src[x - o.dx];
    }
  }
  return out;
}

// out(y, x) = AND_o in(y + dy, x + dx); pixels outside the grid are 0.
inline BinaryMask erode(const BinaryMask& in, std::span<const Offset> offsets) {
  const auto rows = static_cast<std::ptrdiff_t>(in.rows());
  const auto cols = static_cast<std::ptrdiff_t>(in.cols());
  BinaryMask out(in.rows(), in.cols(), 1);
  for (const auto& o : offsets) {
    for (std::ptrdiff_t y = 0; y < rows; ++y) {
      std::uint8_t* dst = out.row(static_cast<std::size_t>(y)).data();
      const std::ptrdiff_t sy = y + o.dy;
      if (sy < 0 || sy >= rows) {
        std::fill(dst, dst + cols, std::uint8_t{0});
        continue;
      }
      const std::uint8_t* src = in.row(static_cast<std::size_t>(sy)).data();
      const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -o.dx);
      const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(cols, cols - o.dx);
      for (std::ptrdiff_t x = 0; x < std::min(x0, cols); ++x) dst[x] = 0;
      for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] &= src[x + o.dx];
      for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(x1, 0); x < cols; ++x) dst[x] = 0;
    }
  }
  return out;
}

}  // namespace detail

// Zero-pads by `pad`, dilates then erodes with `elem`, crops.
inline BinaryMask close_with_element(const BinaryMask& mask, const LineElement& elem, int pad) {
  detail::check_reach(elem, pad);
  if (mask.empty()) return mask;
  const auto p = static_cast<std::size_t>(pad);
  BinaryMask padded(mask.rows() + 2 * p, mask.cols() + 2 * p, 0);
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    std::copy(mask.row(r).begin(), mask.row(r).end(), padded.row(r + p).begin() + static_cast<std::ptrdiff_t>(p));
  }
  const BinaryMask closed = detail::erode(detail::dilate(padded, elem.offsets), elem.offsets);
  BinaryMask out(mask.rows(), mask.cols(), 0);
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    const auto src = closed.row(r + p).subspan(p, mask.cols());
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

// OR of closings with lines at angles i * 180 / orientations.
inline BinaryMask multi_orient_close(const BinaryMask& mask, int orientations, int radius, std::size_t jobs = 1) {
  if (orientations < 1) fail_config("need at least one orientation");
  std::vector<BinaryMask> closed(static_cast<std::size_t>(orientations));
  parallel_for(closed.size(), jobs, [&](std::size_t i) {
    const double angle = static_cast<double>(i) * 180.0 / static_cast<double>(orientations);
    closed[i] = close_with_element(mask, line_element(radius, angle), radius + 1);
  });
  BinaryMask out(mask.rows(), mask.cols(), 0);
  for (const auto& c : closed) {
    auto dst = out.values();
    auto src = c.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] |= src[i];
  }
  return out;
}

inline BinaryMask gate_mask(const BinaryMask& closed, const AnomalyMap& map, double theta, double gate_factor) {
  if (closed.rows() != map.rows() || closed.cols() != map.cols()) {
    fail_data("gate geometry mismatch: mask " + shape_string(closed.rows(), closed.cols()) + " vs map " +
              shape_string(map.rows(), map.cols()));
  }
  const BinaryMask gate = threshold_mask(map, gate_factor * theta);
  BinaryMask out = closed;
  auto dst = out.values();
  auto g = gate.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] &= g[i];
  return out;
}

// Background not 4-connected to the border becomes foreground.
inline BinaryMask fill_holes(const BinaryMask& mask) {
  const std::size_t rows = mask.rows(), cols = mask.cols();
  BinaryMask outside(rows, cols, 0);
  std::vector<std::pair<std::size_t, std::size_t>> stack;
  auto seed = [&](std::size_t r, std::size_t c) {
    if (!mask(r, c) && !outside(r, c)) {
      outside(r, c) = 1;
      stack.emplace_back(r, c);
    }
  };
  for (std::size_t r = 0; r < rows; ++r) {
    seed(r, 0);
    seed(r, cols - 1);
  }
  for (std::size_t c = 0; c < cols; ++c) {
    seed(0, c);
    seed(rows - 1, c);
  }
  while (!stack.empty()) {
    const auto [r, c] = stack.back();
    stack.pop_back();
    if (r > 0) seed(r - 1, c);
    if (r + 1 < rows) seed(r + 1, c);
    if (c > 0) seed(r, c - 1);
    if (c + 1 < cols) seed(r, c + 1);
  }
  BinaryMask out(rows, cols, 0);
  auto dst = out.values();
  auto o = outside.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = !o[i];
  return out;
}

struct PostprocessConfig {
  int orientations = 16;
  int radius = 26;
  double gate_factor = 0.8;
};

inline BinaryMask postprocess(const AnomalyMap& map, const CalibrationResult& cal, const PostprocessConfig& cfg = {},
                              std::size_t jobs = 1) {
  if (map.scores.empty()) return BinaryMask(map.rows(), map.cols(), 0);
  const BinaryMask seed = threshold_mask(map, cal.threshold);
  const BinaryMask closed = multi_orient_close(seed, cfg.orientations, cfg.radius, jobs);
  return fill_holes(gate_mask(closed, map, cal.threshold, cfg.gate_factor));
}

}  // namespace protoseg
