#pragma once

// Overlapping patch grid and reassembly of per-patch token outputs.
//
// All pixel quantities refer to the image the backbone sees (after any
// downscaling done by the extractor). Patches are P x P windows whose start
// offsets along each axis are spread linearly between 0 and L - P, with
// n = ceil((L - P) / (P - 2 O)) + 1 patches per axis. Overlapping tokens
// are owned by the patch whose center is nearest; every other copy is
// discarded.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "protoseg/error.hpp"
#include "protoseg/grid.hpp"

namespace protoseg {

inline constexpr std::uint32_t kTokenSize = 16;

struct ImageGeom {
  std::uint32_t height = 0;
  std::uint32_t width = 0;

  void validate() const {
    if (height < 1 || width < 1) fail_data("image geometry must be at least 1x1");
  }
  friend bool operator==(const ImageGeom&, const ImageGeom&) = default;
};

struct PatchIndex {
  std::size_t iy = 0;
  std::size_t ix = 0;
  friend bool operator==(const PatchIndex&, const PatchIndex&) = default;
};

struct PatchGrid {
  std::uint32_t patch_size = 0;
  std::uint32_t min_overlap = 0;
  std::vector<std::uint32_t> starts_y;
  std::vector<std::uint32_t> starts_x;

  std::size_t count() const noexcept { return starts_y.size() * starts_x.size(); }
  // Row-major linear index.
  std::size_t linear(PatchIndex p) const noexcept { return p.iy * starts_x.size() + p.ix; }
  PatchIndex index(std::size_t linear) const { return {linear / starts_x.size(), linear % starts_x.size()}; }
  bool contains(PatchIndex p) const noexcept { return p.iy < starts_y.size() && p.ix < starts_x.size(); }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

// How global tokens are mapped onto patch tokens.
//  strict:        every patch start must be a multiple of the token size, so
//                 global and patch token lattices coincide (exact).
//  nearest_token: patch starts may be arbitrary; a global token takes the
//                 value of the owning patch's token containing its center.
enum class Alignment { strict, nearest_token };

struct TokenGridGeom {
  std::uint32_t token_size = kTokenSize;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Per-axis patch count, n = ceil((L - P) / (P - 2 O)) + 1.
inline std::size_t axis_patch_count(std::uint32_t length, std::uint32_t patch_size, std::uint32_t min_overlap) {
  const std::uint64_t span = length - patch_size;
  const std::uint64_t stride = patch_size - 2ull * min_overlap;
  return static_cast<std::size_t>((span + stride - 1) / stride + 1);
}

inline std::vector<std::uint32_t> compute_axis_starts(std::uint32_t length, std::uint32_t patch_size,
                                                      std::uint32_t min_overlap) {
  if (patch_size == 0) fail_config("patch size must be positive");
  if (patch_size <= 2ull * min_overlap) fail_config("degenerate stride: patch size must exceed twice the overlap");
  if (length < patch_size) {
    fail_data("image smaller than patch (" + std::to_string(length) + " < " + std::to_string(patch_size) + ")");
  }
  const std::size_t n = axis_patch_count(length, patch_size, min_overlap);
  std::vector<std::uint32_t> starts(n, 0);
  if (n == 1) return starts;

  const std::uint64_t span = length - patch_size;
  const std::uint64_t den = n - 1;
  for (std::size_t i = 0; i < n; ++i) {
    // round(i * span / (n - 1)); exact halves round toward zero
    const std::uint64_t num = i * span;
    std::uint64_t q = num / den;
    if (2 * (num % den) > den) ++q;
    starts[i] = static_cast<std::uint32_t>(q);
  }
  const std::uint32_t max_step = patch_size - 2 * min_overlap;
  for (std::size_t i = 1; i < n; ++i) {
    if (starts[i] <= starts[i - 1] || starts[i] - starts[i - 1] > max_step) {
      fail_internal("patch spacing violates the minimum overlap after rounding");
    }
  }
  return starts;
}

inline PatchGrid build_grid(const ImageGeom& geom, std::uint32_t patch_size, std::uint32_t min_overlap) {
  geom.validate();
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.min_overlap = min_overlap;
  grid.starts_y = compute_axis_starts(geom.height, patch_size, min_overlap);
  grid.starts_x = compute_axis_starts(geom.width, patch_size, min_overlap);
  return grid;
}

namespace detail {

inline void check_alignment(const PatchGrid& grid, std::uint32_t token_size, Alignment alignment) {
  if (token_size == 0) fail_config("token size must be positive");
  if (grid.patch_size % token_size != 0) {
    fail_data("patch size " + std::to_string(grid.patch_size) + " is not a multiple of the token size");
  }
  if (alignment != Alignment::strict) return;
  for (const auto* starts : {&grid.starts_y, &grid.starts_x}) {
    for (auto s : *starts) {
      if (s % token_size != 0) {
        fail_data("patch start " + std::to_string(s) + " is not aligned to the " + std::to_string(token_size) +
                  "-pixel token lattice");
      }
    }
  }
}

// For each global token along one axis: owning patch and the token index
// inside that patch.
struct AxisOwnership {
  std::vector<std::size_t> patch;
  std::vector<std::size_t> local;
};

inline AxisOwnership axis_ownership(std::span<const std::uint32_t> starts, std::uint32_t patch_size,
                                    std::uint32_t length, std::uint32_t token_size) {
  const std::size_t tokens = (static_cast<std::size_t>(length) + token_size - 1) / token_size;
  const std::size_t patch_tokens = patch_size / token_size;
  AxisOwnership out;
  out.patch.resize(tokens);
  out.local.resize(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    // Doubled coordinates keep half-pixel centers integral.
    std::int64_t center2 = 2 * static_cast<std::int64_t>(t * token_size) + token_size;
    center2 = std::min<std::int64_t>(center2, 2 * (static_cast<std::int64_t>(length) - 1));
    std::size_t best = starts.size();
    std::int64_t best_dist = 0;
    for (std::size_t i = 0; i < starts.size(); ++i) {
      const std::int64_t s2 = 2 * static_cast<std::int64_t>(starts[i]);
      if (center2 < s2 || center2 >= s2 + 2 * static_cast<std::int64_t>(patch_size)) continue;
      const std::int64_t d = std::abs(center2 - (s2 + patch_size));
      if (best == starts.size() || d < best_dist) {
        best = i;
        best_dist = d;
      }
    }
    if (best == starts.size()) fail_internal("token not covered by any patch");
    out.patch[t] = best;
    const std::int64_t offset2 = center2 - 2 * static_cast<std::int64_t>(starts[best]);
    out.local[t] = std::min<std::size_t>(static_cast<std::size_t>(offset2 / (2 * token_size)), patch_tokens - 1);
  }
  return out;
}

}  // namespace detail

inline TokenGridGeom token_grid(const ImageGeom& geom, std::uint32_t token_size = kTokenSize) {
  return {token_size, (geom.height + token_size - 1) / token_size, (geom.width + token_size - 1) / token_size};
}

// Tokens of the full-image grid owned by one patch (1 = owned).
inline BinaryMask ownership_mask(const PatchGrid& grid, const ImageGeom& geom, PatchIndex patch,
                                 std::uint32_t token_size = kTokenSize, Alignment alignment = Alignment::strict) {
  if (!grid.contains(patch)) fail_internal("patch index outside grid");
  detail::check_alignment(grid, token_size, alignment);
  const auto ys = detail::axis_ownership(grid.starts_y, grid.patch_size, geom.height, token_size);
  const auto xs = detail::axis_ownership(grid.starts_x, grid.patch_size, geom.width, token_size);
  BinaryMask mask(ys.patch.size(), xs.patch.size(), 0);
  for (std::size_t r = 0; r < mask.rows(); ++r) {
    if (ys.patch[r] != patch.iy) continue;
    for (std::size_t c = 0; c < mask.cols(); ++c) mask(r, c) = xs.patch[c] == patch.ix;
  }
  return mask;
}

// Token grid with `channels` floats per token, row-major, channel fastest.
struct TokenField {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 1;
  std::vector<float> data;

  TokenField() = default;
  TokenField(std::size_t r, std::size_t c, std::size_t ch) : rows(r), cols(c), channels(ch), data(r * c * ch, 0.0f) {}
  TokenField(std::size_t r, std::size_t c, std::size_t ch, std::vector<float> values)
      : rows(r), cols(c), channels(ch), data(std::move(values)) {
    if (data.size() != rows * cols * channels) fail_data("token field payload does not match its shape");
  }

  std::size_t tokens() const noexcept { return rows * cols; }
  std::span<float> at(std::size_t r, std::size_t c) {
    return std::span<float>(data).subspan((r * cols + c) * channels, channels);
  }
  std::span<const float> at(std::size_t r, std::size_t c) const {
    return std::span<const float>(data).subspan((r * cols + c) * channels, channels);
  }
  friend bool operator==(const TokenField&, const TokenField&) = default;
};

struct PatchView {
  PatchIndex index;
  const TokenField* field = nullptr;
};

// Stitches per-patch token fields into one full-image field.
inline TokenField assemble(std::span<const PatchView> patches, const PatchGrid& grid, const ImageGeom& geom,
                           std::uint32_t token_size = kTokenSize, Alignment alignment = Alignment::strict) {
  detail::check_alignment(grid, token_size, alignment);
  const std::size_t patch_tokens = grid.patch_size / token_size;
  std::vector<const TokenField*> by_index(grid.count(), nullptr);
  std::size_t channels = 0;
  for (const auto& p : patches) {
    if (!grid.contains(p.index) || p.field == nullptr) fail_data("patch map refers to a patch outside the grid");
    auto& slot = by_index[grid.linear(p.index)];
    if (slot != nullptr) {
      fail_data("duplicate map for patch (" + std::to_string(p.index.iy) + "," + std::to_string(p.index.ix) + ")");
    }
    if (p.field->rows != patch_tokens || p.field->cols != patch_tokens) {
      fail_data("patch map shape " + shape_string(p.field->rows, p.field->cols) + " does not match " +
                shape_string(patch_tokens, patch_tokens));
    }
    if (channels == 0) channels = p.field->channels;
    if (p.field->channels != channels) fail_data("patch maps disagree on channel count");
    slot = p.field;
  }
  for (std::size_t i = 0; i < by_index.size(); ++i) {
    if (by_index[i] == nullptr) {
      const auto p = grid.index(i);
      fail_data("missing map for patch (" + std::to_string(p.iy) + "," + std::to_string(p.ix) + ")");
    }
  }

  const auto ys = detail::axis_ownership(grid.starts_y, grid.patch_size, geom.height, token_size);
  const auto xs = detail::axis_ownership(grid.starts_x, grid.patch_size, geom.width, token_size);
  TokenField out(ys.patch.size(), xs.patch.size(), channels);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      const TokenField& src = *by_index[grid.linear({ys.patch[r], xs.patch[c]})];
      const auto from = src.at(ys.local[r], xs.local[c]);
      std::copy(from.begin(), from.end(), out.at(r, c).begin());
    }
  }
  return out;
}

// Cuts the token window of one patch out of a full-image field. Requires a
// token-aligned grid.
inline TokenField crop_patch(const TokenField& global, const PatchGrid& grid, PatchIndex patch,
                             std::uint32_t token_size = kTokenSize) {
  if (!grid.contains(patch)) fail_internal("patch index outside grid");
  detail::check_alignment(grid, token_size, Alignment::strict);
  const std::size_t n = grid.patch_size / token_size;
  const std::size_t r0 = grid.starts_y[patch.iy] / token_size;
  const std::size_t c0 = grid.starts_x[patch.ix] / token_size;
  if (r0 + n > global.rows || c0 + n > global.cols) fail_data("patch window exceeds the global token field");
  TokenField out(n, n, global.channels);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const auto from = global.at(r0 + r, c0 + c);
      std::copy(from.begin(), from.end(), out.at(r, c).begin());
    }
  }
  return out;
}

}  // namespace protoseg
