#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "protoseg/error.hpp"

namespace protoseg {

// Dense row-major 2-D array.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Grid(std::size_t rows, std::size_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) fail_internal("grid data size does not match shape");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols_, cols_); }
  std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols_, cols_); }

  bool same_shape(const Grid& other) const noexcept { return rows_ == other.rows_ && cols_ == other.cols_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Resolution of a map relative to the original image, as a fraction.
struct Scale {
  std::uint32_t num = 1;
  std::uint32_t den = 1;
  friend bool operator==(const Scale&, const Scale&) = default;
};

inline constexpr Scale kTokenScale{10, 256};  // 0.625 downscale / 16-pixel tokens
inline constexpr Scale kOutputScale{1, 4};

struct AnomalyMap {
  Grid<float> scores;
  Scale scale = kTokenScale;

  std::size_t rows() const noexcept { return scores.rows(); }
  std::size_t cols() const noexcept { return scores.cols(); }
  friend bool operator==(const AnomalyMap&, const AnomalyMap&) = default;
};

// One byte per pixel, 0 or 1.
using BinaryMask = Grid<std::uint8_t>;

inline std::size_t count_true(const BinaryMask& mask) {
  std::size_t n = 0;
  for (auto v : mask.values()) n += v != 0;
  return n;
}

inline std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace protoseg
