#pragma once

// 8-bit single-channel mask files: 0 = normal, 255 = anomalous. Binary
// portable graymap (P5) or PNG, chosen by file extension.

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "protoseg/binary_io.hpp"
#include "protoseg/error.hpp"
#include "protoseg/grid.hpp"

namespace protoseg {

enum class MaskFormat { pgm, png };

inline MaskFormat parse_mask_format(const std::string& s) {
  if (s == "pgm") return MaskFormat::pgm;
  if (s == "png") return MaskFormat::png;
  fail_config("unknown mask format \"" + s + "\" (expected pgm or png)");
}

inline std::string extension(MaskFormat f) { return f == MaskFormat::pgm ? ".pgm" : ".png"; }

inline MaskFormat mask_format_for(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return MaskFormat::pgm;
  if (ext == ".png") return MaskFormat::png;
  fail_data(path.string() + ": unrecognized mask extension");
}

namespace detail {

inline BinaryMask mask_from_gray(std::size_t rows, std::size_t cols, const std::uint8_t* pixels,
                                 const std::string& source) {
  BinaryMask mask(rows, cols, 0);
  auto dst = mask.values();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const std::uint8_t v = pixels[i];
    if (v != 0 && v != 255) {
      fail_data(source + ": non-binary pixel value " + std::to_string(v) + " at (" + std::to_string(i / cols) + "," +
                std::to_string(i % cols) + ")");
    }
    dst[i] = v == 255;
  }
  return mask;
}

inline std::vector<char> encode_pgm(const BinaryMask& mask) {
  std::string header = "P5\n" + std::to_string(mask.cols()) + " " + std::to_string(mask.rows()) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  for (auto v : mask.values()) bytes.push_back(static_cast<char>(v ? 255 : 0));
  return bytes;
}

inline BinaryMask decode_pgm(const std::vector<char>& bytes, const std::string& source) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) tok += bytes[pos++];
    return tok;
  };
  if (next_token() != "P5") fail_data(source + ": not a binary PGM (P5) file");
  std::size_t width = 0, height = 0, maxval = 0;
  try {
    width = std::stoul(next_token());
    height = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    fail_data(source + ": malformed PGM header");
  }
  if (maxval != 255) fail_data(source + ": unsupported bit depth (maxval " + std::to_string(maxval) + ")");
  ++pos;  // single whitespace before raster
  if (width == 0 || height == 0) fail_data(source + ": empty PGM image");
  if (bytes.size() < pos || bytes.size() - pos != width * height) {
    fail_data(source + ": PGM raster size does not match " + shape_string(height, width));
  }
  return mask_from_gray(height, width, reinterpret_cast<const std::uint8_t*>(bytes.data() + pos), source);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const BinaryMask& mask) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(tmp.string().c_str(), "wb"));
    if (!file) fail_data("cannot write " + tmp.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      fail_internal("libpng initialization failed");
    }
    std::vector<std::uint8_t> row(mask.cols());
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      fail_data("PNG encoding failed for " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(mask.cols()), static_cast<png_uint_32>(mask.rows()), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t r = 0; r < mask.rows(); ++r) {
      for (std::size_t c = 0; c < mask.cols(); ++c) row[c] = mask(r, c) ? 255 : 0;
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

inline BinaryMask read_png(const std::filesystem::path& path) {
  const std::string source = path.string();
  std::unique_ptr<std::FILE, detail::FileCloser> file(std::fopen(source.c_str(), "rb"));
  if (!file) fail_data("cannot open " + source);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) fail_data(source + ": not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail_internal("libpng initialization failed");
  }
  std::vector<std::uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail_data(source + ": corrupt PNG");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth != 8 || color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail_data(source + ": unsupported bit depth or color type (need 8-bit grayscale)");
  }
  pixels.resize(static_cast<std::size_t>(width) * height);
  for (png_uint_32 r = 0; r < height; ++r) png_read_row(png, pixels.data() + static_cast<std::size_t>(r) * width, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return detail::mask_from_gray(height, width, pixels.data(), source);
}

inline void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  if (mask_format_for(path) == MaskFormat::png) {
    write_png(path, mask);
  } else {
    write_file_atomic(path, detail::encode_pgm(mask));
  }
}

inline BinaryMask read_mask(const std::filesystem::path& path) {
  if (mask_format_for(path) == MaskFormat::png) return read_png(path);
  return detail::decode_pgm(read_file(path), path.string());
}

// Nearest-neighbour resize with the same corner-aligned sampling used for
// anomaly maps.
inline BinaryMask resize_nearest(const BinaryMask& mask, std::size_t rows, std::size_t cols) {
  auto src_index = [](std::size_t i, std::size_t n_in, std::size_t n_out) -> std::size_t {
    if (n_in == 1 || n_out == 1) return 0;
    const double f = static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
    return static_cast<std::size_t>(f + 0.5);
  };
  BinaryMask out(rows, cols, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t sr = src_index(r, mask.rows(), rows);
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = mask(sr, src_index(c, mask.cols(), cols));
  }
  return out;
}

}  // namespace protoseg
