#pragma once

#include "bedseg/common.hpp"

#include <filesystem>
#include <vector>

namespace bedseg {

/// Raster image normalized to [0,1].
/// Row-major, channel-interleaved: data[(y*width + x)*channels + c].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (grayscale) or 3 (RGB)
  std::vector<float> data;

  static Image zeros(int width, int height, int channels);

  float at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float& at(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Reads a binary PGM (P5) or PPM (P6). Maxval must be 255, or 65535 for
/// 16-bit PGM (big-endian samples, netpbm convention). Pixels map to
/// value/maxval exactly. Header comments are rejected.
///
/// Throws IoError (unreadable file), FormatError (malformed header),
/// LengthError (payload size does not match the header).
Image read_image(const std::filesystem::path& path);

/// Writes 8-bit binary PGM (1 channel) or PPM (3 channels) with the
/// canonical header "P5\n<w> <h>\n255\n"; value v is written as
/// round(v*255), half away from zero.
void write_image(const Image& img, const std::filesystem::path& path);

/// Quantizes to the 8-bit grid, i.e. what a write/read round trip yields.
float quantize8(float v);

PlaneF gray_plane(const Image& img);            // requires channels == 1
Image image_from_plane(const PlaneF& plane);    // single-channel image

}  // namespace bedseg
