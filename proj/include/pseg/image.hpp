#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pseg/common.hpp"

namespace pseg {

// Float image in [0,1], row-major, channels interleaved (1 = gray, 3 = RGB).
struct Image {
  int h = 0;
  int w = 0;
  int channels = 0;
  std::vector<float> px;

  float at(int r, int c, int ch = 0) const {
    return px[(static_cast<std::size_t>(r) * w + c) * channels + ch];
  }
  float& at(int r, int c, int ch = 0) {
    return px[(static_cast<std::size_t>(r) * w + c) * channels + ch];
  }

  static Image blank(int h, int w, int channels, float fill = 0.f) {
    Image im;
    im.h = h;
    im.w = w;
    im.channels = channels;
    im.px.assign(static_cast<std::size_t>(h) * w * channels, fill);
    return im;
  }
};

// PPM (P6) for color, PGM (P5) for gray, 8-bit. Round trips are bit exact
// for data quantized to 8 bits. Malformed files raise ParseError with the
// offending byte offset.
void save_image(const std::string& path, const Image& img);
Image load_image(const std::string& path);

// Parses from an in-memory buffer; load_image wraps this.
Image parse_netpbm(const std::vector<std::uint8_t>& bytes,
                   const std::string& origin);

}  // namespace pseg
