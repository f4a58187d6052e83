#include "pseg/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "pseg/mask.hpp"

namespace pseg {

namespace {

std::uint8_t quantize(float v) {
  float c = std::min(std::max(v, 0.f), 1.f);
  return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(cat("cannot open '", path, "'"));
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError(cat("cannot write '", path, "'"));
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
  if (!out) throw InputError(cat("short write to '", path, "'"));
}

// Netpbm header scanner: skips whitespace and '#' comments, tracks the
// byte offset for error messages.
struct HeaderScanner {
  const std::vector<std::uint8_t>& bytes;
  const std::string& origin;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < bytes.size()) {
      std::uint8_t c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  long next_int() {
    skip_space();
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9')
      throw ParseError(cat(origin, ": expected integer at byte offset ", pos));
    long v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
    }
    return v;
  }
};

}  // namespace

Image parse_netpbm(const std::vector<std::uint8_t>& bytes,
                   const std::string& origin) {
  if (bytes.size() < 2 || bytes[0] != 'P' ||
      (bytes[1] != '5' && bytes[1] != '6'))
    throw ParseError(cat(origin, ": not a P5/P6 netpbm file (byte offset 0)"));
  const int channels = bytes[1] == '6' ? 3 : 1;
  HeaderScanner sc{bytes, origin, 2};
  long w = sc.next_int();
  long h = sc.next_int();
  long maxval = sc.next_int();
  if (w <= 0 || h <= 0)
    throw ParseError(cat(origin, ": bad dimensions ", w, "x", h));
  if (maxval != 255)
    throw ParseError(cat(origin, ": unsupported maxval ", maxval,
                         " (only 255)"));
  if (sc.pos >= bytes.size())
    throw ParseError(cat(origin, ": truncated header at byte offset ",
                         sc.pos));
  ++sc.pos;  // single whitespace byte after maxval
  const std::size_t expected =
      static_cast<std::size_t>(w) * h * channels;
  const std::size_t got = bytes.size() - sc.pos;
  if (got != expected)
    throw ParseError(cat(origin, ": payload has ", got, " bytes, expected ",
                         expected, " (payload starts at byte offset ",
                         sc.pos, ")"));
  Image img = Image::blank(static_cast<int>(h), static_cast<int>(w),
                           channels);
  for (std::size_t i = 0; i < expected; ++i)
    img.px[i] = static_cast<float>(bytes[sc.pos + i]) / 255.f;
  return img;
}

Image load_image(const std::string& path) {
  return parse_netpbm(read_file(path), path);
}

void save_image(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ContractError(cat("save_image: ", img.channels, " channels"));
  std::string header = cat(img.channels == 3 ? "P6" : "P5", "\n", img.w, " ",
                           img.h, "\n255\n");
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + img.px.size());
  for (float v : img.px) bytes.push_back(quantize(v));
  write_file(path, bytes);
}

void save_mask(const std::string& path, const BinMask& m) {
  Image img = Image::blank(m.h, m.w, 1);
  for (std::size_t i = 0; i < m.v.size(); ++i) img.px[i] = m.v[i] ? 1.f : 0.f;
  save_image(path, img);
}

BinMask load_mask(const std::string& path) {
  Image img = load_image(path);
  if (img.channels != 1)
    throw ParseError(cat(path, ": mask must be a P5 gray image"));
  BinMask m = BinMask::zeros(img.h, img.w);
  for (std::size_t i = 0; i < m.v.size(); ++i)
    m.v[i] = img.px[i] >= 0.5f ? 1 : 0;
  return m;
}

}  // namespace pseg
