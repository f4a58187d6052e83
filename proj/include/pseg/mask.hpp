#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/image.hpp"
#include "pseg/rng.hpp"

namespace pseg {

// Binary mask over an image grid.
struct BinMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;  // 0 or 1

  static BinMask zeros(int h, int w) {
    BinMask m;
    m.h = h;
    m.w = w;
    m.v.assign(static_cast<std::size_t>(h) * w, 0);
    return m;
  }

  std::uint8_t at(int r, int c) const {
    return v[static_cast<std::size_t>(r) * w + c];
  }
  void set(int r, int c, std::uint8_t x) {
    v[static_cast<std::size_t>(r) * w + c] = x;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto x : v) n += x != 0;
    return n;
  }
  bool empty() const { return count() == 0; }

  bool operator==(const BinMask& o) const {
    return h == o.h && w == o.w && v == o.v;
  }
};

// |a AND b| / |a OR b|. Two empty masks compare as identical (1); exactly
// one empty gives 0.
inline double iou(const BinMask& a, const BinMask& b) {
  if (a.h != b.h || a.w != b.w)
    throw ContractError(cat("iou: mask shapes ", a.h, "x", a.w, " vs ", b.h,
                            "x", b.w));
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    bool x = a.v[i] != 0, y = b.v[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Inclusive (r0, c0, r1, c1) pixel bounds.
using Box = std::array<int, 4>;

inline Box tightest_box(const BinMask& m) {
  int r0 = m.h, c0 = m.w, r1 = -1, c1 = -1;
  for (int r = 0; r < m.h; ++r)
    for (int c = 0; c < m.w; ++c)
      if (m.at(r, c)) {
        r0 = std::min(r0, r);
        c0 = std::min(c0, c);
        r1 = std::max(r1, r);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) throw InputError("tightest_box of an empty mask");
  return {r0, c0, r1, c1};
}

inline BinMask box_mask(const Box& b, int h, int w) {
  BinMask m = BinMask::zeros(h, w);
  for (int r = std::max(0, b[0]); r <= std::min(h - 1, b[2]); ++r)
    for (int c = std::max(0, b[1]); c <= std::min(w - 1, b[3]); ++c)
      m.set(r, c, 1);
  return m;
}

// k i.i.d. uniform draws over foreground pixels. `with_replacement = false`
// draws distinct pixels while the mask has enough of them.
inline std::vector<std::pair<int, int>> sample_points_in_mask(
    const BinMask& m, int k, Rng& rng, bool with_replacement = true) {
  if (k < 1) throw InputError(cat("sample_points_in_mask: k = ", k));
  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < m.v.size(); ++i)
    if (m.v[i]) fg.push_back(i);
  if (fg.empty()) throw InputError("sample_points_in_mask: empty mask");
  std::vector<std::pair<int, int>> pts;
  pts.reserve(k);
  std::vector<std::size_t> pool = fg;
  for (int i = 0; i < k; ++i) {
    std::size_t pick;
    if (with_replacement || pool.empty()) {
      pick = fg[rng.uniform_int(fg.size())];
    } else {
      std::size_t j = rng.uniform_int(pool.size());
      pick = pool[j];
      pool[j] = pool.back();
      pool.pop_back();
    }
    pts.emplace_back(static_cast<int>(pick / m.w),
                     static_cast<int>(pick % m.w));
  }
  return pts;
}

// PGM persistence: foreground is 255, background 0.
void save_mask(const std::string& path, const BinMask& m);
BinMask load_mask(const std::string& path);

}  // namespace pseg
