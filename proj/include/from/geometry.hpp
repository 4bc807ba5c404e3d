#pragma once

#include <algorithm>
#include <stdexcept>

namespace from {

// Half-open pixel rectangle [x0,x1) x [y0,y1). Area 0 means "no occlusion".
struct PixelBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  long long area() const {
    return static_cast<long long>(x1 - x0) * static_cast<long long>(y1 - y0);
  }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool operator==(const PixelBox&) const = default;

  bool valid_within(int img_w, int img_h) const {
    return 0 <= x0 && x0 <= x1 && x1 <= img_w && 0 <= y0 && y0 <= y1 &&
           y1 <= img_h;
  }

  PixelBox clipped(int img_w, int img_h) const {
    PixelBox c{std::clamp(x0, 0, img_w), std::clamp(y0, 0, img_h),
               std::clamp(x1, 0, img_w), std::clamp(y1, 0, img_h)};
    if (c.x1 < c.x0) c.x1 = c.x0;
    if (c.y1 < c.y0) c.y1 = c.y0;
    return c;
  }
};

inline double iou(const PixelBox& a, const PixelBox& b) {
  long long ix0 = std::max(a.x0, b.x0);
  long long iy0 = std::max(a.y0, b.y0);
  long long ix1 = std::min(a.x1, b.x1);
  long long iy1 = std::min(a.y1, b.y1);
  long long inter = std::max(0LL, ix1 - ix0) * std::max(0LL, iy1 - iy0);
  long long uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double occluded_fraction(const PixelBox& box, int img_w, int img_h) {
  if (img_w <= 0 || img_h <= 0) throw std::invalid_argument("empty image");
  return static_cast<double>(box.area()) /
         (static_cast<double>(img_w) * static_cast<double>(img_h));
}

}  // namespace from
