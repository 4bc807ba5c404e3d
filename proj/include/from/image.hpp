#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace from {

// Single-channel image, row-major, values in [-1, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, float fill = 0.f)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }

  void clamp_range() {
    for (float& v : pixels) v = std::clamp(v, -1.f, 1.f);
  }

  bool operator==(const Image&) const = default;
};

}  // namespace from
