#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "from/geometry.hpp"

namespace from {

// One occlusion pattern over a KxK block grid: either the clean pattern or a
// rectangle of adjacent m x n blocks anchored at (row, col).
struct Pattern {
  enum class Kind { clean, rect };
  Kind kind = Kind::clean;
  int row = 0;
  int col = 0;
  int m = 0;  // height in blocks
  int n = 0;  // width in blocks

  bool operator==(const Pattern&) const = default;
};

struct PatternCodebook {
  int k = 0;
  std::vector<Pattern> patterns;  // index 0 is always the clean pattern

  std::size_t size() const { return patterns.size(); }
  const Pattern& operator[](std::size_t i) const { return patterns[i]; }
};

inline void check_grid_k(int k) {
  if (k < 1 || k > 16) throw std::invalid_argument("grid K must be in [1,16]");
}

// Codebook length (K(K+1)/2)^2 + 1. Canonical order: clean first, then
// rectangles sorted by (m, n, row, col).
inline PatternCodebook enumerate_patterns(int k) {
  check_grid_k(k);
  PatternCodebook cb;
  cb.k = k;
  cb.patterns.push_back(Pattern{});
  for (int m = 1; m <= k; ++m)
    for (int n = 1; n <= k; ++n)
      for (int row = 0; row + m <= k; ++row)
        for (int col = 0; col + n <= k; ++col)
          cb.patterns.push_back(Pattern{Pattern::Kind::rect, row, col, m, n});
  return cb;
}

// entry [i-1][j-1] = number of rectangle patterns of size i x j
inline std::vector<std::vector<int>> size_matrix(int k) {
  check_grid_k(k);
  std::vector<std::vector<int>> mat(k, std::vector<int>(k));
  for (int i = 1; i <= k; ++i)
    for (int j = 1; j <= k; ++j) mat[i - 1][j - 1] = (k - i + 1) * (k - j + 1);
  return mat;
}

// Block boundaries at round(i*dim/K) partition any image size without gaps.
inline int block_edge(int index, int dim, int k) {
  return static_cast<int>(
      std::llround(static_cast<double>(index) * dim / static_cast<double>(k)));
}

inline PixelBox pattern_to_pixel_box(const Pattern& p, int k, int img_w,
                                     int img_h) {
  if (p.kind == Pattern::Kind::clean) return PixelBox{0, 0, 0, 0};
  return PixelBox{block_edge(p.col, img_w, k), block_edge(p.row, img_h, k),
                  block_edge(p.col + p.n, img_w, k),
                  block_edge(p.row + p.m, img_h, k)};
}

// Label = argmax IoU over rectangle patterns; empty box is the clean label.
// Ties break to the smallest index.
inline std::size_t match_box_to_pattern(const PixelBox& box,
                                        const PatternCodebook& cb, int img_w,
                                        int img_h) {
  if (box.area() == 0) return 0;
  std::size_t best = 1;
  double best_iou = -1.0;
  for (std::size_t i = 1; i < cb.patterns.size(); ++i) {
    double v = iou(box, pattern_to_pixel_box(cb.patterns[i], cb.k, img_w, img_h));
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
  }
  return best;
}

inline std::vector<std::vector<std::uint8_t>> pattern_to_block_mask(
    const Pattern& p, int k) {
  check_grid_k(k);
  std::vector<std::vector<std::uint8_t>> grid(
      k, std::vector<std::uint8_t>(k, 0));
  if (p.kind == Pattern::Kind::rect)
    for (int r = p.row; r < p.row + p.m; ++r)
      for (int c = p.col; c < p.col + p.n; ++c) grid[r][c] = 1;
  return grid;
}

}  // namespace from
