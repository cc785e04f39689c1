#pragma once

#include <array>
#include <vector>

#include "pyrec/tensor.hpp"

namespace pyrec {

/// Row-major h*w*c float image, values in [0,1].
struct Image {
  int h = 0, w = 0, c = 0;
  std::vector<float> data;

  float at(int y, int x, int ch) const {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  float& at(int y, int x, int ch) {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
};

/// S levels, coarsest first; levels[S-1] is the input image and each side
/// halves from one level to the previous.
struct ImagePyramid {
  std::vector<Image> levels;
  int scales() const { return static_cast<int>(levels.size()); }
};

struct GridShape {
  int rows = 0, cols = 0;
  int count() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

/// Flattened non-overlapping patches of one level with normalized
/// (cx, cy, s) per patch, row-major grid order.
struct PatchSet {
  int level = 0;
  Tensor flat;  // [N x (P*P*c)]
  std::vector<std::array<float, 3>> coords;
  GridShape grid;
  int patch = 0;
  int channels = 0;
};

/// Builds the scale pyramid by repeated 2x2 area averaging, which conserves
/// the mean exactly for the 2x factor.
ImagePyramid build_pyramid(const Image& image, int scales);

PatchSet patchify(const Image& level_image, int patch, int level = 0);

/// Inverse of patchify; exact.
Image unpatchify(const PatchSet& patches);

/// The four level-(l+1) patch indices covering parent `index`, row-major.
std::array<int, 4> children_of(int index, GridShape grid_coarse, GridShape grid_fine);

}  // namespace pyrec
