#include "pyrec/pyramid.hpp"

#include <string>

#include "pyrec/errors.hpp"

namespace pyrec {

namespace {

Image halve(const Image& src) {
  Image out;
  out.h = src.h / 2;
  out.w = src.w / 2;
  out.c = src.c;
  out.data.resize(static_cast<size_t>(out.h) * out.w * out.c);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x)
      for (int ch = 0; ch < out.c; ++ch)
        out.at(y, x, ch) = 0.25f * (src.at(2 * y, 2 * x, ch) + src.at(2 * y, 2 * x + 1, ch) +
                                    src.at(2 * y + 1, 2 * x, ch) + src.at(2 * y + 1, 2 * x + 1, ch));
  return out;
}

}  // namespace

ImagePyramid build_pyramid(const Image& image, int scales) {
  if (scales < 1) throw ConfigError("build_pyramid: scales must be >= 1");
  const int div = 1 << (scales - 1);
  if (image.h % div != 0 || image.w % div != 0)
    throw ConfigError("build_pyramid: image " + std::to_string(image.h) + "x" +
                      std::to_string(image.w) + " not divisible by 2^(S-1)=" + std::to_string(div));
  if (image.data.size() != static_cast<size_t>(image.h) * image.w * image.c)
    throw ConfigError("build_pyramid: payload size does not match extents");
  ImagePyramid pyr;
  pyr.levels.resize(static_cast<size_t>(scales));
  pyr.levels[static_cast<size_t>(scales - 1)] = image;
  for (int l = scales - 2; l >= 0; --l)
    pyr.levels[static_cast<size_t>(l)] = halve(pyr.levels[static_cast<size_t>(l + 1)]);
  return pyr;
}

PatchSet patchify(const Image& img, int patch, int level) {
  if (patch <= 0 || img.h % patch != 0 || img.w % patch != 0)
    throw ConfigError("patchify: side " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                      " not divisible by patch " + std::to_string(patch));
  PatchSet ps;
  ps.level = level;
  ps.grid = {img.h / patch, img.w / patch};
  ps.patch = patch;
  ps.channels = img.c;
  const int n = ps.grid.count();
  const int width = patch * patch * img.c;
  std::vector<float> flat(static_cast<size_t>(n) * width);
  ps.coords.resize(static_cast<size_t>(n));
  for (int r = 0; r < ps.grid.rows; ++r) {
    for (int c = 0; c < ps.grid.cols; ++c) {
      const int idx = r * ps.grid.cols + c;
      float* dst = flat.data() + static_cast<size_t>(idx) * width;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int ch = 0; ch < img.c; ++ch)
            *dst++ = img.at(r * patch + py, c * patch + px, ch);
      ps.coords[static_cast<size_t>(idx)] = {
          (static_cast<float>(c) + 0.5f) / static_cast<float>(ps.grid.cols),
          (static_cast<float>(r) + 0.5f) / static_cast<float>(ps.grid.rows),
          static_cast<float>(patch) / static_cast<float>(img.w)};
    }
  }
  ps.flat = Tensor::from({n, width}, std::move(flat));
  return ps;
}

Image unpatchify(const PatchSet& ps) {
  Image img;
  img.h = ps.grid.rows * ps.patch;
  img.w = ps.grid.cols * ps.patch;
  img.c = ps.channels;
  img.data.resize(static_cast<size_t>(img.h) * img.w * img.c);
  auto flat = ps.flat.data();
  const int width = ps.patch * ps.patch * ps.channels;
  for (int r = 0; r < ps.grid.rows; ++r) {
    for (int c = 0; c < ps.grid.cols; ++c) {
      const int idx = r * ps.grid.cols + c;
      const float* src = flat.data() + static_cast<size_t>(idx) * width;
      for (int py = 0; py < ps.patch; ++py)
        for (int px = 0; px < ps.patch; ++px)
          for (int ch = 0; ch < ps.channels; ++ch)
            img.at(r * ps.patch + py, c * ps.patch + px, ch) = *src++;
    }
  }
  return img;
}

std::array<int, 4> children_of(int index, GridShape coarse, GridShape fine) {
  if (fine.rows != 2 * coarse.rows || fine.cols != 2 * coarse.cols)
    throw ContractError("children_of: fine grid must double the coarse grid");
  if (index < 0 || index >= coarse.count()) throw ContractError("children_of: index out of range");
  const int r = index / coarse.cols;
  const int c = index % coarse.cols;
  const int base = 2 * r * fine.cols + 2 * c;
  return {base, base + 1, base + fine.cols, base + fine.cols + 1};
}

}  // namespace pyrec
