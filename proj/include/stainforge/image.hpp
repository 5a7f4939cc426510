#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stainforge/common.hpp"

namespace stainforge {

/// Single-channel real-valued intensity image, row-major.
struct ChannelImage {
  int width = 0;
  int height = 0;
  double mpp = 0.5;
  std::vector<double> pixels;

  ChannelImage() = default;
  ChannelImage(int w, int h, double microns_per_pixel = 0.5, double fill = 0.0)
      : width(w), height(h), mpp(microns_per_pixel),
        pixels(static_cast<std::size_t>(w) * h, fill) {
    if (w < 1 || h < 1) throw UserError("image dimensions must be positive");
    if (!(microns_per_pixel > 0)) throw UserError("mpp must be positive");
  }

  std::size_t size() const { return pixels.size(); }
  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool same_shape(const ChannelImage& o) const { return width == o.width && height == o.height; }
};

/// Ordered channels of one multiplexed acquisition; all share a shape.
using ChannelStack = std::vector<ChannelImage>;

/// 8-bit RGB image, interleaved.
struct RgbImage {
  int width = 0;
  int height = 0;
  double mpp = 0.5;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h, double microns_per_pixel = 0.5, std::uint8_t fill = 0)
      : width(w), height(h), mpp(microns_per_pixel),
        data(static_cast<std::size_t>(w) * h * 3, fill) {
    if (w < 1 || h < 1) throw UserError("image dimensions must be positive");
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::uint8_t& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

/// Label image: 0 is background, k >= 1 is instance k.
struct InstanceMask {
  int width = 0;
  int height = 0;
  double mpp = 0.5;
  std::vector<std::int32_t> labels;

  InstanceMask() = default;
  InstanceMask(int w, int h, double microns_per_pixel = 0.5)
      : width(w), height(h), mpp(microns_per_pixel),
        labels(static_cast<std::size_t>(w) * h, 0) {
    if (w < 1 || h < 1) throw UserError("mask dimensions must be positive");
  }

  std::int32_t& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  std::int32_t max_label() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  }

  /// Sorted distinct positive ids present in the mask.
  std::vector<std::int32_t> instance_ids() const {
    std::vector<std::int32_t> ids;
    std::vector<bool> seen(static_cast<std::size_t>(max_label()) + 1, false);
    for (auto l : labels) {
      if (l > 0 && !seen[l]) {
        seen[l] = true;
        ids.push_back(l);
      }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  }
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {}

  double fraction() const {
    if (values.empty()) return 0.0;
    std::size_t on = 0;
    for (auto v : values) on += v != 0;
    return static_cast<double>(on) / static_cast<double>(values.size());
  }
};

}  // namespace stainforge
