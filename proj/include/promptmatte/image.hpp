#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "promptmatte/tensor.hpp"

namespace pmatte {

// Interleaved H x W x C image with values nominally in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> values;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), values(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return values[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return values[(y * width + x) * channels + c];
  }
  std::size_t pixels() const { return height * width; }
};

// 8-bit PNG. Gray for 1 channel, RGB for 3. Values are clamped to [0,1] and
// rounded to the nearest of 256 levels.
void write_png(const std::string& path, const Image& image);
// Reads any PNG as 8-bit gray or RGB; alpha is composited onto black.
Image read_png(const std::string& path);

// Stacks images (same extents) into an N x C x H x W tensor. `channels`
// replicates single-channel inputs when 3 are requested.
template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images, std::size_t channels);

// Extracts sample `index`, channel `channel` of an NCHW tensor.
template <typename T>
Image tensor_plane(const Tensor<T>& t, std::size_t index, std::size_t channel = 0);

}  // namespace pmatte
