#include "promptmatte/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "promptmatte/errors.hpp"

namespace pmatte {

namespace {

std::uint8_t quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace

void write_png(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ArgumentError("write_png: only 1 or 3 channels are supported");
  }
  std::vector<std::uint8_t> bytes(image.values.size());
  std::transform(image.values.begin(), image.values.end(), bytes.begin(), quantize);
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(image.width);
  desc.height = static_cast<png_uint_32>(image.height);
  desc.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&desc, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string why = desc.message;
    png_image_free(&desc);
    throw IoError("failed writing " + path + ": " + why);
  }
}

Image read_png(const std::string& path) {
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&desc, path.c_str())) {
    std::string why = desc.message;
    png_image_free(&desc);
    throw IoError("cannot read " + path + ": " + why);
  }
  const bool color = (desc.format & PNG_FORMAT_FLAG_COLOR) != 0;
  desc.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image image(desc.height, desc.width, color ? 3 : 1);
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(desc));
  // Alpha, if any, is composited onto black by the simplified API.
  if (!png_image_finish_read(&desc, nullptr, bytes.data(), 0, nullptr)) {
    std::string why = desc.message;
    png_image_free(&desc);
    throw IoError("failed reading " + path + ": " + why);
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) image.values[i] = bytes[i] / 255.0;
  return image;
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images, std::size_t channels) {
  if (images.empty()) throw ArgumentError("images_to_tensor: no images");
  const std::size_t h = images[0]->height;
  const std::size_t w = images[0]->width;
  Tensor<T> out(Shape{images.size(), channels, h, w});
  auto dst = out.data_mut();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& im = *images[n];
    if (im.height != h || im.width != w) throw DimensionError("images_to_tensor: extent mismatch");
    if (im.channels != channels && im.channels != 1) {
      throw DimensionError("images_to_tensor: cannot adapt channel count");
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t src_c = im.channels == 1 ? 0 : c;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          dst[((n * channels + c) * h + y) * w + x] = static_cast<T>(im.at(y, x, src_c));
    }
  }
  return out;
}

template <typename T>
Image tensor_plane(const Tensor<T>& t, std::size_t index, std::size_t channel) {
  if (t.rank() != 4) throw DimensionError("tensor_plane: expected NCHW tensor");
  const std::size_t c = t.dim(1);
  const std::size_t h = t.dim(2);
  const std::size_t w = t.dim(3);
  if (index >= t.dim(0) || channel >= c) throw DimensionError("tensor_plane: index out of range");
  Image im(h, w, 1);
  auto src = t.data();
  for (std::size_t i = 0; i < h * w; ++i) im.values[i] = src[(index * c + channel) * h * w + i];
  return im;
}

template Tensor<float> images_to_tensor<float>(const std::vector<const Image*>&, std::size_t);
template Tensor<double> images_to_tensor<double>(const std::vector<const Image*>&, std::size_t);
template Image tensor_plane<float>(const Tensor<float>&, std::size_t, std::size_t);
template Image tensor_plane<double>(const Tensor<double>&, std::size_t, std::size_t);

}  // namespace pmatte
