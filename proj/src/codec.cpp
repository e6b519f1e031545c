#include "promptmatte/codec.hpp"

#include <algorithm>

#include "promptmatte/errors.hpp"
#include "promptmatte/ops.hpp"

namespace pmatte {

const char* codec_mode_name(CodecMode mode) {
  return mode == CodecMode::kFixed ? "fixed" : "learned";
}

CodecMode parse_codec_mode(const std::string& name) {
  if (name == "fixed") return CodecMode::kFixed;
  if (name == "learned") return CodecMode::kLearned;
  throw ArgumentError("unknown codec mode '" + name + "'");
}

void validate(const CodecConfig& config) {
  const std::size_t f = config.factor;
  if (f != 1 && f != 2 && f != 4 && f != 8) throw ArgumentError("codec factor must be 1, 2, 4 or 8");
  if (config.latent_channels == 0) throw ArgumentError("codec needs at least one latent channel");
}

template <typename T>
LatentCodec<T>::LatentCodec(CodecConfig config, std::string prefix)
    : config_(config), prefix_(std::move(prefix)) {
  validate(config_);
}

template <typename T>
std::size_t LatentCodec<T>::stages() const {
  std::size_t n = 0;
  for (std::size_t f = config_.factor; f > 1; f /= 2) ++n;
  return n;
}

template <typename T>
void LatentCodec<T>::init(ParamStore<T>& store, Rng& rng) const {
  const std::size_t lc = config_.latent_channels;
  if (config_.mode == CodecMode::kLearned) {
    const std::size_t n = std::max<std::size_t>(stages(), 1);
    std::size_t cin = 3;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t cout = s + 1 == n ? lc : kCodecHidden;
      const std::string p = prefix_ + ".enc." + std::to_string(s);
      store.add(p + ".w", init_uniform<T>({cout, cin, 3, 3}, cin * 9, rng));
      store.add(p + ".b", init_uniform<T>({cout}, cin * 9, rng));
      cin = cout;
    }
  }
  store.add(prefix_ + ".dec.w", init_uniform<T>({1, lc, 3, 3}, lc * 9, rng));
  store.add(prefix_ + ".dec.b", init_zeros<T>({1}));
}

template <typename T>
Tensor<T> LatentCodec<T>::encode(const ParamStore<T>& store, const Tensor<T>& image) const {
  if (image.rank() != 4) throw DimensionError("encode: expected an NCHW image");
  const std::size_t ch = image.dim(1);
  if (ch != 1 && ch != 3) throw DimensionError("encode: image must have 1 or 3 channels");
  const std::size_t f = config_.factor;
  if (image.dim(2) % f != 0 || image.dim(3) % f != 0) {
    throw ArgumentError("encode: image extents " + shape_str(image.shape()) +
                        " are not divisible by the codec factor " + std::to_string(f));
  }
  Tensor<T> x = ch == 1 ? concat<T>({image, image, image}, 1) : image;
  const std::size_t lc = config_.latent_channels;

  if (config_.mode == CodecMode::kFixed) {
    Tensor<T> pooled = f == 1 ? x : avg_pool(x, f);
    // latent channel k copies image channel k mod 3
    Tensor<T> map({lc, 3, 1, 1}, T(0));
    auto m = map.data_mut();
    for (std::size_t k = 0; k < lc; ++k) m[k * 3 + k % 3] = T(1);
    return conv2d(pooled, map, Tensor<T>(), 1, 0);
  }

  const std::size_t n = std::max<std::size_t>(stages(), 1);
  const int stride = stages() == 0 ? 1 : 2;
  for (std::size_t s = 0; s < n; ++s) {
    const std::string p = prefix_ + ".enc." + std::to_string(s);
    x = conv2d(x, store.get(p + ".w"), store.get(p + ".b"), stride, 1);
    if (s + 1 < n) x = silu(x);
  }
  return x;
}

template <typename T>
Tensor<T> LatentCodec<T>::decode(const ParamStore<T>& store, const Tensor<T>& latent) const {
  if (latent.rank() != 4) throw DimensionError("decode: expected an NCHW latent");
  if (latent.dim(1) != config_.latent_channels) {
    throw DimensionError("decode: latent has " + std::to_string(latent.dim(1)) +
                         " channels, codec expects " + std::to_string(config_.latent_channels));
  }
  Tensor<T> up = config_.factor == 1 ? latent : upsample_nearest(latent, config_.factor);
  return sigmoid(conv2d(up, store.get(prefix_ + ".dec.w"), store.get(prefix_ + ".dec.b"), 1, 1));
}

template class LatentCodec<float>;
template class LatentCodec<double>;

}  // namespace pmatte
