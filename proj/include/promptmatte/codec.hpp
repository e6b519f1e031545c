#pragma once

// Maps images and rasterized prompts to a low-resolution latent grid and
// decodes output latents to a single alpha channel.

#include <cstddef>
#include <string>

#include "promptmatte/params.hpp"
#include "promptmatte/tensor.hpp"

namespace pmatte {

enum class CodecMode {
  kFixed,    // area pooling + constant channel map, no parameters
  kLearned,  // strided conv stack
};

const char* codec_mode_name(CodecMode mode);
CodecMode parse_codec_mode(const std::string& name);

struct CodecConfig {
  std::size_t factor = 4;  // one of 1, 2, 4, 8
  std::size_t latent_channels = 4;
  CodecMode mode = CodecMode::kLearned;
};

// Throws ArgumentError on an unsupported factor or zero channels.
void validate(const CodecConfig& config);

// Parameters live under `prefix` (".enc.<i>.w", ".dec.w", ...). The decoder
// head exists in both modes.
template <typename T>
class LatentCodec {
 public:
  LatentCodec(CodecConfig config, std::string prefix);

  const CodecConfig& config() const { return config_; }

  void init(ParamStore<T>& store, Rng& rng) const;

  // image NCHW with 1 or 3 channels; single channels are replicated.
  Tensor<T> encode(const ParamStore<T>& store, const Tensor<T>& image) const;

  // latent NCHW with latent_channels -> N x 1 x (h*f) x (w*f) in (0,1).
  Tensor<T> decode(const ParamStore<T>& store, const Tensor<T>& latent) const;

 private:
  std::size_t stages() const;

  CodecConfig config_;
  std::string prefix_;
};

// Hidden width of the learned encoder.
inline constexpr std::size_t kCodecHidden = 16;

}  // namespace pmatte
