#pragma once

// End-to-end matting network: latent codec, conditioning heads and U-Net in
// one parameter store ("codec.", "cond.", "unet." prefixes).

#include <cstdint>
#include <string>
#include <vector>

#include "promptmatte/attention.hpp"
#include "promptmatte/codec.hpp"
#include "promptmatte/image.hpp"
#include "promptmatte/params.hpp"
#include "promptmatte/prompt.hpp"
#include "promptmatte/unet.hpp"

namespace pmatte {

struct ModelConfig {
  CodecConfig codec;
  UNetConfig unet;
  double point_sigma = kDefaultPointSigma;
};

// Throws ArgumentError on inconsistent settings.
void validate(const ModelConfig& config);

struct ModelSample {
  const Image* image = nullptr;  // H x W x 3 (or 1)
  const VisualPrompt* prompt = nullptr;
  OpacityLabel opacity{1};
};

// Everything derived from the samples that does not depend on parameters.
template <typename T>
struct PreparedBatch {
  Tensor<T> images;   // [N, 3, H, W]
  Tensor<T> rasters;  // [N, 1, H, W]
  std::vector<std::vector<double>> opacity_embeddings;
  std::vector<CoordEmbedding> coord_embeddings;
  std::vector<int> opacities;
  std::vector<Tensor<T>> masks;  // per U-Net level, [N, h_l * w_l]
  std::vector<Image> raster_images;
};

template <typename T>
struct ModelOutput {
  Tensor<T> alpha;   // [N, 1, H, W]
  Tensor<T> latent;  // U-Net output
  Tensor<T> cond;    // [N, cond_dim]
};

template <typename T>
class MattingModel {
 public:
  MattingModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const LatentCodec<T>& codec() const { return codec_; }

  PreparedBatch<T> prepare(const std::vector<ModelSample>& batch) const;

  ModelOutput<T> forward(const PreparedBatch<T>& batch, AttentionProbe* cross_probe = nullptr) const;
  ModelOutput<T> forward(const std::vector<ModelSample>& batch,
                         AttentionProbe* cross_probe = nullptr) const {
    return forward(prepare(batch), cross_probe);
  }

  // Latent grid of the last cross-attention layer (the U-Net's deepest
  // level when the last placement is mid, the full latent grid for up).
  std::pair<std::size_t, std::size_t> final_cross_grid(std::size_t image_h, std::size_t image_w) const;

 private:
  ModelConfig config_;
  LatentCodec<T> codec_;
  ParamStore<T> params_;
};

// Conditioning heads as stored in a model's parameter set.
template <typename T>
CondHeads<T> bind_cond_heads(const ParamStore<T>& store, const std::string& prefix = "cond");

}  // namespace pmatte
