#include "promptmatte/model.hpp"

#include "promptmatte/errors.hpp"
#include "promptmatte/ops.hpp"

namespace pmatte {

void validate(const ModelConfig& config) {
  validate(config.codec);
  validate(config.unet);
  if (config.codec.latent_channels != config.unet.latent_channels) {
    throw ArgumentError("codec and unet disagree on the latent channel count");
  }
  if (!(config.point_sigma > 0.0)) throw ArgumentError("point sigma must be positive");
}

template <typename T>
CondHeads<T> bind_cond_heads(const ParamStore<T>& s, const std::string& prefix) {
  const std::string p = prefix + ".";
  return {s.get(p + "opacity.w"), s.get(p + "opacity.b"), s.get(p + "point.w"),
          s.get(p + "point.b"),   s.get(p + "box.w"),     s.get(p + "box.b")};
}

template <typename T>
MattingModel<T>::MattingModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), codec_(config_.codec, "codec") {
  validate(config_);
  Rng rng(seed);
  codec_.init(params_, rng);
  const std::size_t d = config_.unet.cond_dim;
  params_.add("cond.opacity.w", init_uniform<T>({d, kScalarEmbedWidth}, kScalarEmbedWidth, rng));
  params_.add("cond.opacity.b", init_zeros<T>({d}));
  params_.add("cond.point.w", init_uniform<T>({d, kPointCoordWidth}, kPointCoordWidth, rng));
  params_.add("cond.point.b", init_zeros<T>({d}));
  params_.add("cond.box.w", init_uniform<T>({d, kBoxCoordWidth}, kBoxCoordWidth, rng));
  params_.add("cond.box.b", init_zeros<T>({d}));
  init_unet(params_, config_.unet, rng, "unet");
}

template <typename T>
PreparedBatch<T> MattingModel<T>::prepare(const std::vector<ModelSample>& batch) const {
  if (batch.empty()) throw ArgumentError("empty batch");
  const std::size_t h = batch[0].image->height;
  const std::size_t w = batch[0].image->width;
  const std::size_t f = config_.codec.factor;
  const std::size_t stride = f * unet_stride(config_.unet);
  if (h % stride != 0 || w % stride != 0) {
    throw ArgumentError("image extents " + std::to_string(h) + "x" + std::to_string(w) +
                        " must be divisible by " + std::to_string(stride));
  }
  PreparedBatch<T> out;
  std::vector<const Image*> images;
  for (const auto& s : batch) {
    if (!s.image || !s.prompt) throw ArgumentError("batch sample without image or prompt");
    if (s.image->height != h || s.image->width != w) throw DimensionError("batch images differ in size");
    images.push_back(s.image);
    out.raster_images.push_back(rasterize_prompt(*s.prompt, h, w));
    out.opacity_embeddings.push_back(opacity_embedding(s.opacity));
    out.coord_embeddings.push_back(coord_embedding(*s.prompt));
    out.opacities.push_back(s.opacity.value());
  }
  out.images = images_to_tensor<T>(images, 3);
  std::vector<const Image*> rasters;
  for (const auto& r : out.raster_images) rasters.push_back(&r);
  out.rasters = images_to_tensor<T>(rasters, 1);
  const std::size_t lh = h / f;
  const std::size_t lw = w / f;
  for (std::size_t l = 0; l < config_.unet.multipliers.size(); ++l) {
    std::vector<AttentionMask> masks;
    for (const auto& s : batch) {
      masks.push_back(attention_mask_build(*s.prompt, lh >> l, lw >> l, config_.point_sigma));
    }
    std::vector<const AttentionMask*> ptrs;
    for (const auto& m : masks) ptrs.push_back(&m);
    out.masks.push_back(mask_tensor<T>(ptrs));
  }
  return out;
}

template <typename T>
ModelOutput<T> MattingModel<T>::forward(const PreparedBatch<T>& batch, AttentionProbe* probe) const {
  const auto heads = bind_cond_heads(params_);
  std::vector<Tensor<T>> conds;
  for (std::size_t i = 0; i < batch.coord_embeddings.size(); ++i) {
    conds.push_back(cond_embedding<T>(batch.opacity_embeddings[i], batch.coord_embeddings[i],
                                      batch.opacities[i], heads)
                        .vector);
  }
  UNetInputs<T> in;
  in.latent_image = codec_.encode(params_, batch.images);
  in.latent_prompt = codec_.encode(params_, batch.rasters);
  in.cond = conds.size() == 1 ? conds[0] : concat(conds, 0);
  in.masks = batch.masks;
  in.cross_probe = probe;
  ModelOutput<T> out;
  out.cond = in.cond;
  out.latent = unet_forward(params_, config_.unet, in, "unet");
  out.alpha = codec_.decode(params_, out.latent);
  return out;
}

template <typename T>
std::pair<std::size_t, std::size_t> MattingModel<T>::final_cross_grid(std::size_t image_h,
                                                                      std::size_t image_w) const {
  const auto& cross = config_.unet.placement.prompt_cross;
  const std::size_t lh = image_h / config_.codec.factor;
  const std::size_t lw = image_w / config_.codec.factor;
  if (cross.up) return {lh, lw};
  const std::size_t deep = config_.unet.multipliers.size() - 1;
  if (cross.mid || cross.down) return {lh >> deep, lw >> deep};
  throw StateError("model has no cross-attention layer");
}

template class MattingModel<float>;
template class MattingModel<double>;
template CondHeads<float> bind_cond_heads<float>(const ParamStore<float>&, const std::string&);
template CondHeads<double> bind_cond_heads<double>(const ParamStore<double>&, const std::string&);

}  // namespace pmatte
