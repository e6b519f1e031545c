#pragma once

// Small conditional U-Net. Input is the channel concat of the image and
// prompt latents; every residual block receives a per-channel shift from the
// conditioning vector; attention stages follow each residual block.

#include <cstddef>
#include <string>
#include <vector>

#include "promptmatte/attention.hpp"
#include "promptmatte/params.hpp"
#include "promptmatte/tensor.hpp"

namespace pmatte {

enum class BlockFamily { kDown, kMid, kUp };

// Subset of {down, mid, up}.
struct FamilySet {
  bool down = false;
  bool mid = false;
  bool up = false;

  bool has(BlockFamily f) const;
  // bit 0 = down, bit 1 = mid, bit 2 = up
  static FamilySet from_bits(unsigned bits);
  unsigned bits() const;
  // "down+mid", "none", ...
  std::string str() const;
  static FamilySet parse(const std::string& text);
  bool operator==(const FamilySet&) const = default;
};

struct AttentionPlacement {
  FamilySet masked_self{true, true, true};
  FamilySet prompt_cross{false, true, false};
  bool operator==(const AttentionPlacement&) const = default;
};

struct UNetConfig {
  std::size_t base_channels = 32;
  std::vector<std::size_t> multipliers{1, 2, 4};
  std::size_t res_blocks = 2;
  std::size_t heads = 4;
  std::size_t cond_dim = 256;
  std::size_t context_dim = 64;
  std::size_t latent_channels = 4;  // per input latent; the first conv sees twice this
  AttentionPlacement placement;
  MaskBiasMode mask_mode = MaskBiasMode::kLog;
};

// Throws ArgumentError when widths are not divisible by the head count or
// there is no level.
void validate(const UNetConfig& config);

template <typename T>
struct UNetInputs {
  Tensor<T> latent_image;   // [N, c, h, w]
  Tensor<T> latent_prompt;  // [N, c, h, w]
  Tensor<T> cond;           // [N, cond_dim]
  // One [N, h_l * w_l] mask per level (h_l = h / 2^l); an undefined entry
  // or a missing level leaves self-attention unmasked.
  std::vector<Tensor<T>> masks;
  // Receives the weights of the last cross-attention layer executed.
  AttentionProbe* cross_probe = nullptr;
};

// O x I x k x k -> O x 2I x k x k, the second half a verbatim copy.
template <typename T>
Tensor<T> duplicate_input_conv(const Tensor<T>& weight);

// Registers every parameter under "<prefix>.".
template <typename T>
void init_unet(ParamStore<T>& store, const UNetConfig& config, Rng& rng,
               const std::string& prefix = "unet");

template <typename T>
Tensor<T> unet_forward(const ParamStore<T>& store, const UNetConfig& config,
                       const UNetInputs<T>& inputs, const std::string& prefix = "unet");

// Spatial side length must be divisible by this.
std::size_t unet_stride(const UNetConfig& config);

}  // namespace pmatte
