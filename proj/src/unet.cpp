#include "promptmatte/unet.hpp"

#include <numeric>
#include <sstream>

#include "promptmatte/errors.hpp"
#include "promptmatte/ops.hpp"

namespace pmatte {

bool FamilySet::has(BlockFamily f) const {
  switch (f) {
    case BlockFamily::kDown:
      return down;
    case BlockFamily::kMid:
      return mid;
    case BlockFamily::kUp:
      return up;
  }
  return false;
}

FamilySet FamilySet::from_bits(unsigned bits) {
  if (bits > 7) throw ArgumentError("family bits must lie in [0, 7]");
  return {(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0};
}

unsigned FamilySet::bits() const { return (down ? 1u : 0u) | (mid ? 2u : 0u) | (up ? 4u : 0u); }

std::string FamilySet::str() const {
  std::string out;
  for (auto [on, name] : {std::pair{down, "down"}, std::pair{mid, "mid"}, std::pair{up, "up"}}) {
    if (!on) continue;
    if (!out.empty()) out += '+';
    out += name;
  }
  return out.empty() ? "none" : out;
}

FamilySet FamilySet::parse(const std::string& text) {
  FamilySet set;
  if (text == "none" || text.empty()) return set;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, '+')) {
    if (part == "down") {
      set.down = true;
    } else if (part == "mid") {
      set.mid = true;
    } else if (part == "up") {
      set.up = true;
    } else {
      throw ArgumentError("unknown block family '" + part + "'");
    }
  }
  return set;
}

void validate(const UNetConfig& c) {
  if (c.multipliers.empty()) throw ArgumentError("unet needs at least one level");
  if (c.base_channels == 0 || c.res_blocks == 0 || c.heads == 0 || c.cond_dim == 0 ||
      c.context_dim == 0 || c.latent_channels == 0) {
    throw ArgumentError("unet widths and counts must be positive");
  }
  for (std::size_t m : c.multipliers) {
    if (m == 0 || (c.base_channels * m) % c.heads != 0) {
      throw ArgumentError("unet channel width " + std::to_string(c.base_channels * m) +
                          " is not divisible by " + std::to_string(c.heads) + " heads");
    }
  }
}

std::size_t unet_stride(const UNetConfig& config) {
  return std::size_t{1} << (config.multipliers.size() - 1);
}

template <typename T>
Tensor<T> duplicate_input_conv(const Tensor<T>& weight) {
  if (weight.rank() != 4) throw DimensionError("duplicate_input_conv: expected O x I x k x k");
  const std::size_t o = weight.dim(0);
  const std::size_t block = weight.numel() / o;  // I * k * k
  Shape shape = weight.shape();
  shape[1] *= 2;
  std::vector<T> out(2 * weight.numel());
  auto src = weight.data();
  for (std::size_t r = 0; r < o; ++r) {
    std::copy(src.begin() + r * block, src.begin() + (r + 1) * block, out.begin() + 2 * r * block);
    std::copy(src.begin() + r * block, src.begin() + (r + 1) * block,
              out.begin() + (2 * r + 1) * block);
  }
  return Tensor<T>(std::move(shape), std::move(out));
}

namespace {

std::size_t norm_groups(std::size_t channels) { return std::gcd(channels, std::size_t{8}); }

std::size_t width(const UNetConfig& c, std::size_t level) {
  return c.base_channels * c.multipliers[level];
}

// ---------------------------------------------------------------------------
// Initialization

template <typename T>
void init_conv(ParamStore<T>& s, const std::string& p, std::size_t cin, std::size_t cout,
               std::size_t k, Rng& rng) {
  s.add(p + ".w", init_uniform<T>({cout, cin, k, k}, cin * k * k, rng));
  s.add(p + ".b", init_uniform<T>({cout}, cin * k * k, rng));
}

template <typename T>
void init_norm(ParamStore<T>& s, const std::string& p, std::size_t channels) {
  s.add(p + ".s", init_ones<T>({channels}));
  s.add(p + ".b", init_zeros<T>({channels}));
}

template <typename T>
void init_res(ParamStore<T>& s, const std::string& p, std::size_t cin, std::size_t cout,
              const UNetConfig& c, Rng& rng) {
  init_norm(s, p + ".norm1", cin);
  init_conv(s, p + ".conv1", cin, cout, 3, rng);
  s.add(p + ".cond.w", init_uniform<T>({cout, c.cond_dim}, c.cond_dim, rng));
  s.add(p + ".cond.b", init_zeros<T>({cout}));
  init_norm(s, p + ".norm2", cout);
  init_conv(s, p + ".conv2", cout, cout, 3, rng);
  if (cin != cout) init_conv(s, p + ".skip", cin, cout, 1, rng);
}

template <typename T>
void init_attn(ParamStore<T>& s, const std::string& p, std::size_t channels, BlockFamily family,
               const UNetConfig& c, Rng& rng) {
  init_norm(s, p + ".self_norm", channels);
  init_self_attention(s, p + ".self", channels, rng);
  if (c.placement.prompt_cross.has(family)) {
    init_norm(s, p + ".cross_norm", channels);
    init_cross_attention(s, p + ".cross", channels, c.latent_channels, c.context_dim, rng);
  }
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
struct Ctx {
  const ParamStore<T>& s;
  const UNetConfig& c;
  const UNetInputs<T>& in;
  Tensor<T> cond_act;  // silu(cond)
};

template <typename T>
Tensor<T> conv(const Ctx<T>& x, const std::string& p, const Tensor<T>& v, int stride, int pad) {
  return conv2d(v, x.s.get(p + ".w"), x.s.get(p + ".b"), stride, pad);
}

template <typename T>
Tensor<T> norm(const Ctx<T>& x, const std::string& p, const Tensor<T>& v, bool act) {
  const auto& scale = x.s.get(p + ".s");
  const auto& shift = x.s.get(p + ".b");
  const std::size_t g = norm_groups(v.dim(1));
  return act ? norm_act(v, g, scale, shift) : group_norm(v, g, scale, shift);
}

template <typename T>
Tensor<T> res_block(const Ctx<T>& x, const std::string& p, const Tensor<T>& v) {
  auto h = conv(x, p + ".conv1", norm(x, p + ".norm1", v, true), 1, 1);
  h = add_channel(h, linear(x.cond_act, x.s.get(p + ".cond.w"), x.s.get(p + ".cond.b")));
  h = conv(x, p + ".conv2", norm(x, p + ".norm2", h, true), 1, 1);
  const Tensor<T> skip = x.s.contains(p + ".skip.w") ? conv(x, p + ".skip", v, 1, 0) : v;
  return add(skip, h);
}

template <typename T>
Tensor<T> attn_stage(const Ctx<T>& x, const std::string& p, Tensor<T> v, BlockFamily family,
                     std::size_t level) {
  const std::size_t h = v.dim(2);
  const std::size_t w = v.dim(3);
  Tensor<T> mask;
  if (x.c.placement.masked_self.has(family) && level < x.in.masks.size()) mask = x.in.masks[level];
  auto sp = bind_self_attention(x.s, p + ".self", x.c.heads);
  auto tokens = to_tokens(norm(x, p + ".self_norm", v, false));
  v = add(v, from_tokens(masked_self_attention(tokens, mask, sp, x.c.mask_mode), h, w));
  if (x.c.placement.prompt_cross.has(family)) {
    auto cp = bind_cross_attention(x.s, p + ".cross", x.c.heads);
    auto t2 = to_tokens(norm(x, p + ".cross_norm", v, false));
    v = add(v, from_tokens(prompt_cross_attention(t2, x.in.latent_prompt, cp, x.in.cross_probe), h, w));
  }
  return v;
}

}  // namespace

template <typename T>
void init_unet(ParamStore<T>& s, const UNetConfig& c, Rng& rng, const std::string& prefix) {
  validate(c);
  const std::string P = prefix + ".";
  const std::size_t levels = c.multipliers.size();
  {
    // first conv: initialized for a single latent, then duplicated for the concat
    auto w = init_uniform<T>({width(c, 0), c.latent_channels, 3, 3}, c.latent_channels * 9, rng);
    s.add(P + "conv_in.w", duplicate_input_conv(w));
    s.add(P + "conv_in.b", init_uniform<T>({width(c, 0)}, c.latent_channels * 9, rng));
  }
  std::size_t ch = width(c, 0);
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string lp = P + "down." + std::to_string(l);
    for (std::size_t r = 0; r < c.res_blocks; ++r) {
      init_res(s, lp + ".res." + std::to_string(r), ch, width(c, l), c, rng);
      ch = width(c, l);
      init_attn(s, lp + ".attn." + std::to_string(r), ch, BlockFamily::kDown, c, rng);
    }
    if (l + 1 < levels) init_conv(s, lp + ".downsample", ch, ch, 3, rng);
  }
  init_res(s, P + "mid.res.0", ch, ch, c, rng);
  init_attn(s, P + "mid.attn", ch, BlockFamily::kMid, c, rng);
  init_res(s, P + "mid.res.1", ch, ch, c, rng);
  for (std::size_t l = levels; l-- > 0;) {
    const std::string lp = P + "up." + std::to_string(l);
    for (std::size_t r = 0; r < c.res_blocks; ++r) {
      const std::size_t cin = r == 0 ? ch + width(c, l) : ch;
      init_res(s, lp + ".res." + std::to_string(r), cin, width(c, l), c, rng);
      ch = width(c, l);
      init_attn(s, lp + ".attn." + std::to_string(r), ch, BlockFamily::kUp, c, rng);
    }
    if (l > 0) init_conv(s, lp + ".upsample", ch, width(c, l - 1), 3, rng);
    if (l > 0) ch = width(c, l - 1);
  }
  init_norm(s, P + "out.norm", ch);
  init_conv(s, P + "out.conv", ch, c.latent_channels, 3, rng);
}

template <typename T>
Tensor<T> unet_forward(const ParamStore<T>& s, const UNetConfig& c, const UNetInputs<T>& in,
                       const std::string& prefix) {
  const auto& li = in.latent_image;
  const auto& lp = in.latent_prompt;
  if (li.rank() != 4 || lp.rank() != 4 || li.shape() != lp.shape()) {
    throw DimensionError("unet: image and prompt latents must share an NCHW shape");
  }
  if (li.dim(1) != c.latent_channels) throw DimensionError("unet: latent channel count mismatch");
  const std::size_t n = li.dim(0);
  if (in.cond.rank() != 2 || in.cond.dim(0) != n || in.cond.dim(1) != c.cond_dim) {
    throw DimensionError("unet: cond must be [N, " + std::to_string(c.cond_dim) + "], got " +
                         shape_str(in.cond.shape()));
  }
  const std::size_t stride = unet_stride(c);
  if (li.dim(2) % stride != 0 || li.dim(3) % stride != 0) {
    throw DimensionError("unet: latent extents must be divisible by " + std::to_string(stride));
  }
  for (std::size_t l = 0; l < in.masks.size(); ++l) {
    if (!in.masks[l].defined()) continue;
    const Shape want{n, (li.dim(2) >> l) * (li.dim(3) >> l)};
    if (in.masks[l].shape() != want) {
      throw DimensionError("unet: mask for level " + std::to_string(l) + " has shape " +
                           shape_str(in.masks[l].shape()) + ", expected " + shape_str(want));
    }
  }

  const std::string P = prefix + ".";
  Ctx<T> x{s, c, in, silu(in.cond)};
  const std::size_t levels = c.multipliers.size();
  auto v = conv(x, P + "conv_in", concat<T>({li, lp}, 1), 1, 1);
  std::vector<Tensor<T>> skips;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string lpfx = P + "down." + std::to_string(l);
    for (std::size_t r = 0; r < c.res_blocks; ++r) {
      v = res_block(x, lpfx + ".res." + std::to_string(r), v);
      v = attn_stage(x, lpfx + ".attn." + std::to_string(r), v, BlockFamily::kDown, l);
    }
    skips.push_back(v);
    if (l + 1 < levels) v = conv(x, lpfx + ".downsample", v, 2, 1);
  }
  v = res_block(x, P + "mid.res.0", v);
  v = attn_stage(x, P + "mid.attn", v, BlockFamily::kMid, levels - 1);
  v = res_block(x, P + "mid.res.1", v);
  for (std::size_t l = levels; l-- > 0;) {
    const std::string lpfx = P + "up." + std::to_string(l);
    v = concat<T>({v, skips[l]}, 1);
    for (std::size_t r = 0; r < c.res_blocks; ++r) {
      v = res_block(x, lpfx + ".res." + std::to_string(r), v);
      v = attn_stage(x, lpfx + ".attn." + std::to_string(r), v, BlockFamily::kUp, l);
    }
    if (l > 0) v = conv(x, lpfx + ".upsample", upsample_nearest(v, 2), 1, 1);
  }
  return conv(x, P + "out.conv", norm(x, P + "out.norm", v, true), 1, 1);
}

#define PMATTE_INSTANTIATE(T)                                                               \
  template Tensor<T> duplicate_input_conv<T>(const Tensor<T>&);                             \
  template void init_unet<T>(ParamStore<T>&, const UNetConfig&, Rng&, const std::string&);  \
  template Tensor<T> unet_forward<T>(const ParamStore<T>&, const UNetConfig&,               \
                                     const UNetInputs<T>&, const std::string&);

PMATTE_INSTANTIATE(float)
PMATTE_INSTANTIATE(double)
#undef PMATTE_INSTANTIATE

}  // namespace pmatte
