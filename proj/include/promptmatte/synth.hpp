#pragma once

// Synthetic matting scenes: parametric foregrounds with analytic alpha,
// composited over smooth backgrounds, plus random visual prompts and an
// optional identical distractor instance.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "promptmatte/image.hpp"
#include "promptmatte/params.hpp"
#include "promptmatte/prompt.hpp"

namespace pmatte {

enum class ShapeKind { kDisk, kBlob, kRing, kGlass };

const char* shape_kind_name(ShapeKind kind);
ShapeKind parse_shape_kind(const std::string& name);

struct Foreground {
  ShapeKind kind = ShapeKind::kDisk;
  OpacityLabel opacity{1};
  Image rgb;    // H x W x 3
  Image alpha;  // H x W x 1
  double center_x = 0.0;  // pixels
  double center_y = 0.0;
  double radius = 0.0;    // nominal (outer) radius in pixels
  double edge = 1.0;      // ramp width of the soft edge in pixels
};

// Shape radii as a fraction of min(H, W).
inline constexpr double kMinRadiusFrac = 0.08;
inline constexpr double kMaxRadiusFrac = 0.15;

// One shape at a random position fully inside the canvas. Opaque kinds
// carry label 1; glass has alpha scaled into [0.2, 0.6] and label 0.
Foreground gen_foreground(ShapeKind kind, std::size_t height, std::size_t width, Rng& rng);

// Copy moved by whole pixels. Throws ArgumentError if any alpha > 0 would
// leave the canvas.
Foreground shift_foreground(const Foreground& fg, long dy, long dx);

struct Layer {
  const Image* rgb = nullptr;
  const Image* alpha = nullptr;
};

// Back-to-front I = a * F + (1 - a) * B for each layer in order.
Image composite(const Image& background, const std::vector<Layer>& layers);

// Two-colour linear gradient along a random direction plus uniform noise.
Image gen_background(std::size_t height, std::size_t width, Rng& rng, double noise = 0.03);

struct PromptSampling {
  double box_jitter = 0.05;  // per side, fraction of the image extent
  int max_morph = 3;         // mask dilation/erosion radius bound (cells)
  // Forces the mask morphology: +r dilates by r, -r erodes by r.
  std::optional<int> morph;
};

// Square (Chebyshev) structuring element of radius r.
BinaryGrid dilate(const BinaryGrid& grid, int radius);
BinaryGrid erode(const BinaryGrid& grid, int radius);

// Throws GenerationError when the support needed by `kind` is empty.
VisualPrompt sample_prompts(const Image& gt_alpha, PromptKind kind, Rng& rng,
                            const PromptSampling& options = {});

struct SceneOptions {
  std::size_t height = 64;
  std::size_t width = 64;
  double duplicate_prob = 0.5;
  std::optional<PromptKind> prompt_kind;  // uniform over kinds when unset
  std::optional<ShapeKind> shape_kind;    // uniform over kinds when unset
  PromptSampling sampling;
};

inline constexpr int kPlacementAttempts = 20;

struct SynthScene {
  Image image;     // H x W x 3
  Image gt_alpha;  // prompted instance only
  VisualPrompt prompt = VisualPrompt::points({{0.5, 0.5}});
  OpacityLabel opacity{1};
  int distractor_count = 0;
  bool placement_fallback = false;  // duplication requested but not placed
  ShapeKind shape = ShapeKind::kDisk;
  Image background;
  Image foreground_rgb;    // prompted instance colours
  Image distractor_rgb;    // empty when distractor_count == 0
  Image distractor_alpha;  // empty when distractor_count == 0
};

SynthScene make_scene(Rng& rng, const SceneOptions& options = {});

// Decorrelated per-scene seed.
std::uint64_t scene_seed(std::uint64_t base, std::uint64_t index);

// ---------------------------------------------------------------------------
// Dataset directories: scene_%06d/{image.png, alpha.png, prompt.txt,
// mask.png, meta.txt[, distractor.png]} and a top-level manifest.txt.

struct SceneMeta {
  std::uint64_t seed = 0;
  ShapeKind shape = ShapeKind::kDisk;
  int opacity = 1;
  int distractor_count = 0;
};

struct DatasetScene {
  std::string name;
  Image image;
  Image alpha;
  PromptFile prompts;
  SceneMeta meta;
  std::optional<Image> distractor_alpha;
};

// Scene carrying one prompt of every kind, built from `seed`.
struct DatasetEntry {
  SynthScene scene;
  std::vector<VisualPrompt> prompts;  // point, box, mask
};
DatasetEntry make_dataset_entry(std::uint64_t seed, const SceneOptions& options = {});

// Writes `count` scenes; returns the scene directory names.
std::vector<std::string> write_dataset(const std::string& dir, std::size_t count, std::uint64_t seed,
                                       const SceneOptions& options = {});

void write_scene(const std::string& scene_dir, const DatasetEntry& entry, std::uint64_t seed);
// Throws IoError on a missing or malformed file.
DatasetScene read_scene(const std::string& scene_dir);
// Sorted names of the scene_* directories under `dir`.
std::vector<std::string> list_scenes(const std::string& dir);

}  // namespace pmatte
