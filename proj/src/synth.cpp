#include "promptmatte/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "promptmatte/errors.hpp"

namespace pmatte {

namespace fs = std::filesystem;

const char* shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kBlob: return "blob";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kGlass: return "glass";
  }
  return "?";
}

ShapeKind parse_shape_kind(const std::string& name) {
  for (auto k : {ShapeKind::kDisk, ShapeKind::kBlob, ShapeKind::kRing, ShapeKind::kGlass}) {
    if (name == shape_kind_name(k)) return k;
  }
  throw ArgumentError("unknown shape kind '" + name + "'");
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double ramp(double signed_distance, double edge) {
  return std::clamp(signed_distance / edge + 0.5, 0.0, 1.0);
}

// Radial profile of one shape; distance and angle are relative to the centre.
struct Profile {
  bool blob = false;
  bool ring = false;
  double radius = 0.0;
  double inner = 0.0;
  double amp[3] = {0, 0, 0};
  double phase[3] = {0, 0, 0};

  double outer_at(double theta) const {
    if (!blob) return radius;
    double r = 1.0;
    for (int k = 0; k < 3; ++k) r += amp[k] * std::cos((k + 2) * theta + phase[k]);
    return radius * r;
  }
  double max_extent() const {
    return blob ? radius * (1.0 + amp[0] + amp[1] + amp[2]) : radius;
  }
  double alpha(double dx, double dy, double edge) const {
    const double d = std::hypot(dx, dy);
    double a = ramp(outer_at(std::atan2(dy, dx)) - d, edge);
    if (ring) a = std::min(a, ramp(d - inner, edge));
    return a;
  }
};

void check_canvas(std::size_t height, std::size_t width) {
  if (std::min(height, width) < 16) throw ArgumentError("canvas must be at least 16x16");
}

}  // namespace

Foreground gen_foreground(ShapeKind kind, std::size_t height, std::size_t width, Rng& rng) {
  check_canvas(height, width);
  const double s = static_cast<double>(std::min(height, width));
  Foreground fg;
  fg.kind = kind;
  fg.opacity = OpacityLabel(kind == ShapeKind::kGlass ? 0 : 1);
  fg.radius = uniform(rng, kMinRadiusFrac, kMaxRadiusFrac) * s;
  fg.edge = uniform(rng, 1.0, 3.0);

  Profile p;
  p.radius = fg.radius;
  p.ring = kind == ShapeKind::kRing;
  p.blob = kind == ShapeKind::kBlob;
  if (kind == ShapeKind::kGlass) p.blob = uniform(rng, 0.0, 1.0) < 0.5;
  if (p.ring) p.inner = fg.radius * uniform(rng, 0.45, 0.65);
  if (p.blob) {
    for (int k = 0; k < 3; ++k) {
      p.amp[k] = uniform(rng, 0.0, 0.1);
      p.phase[k] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
  }
  const double glass_scale = kind == ShapeKind::kGlass ? uniform(rng, 0.2, 0.6) : 1.0;

  double colour[3];
  for (double& c : colour) c = kind == ShapeKind::kGlass ? uniform(rng, 0.6, 1.0) : uniform(rng, 0.0, 1.0);
  const double shade_angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  const double reach = p.max_extent() + fg.edge / 2 + 1.0;
  fg.center_x = uniform(rng, reach, static_cast<double>(width) - reach);
  fg.center_y = uniform(rng, reach, static_cast<double>(height) - reach);

  fg.rgb = Image(height, width, 3);
  fg.alpha = Image(height, width, 1);
  const double ux = std::cos(shade_angle), uy = std::sin(shade_angle);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double dx = x + 0.5 - fg.center_x;
      const double dy = y + 0.5 - fg.center_y;
      const double a = p.alpha(dx, dy, fg.edge) * glass_scale;
      if (a <= 0.0) continue;
      fg.alpha.at(y, x) = a;
      const double shade = 0.15 * (dx * ux + dy * uy) / fg.radius;
      for (std::size_t c = 0; c < 3; ++c) fg.rgb.at(y, x, c) = std::clamp(colour[c] + shade, 0.0, 1.0);
    }
  return fg;
}

Foreground shift_foreground(const Foreground& fg, long dy, long dx) {
  Foreground out = fg;
  const long h = static_cast<long>(fg.alpha.height);
  const long w = static_cast<long>(fg.alpha.width);
  out.rgb = Image(fg.rgb.height, fg.rgb.width, 3);
  out.alpha = Image(fg.alpha.height, fg.alpha.width, 1);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const double a = fg.alpha.at(y, x);
      const long ty = y + dy, tx = x + dx;
      const bool inside = ty >= 0 && ty < h && tx >= 0 && tx < w;
      if (!inside) {
        if (a > 0.0) throw ArgumentError("shift moves the foreground off the canvas");
        continue;
      }
      out.alpha.at(ty, tx) = a;
      for (std::size_t c = 0; c < 3; ++c) out.rgb.at(ty, tx, c) = fg.rgb.at(y, x, c);
    }
  out.center_x += static_cast<double>(dx);
  out.center_y += static_cast<double>(dy);
  return out;
}

Image composite(const Image& background, const std::vector<Layer>& layers) {
  if (background.channels != 3) throw DimensionError("composite: background must have 3 channels");
  Image out = background;
  for (const auto& layer : layers) {
    if (!layer.rgb || !layer.alpha) throw ArgumentError("composite: null layer");
    const Image& f = *layer.rgb;
    const Image& a = *layer.alpha;
    if (f.height != out.height || f.width != out.width || a.height != out.height ||
        a.width != out.width || f.channels != 3 || a.channels != 1) {
      throw DimensionError("composite: layer extents do not match the background");
    }
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x) {
        const double al = a.at(y, x);
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = al * f.at(y, x, c) + (1.0 - al) * out.at(y, x, c);
      }
  }
  return out;
}

Image gen_background(std::size_t height, std::size_t width, Rng& rng, double noise) {
  double c0[3], c1[3];
  for (double& c : c0) c = uniform(rng, 0.0, 1.0);
  for (double& c : c1) c = uniform(rng, 0.0, 1.0);
  const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double ux = std::cos(angle), uy = std::sin(angle);
  const double half_span = 0.5 * (std::abs(ux) + std::abs(uy));
  Image bg(height, width, 3);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double px = (x + 0.5) / width - 0.5;
      const double py = (y + 0.5) / height - 0.5;
      const double t = 0.5 + 0.5 * (px * ux + py * uy) / half_span;
      for (std::size_t c = 0; c < 3; ++c) {
        const double n = noise > 0.0 ? uniform(rng, -noise, noise) : 0.0;
        bg.at(y, x, c) = std::clamp(c0[c] + (c1[c] - c0[c]) * t + n, 0.0, 1.0);
      }
    }
  return bg;
}

// ---------------------------------------------------------------------------
// prompts

namespace {

BinaryGrid morph(const BinaryGrid& g, int radius, bool grow) {
  if (radius < 0) throw ArgumentError("morphology radius must be non-negative");
  BinaryGrid out(g.height, g.width);
  const long h = static_cast<long>(g.height), w = static_cast<long>(g.width);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      bool hit = !grow;
      for (long dy = -radius; dy <= radius; ++dy)
        for (long dx = -radius; dx <= radius; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (grow && g.at(yy, xx)) hit = true;
          if (!grow && !g.at(yy, xx)) hit = false;
        }
      out.set(y, x, hit);
    }
  return out;
}

BinaryGrid threshold(const Image& alpha, double level, bool strict) {
  BinaryGrid g(alpha.height, alpha.width);
  for (std::size_t y = 0; y < alpha.height; ++y)
    for (std::size_t x = 0; x < alpha.width; ++x) {
      const double a = alpha.at(y, x);
      g.set(y, x, strict ? a > level : a >= level);
    }
  return g;
}

}  // namespace

BinaryGrid dilate(const BinaryGrid& grid, int radius) { return morph(grid, radius, true); }
BinaryGrid erode(const BinaryGrid& grid, int radius) { return morph(grid, radius, false); }

VisualPrompt sample_prompts(const Image& gt_alpha, PromptKind kind, Rng& rng, const PromptSampling& options) {
  if (gt_alpha.channels != 1) throw DimensionError("sample_prompts: alpha must have one channel");
  const double h = static_cast<double>(gt_alpha.height);
  const double w = static_cast<double>(gt_alpha.width);
  switch (kind) {
    case PromptKind::kPoint: {
      std::vector<std::size_t> inside;
      for (std::size_t i = 0; i < gt_alpha.pixels(); ++i)
        if (gt_alpha.values[i] > 0.5) inside.push_back(i);
      if (inside.empty()) throw GenerationError("no alpha > 0.5 region for point prompts");
      const int n = uniform_int(rng, 1, 5);
      std::vector<Point> pts;
      std::uniform_int_distribution<std::size_t> pick(0, inside.size() - 1);
      for (int i = 0; i < n; ++i) {
        const std::size_t idx = inside[pick(rng)];
        const double ox = uniform(rng, 0.25, 0.75);
        const double oy = uniform(rng, 0.25, 0.75);
        pts.push_back({(idx % gt_alpha.width + ox) / w, (idx / gt_alpha.width + oy) / h});
      }
      return VisualPrompt::points(std::move(pts));
    }
    case PromptKind::kBox: {
      const BinaryGrid support = threshold(gt_alpha, 0.0, true);
      if (support.count() == 0) throw GenerationError("empty alpha support for box prompt");
      const Box tight = mask_bbox(support);
      const double j = options.box_jitter;
      if (j <= 0.0) return VisualPrompt::box(tight);
      for (int attempt = 0; attempt < 16; ++attempt) {
        Box b = tight;
        b.x1 = std::clamp(b.x1 + uniform(rng, -j, j), 0.0, 1.0);
        b.y1 = std::clamp(b.y1 + uniform(rng, -j, j), 0.0, 1.0);
        b.x2 = std::clamp(b.x2 + uniform(rng, -j, j), 0.0, 1.0);
        b.y2 = std::clamp(b.y2 + uniform(rng, -j, j), 0.0, 1.0);
        if (b.x2 - b.x1 >= 1.0 / w && b.y2 - b.y1 >= 1.0 / h) return VisualPrompt::box(b);
      }
      return VisualPrompt::box(tight);
    }
    case PromptKind::kMask: {
      const BinaryGrid base = threshold(gt_alpha, 0.5, true);
      if (base.count() == 0) throw GenerationError("no alpha > 0.5 region for mask prompt");
      int r = 0;
      bool grow = true;
      if (options.morph) {
        r = std::abs(*options.morph);
        grow = *options.morph >= 0;
      } else {
        r = uniform_int(rng, 0, options.max_morph);
        grow = uniform(rng, 0.0, 1.0) < 0.5;
      }
      if (grow) return VisualPrompt::mask(dilate(base, r));
      for (; r > 0; --r) {
        BinaryGrid g = erode(base, r);
        if (g.count() > 0) return VisualPrompt::mask(std::move(g));
      }
      return VisualPrompt::mask(base);
    }
  }
  throw ArgumentError("unknown prompt kind");
}

// ---------------------------------------------------------------------------
// scenes

namespace {

struct PixelBox {
  long y0, y1, x0, x1;  // inclusive
};

PixelBox support_box(const Image& alpha) {
  PixelBox b{static_cast<long>(alpha.height), -1, static_cast<long>(alpha.width), -1};
  for (std::size_t y = 0; y < alpha.height; ++y)
    for (std::size_t x = 0; x < alpha.width; ++x) {
      if (alpha.at(y, x) <= 0.0) continue;
      b.y0 = std::min(b.y0, static_cast<long>(y));
      b.y1 = std::max(b.y1, static_cast<long>(y));
      b.x0 = std::min(b.x0, static_cast<long>(x));
      b.x1 = std::max(b.x1, static_cast<long>(x));
    }
  return b;
}

// Clear gap, in pixels, kept between the two instances' bounding boxes so
// that a jittered box prompt stays off the distractor.
constexpr long kInstanceGap = 4;

double mean_contrast(const Foreground& fg, const Image& bg) {
  double diff = 0.0, mass = 0.0;
  for (std::size_t y = 0; y < bg.height; ++y)
    for (std::size_t x = 0; x < bg.width; ++x) {
      const double a = fg.alpha.at(y, x);
      if (a <= 0.0) continue;
      for (std::size_t c = 0; c < 3; ++c) diff += a * std::abs(fg.rgb.at(y, x, c) - bg.at(y, x, c)) / 3.0;
      mass += a;
    }
  return mass > 0.0 ? diff / mass : 0.0;
}

}  // namespace

SynthScene make_scene(Rng& rng, const SceneOptions& options) {
  check_canvas(options.height, options.width);
  if (!(options.duplicate_prob >= 0.0 && options.duplicate_prob <= 1.0)) {
    throw ArgumentError("duplicate_prob must lie in [0, 1]");
  }
  const std::size_t h = options.height, w = options.width;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const ShapeKind shape = options.shape_kind ? *options.shape_kind : static_cast<ShapeKind>(uniform_int(rng, 0, 3));
    const PromptKind kind = options.prompt_kind ? *options.prompt_kind : static_cast<PromptKind>(uniform_int(rng, 0, 2));
    Image bg = gen_background(h, w, rng);
    Foreground fg = gen_foreground(shape, h, w, rng);
    for (int retry = 0; retry < 10 && mean_contrast(fg, bg) < 0.15; ++retry) fg = gen_foreground(shape, h, w, rng);

    std::optional<VisualPrompt> prompt;
    try {
      prompt = sample_prompts(fg.alpha, kind, rng, options.sampling);
    } catch (const GenerationError&) {
      continue;
    }

    SynthScene scene;
    scene.shape = shape;
    scene.opacity = fg.opacity;
    scene.prompt = std::move(*prompt);
    const bool duplicate = uniform(rng, 0.0, 1.0) < options.duplicate_prob;
    std::optional<Foreground> copy;
    if (duplicate) {
      const PixelBox b = support_box(fg.alpha);
      const long bh = b.y1 - b.y0 + 1, bw = b.x1 - b.x0 + 1;
      for (int tries = 0; tries < kPlacementAttempts && !copy; ++tries) {
        const long ny = uniform_int(rng, 0, static_cast<int>(h - bh));
        const long nx = uniform_int(rng, 0, static_cast<int>(w - bw));
        const bool apart_y = ny >= b.y1 + 1 + kInstanceGap || ny + bh - 1 <= b.y0 - 1 - kInstanceGap;
        const bool apart_x = nx >= b.x1 + 1 + kInstanceGap || nx + bw - 1 <= b.x0 - 1 - kInstanceGap;
        if (apart_y || apart_x) copy = shift_foreground(fg, ny - b.y0, nx - b.x0);
      }
      scene.placement_fallback = !copy;
    }
    std::vector<Layer> layers{{&fg.rgb, &fg.alpha}};
    if (copy) layers.push_back({&copy->rgb, &copy->alpha});
    scene.image = composite(bg, layers);
    scene.gt_alpha = fg.alpha;
    scene.foreground_rgb = std::move(fg.rgb);
    scene.background = std::move(bg);
    if (copy) {
      scene.distractor_count = 1;
      scene.distractor_rgb = std::move(copy->rgb);
      scene.distractor_alpha = std::move(copy->alpha);
    }
    return scene;
  }
  throw GenerationError("make_scene: could not satisfy the prompt constraints");
}

std::uint64_t scene_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// dataset directories

DatasetEntry make_dataset_entry(std::uint64_t seed, const SceneOptions& options) {
  Rng rng(seed);
  SceneOptions opts = options;
  opts.prompt_kind = PromptKind::kPoint;
  DatasetEntry entry;
  entry.scene = make_scene(rng, opts);
  entry.prompts.push_back(entry.scene.prompt);
  entry.prompts.push_back(sample_prompts(entry.scene.gt_alpha, PromptKind::kBox, rng, opts.sampling));
  entry.prompts.push_back(sample_prompts(entry.scene.gt_alpha, PromptKind::kMask, rng, opts.sampling));
  return entry;
}

void write_scene(const std::string& scene_dir, const DatasetEntry& entry, std::uint64_t seed) {
  fs::create_directories(scene_dir);
  const fs::path dir(scene_dir);
  const SynthScene& s = entry.scene;
  write_png((dir / "image.png").string(), s.image);
  write_png((dir / "alpha.png").string(), s.gt_alpha);
  write_prompt_file((dir / "prompt.txt").string(), entry.prompts, s.opacity, "mask.png");
  if (s.distractor_count > 0) write_png((dir / "distractor.png").string(), s.distractor_alpha);
  std::ofstream meta(dir / "meta.txt");
  meta << "seed " << seed << "\nkind " << shape_kind_name(s.shape) << "\nopacity " << s.opacity.value()
       << "\ndistractor_count " << s.distractor_count << "\n";
  if (!meta) throw IoError("cannot write " + (dir / "meta.txt").string());
}

std::vector<std::string> write_dataset(const std::string& dir, std::size_t count, std::uint64_t seed,
                                       const SceneOptions& options) {
  fs::create_directories(dir);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%06zu", i);
    const std::uint64_t s = scene_seed(seed, i);
    write_scene((fs::path(dir) / name).string(), make_dataset_entry(s, options), s);
    names.push_back(name);
  }
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  manifest << "count " << count << "\nseed " << seed << "\nheight " << options.height << "\nwidth "
           << options.width << "\nduplicate_prob " << options.duplicate_prob << "\n";
  for (const auto& n : names) manifest << "scene " << n << "\n";
  if (!manifest) throw IoError("cannot write manifest in " + dir);
  return names;
}

namespace {

Image read_required_png(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing " + p.string());
  return read_png(p.string());
}

SceneMeta read_meta(const fs::path& p) {
  SceneMeta meta;
  std::ifstream in(p);
  if (!in) return meta;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key >> value)) throw IoError(p.string() + ":" + std::to_string(line_no) + ": malformed line");
    try {
      if (key == "seed") {
        meta.seed = std::stoull(value);
      } else if (key == "kind") {
        meta.shape = parse_shape_kind(value);
      } else if (key == "opacity") {
        meta.opacity = std::stoi(value);
      } else if (key == "distractor_count") {
        meta.distractor_count = std::stoi(value);
      }
    } catch (const std::exception&) {
      throw IoError(p.string() + ":" + std::to_string(line_no) + ": bad value '" + value + "'");
    }
  }
  return meta;
}

}  // namespace

DatasetScene read_scene(const std::string& scene_dir) {
  const fs::path dir(scene_dir);
  if (!fs::is_directory(dir)) throw IoError("not a scene directory: " + scene_dir);
  DatasetScene s;
  s.name = dir.filename().string();
  s.image = read_required_png(dir / "image.png");
  s.alpha = read_required_png(dir / "alpha.png");
  if (s.alpha.channels != 1) throw IoError(scene_dir + ": alpha.png must be grayscale");
  if (s.alpha.height != s.image.height || s.alpha.width != s.image.width) {
    throw IoError(scene_dir + ": image and alpha extents differ");
  }
  if (!fs::exists(dir / "prompt.txt")) throw IoError("missing " + (dir / "prompt.txt").string());
  s.prompts = read_prompt_file((dir / "prompt.txt").string());
  s.meta = read_meta(dir / "meta.txt");
  if (fs::exists(dir / "distractor.png")) s.distractor_alpha = read_png((dir / "distractor.png").string());
  return s;
}

std::vector<std::string> list_scenes(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (e.is_directory() && n.rfind("scene_", 0) == 0) names.push_back(n);
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace pmatte
