#include "promptmatte/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "promptmatte/errors.hpp"
#include "promptmatte/ops.hpp"

namespace pmatte {

const char* prompt_kind_name(PromptKind kind) {
  switch (kind) {
    case PromptKind::kPoint:
      return "point";
    case PromptKind::kBox:
      return "box";
    case PromptKind::kMask:
      return "mask";
  }
  return "?";
}

PromptKind parse_prompt_kind(const std::string& name) {
  if (name == "point") return PromptKind::kPoint;
  if (name == "box") return PromptKind::kBox;
  if (name == "mask") return PromptKind::kMask;
  throw ArgumentError("unknown prompt kind '" + name + "'");
}

std::size_t BinaryGrid::count() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](auto c) { return c != 0; }));
}

namespace {

bool in_unit(double v) { return v >= 0.0 && v <= 1.0 && std::isfinite(v); }

}  // namespace

VisualPrompt VisualPrompt::points(std::vector<Point> pts) {
  if (pts.empty()) throw ArgumentError("point prompt needs at least one point");
  for (const Point& p : pts) {
    if (!in_unit(p.x) || !in_unit(p.y)) throw ArgumentError("point coordinates must lie in [0,1]");
  }
  return VisualPrompt(std::move(pts));
}

VisualPrompt VisualPrompt::box(Box b) {
  if (!in_unit(b.x1) || !in_unit(b.y1) || !in_unit(b.x2) || !in_unit(b.y2)) {
    throw ArgumentError("box coordinates must lie in [0,1]");
  }
  if (b.x1 > b.x2) std::swap(b.x1, b.x2);
  if (b.y1 > b.y2) std::swap(b.y1, b.y2);
  if (b.x1 == b.x2 || b.y1 == b.y2) throw ArgumentError("box has zero area");
  return VisualPrompt(b);
}

VisualPrompt VisualPrompt::mask(BinaryGrid grid) {
  if (grid.height == 0 || grid.width == 0 || grid.cells.size() != grid.height * grid.width) {
    throw ArgumentError("mask grid is malformed");
  }
  if (grid.count() == 0) throw ArgumentError("mask prompt has no set cell");
  return VisualPrompt(std::move(grid));
}

PromptKind VisualPrompt::kind() const {
  return static_cast<PromptKind>(value_.index());
}

const std::vector<Point>& VisualPrompt::point_list() const {
  if (kind() != PromptKind::kPoint) throw StateError("prompt is not a point prompt");
  return std::get<std::vector<Point>>(value_);
}

const Box& VisualPrompt::box_coords() const {
  if (kind() != PromptKind::kBox) throw StateError("prompt is not a box prompt");
  return std::get<Box>(value_);
}

const BinaryGrid& VisualPrompt::mask_grid() const {
  if (kind() != PromptKind::kMask) throw StateError("prompt is not a mask prompt");
  return std::get<BinaryGrid>(value_);
}

OpacityLabel::OpacityLabel(int value) : value_(value) {
  if (value != 0 && value != 1) throw ArgumentError("opacity label must be 0 or 1");
}

// ---------------------------------------------------------------------------

std::vector<double> sinusoidal_encode(double value, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ArgumentError("sinusoidal_encode: dim must be even and >= 2");
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        half == 1 ? 1.0
                  : std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half - 1));
    out[i] = std::sin(value * freq);
    out[half + i] = std::cos(value * freq);
  }
  return out;
}

PointPadding point_pad(std::size_t n_points) {
  if (n_points < 1 || n_points > kPointCoordWidth / 2) {
    throw ArgumentError("point_pad: point count must lie in [1, 840]");
  }
  std::size_t total = 2 * n_points;
  while (kPointCoordWidth % total != 0) ++total;
  return {total - 2 * n_points, kPointCoordWidth / total};
}

Box mask_bbox(const BinaryGrid& mask) {
  std::size_t y0 = mask.height, y1 = 0, x0 = mask.width, x1 = 0;
  bool any = false;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      any = true;
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
    }
  if (!any) throw ArgumentError("mask_bbox: empty mask");
  const double w = static_cast<double>(mask.width);
  const double h = static_cast<double>(mask.height);
  return {x0 / w, y0 / h, (x1 + 1) / w, (y1 + 1) / h};
}

namespace {

void append_box(const Box& b, std::vector<double>& out) {
  for (double v : {b.x1, b.y1, b.x2, b.y2}) {
    auto e = sinusoidal_encode(v * kEmbedScale, kBoxCoordWidth / 4);
    out.insert(out.end(), e.begin(), e.end());
  }
}

}  // namespace

CoordEmbedding coord_embedding(const VisualPrompt& prompt) {
  CoordEmbedding out;
  out.kind = prompt.kind();
  switch (prompt.kind()) {
    case PromptKind::kBox:
      append_box(prompt.box_coords(), out.values);
      break;
    case PromptKind::kMask:
      append_box(mask_bbox(prompt.mask_grid()), out.values);
      break;
    case PromptKind::kPoint: {
      const auto& pts = prompt.point_list();
      if (2 * pts.size() > kPointCoordWidth) {
        throw CapacityError("coord_embedding: too many points to encode");
      }
      const PointPadding pad = point_pad(pts.size());
      std::vector<double> scalars;
      for (const Point& p : pts) {
        scalars.push_back(p.x);
        scalars.push_back(p.y);
      }
      scalars.resize(scalars.size() + pad.padding, 0.0);
      out.values.reserve(kPointCoordWidth);
      // An odd width (2N + P a multiple of 16) takes the next even encoding
      // and drops its final cosine entry, keeping the total at 1680.
      const std::size_t d = pad.per_scalar_dim;
      for (double s : scalars) {
        auto e = sinusoidal_encode(s * kEmbedScale, d + d % 2);
        out.values.insert(out.values.end(), e.begin(), e.begin() + d);
      }
      out.padding = pad.padding;
      break;
    }
  }
  return out;
}

std::vector<double> opacity_embedding(OpacityLabel opacity) {
  return sinusoidal_encode(opacity.value() * kEmbedScale, kScalarEmbedWidth);
}

template <typename T>
CondEmbedding<T> cond_embedding(const std::vector<double>& e_opacity, const CoordEmbedding& e_coord,
                                int opacity, const CondHeads<T>& heads) {
  const Tensor<T>* weight = nullptr;
  const Tensor<T>* bias = nullptr;
  if (e_coord.values.size() == kPointCoordWidth) {
    weight = &heads.point_weight;
    bias = &heads.point_bias;
  } else if (e_coord.values.size() == kBoxCoordWidth) {
    weight = &heads.box_weight;
    bias = &heads.box_bias;
  } else {
    throw DimensionError("cond_embedding: coordinate embedding width " +
                         std::to_string(e_coord.values.size()) + " has no head");
  }
  Tensor<T> op(Shape{1, e_opacity.size()}, std::vector<T>(e_opacity.begin(), e_opacity.end()));
  Tensor<T> co(Shape{1, e_coord.values.size()},
               std::vector<T>(e_coord.values.begin(), e_coord.values.end()));
  auto f1 = linear(op, heads.opacity_weight, heads.opacity_bias);
  auto f2 = linear(co, *weight, *bias);
  return {add(f1, f2), {e_coord.values.size(), e_coord.padding, opacity}};
}

template CondEmbedding<float> cond_embedding<float>(const std::vector<double>&, const CoordEmbedding&,
                                                    int, const CondHeads<float>&);
template CondEmbedding<double> cond_embedding<double>(const std::vector<double>&,
                                                      const CoordEmbedding&, int,
                                                      const CondHeads<double>&);

// ---------------------------------------------------------------------------

Image rasterize_prompt(const VisualPrompt& prompt, std::size_t height, std::size_t width) {
  if (height < 8 || width < 8) throw ArgumentError("rasterize_prompt: extents must be >= 8");
  Image out(height, width, 1, 0.0);
  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);
  switch (prompt.kind()) {
    case PromptKind::kPoint: {
      const double radius = 0.02 * std::min(h, w);
      for (const Point& p : prompt.point_list()) {
        const double px = p.x * w;
        const double py = p.y * h;
        for (std::size_t y = 0; y < height; ++y)
          for (std::size_t x = 0; x < width; ++x) {
            const double d = std::hypot(x + 0.5 - px, y + 0.5 - py);
            const double cover = std::clamp(radius + 0.5 - d, 0.0, 1.0);
            out.at(y, x) = std::max(out.at(y, x), cover);
          }
      }
      break;
    }
    case PromptKind::kBox: {
      const Box& b = prompt.box_coords();
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double cx = x + 0.5;
          const double cy = y + 0.5;
          if (cx >= b.x1 * w && cx <= b.x2 * w && cy >= b.y1 * h && cy <= b.y2 * h) out.at(y, x) = 1.0;
        }
      break;
    }
    case PromptKind::kMask: {
      const BinaryGrid& m = prompt.mask_grid();
      for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = std::min(m.height - 1, static_cast<std::size_t>((y + 0.5) * m.height / h));
        for (std::size_t x = 0; x < width; ++x) {
          const std::size_t sx = std::min(m.width - 1, static_cast<std::size_t>((x + 0.5) * m.width / w));
          out.at(y, x) = m.at(sy, sx) ? 1.0 : 0.0;
        }
      }
      break;
    }
  }
  return out;
}

namespace {

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// weights[i][k]: fraction of target cell i covered by source cell k.
std::vector<std::vector<double>> area_weights(std::size_t target, std::size_t source) {
  std::vector<std::vector<double>> wts(target, std::vector<double>(source, 0.0));
  for (std::size_t i = 0; i < target; ++i)
    for (std::size_t k = 0; k < source; ++k) {
      wts[i][k] = overlap(static_cast<double>(i) / target, static_cast<double>(i + 1) / target,
                          static_cast<double>(k) / source, static_cast<double>(k + 1) / source) *
                  target;
    }
  return wts;
}


}  // namespace

AttentionMask attention_mask_build(const VisualPrompt& prompt, std::size_t height,
                                   std::size_t width, double sigma) {
  if (height < 1 || width < 1) throw ArgumentError("attention_mask_build: empty grid");
  AttentionMask mask;
  mask.height = height;
  mask.width = width;
  mask.values.assign(height * width, 0.0);
  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);

  if (prompt.kind() == PromptKind::kPoint) {
    if (!(sigma > 0.0)) throw ArgumentError("attention_mask_build: sigma must be positive");
    mask.kind = MaskKind::kSoft;
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (const Point& p : prompt.point_list()) {
      const std::size_t py = std::min(height - 1, static_cast<std::size_t>(p.y * h));
      const std::size_t px = std::min(width - 1, static_cast<std::size_t>(p.x * w));
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double dy = (static_cast<double>(y) - static_cast<double>(py)) / h;
          const double dx = (static_cast<double>(x) - static_cast<double>(px)) / w;
          const double v = std::exp(-(dx * dx + dy * dy) * inv);
          double& cell = mask.values[y * width + x];
          cell = std::max(cell, v);
        }
    }
    return mask;
  }

  mask.kind = MaskKind::kHard;
  std::vector<double> coverage(height * width, 0.0);
  if (prompt.kind() == PromptKind::kBox) {
    const Box& b = prompt.box_coords();
    for (std::size_t y = 0; y < height; ++y) {
      const double cy = overlap(y / h, (y + 1) / h, b.y1, b.y2) * h;
      for (std::size_t x = 0; x < width; ++x) {
        const double cx = overlap(x / w, (x + 1) / w, b.x1, b.x2) * w;
        coverage[y * width + x] = cx * cy;
      }
    }
  } else {
    const BinaryGrid& m = prompt.mask_grid();
    const auto wy = area_weights(height, m.height);
    const auto wx = area_weights(width, m.width);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t sy = 0; sy < m.height; ++sy) {
        if (wy[y][sy] == 0.0) continue;
        for (std::size_t x = 0; x < width; ++x)
          for (std::size_t sx = 0; sx < m.width; ++sx) {
            if (m.at(sy, sx)) coverage[y * width + x] += wy[y][sy] * wx[x][sx];
          }
      }
  }
  const auto best = static_cast<std::size_t>(
      std::max_element(coverage.begin(), coverage.end()) - coverage.begin());
  bool any = false;
  for (double& v : coverage) {
    v = v >= 0.5 ? 1.0 : 0.0;
    any = any || v > 0.0;
  }
  if (!any) coverage[best] = 1.0;
  mask.values = std::move(coverage);
  return mask;
}

// ---------------------------------------------------------------------------

const VisualPrompt& PromptFile::find(PromptKind kind) const {
  for (const auto& p : prompts) {
    if (p.kind() == kind) return p;
  }
  throw ArgumentError(std::string("prompt file has no ") + prompt_kind_name(kind) + " prompt");
}

PromptFile read_prompt_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt file " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  PromptFile file;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    auto fail = [&](const std::string& why) {
      return IoError(path + ":" + std::to_string(line_no) + ": " + why);
    };
    std::vector<double> nums;
    if (tag == "point" || tag == "box" || tag == "opacity") {
      double v;
      while (ls >> v) nums.push_back(v);
      if (!ls.eof()) throw fail("expected numbers");
    }
    try {
      if (tag == "point") {
        if (nums.empty() || nums.size() % 2 != 0) throw fail("point needs x y pairs");
        std::vector<Point> pts;
        for (std::size_t i = 0; i < nums.size(); i += 2) pts.push_back({nums[i], nums[i + 1]});
        file.prompts.push_back(VisualPrompt::points(std::move(pts)));
      } else if (tag == "box") {
        if (nums.size() != 4) throw fail("box needs 4 numbers");
        file.prompts.push_back(VisualPrompt::box({nums[0], nums[1], nums[2], nums[3]}));
      } else if (tag == "mask") {
        std::string rel;
        if (!(ls >> rel)) throw fail("mask needs a path");
        auto mp = std::filesystem::path(rel);
        if (mp.is_relative()) mp = dir / mp;
        Image im = read_png(mp.string());
        BinaryGrid grid(im.height, im.width);
        for (std::size_t y = 0; y < im.height; ++y)
          for (std::size_t x = 0; x < im.width; ++x) grid.set(y, x, im.at(y, x, 0) >= 0.5);
        file.prompts.push_back(VisualPrompt::mask(std::move(grid)));
      } else if (tag == "opacity") {
        if (nums.size() != 1) throw fail("opacity needs one value");
        file.opacity = OpacityLabel(static_cast<int>(nums[0]));
      } else {
        throw fail("unknown directive '" + tag + "'");
      }
    } catch (const ArgumentError& e) {
      throw fail(e.what());
    }
  }
  if (file.prompts.empty()) throw IoError(path + ": no prompt found");
  return file;
}

void write_prompt_file(const std::string& path, const std::vector<VisualPrompt>& prompts,
                       OpacityLabel opacity, const std::string& mask_name) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.precision(17);
  for (const auto& p : prompts) {
    switch (p.kind()) {
      case PromptKind::kPoint:
        out << "point";
        for (const Point& pt : p.point_list()) out << ' ' << pt.x << ' ' << pt.y;
        out << '\n';
        break;
      case PromptKind::kBox: {
        const Box& b = p.box_coords();
        out << "box " << b.x1 << ' ' << b.y1 << ' ' << b.x2 << ' ' << b.y2 << '\n';
        break;
      }
      case PromptKind::kMask: {
        const BinaryGrid& g = p.mask_grid();
        Image im(g.height, g.width, 1);
        for (std::size_t i = 0; i < g.cells.size(); ++i) im.values[i] = g.cells[i] ? 1.0 : 0.0;
        write_png((std::filesystem::path(path).parent_path() / mask_name).string(), im);
        out << "mask " << mask_name << '\n';
        break;
      }
    }
  }
  out << "opacity " << opacity.value() << '\n';
}

}  // namespace pmatte
