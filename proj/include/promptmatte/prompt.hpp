#pragma once

// Visual prompts and the signals derived from them: sinusoidal coordinate
// and opacity embeddings, the conditioning vector that stands in for the
// diffusion time embedding, rasterized prompt images and attention masks.

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "promptmatte/image.hpp"
#include "promptmatte/tensor.hpp"

namespace pmatte {

enum class PromptKind { kPoint, kBox, kMask };

const char* prompt_kind_name(PromptKind kind);
PromptKind parse_prompt_kind(const std::string& name);

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 1.0;
  double y2 = 1.0;
};

// Row-major binary grid.
struct BinaryGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> cells;

  BinaryGrid() = default;
  BinaryGrid(std::size_t h, std::size_t w) : height(h), width(w), cells(h * w, 0) {}
  bool at(std::size_t y, std::size_t x) const { return cells[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool on) { cells[y * width + x] = on ? 1 : 0; }
  std::size_t count() const;
};

// Point set, box or binary mask, all in normalized [0,1] image coordinates.
class VisualPrompt {
 public:
  static VisualPrompt points(std::vector<Point> pts);
  // Reversed corners are swapped; a zero-area box is rejected.
  static VisualPrompt box(Box b);
  static VisualPrompt mask(BinaryGrid grid);

  PromptKind kind() const;
  const std::vector<Point>& point_list() const;
  const Box& box_coords() const;
  const BinaryGrid& mask_grid() const;

 private:
  explicit VisualPrompt(std::variant<std::vector<Point>, Box, BinaryGrid> v) : value_(std::move(v)) {}
  std::variant<std::vector<Point>, Box, BinaryGrid> value_;
};

class OpacityLabel {
 public:
  // 0 = transparent object, 1 = opaque object.
  explicit OpacityLabel(int value = 1);
  int value() const { return value_; }
  bool operator==(const OpacityLabel&) const = default;

 private:
  int value_;
};

// ---------------------------------------------------------------------------
// Embeddings

inline constexpr std::size_t kPointCoordWidth = 1680;
inline constexpr std::size_t kBoxCoordWidth = 1280;
inline constexpr std::size_t kScalarEmbedWidth = 320;
// Normalized coordinates and opacity are multiplied by this before encoding.
inline constexpr double kEmbedScale = 1000.0;

// First dim/2 entries sin(value * w_i), last dim/2 cos(value * w_i) with
// w_i = exp(-ln(10000) * i / (dim/2 - 1)); w_0 = 1 when dim == 2.
std::vector<double> sinusoidal_encode(double value, std::size_t dim);

struct PointPadding {
  std::size_t padding = 0;         // zeros appended to the 2N coordinates
  std::size_t per_scalar_dim = 0;  // 1680 / (2N + padding)
};

// Minimal padding P such that 2N + P divides 1680. N must lie in [1, 840].
PointPadding point_pad(std::size_t n_points);

struct CoordEmbedding {
  std::vector<double> values;  // length 1680 (points) or 1280 (box, mask)
  std::size_t padding = 0;
  PromptKind kind = PromptKind::kBox;
};

// Points: each scalar of (x1, y1, ..., xN, yN, 0 x P) gets 1680 / (2N + P)
// entries. When that width is odd the scalar uses the next even encoding
// minus its last cosine entry.
CoordEmbedding coord_embedding(const VisualPrompt& prompt);

// Tight box around the set cells, normalized by the grid extents. A
// single-row or single-column extent still spans one full cell.
Box mask_bbox(const BinaryGrid& mask);

std::vector<double> opacity_embedding(OpacityLabel opacity);

// Linear heads f1 (opacity) and f2 (coordinates; one head per input width).
template <typename T>
struct CondHeads {
  Tensor<T> opacity_weight;  // [D, 320]
  Tensor<T> opacity_bias;    // [D]
  Tensor<T> point_weight;    // [D, 1680]
  Tensor<T> point_bias;      // [D]
  Tensor<T> box_weight;      // [D, 1280]
  Tensor<T> box_bias;        // [D]

  std::size_t width() const { return opacity_bias.numel(); }
};

struct CondProvenance {
  std::size_t coord_width = 0;
  std::size_t padding = 0;
  int opacity = 1;
};

template <typename T>
struct CondEmbedding {
  Tensor<T> vector;  // [1, D]
  CondProvenance provenance;
};

// E_cond = f1(E_opacity) + f2(E_coord); f2 picked by the coordinate width.
template <typename T>
CondEmbedding<T> cond_embedding(const std::vector<double>& e_opacity, const CoordEmbedding& e_coord,
                                int opacity, const CondHeads<T>& heads);

// ---------------------------------------------------------------------------
// Spatial signals

// Prompt image H x W x 1 in [0,1]. Points become anti-aliased disks of
// radius 0.02 * min(H, W); boxes are filled; masks are nearest-resampled.
Image rasterize_prompt(const VisualPrompt& prompt, std::size_t height, std::size_t width);

enum class MaskKind { kHard, kSoft };

struct AttentionMask {
  std::size_t height = 0;
  std::size_t width = 0;
  MaskKind kind = MaskKind::kHard;
  std::vector<double> values;  // row-major, in [0,1]
};

inline constexpr double kDefaultPointSigma = 0.1;

// Box/mask: area coverage per cell thresholded at 0.5, falling back to the
// best-covered cell when nothing passes. Points: Gaussian of width sigma
// (normalized units) centred on the cell containing each point, combined by
// per-cell maximum.
AttentionMask attention_mask_build(const VisualPrompt& prompt, std::size_t height,
                                   std::size_t width, double sigma = kDefaultPointSigma);

// ---------------------------------------------------------------------------
// Prompt files

struct PromptFile {
  std::vector<VisualPrompt> prompts;
  OpacityLabel opacity{1};

  // First prompt of the requested kind; throws ArgumentError if absent.
  const VisualPrompt& find(PromptKind kind) const;
};

// Lines: `point x1 y1 [x2 y2 ...]`, `box x1 y1 x2 y2`, `mask <png path>`,
// `opacity 0|1`. Mask paths are resolved relative to the file's directory.
PromptFile read_prompt_file(const std::string& path);

// Writes `prompts`; masks are stored next to the file as `mask_name`.
void write_prompt_file(const std::string& path, const std::vector<VisualPrompt>& prompts,
                       OpacityLabel opacity, const std::string& mask_name = "mask.png");

}  // namespace pmatte
