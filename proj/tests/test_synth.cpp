#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "promptmatte/errors.hpp"
#include "promptmatte/synth.hpp"

using namespace pmatte;
namespace fs = std::filesystem;

namespace {

double alpha_mass(const Image& a) {
  double s = 0.0;
  for (double v : a.values) s += v;
  return s;
}

// Brute-force Chebyshev morphology over every pair of cells.
BinaryGrid morph_oracle(const BinaryGrid& g, int r, bool grow) {
  BinaryGrid out(g.height, g.width);
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      bool any = false, all = true;
      for (std::size_t v = 0; v < g.height; ++v)
        for (std::size_t u = 0; u < g.width; ++u) {
          const long dy = static_cast<long>(v) - static_cast<long>(y);
          const long dx = static_cast<long>(u) - static_cast<long>(x);
          if (std::max(std::abs(dy), std::abs(dx)) > r) continue;
          any = any || g.at(v, u);
          all = all && g.at(v, u);
        }
      out.set(y, x, grow ? any : all);
    }
  return out;
}

double iou(const BinaryGrid& a, const BinaryGrid& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    inter += a.cells[i] && b.cells[i];
    uni += a.cells[i] || b.cells[i];
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryGrid above(const Image& a, double t) {
  BinaryGrid g(a.height, a.width);
  for (std::size_t i = 0; i < a.pixels(); ++i) g.cells[i] = a.values[i] > t;
  return g;
}

double alpha_at(const Image& a, const Point& p) {
  return a.at(static_cast<std::size_t>(p.y * a.height), static_cast<std::size_t>(p.x * a.width));
}

}  // namespace

TEST(gen_foreground, disk_mass_matches_area) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto fg = gen_foreground(ShapeKind::kDisk, 64, 64, rng);
    const double area = std::numbers::pi * fg.radius * fg.radius;
    EXPECT_NEAR(alpha_mass(fg.alpha), area, 0.1 * area) << "seed " << seed;
    EXPECT_EQ(fg.opacity.value(), 1);
  }
}

TEST(gen_foreground, opaque_kinds_have_soft_edges_and_solid_core) {
  for (auto kind : {ShapeKind::kDisk, ShapeKind::kBlob, ShapeKind::kRing}) {
    Rng rng(7);
    auto fg = gen_foreground(kind, 64, 64, rng);
    std::size_t partial = 0, solid = 0;
    for (double v : fg.alpha.values) {
      partial += v > 0.0 && v < 1.0;
      solid += v == 1.0;
    }
    EXPECT_GT(partial, 0u) << shape_kind_name(kind);
    EXPECT_GT(solid, 0u) << shape_kind_name(kind);
    EXPECT_GE(fg.edge, 1.0);
    EXPECT_LE(fg.edge, 3.0);
  }
}

TEST(gen_foreground, glass_is_translucent) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    auto fg = gen_foreground(ShapeKind::kGlass, 48, 64, rng);
    double hi = 0.0;
    for (double v : fg.alpha.values) hi = std::max(hi, v);
    EXPECT_LE(hi, 0.6);
    EXPECT_GE(hi, 0.2 - 1e-12);
    EXPECT_EQ(fg.opacity.value(), 0);
  }
}

TEST(gen_foreground, seeded_and_inside_canvas) {
  Rng a(99), b(99);
  auto x = gen_foreground(ShapeKind::kBlob, 64, 64, a);
  auto y = gen_foreground(ShapeKind::kBlob, 64, 64, b);
  EXPECT_EQ(x.alpha.values, y.alpha.values);
  EXPECT_EQ(x.rgb.values, y.rgb.values);
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_EQ(x.alpha.at(0, i), 0.0);
    EXPECT_EQ(x.alpha.at(63, i), 0.0);
    EXPECT_EQ(x.alpha.at(i, 0), 0.0);
    EXPECT_EQ(x.alpha.at(i, 63), 0.0);
  }
  Rng c(1);
  EXPECT_THROW(gen_foreground(ShapeKind::kDisk, 8, 64, c), ArgumentError);
}

TEST(shift_foreground, exact_translation) {
  Rng rng(3);
  auto fg = gen_foreground(ShapeKind::kRing, 64, 64, rng);
  auto moved = shift_foreground(fg, 1, -1);
  for (std::size_t y = 0; y + 1 < 64; ++y)
    for (std::size_t x = 1; x < 64; ++x) EXPECT_EQ(moved.alpha.at(y + 1, x - 1), fg.alpha.at(y, x));
  EXPECT_THROW(shift_foreground(fg, 64, 0), ArgumentError);
}

TEST(composite, trivial_layers) {
  Image bg(4, 5, 3, 0.25), f(4, 5, 3, 0.75);
  Image one(4, 5, 1, 1.0), zero(4, 5, 1, 0.0);
  EXPECT_EQ(composite(bg, {{&f, &one}}).values, f.values);
  EXPECT_EQ(composite(bg, {{&f, &zero}}).values, bg.values);
  Image small(3, 5, 1, 1.0);
  EXPECT_THROW(composite(bg, {{&f, &small}}), DimensionError);
}

TEST(composite, two_layers_match_per_pixel_oracle) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image bg(6, 7, 3), f1(6, 7, 3), f2(6, 7, 3), a1(6, 7, 1), a2(6, 7, 1);
  for (Image* im : {&bg, &f1, &f2, &a1, &a2})
    for (double& v : im->values) v = u(rng);
  auto out = composite(bg, {{&f1, &a1}, {&f2, &a2}});
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 7; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double v = bg.at(y, x, c);
        v = a1.at(y, x) * f1.at(y, x, c) + (1 - a1.at(y, x)) * v;
        v = a2.at(y, x) * f2.at(y, x, c) + (1 - a2.at(y, x)) * v;
        EXPECT_NEAR(out.at(y, x, c), v, 1e-7);
      }
}

TEST(morphology, matches_brute_force) {
  Rng rng(11);
  std::bernoulli_distribution coin(0.3);
  BinaryGrid g(12, 10);
  for (auto& c : g.cells) c = coin(rng);
  for (int r = 0; r <= 3; ++r) {
    EXPECT_EQ(dilate(g, r).cells, morph_oracle(g, r, true).cells) << r;
    EXPECT_EQ(erode(g, r).cells, morph_oracle(g, r, false).cells) << r;
  }
}

TEST(sample_prompts, points_land_inside_the_object) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    auto fg = gen_foreground(ShapeKind::kDisk, 64, 64, rng);
    auto p = sample_prompts(fg.alpha, PromptKind::kPoint, rng);
    ASSERT_GE(p.point_list().size(), 1u);
    ASSERT_LE(p.point_list().size(), 5u);
    for (const auto& pt : p.point_list()) EXPECT_GT(alpha_at(fg.alpha, pt), 0.5);
  }
}

TEST(sample_prompts, box_jitter) {
  Rng rng(12);
  auto fg = gen_foreground(ShapeKind::kBlob, 64, 64, rng);
  const Box tight = mask_bbox(above(fg.alpha, 0.0));
  PromptSampling none;
  none.box_jitter = 0.0;
  const Box b0 = sample_prompts(fg.alpha, PromptKind::kBox, rng, none).box_coords();
  EXPECT_EQ(b0.x1, tight.x1);
  EXPECT_EQ(b0.y1, tight.y1);
  EXPECT_EQ(b0.x2, tight.x2);
  EXPECT_EQ(b0.y2, tight.y2);
  for (int i = 0; i < 50; ++i) {
    const Box b = sample_prompts(fg.alpha, PromptKind::kBox, rng).box_coords();
    EXPECT_LE(std::abs(b.x1 - tight.x1), 0.05 + 1e-12);
    EXPECT_LE(std::abs(b.y1 - tight.y1), 0.05 + 1e-12);
    EXPECT_LE(std::abs(b.x2 - tight.x2), 0.05 + 1e-12);
    EXPECT_LE(std::abs(b.y2 - tight.y2), 0.05 + 1e-12);
  }
}

TEST(sample_prompts, coarse_mask_overlaps_binarized_alpha) {
  Rng rng(13);
  auto fg = gen_foreground(ShapeKind::kDisk, 64, 64, rng);
  const BinaryGrid base = above(fg.alpha, 0.5);
  PromptSampling opts;
  opts.morph = 2;
  const auto m = sample_prompts(fg.alpha, PromptKind::kMask, rng, opts).mask_grid();
  EXPECT_EQ(m.cells, morph_oracle(base, 2, true).cells);
  const double v = iou(m, base);
  EXPECT_GE(v, 0.5);
  EXPECT_LE(v, 1.0);
  for (int i = 0; i < 20; ++i) {
    const auto r = sample_prompts(fg.alpha, PromptKind::kMask, rng).mask_grid();
    EXPECT_GT(r.count(), 0u);
    // every draw is either a dilation (superset) or an erosion (subset)
    bool superset = true, subset = true;
    for (std::size_t k = 0; k < r.cells.size(); ++k) {
      superset = superset && (!base.cells[k] || r.cells[k]);
      subset = subset && (!r.cells[k] || base.cells[k]);
    }
    EXPECT_TRUE(superset || subset);
  }
}

TEST(sample_prompts, empty_support_is_a_generation_error) {
  Rng rng(14);
  Image empty(32, 32, 1, 0.0);
  for (auto k : {PromptKind::kPoint, PromptKind::kBox, PromptKind::kMask}) {
    EXPECT_THROW(sample_prompts(empty, k, rng), GenerationError);
  }
  Image faint(32, 32, 1, 0.4);
  EXPECT_THROW(sample_prompts(faint, PromptKind::kPoint, rng), GenerationError);
  EXPECT_NO_THROW(sample_prompts(faint, PromptKind::kBox, rng));
}

TEST(make_scene, no_duplication_when_disabled) {
  Rng rng(15);
  SceneOptions opts;
  opts.duplicate_prob = 0.0;
  for (int i = 0; i < 200; ++i) EXPECT_EQ(make_scene(rng, opts).distractor_count, 0);
}

TEST(make_scene, forced_duplication) {
  Rng rng(16);
  SceneOptions opts;
  opts.duplicate_prob = 1.0;
  int fallbacks = 0;
  for (int i = 0; i < 200; ++i) {
    auto s = make_scene(rng, opts);
    if (s.placement_fallback) {
      ++fallbacks;
      EXPECT_EQ(s.distractor_count, 0);
    } else {
      EXPECT_EQ(s.distractor_count, 1);
    }
  }
  EXPECT_LT(fallbacks, 10);
}

TEST(make_scene, duplication_frequency) {
  Rng rng(17);
  int dup = 0;
  for (int i = 0; i < 1000; ++i) dup += make_scene(rng).distractor_count;
  EXPECT_GE(dup, 450);
  EXPECT_LE(dup, 550);
}

TEST(make_scene, scene_invariants) {
  Rng rng(18);
  SceneOptions opts;
  opts.duplicate_prob = 0.7;
  for (int i = 0; i < 100; ++i) {
    auto s = make_scene(rng, opts);
    // reconstruction
    Image fg_alpha = s.gt_alpha;
    std::vector<Layer> layers{{&s.foreground_rgb, &s.gt_alpha}};
    if (s.distractor_count) layers.push_back({&s.distractor_rgb, &s.distractor_alpha});
    auto again = composite(s.background, layers);
    for (std::size_t k = 0; k < again.values.size(); ++k) ASSERT_NEAR(again.values[k], s.image.values[k], 1e-6);
    // distractor never in ground truth; copies are identical in mass
    if (s.distractor_count) {
      for (std::size_t k = 0; k < s.gt_alpha.pixels(); ++k)
        if (s.distractor_alpha.values[k] > 0.0) ASSERT_EQ(s.gt_alpha.values[k], 0.0);
      EXPECT_DOUBLE_EQ(alpha_mass(s.distractor_alpha), alpha_mass(s.gt_alpha));
    }
    // prompt lies on the prompted instance
    switch (s.prompt.kind()) {
      case PromptKind::kPoint:
        for (const auto& p : s.prompt.point_list()) EXPECT_GT(alpha_at(s.gt_alpha, p), 0.5);
        break;
      case PromptKind::kBox: {
        const Box b = s.prompt.box_coords();
        double inside = 0.0;
        for (std::size_t y = 0; y < 64; ++y)
          for (std::size_t x = 0; x < 64; ++x)
            if ((x + 0.5) / 64 > b.x1 && (x + 0.5) / 64 < b.x2 && (y + 0.5) / 64 > b.y1 && (y + 0.5) / 64 < b.y2)
              inside += s.gt_alpha.at(y, x);
        EXPECT_GT(inside, 0.0);
        break;
      }
      case PromptKind::kMask:
        EXPECT_GT(iou(s.prompt.mask_grid(), above(s.gt_alpha, 0.0)), 0.0);
        break;
    }
    EXPECT_EQ(s.opacity.value(), s.shape == ShapeKind::kGlass ? 0 : 1);
  }
}

TEST(make_scene, reproducible_from_seed) {
  Rng a(19), b(19);
  for (int i = 0; i < 5; ++i) {
    auto x = make_scene(a);
    auto y = make_scene(b);
    EXPECT_EQ(x.image.values, y.image.values);
    EXPECT_EQ(x.gt_alpha.values, y.gt_alpha.values);
  }
  EXPECT_NE(scene_seed(1, 0), scene_seed(1, 1));
  EXPECT_NE(scene_seed(1, 0), scene_seed(2, 0));
}

TEST(dataset, write_read_round_trip) {
  const auto dir = fs::temp_directory_path() / "pmatte_synth_ds";
  fs::remove_all(dir);
  auto names = write_dataset(dir.string(), 4, 77);
  ASSERT_EQ(names.size(), 4u);
  EXPECT_EQ(list_scenes(dir.string()), names);
  EXPECT_TRUE(fs::exists(dir / "manifest.txt"));
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto entry = make_dataset_entry(scene_seed(77, i));
    auto read = read_scene((dir / names[i]).string());
    ASSERT_EQ(read.image.values.size(), entry.scene.image.values.size());
    for (std::size_t k = 0; k < read.image.values.size(); ++k)
      EXPECT_NEAR(read.image.values[k], entry.scene.image.values[k], 0.5 / 255 + 1e-12);
    for (std::size_t k = 0; k < read.alpha.values.size(); ++k)
      EXPECT_NEAR(read.alpha.values[k], entry.scene.gt_alpha.values[k], 0.5 / 255 + 1e-12);
    const auto& pts = read.prompts.find(PromptKind::kPoint).point_list();
    ASSERT_EQ(pts.size(), entry.prompts[0].point_list().size());
    for (std::size_t k = 0; k < pts.size(); ++k) EXPECT_EQ(pts[k].x, entry.prompts[0].point_list()[k].x);
    EXPECT_EQ(read.prompts.find(PromptKind::kMask).mask_grid().cells, entry.prompts[2].mask_grid().cells);
    EXPECT_EQ(read.prompts.opacity, entry.scene.opacity);
    EXPECT_EQ(read.meta.seed, scene_seed(77, i));
    EXPECT_EQ(read.meta.distractor_count, entry.scene.distractor_count);
    EXPECT_EQ(read.distractor_alpha.has_value(), entry.scene.distractor_count == 1);
  }
  fs::remove(dir / names[1] / "alpha.png");
  EXPECT_THROW(read_scene((dir / names[1]).string()), IoError);
  fs::remove_all(dir);
}

TEST(dataset, empty_count_writes_only_manifest) {
  const auto dir = fs::temp_directory_path() / "pmatte_synth_empty";
  fs::remove_all(dir);
  EXPECT_TRUE(write_dataset(dir.string(), 0, 1).empty());
  EXPECT_TRUE(fs::exists(dir / "manifest.txt"));
  EXPECT_TRUE(list_scenes(dir.string()).empty());
  fs::remove_all(dir);
}
