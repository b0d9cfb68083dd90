#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "patchforge/detector.hpp"
#include "patchforge/synthdata.hpp"

using namespace patchforge;

namespace {

SceneSpec default_spec(std::uint64_t seed = 11) {
  SceneSpec s;
  s.anchors = DetectorArch{}.grid(128, 128);
  s.seed = seed;
  return s;
}

bool same_pixels(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

/// Centroid of pixels that differ visibly from the flat 0.5 background.
std::optional<std::pair<double, double>> foreground_centroid(const Tensor<float>& img) {
  const Shape s = img.shape();
  double sx = 0, sy = 0, n = 0;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      double d = 0;
      for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(img.at(0, c, y, x) - 0.5));
      if (d > 0.08) sx += x + 0.5, sy += y + 0.5, n += 1;
    }
  if (n == 0) return std::nullopt;
  return std::make_pair(sx / n, sy / n);
}

}  // namespace

TEST(Generate, DeterministicForSameSeed) {
  const auto a = generate(default_spec(), 8);
  const auto b = generate(default_spec(), 8);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(same_pixels(a[i].image, b[i].image));
    ASSERT_EQ(a[i].boxes.size(), b[i].boxes.size());
    for (std::size_t k = 0; k < a[i].boxes.size(); ++k) EXPECT_EQ(a[i].boxes[k], b[i].boxes[k]);
  }
}

TEST(Generate, SplitRangeMatchesWholeRange) {
  const auto whole = generate(default_spec(), 6);
  const auto tail = generate(default_spec(), 3, 3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(same_pixels(whole[i + 3].image, tail[i].image));
  EXPECT_TRUE(same_pixels(whole[4].image, generate_one(default_spec(), 4).image));
}

TEST(Generate, SeedsGiveDifferentImages) {
  EXPECT_FALSE(same_pixels(generate(default_spec(1), 1)[0].image, generate(default_spec(2), 1)[0].image));
}

TEST(Generate, ExactFaceCount) {
  auto spec = default_spec();
  spec.faces_min = spec.faces_max = 1;
  for (const auto& img : generate(spec, 40)) EXPECT_EQ(img.boxes.size(), 1u);
}

TEST(Generate, SceneInvariants) {
  const auto spec = default_spec(5);
  const auto data = generate(spec, 300);
  std::size_t total = 0, easy = 0, medium = 0, hard = 0;
  for (const auto& img : data) {
    EXPECT_EQ(img.image.shape(), (Shape{1, 3, 128, 128}));
    ASSERT_EQ(img.boxes.size(), img.difficulty.size());
    EXPECT_GE(static_cast<int>(img.boxes.size()), spec.faces_min);
    EXPECT_LE(static_cast<int>(img.boxes.size()), spec.faces_max);
    for (std::size_t i = 0; i < img.image.numel(); ++i) {
      ASSERT_GE(img.image[i], 0.f);
      ASSERT_LE(img.image[i], 1.f);
    }
    for (std::size_t k = 0; k < img.boxes.size(); ++k) {
      const auto& b = img.boxes[k];
      EXPECT_GE(b.x0(), 0);
      EXPECT_GE(b.y0(), 0);
      EXPECT_LE(b.x1(), 128);
      EXPECT_LE(b.y1(), 128);
      EXPECT_GE(b.w, 12);
      EXPECT_GE(b.h, 12);
      EXPECT_LE(b.w, 160);
      EXPECT_LE(b.h, 160);
      EXPECT_EQ(img.difficulty[k], difficulty_of(b, spec));
      for (std::size_t j = k + 1; j < img.boxes.size(); ++j) EXPECT_LE(iou(b, img.boxes[j]), 0.3);
      ++total;
      easy += img.difficulty[k] == Difficulty::Easy;
      medium += img.difficulty[k] == Difficulty::Medium;
      hard += img.difficulty[k] == Difficulty::Hard;
    }
  }
  EXPECT_EQ(easy + medium + hard, total);
  EXPECT_GT(easy, 0u);
  EXPECT_GT(medium, 0u);
  EXPECT_GT(hard, 0u);
}

TEST(Generate, FacesAreCoveredByAnchors) {
  const auto spec = default_spec(6);
  const auto anchors = tile_anchors(spec.anchors);
  for (const auto& img : generate(spec, 50))
    for (const auto& b : img.boxes) {
      double best = 0;
      for (const auto& a : anchors) best = std::max(best, iou(a, b));
      EXPECT_GE(best, spec.min_anchor_iou);
    }
}

TEST(Generate, FaceStandsOutOnFlatBackground) {
  auto spec = default_spec(8);
  spec.background_family = 1;
  spec.faces_min = spec.faces_max = 1;
  for (const auto& img : generate(spec, 20)) {
    const auto c = foreground_centroid(img.image);
    ASSERT_TRUE(c.has_value());
    const auto& b = img.boxes[0];
    EXPECT_NEAR(c->first, b.cx, 0.2 * b.w);
    EXPECT_NEAR(c->second, b.cy, 0.25 * b.h);
  }
}

TEST(Generate, InfeasibleLayoutThrows) {
  auto spec = default_spec();
  spec.faces_min = spec.faces_max = 12;
  spec.face_min = 60;
  spec.face_max = 72;
  spec.max_attempts = 3;
  EXPECT_THROW(generate(spec, 1), LayoutError);
}

TEST(Generate, RejectsBadSpecs) {
  auto spec = default_spec();
  spec.face_min = 8;
  EXPECT_THROW(generate(spec, 1), ConfigError);
  spec = default_spec();
  spec.faces_max = 0;
  spec.faces_min = 1;
  EXPECT_THROW(generate(spec, 1), ConfigError);
  EXPECT_THROW(generate(default_spec(), 0), ConfigError);
}

TEST(Augment, FlipTwiceIsIdentity) {
  const auto img = generate(default_spec(), 1)[0];
  const auto back = flip_horizontal(flip_horizontal(img));
  EXPECT_TRUE(same_pixels(img.image, back.image));
  for (std::size_t k = 0; k < img.boxes.size(); ++k) EXPECT_EQ(img.boxes[k], back.boxes[k]);
}

TEST(Augment, FlipMirrorsCenter) {
  const auto img = generate(default_spec(), 1)[0];
  const auto f = flip_horizontal(img);
  for (std::size_t k = 0; k < img.boxes.size(); ++k) {
    EXPECT_DOUBLE_EQ(f.boxes[k].cx, 128 - img.boxes[k].cx);
    EXPECT_DOUBLE_EQ(f.boxes[k].cy, img.boxes[k].cy);
  }
}

TEST(Augment, ScaleTwoDoublesBoxes) {
  const auto img = generate(default_spec(), 1)[0];
  const auto s = rescale(img, 2.0);
  EXPECT_EQ(s.image.shape(), (Shape{1, 3, 256, 256}));
  for (std::size_t k = 0; k < img.boxes.size(); ++k) {
    EXPECT_DOUBLE_EQ(s.boxes[k].cx, 2 * img.boxes[k].cx);
    EXPECT_DOUBLE_EQ(s.boxes[k].cy, 2 * img.boxes[k].cy);
    EXPECT_DOUBLE_EQ(s.boxes[k].w, 2 * img.boxes[k].w);
    EXPECT_DOUBLE_EQ(s.boxes[k].h, 2 * img.boxes[k].h);
  }
}

TEST(Augment, JitterStaysUnderCapAndKeepsAFace) {
  auto spec = default_spec(21);
  const auto data = generate(spec, 50);
  AugmentConfig cfg;
  cfg.jitter_factors = {0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  cfg.max_side = 160;
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto out = augment(data[static_cast<std::size_t>(i) % data.size()], cfg, rng);
    EXPECT_LE(std::max(out.image.shape().h, out.image.shape().w), cfg.max_side);
    EXPECT_GE(out.boxes.size(), 1u);
    EXPECT_EQ(out.boxes.size(), out.difficulty.size());
  }
}

TEST(Augment, TemplateCentroidInsideBox) {
  auto spec = default_spec(31);
  spec.background_family = 1;
  spec.faces_min = spec.faces_max = 1;
  const auto data = generate(spec, 40);
  AugmentConfig cfg;
  cfg.jitter_factors = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  cfg.max_side = 192;
  Rng rng(9);
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto out = augment(data[static_cast<std::size_t>(i) % data.size()], cfg, rng);
    ASSERT_EQ(out.boxes.size(), 1u);
    const auto c = foreground_centroid(out.image);
    ASSERT_TRUE(c.has_value());
    const auto& b = out.boxes[0];
    EXPECT_TRUE(c->first >= b.x0() && c->first <= b.x1() && c->second >= b.y0() && c->second <= b.y1())
        << "iteration " << i;
    ++checked;
  }
  EXPECT_EQ(checked, 1000);
}

TEST(Augment, DefaultConfigIsIdentityGeometryAtFactorOne) {
  const auto img = generate(default_spec(), 1)[0];
  AugmentConfig cfg;
  cfg.flip_prob = 0;
  cfg.jitter_factors = {1.0};
  Rng rng(1);
  const auto out = augment(img, cfg, rng);
  EXPECT_TRUE(same_pixels(img.image, out.image));
}

TEST(Dataset, RoundTripIsExact) {
  const auto dir = std::filesystem::temp_directory_path() / "patchforge_test_dataset";
  std::filesystem::remove_all(dir);
  const auto data = generate(default_spec(), 5);
  write_dataset(dir, data);
  EXPECT_TRUE(std::filesystem::exists(dir / "img_000004.ppm"));
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_TRUE(same_pixels(data[i].image, back[i].image));
    ASSERT_EQ(back[i].boxes.size(), data[i].boxes.size());
    for (std::size_t k = 0; k < data[i].boxes.size(); ++k) {
      EXPECT_EQ(back[i].boxes[k], data[i].boxes[k]);
      EXPECT_EQ(back[i].difficulty[k], data[i].difficulty[k]);
    }
  }
  EXPECT_EQ(read_dataset(dir, 2).size(), 2u);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, MissingDirectoryIsIoError) {
  EXPECT_THROW(read_dataset("/nonexistent/patchforge"), IoError);
}
