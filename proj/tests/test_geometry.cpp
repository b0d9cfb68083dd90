#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "patchforge/geometry.hpp"
#include "patchforge/rng.hpp"
#include "support/oracles.hpp"

using namespace patchforge;

TEST(Iou, IdentityIsOne) {
  const BoundingBox a{1, 1, 2, 2};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
}

TEST(Iou, PartialOverlap) {
  // corners [0,2]x[0,2] and [1,3]x[1,3]: intersection 1, union 7
  EXPECT_NEAR(iou({1, 1, 2, 2}, {2, 2, 2, 2}), 1.0 / 7.0, 1e-12);
}

TEST(Iou, DisjointIsZero) { EXPECT_EQ(iou({0, 0, 2, 2}, {10, 10, 2, 2}), 0.0); }

TEST(Iou, RejectsDegenerateBoxes) {
  EXPECT_THROW(iou({0, 0, 0, 2}, {0, 0, 2, 2}), InvalidBoxError);
  EXPECT_THROW(iou({0, 0, 2, 2}, {0, 0, 2, -1}), InvalidBoxError);
}

TEST(Iou, CornerFormRoundTrip) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const BoundingBox b{rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(0.1, 300), rng.uniform(0.1, 300)};
    const auto r = BoundingBox::from_corners(b.x0(), b.y0(), b.x1(), b.y1());
    EXPECT_NEAR(r.cx, b.cx, 1e-6 * std::max(1.0, std::abs(b.cx)));
    EXPECT_NEAR(r.w, b.w, 1e-6 * b.w);
    EXPECT_NEAR(r.h, b.h, 1e-6 * b.h);
  }
}

TEST(Iou, PropertiesAndRasterOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto a = support::random_integer_box(rng, 40);
    const auto b = support::random_integer_box(rng, 40);
    const double v = iou(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_DOUBLE_EQ(v, iou(b, a));
    const double raster = support::raster_iou(a, b);
    EXPECT_NEAR(v, raster, 2.0 / std::min(a.area(), b.area()));
    if (a == b) {
      EXPECT_DOUBLE_EQ(v, 1.0);
    }
    if (v == 1.0) {
      EXPECT_EQ(a, b);
    }
  }
}

TEST(TileAnchors, SingleCell) {
  AnchorGrid g;
  g.feature_height = g.feature_width = 1;
  const auto anchors = tile_anchors(g);
  ASSERT_EQ(anchors.size(), 4u);
  const double scales[] = {16, 32, 64, 128};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(anchors[i].cx, 2.0);
    EXPECT_EQ(anchors[i].cy, 2.0);
    EXPECT_EQ(anchors[i].w, scales[i]);
  }
}

TEST(TileAnchors, CountAndOrdering) {
  AnchorGrid g;
  g.feature_height = 2;
  g.feature_width = 3;
  const auto anchors = tile_anchors(g);
  ASSERT_EQ(anchors.size(), 24u);
  EXPECT_EQ(anchors[0], (BoundingBox{2, 2, 16, 16}));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (std::size_t s = 0; s < 4; ++s) {
        const auto& a = anchors[g.index(i, j, s)];
        EXPECT_EQ(a.cx, j * 4 + 2.0);
        EXPECT_EQ(a.cy, i * 4 + 2.0);
        EXPECT_EQ(a.w, g.scales[s]);
      }
}

TEST(TileAnchors, RejectsEmptyScales) {
  AnchorGrid g;
  g.feature_height = g.feature_width = 2;
  g.scales.clear();
  EXPECT_THROW(tile_anchors(g), ConfigError);
}

TEST(MatchAnchors, Basics) {
  const std::vector<BoundingBox> gt{{50, 50, 32, 32}};
  // identical, IoU 0.5 (ignore band), disjoint
  const std::vector<BoundingBox> anchors{{50, 50, 32, 32}, {50, 50, 32, 16}, {200, 200, 16, 16}};
  const auto labels = match_anchors(anchors, gt);
  EXPECT_EQ(labels[0].kind, AnchorKind::Positive);
  EXPECT_EQ(labels[0].gt, 0);
  EXPECT_DOUBLE_EQ(labels[0].max_iou, 1.0);
  EXPECT_NEAR(labels[1].max_iou, 0.5, 1e-12);
  EXPECT_EQ(labels[1].kind, AnchorKind::Ignore);
  EXPECT_EQ(labels[2].kind, AnchorKind::Negative);
}

TEST(MatchAnchors, NoGroundTruthMeansNegative) {
  const std::vector<BoundingBox> anchors{{5, 5, 4, 4}, {8, 8, 16, 16}};
  for (const auto& l : match_anchors(anchors, {})) EXPECT_EQ(l.kind, AnchorKind::Negative);
  for (const auto& l : match_anchors(anchors, {}, 0.6, 0.0)) EXPECT_EQ(l.kind, AnchorKind::Negative);
}

TEST(MatchAnchors, TieGoesToLowestIndex) {
  const std::vector<BoundingBox> gt{{10, 10, 8, 8}, {10, 10, 8, 8}};
  const auto labels = match_anchors(std::vector<BoundingBox>{{10, 10, 8, 8}}, gt);
  EXPECT_EQ(labels[0].gt, 0);
}

TEST(MatchAnchors, RejectsBadThresholds) {
  const std::vector<BoundingBox> a{{0, 0, 1, 1}};
  EXPECT_THROW(match_anchors(a, a, 0.4, 0.6), ConfigError);
  EXPECT_THROW(match_anchors(a, a, 1.2, 0.4), ConfigError);
}

TEST(MatchAnchors, AgreesWithBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int na = static_cast<int>(rng.uniform_int(1, 50));
    const int ng = static_cast<int>(rng.uniform_int(0, 50));
    std::vector<BoundingBox> anchors, gt;
    for (int i = 0; i < na; ++i) anchors.push_back(support::random_box(rng, 64));
    for (int i = 0; i < ng; ++i) gt.push_back(support::random_box(rng, 64));
    const auto got = match_anchors(anchors, gt);
    const auto want = support::brute_force_match(anchors, gt, 0.6, 0.4);
    ASSERT_EQ(got.size(), want.size());
    std::size_t counts[3] = {0, 0, 0};
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(static_cast<int>(got[i].kind), want[i].kind) << "anchor " << i;
      if (want[i].kind == 2) {
        EXPECT_EQ(got[i].gt, want[i].gt);
      }
      ++counts[static_cast<int>(got[i].kind)];
    }
    EXPECT_EQ(counts[0] + counts[1] + counts[2], anchors.size());
  }
}

TEST(PlacePatch, TopCenterAndScale) {
  const BoundingBox gt{100, 100, 64, 100};
  const PatchPlacement top{0.5, PatchLocation::Top};
  const auto r = place_patch(gt, top);
  EXPECT_DOUBLE_EQ(r.w, 40.0);
  EXPECT_DOUBLE_EQ(r.h, 40.0);
  EXPECT_DOUBLE_EQ(r.cx, 100.0);
  EXPECT_DOUBLE_EQ(r.cy, 70.0);

  const auto c = place_patch(gt, {0.5, PatchLocation::Center});
  EXPECT_DOUBLE_EQ(c.cx, 100.0);
  EXPECT_DOUBLE_EQ(c.cy, 100.0);
  EXPECT_DOUBLE_EQ(c.w, 40.0);

  const auto half = place_patch(gt, top, 0.5);
  EXPECT_DOUBLE_EQ(half.w, 20.0);
  EXPECT_DOUBLE_EQ(half.cx, r.cx);
  EXPECT_DOUBLE_EQ(half.cy, r.cy);
}

TEST(PlacePatch, FiveLocationsTopToBottom) {
  const BoundingBox gt{100, 100, 64, 100};
  // top 70, center 100, bottom 130; mid variants halfway
  const double expected[] = {70, 85, 100, 115, 130};
  int i = 0;
  for (auto loc : kAllLocations) EXPECT_DOUBLE_EQ(place_patch(gt, {0.5, loc}).cy, expected[i++]);
}

TEST(PlacePatch, SideDependsOnlyOnArea) {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const BoundingBox gt{rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(1, 90), rng.uniform(1, 90)};
    const BoundingBox swapped{gt.cx, gt.cy, gt.h, gt.w};
    EXPECT_DOUBLE_EQ(place_patch(gt, {}).w, place_patch(swapped, {}).w);
  }
}

TEST(PlacePatch, Errors) {
  EXPECT_THROW(place_patch({0, 0, 0, 10}, {}), InvalidBoxError);
  EXPECT_THROW(place_patch({0, 0, 10, 10}, {0.5, PatchLocation::Top}, 2.0), ConfigError);
}

TEST(Nms, IdenticalBoxesKeepHighest) {
  const std::vector<ScoredBox> d{{{10, 10, 8, 8}, 0.8}, {{10, 10, 8, 8}, 0.9}};
  const auto kept = nms_indices(d, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0], 1u);
}

TEST(Nms, DisjointBoxesBothKept) {
  const std::vector<ScoredBox> d{{{10, 10, 8, 8}, 0.8}, {{50, 50, 8, 8}, 0.9}};
  EXPECT_EQ(nms(d, 0.5).size(), 2u);
}

TEST(Nms, ChainKeepsEnds) {
  // A-B and B-C at IoU 2/3, A-C at 3/7 (two disjoint boxes cannot both reach 0.6 with B).
  const BoundingBox A{5, 5, 10, 10}, B{7, 5, 10, 10}, C{9, 5, 10, 10};
  ASSERT_GT(iou(A, B), 0.5);
  ASSERT_GT(iou(B, C), 0.5);
  ASSERT_LT(iou(A, C), 0.5);
  const std::vector<ScoredBox> d{{A, 0.9}, {B, 0.8}, {C, 0.7}};
  const auto kept = nms_indices(d, 0.5);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0], 0u);
  EXPECT_EQ(kept[1], 2u);
}

TEST(Nms, AgreesWithQuadraticReference) {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(0, 40));
    std::vector<ScoredBox> d;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) scores.push_back((i + 1.0) / (n + 1.0));
    rng.shuffle(scores);
    for (int i = 0; i < n; ++i) d.push_back(ScoredBox{support::random_box(rng, 48), scores[static_cast<std::size_t>(i)]});
    const double thresh = rng.uniform(0.2, 0.8);
    EXPECT_EQ(nms_indices(d, thresh), support::reference_nms(d, thresh));
  }
}
