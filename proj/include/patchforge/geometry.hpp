#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "patchforge/error.hpp"

// Coordinates are continuous pixels: origin at the top-left image corner, x to
// the right, y downward. Pixel (i, j) covers [j, j+1) x [i, i+1).
namespace patchforge {

/// Axis-aligned box stored in center form.
struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const noexcept { return cx - 0.5 * w; }
  double y0() const noexcept { return cy - 0.5 * h; }
  double x1() const noexcept { return cx + 0.5 * w; }
  double y1() const noexcept { return cy + 0.5 * h; }
  double area() const noexcept { return w * h; }
  bool valid() const noexcept { return w > 0.0 && h > 0.0 && std::isfinite(cx) && std::isfinite(cy); }

  static BoundingBox from_corners(double x0, double y0, double x1, double y1) noexcept {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline void require_valid(const BoundingBox& b, std::string_view what = "box") {
  if (!(b.w > 0.0) || !(b.h > 0.0))
    throw InvalidBoxError(std::string(what) + " has non-positive size (w=" + std::to_string(b.w) +
                          ", h=" + std::to_string(b.h) + ")");
}

/// Intersection area of two boxes, 0 when disjoint. No validity check.
inline double intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

/// Intersection over union. Throws InvalidBoxError for non-positive sizes.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  require_valid(a, "iou lhs");
  require_valid(b, "iou rhs");
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

/// Part of `b` inside a width x height image, or nullopt when nothing is left.
inline std::optional<BoundingBox> clip_to_image(const BoundingBox& b, double width, double height) {
  const double x0 = std::max(0.0, b.x0());
  const double y0 = std::max(0.0, b.y0());
  const double x1 = std::min(width, b.x1());
  const double y1 = std::min(height, b.y1());
  if (x1 <= x0 || y1 <= y0) return std::nullopt;
  return BoundingBox::from_corners(x0, y0, x1, y1);
}

// ---------------------------------------------------------------------------
// Anchors

struct AnchorGrid {
  int stride = 4;
  std::vector<double> scales{16.0, 32.0, 64.0, 128.0};
  int feature_height = 0;
  int feature_width = 0;

  std::size_t num_scales() const noexcept { return scales.size(); }
  std::size_t size() const noexcept {
    return static_cast<std::size_t>(feature_height) * static_cast<std::size_t>(feature_width) * scales.size();
  }
  /// Row-major cell order, then ascending scale within a cell.
  std::size_t index(int row, int col, std::size_t scale) const noexcept {
    return (static_cast<std::size_t>(row) * static_cast<std::size_t>(feature_width) + static_cast<std::size_t>(col)) *
               scales.size() +
           scale;
  }
  double center_x(int col) const noexcept { return col * stride + 0.5 * stride; }
  double center_y(int row) const noexcept { return row * stride + 0.5 * stride; }

  void validate() const {
    validate_scales();
    if (feature_height < 1 || feature_width < 1) throw ConfigError("anchor grid feature dims must be >= 1");
  }

  void validate_scales() const {
    if (scales.empty()) throw ConfigError("anchor grid has no scales");
    if (stride < 1) throw ConfigError("anchor stride must be >= 1");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (!(scales[i] > 0.0)) throw ConfigError("anchor scales must be positive");
      if (i > 0 && !(scales[i] > scales[i - 1])) throw ConfigError("anchor scales must be strictly ascending");
    }
  }
};

inline std::vector<BoundingBox> tile_anchors(const AnchorGrid& grid) {
  grid.validate();
  std::vector<BoundingBox> out;
  out.reserve(grid.size());
  for (int i = 0; i < grid.feature_height; ++i)
    for (int j = 0; j < grid.feature_width; ++j)
      for (double s : grid.scales) out.push_back({grid.center_x(j), grid.center_y(i), s, s});
  return out;
}

enum class AnchorKind { Negative, Ignore, Positive };

struct AnchorLabel {
  AnchorKind kind = AnchorKind::Negative;
  int gt = -1;          ///< matched gt for positives, argmax gt otherwise (-1 without gt)
  double max_iou = 0.0;
};

/// Positive iff max IoU over gt > pos_thresh (argmax gt, lowest index on ties),
/// negative iff max IoU < neg_thresh, ignore otherwise.
inline std::vector<AnchorLabel> match_anchors(std::span<const BoundingBox> anchors, std::span<const BoundingBox> gt,
                                              double pos_thresh = 0.6, double neg_thresh = 0.4) {
  if (!(neg_thresh >= 0.0 && neg_thresh < pos_thresh && pos_thresh <= 1.0))
    throw ConfigError("match_anchors requires 0 <= neg_thresh < pos_thresh <= 1");
  for (const auto& g : gt) require_valid(g, "gt box");
  std::vector<AnchorLabel> labels(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    require_valid(anchors[i], "anchor");
    AnchorLabel& l = labels[i];
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(anchors[i], gt[j]);
      if (l.gt < 0 || v > l.max_iou) {
        l.max_iou = v;
        l.gt = static_cast<int>(j);
      }
    }
    if (gt.empty())
      l.kind = AnchorKind::Negative;
    else if (l.max_iou > pos_thresh)
      l.kind = AnchorKind::Positive;
    else if (l.max_iou < neg_thresh)
      l.kind = AnchorKind::Negative;
    else
      l.kind = AnchorKind::Ignore;
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Patch placement

enum class PatchLocation { Top, CenterTopMid, Center, CenterBottomMid, Bottom };

inline constexpr PatchLocation kAllLocations[] = {PatchLocation::Top, PatchLocation::CenterTopMid,
                                                  PatchLocation::Center, PatchLocation::CenterBottomMid,
                                                  PatchLocation::Bottom};

inline std::string_view to_string(PatchLocation loc) noexcept {
  switch (loc) {
    case PatchLocation::Top: return "top";
    case PatchLocation::CenterTopMid: return "center_top_mid";
    case PatchLocation::Center: return "center";
    case PatchLocation::CenterBottomMid: return "center_bottom_mid";
    case PatchLocation::Bottom: return "bottom";
  }
  return "top";
}

inline PatchLocation parse_location(std::string_view s) {
  for (auto loc : kAllLocations)
    if (to_string(loc) == s) return loc;
  throw ConfigError("unknown patch location '" + std::string(s) + "'");
}

struct PatchPlacement {
  double alpha = 0.5;
  PatchLocation location = PatchLocation::Top;

  /// Patch side for a target box: alpha * sqrt(w * h).
  double side(const BoundingBox& gt) const noexcept { return alpha * std::sqrt(gt.w * gt.h); }

  /// Patch center relative to the gt box's top-left corner.
  std::pair<double, double> offset(const BoundingBox& gt) const noexcept {
    const double half = 0.5 * side(gt);
    const double top = half;
    const double center = 0.5 * gt.h;
    const double bottom = gt.h - half;
    double dy = top;
    switch (location) {
      case PatchLocation::Top: dy = top; break;
      case PatchLocation::CenterTopMid: dy = 0.5 * (top + center); break;
      case PatchLocation::Center: dy = center; break;
      case PatchLocation::CenterBottomMid: dy = 0.5 * (center + bottom); break;
      case PatchLocation::Bottom: dy = bottom; break;
    }
    return {0.5 * gt.w, dy};
  }
};

/// Square region the patch occupies on `gt`. May extend past the image; clipping
/// happens at paste time.
inline BoundingBox place_patch(const BoundingBox& gt, const PatchPlacement& placement, double scale_fraction = 1.0) {
  require_valid(gt, "gt box");
  const double a = placement.alpha * scale_fraction;
  if (!(a > 0.0 && a < 1.0)) throw ConfigError("alpha * scale_fraction must lie in (0, 1)");
  const auto [dx, dy] = placement.offset(gt);
  const double side = scale_fraction * placement.side(gt);
  return {gt.x0() + dx, gt.y0() + dy, side, side};
}

// ---------------------------------------------------------------------------
// Non-maximum suppression

struct ScoredBox {
  BoundingBox box;
  double score = 0.0;
};

/// Greedy NMS. Returns kept input indices by descending score (ties by index).
/// A box is dropped iff its IoU with an already kept box exceeds iou_thresh.
inline std::vector<std::size_t> nms_indices(std::span<const ScoredBox> dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(dets[idx].box, dets[k].box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

inline std::vector<ScoredBox> nms(std::span<const ScoredBox> dets, double iou_thresh = 0.5) {
  std::vector<ScoredBox> out;
  for (std::size_t i : nms_indices(dets, iou_thresh)) out.push_back(dets[i]);
  return out;
}

}  // namespace patchforge
