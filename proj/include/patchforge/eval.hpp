#pragma once

// Attack evaluation: precision/recall at a score threshold, threshold-F_beta
// curves and their area, the patch criterion, partial patches and CSV export.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "patchforge/autodiff.hpp"
#include "patchforge/detector.hpp"
#include "patchforge/error.hpp"
#include "patchforge/geometry.hpp"
#include "patchforge/parallel.hpp"
#include "patchforge/synthdata.hpp"

namespace patchforge {

struct GroundTruth {
  std::vector<BoundingBox> boxes;
  std::vector<Difficulty> difficulty;
};

inline std::vector<GroundTruth> ground_truth(const std::vector<LabeledImage>& data) {
  std::vector<GroundTruth> out;
  out.reserve(data.size());
  for (const auto& d : data) out.push_back({d.boxes, d.difficulty});
  return out;
}

enum class Bucket { Easy, Medium, Hard, All };
inline constexpr Bucket kBuckets[] = {Bucket::Easy, Bucket::Medium, Bucket::Hard, Bucket::All};

inline const char* to_string(Bucket b) {
  switch (b) {
    case Bucket::Easy: return "easy";
    case Bucket::Medium: return "medium";
    case Bucket::Hard: return "hard";
    case Bucket::All: return "all";
  }
  return "?";
}

inline bool in_bucket(Difficulty d, Bucket b) { return b == Bucket::All || static_cast<int>(d) == static_cast<int>(b); }

// ---------------------------------------------------------------------------
// Matching

/// Detection indices by descending logit margin, ties by index. The margin
/// orders exactly like the score but does not saturate.
inline std::vector<std::size_t> ranking(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].logit_margin > dets[b].logit_margin; });
  return order;
}

/// Greedy assignment in ranking order: a detection is a true positive when its
/// highest-IoU gt reaches iou_thresh and is still unmatched; otherwise it is a
/// false positive (duplicates included). Returns the matched gt per detection
/// or -1. The decision for a detection depends only on higher-ranked ones, so
/// matching any ranking prefix gives a prefix of this result.
inline std::vector<int> greedy_match(const std::vector<Detection>& dets, const std::vector<BoundingBox>& gt,
                                     double iou_thresh = 0.5) {
  std::vector<int> match(dets.size(), -1);
  std::vector<char> used(gt.size(), 0);
  for (std::size_t i : ranking(dets)) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(dets[i].box, gt[g]);
      if (best < 0 || v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh && !used[static_cast<std::size_t>(best)]) {
      used[static_cast<std::size_t>(best)] = 1;
      match[i] = best;
    }
  }
  return match;
}

struct PR {
  double precision = 1.0;
  double recall = 1.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t num_gt = 0;
};

inline PR make_pr(std::size_t tp, std::size_t fp, std::size_t num_gt) {
  PR r;
  r.tp = tp, r.fp = fp, r.num_gt = num_gt;
  r.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  r.recall = num_gt == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(num_gt);
  return r;
}

struct BucketPR {
  std::array<PR, 4> buckets;
  const PR& operator[](Bucket b) const { return buckets[static_cast<std::size_t>(b)]; }
  const PR& all() const { return (*this)[Bucket::All]; }
};

struct MatchProtocol {
  double iou = 0.5;
};

/// Per-image outcome of every detection at or above a margin floor.
struct ScoredOutcome {
  double margin;
  double score;
  int gt_bucket;  ///< difficulty of the matched gt, or -1 for a false positive
};

inline std::vector<ScoredOutcome> outcomes(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                                           const MatchProtocol& protocol) {
  if (dets.size() != gts.size()) throw ConfigError("detections and ground truth cover different image counts");
  std::vector<ScoredOutcome> out;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto match = greedy_match(dets[i], gts[i].boxes, protocol.iou);
    for (std::size_t k = 0; k < dets[i].size(); ++k) {
      const int m = match[k];
      out.push_back({dets[i][k].logit_margin, dets[i][k].score,
                     m < 0 ? -1 : static_cast<int>(gts[i].difficulty[static_cast<std::size_t>(m)])});
    }
  }
  return out;
}

inline std::array<std::size_t, 4> gt_counts(const std::vector<GroundTruth>& gts) {
  std::array<std::size_t, 4> n{};
  for (const auto& g : gts)
    for (auto d : g.difficulty) {
      ++n[static_cast<std::size_t>(d)];
      ++n[3];
    }
  return n;
}

/// Precision and recall over detections with score >= delta. Within a
/// difficulty bucket, detections matched to gt of another bucket are ignored;
/// false positives count in every bucket. Precision is 1 with no detections,
/// recall is 1 with no gt.
inline BucketPR precision_recall(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                                 const MatchProtocol& protocol, double delta) {
  std::vector<std::vector<Detection>> kept(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      if (d.score >= delta) kept[i].push_back(d);
  std::array<std::size_t, 4> tp{};
  std::size_t fp = 0;
  for (const auto& o : outcomes(kept, gts, protocol)) {
    if (o.gt_bucket < 0) {
      ++fp;
    } else {
      ++tp[static_cast<std::size_t>(o.gt_bucket)];
      ++tp[3];
    }
  }
  const auto n = gt_counts(gts);
  BucketPR r;
  for (std::size_t b = 0; b < 4; ++b) r.buckets[b] = make_pr(tp[b], fp, n[b]);
  return r;
}

/// (1 + b^2) / (b^2 / P + 1 / R); zero when P or R is zero.
inline double f_beta(double precision, double recall, double beta) {
  if (!(beta >= 0)) throw ConfigError("f_beta: beta must be non-negative");
  if (precision <= 0 || recall <= 0) return 0.0;
  const double b2 = beta * beta;
  return (1 + b2) / (b2 / precision + 1 / recall);
}

/// Trapezoid area under (x, y), divided by the x extent so the axis is [0, 1].
/// A single point yields its y value.
inline double normalized_area(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.empty() || x.size() != y.size()) throw ConfigError("threshold grid is empty or mismatched");
  if (x.size() == 1) return y[0];
  double area = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (!(x[i] > x[i - 1])) throw ConfigError("threshold grid must be strictly increasing");
    area += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2;
  }
  return area / (x.back() - x.front());
}

/// Evenly spaced margins over the observed range; a single point when the range is empty.
inline std::vector<double> threshold_grid(const std::vector<std::vector<Detection>>& dets, int points) {
  if (points < 1) throw ConfigError("threshold grid needs at least one point");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& img : dets)
    for (const auto& d : img) lo = std::min(lo, d.logit_margin), hi = std::max(hi, d.logit_margin);
  if (!std::isfinite(lo)) return {0.0};
  if (!(hi > lo) || points == 1) return {lo};
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) grid[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1);
  grid.back() = hi;
  return grid;
}

struct CurvePoint {
  double threshold;
  double precision;
  double recall;
  double f_beta;
};

struct Curve {
  double beta = 0;
  std::vector<CurvePoint> points;
  double af_beta = 0;
};

/// Precision/recall for every grid threshold t over detections with margin >= t.
inline std::vector<PR> pr_over_grid(const std::vector<ScoredOutcome>& pooled, const std::array<std::size_t, 4>& num_gt,
                                    const std::vector<double>& grid, Bucket bucket) {
  std::vector<ScoredOutcome> sorted = pooled;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.margin > b.margin; });
  const auto bi = static_cast<std::size_t>(bucket);
  std::vector<PR> out(grid.size());
  std::size_t k = 0, tp = 0, fp = 0;
  for (std::size_t gi = grid.size(); gi-- > 0;) {
    while (k < sorted.size() && sorted[k].margin >= grid[gi]) {
      const int b = sorted[k].gt_bucket;
      if (b < 0) ++fp;
      else if (bucket == Bucket::All || static_cast<std::size_t>(b) == bi) ++tp;
      ++k;
    }
    out[gi] = make_pr(tp, fp, num_gt[bi]);
  }
  return out;
}

inline Curve make_curve(const std::vector<PR>& prs, const std::vector<double>& grid, double beta) {
  Curve c;
  c.beta = beta;
  std::vector<double> f;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double fb = f_beta(prs[i].precision, prs[i].recall, beta);
    c.points.push_back({grid[i], prs[i].precision, prs[i].recall, fb});
    f.push_back(fb);
  }
  c.af_beta = normalized_area(grid, f);
  return c;
}

/// Threshold-F_beta curve on the logit-margin axis and its normalized area.
inline Curve af_beta(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                     const MatchProtocol& protocol, double beta, const std::vector<double>& grid, Bucket bucket = Bucket::All) {
  if (grid.empty()) throw ConfigError("af_beta: empty threshold grid");
  return make_curve(pr_over_grid(outcomes(dets, gts, protocol), gt_counts(gts), grid, bucket), grid, beta);
}

/// All-point interpolated average precision over the margin ranking.
inline double average_precision(const std::vector<std::vector<Detection>>& dets, const std::vector<GroundTruth>& gts,
                                const MatchProtocol& protocol = {}) {
  auto pooled = outcomes(dets, gts, protocol);
  std::stable_sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.margin > b.margin; });
  const double num_gt = static_cast<double>(gt_counts(gts)[3]);
  if (num_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  double tp = 0, fp = 0;
  for (const auto& o : pooled) {
    (o.gt_bucket >= 0 ? tp : fp) += 1;
    prec.push_back(tp / (tp + fp));
    rec.push_back(tp / num_gt);
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, prev = 0;
  for (std::size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev) * prec[i];
    prev = rec[i];
  }
  return ap;
}

// ---------------------------------------------------------------------------
// Patch criterion

struct Criterion2Result {
  bool pass = true;
  std::vector<Detection> violations;
};

/// Fails when a detection scoring above delta overlaps a pasted region with IoU above iou_thresh.
inline Criterion2Result criterion2_check(const std::vector<Detection>& dets, const std::vector<BoundingBox>& regions,
                                         double delta, double iou_thresh = 0.3) {
  Criterion2Result r;
  for (const auto& d : dets) {
    if (!(d.score > delta)) continue;
    for (const auto& p : regions)
      if (iou(d.box, p) > iou_thresh) {
        r.violations.push_back(d);
        break;
      }
  }
  r.pass = r.violations.empty();
  return r;
}

// ---------------------------------------------------------------------------
// Partial patches

enum class PartialMode { None, HalfTop, HalfBottom, HalfLeft, HalfRight, ThirdTop, ThirdBottom, ThirdLeft, ThirdRight };

inline constexpr PartialMode kPartialModes[] = {PartialMode::HalfTop,   PartialMode::HalfBottom, PartialMode::HalfLeft,
                                                PartialMode::HalfRight, PartialMode::ThirdTop,   PartialMode::ThirdBottom,
                                                PartialMode::ThirdLeft, PartialMode::ThirdRight};

inline const char* to_string(PartialMode m) {
  switch (m) {
    case PartialMode::None: return "none";
    case PartialMode::HalfTop: return "half-top";
    case PartialMode::HalfBottom: return "half-bottom";
    case PartialMode::HalfLeft: return "half-left";
    case PartialMode::HalfRight: return "half-right";
    case PartialMode::ThirdTop: return "third-top";
    case PartialMode::ThirdBottom: return "third-bottom";
    case PartialMode::ThirdLeft: return "third-left";
    case PartialMode::ThirdRight: return "third-right";
  }
  return "?";
}

inline PartialMode parse_partial_mode(const std::string& s) {
  if (s == "none") return PartialMode::None;
  for (auto m : kPartialModes)
    if (s == to_string(m)) return m;
  throw ConfigError("unknown partial mode '" + s + "'");
}

/// Replaces the removed half or third (named by the mode) with `fill`.
/// HalfTop on 128 rows keeps rows [64, 128).
inline Tensor<float> apply_partial(const Tensor<float>& patch, PartialMode mode, float fill = 0.5f) {
  if (mode == PartialMode::None) return patch;
  Tensor<float> out = patch;
  const Shape s = patch.shape();
  const bool half = mode == PartialMode::HalfTop || mode == PartialMode::HalfBottom || mode == PartialMode::HalfLeft ||
                    mode == PartialMode::HalfRight;
  const int div = half ? 2 : 3;
  const int rows = s.h / div, cols = s.w / div;
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        bool removed = false;
        switch (mode) {
          case PartialMode::HalfTop:
          case PartialMode::ThirdTop: removed = y < rows; break;
          case PartialMode::HalfBottom:
          case PartialMode::ThirdBottom: removed = y >= s.h - rows; break;
          case PartialMode::HalfLeft:
          case PartialMode::ThirdLeft: removed = x < cols; break;
          case PartialMode::HalfRight:
          case PartialMode::ThirdRight: removed = x >= s.w - cols; break;
          case PartialMode::None: break;
        }
        if (removed) out.at(0, c, y, x) = fill;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Running a detector over a dataset

struct EvalSettings {
  double delta = 0.99;
  double nms_thresh = 0.5;
  double match_iou = 0.5;
  double criterion2_iou = 0.3;
  std::vector<double> betas{0.001, 0.01, 0.1, 0.5};
  int grid_points = 512;
  /// Detections below this score are not kept for curves.
  double curve_min_score = 0.01;
  bool pyramid = false;
  /// Criterion 1 holds when recall at delta is at most this value.
  double criterion1_max_recall = 0.5;

  void validate() const {
    if (!(delta > 0 && delta < 1)) throw ConfigError("eval.delta must lie in (0, 1)");
    if (!(curve_min_score >= 0 && curve_min_score <= delta)) throw ConfigError("eval.curve_min_score must lie in [0, delta]");
    if (grid_points < 1) throw ConfigError("eval.grid_points must be >= 1");
    for (double b : betas)
      if (!(b >= 0)) throw ConfigError("eval.betas must be non-negative");
  }
};

struct PatchSetup {
  Tensor<float> patch;
  PatchPlacement placement;
  double scale_fraction = 1.0;
  PartialMode partial = PartialMode::None;
};

/// Regions where the patch goes on each gt box.
inline std::vector<BoundingBox> patch_regions(const std::vector<BoundingBox>& gt, const PatchPlacement& placement,
                                              double scale_fraction = 1.0) {
  std::vector<BoundingBox> out;
  out.reserve(gt.size());
  for (const auto& b : gt) out.push_back(place_patch(b, placement, scale_fraction));
  return out;
}

struct PastedImage {
  Tensor<float> image;
  std::vector<BoundingBox> drawn;  ///< clipped regions actually covered
};

inline PastedImage paste_on_faces(const Tensor<float>& image, const Tensor<float>& patch, const std::vector<BoundingBox>& gt,
                                  const PatchPlacement& placement, double scale_fraction = 1.0) {
  ad::Graph<float> g;
  const auto regions = patch_regions(gt, placement, scale_fraction);
  const auto r = ad::paste_patches(g.constant(image), g.constant(patch), std::span<const BoundingBox>(regions));
  PastedImage out{r.image.value(), {}};
  for (const auto& d : r.drawn)
    if (d) out.drawn.push_back(*d);
  return out;
}

struct EvalRun {
  std::vector<std::vector<Detection>> detections;  ///< post-NMS, score >= curve_min_score
  std::vector<std::vector<BoundingBox>> regions;   ///< pasted regions per image
  std::vector<GroundTruth> gt;
  std::string detector_tag;
};

inline EvalRun run_detector(const DetectorModel& model, const std::vector<LabeledImage>& data,
                            const std::optional<PatchSetup>& patch, const EvalSettings& settings) {
  settings.validate();
  EvalRun run;
  run.detections.resize(data.size());
  run.regions.resize(data.size());
  run.gt = ground_truth(data);
  run.detector_tag = model.tag();
  std::optional<Tensor<float>> pixels;
  if (patch) pixels = apply_partial(patch->patch, patch->partial);
  DetectOptions opt;
  opt.score_thresh = settings.curve_min_score;
  opt.nms_thresh = settings.nms_thresh;
  opt.pyramid = settings.pyramid;
  parallel_for(data.size(), [&](std::size_t i) {
    if (pixels) {
      auto pasted = paste_on_faces(data[i].image, *pixels, data[i].boxes, patch->placement, patch->scale_fraction);
      run.regions[i] = std::move(pasted.drawn);
      run.detections[i] = detect(model, pasted.image, opt);
    } else {
      run.detections[i] = detect(model, data[i].image, opt);
    }
  });
  return run;
}

struct MetricsReport {
  BucketPR at_delta;
  /// curves[bucket][beta index]
  std::array<std::vector<Curve>, 4> curves;
  std::array<bool, 4> criterion1{};
  std::size_t criterion2_failed_images = 0;
  double criterion2_pass_rate = 1.0;
  std::size_t criterion2_violations = 0;
  std::vector<double> betas;
  std::string detector_tag;
  std::string patch_tag;

  double af(Bucket b, std::size_t beta_index) const { return curves[static_cast<std::size_t>(b)][beta_index].af_beta; }
};

inline MetricsReport evaluate(const EvalRun& run, const EvalSettings& settings) {
  settings.validate();
  const MatchProtocol protocol{settings.match_iou};
  MetricsReport rep;
  rep.betas = settings.betas;
  rep.detector_tag = run.detector_tag;
  rep.at_delta = precision_recall(run.detections, run.gt, protocol, settings.delta);
  const auto grid = threshold_grid(run.detections, settings.grid_points);
  const auto pooled = outcomes(run.detections, run.gt, protocol);
  const auto num_gt = gt_counts(run.gt);
  for (auto b : kBuckets) {
    const auto bi = static_cast<std::size_t>(b);
    const auto prs = pr_over_grid(pooled, num_gt, grid, b);
    for (double beta : settings.betas) rep.curves[bi].push_back(make_curve(prs, grid, beta));
    rep.criterion1[bi] = rep.at_delta[b].recall <= settings.criterion1_max_recall;
  }
  for (std::size_t i = 0; i < run.detections.size(); ++i) {
    const auto c2 = criterion2_check(run.detections[i], run.regions[i], settings.delta, settings.criterion2_iou);
    rep.criterion2_violations += c2.violations.size();
    rep.criterion2_failed_images += !c2.pass;
  }
  if (!run.detections.empty())
    rep.criterion2_pass_rate = 1.0 - static_cast<double>(rep.criterion2_failed_images) / static_cast<double>(run.detections.size());
  return rep;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string beta_column(double beta) { return "af_beta_" + format_number(beta); }

inline constexpr const char* kCsvConventions =
    "# precision=1 when no detections; recall=1 when no gt; f_beta=(1+b^2)/(b^2/P+1/R), 0 when P or R is 0; "
    "thresholds are logit margins s_p-s_n; af_beta is the trapezoid area over the grid normalized to [0,1]";

inline void write_curve_csv(const std::filesystem::path& path, const Curve& c) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kCsvConventions << "\n# beta=" << format_number(c.beta) << " af_beta=" << format_number(c.af_beta) << "\n";
  out << "threshold,precision,recall,f_beta\n";
  for (const auto& p : c.points)
    out << format_number(p.threshold) << ',' << format_number(p.precision) << ',' << format_number(p.recall) << ','
        << format_number(p.f_beta) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_summary_csv(const std::filesystem::path& path, const MetricsReport& rep) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << kCsvConventions << "\n# criterion1=1 when recall_at_delta <= target; criterion2 is the fraction of images "
      << "with no detection above delta overlapping a pasted region\n";
  out << "# detector=" << rep.detector_tag << (rep.patch_tag.empty() ? "" : " patch=" + rep.patch_tag) << "\n";
  out << "split,precision_at_delta,recall_at_delta";
  for (double b : rep.betas) out << ',' << beta_column(b);
  out << ",criterion1,criterion2\n";
  for (auto b : kBuckets) {
    const auto bi = static_cast<std::size_t>(b);
    out << to_string(b) << ',' << format_number(rep.at_delta[b].precision) << ',' << format_number(rep.at_delta[b].recall);
    for (std::size_t k = 0; k < rep.betas.size(); ++k) out << ',' << format_number(rep.af(b, k));
    out << ',' << (rep.criterion1[bi] ? 1 : 0) << ',' << format_number(rep.criterion2_pass_rate) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace patchforge
