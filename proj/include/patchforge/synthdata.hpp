#pragma once

// Procedural scenes with synthetic faces: an oval with two eye blobs and a
// mouth bar over a textured background.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchforge/autodiff/image_ops.hpp"
#include "patchforge/error.hpp"
#include "patchforge/geometry.hpp"
#include "patchforge/parallel.hpp"
#include "patchforge/ppm.hpp"
#include "patchforge/rng.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

enum class Difficulty { Easy, Medium, Hard };

inline const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Medium: return "medium";
    case Difficulty::Hard: return "hard";
  }
  return "?";
}

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "medium") return Difficulty::Medium;
  if (s == "hard") return Difficulty::Hard;
  throw ConfigError("unknown difficulty '" + s + "'");
}

struct SceneSpec {
  int image_height = 128;
  int image_width = 128;
  int faces_min = 1;
  int faces_max = 3;
  /// Range of the geometric side sqrt(w h) of face boxes, in pixels.
  double face_min = 16;
  double face_max = 72;
  int template_family = 0;    ///< 0: oval, eyes, mouth
  int background_family = 0;  ///< 0: value noise, rectangles, distractor blobs; 1: flat gray
  std::uint64_t seed = 0;
  double max_pair_iou = 0.3;
  /// Faces are resampled until some anchor of `anchors` reaches this IoU (0 disables).
  double min_anchor_iou = 0.65;
  AnchorGrid anchors;
  int max_attempts = 100;

  void validate() const {
    if (image_height < 8 || image_width < 8) throw ConfigError("image must be at least 8x8");
    if (faces_min < 0 || faces_max < faces_min) throw ConfigError("faces per image range is invalid");
    if (!(face_min >= 12 && face_max <= 160 && face_min < face_max))
      throw ConfigError("face side range must lie inside [12, 160] and be non-empty");
    if (face_max > std::min(image_height, image_width)) throw ConfigError("face_max exceeds the image size");
    if (template_family != 0) throw ConfigError("unknown template family");
    if (background_family != 0 && background_family != 1) throw ConfigError("unknown background family");
    if (max_pair_iou < 0 || max_pair_iou > 1) throw ConfigError("max_pair_iou must lie in [0, 1]");
    if (max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
    if (min_anchor_iou > 0) anchors.validate_scales();
  }
};

/// Scale terciles on a log axis over the face range; the smallest third is Hard.
inline Difficulty difficulty_of(const BoundingBox& b, const SceneSpec& spec) {
  const double t = std::log(std::sqrt(b.w * b.h) / spec.face_min) / std::log(spec.face_max / spec.face_min);
  if (t < 1.0 / 3.0) return Difficulty::Hard;
  if (t < 2.0 / 3.0) return Difficulty::Medium;
  return Difficulty::Easy;
}

struct LabeledImage {
  Tensor<float> image;  ///< (1, 3, H, W) in [0, 1]
  std::vector<BoundingBox> boxes;
  std::vector<Difficulty> difficulty;
};

namespace detail {

using Rgb = std::array<double, 3>;

struct FaceParams {
  double cx, cy;
  double a, b;  ///< semi-axes of the oval before rotation
  double theta;
  Rgb skin, eye, mouth;

  BoundingBox box() const {
    const double c = std::cos(theta), s = std::sin(theta);
    return {cx, cy, 2 * std::sqrt(a * a * c * c + b * b * s * s), 2 * std::sqrt(a * a * s * s + b * b * c * c)};
  }
};

inline double best_anchor_iou(const BoundingBox& box, const AnchorGrid& g, int height, int width) {
  const int fh = height / g.stride, fw = width / g.stride;
  double best = 0;
  const int j0 = static_cast<int>(std::floor((box.cx - g.stride / 2.0) / g.stride));
  const int i0 = static_cast<int>(std::floor((box.cy - g.stride / 2.0) / g.stride));
  for (int i = std::max(0, i0); i <= std::min(fh - 1, i0 + 1); ++i)
    for (int j = std::max(0, j0); j <= std::min(fw - 1, j0 + 1); ++j)
      for (double s : g.scales) {
        const BoundingBox a{j * g.stride + g.stride / 2.0, i * g.stride + g.stride / 2.0, s, s};
        best = std::max(best, iou(a, box));
      }
  return best;
}

inline Rgb jitter(Rng& rng, Rgb c, double amount) {
  for (auto& v : c) v = std::clamp(v + rng.uniform(-amount, amount), 0.0, 1.0);
  return c;
}

inline FaceParams sample_face(Rng& rng, const SceneSpec& spec) {
  FaceParams f{};
  const double side = std::exp(rng.uniform(std::log(spec.face_min), std::log(spec.face_max)));
  const double aspect = rng.uniform(0.72, 0.95);  // width / height
  f.a = side * std::sqrt(aspect) / 2;
  f.b = side / std::sqrt(aspect) / 2;
  f.theta = rng.uniform(-12.0, 12.0) * std::numbers::pi / 180.0;
  const double tone = rng.uniform();
  const Rgb light{0.96, 0.80, 0.69}, dark{0.45, 0.30, 0.22};
  for (int c = 0; c < 3; ++c) f.skin[static_cast<std::size_t>(c)] = light[static_cast<std::size_t>(c)] * (1 - tone) + dark[static_cast<std::size_t>(c)] * tone;
  f.skin = jitter(rng, f.skin, 0.04);
  f.eye = jitter(rng, {0.08, 0.06, 0.05}, 0.04);
  f.mouth = jitter(rng, {0.55, 0.15, 0.15}, 0.06);
  const BoundingBox box = f.box();
  f.cx = rng.uniform(box.w / 2, spec.image_width - box.w / 2);
  f.cy = rng.uniform(box.h / 2, spec.image_height - box.h / 2);
  return f;
}

inline bool inside_ellipse(double x, double y, double cx, double cy, double a, double b) {
  const double u = (x - cx) / a, v = (y - cy) / b;
  return u * u + v * v <= 1.0;
}

/// Template color at a point in the face's local frame, or nullptr outside the oval.
inline const Rgb* face_color(const FaceParams& f, double u, double v) {
  if (!inside_ellipse(u, v, 0, 0, f.a, f.b)) return nullptr;
  const double ey = 0.16 * f.b, ex = 0.36 * f.a, ea = 0.2 * f.a, eb = 0.13 * f.b;
  if (inside_ellipse(u, v, -ex, ey, ea, eb) || inside_ellipse(u, v, ex, ey, ea, eb)) return &f.eye;
  if (std::abs(u) <= 0.4 * f.a && std::abs(v - 0.6 * f.b) <= 0.07 * f.b + 0.5) return &f.mouth;
  return &f.skin;
}

inline void draw_face(Tensor<double>& img, const FaceParams& f) {
  const Shape s = img.shape();
  const BoundingBox box = f.box();
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x0()))), x1 = std::min(s.w, static_cast<int>(std::ceil(box.x1())));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y0()))), y1 = std::min(s.h, static_cast<int>(std::ceil(box.y1())));
  const double c = std::cos(f.theta), sn = std::sin(f.theta);
  constexpr int kSub = 3;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      Rgb acc{0, 0, 0};
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = x + (sx + 0.5) / kSub - f.cx, py = y + (sy + 0.5) / kSub - f.cy;
          const double u = c * px + sn * py, v = -sn * px + c * py;
          if (const Rgb* col = face_color(f, u, v)) {
            for (int k = 0; k < 3; ++k) acc[static_cast<std::size_t>(k)] += (*col)[static_cast<std::size_t>(k)];
            ++hits;
          }
        }
      if (hits == 0) continue;
      const double cover = static_cast<double>(hits) / (kSub * kSub);
      for (int k = 0; k < 3; ++k) {
        double& p = img.at(0, k, y, x);
        p = p * (1 - cover) + acc[static_cast<std::size_t>(k)] / (kSub * kSub);
      }
    }
}

inline double smoothstep(double t) { return t * t * (3 - 2 * t); }

inline void value_noise(Tensor<double>& img, Rng& rng) {
  const Shape s = img.shape();
  Rgb base;
  for (auto& v : base) v = rng.uniform(0.15, 0.85);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) img.at(0, c, y, x) = base[static_cast<std::size_t>(c)];
  const int cells[] = {32, 16, 8};
  const double amps[] = {0.25, 0.12, 0.06};
  for (int o = 0; o < 3; ++o) {
    const int cell = cells[o];
    const int gh = s.h / cell + 2, gw = s.w / cell + 2;
    for (int c = 0; c < 3; ++c) {
      std::vector<double> lattice(static_cast<std::size_t>(gh * gw));
      for (auto& v : lattice) v = rng.uniform(-1, 1);
      for (int y = 0; y < s.h; ++y) {
        const int gy = y / cell;
        const double ty = smoothstep((y % cell + 0.5) / cell);
        for (int x = 0; x < s.w; ++x) {
          const int gx = x / cell;
          const double tx = smoothstep((x % cell + 0.5) / cell);
          const auto at = [&](int i, int j) { return lattice[static_cast<std::size_t>(i * gw + j)]; };
          const double top = at(gy, gx) * (1 - tx) + at(gy, gx + 1) * tx;
          const double bot = at(gy + 1, gx) * (1 - tx) + at(gy + 1, gx + 1) * tx;
          img.at(0, c, y, x) += amps[o] * (top * (1 - ty) + bot * ty);
        }
      }
    }
  }
}

inline void draw_rectangles(Tensor<double>& img, Rng& rng) {
  const Shape s = img.shape();
  const int count = static_cast<int>(rng.uniform_int(2, 6));
  for (int r = 0; r < count; ++r) {
    const double w = rng.uniform(8, 48), h = rng.uniform(8, 48);
    const double x0 = rng.uniform(-w / 2, s.w - w / 2), y0 = rng.uniform(-h / 2, s.h - h / 2);
    Rgb col;
    for (auto& v : col) v = rng.uniform();
    const double alpha = rng.uniform(0.6, 1.0);
    for (int y = std::max(0, static_cast<int>(y0)); y < std::min(s.h, static_cast<int>(y0 + h)); ++y)
      for (int x = std::max(0, static_cast<int>(x0)); x < std::min(s.w, static_cast<int>(x0 + w)); ++x)
        for (int c = 0; c < 3; ++c) {
          double& p = img.at(0, c, y, x);
          p = p * (1 - alpha) + col[static_cast<std::size_t>(c)] * alpha;
        }
  }
}

inline void draw_distractors(Tensor<double>& img, Rng& rng) {
  const Shape s = img.shape();
  const int count = static_cast<int>(rng.uniform_int(0, 3));
  for (int k = 0; k < count; ++k) {
    const double a = rng.uniform(4, 20), b = rng.uniform(4, 20);
    const double cx = rng.uniform(0, s.w), cy = rng.uniform(0, s.h);
    Rgb col;
    if (rng.bernoulli(0.5)) {
      col = jitter(rng, {0.8, 0.62, 0.5}, 0.15);
    } else {
      for (auto& v : col) v = rng.uniform();
    }
    for (int y = std::max(0, static_cast<int>(cy - b)); y < std::min(s.h, static_cast<int>(cy + b) + 1); ++y)
      for (int x = std::max(0, static_cast<int>(cx - a)); x < std::min(s.w, static_cast<int>(cx + a) + 1); ++x)
        if (inside_ellipse(x + 0.5, y + 0.5, cx, cy, a, b))
          for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = col[static_cast<std::size_t>(c)];
  }
}

inline bool layout_ok(const BoundingBox& box, const std::vector<FaceParams>& placed, const SceneSpec& spec) {
  const double side = std::sqrt(box.w * box.h);
  if (side < spec.face_min || side > spec.face_max) return false;
  if (box.x0() < 0 || box.y0() < 0 || box.x1() > spec.image_width || box.y1() > spec.image_height) return false;
  for (const auto& p : placed) {
    const BoundingBox other = p.box();
    // faces never touch; this is stricter than the pairwise IoU bound
    const BoundingBox grown{other.cx, other.cy, other.w + 4, other.h + 4};
    if (intersection_area(grown, box) > 0 || iou(other, box) > spec.max_pair_iou) return false;
  }
  if (spec.min_anchor_iou > 0 && best_anchor_iou(box, spec.anchors, spec.image_height, spec.image_width) < spec.min_anchor_iou)
    return false;
  return true;
}

}  // namespace detail

/// Renders image `index` of the stream identified by spec.seed.
inline LabeledImage generate_one(const SceneSpec& spec, std::uint64_t index) {
  Rng rng(derive_seed(spec.seed, {index}));
  const int nfaces = static_cast<int>(rng.uniform_int(spec.faces_min, spec.faces_max));
  std::vector<detail::FaceParams> faces;
  bool done = false;
  for (int attempt = 0; attempt < spec.max_attempts && !done; ++attempt) {
    faces.clear();
    done = true;
    for (int k = 0; k < nfaces && done; ++k) {
      bool placed = false;
      for (int tries = 0; tries < 50 && !placed; ++tries) {
        auto f = detail::sample_face(rng, spec);
        if (detail::layout_ok(f.box(), faces, spec)) {
          faces.push_back(f);
          placed = true;
        }
      }
      done = placed;
    }
  }
  if (!done) throw LayoutError("no feasible layout for image " + std::to_string(index) + " after " + std::to_string(spec.max_attempts) + " attempts");

  Tensor<double> canvas({1, 3, spec.image_height, spec.image_width}, 0.5);
  if (spec.background_family == 0) {
    detail::value_noise(canvas, rng);
    detail::draw_rectangles(canvas, rng);
    detail::draw_distractors(canvas, rng);
  }
  LabeledImage out;
  for (const auto& f : faces) {
    detail::draw_face(canvas, f);
    out.boxes.push_back(f.box());
    out.difficulty.push_back(difficulty_of(out.boxes.back(), spec));
  }
  out.image = Tensor<float>(canvas.shape());
  for (std::size_t i = 0; i < canvas.numel(); ++i) out.image[i] = quantize8(canvas[i]);
  return out;
}

/// Images [first_index, first_index + count) of the stream; parallel and serial
/// generation agree bit-for-bit.
inline std::vector<LabeledImage> generate(const SceneSpec& spec, std::size_t count, std::uint64_t first_index = 0) {
  if (count < 1) throw ConfigError("generate: count must be >= 1");
  spec.validate();
  std::vector<LabeledImage> out(count);
  parallel_for(count, [&](std::size_t i) { out[i] = generate_one(spec, first_index + i); });
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_prob = 0.5;
  std::vector<double> jitter_factors{0.75, 1.0, 1.25};
  int max_side = 320;
};

inline LabeledImage flip_horizontal(const LabeledImage& in) {
  LabeledImage out = in;
  const Shape s = in.image.shape();
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) out.image.at(0, c, y, x) = in.image.at(0, c, y, s.w - 1 - x);
  for (auto& b : out.boxes) b.cx = s.w - b.cx;
  return out;
}

inline LabeledImage rescale(const LabeledImage& in, double factor) {
  const Shape s = in.image.shape();
  const int nh = std::max(1, static_cast<int>(std::lround(s.h * factor)));
  const int nw = std::max(1, static_cast<int>(std::lround(s.w * factor)));
  LabeledImage out;
  out.image = resize_bilinear(in.image, nh, nw);
  out.difficulty = in.difficulty;
  const double sx = static_cast<double>(nw) / s.w, sy = static_cast<double>(nh) / s.h;
  for (const auto& b : in.boxes) out.boxes.push_back({b.cx * sx, b.cy * sy, b.w * sx, b.h * sy});
  return out;
}

/// Window [x0, x0 + w) x [y0, y0 + h). Boxes keeping at least half their area
/// are clipped and kept; the rest are dropped.
inline LabeledImage crop(const LabeledImage& in, int x0, int y0, int w, int h) {
  LabeledImage out;
  out.image = Tensor<float>({1, in.image.shape().c, h, w});
  for (int c = 0; c < in.image.shape().c; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.image.at(0, c, y, x) = in.image.at(0, c, y + y0, x + x0);
  for (std::size_t i = 0; i < in.boxes.size(); ++i) {
    const BoundingBox shifted{in.boxes[i].cx - x0, in.boxes[i].cy - y0, in.boxes[i].w, in.boxes[i].h};
    const auto clipped = clip_to_image(shifted, w, h);
    if (clipped && clipped->area() >= 0.5 * shifted.area()) {
      out.boxes.push_back(*clipped);
      out.difficulty.push_back(in.difficulty[i]);
    }
  }
  return out;
}

/// Random horizontal flip, then a jitter factor drawn uniformly from the list;
/// when the longer side exceeds max_side a random crop brings it back under
/// the cap, retrying until at least one face stays fully inside.
inline LabeledImage augment(const LabeledImage& in, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.jitter_factors.empty()) throw ConfigError("augment: jitter_factors is empty");
  if (cfg.max_side < 8) throw ConfigError("augment: max_side must be >= 8");
  LabeledImage img = rng.bernoulli(cfg.flip_prob) ? flip_horizontal(in) : in;
  const auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.jitter_factors.size()) - 1));
  const double factor = cfg.jitter_factors[pick];
  if (!(factor > 0)) throw ConfigError("augment: jitter factors must be positive");
  if (factor != 1.0) img = rescale(img, factor);
  const Shape s = img.image.shape();
  if (std::max(s.h, s.w) <= cfg.max_side) return img;
  const int ch = std::min(s.h, cfg.max_side), cw = std::min(s.w, cfg.max_side);
  int bx = (s.w - cw) / 2, by = (s.h - ch) / 2;
  if (!img.boxes.empty()) {
    const BoundingBox& b = img.boxes.front();
    bx = std::clamp(static_cast<int>(b.cx - cw / 2.0), 0, s.w - cw);
    by = std::clamp(static_cast<int>(b.cy - ch / 2.0), 0, s.h - ch);
  }
  for (int attempt = 0; attempt < 100 && !img.boxes.empty(); ++attempt) {
    const int x0 = static_cast<int>(rng.uniform_int(0, s.w - cw)), y0 = static_cast<int>(rng.uniform_int(0, s.h - ch));
    for (const auto& b : img.boxes)
      if (b.x0() >= x0 && b.y0() >= y0 && b.x1() <= x0 + cw && b.y1() <= y0 + ch) return crop(img, x0, y0, cw, ch);
  }
  return crop(img, bx, by, cw, ch);
}

// ---------------------------------------------------------------------------
// Dataset directories: img_NNNNNN.ppm files plus annotations.jsonl

inline constexpr const char* kAnnotationFile = "annotations.jsonl";

inline std::string image_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%06zu.ppm", index);
  return buf;
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& images) {
  std::filesystem::create_directories(dir);
  std::ofstream ann(dir / kAnnotationFile);
  if (!ann) throw IoError("cannot write " + (dir / kAnnotationFile).string());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string name = image_file_name(i);
    write_ppm(dir / name, images[i].image);
    nlohmann::json line;
    line["image"] = name;
    line["boxes"] = nlohmann::json::array();
    line["difficulty"] = nlohmann::json::array();
    for (std::size_t k = 0; k < images[i].boxes.size(); ++k) {
      const auto& b = images[i].boxes[k];
      line["boxes"].push_back({b.cx, b.cy, b.w, b.h});
      line["difficulty"].push_back(to_string(images[i].difficulty[k]));
    }
    ann << line.dump() << '\n';
  }
  if (!ann) throw IoError("write failed: " + (dir / kAnnotationFile).string());
}

inline std::vector<LabeledImage> read_dataset(const std::filesystem::path& dir, std::size_t limit = 0) {
  std::ifstream ann(dir / kAnnotationFile);
  if (!ann) throw IoError("cannot open " + (dir / kAnnotationFile).string());
  std::vector<LabeledImage> out;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    if (limit != 0 && out.size() >= limit) break;
    LabeledImage img;
    try {
      const auto j = nlohmann::json::parse(line);
      img.image = read_ppm(dir / j.at("image").get<std::string>());
      for (const auto& b : j.at("boxes")) img.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()});
      for (const auto& d : j.at("difficulty")) img.difficulty.push_back(parse_difficulty(d.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad annotation line in " + (dir / kAnnotationFile).string() + ": " + e.what());
    }
    if (img.boxes.size() != img.difficulty.size()) throw IoError("boxes and difficulty tags differ in length");
    out.push_back(std::move(img));
  }
  if (out.empty()) throw IoError("dataset " + dir.string() + " is empty");
  return out;
}

}  // namespace patchforge
