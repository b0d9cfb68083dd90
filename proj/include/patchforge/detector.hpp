#pragma once

// Toy single-level anchor-based face detector. A four-stage conv backbone is
// fused top-down into one stride-4 map P2, which feeds a classification head
// (face / background logits) and a box regression head.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "patchforge/autodiff.hpp"
#include "patchforge/binio.hpp"
#include "patchforge/error.hpp"
#include "patchforge/geometry.hpp"
#include "patchforge/hash.hpp"
#include "patchforge/rng.hpp"
#include "patchforge/synthdata.hpp"

namespace patchforge {

inline constexpr const char* kDetectorFormat = "patchforge-detector";
inline constexpr const char* kArchVersion = "sln-toy-1";
/// Total stride of the backbone; image sides must be multiples of this.
inline constexpr int kInputMultiple = 8;
/// Log-size offsets are clamped to this magnitude before exp().
inline constexpr double kMaxLogScale = 4.0;

struct DetectorArch {
  std::array<int, 4> widths{8, 16, 32, 32};
  int head_width = 32;
  std::vector<double> anchor_scales{16, 32, 64, 128};

  int stride() const { return 4; }
  int num_anchors() const { return static_cast<int>(anchor_scales.size()); }

  void validate() const {
    for (int w : widths)
      if (w < 1) throw ConfigError("layer widths must be >= 1");
    if (head_width < 1) throw ConfigError("head width must be >= 1");
    AnchorGrid g;
    g.scales = anchor_scales;
    g.validate_scales();
  }

  AnchorGrid grid(int image_height, int image_width) const {
    AnchorGrid g;
    g.stride = stride();
    g.scales = anchor_scales;
    g.feature_height = image_height / stride();
    g.feature_width = image_width / stride();
    return g;
  }

  friend bool operator==(const DetectorArch&, const DetectorArch&) = default;
};

inline void to_json(nlohmann::json& j, const DetectorArch& a) {
  j = {{"widths", a.widths}, {"head_width", a.head_width}, {"anchor_scales", a.anchor_scales}};
}

inline void from_json(const nlohmann::json& j, DetectorArch& a) {
  j.at("widths").get_to(a.widths);
  j.at("head_width").get_to(a.head_width);
  j.at("anchor_scales").get_to(a.anchor_scales);
}

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Parameter tensors in declaration order (also the checkpoint block order).
inline std::vector<ParamSpec> param_specs(const DetectorArch& a) {
  const auto [w0, w1, w2, w3] = a.widths;
  const int na = a.num_anchors(), hw = a.head_width;
  return {
      {"s0.w", {w0, 3, 3, 3}},     {"s0.b", {1, w0, 1, 1}},     {"s1.w", {w1, w0, 3, 3}}, {"s1.b", {1, w1, 1, 1}},
      {"s2.w", {w2, w1, 3, 3}},    {"s2.b", {1, w2, 1, 1}},     {"s3.w", {w3, w2, 3, 3}}, {"s3.b", {1, w3, 1, 1}},
      {"lateral.w", {w3, w1, 1, 1}}, {"lateral.b", {1, w3, 1, 1}}, {"head.w", {hw, w3, 3, 3}}, {"head.b", {1, hw, 1, 1}},
      {"cls.w", {2 * na, hw, 1, 1}}, {"cls.b", {1, 2 * na, 1, 1}}, {"reg.w", {4 * na, hw, 1, 1}}, {"reg.b", {1, 4 * na, 1, 1}},
  };
}

struct DetectorModel {
  DetectorArch arch;
  std::vector<Tensor<float>> params;
  std::uint64_t seed = 0;
  nlohmann::json train_config = nlohmann::json::object();
  bool frozen = false;

  /// Architecture version plus a digest of the weights.
  std::string tag() const {
    Fnv1a h;
    for (const auto& p : params) h.update(p.data(), p.numel() * sizeof(float));
    return std::string(kArchVersion) + "-" + hex64(h.digest()).substr(0, 12);
  }
};

inline DetectorModel init_detector(const DetectorArch& arch, std::uint64_t seed) {
  arch.validate();
  DetectorModel m;
  m.arch = arch;
  m.seed = seed;
  Rng rng(derive_seed(seed, {0x1417}));
  for (const auto& spec : param_specs(arch)) {
    Tensor<float> t(spec.shape);
    const bool weight = spec.name.ends_with(".w");
    if (weight && spec.name.starts_with("cls")) {
      for (auto& v : t.span()) v = static_cast<float>(0.01 * rng.normal());
    } else if (weight && !spec.name.starts_with("reg")) {
      const double stdev = std::sqrt(2.0 / static_cast<double>(spec.shape.c * spec.shape.h * spec.shape.w));
      for (auto& v : t.span()) v = static_cast<float>(stdev * rng.normal());
    }
    m.params.push_back(std::move(t));
  }
  return m;
}

inline void freeze(DetectorModel& m) { m.frozen = true; }

// ---------------------------------------------------------------------------
// Forward

template <class T>
struct Heads {
  ad::Var<T> cls;  ///< (n, 2A, H', W'); channel a*2 is the face logit of anchor a, a*2+1 background
  ad::Var<T> reg;  ///< (n, 4A, H', W'); channel a*4 + {dx, dy, dw, dh}
  int num_anchors = 0;
};

inline void check_input_shape(const Shape& s) {
  if (s.c != 3) throw ShapeError("detector input must have 3 channels, got " + s.str());
  if (s.h < kInputMultiple || s.w < kInputMultiple || s.h % kInputMultiple != 0 || s.w % kInputMultiple != 0)
    throw ConfigError("detector input sides must be positive multiples of 8, got " + s.str() + " (pad first)");
}

/// `image` holds raw pixels in [0, 1]; normalization to [-1, 1] happens here.
template <class T>
Heads<T> forward(const DetectorArch& arch, const std::vector<ad::Var<T>>& p, const ad::Var<T>& image) {
  using namespace ad;
  if (p.size() != param_specs(arch).size()) throw ShapeError("forward: wrong number of parameter tensors");
  check_input_shape(image.shape());
  const auto conv = [&](const Var<T>& x, std::size_t layer, int stride, int pad) {
    return add_channel_bias(conv2d(x, p[2 * layer], stride, pad), p[2 * layer + 1]);
  };
  const Var<T> x = add_scalar(scale(image, T(2)), T(-1));
  const Var<T> s0 = relu(conv(x, 0, 2, 1));
  const Var<T> c2 = relu(conv(s0, 1, 2, 1));
  const Var<T> s2 = relu(conv(maxpool2(c2), 2, 1, 1));
  const Var<T> c4 = relu(conv(s2, 3, 1, 1));
  const Var<T> p2 = add(upsample2x_bilinear(c4), conv(c2, 4, 1, 0));
  const Var<T> head = relu(conv(p2, 5, 1, 1));
  return {conv(head, 6, 1, 0), conv(head, 7, 1, 0), arch.num_anchors()};
}

/// Flat offset of (anchor k, channel comp) in a head tensor with `per_anchor`
/// channels per anchor; anchors follow tile_anchors order.
inline std::size_t head_offset(std::size_t image, std::size_t k, std::size_t comp, std::size_t per_anchor, int num_anchors,
                               int fh, int fw) {
  const std::size_t A = static_cast<std::size_t>(num_anchors);
  const std::size_t cell = k / A, a = k % A;
  const std::size_t plane = static_cast<std::size_t>(fh) * static_cast<std::size_t>(fw);
  return ((image * A + a) * per_anchor + comp) * plane + cell;
}

// ---------------------------------------------------------------------------
// Loss

struct LossConfig {
  double pos_iou = 0.6;
  double neg_iou = 0.4;
  int neg_ratio = 3;
  int min_negatives = 16;
};

template <class T>
struct LossTerms {
  ad::Var<T> total;
  ad::Var<T> pos_cls;
  ad::Var<T> neg_cls;
  ad::Var<T> reg;
  std::size_t num_pos = 0;
  std::size_t num_neg = 0;
};

/// Uniformly sampled negative anchors, at most neg_ratio per positive and at
/// least min_negatives (when that many exist). Sorted ascending.
inline std::vector<std::size_t> sample_negatives(const std::vector<AnchorLabel>& labels, std::size_t num_pos,
                                                 const LossConfig& cfg, Rng& rng) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].kind == AnchorKind::Negative) cand.push_back(i);
  const std::size_t want = std::max(static_cast<std::size_t>(cfg.neg_ratio) * num_pos, static_cast<std::size_t>(cfg.min_negatives));
  const std::size_t k = std::min(want, cand.size());
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(cand.size()) - 1));
    std::swap(cand[i], cand[j]);
  }
  cand.resize(k);
  std::sort(cand.begin(), cand.end());
  return cand;
}

/// Decoded box of anchor a under offsets (dx, dy, dw, dh).
inline BoundingBox decode_box(const BoundingBox& a, double dx, double dy, double dw, double dh) {
  return {a.cx + dx * a.w, a.cy + dy * a.h, a.w * std::exp(std::clamp(dw, -kMaxLogScale, kMaxLogScale)),
          a.h * std::exp(std::clamp(dh, -kMaxLogScale, kMaxLogScale))};
}

/// Loss of a single image (heads with n = 1). Classification terms are mean
/// cross entropies over positives and the given negatives; the regression term
/// is the mean of (1 - IoU(decoded box, matched gt))^2 over positives.
template <class T>
LossTerms<T> detection_loss(const Heads<T>& heads, const std::vector<BoundingBox>& anchors,
                            const std::vector<AnchorLabel>& labels, const std::vector<BoundingBox>& gt,
                            const std::vector<std::size_t>& negatives) {
  using namespace ad;
  const Shape cs = heads.cls.shape();
  if (cs.n != 1) throw ShapeError("detection_loss expects a single image");
  const int A = heads.num_anchors, fh = cs.h, fw = cs.w;
  if (anchors.size() != static_cast<std::size_t>(fh) * static_cast<std::size_t>(fw) * static_cast<std::size_t>(A) ||
      labels.size() != anchors.size())
    throw ConfigError("anchor count does not match the head output");
  Graph<T>& g = heads.cls.graph();
  const auto zero = [&] { return g.constant(Tensor<T>::scalar(T(0))); };
  const auto logp = log_softmax_channel(reshape(heads.cls, Shape{A, 2, fh, fw}));

  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].kind == AnchorKind::Positive) pos.push_back(i);

  LossTerms<T> out;
  out.num_pos = pos.size();
  out.num_neg = negatives.size();
  const auto cls_term = [&](const std::vector<std::size_t>& idx, std::size_t channel) {
    if (idx.empty()) return zero();
    std::vector<std::size_t> off;
    for (auto k : idx) off.push_back(head_offset(0, k, channel, 2, A, fh, fw));
    return neg(mean(gather(logp, off)));
  };
  out.pos_cls = cls_term(pos, 0);
  out.neg_cls = cls_term(negatives, 1);

  if (pos.empty()) {
    out.reg = zero();
  } else {
    const int P = static_cast<int>(pos.size());
    std::array<Var<T>, 4> d;
    for (std::size_t c = 0; c < 4; ++c) {
      std::vector<std::size_t> off;
      for (auto k : pos) off.push_back(head_offset(0, k, c, 4, A, fh, fw));
      d[c] = gather(heads.reg, off);
    }
    Tensor<T> ax(vector_shape(P)), ay(vector_shape(P)), aw(vector_shape(P)), ah(vector_shape(P));
    Tensor<T> gx0(vector_shape(P)), gy0(vector_shape(P)), gx1(vector_shape(P)), gy1(vector_shape(P)), garea(vector_shape(P));
    for (int i = 0; i < P; ++i) {
      const auto u = static_cast<std::size_t>(i);
      const BoundingBox& a = anchors[pos[u]];
      const BoundingBox& b = gt.at(static_cast<std::size_t>(labels[pos[u]].gt));
      ax[u] = T(a.cx), ay[u] = T(a.cy), aw[u] = T(a.w), ah[u] = T(a.h);
      gx0[u] = T(b.x0()), gy0[u] = T(b.y0()), gx1[u] = T(b.x1()), gy1[u] = T(b.y1()), garea[u] = T(b.w * b.h);
    }
    const auto C = [&](const Tensor<T>& t) { return g.constant(t); };
    const T lim = T(kMaxLogScale);
    const auto px = add(mul(d[0], C(aw)), C(ax));
    const auto py = add(mul(d[1], C(ah)), C(ay));
    const auto pw = mul(exp(clamp(d[2], -lim, lim)), C(aw));
    const auto ph = mul(exp(clamp(d[3], -lim, lim)), C(ah));
    const auto hw = scale(pw, T(0.5)), hh = scale(ph, T(0.5));
    const auto iw = relu(sub(minimum(add(px, hw), C(gx1)), maximum(sub(px, hw), C(gx0))));
    const auto ih = relu(sub(minimum(add(py, hh), C(gy1)), maximum(sub(py, hh), C(gy0))));
    const auto inter = mul(iw, ih);
    const auto uni = sub(add(mul(pw, ph), C(garea)), inter);
    const auto overlap = div(inter, uni);
    out.reg = mean(square(add_scalar(neg(overlap), T(1))));
  }
  out.total = add(add(out.pos_cls, out.neg_cls), out.reg);
  return out;
}

// ---------------------------------------------------------------------------
// Inference

struct Detection {
  BoundingBox box;
  double score = 0.0;         ///< softmax face probability, strictly below 1
  double logit_margin = 0.0;  ///< s_p - s_n
};

/// Face probability from the logit margin, computed in double and kept below 1.
inline double margin_to_score(double margin) {
  const double s = 1.0 / (1.0 + std::exp(-margin));
  return std::min(s, std::nextafter(1.0, 0.0));
}

inline std::vector<ad::Var<float>> constant_params(ad::Graph<float>& g, const DetectorModel& m) {
  std::vector<ad::Var<float>> out;
  for (const auto& p : m.params) out.push_back(g.constant(p));
  return out;
}

struct HeadValues {
  Tensor<float> cls, reg;
  int num_anchors = 0;
};

/// Head outputs for a batch of same-size images whose sides are multiples of 8.
inline HeadValues infer(const DetectorModel& m, const Tensor<float>& batch) {
  ad::Graph<float> g;
  const auto h = forward(m.arch, constant_params(g, m), g.constant(batch));
  return {h.cls.value(), h.reg.value(), h.num_anchors};
}

/// Decodes detections of image `n` of the batch with score >= score_thresh,
/// keeping boxes clipped to a valid_w x valid_h image. No NMS.
inline std::vector<Detection> decode_detections(const DetectorModel& m, const HeadValues& hv, int n, int valid_h, int valid_w,
                                                double score_thresh) {
  const Shape cs = hv.cls.shape();
  const auto anchors = tile_anchors(m.arch.grid(cs.h * m.arch.stride(), cs.w * m.arch.stride()));
  const auto img = static_cast<std::size_t>(n);
  std::vector<Detection> out;
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const double sp = hv.cls[head_offset(img, k, 0, 2, hv.num_anchors, cs.h, cs.w)];
    const double sn = hv.cls[head_offset(img, k, 1, 2, hv.num_anchors, cs.h, cs.w)];
    const double margin = sp - sn;
    const double score = margin_to_score(margin);
    if (score < score_thresh) continue;
    double d[4];
    for (std::size_t c = 0; c < 4; ++c) d[c] = hv.reg[head_offset(img, k, c, 4, hv.num_anchors, cs.h, cs.w)];
    const auto clipped = clip_to_image(decode_box(anchors[k], d[0], d[1], d[2], d[3]), valid_w, valid_h);
    if (!clipped) continue;
    out.push_back({*clipped, score, margin});
  }
  return out;
}

inline std::vector<Detection> apply_nms(const std::vector<Detection>& dets, double nms_thresh) {
  std::vector<ScoredBox> sb;
  sb.reserve(dets.size());
  for (const auto& d : dets) sb.push_back({d.box, d.logit_margin});
  std::vector<Detection> out;
  for (std::size_t i : nms_indices(sb, nms_thresh)) out.push_back(dets[i]);
  return out;
}

struct DetectOptions {
  double score_thresh = 0.99;
  double nms_thresh = 0.5;
  bool pyramid = false;
  std::vector<double> pyramid_scales{0.5, 1.0, 2.0};
};

namespace detail {

inline std::vector<Detection> detect_single_scale(const DetectorModel& m, const Tensor<float>& image, double score_thresh) {
  const Shape s = image.shape();
  const auto hv = infer(m, pad_to_multiple(image, kInputMultiple, 0.5f));
  return decode_detections(m, hv, 0, s.h, s.w, score_thresh);
}

}  // namespace detail

/// Forward, decode, filter by score, NMS. Sorted by descending score.
inline std::vector<Detection> detect(const DetectorModel& m, const Tensor<float>& image, const DetectOptions& opt = {}) {
  const Shape s = image.shape();
  if (s.n != 1) throw ShapeError("detect expects a single image, got " + s.str());
  std::vector<Detection> all;
  if (!opt.pyramid) {
    all = detail::detect_single_scale(m, image, opt.score_thresh);
  } else {
    for (double f : opt.pyramid_scales) {
      const int h = std::max(kInputMultiple, static_cast<int>(std::lround(s.h * f)));
      const int w = std::max(kInputMultiple, static_cast<int>(std::lround(s.w * f)));
      const double fx = static_cast<double>(w) / s.w, fy = static_cast<double>(h) / s.h;
      for (auto d : detail::detect_single_scale(m, f == 1.0 ? image : resize_bilinear(image, h, w), opt.score_thresh)) {
        d.box = {d.box.cx / fx, d.box.cy / fy, d.box.w / fx, d.box.h / fy};
        all.push_back(d);
      }
    }
  }
  return apply_nms(all, opt.nms_thresh);
}

inline std::vector<Detection> detect(const DetectorModel& m, const Tensor<float>& image, double score_thresh,
                                     double nms_thresh) {
  DetectOptions opt;
  opt.score_thresh = score_thresh;
  opt.nms_thresh = nms_thresh;
  return detect(m, image, opt);
}

/// Detections for several images; images of equal size share one batched forward pass.
inline std::vector<std::vector<Detection>> detect_batch(const DetectorModel& m, const std::vector<Tensor<float>>& images,
                                                        const DetectOptions& opt = {}) {
  std::vector<std::vector<Detection>> out(images.size());
  if (opt.pyramid) {
    for (std::size_t i = 0; i < images.size(); ++i) out[i] = detect(m, images[i], opt);
    return out;
  }
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < images.size(); ++i) groups[{images[i].shape().h, images[i].shape().w}].push_back(i);
  for (const auto& [hw, idx] : groups) {
    const auto first = pad_to_multiple(images[idx[0]], kInputMultiple, 0.5f);
    const Shape ps = first.shape();
    Tensor<float> batch({static_cast<int>(idx.size()), 3, ps.h, ps.w});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto padded = pad_to_multiple(images[idx[b]], kInputMultiple, 0.5f);
      std::copy(padded.data(), padded.data() + padded.numel(), batch.data() + b * padded.numel());
    }
    const auto hv = infer(m, batch);
    for (std::size_t b = 0; b < idx.size(); ++b)
      out[idx[b]] = apply_nms(decode_detections(m, hv, static_cast<int>(b), hw.first, hw.second, opt.score_thresh), opt.nms_thresh);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 0.01;
  std::vector<int> decay_epochs{18, 24};
  double decay_factor = 0.1;
  int epochs = 30;
  int batch_size = 8;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  std::uint64_t seed = 0;
  LossConfig loss;
  bool augment = true;
  AugmentConfig augmentation;

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    for (std::size_t i = 1; i < decay_epochs.size(); ++i)
      if (decay_epochs[i] <= decay_epochs[i - 1]) throw ConfigError("train.decay_epochs must be strictly increasing");
    if (momentum < 0 || momentum >= 1) throw ConfigError("train.momentum must lie in [0, 1)");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (!(loss.neg_iou >= 0 && loss.neg_iou < loss.pos_iou && loss.pos_iou <= 1)) throw ConfigError("train.loss thresholds are invalid");
  }

  double lr_at(int epoch) const {
    double v = lr;
    for (int e : decay_epochs)
      if (epoch >= e) v *= decay_factor;
    return v;
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double total = 0, pos_cls = 0, neg_cls = 0, reg = 0;
  double seconds = 0;
};

struct ImageLoss {
  double total = 0, pos_cls = 0, neg_cls = 0, reg = 0;
};

/// Loss of one labeled image; accumulates parameter gradients into `grads`
/// when it is non-null.
inline ImageLoss image_loss(const DetectorModel& m, const LabeledImage& img, const LossConfig& cfg, Rng& rng,
                            std::vector<Tensor<float>>* grads) {
  ad::Graph<float> g;
  std::vector<ad::Var<float>> p;
  for (const auto& t : m.params) p.push_back(g.leaf(t, grads != nullptr));
  const auto input = pad_to_multiple(img.image, kInputMultiple, 0.5f);
  const auto heads = forward(m.arch, p, g.constant(input));
  const Shape cs = heads.cls.shape();
  const auto anchors = tile_anchors(m.arch.grid(cs.h * m.arch.stride(), cs.w * m.arch.stride()));
  const auto labels = match_anchors(anchors, img.boxes, cfg.pos_iou, cfg.neg_iou);
  std::size_t num_pos = 0;
  for (const auto& l : labels) num_pos += l.kind == AnchorKind::Positive;
  const auto negatives = sample_negatives(labels, num_pos, cfg, rng);
  const auto terms = detection_loss(heads, anchors, labels, img.boxes, negatives);
  ImageLoss out{terms.total.value().item(), terms.pos_cls.value().item(), terms.neg_cls.value().item(), terms.reg.value().item()};
  if (!std::isfinite(out.total)) throw NumericError("non-finite detector loss");
  if (grads) {
    g.backward(terms.total);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto gi = g.grad(p[i]);
      for (std::size_t k = 0; k < gi.numel(); ++k) (*grads)[i][k] += gi[k];
    }
  }
  return out;
}

struct TrainResult {
  DetectorModel model;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mini-batch SGD with momentum and weight decay. Single-threaded; the image
/// order, augmentation and negative sampling all derive from cfg.seed.
inline TrainResult train(DetectorModel model, const std::vector<LabeledImage>& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  if (model.frozen) throw ContractError("train: model is frozen");
  if (data.empty()) throw ConfigError("train: dataset is empty");
  cfg.validate();
  std::vector<Tensor<float>> velocity, grads;
  for (const auto& p : model.params) {
    velocity.emplace_back(p.shape());
    grads.emplace_back(p.shape());
  }
  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x0e}));
    order_rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    log.lr = cfg.lr_at(epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      for (auto& gr : grads) gr.fill(0.f);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), idx, 0x1a}));
        const LabeledImage img = cfg.augment ? augment(data[idx], cfg.augmentation, rng) : data[idx];
        const auto l = image_loss(model, img, cfg.loss, rng, &grads);
        log.total += l.total, log.pos_cls += l.pos_cls, log.neg_cls += l.neg_cls, log.reg += l.reg;
      }
      const float inv = 1.0f / static_cast<float>(stop - start);
      const auto lr = static_cast<float>(log.lr), mu = static_cast<float>(cfg.momentum), wd = static_cast<float>(cfg.weight_decay);
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        auto& w = model.params[i];
        for (std::size_t k = 0; k < w.numel(); ++k) {
          const float gk = grads[i][k] * inv + wd * w[k];
          velocity[i][k] = mu * velocity[i][k] + gk;
          w[k] -= lr * velocity[i][k];
        }
      }
    }
    const auto n = static_cast<double>(data.size());
    log.total /= n, log.pos_cls /= n, log.neg_cls /= n, log.reg /= n;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(log.total)) throw NumericError("training diverged at epoch " + std::to_string(epoch));
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(const std::filesystem::path& path, const DetectorModel& m) {
  FloatBlob blob;
  nlohmann::json params = nlohmann::json::array();
  const auto specs = param_specs(m.arch);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const Shape s = m.params[i].shape();
    params.push_back({{"name", specs[i].name}, {"shape", {s.n, s.c, s.h, s.w}}});
    blob.blocks.push_back(m.params[i].storage());
  }
  blob.header = {{"format", kDetectorFormat}, {"version", kArchVersion}, {"arch", m.arch},
                 {"seed", m.seed},            {"train_config", m.train_config}, {"params", params}};
  write_blob(path, blob);
}

inline DetectorModel load_checkpoint(const std::filesystem::path& path) {
  const FloatBlob blob = read_blob(path);
  DetectorModel m;
  try {
    if (blob.header.at("format") != kDetectorFormat) throw IoError(path.string() + " is not a detector checkpoint");
    if (blob.header.at("version") != kArchVersion) throw IoError(path.string() + " has an unsupported version");
    m.arch = blob.header.at("arch").get<DetectorArch>();
    m.seed = blob.header.at("seed").get<std::uint64_t>();
    m.train_config = blob.header.at("train_config");
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto specs = param_specs(m.arch);
  if (blob.blocks.size() != specs.size()) throw IoError("checkpoint " + path.string() + " has the wrong number of blocks");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (blob.blocks[i].size() != specs[i].shape.numel()) throw IoError("checkpoint block " + specs[i].name + " has the wrong size");
    m.params.emplace_back(specs[i].shape, blob.blocks[i]);
  }
  return m;
}

}  // namespace patchforge
