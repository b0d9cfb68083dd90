#pragma once

// Universal adversarial patch optimization against a frozen detector.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "patchforge/autodiff.hpp"
#include "patchforge/binio.hpp"
#include "patchforge/detector.hpp"
#include "patchforge/error.hpp"
#include "patchforge/eval.hpp"
#include "patchforge/geometry.hpp"
#include "patchforge/parallel.hpp"
#include "patchforge/ppm.hpp"
#include "patchforge/rng.hpp"
#include "patchforge/synthdata.hpp"

namespace patchforge {

inline constexpr int kPatchSize = 128;
inline constexpr const char* kPatchFormat = "patchforge-patch";

enum class Strategy { PatchIoU, PatchScore, PatchScoreFocal, PatchCombination };

inline constexpr Strategy kAllStrategies[] = {Strategy::PatchIoU, Strategy::PatchScore, Strategy::PatchScoreFocal,
                                              Strategy::PatchCombination};

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::PatchIoU: return "patch_iou";
    case Strategy::PatchScore: return "patch_score";
    case Strategy::PatchScoreFocal: return "patch_score_focal";
    case Strategy::PatchCombination: return "patch_combination";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (auto v : kAllStrategies)
    if (s == to_string(v)) return v;
  throw ConfigError("unknown strategy '" + s + "'");
}

struct AttackConfig {
  Strategy strategy = Strategy::PatchIoU;
  double delta = 0.99;
  double margin = 0.49;
  double gamma = 2.0;
  double lambda1 = 0.3;
  double lambda2 = 0.3;
  /// Patch-IoU selects anchors whose assigned gt overlaps more than this.
  double iou_select = 0.6;
  PatchPlacement placement;
  int epochs = 100;
  int batch_size = 8;
  double step_size = 10.0;
  double momentum = 0.9;
  /// Multiply the step by 0.1 at 60% and again at 80% of the epochs.
  bool lr_decay = true;
  std::uint64_t seed = 0;

  double score_floor() const { return delta - margin; }

  void validate() const {
    if (!(0 < delta - margin && delta - margin < delta && delta < 1))
      throw ConfigError("attack: need 0 < delta - margin < delta < 1");
    if (!(lambda1 > 0 && lambda1 < 1 && lambda2 > 0 && lambda2 < 1)) throw ConfigError("attack: lambda1, lambda2 must lie in (0, 1)");
    if (!(gamma >= 0)) throw ConfigError("attack: gamma must be non-negative");
    if (!(iou_select >= 0 && iou_select < 1)) throw ConfigError("attack: iou_select must lie in [0, 1)");
    if (!(placement.alpha > 0 && placement.alpha < 1)) throw ConfigError("attack: alpha must lie in (0, 1)");
    if (epochs < 0 || batch_size < 1) throw ConfigError("attack: epochs >= 0 and batch_size >= 1 required");
    if (!(step_size > 0) || !std::isfinite(step_size)) throw ConfigError("attack: step_size must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("attack: momentum must lie in [0, 1)");
  }

  double step_at(int epoch) const {
    if (!lr_decay) return step_size;
    double s = step_size;
    if (epoch >= static_cast<int>(0.6 * epochs)) s *= 0.1;
    if (epoch >= static_cast<int>(0.8 * epochs)) s *= 0.1;
    return s;
  }
};

struct AdversarialSample {
  std::size_t anchor_index = 0;
  BoundingBox anchor;
  int gt_index = -1;  ///< highest-IoU gt, -1 when the image has none
  BoundingBox gt_box;
  double score = 0;
  std::optional<BoundingBox> patch_region;  ///< region pasted on gt_index
};

/// Selects adversarial samples in anchor order. `regions[g]` is where the patch
/// was pasted for gt g (nullopt when it missed the image).
inline std::vector<AdversarialSample> select_samples(Strategy strategy, std::span<const double> scores,
                                                     std::span<const BoundingBox> anchors, std::span<const BoundingBox> gt,
                                                     std::span<const std::optional<BoundingBox>> regions, const AttackConfig& cfg) {
  if (scores.size() != anchors.size()) throw ShapeError("select_samples: scores and anchors differ in length");
  if (regions.size() != gt.size()) throw ShapeError("select_samples: one patch region per gt box required");
  std::vector<AdversarialSample> out;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    int best = -1;
    double best_iou = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[i], gt[g]);
      if (best < 0 || v > best_iou) best = static_cast<int>(g), best_iou = v;
    }
    const double s = scores[i];
    bool take = false;
    switch (strategy) {
      case Strategy::PatchIoU: take = best >= 0 && best_iou > cfg.iou_select; break;
      case Strategy::PatchScore:
      case Strategy::PatchScoreFocal: take = s > cfg.score_floor(); break;
      case Strategy::PatchCombination: {
        if (!(s > cfg.score_floor())) break;
        take = best >= 0 && best_iou > cfg.lambda1;
        for (std::size_t g = 0; !take && g < regions.size(); ++g)
          take = regions[g] && iou(anchors[i], *regions[g]) > cfg.lambda2;
        break;
      }
    }
    if (!take) continue;
    AdversarialSample a;
    a.anchor_index = i;
    a.anchor = anchors[i];
    a.gt_index = best;
    a.score = s;
    if (best >= 0) {
      a.gt_box = gt[static_cast<std::size_t>(best)];
      a.patch_region = regions[static_cast<std::size_t>(best)];
    }
    out.push_back(a);
  }
  return out;
}

inline bool uses_focal(Strategy s) { return s == Strategy::PatchScoreFocal; }

/// Adversarial loss from log face probabilities of the selected samples:
/// -mean(log S), or -mean(S^gamma log S) for the focal strategy. Zero for no samples.
template <class T>
ad::Var<T> attack_objective(const ad::Var<T>& log_scores, Strategy strategy, double gamma) {
  using namespace ad;
  Graph<T>& g = log_scores.graph();
  if (log_scores.value().numel() == 0) return g.constant(Tensor<T>({1, 1, 1, 1}, T(0)));
  if (!uses_focal(strategy)) return neg(mean(log_scores));
  const auto weight = exp(scale(log_scores, static_cast<T>(gamma)));
  return neg(mean(mul(weight, log_scores)));
}

/// Value of the adversarial loss for already scored samples.
inline double attack_loss(const std::vector<AdversarialSample>& samples, Strategy strategy, double gamma = 2.0) {
  ad::Graph<double> g;
  Tensor<double> ls({1, 1, 1, static_cast<int>(samples.size())});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!(samples[i].score > 0 && samples[i].score <= 1)) throw ConfigError("attack_loss: scores must lie in (0, 1]");
    ls[i] = std::log(samples[i].score);
  }
  if (samples.empty()) ls = Tensor<double>({1, 1, 1, 0});
  return attack_objective(g.constant(ls), strategy, gamma).value().item();
}

/// Log face probability of every anchor of image 0, in anchor order, shape (1, 1, 1, K).
template <class T>
ad::Var<T> log_face_scores(const Heads<T>& heads) {
  const Shape cs = heads.cls.shape();
  const auto lp = ad::log_softmax_channel(ad::reshape(heads.cls, Shape{cs.n * heads.num_anchors, 2, cs.h, cs.w}));
  const std::size_t K = static_cast<std::size_t>(cs.h) * static_cast<std::size_t>(cs.w) * static_cast<std::size_t>(heads.num_anchors);
  std::vector<std::size_t> idx(K);
  for (std::size_t k = 0; k < K; ++k) idx[k] = head_offset(0, k, 0, 2, heads.num_anchors, cs.h, cs.w);
  return ad::reshape(ad::gather(lp, std::move(idx)), Shape{1, 1, 1, static_cast<int>(K)});
}

template <class T>
struct AttackImageLoss {
  ad::Var<T> loss;
  std::vector<AdversarialSample> samples;
  bool any_outside = false;
};

/// Pastes the patch on every gt box, runs the detector and builds the adversarial
/// loss. With `fixed`, those anchor indices are used instead of re-selecting.
template <class T>
AttackImageLoss<T> attack_image_loss(const DetectorArch& arch, const std::vector<ad::Var<T>>& params, const ad::Var<T>& image,
                                     const ad::Var<T>& patch, const std::vector<BoundingBox>& gt, const AttackConfig& cfg,
                                     const std::vector<std::size_t>* fixed = nullptr) {
  const auto regions = patch_regions(gt, cfg.placement);
  const auto pasted = ad::paste_patches(image, patch, std::span<const BoundingBox>(regions));
  const auto heads = forward(arch, params, pasted.image);
  const auto log_s = log_face_scores(heads);
  const Shape cs = heads.cls.shape();
  const auto anchors = tile_anchors(arch.grid(cs.h * arch.stride(), cs.w * arch.stride()));
  std::vector<double> scores(anchors.size());
  for (std::size_t k = 0; k < scores.size(); ++k) scores[k] = std::exp(static_cast<double>(log_s.value()[k]));
  AttackImageLoss<T> out;
  out.any_outside = pasted.any_outside;
  out.samples = select_samples(cfg.strategy, scores, anchors, gt, pasted.drawn, cfg);
  std::vector<std::size_t> idx;
  if (fixed) {
    idx = *fixed;
  } else {
    for (const auto& s : out.samples) idx.push_back(s.anchor_index);
  }
  const auto picked = idx.empty() ? log_s.graph().constant(Tensor<T>({1, 1, 1, 0})) : ad::gather(log_s, idx);
  out.loss = attack_objective(picked, cfg.strategy, cfg.gamma);
  return out;
}

// ---------------------------------------------------------------------------
// Patch initialization and storage

struct Patch {
  Tensor<float> pixels;
  std::string init = "random";
  int epochs_trained = 0;
};

inline Patch init_patch_random(std::uint64_t seed, int size = kPatchSize) {
  Rng rng(derive_seed(seed, {0x9a7c}));
  Patch p{Tensor<float>({1, 3, size, size}), "random:" + std::to_string(seed), 0};
  for (std::size_t i = 0; i < p.pixels.numel(); ++i) p.pixels[i] = static_cast<float>(rng.uniform());
  return p;
}

inline Patch init_patch_image(const std::filesystem::path& path, int size = kPatchSize) {
  auto img = read_ppm(path);
  if (img.shape().h != size || img.shape().w != size) img = resize_bilinear(img, size, size);
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = std::clamp(img[i], 0.0f, 1.0f);
  return {std::move(img), "image:" + path.filename().string(), 0};
}

inline std::string patch_tag(const Tensor<float>& pixels) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < pixels.numel(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(pixels[i]);
    for (int b = 0; b < 4; ++b) h = (h ^ ((bits >> (8 * b)) & 0xff)) * 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string("patch-") + std::string(buf, 12);
}

/// Writes dir/patch.ppm (preview) and dir/patch.bin (exact pixels plus metadata).
inline void save_patch(const std::filesystem::path& dir, const Patch& p, const nlohmann::json& meta = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  write_ppm(dir / "patch.ppm", p.pixels);
  FloatBlob blob;
  blob.header = {{"format", kPatchFormat},
                 {"shape", {p.pixels.shape().n, p.pixels.shape().c, p.pixels.shape().h, p.pixels.shape().w}},
                 {"init", p.init},
                 {"epochs", p.epochs_trained},
                 {"tag", patch_tag(p.pixels)},
                 {"meta", meta}};
  blob.blocks.emplace_back(p.pixels.data(), p.pixels.data() + p.pixels.numel());
  write_blob(dir / "patch.bin", blob);
}

/// Accepts the artifact directory or the .bin file itself.
inline Patch load_patch(const std::filesystem::path& where) {
  const auto path = std::filesystem::is_directory(where) ? where / "patch.bin" : where;
  const auto blob = read_blob(path);
  try {
    if (blob.header.at("format") != kPatchFormat) throw IoError(path.string() + " is not a patch file");
    const auto shape = blob.header.at("shape").get<std::vector<int>>();
    if (shape.size() != 4 || shape[0] != 1 || shape[1] != 3) throw IoError("bad patch shape in " + path.string());
    const Shape s{shape[0], shape[1], shape[2], shape[3]};
    if (blob.blocks.size() != 1 || blob.blocks[0].size() != s.numel()) throw IoError("patch payload size mismatch in " + path.string());
    Patch p{Tensor<float>(s, blob.blocks[0]), blob.header.at("init").get<std::string>(), blob.header.at("epochs").get<int>()};
    for (std::size_t i = 0; i < p.pixels.numel(); ++i)
      if (!(p.pixels[i] >= 0.f && p.pixels[i] <= 1.f)) throw IoError("patch pixel outside [0, 1] in " + path.string());
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad patch header in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Optimization

struct AttackEpochLog {
  int epoch = 0;
  double step = 0;
  double mean_loss = 0;          ///< over images
  double mean_selected_score = 0;  ///< over all selected samples of the epoch
  std::size_t selected = 0;
  std::size_t empty_images = 0;
  double probe_precision = 1;
  double probe_recall = 1;
  double seconds = 0;
};

struct AttackResult {
  Patch patch;
  std::vector<AttackEpochLog> log;
};

using AttackCallback = std::function<void(const AttackEpochLog&)>;

struct ImageGradient {
  double loss = 0;
  double score_sum = 0;
  std::size_t selected = 0;
  Tensor<float> grad;
};

inline ImageGradient patch_gradient(const DetectorModel& model, const LabeledImage& img, const Tensor<float>& patch,
                                    const AttackConfig& cfg) {
  ad::Graph<float> g;
  const auto params = constant_params(g, model);
  const auto image = g.constant(pad_to_multiple(img.image, kInputMultiple, 0.5f));
  const auto pv = g.leaf(patch, true);
  const auto r = attack_image_loss(model.arch, params, image, pv, img.boxes, cfg);
  ImageGradient out;
  out.loss = r.loss.value().item();
  out.selected = r.samples.size();
  for (const auto& s : r.samples) out.score_sum += s.score;
  if (r.samples.empty()) {
    out.grad = Tensor<float>(patch.shape());
    return out;
  }
  g.backward(r.loss);
  out.grad = g.grad(pv);
  return out;
}

/// Recall and precision at delta on probe images with the patch pasted.
inline PR probe_metrics(const DetectorModel& model, const std::vector<LabeledImage>& probe, const Tensor<float>& patch,
                        const AttackConfig& cfg) {
  EvalSettings es;
  es.delta = cfg.delta;
  es.curve_min_score = cfg.delta;
  const auto run = run_detector(model, probe, PatchSetup{patch, cfg.placement}, es);
  return precision_recall(run.detections, run.gt, MatchProtocol{}, cfg.delta).all();
}

/// Gradient ascent on the patch pixels; the detector must be frozen. Steps
/// follow mini-batches of shuffled images, each averaging per-image gradients
/// summed in index order, and are followed by a clamp to [0, 1].
inline AttackResult optimize_patch(const DetectorModel& model, const std::vector<LabeledImage>& data,
                                   const std::vector<LabeledImage>& probe, const AttackConfig& cfg, Patch init,
                                   const AttackCallback& on_epoch = {}) {
  if (!model.frozen) throw ContractError("optimize_patch: detector must be frozen");
  cfg.validate();
  if (data.empty() && cfg.epochs > 0) throw ConfigError("optimize_patch: empty attack set");
  AttackResult result;
  result.patch = std::move(init);
  Tensor<float>& P = result.patch.pixels;
  Tensor<float> velocity(P.shape());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng order_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x5a}));
    order_rng.shuffle(order);
    AttackEpochLog log;
    log.epoch = epoch;
    log.step = cfg.step_at(epoch);
    double score_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<ImageGradient> parts(stop - start);
      parallel_for(parts.size(), [&](std::size_t b) { parts[b] = patch_gradient(model, data[order[start + b]], P, cfg); });
      Tensor<float> grad(P.shape());
      for (const auto& part : parts) {
        for (std::size_t k = 0; k < grad.numel(); ++k) grad[k] += part.grad[k];
        log.mean_loss += part.loss;
        score_sum += part.score_sum;
        log.selected += part.selected;
        log.empty_images += part.selected == 0;
      }
      const float inv = 1.0f / static_cast<float>(parts.size());
      const auto step = static_cast<float>(log.step), mu = static_cast<float>(cfg.momentum);
      for (std::size_t k = 0; k < P.numel(); ++k) {
        velocity[k] = mu * velocity[k] + grad[k] * inv;
        P[k] = std::clamp(P[k] + step * velocity[k], 0.0f, 1.0f);
        if (!std::isfinite(P[k])) throw NumericError("patch pixel became non-finite at epoch " + std::to_string(epoch));
      }
      for (std::size_t k = 0; k < P.numel(); ++k)
        if (!(P[k] >= 0.f && P[k] <= 1.f)) throw ContractError("patch pixel escaped [0, 1]");
    }
    log.mean_loss /= static_cast<double>(data.size());
    log.mean_selected_score = log.selected ? score_sum / static_cast<double>(log.selected) : 0.0;
    if (!probe.empty()) {
      const PR pr = probe_metrics(model, probe, P, cfg);
      log.probe_precision = pr.precision;
      log.probe_recall = pr.recall;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++result.patch.epochs_trained;
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

}  // namespace patchforge
