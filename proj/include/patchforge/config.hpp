#pragma once

// Experiment configuration document. JSON, every key optional, unknown keys
// rejected. The canonical form is the full dump with all defaults filled in;
// its FNV-1a digest is the config hash written into manifests.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "patchforge/detector.hpp"
#include "patchforge/eval.hpp"
#include "patchforge/hash.hpp"
#include "patchforge/patchopt.hpp"
#include "patchforge/synthdata.hpp"

namespace patchforge {

struct ExperimentConfig {
  SceneSpec data;
  DetectorArch detector;
  std::uint64_t detector_seed = 0;
  TrainConfig train;
  AttackConfig attack;
  std::uint64_t patch_init_seed = 0;
  EvalSettings eval;
  double scale_fraction = 1.0;
  std::vector<double> sweep_scales{0.9, 0.8, 0.7, 0.6};
  std::string output_dir = ".";

  /// Scene spec with the anchor grid of the configured detector filled in.
  SceneSpec scene() const {
    SceneSpec s = data;
    s.anchors = detector.grid(s.image_height, s.image_width);
    return s;
  }

  void validate() const {
    scene().validate();
    detector.validate();
    train.validate();
    attack.validate();
    eval.validate();
    if (!(scale_fraction > 0 && scale_fraction <= 1)) throw ConfigError("eval.scale_fraction must lie in (0, 1]");
    if (sweep_scales.empty()) throw ConfigError("sweep.scales must not be empty");
    for (double s : sweep_scales)
      if (!(s > 0 && s <= 1)) throw ConfigError("sweep.scales entries must lie in (0, 1]");
  }
};

namespace detail {

/// Reads keys out of one JSON object and remembers which ones were used.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      j_.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
    }
  }

  template <class Fn>
  void get_as(const std::string& key, Fn&& parse) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError("config key '" + name_ + "." + key + "' must be a string");
    parse(j_.at(key).get<std::string>());
  }

  std::optional<Section> sub(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), name_.empty() ? key : name_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + (name_.empty() ? k : name_ + "." + k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& d = c.data;
  const auto& t = c.train;
  const auto& a = c.attack;
  const auto& e = c.eval;
  json j;
  j["data"] = {{"image_height", d.image_height}, {"image_width", d.image_width}, {"faces_min", d.faces_min},
               {"faces_max", d.faces_max},       {"face_min", d.face_min},       {"face_max", d.face_max},
               {"template_family", d.template_family}, {"background_family", d.background_family},
               {"seed", d.seed},                 {"max_pair_iou", d.max_pair_iou}, {"min_anchor_iou", d.min_anchor_iou},
               {"max_attempts", d.max_attempts}};
  j["detector"] = {{"widths", c.detector.widths}, {"head_width", c.detector.head_width},
                   {"anchor_scales", c.detector.anchor_scales}, {"seed", c.detector_seed}};
  j["train"] = {{"lr", t.lr},
                {"decay_epochs", t.decay_epochs},
                {"decay_factor", t.decay_factor},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"seed", t.seed},
                {"augment", t.augment},
                {"flip_prob", t.augmentation.flip_prob},
                {"jitter_factors", t.augmentation.jitter_factors},
                {"max_side", t.augmentation.max_side},
                {"pos_iou", t.loss.pos_iou},
                {"neg_iou", t.loss.neg_iou},
                {"neg_ratio", t.loss.neg_ratio},
                {"min_negatives", t.loss.min_negatives}};
  j["attack"] = {{"strategy", to_string(a.strategy)},
                 {"delta", a.delta},
                 {"margin", a.margin},
                 {"gamma", a.gamma},
                 {"lambda1", a.lambda1},
                 {"lambda2", a.lambda2},
                 {"iou_select", a.iou_select},
                 {"alpha", a.placement.alpha},
                 {"placement", std::string(to_string(a.placement.location))},
                 {"epochs", a.epochs},
                 {"batch_size", a.batch_size},
                 {"step_size", a.step_size},
                 {"momentum", a.momentum},
                 {"lr_decay", a.lr_decay},
                 {"seed", a.seed},
                 {"init_seed", c.patch_init_seed}};
  j["eval"] = {{"delta", e.delta},
               {"nms_thresh", e.nms_thresh},
               {"match_iou", e.match_iou},
               {"criterion2_iou", e.criterion2_iou},
               {"betas", e.betas},
               {"grid_points", e.grid_points},
               {"curve_min_score", e.curve_min_score},
               {"pyramid", e.pyramid},
               {"criterion1_max_recall", e.criterion1_max_recall},
               {"scale_fraction", c.scale_fraction}};
  j["sweep"] = {{"scales", c.sweep_scales}};
  j["output"] = {{"dir", c.output_dir}};
  return j;
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::Section root(j, "");
  if (auto s = root.sub("data")) {
    auto& d = c.data;
    s->get("image_height", d.image_height);
    s->get("image_width", d.image_width);
    s->get("faces_min", d.faces_min);
    s->get("faces_max", d.faces_max);
    s->get("face_min", d.face_min);
    s->get("face_max", d.face_max);
    s->get("template_family", d.template_family);
    s->get("background_family", d.background_family);
    s->get("seed", d.seed);
    s->get("max_pair_iou", d.max_pair_iou);
    s->get("min_anchor_iou", d.min_anchor_iou);
    s->get("max_attempts", d.max_attempts);
    s->finish();
  }
  if (auto s = root.sub("detector")) {
    s->get("widths", c.detector.widths);
    s->get("head_width", c.detector.head_width);
    s->get("anchor_scales", c.detector.anchor_scales);
    s->get("seed", c.detector_seed);
    s->finish();
  }
  if (auto s = root.sub("train")) {
    auto& t = c.train;
    s->get("lr", t.lr);
    s->get("decay_epochs", t.decay_epochs);
    s->get("decay_factor", t.decay_factor);
    s->get("epochs", t.epochs);
    s->get("batch_size", t.batch_size);
    s->get("momentum", t.momentum);
    s->get("weight_decay", t.weight_decay);
    s->get("seed", t.seed);
    s->get("augment", t.augment);
    s->get("flip_prob", t.augmentation.flip_prob);
    s->get("jitter_factors", t.augmentation.jitter_factors);
    s->get("max_side", t.augmentation.max_side);
    s->get("pos_iou", t.loss.pos_iou);
    s->get("neg_iou", t.loss.neg_iou);
    s->get("neg_ratio", t.loss.neg_ratio);
    s->get("min_negatives", t.loss.min_negatives);
    s->finish();
  }
  if (auto s = root.sub("attack")) {
    auto& a = c.attack;
    s->get_as("strategy", [&](const std::string& v) { a.strategy = parse_strategy(v); });
    s->get("delta", a.delta);
    s->get("margin", a.margin);
    s->get("gamma", a.gamma);
    s->get("lambda1", a.lambda1);
    s->get("lambda2", a.lambda2);
    s->get("iou_select", a.iou_select);
    s->get("alpha", a.placement.alpha);
    s->get_as("placement", [&](const std::string& v) { a.placement.location = parse_location(v); });
    s->get("epochs", a.epochs);
    s->get("batch_size", a.batch_size);
    s->get("step_size", a.step_size);
    s->get("momentum", a.momentum);
    s->get("lr_decay", a.lr_decay);
    s->get("seed", a.seed);
    s->get("init_seed", c.patch_init_seed);
    s->finish();
  }
  if (auto s = root.sub("eval")) {
    auto& e = c.eval;
    s->get("delta", e.delta);
    s->get("nms_thresh", e.nms_thresh);
    s->get("match_iou", e.match_iou);
    s->get("criterion2_iou", e.criterion2_iou);
    s->get("betas", e.betas);
    s->get("grid_points", e.grid_points);
    s->get("curve_min_score", e.curve_min_score);
    s->get("pyramid", e.pyramid);
    s->get("criterion1_max_recall", e.criterion1_max_recall);
    s->get("scale_fraction", c.scale_fraction);
    s->finish();
  }
  if (auto s = root.sub("sweep")) {
    s->get("scales", c.sweep_scales);
    s->finish();
  }
  if (auto s = root.sub("output")) {
    s->get("dir", c.output_dir);
    s->finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string canonical_config(const ExperimentConfig& c) { return to_json(c).dump(); }

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(canonical_config(c))); }

}  // namespace patchforge
