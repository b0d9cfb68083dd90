// patchforge: dataset generation, detector training, patch optimization,
// evaluation and sweeps. Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "patchforge/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace patchforge;

namespace {

constexpr const char* kToolVersion = "patchforge 0.1.0";

class UsageError : public Error {
 public:
  using Error::Error;
};

fs::path output_path(const ExperimentConfig& cfg, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : fs::path(cfg.output_dir) / q;
}

/// Digest of a file, or of every regular file under a directory (sorted by
/// relative path, manifests excluded).
std::string artifact_hash(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing artifact: " + p.string());
  if (!fs::is_directory(p)) return hex64(hash_file(p));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(fs::relative(e.path(), p));
  std::sort(files.begin(), files.end());
  Fnv1a h;
  for (const auto& f : files) {
    h.update(f.generic_string());
    const auto v = hash_file(p / f);
    h.update(&v, sizeof v);
  }
  return hex64(h.digest());
}

class Manifest {
 public:
  Manifest(const std::string& command, const ExperimentConfig& cfg, std::uint64_t seed) {
    j_["command"] = command;
    j_["tool_version"] = kToolVersion;
    j_["config_hash"] = config_hash(cfg);
    j_["config"] = to_json(cfg);
    j_["seed"] = seed;
    j_["inputs"] = json::object();
    j_["outputs"] = json::object();
  }
  void input(const std::string& name, const fs::path& p) {
    j_["inputs"][name] = {{"path", p.generic_string()}, {"hash", artifact_hash(p)}};
  }
  void output(const std::string& name, const fs::path& p) { j_["outputs"][name] = artifact_hash(p); }
  void param(const std::string& name, json v) { j_["params"][name] = std::move(v); }
  void write(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j_.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
  }

 private:
  json j_;
};

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

Tensor<float> blank_patch() {
  Tensor<float> t({1, 3, kPatchSize, kPatchSize});
  t.fill(0.5f);
  return t;
}

struct LoadedPatch {
  Tensor<float> pixels;
  std::string tag;
};

/// "blank" is a uniform gray patch, the control for patch content.
LoadedPatch load_patch_arg(const std::string& arg, Manifest& m, const std::string& name) {
  if (arg == "blank") return {blank_patch(), "blank"};
  m.input(name, arg);
  const auto p = load_patch(arg);
  return {p.pixels, patch_tag(p.pixels)};
}

DetectorModel load_detector_arg(const std::string& path, Manifest& m, const std::string& name) {
  m.input(name, path);
  auto d = load_checkpoint(path);
  freeze(d);
  return d;
}

std::vector<LabeledImage> load_data_arg(const std::string& dir, Manifest& m, const std::string& name) {
  m.input(name, dir);
  return read_dataset(dir);
}

void check_csv(std::ofstream& out, const fs::path& p) {
  if (!out) throw IoError("write failed: " + p.string());
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  long long count = -1;
  std::optional<std::uint64_t> seed;
  std::uint64_t first_index = 0;
  bool force = false;
};

int cmd_gen_data(const ExperimentConfig& cfg, const GenDataArgs& a) {
  if (a.count < 1) throw UsageError("gen-data: --count must be >= 1");
  const fs::path dir = output_path(cfg, a.out);
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError("gen-data: " + dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!a.force) throw UsageError("gen-data: " + dir.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  SceneSpec spec = cfg.scene();
  if (a.seed) spec.seed = *a.seed;
  const auto data = generate(spec, static_cast<std::size_t>(a.count), a.first_index);
  write_dataset(dir, data);
  Manifest m("gen-data", cfg, spec.seed);
  m.param("count", a.count);
  m.param("first_index", a.first_index);
  m.output("dataset", dir);
  m.write(dir / "manifest.json");
  std::fprintf(stderr, "wrote %lld images to %s\n", a.count, dir.string().c_str());
  return 0;
}

struct TrainArgs {
  std::string data, out;
};

int cmd_train(const ExperimentConfig& cfg, const TrainArgs& a) {
  const fs::path out = output_path(cfg, a.out);
  Manifest m("train", cfg, cfg.train.seed);
  const auto data = load_data_arg(a.data, m, "data");
  auto model = init_detector(cfg.detector, cfg.detector_seed);
  model.train_config = to_json(cfg)["train"];
  const auto r = train(std::move(model), data, cfg.train, [](const EpochLog& l) {
    std::fprintf(stderr, "epoch %d lr %g loss %.4f (pos %.4f neg %.4f reg %.4f) %.1fs\n", l.epoch, l.lr, l.total, l.pos_cls,
                 l.neg_cls, l.reg, l.seconds);
  });
  ensure_parent(out);
  save_checkpoint(out, r.model);
  const fs::path log_path = out.string() + ".log.csv";
  std::ofstream log(log_path);
  log << "epoch,lr,total,pos_cls,neg_cls,reg\n";
  for (const auto& l : r.log)
    log << l.epoch << ',' << format_number(l.lr) << ',' << format_number(l.total) << ',' << format_number(l.pos_cls) << ','
        << format_number(l.neg_cls) << ',' << format_number(l.reg) << '\n';
  check_csv(log, log_path);
  log.close();
  m.param("detector_tag", r.model.tag());
  m.output("checkpoint", out);
  m.output("log", log_path);
  m.write(out.string() + ".manifest.json");
  std::fprintf(stderr, "saved %s (%s)\n", out.string().c_str(), r.model.tag().c_str());
  return 0;
}

struct AttackArgs {
  std::string detector, data, strategy, init = "random", out, probe;
};

int cmd_attack(const ExperimentConfig& cfg_in, const AttackArgs& a) {
  ExperimentConfig cfg = cfg_in;
  if (!a.strategy.empty()) cfg.attack.strategy = parse_strategy(a.strategy);
  const fs::path dir = output_path(cfg, a.out);
  Manifest m("attack", cfg, cfg.attack.seed);
  const auto model = load_detector_arg(a.detector, m, "detector");
  const auto data = load_data_arg(a.data, m, "data");
  std::vector<LabeledImage> probe;
  if (!a.probe.empty()) probe = load_data_arg(a.probe, m, "probe");
  Patch init;
  if (a.init == "random") {
    init = init_patch_random(cfg.patch_init_seed);
  } else {
    m.input("init", a.init);
    init = init_patch_image(a.init);
  }
  const auto r = optimize_patch(model, data, probe, cfg.attack, std::move(init), [&](const AttackEpochLog& l) {
    std::fprintf(stderr, "epoch %d step %g loss %.4f mean S %.4f selected %zu", l.epoch, l.step, l.mean_loss,
                 l.mean_selected_score, l.selected);
    if (!probe.empty()) std::fprintf(stderr, " probe P %.3f R %.3f", l.probe_precision, l.probe_recall);
    std::fprintf(stderr, " %.1fs\n", l.seconds);
  });
  save_patch(dir, r.patch,
             {{"strategy", to_string(cfg.attack.strategy)}, {"detector", model.tag()}, {"config_hash", config_hash(cfg)}});
  const fs::path diag = dir / "diagnostics.csv";
  std::ofstream out(diag);
  out << "epoch,step,mean_loss,mean_selected_score,selected,empty_images,probe_precision,probe_recall\n";
  for (const auto& l : r.log)
    out << l.epoch << ',' << format_number(l.step) << ',' << format_number(l.mean_loss) << ','
        << format_number(l.mean_selected_score) << ',' << l.selected << ',' << l.empty_images << ','
        << format_number(l.probe_precision) << ',' << format_number(l.probe_recall) << '\n';
  check_csv(out, diag);
  out.close();
  m.param("strategy", to_string(cfg.attack.strategy));
  m.param("init", r.patch.init);
  m.param("patch_tag", patch_tag(r.patch.pixels));
  m.output("patch", dir / "patch.bin");
  m.output("preview", dir / "patch.ppm");
  m.output("diagnostics", diag);
  m.write(dir / "manifest.json");
  std::fprintf(stderr, "saved %s (%s)\n", dir.string().c_str(), patch_tag(r.patch.pixels).c_str());
  return 0;
}

struct EvalArgs {
  std::string detector, data, patch, partial, placement, out;
  std::optional<double> scale_fraction;
};

MetricsReport run_eval(const ExperimentConfig& cfg, const DetectorModel& model, const std::vector<LabeledImage>& data,
                       const std::optional<LoadedPatch>& patch, const PatchPlacement& placement, double scale,
                       PartialMode partial) {
  std::optional<PatchSetup> setup;
  if (patch) setup = PatchSetup{patch->pixels, placement, scale, partial};
  auto rep = evaluate(run_detector(model, data, setup, cfg.eval), cfg.eval);
  if (patch) rep.patch_tag = patch->tag;
  return rep;
}

int cmd_eval(const ExperimentConfig& cfg, const EvalArgs& a) {
  if (a.patch.empty() && (!a.partial.empty() || !a.placement.empty() || a.scale_fraction))
    throw UsageError("eval: --partial, --placement and --scale-fraction need --patch");
  const double scale = a.scale_fraction.value_or(cfg.scale_fraction);
  if (!(scale > 0 && scale <= 1)) throw UsageError("eval: --scale-fraction must lie in (0, 1]");
  PatchPlacement placement = cfg.attack.placement;
  if (!a.placement.empty()) placement.location = parse_location(a.placement);
  const PartialMode partial = a.partial.empty() ? PartialMode::None : parse_partial_mode(a.partial);
  const fs::path dir = output_path(cfg, a.out);
  Manifest m("eval", cfg, 0);
  const auto model = load_detector_arg(a.detector, m, "detector");
  const auto data = load_data_arg(a.data, m, "data");
  std::optional<LoadedPatch> patch;
  if (!a.patch.empty()) patch = load_patch_arg(a.patch, m, "patch");
  const auto rep = run_eval(cfg, model, data, patch, placement, scale, partial);
  fs::create_directories(dir);
  write_summary_csv(dir / "summary.csv", rep);
  m.output("summary.csv", dir / "summary.csv");
  for (auto b : kBuckets)
    for (std::size_t k = 0; k < rep.betas.size(); ++k) {
      const std::string name = std::string("curve_") + to_string(b) + "_beta_" + format_number(rep.betas[k]) + ".csv";
      write_curve_csv(dir / name, rep.curves[static_cast<std::size_t>(b)][k]);
      m.output(name, dir / name);
    }
  m.param("detector_tag", rep.detector_tag);
  m.param("patch_tag", rep.patch_tag);
  m.param("placement", std::string(to_string(placement.location)));
  m.param("scale_fraction", scale);
  m.param("partial", to_string(partial));
  m.write(dir / "manifest.json");
  const auto& all = rep.at_delta.all();
  std::printf("precision %.4f recall %.4f criterion2 %.4f\n", all.precision, all.recall, rep.criterion2_pass_rate);
  return 0;
}

struct SweepArgs {
  std::string axis, data, out, patch_root;
  std::vector<std::string> detectors, patches;
};

struct SweepPoint {
  std::string point;
  std::size_t detector = 0;
  std::size_t patch = 0;
  PatchPlacement placement;
  double scale = 1.0;
  PartialMode partial = PartialMode::None;
};

int cmd_sweep(const ExperimentConfig& cfg, const SweepArgs& a) {
  static const std::vector<std::string> axes{"scale", "location", "strategy", "transfer", "partial"};
  if (std::find(axes.begin(), axes.end(), a.axis) == axes.end()) throw UsageError("sweep: unknown axis '" + a.axis + "'");
  const bool transfer = a.axis == "transfer", strategy = a.axis == "strategy";
  if (a.detectors.empty()) throw UsageError("sweep: --detector is required");
  if (!transfer && a.detectors.size() != 1) throw UsageError("sweep: only the transfer axis takes several detectors");
  if (strategy) {
    if (a.patch_root.empty() || !a.patches.empty()) throw UsageError("sweep: the strategy axis takes --patch-root and no --patch");
  } else {
    if (!a.patch_root.empty()) throw UsageError("sweep: --patch-root is only used by the strategy axis");
    if (a.patches.empty()) throw UsageError("sweep: --patch is required");
    if (!transfer && a.patches.size() != 1) throw UsageError("sweep: only the transfer axis takes several patches");
  }
  const fs::path out = output_path(cfg, a.out);
  Manifest m("sweep", cfg, 0);
  m.param("axis", a.axis);
  std::vector<DetectorModel> detectors;
  for (std::size_t i = 0; i < a.detectors.size(); ++i)
    detectors.push_back(load_detector_arg(a.detectors[i], m, "detector" + std::to_string(i)));
  const auto data = load_data_arg(a.data, m, "data");
  std::vector<LoadedPatch> patches;
  std::vector<SweepPoint> points;
  const PatchPlacement base = cfg.attack.placement;
  if (strategy) {
    for (auto s : kAllStrategies) {
      const fs::path dir = fs::path(a.patch_root) / to_string(s);
      patches.push_back(load_patch_arg(dir.string(), m, to_string(s)));
      points.push_back({to_string(s), 0, patches.size() - 1, base, cfg.scale_fraction, PartialMode::None});
    }
  } else {
    for (std::size_t i = 0; i < a.patches.size(); ++i) patches.push_back(load_patch_arg(a.patches[i], m, "patch" + std::to_string(i)));
  }
  if (a.axis == "scale") {
    for (double s : cfg.sweep_scales) points.push_back({format_number(s), 0, 0, base, s, PartialMode::None});
  } else if (a.axis == "location") {
    for (auto loc : kAllLocations) {
      PatchPlacement p = base;
      p.location = loc;
      points.push_back({std::string(to_string(loc)), 0, 0, p, cfg.scale_fraction, PartialMode::None});
    }
  } else if (a.axis == "partial") {
    points.push_back({"none", 0, 0, base, cfg.scale_fraction, PartialMode::None});
    for (auto mode : kPartialModes) points.push_back({to_string(mode), 0, 0, base, cfg.scale_fraction, mode});
  } else if (transfer) {
    for (std::size_t d = 0; d < detectors.size(); ++d)
      for (std::size_t p = 0; p < patches.size(); ++p)
        points.push_back({"d" + std::to_string(d) + "/p" + std::to_string(p), d, p, base, cfg.scale_fraction, PartialMode::None});
  }
  ensure_parent(out);
  std::ofstream csv(out);
  csv << "axis,point,detector,patch,precision,recall";
  for (double b : cfg.eval.betas) csv << ',' << beta_column(b);
  csv << ",criterion1,criterion2\n";
  for (const auto& pt : points) {
    const auto rep = run_eval(cfg, detectors[pt.detector], data, patches[pt.patch], pt.placement, pt.scale, pt.partial);
    const auto& all = rep.at_delta.all();
    csv << a.axis << ',' << pt.point << ',' << rep.detector_tag << ',' << rep.patch_tag << ',' << format_number(all.precision)
        << ',' << format_number(all.recall);
    for (std::size_t k = 0; k < rep.betas.size(); ++k) csv << ',' << format_number(rep.af(Bucket::All, k));
    csv << ',' << (rep.criterion1[3] ? 1 : 0) << ',' << format_number(rep.criterion2_pass_rate) << '\n';
    std::fprintf(stderr, "%s %s: precision %.4f recall %.4f\n", a.axis.c_str(), pt.point.c_str(), all.precision, all.recall);
  }
  check_csv(csv, out);
  csv.close();
  m.param("points", points.size());
  m.output("table", out);
  m.write(out.string() + ".manifest.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial patch experiments on a synthetic face detection benchmark"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "JSON config file (defaults apply to missing keys)");

  auto* print = app.add_subcommand("config", "Print the canonical config with all defaults");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_option("--count", gd.count, "Number of images")->required();
  gen->add_option("--seed", gd.seed, "Scene seed (overrides data.seed)");
  gen->add_option("--first-index", gd.first_index, "Index of the first image");
  gen->add_flag("--force", gd.force, "Replace a non-empty output directory");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a detector");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Checkpoint path")->required();

  AttackArgs aa;
  auto* at = app.add_subcommand("attack", "Optimize a universal patch against a frozen detector");
  at->add_option("--detector", aa.detector, "Checkpoint")->required();
  at->add_option("--data", aa.data, "Attack dataset directory")->required();
  at->add_option("--strategy", aa.strategy, "patch_iou, patch_score, patch_score_focal or patch_combination");
  at->add_option("--init", aa.init, "random or a PPM image");
  at->add_option("--probe", aa.probe, "Held-out dataset for per-epoch diagnostics");
  at->add_option("--out", aa.out, "Patch directory")->required();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a detector, optionally under a patch");
  ev->add_option("--detector", ea.detector, "Checkpoint")->required();
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--patch", ea.patch, "Patch directory, patch.bin, or 'blank'");
  ev->add_option("--partial", ea.partial, "Removal mode such as half-top or third-left");
  ev->add_option("--scale-fraction", ea.scale_fraction, "Patch scale relative to alpha");
  ev->add_option("--placement", ea.placement, "top, center-top-mid, center, center-bottom-mid or bottom");
  ev->add_option("--out", ea.out, "Output directory")->required();

  SweepArgs sa;
  auto* sw = app.add_subcommand("sweep", "Evaluate over one experiment axis");
  sw->add_option("--axis", sa.axis, "scale, location, strategy, transfer or partial")->required();
  sw->add_option("--detector", sa.detectors, "Checkpoint (repeat for transfer)")->required();
  sw->add_option("--data", sa.data, "Dataset directory")->required();
  sw->add_option("--patch", sa.patches, "Patch directory or 'blank' (repeat for transfer)");
  sw->add_option("--patch-root", sa.patch_root, "Directory with one patch per strategy name");
  sw->add_option("--out", sa.out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    cfg.validate();
    if (print->parsed()) {
      std::cout << to_json(cfg).dump(2) << '\n';
      return 0;
    }
    if (gen->parsed()) return cmd_gen_data(cfg, gd);
    if (tr->parsed()) return cmd_train(cfg, ta);
    if (at->parsed()) return cmd_attack(cfg, aa);
    if (ev->parsed()) return cmd_eval(cfg, ea);
    if (sw->parsed()) return cmd_sweep(cfg, sa);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const LayoutError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
