// eqlm: train, inspect and evaluate landmark detectors from the command line.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "eqlm/checkpoint.hpp"
#include "eqlm/config.hpp"
#include "eqlm/data.hpp"
#include "eqlm/gradcheck.hpp"
#include "eqlm/image_io.hpp"
#include "eqlm/overlay.hpp"
#include "eqlm/regressor.hpp"
#include "eqlm/trainer.hpp"

using namespace eqlm;

namespace {

constexpr int kExitError = 1;
constexpr int kExitAborted = 3;

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string checkpoint;
  std::string data;
  std::string labels;
  std::string annotations;
  std::optional<int> digit;
  std::optional<int> landmarks;
  std::string norm = "width";
  std::vector<int> eyes{0, 1};
  int limit = 0;
  std::optional<int> epochs;
  std::optional<int> steps;
  bool quiet = false;
  // detect
  int scale = 0;
  // eval / regress
  std::string predictions;
  int augment = 0;
  int max_iters = RegressorFitConfig{}.max_iters;
  double threshold = 0.2;
  // warp-demo
  int count = 5;
  int index = 0;
  std::string sampler = "g2";
  // gradcheck
  int instances = GradCheckOptions{}.instances;
};

std::uint64_t seed_or(const Args& a, std::uint64_t fallback) { return a.seed.value_or(fallback); }

json read_json_file(const fs::path& p) {
  const std::string text = read_text_file(p);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw FormatError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

fs::path output_dir(const Args& a) {
  fs::create_directories(a.out);
  return a.out;
}

TrainConfig resolve_config(const Args& a, std::optional<json> base = std::nullopt) {
  TrainConfig cfg;
  if (base) from_json_into(*base, cfg, "checkpoint config");
  if (!a.config.empty()) from_json_into(read_json_file(a.config), cfg, a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.landmarks) cfg.landmarks = *a.landmarks;
  if (a.epochs) cfg.max_epochs = *a.epochs;
  if (a.steps) cfg.steps_per_epoch = *a.steps;
  cfg.validate();
  return cfg;
}

fs::path labels_for(const Args& a) {
  if (!a.labels.empty()) return a.labels;
  std::string name = fs::path(a.data).filename().string();
  for (auto [from, to] : {std::pair{"images", "labels"}, std::pair{"idx3", "idx1"}})
    if (auto pos = name.find(from); pos != std::string::npos) name.replace(pos, std::string(from).size(), to);
  const fs::path guess = fs::path(a.data).parent_path() / name;
  if (guess == fs::path(a.data) || !fs::exists(guess))
    throw ConfigError("--labels is required for IDX data (no label file next to " + a.data + ")");
  return guess;
}

// --data is an image directory, a single PNG/PGM file, or an IDX image file.
std::vector<Sample> load_dataset(const Args& a, bool need_annotations) {
  if (a.data.empty()) throw ConfigError("--data is required");
  if (!fs::exists(a.data)) throw FormatError("dataset not found: " + a.data);
  if (!a.annotations.empty() && !fs::exists(a.annotations))
    throw FormatError("annotation file not found: " + a.annotations);
  std::optional<fs::path> ann;
  if (!a.annotations.empty()) ann = a.annotations;
  std::vector<Sample> samples;
  const bool idx = !fs::is_directory(a.data) && !is_image_file(a.data);
  if (a.digit && !idx) throw ConfigError("--digit applies to IDX data only");
  if (fs::is_directory(a.data)) {
    samples = load_image_dir(a.data, ann);
  } else if (!idx) {
    samples.push_back({read_image(a.data), {}, fs::path(a.data).filename().string(), -1});
    if (ann) samples = select_annotated(std::move(samples), *ann);
  } else {
    samples = load_idx(a.data, labels_for(a), a.digit);
    if (ann) samples = select_annotated(std::move(samples), *ann);
  }
  if (a.limit > 0 && static_cast<int>(samples.size()) > a.limit) samples.resize(a.limit);
  if (samples.empty()) throw ConfigError("no samples in " + a.data);
  if (need_annotations && samples.front().annotations.empty())
    throw ConfigError("--annotations is required for this command");
  return samples;
}

Checkpoint require_checkpoint(const Args& a) {
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(a.checkpoint)) throw FormatError("checkpoint not found: " + a.checkpoint);
  return load_checkpoint(a.checkpoint);
}

PreprocessSpec checkpoint_preprocess(const Checkpoint& ck) {
  PreprocessSpec spec;
  if (ck.manifest.contains("preprocess")) from_json_into(ck.manifest.at("preprocess"), spec);
  return spec;
}

std::pair<int, int> eye_pair(const Args& a) {
  if (a.eyes.size() != 2) throw ConfigError("--eyes takes two landmark indices");
  return {a.eyes[0], a.eyes[1]};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---- commands -------------------------------------------------------------

int run_training_command(const Args& a, bool fine) {
  std::optional<Checkpoint> from;
  if (fine) from = require_checkpoint(a);
  const TrainConfig cfg = resolve_config(a, from ? std::optional<json>(from->manifest.value("train_config", json::object()))
                                                 : std::nullopt);
  const auto samples = load_dataset(a, false);
  const fs::path dir = output_dir(a);
  write_json_file(dir / "config.json", to_json(cfg));
  TrainOptions opt;
  opt.checkpoint_path = dir / "detector.ckpt";
  opt.log_path = dir / "train_log.jsonl";
  if (!a.quiet) opt.echo = &std::cout;
  try {
    const TrainResult r = fine ? finetune(*from, samples, cfg, opt) : train(samples, cfg, opt);
    std::cout << "checkpoint " << opt.checkpoint_path->string() << " (epoch " << r.checkpoint.manifest.value("epoch", 0)
              << ", val " << fmt(r.log.empty() ? 0.0 : r.log.back().value("best_val", 0.0)) << ")\n";
  } catch (const TrainingAborted& e) {
    save_checkpoint(e.last_good(), *opt.checkpoint_path);
    std::cerr << "eqlm: training aborted: " << e.what() << '\n';
    return kExitAborted;
  }
  return 0;
}

struct Readable {
  std::vector<Sample> samples;
  int failed = 0;
};

// Like load_dataset, but unreadable images in a directory are skipped with a warning.
Readable load_for_detect(const Args& a) {
  if (a.data.empty() || !fs::is_directory(a.data)) return {load_dataset(a, false), 0};
  Readable r;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.data))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      r.samples.push_back({read_image(f), {}, f.filename().string(), -1});
    } catch (const FormatError& e) {
      std::cerr << "eqlm: warning: skipping " << e.what() << '\n';
      ++r.failed;
    }
    if (a.limit > 0 && static_cast<int>(r.samples.size()) >= a.limit) break;
  }
  return r;
}

int cmd_detect(const Args& a) {
  const Checkpoint ck = require_checkpoint(a);
  const Detector<float> det = get_detector(ck);
  const PreprocessSpec spec = checkpoint_preprocess(ck);
  const Readable in = load_for_detect(a);
  if (in.samples.empty()) throw FormatError("no readable images in " + a.data);
  const fs::path dir = output_dir(a);
  fs::create_directories(dir / "overlays");
  std::ofstream coords(dir / "landmarks.txt");
  if (!coords) throw FormatError("cannot write " + (dir / "landmarks.txt").string());
  coords << "# id landmark x y (normalized, network view) px py (pixels, source image)\n";
  for (const auto& s : in.samples) {
    const Frames f = frames_for(spec, s.image.height(), s.image.width());
    const LandmarkSet view = det.detect(preprocess(s, spec)).landmarks[0];
    LandmarkSet src;
    for (std::size_t k = 0; k < view.size(); ++k) {
      const Vec2 p = f.pad.inverse(f.crop(view[k]));
      src.push_back(p);
      const Vec2 px = norm_to_pixel(p, s.image.width(), s.image.height());
      coords << s.id << ' ' << k << ' ' << fmt(view[k].x) << ' ' << fmt(view[k].y) << ' ' << fmt(px.x) << ' '
             << fmt(px.y) << '\n';
    }
    const int scale = a.scale > 0 ? a.scale : std::max(1, (128 + std::min(s.image.height(), s.image.width()) - 1) /
                                                              std::min(s.image.height(), s.image.width()));
    const std::string stem = fs::path(s.id).stem().string();
    write_png(dir / "overlays" / (stem + ".png"), overlay_landmarks(s.image, src, scale));
  }
  std::cout << in.samples.size() << " images, " << in.failed << " skipped; coordinates in "
            << (dir / "landmarks.txt").string() << '\n';
  return 0;
}

EvalReport eval_prediction_file(const Args& a, const std::vector<Sample>& truth) {
  std::map<std::string, AnnotationLine> pred;
  if (!fs::exists(a.predictions)) throw FormatError("prediction file not found: " + a.predictions);
  pred = read_annotation_file(a.predictions);
  std::vector<LandmarkSet> p, t;
  std::vector<std::string> ids;
  const int w = truth.front().image.width(), h = truth.front().image.height();
  for (const auto& s : truth) {
    if (s.image.width() != w || s.image.height() != h)
      throw ConfigError("--predictions needs images of one size; " + s.id + " differs");
    auto it = pred.find(s.id);
    if (it == pred.end()) throw FormatError(a.predictions + ": no prediction for " + s.id);
    p.push_back(annotation_landmarks(it->second, w, h));
    t.push_back(s.annotations);
    ids.push_back(s.id);
  }
  return evaluate_predictions(p, t, ids, w, h, norm_mode_from_string(a.norm), eye_pair(a));
}

void print_report(const EvalReport& r) {
  std::cout << "mean_error " << fmt(r.mean_error) << " (" << to_string(r.mode) << ") over " << r.per_image.size()
            << " images";
  if (!r.skipped.empty()) std::cout << ", " << r.skipped.size() << " skipped (zero normalization distance)";
  std::cout << '\n';
}

int cmd_eval(const Args& a) {
  const auto samples = load_dataset(a, true);
  EvalReport r;
  if (!a.predictions.empty()) {
    r = eval_prediction_file(a, samples);
  } else {
    const Checkpoint ck = require_checkpoint(a);
    const auto reg = get_regressor(ck);
    if (!reg) throw ConfigError(a.checkpoint + " has no regressor; run 'regress' first");
    r = evaluate(*reg, get_detector(ck), samples, checkpoint_preprocess(ck), norm_mode_from_string(a.norm),
                 eye_pair(a));
  }
  write_json_file(output_dir(a) / "eval.json", to_json(r));
  print_report(r);
  return 0;
}

int cmd_regress(const Args& a) {
  Checkpoint ck = require_checkpoint(a);
  const Detector<float> det = get_detector(ck);
  const PreprocessSpec spec = checkpoint_preprocess(ck);
  const auto samples = load_dataset(a, true);
  RegressorFitConfig cfg;
  cfg.seed = seed_or(a, 0);
  cfg.augment_copies = a.augment;
  cfg.max_iters = a.max_iters;
  FitTrace trace;
  const Regressor reg = fit_regressor(det, samples, spec, cfg, &trace);
  const EvalReport fit = evaluate(reg, det, samples, spec, norm_mode_from_string(a.norm), eye_pair(a));
  const fs::path dir = output_dir(a);
  put_regressor(ck, reg,
                {{"samples", samples.size()}, {"augment_copies", a.augment}, {"iterations", trace.iterations},
                 {"final_mse", trace.final_mse}, {"seed", cfg.seed}});
  save_checkpoint(ck, dir / "regressor.ckpt");
  write_json_file(dir / "fit_eval.json", to_json(fit));
  const auto edges = contribution_graph(reg, a.threshold);
  std::ofstream g(dir / "contribution_graph.txt");
  g << "# source target weight\n";
  for (const auto& e : edges) g << e.source << ' ' << e.target << ' ' << fmt(e.weight) << '\n';
  write_png(dir / "contribution_graph.png", contribution_graph_image(edges, reg.sources(), reg.targets()));
  std::cout << "regressor " << (dir / "regressor.ckpt").string() << " (" << trace.iterations << " iterations)\n";
  print_report(fit);
  return 0;
}

int cmd_warp_demo(const Args& a) {
  if (a.count < 0) throw ConfigError("--count must be >= 0");
  const TrainConfig cfg = resolve_config(a);
  WarpSamplerConfig sampler = a.sampler == "g1" ? cfg.g1 : a.sampler == "g2" ? cfg.g2 : sampler_preset(a.sampler);
  auto samples = load_dataset(a, false);
  if (a.index < 0 || a.index >= static_cast<int>(samples.size()))
    throw ConfigError("--index " + std::to_string(a.index) + " out of range (" + std::to_string(samples.size()) +
                      " samples)");
  const Sample& s = samples[a.index];
  std::vector<Tensor4<float>> strip{preprocess(s, cfg.preprocess)};
  json seeds = json::array();
  for (int i = 0; i < a.count; ++i) {
    const std::uint64_t seed = derive_seed(cfg.seed, 0xde30, static_cast<std::uint64_t>(i));
    strip.push_back(render(s.image, cfg.preprocess, sample_tps(sampler, seed)));
    seeds.push_back(seed);
  }
  const fs::path dir = output_dir(a);
  write_png(dir / "warp_demo.png", hstack(strip));
  write_json_file(dir / "warp_demo.json",
                  {{"image", s.id}, {"sampler", to_json(sampler)}, {"base_seed", cfg.seed}, {"seeds", seeds}});
  std::cout << "strip " << (dir / "warp_demo.png").string() << " (" << a.count << " warps, seeds " << seeds.dump()
            << ")\n";
  return 0;
}

int cmd_gradcheck(const Args& a) {
  GradCheckOptions opt;
  opt.seed = seed_or(a, 0);
  opt.instances = a.instances;
  bool ok = true;
  json out = json::array();
  for (const auto& r : run_gradient_suite(opt)) {
    std::printf("%-16s %3d instances  max rel error %.3e  tol %.0e  %s\n", r.name.c_str(), r.instances,
                r.max_rel_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
    out.push_back({{"name", r.name}, {"instances", r.instances}, {"max_rel_error", r.max_rel_error},
                   {"passed", r.passed()}});
    ok = ok && r.passed();
  }
  write_json_file(output_dir(a) / "gradcheck.json", out);
  return ok ? 0 : kExitError;
}

// ---- help text ------------------------------------------------------------

// Config keys whose defaults are the reference method settings.
bool reference_default(const std::string& key) {
  static const std::set<std::string> keys{"landmarks", "loss", "learning_rate", "lr_decay", "g1", "g2", "preprocess"};
  return keys.count(key) > 0;
}

std::string config_footer() {
  std::string s = "Config file keys (JSON) and defaults; [ref] marks reference settings:\n";
  const json defaults = to_json(TrainConfig{});
  for (const auto& [k, v] : defaults.items()) s += "  " + k + (reference_default(k) ? " [ref]" : "") + ": " + v.dump() + "\n";
  s += "  g1/g2 also accept a preset name (mnist_g1, mnist_g2, faces_g1, faces_g2, zero);\n";
  s += "  preprocess accepts mnist, faces or shoes.\n";
  return s;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised landmark detectors: training, detection, regression and evaluation."};
  app.require_subcommand(1, 1);
  app.footer("Run 'eqlm <command> --help' for command options.");
  Args a;
  const TrainConfig defaults;

  auto add_seed = [&](CLI::App* c, const std::string& what) {
    c->add_option("--seed", a.seed, what)->default_str("0 or config seed");
  };
  auto add_out = [&](CLI::App* c) {
    c->add_option("--out", a.out, "Output directory (created if absent)")->capture_default_str();
  };
  auto add_data = [&](CLI::App* c, bool annotations) {
    c->add_option("--data", a.data, "Image directory, PNG/PGM file or IDX image file")->default_str("none");
    c->add_option("--labels", a.labels, "IDX label file")->default_str("guessed from --data");
    c->add_option("--digit", a.digit, "Keep only this IDX label")->default_str("all");
    c->add_option("--limit", a.limit, "Use at most this many samples (0: all)")->capture_default_str();
    if (annotations)
      c->add_option("--annotations", a.annotations, "Annotation file: 'name x1 y1 ... xM yM' in pixels")
          ->default_str("none");
  };
  auto add_checkpoint = [&](CLI::App* c, const std::string& what) {
    c->add_option("--checkpoint", a.checkpoint, what)->default_str("none");
  };
  auto add_train = [&](CLI::App* c) {
    c->add_option("--config", a.config, "JSON config file; flags below override it")->default_str("none");
    c->add_option("--landmarks", a.landmarks, "Landmark count K")
        ->default_str(std::to_string(defaults.landmarks) + " [ref]");
    c->add_option("--epochs", a.epochs, "Maximum epochs")->default_str(std::to_string(defaults.max_epochs));
    c->add_option("--steps", a.steps, "Steps per epoch (0: full pass)")->default_str("0");
    c->add_flag("--quiet", a.quiet, "Do not echo metric records");
    c->footer(config_footer());
  };
  auto add_norm = [&](CLI::App* c) {
    c->add_option("--norm", a.norm, "Error normalization: iod (inter-ocular) or width")
        ->check(CLI::IsMember({"iod", "width"}))
        ->capture_default_str();
    c->add_option("--eyes", a.eyes, "Annotation indices of the two eyes for --norm iod")->expected(2)->default_str("0 1");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a detector from random initialization");
  add_train(train_cmd);
  add_data(train_cmd, false);
  add_seed(train_cmd, "Seed for initialization, splits and warps");
  add_out(train_cmd);

  auto* fine_cmd = app.add_subcommand("finetune", "Continue training a checkpoint on new data");
  fine_cmd->add_option("--checkpoint,--from", a.checkpoint, "Detector checkpoint to start from")->required();
  add_train(fine_cmd);
  add_data(fine_cmd, false);
  add_seed(fine_cmd, "Seed for splits and warps");
  add_out(fine_cmd);

  auto* detect_cmd = app.add_subcommand("detect", "Write landmark overlays and a coordinate file");
  add_checkpoint(detect_cmd, "Detector checkpoint");
  add_data(detect_cmd, false);
  detect_cmd->add_option("--scale", a.scale, "Overlay enlargement (0: at least 128 px)")->capture_default_str();
  add_seed(detect_cmd, "Unused; detection is deterministic");
  add_out(detect_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a fitted regressor (or a prediction file) against annotations");
  add_checkpoint(eval_cmd, "Checkpoint written by 'regress'");
  add_data(eval_cmd, true);
  eval_cmd->add_option("--predictions", a.predictions, "Evaluate this annotation-format file instead")
      ->default_str("none");
  add_norm(eval_cmd);
  add_seed(eval_cmd, "Unused; evaluation is deterministic");
  add_out(eval_cmd);

  auto* reg_cmd = app.add_subcommand("regress", "Fit a linear map from detections to annotations");
  add_checkpoint(reg_cmd, "Detector checkpoint (kept frozen)");
  add_data(reg_cmd, true);
  add_norm(reg_cmd);
  reg_cmd->add_option("--augment", a.augment, "Warped copies per annotated image")->capture_default_str();
  reg_cmd->add_option("--max-iters", a.max_iters, "Optimizer iteration cap")->capture_default_str();
  reg_cmd->add_option("--threshold", a.threshold, "Contribution-graph edge threshold")->capture_default_str();
  add_seed(reg_cmd, "Seed for augmentation warps");
  add_out(reg_cmd);

  auto* warp_cmd = app.add_subcommand("warp-demo", "Write a strip: preprocessed image then warped copies");
  warp_cmd->add_option("--config", a.config, "JSON config file (sampler and preprocess)")->default_str("none");
  add_data(warp_cmd, false);
  warp_cmd->add_option("--index", a.index, "Sample index within --data")->capture_default_str();
  warp_cmd->add_option("--count", a.count, "Number of warped copies")->capture_default_str();
  warp_cmd->add_option("--sampler", a.sampler, "g1, g2 (from config) or a preset name")->capture_default_str();
  add_seed(warp_cmd, "Base seed for the warps");
  add_out(warp_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  grad_cmd->add_option("--instances", a.instances, "Random instances per check")->capture_default_str();
  add_seed(grad_cmd, "Seed for the random instances");
  add_out(grad_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_training_command(a, false);
    if (*fine_cmd) return run_training_command(a, true);
    if (*detect_cmd) return cmd_detect(a);
    if (*eval_cmd) return cmd_eval(a);
    if (*reg_cmd) return cmd_regress(a);
    if (*warp_cmd) return cmd_warp_demo(a);
    if (*grad_cmd) return cmd_gradcheck(a);
  } catch (const std::exception& e) {
    std::cerr << "eqlm: error: " << one_line(e.what()) << '\n';
    return kExitError;
  }
  return kExitError;
}
