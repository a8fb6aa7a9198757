// facercnn command-line tool: synthetic data, training, detection,
// evaluation, gradient checks and ablations.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 check failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "facercnn/facercnn.hpp"
#include "facercnn/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace facercnn;
using nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kCheck = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options shared by every subcommand. Unset optionals leave the config value alone.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<double> mu, lambda, score_threshold;
  std::string ohem, scales;
  std::optional<int> threads;
  std::vector<std::string> set;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "key = value config file");
  app->add_option("--seed", c.seed, "training seed");
  app->add_option("--steps", c.steps, "training steps");
  app->add_option("--mu", c.mu, "center-loss weight");
  app->add_option("--lambda", c.lambda, "box-regression weight");
  app->add_option("--ohem", c.ohem, "hard example mining in the refinement head")->check(CLI::IsMember({"on", "off"}));
  app->add_option("--scales", c.scales, "comma-separated test scales, e.g. 0.5,1,2");
  app->add_option("--score-threshold", c.score_threshold, "keep detections scoring above this");
  app->add_option("--threads", c.threads, "worker threads for per-image evaluation");
  app->add_option("--set", c.set, "extra key=value config override (repeatable)");
}

std::string fmt(double v) { return detail::fmt_double(v); }

Config build_config(const Common& c) {
  try {
    Config cfg;
    if (!c.config_path.empty()) {
      std::ifstream f(c.config_path);
      if (!f) throw UsageError("cannot open config file " + c.config_path);
      std::stringstream ss;
      ss << f.rdbuf();
      cfg = parse_config(ss.str());
    }
    if (c.seed) set_config_value(cfg, "seed", std::to_string(*c.seed));
    if (c.steps) set_config_value(cfg, "steps", std::to_string(*c.steps));
    if (c.mu) set_config_value(cfg, "mu", fmt(*c.mu));
    if (c.lambda) set_config_value(cfg, "lambda", fmt(*c.lambda));
    if (!c.ohem.empty()) set_config_value(cfg, "ohem", c.ohem);
    if (!c.scales.empty()) set_config_value(cfg, "scales", c.scales);
    if (c.score_threshold) set_config_value(cfg, "score_threshold", fmt(*c.score_threshold));
    if (c.threads) set_config_value(cfg, "threads", std::to_string(*c.threads));
    for (const auto& kv : c.set) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
  if (!f) throw std::runtime_error("I/O error writing " + p.string());
}

std::string dump(const ordered_json& j) { return j.dump(2) + "\n"; }

std::vector<Scene> make_scenes(const SceneSpec& spec, int n) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(generate_scene(spec, static_cast<std::uint64_t>(i)));
  return out;
}

SceneSpec test_spec(const Config& cfg) {
  SceneSpec s = cfg.scene;
  s.seed = cfg.test_seed;
  return s;
}

std::vector<Scene> training_scenes(const Config& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) return load_dataset(data_dir);
  return make_scenes(cfg.scene, cfg.train_images);
}

const char* kLossLogHeader =
    "step,total,rpn_cls,rpn_reg,head_cls,head_reg,center,head_cls_face,head_cls_nonface,positives,negatives,grad_norm\n";

std::string loss_log_row(std::int64_t step, const StepReport& r) {
  std::string s = std::to_string(step);
  for (double v : {r.total, r.rpn_cls, r.rpn_reg, r.head_cls, r.head_reg, r.center, r.head_cls_face,
                   r.head_cls_nonface})
    s += "," + detail::fmt_real(v);
  s += "," + std::to_string(r.positives) + "," + std::to_string(r.negatives) + "," + detail::fmt_real(r.grad_norm);
  return s + "\n";
}

struct TrainOutcome {
  TrainState state;
  std::string loss_log;
};

TrainOutcome run_training(const Config& cfg, const std::vector<Scene>& scenes, bool verbose) {
  TrainOutcome out{TrainState::init(cfg), kLossLogHeader};
  if (cfg.steps > 0) {
    train(out.state, scenes, cfg, [&](std::int64_t step, const StepReport& r) {
      out.loss_log += loss_log_row(step, r);
      if (verbose && (step % 250 == 0 || step == cfg.steps))
        std::fprintf(stderr, "step %lld/%d loss %.4f\n", static_cast<long long>(step), cfg.steps, r.total);
    });
  }
  return out;
}

struct EvalSummary {
  double ap = 0, recall = 0, small_recall = 0;
  std::size_t small_faces = 0;
};

EvalSummary evaluate_model(const DetectorModel& m, const std::vector<Scene>& scenes, const Config& cfg,
                           const std::vector<double>& scales) {
  std::vector<const Tensor*> images;
  for (const auto& s : scenes) images.push_back(&s.image);
  const auto dets = detect_all(m, images, cfg, scales, cfg.score_threshold, cfg.threads);
  std::vector<ImageResult> all, small;
  EvalSummary e;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    all.push_back({dets[i], scenes[i].gts});
    ImageResult sm{dets[i], {}};
    for (const Box& g : scenes[i].gts)
      if (std::max(g.width(), g.height()) < cfg.small_face_px) sm.gts.push_back(g);
    e.small_faces += sm.gts.size();
    small.push_back(std::move(sm));
  }
  e.ap = pr_curve_ap(all).ap;
  e.recall = final_recall(all);
  e.small_recall = e.small_faces ? final_recall(small) : 0.0;
  return e;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& common, const std::string& out, const std::string& split, std::optional<int> images) {
  const Config cfg = build_config(common);
  if (out.empty()) throw UsageError("gen-data: --out is required");
  const bool test = split == "test";
  const SceneSpec spec = test ? test_spec(cfg) : cfg.scene;
  const int n = images.value_or(test ? cfg.test_images : cfg.train_images);
  if (n < 0) throw UsageError("gen-data: --images must be >= 0");
  const Manifest m = write_dataset(spec, static_cast<std::size_t>(n), out);
  std::printf("wrote %zu images, %zu faces to %s\n", m.entries.size(), m.face_count(), out.c_str());
  return kOk;
}

int cmd_train(const Common& common, const std::string& out, const std::string& data) {
  const Config cfg = build_config(common);
  if (out.empty()) throw UsageError("train: --out is required");
  const auto scenes = training_scenes(cfg, data);
  const auto result = run_training(cfg, scenes, true);
  fs::create_directories(out);
  save_checkpoint((fs::path(out) / "model.ckpt").string(), result.state.model, result.state.centers,
                  static_cast<std::uint64_t>(result.state.step), cfg);
  write_file(fs::path(out) / "loss_log.csv", result.loss_log);
  write_file(fs::path(out) / "config.txt", serialize_config(cfg));
  std::printf("trained %d steps on %zu images; wrote %s\n", cfg.steps, scenes.size(), out.c_str());
  return kOk;
}

int cmd_detect(const Common& common, const std::string& model, const std::string& data, const std::string& out) {
  const Config cfg = build_config(common);
  if (model.empty() || data.empty() || out.empty()) throw UsageError("detect: --model, --data and --out are required");
  const Checkpoint ck = load_checkpoint(model, cfg);
  const auto ann = parse_wider_annotations(read_file(fs::path(data) / kWiderAnnotationFile));
  std::vector<std::string> keys;
  std::vector<Tensor> images;
  for (const auto& [key, boxes] : ann) {
    keys.push_back(key);
    images.push_back(read_pgm(fs::path(data) / (key + ".pgm")));
  }
  std::vector<const Tensor*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  const auto dets = detect_all(ck.model, ptrs, cfg, cfg.scales, cfg.score_threshold, cfg.threads);
  std::vector<std::pair<std::string, std::vector<Detection>>> blocks;
  for (std::size_t i = 0; i < keys.size(); ++i) blocks.emplace_back(keys[i], dets[i]);
  write_file(out, format_fddb_detections(blocks));
  std::printf("wrote detections for %zu images to %s\n", keys.size(), out.c_str());
  return kOk;
}

void curve_summary(const std::vector<ImageResult>& results, double fp_count, ordered_json& j, const fs::path& out) {
  const auto droc = discrete_roc(results);
  const auto croc = continuous_roc(results);
  const auto pr = pr_curve_ap(results);
  write_file(out / "roc_discrete.csv", roc_csv(droc));
  write_file(out / "roc_continuous.csv", roc_csv(croc));
  write_file(out / "pr.csv", pr_csv(pr));
  std::size_t faces = 0, dets = 0;
  for (const auto& r : results) {
    faces += r.gts.size();
    dets += r.dets.size();
  }
  j["images"] = results.size();
  j["faces"] = faces;
  j["detections"] = dets;
  j["ap"] = pr.ap;
  j["recall"] = final_recall(results);
  j["fp_count"] = fp_count;
  j["tpr_at_fp_discrete"] = tpr_at_fp(droc, fp_count);
  j["tpr_at_fp_continuous"] = tpr_at_fp(croc, fp_count);
}

int cmd_eval_fddb(const Common& common, const std::string& annotations, const std::string& detections,
                  const std::string& out, std::optional<double> fp_count) {
  const Config cfg = build_config(common);
  if (annotations.empty() || detections.empty() || out.empty())
    throw UsageError("eval-fddb: --annotations, --detections and --out are required");
  const auto gts = ellipses_to_boxes(parse_fddb_annotations(read_file(annotations)));
  const auto dets = parse_fddb_detections(read_file(detections));
  const auto results = join_results(gts, dets);
  ordered_json j;
  j["format"] = "fddb";
  curve_summary(results, fp_count.value_or(cfg.eval_fp_count), j, out);
  write_file(fs::path(out) / "summary.json", dump(j));
  std::cout << dump(j);
  return kOk;
}

int cmd_eval_wider(const Common& common, const std::string& annotations, const std::string& detections,
                   const std::string& out, std::optional<double> fp_count) {
  const Config cfg = build_config(common);
  if (annotations.empty() || detections.empty() || out.empty())
    throw UsageError("eval-wider: --annotations, --detections and --out are required");
  const auto gts = parse_wider_annotations(read_file(annotations));
  const auto dets = parse_fddb_detections(read_file(detections));
  const auto results = join_results(gts, dets);
  ordered_json j;
  j["format"] = "wider";
  curve_summary(results, fp_count.value_or(cfg.eval_fp_count), j, out);
  std::vector<ImageResult> small;
  std::size_t n_small = 0;
  for (const auto& r : results) {
    ImageResult s{r.dets, {}};
    for (const Box& g : r.gts)
      if (std::max(g.width(), g.height()) < cfg.small_face_px) s.gts.push_back(g);
    n_small += s.gts.size();
    small.push_back(std::move(s));
  }
  j["small_face_px"] = cfg.small_face_px;
  j["small_faces"] = n_small;
  j["small_face_recall"] = n_small ? final_recall(small) : 0.0;
  write_file(fs::path(out) / "summary.json", dump(j));
  std::cout << dump(j);
  return kOk;
}

int cmd_gradcheck(const Common& common, int cases) {
  const Config cfg = build_config(common);
  if (cases < 1) throw UsageError("gradcheck: --cases must be >= 1");
  const std::uint64_t s = cfg.seed * 100;
  const std::vector<GradCheckResult> results = {
      check_softmax_ce(cases, s + 1), check_smooth_l1(cases, s + 2), check_center_loss(cases, s + 3),
      check_multitask_loss(cases, s + 4), check_conv(cases, s + 5), check_relu(cases, s + 6),
      check_maxpool(cases, s + 7), check_linear(cases, s + 8), check_roi_pool(cases, s + 9),
      check_network(cases, s + 10)};
  bool ok = true;
  std::printf("%-16s %6s %12s %10s  %s\n", "check", "cases", "max_rel_err", "tolerance", "result");
  for (const auto& r : results) {
    std::printf("%-16s %6d %12.3e %10.0e  %s\n", r.name.c_str(), r.cases, r.max_error, r.tolerance,
                r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
  }
  if (!ok) throw CheckFailure("gradient check failed");
  return kOk;
}

// Per-class head cross-entropy trace, one row per step.
std::string class_loss_trace(const std::string& loss_log) {
  std::istringstream in(loss_log);
  std::string line, out = "step,head_cls_face,head_cls_nonface\n";
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    out += f[0] + "," + f[7] + "," + f[8] + "\n";
  }
  return out;
}

int cmd_ablate(const Common& common, const std::string& what, const std::string& out, const std::string& data) {
  const Config base = build_config(common);
  if (out.empty()) throw UsageError("ablate: --out is required");
  const auto scenes = training_scenes(base, data);
  const auto test = make_scenes(test_spec(base), base.test_images);

  struct Arm {
    std::string name;
    Config cfg;
    std::vector<double> scales;
  };
  std::vector<std::pair<std::string, std::vector<Arm>>> studies;
  const std::vector<double> single{1.0};
  if (what == "mu" || what == "all") {
    Config a = base, b = base;
    a.weights.mu = 0.0;
    if (b.weights.mu == 0.0) b.weights.mu = 0.01;
    studies.push_back({"mu", {{"mu=" + fmt(a.weights.mu), a, single}, {"mu=" + fmt(b.weights.mu), b, single}}});
  }
  if (what == "ohem" || what == "all") {
    Config a = base, b = base;
    a.ohem = false;
    b.ohem = true;
    studies.push_back({"ohem", {{"ohem=off", a, single}, {"ohem=on", b, single}}});
  }
  if (what == "scales" || what == "all") studies.push_back({"scales", {{"single", base, single}, {"multi", base, base.scales}}});
  if (studies.empty()) throw UsageError("ablate: --what must be mu, ohem, scales or all");

  // Trainings are shared between arms with identical configs.
  std::map<std::string, TrainOutcome> trained;
  ordered_json report = ordered_json::object();
  for (auto& [study, arms] : studies) {
    ordered_json js = ordered_json::array();
    for (auto& arm : arms) {
      const std::string key = serialize_config(arm.cfg);
      auto it = trained.find(key);
      if (it == trained.end()) {
        std::fprintf(stderr, "training %s/%s\n", study.c_str(), arm.name.c_str());
        it = trained.emplace(key, run_training(arm.cfg, scenes, true)).first;
      }
      const auto& st = it->second.state;
      const auto e = evaluate_model(st.model, test, arm.cfg, arm.scales);
      const auto feats = collect_features(st.model, test, arm.cfg);
      const std::string tag = study + "_" + arm.name;
      std::string file = tag;
      for (char& ch : file)
        if (ch == '=' || ch == ',') ch = '_';
      write_file(fs::path(out) / (file + "_class_loss.csv"), class_loss_trace(it->second.loss_log));
      ordered_json ja;
      ja["arm"] = arm.name;
      ja["ap"] = e.ap;
      ja["recall"] = e.recall;
      ja["small_face_recall"] = e.small_recall;
      ja["face_feature_trace"] = covariance_trace(feats.face);
      ja["nonface_feature_trace"] = covariance_trace(feats.nonface);
      ja["face_samples"] = feats.face.rows;
      ja["nonface_samples"] = feats.nonface.rows;
      ja["class_loss_trace"] = file + "_class_loss.csv";
      js.push_back(ja);
    }
    report[study] = js;
  }
  write_file(fs::path(out) / "report.json", dump(report));
  std::cout << dump(report);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage face detector with center loss and online hard example mining"};
  app.require_subcommand(1);
  Common common;

  std::string out, data, model, split = "train", annotations, detections, what = "all";
  std::optional<int> images;
  std::optional<double> fp_count;
  int cases = 20;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (P5 images + annotations)");
  add_common(gen, common);
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  gen->add_option("--images", images, "number of images (default from config)");

  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, common);
  tr->add_option("--out", out, "output directory")->required();
  tr->add_option("--data", data, "dataset directory (default: generate in memory)");

  auto* det = app.add_subcommand("detect", "run detection over a dataset, FDDB output format");
  add_common(det, common);
  det->add_option("--model", model, "checkpoint file")->required();
  det->add_option("--data", data, "dataset directory")->required();
  det->add_option("--out", out, "detection file")->required();

  auto* ef = app.add_subcommand("eval-fddb", "ROC / AP against FDDB ellipse annotations");
  add_common(ef, common);
  ef->add_option("--annotations", annotations, "FDDB ellipse file")->required();
  ef->add_option("--detections", detections, "FDDB detection file")->required();
  ef->add_option("--out", out, "output directory")->required();
  ef->add_option("--fp-count", fp_count, "false-positive count for the TPR report (default 2000)");

  auto* ew = app.add_subcommand("eval-wider", "PR / AP against WIDER-style box annotations");
  add_common(ew, common);
  ew->add_option("--annotations", annotations, "WIDER-style annotation file")->required();
  ew->add_option("--detections", detections, "detection file")->required();
  ew->add_option("--out", out, "output directory")->required();
  ew->add_option("--fp-count", fp_count, "false-positive count for the TPR report (default 2000)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gc, common);
  gc->add_option("--cases", cases, "seeded cases per check");

  auto* ab = app.add_subcommand("ablate", "paired trainings: mu, ohem, scales");
  add_common(ab, common);
  ab->add_option("--out", out, "output directory")->required();
  ab->add_option("--what", what, "mu, ohem, scales or all")->check(CLI::IsMember({"mu", "ohem", "scales", "all"}));
  ab->add_option("--data", data, "training dataset directory (default: generate in memory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, out, split, images);
    if (tr->parsed()) return cmd_train(common, out, data);
    if (det->parsed()) return cmd_detect(common, model, data, out);
    if (ef->parsed()) return cmd_eval_fddb(common, annotations, detections, out, fp_count);
    if (ew->parsed()) return cmd_eval_wider(common, annotations, detections, out, fp_count);
    if (gc->parsed()) return cmd_gradcheck(common, cases);
    if (ab->parsed()) return cmd_ablate(common, what, out, data);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheck;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
