#pragma once

// Flat key=value configuration. Every hyperparameter of the pipeline lives
// here with its default; `parse_config` overlays a file on the defaults and
// `serialize_config` writes every key in a fixed order, so
// serialize(parse(serialize(c))) == serialize(c).

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "facercnn/matching.hpp"
#include "facercnn/model.hpp"
#include "facercnn/synthdata.hpp"

namespace facercnn {

enum class OhemRank { cls, cls_reg };

struct Config {
  std::uint64_t seed = 1;
  int steps = 3000;
  int images_per_step = 2;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double clip_norm = 10.0;

  LossWeights weights{1.0, 0.01};
  double center_alpha = 0.5;

  int rpn_batch = 256;
  int head_batch = 128;
  int proposal_cap = 2000;
  int post_nms_train = 2000;
  int post_nms_test = 300;
  double nms_proposal = 0.7;
  double nms_final = 0.3;
  AnchorThresholds anchor_iou{0.7, 0.3};
  // negative_low 0.1 gives the classic [0.1, 0.5) window.
  ProposalThresholds proposal_iou{0.5, 0.0};
  bool ohem = true;
  bool ohem_rpn = true;
  OhemRank ohem_rank = OhemRank::cls;
  bool add_gt_proposals = true;
  double min_proposal_size = 2.0;

  std::vector<double> scales{0.5, 1.0, 2.0};
  double score_threshold = 0.05;
  int threads = 1;

  ModelConfig model;
  SceneSpec scene;
  int train_images = 2000;
  int test_images = 200;
  std::uint64_t test_seed = 1000003;
  double small_face_px = 16.0;
  double eval_fp_count = 2000;

  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(out))
    throw std::invalid_argument("config: field '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size())
    throw std::invalid_argument("config: field '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || p != t.data() + t.size())
    throw std::invalid_argument("config: field '" + key + "' expects an unsigned integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  if (t == "on" || t == "true" || t == "1") return true;
  if (t == "off" || t == "false" || t == "0") return false;
  throw std::invalid_argument("config: field '" + key + "' expects on/off, got '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
  if (out.empty()) throw std::invalid_argument("config: field '" + key + "' expects a comma-separated list");
  return out;
}

inline std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

struct Field {
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

// Ordered table of every config key.
inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  using C = Config;
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto dbl = [&f](std::string k, auto getter) {
      f.push_back({k, {[getter](const C& c) { return fmt_double(getter(const_cast<C&>(c))); },
                       [getter, k](C& c, const std::string& v) { getter(c) = parse_double(k, v); }}});
    };
    auto integer = [&f](std::string k, auto getter) {
      f.push_back({k, {[getter](const C& c) { return std::to_string(getter(const_cast<C&>(c))); },
                       [getter, k](C& c, const std::string& v) {
                         using T = std::remove_reference_t<decltype(getter(c))>;
                         if constexpr (std::is_same_v<T, std::uint64_t>) getter(c) = parse_u64(k, v);
                         else getter(c) = static_cast<T>(parse_int(k, v));
                       }}});
    };
    auto boolean = [&f](std::string k, auto getter) {
      f.push_back({k, {[getter](const C& c) { return std::string(getter(const_cast<C&>(c)) ? "on" : "off"); },
                       [getter, k](C& c, const std::string& v) { getter(c) = parse_bool(k, v); }}});
    };
    auto list = [&f](std::string k, auto getter) {
      f.push_back({k, {[getter](const C& c) { return fmt_list(getter(const_cast<C&>(c))); },
                       [getter, k](C& c, const std::string& v) { getter(c) = parse_list(k, v); }}});
    };

    integer("seed", [](C& c) -> std::uint64_t& { return c.seed; });
    integer("steps", [](C& c) -> int& { return c.steps; });
    integer("images_per_step", [](C& c) -> int& { return c.images_per_step; });
    dbl("learning_rate", [](C& c) -> double& { return c.learning_rate; });
    dbl("momentum", [](C& c) -> double& { return c.momentum; });
    dbl("clip_norm", [](C& c) -> double& { return c.clip_norm; });
    dbl("lambda", [](C& c) -> double& { return c.weights.lambda; });
    dbl("mu", [](C& c) -> double& { return c.weights.mu; });
    dbl("center_alpha", [](C& c) -> double& { return c.center_alpha; });
    integer("rpn_batch", [](C& c) -> int& { return c.rpn_batch; });
    integer("head_batch", [](C& c) -> int& { return c.head_batch; });
    integer("proposal_cap", [](C& c) -> int& { return c.proposal_cap; });
    integer("post_nms_train", [](C& c) -> int& { return c.post_nms_train; });
    integer("post_nms_test", [](C& c) -> int& { return c.post_nms_test; });
    dbl("nms_proposal", [](C& c) -> double& { return c.nms_proposal; });
    dbl("nms_final", [](C& c) -> double& { return c.nms_final; });
    dbl("anchor_pos_iou", [](C& c) -> double& { return c.anchor_iou.positive; });
    dbl("anchor_neg_iou", [](C& c) -> double& { return c.anchor_iou.negative; });
    dbl("proposal_pos_iou", [](C& c) -> double& { return c.proposal_iou.positive; });
    dbl("proposal_neg_low", [](C& c) -> double& { return c.proposal_iou.negative_low; });
    boolean("ohem", [](C& c) -> bool& { return c.ohem; });
    boolean("ohem_rpn", [](C& c) -> bool& { return c.ohem_rpn; });
    f.push_back({"ohem_rank",
                 {[](const C& c) { return std::string(c.ohem_rank == OhemRank::cls ? "cls" : "cls+reg"); },
                  [](C& c, const std::string& v) {
                    const auto t = trim(v);
                    if (t == "cls") c.ohem_rank = OhemRank::cls;
                    else if (t == "cls+reg") c.ohem_rank = OhemRank::cls_reg;
                    else throw std::invalid_argument("config: field 'ohem_rank' expects cls or cls+reg, got '" + v + "'");
                  }}});
    boolean("add_gt_proposals", [](C& c) -> bool& { return c.add_gt_proposals; });
    dbl("min_proposal_size", [](C& c) -> double& { return c.min_proposal_size; });
    list("scales", [](C& c) -> std::vector<double>& { return c.scales; });
    dbl("score_threshold", [](C& c) -> double& { return c.score_threshold; });
    integer("threads", [](C& c) -> int& { return c.threads; });

    dbl("anchor_stride", [](C& c) -> double& { return c.model.anchors.base_stride; });
    list("anchor_scales", [](C& c) -> std::vector<double>& { return c.model.anchors.scales; });
    list("anchor_ratios", [](C& c) -> std::vector<double>& { return c.model.anchors.aspect_ratios; });
    integer("conv1_channels", [](C& c) -> int& { return c.model.conv1_channels; });
    integer("conv2_channels", [](C& c) -> int& { return c.model.conv2_channels; });
    integer("rpn_channels", [](C& c) -> int& { return c.model.rpn_channels; });
    integer("roi_size", [](C& c) -> int& { return c.model.roi_size; });
    integer("hidden", [](C& c) -> int& { return c.model.hidden; });
    integer("feature_dim", [](C& c) -> int& { return c.model.feature_dim; });
    f.push_back({"head_delta_std",
                 {[](const C& c) {
                    return fmt_list({c.model.head_delta_std.begin(), c.model.head_delta_std.end()});
                  },
                  [](C& c, const std::string& v) {
                    auto l = parse_list("head_delta_std", v);
                    if (l.size() != 4) throw std::invalid_argument("config: field 'head_delta_std' expects 4 values");
                    for (int i = 0; i < 4; ++i) c.model.head_delta_std[i] = l[i];
                  }}});

    integer("scene_width", [](C& c) -> int& { return c.scene.image_w; });
    integer("scene_height", [](C& c) -> int& { return c.scene.image_h; });
    integer("faces_min", [](C& c) -> int& { return c.scene.faces_min; });
    integer("faces_max", [](C& c) -> int& { return c.scene.faces_max; });
    dbl("face_size_min", [](C& c) -> double& { return c.scene.face_size_min; });
    dbl("face_size_max", [](C& c) -> double& { return c.scene.face_size_max; });
    dbl("noise_sigma", [](C& c) -> double& { return c.scene.noise_sigma; });
    integer("distractors_min", [](C& c) -> int& { return c.scene.distractors_min; });
    integer("distractors_max", [](C& c) -> int& { return c.scene.distractors_max; });
    integer("data_seed", [](C& c) -> std::uint64_t& { return c.scene.seed; });
    integer("train_images", [](C& c) -> int& { return c.train_images; });
    integer("test_images", [](C& c) -> int& { return c.test_images; });
    integer("test_seed", [](C& c) -> std::uint64_t& { return c.test_seed; });
    dbl("small_face_px", [](C& c) -> double& { return c.small_face_px; });
    dbl("eval_fp_count", [](C& c) -> double& { return c.eval_fp_count; });
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void Config::validate() const {
  const auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("config: field '" + field + "' " + msg);
  };
  if (steps < 0) fail("steps", "must be >= 0");
  if (images_per_step < 1) fail("images_per_step", "must be >= 1");
  if (!(learning_rate > 0)) fail("learning_rate", "must be > 0");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum", "must be in [0, 1)");
  if (!(clip_norm > 0)) fail("clip_norm", "must be > 0");
  if (!(weights.lambda >= 0)) fail("lambda", "must be >= 0");
  if (!(weights.mu >= 0)) fail("mu", "must be >= 0");
  if (!(center_alpha > 0 && center_alpha <= 1)) fail("center_alpha", "must be in (0, 1]");
  if (rpn_batch < 2 || rpn_batch % 2) fail("rpn_batch", "must be even and >= 2");
  if (head_batch < 2 || head_batch % 2) fail("head_batch", "must be even and >= 2");
  if (proposal_cap < 1) fail("proposal_cap", "must be >= 1");
  if (post_nms_train < 1) fail("post_nms_train", "must be >= 1");
  if (post_nms_test < 1) fail("post_nms_test", "must be >= 1");
  if (!(nms_proposal >= 0 && nms_proposal <= 1)) fail("nms_proposal", "must be in [0, 1]");
  if (!(nms_final >= 0 && nms_final <= 1)) fail("nms_final", "must be in [0, 1]");
  if (!(anchor_iou.negative <= anchor_iou.positive)) fail("anchor_neg_iou", "must not exceed anchor_pos_iou");
  if (!(anchor_iou.positive > 0 && anchor_iou.positive <= 1)) fail("anchor_pos_iou", "must be in (0, 1]");
  if (!(anchor_iou.negative >= 0)) fail("anchor_neg_iou", "must be >= 0");
  if (!(proposal_iou.positive > 0 && proposal_iou.positive <= 1)) fail("proposal_pos_iou", "must be in (0, 1]");
  if (!(proposal_iou.negative_low >= 0 && proposal_iou.negative_low < proposal_iou.positive))
    fail("proposal_neg_low", "must be in [0, proposal_pos_iou)");
  if (!(min_proposal_size >= 0)) fail("min_proposal_size", "must be >= 0");
  if (scales.empty()) fail("scales", "must be non-empty");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (!(scales[i] > 0)) fail("scales", "entries must be > 0");
    if (i && !(scales[i] > scales[i - 1])) fail("scales", "must be strictly ascending");
  }
  if (!(score_threshold >= 0 && score_threshold <= 1)) fail("score_threshold", "must be in [0, 1]");
  if (threads < 1) fail("threads", "must be >= 1");
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  try {
    scene.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (train_images < 0) fail("train_images", "must be >= 0");
  if (test_images < 0) fail("test_images", "must be >= 0");
  if (!(small_face_px > 0)) fail("small_face_px", "must be > 0");
  if (!(eval_fp_count >= 0)) fail("eval_fp_count", "must be >= 0");
}

/// Applies one key=value assignment. Unknown keys are rejected.
inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  for (const auto& [k, f] : detail::config_fields()) {
    if (k == key) {
      f.set(c, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown field '" + key + "'");
}

inline std::string get_config_value(const Config& c, const std::string& key) {
  for (const auto& [k, f] : detail::config_fields())
    if (k == key) return f.get(c);
  throw std::invalid_argument("config: unknown field '" + key + "'");
}

/// Overlays `text` on `base`. Blank lines and '#' comments are skipped.
inline Config parse_config(const std::string& text, Config base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  base.validate();
  return base;
}

inline Config load_config(const std::string& path, Config base = {}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string serialize_config(const Config& c) {
  std::string out;
  for (const auto& [k, f] : detail::config_fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

/// FNV-1a over the architecture keys; stored in checkpoints so a model is
/// never loaded into a mismatched layout.
inline std::uint64_t architecture_digest(const Config& c) {
  static const char* keys[] = {"anchor_stride",  "anchor_scales", "anchor_ratios", "conv1_channels",
                               "conv2_channels", "rpn_channels",  "roi_size",      "hidden",
                               "feature_dim",    "head_delta_std"};
  std::uint64_t h = 1469598103934665603ull;
  for (const char* k : keys) {
    const std::string s = std::string(k) + "=" + get_config_value(c, k) + ";";
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace facercnn
