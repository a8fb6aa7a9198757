#pragma once

// Benchmark scoring: FDDB-style discrete/continuous ROC against ellipse
// annotations and WIDER-style precision/recall with average precision, plus
// the text formats both benchmarks use.
//
// Detections are matched to ground truth greedily in descending score order
// (each detection takes the highest-IoU unmatched gt at or above the IoU
// threshold). Ellipses are compared through their tight bounding box.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "facercnn/geometry.hpp"

namespace facercnn {

/// Malformed annotation or detection text. `line` is 1-based.
class FormatError : public std::runtime_error {
 public:
  FormatError(int line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct Ellipse {
  double major_axis_radius = 1, minor_axis_radius = 1, angle = 0, center_x = 0, center_y = 0;
};

/// Tight axis-aligned bounds of a rotated ellipse.
inline Box ellipse_to_box(const Ellipse& e) {
  const double a = e.major_axis_radius, b = e.minor_axis_radius;
  const double c = std::cos(e.angle), s = std::sin(e.angle);
  const double hw = std::sqrt(a * a * c * c + b * b * s * s);
  const double hh = std::sqrt(a * a * s * s + b * b * c * c);
  return {e.center_x - hw, e.center_y - hh, e.center_x + hw, e.center_y + hh};
}

/// Image key used to join annotation and detection files: the name with any
/// trailing file extension removed ("images/img_00001.pgm" -> "images/img_00001").
inline std::string image_key(const std::string& name) {
  const auto slash = name.find_last_of('/');
  const auto dot = name.find_last_of('.');
  if (dot != std::string::npos && (slash == std::string::npos || dot > slash)) return name.substr(0, dot);
  return name;
}

namespace detail {

inline std::string fmt_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

class LineReader {
 public:
  explicit LineReader(const std::string& text) : in_(text) {}

  // Next non-blank line; false at end of input.
  bool next(std::string& line) {
    while (std::getline(in_, line)) {
      ++lineno_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find_first_not_of(" \t") != std::string::npos) return true;
    }
    ++lineno_;
    return false;
  }
  int lineno() const { return lineno_; }

 private:
  std::istringstream in_;
  int lineno_ = 0;
};

inline std::string trim_ws(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

inline std::vector<double> parse_reals(const std::string& line, int lineno, std::size_t expected) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (true) {
    pos = line.find_first_not_of(" \t", pos);
    if (pos == std::string::npos) break;
    auto end = line.find_first_of(" \t", pos);
    if (end == std::string::npos) end = line.size();
    double v = 0;
    auto [p, ec] = std::from_chars(line.data() + pos, line.data() + end, v);
    if (ec != std::errc() || p != line.data() + end || !std::isfinite(v))
      throw FormatError(lineno, "non-numeric field '" + line.substr(pos, end - pos) + "'");
    out.push_back(v);
    pos = end;
  }
  if (out.size() != expected)
    throw FormatError(lineno, "expected " + std::to_string(expected) + " fields, found " + std::to_string(out.size()));
  return out;
}

inline std::size_t parse_count(const std::string& line, int lineno) {
  const auto t = trim_ws(line);
  long long v = -1;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || v < 0) throw FormatError(lineno, "malformed count '" + t + "'");
  return static_cast<std::size_t>(v);
}

// Shared block grammar: name line, count line, then `count` rows of
// `fields` reals.
template <class Row>
std::map<std::string, std::vector<Row>> parse_blocks(const std::string& text, std::size_t fields,
                                                     Row (*make)(const std::vector<double>&, int)) {
  std::map<std::string, std::vector<Row>> out;
  LineReader r(text);
  std::string line;
  while (r.next(line)) {
    const std::string name = trim_ws(line);
    const int name_line = r.lineno();
    if (!r.next(line)) throw FormatError(r.lineno(), "missing count after image '" + name + "'");
    const std::size_t count = parse_count(line, r.lineno());
    std::vector<Row> rows;
    rows.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (!r.next(line))
        throw FormatError(r.lineno(), "expected " + std::to_string(count) + " rows for '" + name + "', found " +
                                          std::to_string(i));
      rows.push_back(make(parse_reals(line, r.lineno(), fields), r.lineno()));
    }
    if (!out.emplace(image_key(name), std::move(rows)).second)
      throw FormatError(name_line, "duplicate image '" + name + "'");
  }
  return out;
}

}  // namespace detail

using EllipseAnnotations = std::map<std::string, std::vector<Ellipse>>;
using BoxAnnotations = std::map<std::string, std::vector<Box>>;
using DetectionSet = std::map<std::string, std::vector<Detection>>;

/// FDDB ellipseList: name, count, then "major minor angle cx cy score" rows.
/// The score column is ignored for ground truth. Keys are image_key(name).
inline EllipseAnnotations parse_fddb_annotations(const std::string& text) {
  return detail::parse_blocks<Ellipse>(text, 6, [](const std::vector<double>& v, int lineno) {
    if (!(v[0] > 0 && v[1] > 0)) throw FormatError(lineno, "ellipse radii must be positive");
    return Ellipse{v[0], v[1], v[2], v[3], v[4]};
  });
}

inline std::string format_fddb_annotations(const std::vector<std::pair<std::string, std::vector<Ellipse>>>& images) {
  std::string out;
  for (const auto& [name, es] : images) {
    out += name + "\n" + std::to_string(es.size()) + "\n";
    for (const auto& e : es) {
      out += detail::fmt_real(e.major_axis_radius) + " " + detail::fmt_real(e.minor_axis_radius) + " " +
             detail::fmt_real(e.angle) + " " + detail::fmt_real(e.center_x) + " " + detail::fmt_real(e.center_y) +
             " 1\n";
    }
  }
  return out;
}

/// FDDB detection output: name, count, then "x y w h score" rows where
/// (x, y) is the top-left corner.
inline DetectionSet parse_fddb_detections(const std::string& text) {
  return detail::parse_blocks<Detection>(text, 5, [](const std::vector<double>& v, int lineno) {
    if (v[2] < 0 || v[3] < 0) throw FormatError(lineno, "negative box size");
    return Detection{{v[0], v[1], v[0] + v[2], v[1] + v[3]}, v[4], 0};
  });
}

inline std::string format_fddb_detections(const std::vector<std::pair<std::string, std::vector<Detection>>>& images) {
  std::string out;
  for (const auto& [name, dets] : images) {
    out += name + "\n" + std::to_string(dets.size()) + "\n";
    for (const auto& d : dets) {
      out += detail::fmt_real(d.box.x1) + " " + detail::fmt_real(d.box.y1) + " " + detail::fmt_real(d.box.width()) +
             " " + detail::fmt_real(d.box.height()) + " " + detail::fmt_real(d.score) + "\n";
    }
  }
  return out;
}

/// WIDER-style annotation text: "path\nK\nx y w h\n" x K blocks.
inline BoxAnnotations parse_wider_annotations(const std::string& text) {
  return detail::parse_blocks<Box>(text, 4, [](const std::vector<double>& v, int lineno) {
    if (v[2] < 0 || v[3] < 0) throw FormatError(lineno, "negative box size");
    return Box{v[0], v[1], v[0] + v[2], v[1] + v[3]};
  });
}

inline std::string format_wider_annotations(const std::vector<std::pair<std::string, std::vector<Box>>>& images) {
  std::string out;
  for (const auto& [name, boxes] : images) {
    out += name + "\n" + std::to_string(boxes.size()) + "\n";
    for (const auto& b : boxes)
      out += detail::fmt_real(b.x1) + " " + detail::fmt_real(b.y1) + " " + detail::fmt_real(b.width()) + " " +
             detail::fmt_real(b.height()) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matching and curves

struct Match {
  std::size_t det_idx = 0, gt_idx = 0;
  double iou = 0;
  bool operator==(const Match&) const = default;
};

/// Greedy one-to-one matching in score order (ties by detection index);
/// each detection takes the highest-IoU unmatched gt (lowest gt index on ties)
/// when that IoU is at least the threshold.
inline std::vector<Match> match_detections(const std::vector<Detection>& dets, const std::vector<Box>& gts,
                                           double iou_threshold) {
  std::vector<Match> out;
  std::vector<char> taken(gts.size(), 0);
  for (std::size_t d : score_order(dets)) {
    double best = -1;
    std::size_t bg = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v > best) {
        best = v;
        bg = g;
      }
    }
    if (best >= iou_threshold && best >= 0) {
      taken[bg] = 1;
      out.push_back({d, bg, best});
    }
  }
  return out;
}

/// One image's detections and ground truth.
struct ImageResult {
  std::vector<Detection> dets;
  std::vector<Box> gts;
};

struct RocPoint {
  double false_positives = 0;
  double true_positive_rate = 0;
  bool operator==(const RocPoint&) const = default;
};

struct PrPoint {
  double recall = 0, precision = 0;
};

namespace detail {
struct ScoredOutcome {
  double score;
  std::size_t image, det;
  bool tp;
  double iou;
};

inline std::vector<ScoredOutcome> ranked_outcomes(const std::vector<ImageResult>& images, double iou_threshold,
                                                  std::size_t& total_gt) {
  std::vector<ScoredOutcome> all;
  total_gt = 0;
  for (std::size_t im = 0; im < images.size(); ++im) {
    const auto& r = images[im];
    total_gt += r.gts.size();
    std::vector<double> matched(r.dets.size(), -1.0);
    for (const auto& m : match_detections(r.dets, r.gts, iou_threshold)) matched[m.det_idx] = m.iou;
    for (std::size_t d = 0; d < r.dets.size(); ++d)
      all.push_back({r.dets[d].score, im, d, matched[d] >= 0, std::max(0.0, matched[d])});
  }
  std::sort(all.begin(), all.end(), [](const ScoredOutcome& a, const ScoredOutcome& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.det < b.det;
  });
  return all;
}

inline std::vector<RocPoint> roc(const std::vector<ImageResult>& images, double iou_threshold, bool continuous) {
  std::size_t total_gt = 0;
  const auto all = ranked_outcomes(images, iou_threshold, total_gt);
  if (total_gt == 0) throw std::invalid_argument("roc: no ground-truth faces");
  std::vector<RocPoint> curve;
  if (all.empty()) return {{0.0, 0.0}};
  double fp = 0, tp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].tp) tp += continuous ? all[i].iou : 1.0;
    else fp += 1.0;
    const bool last_of_score = i + 1 == all.size() || all[i + 1].score != all[i].score;
    if (last_of_score) curve.push_back({fp, tp / static_cast<double>(total_gt)});
  }
  return curve;
}
}  // namespace detail

/// FDDB discrete ROC: one point per distinct score threshold (descending),
/// FP as an absolute count and TPR = matched gts / total gts.
inline std::vector<RocPoint> discrete_roc(const std::vector<ImageResult>& images, double iou_threshold = 0.5) {
  return detail::roc(images, iou_threshold, false);
}

/// FDDB continuous ROC: as discrete_roc, but each match contributes its IoU.
inline std::vector<RocPoint> continuous_roc(const std::vector<ImageResult>& images, double iou_threshold = 0.5) {
  return detail::roc(images, iou_threshold, true);
}

/// Highest TPR reached with at most `fp` false positives (0 if none).
inline double tpr_at_fp(const std::vector<RocPoint>& curve, double fp) {
  double best = 0;
  for (const auto& p : curve)
    if (p.false_positives <= fp) best = std::max(best, p.true_positive_rate);
  return best;
}

struct PrCurve {
  std::vector<PrPoint> points;
  double ap = 0;
};

/// Global ranking precision/recall and AP as the area under the precision
/// envelope. Recall only moves at true positives, each by 1/total, so the
/// area is (sum over true positives of max_{j >= i} p_j) / total.
inline PrCurve pr_curve_ap(const std::vector<ImageResult>& images, double iou_threshold = 0.5) {
  std::size_t total_gt = 0;
  const auto all = detail::ranked_outcomes(images, iou_threshold, total_gt);
  if (total_gt == 0) throw std::invalid_argument("pr_curve_ap: no ground-truth faces");
  PrCurve out;
  out.points.reserve(all.size());
  double tp = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].tp) tp += 1;
    out.points.push_back({tp / static_cast<double>(total_gt), tp / static_cast<double>(i + 1)});
  }
  double envelope = 0, sum = 0;
  for (std::size_t i = out.points.size(); i-- > 0;) {
    envelope = std::max(envelope, out.points[i].precision);
    if (all[i].tp) sum += envelope;
  }
  out.ap = sum / static_cast<double>(total_gt);
  return out;
}

/// Recall over the whole detection list (the last PR point).
inline double final_recall(const std::vector<ImageResult>& images, double iou_threshold = 0.5) {
  std::size_t total_gt = 0;
  const auto all = detail::ranked_outcomes(images, iou_threshold, total_gt);
  if (total_gt == 0) throw std::invalid_argument("final_recall: no ground-truth faces");
  std::size_t tp = 0;
  for (const auto& o : all) tp += o.tp ? 1 : 0;
  return static_cast<double>(tp) / static_cast<double>(total_gt);
}

inline std::string roc_csv(const std::vector<RocPoint>& curve) {
  std::string out = "false_positives,true_positive_rate\n";
  for (const auto& p : curve) out += detail::fmt_real(p.false_positives) + "," + detail::fmt_real(p.true_positive_rate) + "\n";
  return out;
}

inline std::string pr_csv(const PrCurve& curve) {
  std::string out = "recall,precision\n";
  for (const auto& p : curve.points) out += detail::fmt_real(p.recall) + "," + detail::fmt_real(p.precision) + "\n";
  return out;
}

/// Joins annotation and detection maps by image key. Images with detections
/// but no annotation entry are rejected; annotated images without detections
/// contribute misses.
inline std::vector<ImageResult> join_results(const BoxAnnotations& gts, const DetectionSet& dets) {
  for (const auto& [k, v] : dets)
    if (!gts.count(k)) throw std::invalid_argument("detections for unknown image '" + k + "'");
  std::vector<ImageResult> out;
  for (const auto& [k, boxes] : gts) {
    ImageResult r;
    r.gts = boxes;
    if (auto it = dets.find(k); it != dets.end()) r.dets = it->second;
    out.push_back(std::move(r));
  }
  return out;
}

inline BoxAnnotations ellipses_to_boxes(const EllipseAnnotations& ann) {
  BoxAnnotations out;
  for (const auto& [k, es] : ann) {
    auto& v = out[k];
    for (const auto& e : es) v.push_back(ellipse_to_box(e));
  }
  return out;
}

}  // namespace facercnn
