#pragma once

// Box arithmetic shared by every stage of the detector: overlap, anchors,
// regression deltas, clipping and greedy non-maximum suppression.
//
// Boxes use the corner convention (x1, y1, x2, y2) in pixel coordinates and
// area = (x2 - x1) * (y2 - y1). There is no "+1" pixel correction anywhere.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace facercnn {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }

  static Box from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  }

  bool operator==(const Box&) const = default;
};

struct Detection {
  Box box;
  double score = 0;
  int scale_id = 0;
};

/// Anchor layout tiled over a feature map. Ratios are height / width.
struct AnchorSpec {
  double base_stride = 4;
  std::vector<double> scales{8, 16, 32};
  std::vector<double> aspect_ratios{1.0, 1.3};

  std::size_t per_cell() const { return scales.size() * aspect_ratios.size(); }

  void validate() const {
    if (!(base_stride > 0)) throw std::invalid_argument("anchor stride must be positive");
    if (scales.empty() || aspect_ratios.empty())
      throw std::invalid_argument("anchor scales and ratios must be non-empty");
    for (double s : scales)
      if (!(s > 0)) throw std::invalid_argument("anchor scales must be positive");
    for (double r : aspect_ratios)
      if (!(r > 0)) throw std::invalid_argument("anchor ratios must be positive");
  }
};

/// Regression target relative to a reference box: center offsets normalized
/// by the reference size and log-space size ratios.
struct Delta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

/// Intersection over union; 0 when the union is empty.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

/// Anchors for a feature_w x feature_h map. Ordering is row-major over cells
/// (y outer, x inner), then scales, then ratios.
inline std::vector<Box> generate_anchors(const AnchorSpec& spec, int feature_w, int feature_h) {
  spec.validate();
  if (feature_w < 1 || feature_h < 1)
    throw std::invalid_argument("feature map dimensions must be >= 1");
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(feature_w) * feature_h * spec.per_cell());
  for (int j = 0; j < feature_h; ++j) {
    for (int i = 0; i < feature_w; ++i) {
      const double cx = (i + 0.5) * spec.base_stride;
      const double cy = (j + 0.5) * spec.base_stride;
      for (double s : spec.scales) {
        for (double r : spec.aspect_ratios) {
          const double root = std::sqrt(r);
          anchors.push_back(Box::from_center(cx, cy, s / root, s * root));
        }
      }
    }
  }
  return anchors;
}

inline Delta encode_delta(const Box& gt, const Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  const double gw = gt.width(), gh = gt.height();
  if (!(aw > 0 && ah > 0)) throw std::invalid_argument("encode_delta: degenerate anchor");
  if (!(gw > 0 && gh > 0)) throw std::invalid_argument("encode_delta: degenerate ground truth");
  return {(gt.center_x() - anchor.center_x()) / aw, (gt.center_y() - anchor.center_y()) / ah,
          std::log(gw / aw), std::log(gh / ah)};
}

inline Box decode_delta(const Delta& d, const Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  if (!(aw > 0 && ah > 0)) throw std::invalid_argument("decode_delta: degenerate anchor");
  const double cx = anchor.center_x() + d.dx * aw;
  const double cy = anchor.center_y() + d.dy * ah;
  return Box::from_center(cx, cy, aw * std::exp(d.dw), ah * std::exp(d.dh));
}

inline Box clip_box(const Box& b, int w, int h) {
  if (w < 1 || h < 1) throw std::invalid_argument("clip_box: image dimensions must be >= 1");
  const auto cx = [w](double v) { return std::clamp(v, 0.0, static_cast<double>(w)); };
  const auto cy = [h](double v) { return std::clamp(v, 0.0, static_cast<double>(h)); };
  Box out{cx(b.x1), cy(b.y1), cx(b.x2), cy(b.y2)};
  // A valid input stays valid after clamping; guard inverted input anyway.
  out.x2 = std::max(out.x1, out.x2);
  out.y2 = std::max(out.y1, out.y2);
  return out;
}

/// Order of detections by descending score, ties by ascending index.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });
  return order;
}

/// Greedy NMS. Returns the kept detections sorted by descending score.
/// A candidate is discarded when its IoU with a kept box exceeds the threshold.
inline std::vector<std::size_t> nms_indices(const std::vector<Detection>& dets, double iou_threshold) {
  if (!(iou_threshold >= 0 && iou_threshold <= 1))
    throw std::invalid_argument("nms: threshold must be in [0, 1]");
  const auto order = score_order(dets);
  std::vector<char> suppressed(dets.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    const Box& kb = dets[i].box;
    const double karea = kb.area();
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (suppressed[j]) continue;
      const Box& b = dets[j].box;
      const double inter = intersection_area(kb, b);
      if (inter <= 0) continue;
      const double uni = karea + b.area() - inter;
      if (uni > 0 && inter / uni > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<Detection> out;
  for (std::size_t i : nms_indices(dets, iou_threshold)) out.push_back(dets[i]);
  return out;
}

}  // namespace facercnn
