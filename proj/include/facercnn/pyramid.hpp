#pragma once

// Multi-scale support: bilinear resizing to stride-aligned sizes, random
// per-image training scales and cross-scale merging of detections.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "facercnn/geometry.hpp"
#include "facercnn/tensor.hpp"

namespace facercnn {

struct ScaleSet {
  std::vector<double> scales{0.5, 1.0, 2.0};

  void validate() const {
    if (scales.empty()) throw std::invalid_argument("scale set must be non-empty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (!(scales[i] > 0)) throw std::invalid_argument("scales must be positive");
      if (i && !(scales[i] > scales[i - 1])) throw std::invalid_argument("scales must be sorted ascending");
    }
  }
};

/// Output size for one axis: round(n * scale) snapped down to a multiple of `stride`.
inline int scaled_extent(int n, double scale, int stride) {
  const long r = std::lround(n * scale);
  return static_cast<int>(r - r % stride);
}

/// Bilinear resize by `scale`. The sampling grid is tied to the nominal scale
/// (output pixel centre u maps to input (u + 0.5) / scale - 0.5), so a box in
/// the output frame maps back to the input frame by dividing by `scale`;
/// stride snapping only crops the far border.
inline Tensor resize_image(const Tensor& image, double scale, int stride = 4) {
  if (!(scale > 0)) throw std::invalid_argument("resize_image: scale must be > 0");
  if (image.shape.size() != 3) throw std::invalid_argument("resize_image: expected {C,H,W}");
  const int c = image.channels(), h = image.height(), w = image.width();
  const int oh = scaled_extent(h, scale, stride), ow = scaled_extent(w, scale, stride);
  if (oh < 8 || ow < 8)
    throw std::invalid_argument("resize_image: output " + std::to_string(ow) + "x" + std::to_string(oh) +
                                " is smaller than 8x8");
  Tensor out({c, oh, ow});
  std::vector<int> x0(ow), x1(ow);
  std::vector<double> fx(ow);
  for (int x = 0; x < ow; ++x) {
    const double sx = std::clamp((x + 0.5) / scale - 0.5, 0.0, static_cast<double>(w - 1));
    x0[x] = static_cast<int>(std::floor(sx));
    x1[x] = std::min(x0[x] + 1, w - 1);
    fx[x] = sx - x0[x];
  }
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      const double sy = std::clamp((y + 0.5) / scale - 0.5, 0.0, static_cast<double>(h - 1));
      const int y0 = static_cast<int>(std::floor(sy));
      const int y1 = std::min(y0 + 1, h - 1);
      const double fy = sy - y0;
      for (int x = 0; x < ow; ++x) {
        const double top = image.at(ch, y0, x0[x]) * (1 - fx[x]) + image.at(ch, y0, x1[x]) * fx[x];
        const double bot = image.at(ch, y1, x0[x]) * (1 - fx[x]) + image.at(ch, y1, x1[x]) * fx[x];
        out.at(ch, y, x) = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

/// Uniform choice of one training scale.
inline double pick_training_scale(std::mt19937_64& rng, const ScaleSet& set) {
  set.validate();
  std::uniform_int_distribution<std::size_t> pick(0, set.scales.size() - 1);
  return set.scales[pick(rng)];
}

/// Maps each detection back to the original frame by dividing by
/// scales[scale_id], takes the union and applies NMS.
inline std::vector<Detection> merge_multiscale(const std::vector<Detection>& dets, const ScaleSet& set,
                                               double iou_threshold = 0.3) {
  set.validate();
  std::vector<Detection> all;
  all.reserve(dets.size());
  for (Detection d : dets) {
    if (d.scale_id < 0 || static_cast<std::size_t>(d.scale_id) >= set.scales.size())
      throw std::invalid_argument("merge_multiscale: unknown scale id " + std::to_string(d.scale_id));
    const double s = set.scales[static_cast<std::size_t>(d.scale_id)];
    d.box = {d.box.x1 / s, d.box.y1 / s, d.box.x2 / s, d.box.y2 / s};
    all.push_back(d);
  }
  return nms(all, iou_threshold);
}

}  // namespace facercnn
