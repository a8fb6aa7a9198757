#pragma once

// Ground-truth assignment for anchors and proposals, plus balanced online
// hard example mining.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "facercnn/geometry.hpp"

namespace facercnn {

enum class SampleLabel { negative = 0, positive = 1, ignore = 2 };

struct LabeledSample {
  std::size_t index = 0;
  SampleLabel label = SampleLabel::ignore;
  std::optional<std::size_t> matched_gt;
  std::optional<Delta> target_delta;
};

struct AnchorThresholds {
  double positive = 0.7;  // strictly above
  double negative = 0.3;  // strictly below
};

struct ProposalThresholds {
  double positive = 0.5;      // max IoU >= positive
  double negative_low = 0.1;  // negative when max IoU in [negative_low, positive)
};

struct OhemConfig {
  std::size_t batch_size = 128;

  void validate() const {
    if (batch_size < 2 || batch_size % 2 != 0)
      throw std::invalid_argument("ohem batch_size must be even and >= 2");
  }
};

namespace detail {
inline bool inside_image(const Box& b, double w, double h) {
  return b.x1 >= 0 && b.y1 >= 0 && b.x2 <= w && b.y2 <= h;
}

inline LabeledSample make_positive(std::size_t idx, std::size_t gt, const Box& gt_box, const Box& ref) {
  return {idx, SampleLabel::positive, gt, encode_delta(gt_box, ref)};
}
}  // namespace detail

/// RPN labeling. Anchors crossing the image border are ignored. Max IoU
/// above 0.7 is positive and below 0.3 is negative. Then every gt claims its
/// highest-IoU in-image anchor (lowest index on ties) among those not already
/// positive for a different gt, so each gt that overlaps any in-image anchor
/// owns at least one positive.
inline std::vector<LabeledSample> label_anchors(std::span<const Box> anchors, std::span<const Box> gts,
                                                int image_w, int image_h, const AnchorThresholds& th = {}) {
  const std::size_t na = anchors.size(), ng = gts.size();
  std::vector<LabeledSample> out(na);
  std::vector<double> overlaps(na * ng, 0.0);
  std::vector<char> in_image(na, 0);

  for (std::size_t a = 0; a < na; ++a) {
    out[a].index = a;
    in_image[a] = detail::inside_image(anchors[a], image_w, image_h) ? 1 : 0;
    if (!in_image[a]) continue;
    double best = 0.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      const double v = overlaps[a * ng + g] = iou(anchors[a], gts[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (ng > 0 && best > th.positive) {
      out[a] = detail::make_positive(a, best_g, gts[best_g], anchors[a]);
    } else if (best < th.negative) {
      out[a].label = SampleLabel::negative;
    }
  }

  for (std::size_t g = 0; g < ng; ++g) {
    double best = 0.0;
    std::size_t pick = na;
    for (std::size_t a = 0; a < na; ++a) {
      if (!in_image[a]) continue;
      if (out[a].label == SampleLabel::positive && out[a].matched_gt != g) continue;
      if (overlaps[a * ng + g] > best) {
        best = overlaps[a * ng + g];
        pick = a;
      }
    }
    if (pick < na && out[pick].label != SampleLabel::positive)
      out[pick] = detail::make_positive(pick, g, gts[g], anchors[pick]);
  }
  return out;
}

/// Refinement-head labeling: positive at max IoU >= 0.5, negative in
/// [0.1, 0.5), everything below 0.1 ignored.
inline std::vector<LabeledSample> label_proposals(std::span<const Box> proposals, std::span<const Box> gts,
                                                  const ProposalThresholds& th = {}) {
  std::vector<LabeledSample> out(proposals.size());
  for (std::size_t p = 0; p < proposals.size(); ++p) {
    out[p].index = p;
    double best = 0.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(proposals[p], gts[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (!gts.empty() && best >= th.positive) {
      out[p] = detail::make_positive(p, best_g, gts[best_g], proposals[p]);
    } else if (best >= th.negative_low) {
      out[p].label = SampleLabel::negative;
    }
  }
  return out;
}

/// Balanced hard example selection: the batch_size/2 highest-loss positives
/// and the batch_size/2 highest-loss negatives, each ranked by descending loss
/// with ties to the lower position. Returns positions into `samples`,
/// positives first.
inline std::vector<std::size_t> ohem_select(std::span<const LabeledSample> samples,
                                            std::span<const double> per_sample_loss, const OhemConfig& cfg) {
  cfg.validate();
  if (per_sample_loss.size() != samples.size())
    throw std::invalid_argument("ohem_select: loss vector not aligned with samples");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!std::isfinite(per_sample_loss[i])) throw std::invalid_argument("ohem_select: non-finite loss");
    if (samples[i].label == SampleLabel::positive) pos.push_back(i);
    else if (samples[i].label == SampleLabel::negative) neg.push_back(i);
  }
  if (pos.empty() && neg.empty()) throw std::runtime_error("ohem_select: no positive or negative samples");
  const std::size_t cap = cfg.batch_size / 2;
  const auto hardest = [&](std::vector<std::size_t>& idx) {
    const std::size_t k = std::min(cap, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (per_sample_loss[a] != per_sample_loss[b]) return per_sample_loss[a] > per_sample_loss[b];
                        return a < b;
                      });
    idx.resize(k);
  };
  hardest(pos);
  hardest(neg);
  pos.insert(pos.end(), neg.begin(), neg.end());
  return pos;
}

/// Balanced random sampling with the same per-class caps; used when hard
/// mining is disabled. `shuffle` must permute its argument deterministically.
template <class Shuffle>
std::vector<std::size_t> balanced_random_select(std::span<const LabeledSample> samples, const OhemConfig& cfg,
                                                Shuffle&& shuffle) {
  cfg.validate();
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label == SampleLabel::positive) pos.push_back(i);
    else if (samples[i].label == SampleLabel::negative) neg.push_back(i);
  }
  if (pos.empty() && neg.empty()) throw std::runtime_error("balanced_random_select: no positive or negative samples");
  const std::size_t cap = cfg.batch_size / 2;
  shuffle(pos);
  shuffle(neg);
  pos.resize(std::min(cap, pos.size()));
  neg.resize(std::min(cap, neg.size()));
  pos.insert(pos.end(), neg.begin(), neg.end());
  return pos;
}

}  // namespace facercnn
