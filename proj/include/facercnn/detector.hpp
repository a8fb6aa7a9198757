#pragma once

// Training and inference pipeline around DetectorModel.
//
// One training step, per image:
//   pick a scale -> resize -> trunk forward -> label anchors -> select the
//   proposal-head batch -> proposals (top-N by score, NMS) -> label proposals
//   -> refinement-head forward on the candidates -> select the hard batch ->
//   multitask loss + backward.
// Then, once per step: clip the global gradient norm, SGD with momentum and
// the mini-batch center update.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "facercnn/config.hpp"
#include "facercnn/geometry.hpp"
#include "facercnn/losses.hpp"
#include "facercnn/matching.hpp"
#include "facercnn/model.hpp"
#include "facercnn/parallel.hpp"
#include "facercnn/pyramid.hpp"
#include "facercnn/synthdata.hpp"

namespace facercnn {

struct Proposals {
  std::vector<Box> boxes;
  std::vector<double> scores;
};

namespace detail {
// exp() guard for predicted log-size ratios.
inline constexpr double kMaxLogRatio = 4.135166556742356;  // ln(1000 / 16)

inline Delta clamp_delta(Delta d) {
  d.dw = std::min(d.dw, kMaxLogRatio);
  d.dh = std::min(d.dh, kMaxLogRatio);
  return d;
}
}  // namespace detail

/// Decodes every anchor, keeps the `cap` best by score, applies NMS and
/// returns at most `post_nms` survivors in descending score order.
inline Proposals generate_proposals(const DetectorModel& m, const TrunkCache& c, int image_w, int image_h,
                                    int cap, double nms_threshold, int post_nms, double min_size) {
  const int hf = c.rpn_logits.height(), wf = c.rpn_logits.width();
  const auto anchors = generate_anchors(m.cfg.anchors, wf, hf);
  const int a_per = m.cfg.anchors_per_cell();
  std::vector<Detection> cand;
  cand.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto ao = anchor_output(c, i, a_per);
    const Box b = clip_box(decode_delta(detail::clamp_delta(ao.delta), anchors[i]), image_w, image_h);
    if (b.width() < min_size || b.height() < min_size || !(b.area() > 0)) continue;
    cand.push_back({b, face_probability(ao.logit_bg, ao.logit_fg), 0});
  }
  const auto order = score_order(cand);
  std::vector<Detection> top;
  top.reserve(std::min<std::size_t>(order.size(), static_cast<std::size_t>(cap)));
  for (std::size_t i = 0; i < order.size() && static_cast<int>(i) < cap; ++i) top.push_back(cand[order[i]]);
  Proposals out;
  for (const auto& d : nms(top, nms_threshold)) {
    if (static_cast<int>(out.boxes.size()) >= post_nms) break;
    out.boxes.push_back(d.box);
    out.scores.push_back(d.score);
  }
  return out;
}

struct TrainState {
  DetectorModel model;
  Centers centers;
  std::int64_t step = 0;
  std::uint64_t rng_seed = 0;
  std::mt19937_64 rng;
  std::vector<std::vector<double>> velocity;

  static TrainState init(const Config& cfg) {
    TrainState s;
    s.model = DetectorModel::init(cfg.model, cfg.seed);
    s.centers = Centers(static_cast<std::size_t>(cfg.model.feature_dim), cfg.center_alpha);
    s.rng_seed = cfg.seed;
    s.rng.seed(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    for (auto& [name, t] : s.model.named_params()) s.velocity.emplace_back(t->size(), 0.0);
    return s;
  }
};

struct StepReport {
  double total = 0, rpn_cls = 0, rpn_reg = 0, head_cls = 0, head_reg = 0, center = 0;
  double head_cls_face = 0, head_cls_nonface = 0;  // mean CE per class over the selected batch
  std::size_t positives = 0, negatives = 0;
  double grad_norm = 0;
};

namespace detail {

inline std::vector<Box> scale_boxes(const std::vector<Box>& boxes, double s, int w, int h) {
  std::vector<Box> out;
  for (const Box& b : boxes) {
    const Box c = clip_box({b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s}, w, h);
    if (c.width() > 0 && c.height() > 0) out.push_back(c);
  }
  return out;
}

inline Matrix delta_rows(const std::vector<LabeledSample>& samples, std::span<const std::size_t> pick,
                         const std::array<double, 4>& stdev) {
  Matrix m(pick.size(), 4);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    const auto& s = samples[pick[i]];
    if (!s.target_delta) continue;
    m(i, 0) = s.target_delta->dx / stdev[0];
    m(i, 1) = s.target_delta->dy / stdev[1];
    m(i, 2) = s.target_delta->dw / stdev[2];
    m(i, 3) = s.target_delta->dh / stdev[3];
  }
  return m;
}

template <class Rng>
auto shuffler(Rng& rng) {
  return [&rng](std::vector<std::size_t>& v) { std::shuffle(v.begin(), v.end(), rng); };
}

}  // namespace detail

/// Everything needed to evaluate (and differentiate) one image's loss with
/// the sample selection frozen.
struct ImageTargets {
  TrunkCache cache;
  RpnTargets rpn;
  HeadTargets head;
};

/// Runs the non-differentiable part of a training step for one image that is
/// already at its training scale: labeling, proposals and hard example
/// selection.
inline ImageTargets build_targets(const DetectorModel& m, const Tensor& image, const std::vector<Box>& gts,
                                  const Config& cfg, std::mt19937_64& rng) {
  ImageTargets t;
  t.cache = forward_trunk(m, image);
  const int w = image.width(), h = image.height();
  const TrunkCache& c = t.cache;
  const int a_per = m.cfg.anchors_per_cell();

  // Proposal head batch.
  const auto anchors = generate_anchors(m.cfg.anchors, c.rpn_logits.width(), c.rpn_logits.height());
  const auto alabels = label_anchors(anchors, gts, w, h, cfg.anchor_iou);
  std::vector<std::size_t> rpn_pick;
  const OhemConfig rpn_ohem{static_cast<std::size_t>(cfg.rpn_batch)};
  if (cfg.ohem_rpn) {
    std::vector<double> loss(alabels.size(), 0.0);
    for (std::size_t i = 0; i < alabels.size(); ++i) {
      if (alabels[i].label == SampleLabel::ignore) continue;
      const auto ao = anchor_output(c, i, a_per);
      const int y = alabels[i].label == SampleLabel::positive ? 1 : 0;
      const double lse = std::max(ao.logit_bg, ao.logit_fg) +
                         std::log1p(std::exp(-std::abs(ao.logit_bg - ao.logit_fg)));
      loss[i] = lse - (y ? ao.logit_fg : ao.logit_bg);
      if (cfg.ohem_rank == OhemRank::cls_reg && y) {
        const Delta& td = *alabels[i].target_delta;
        const double r[4] = {ao.delta.dx - td.dx, ao.delta.dy - td.dy, ao.delta.dw - td.dw, ao.delta.dh - td.dh};
        for (double x : r) loss[i] += cfg.weights.lambda * (std::abs(x) < 1 ? 0.5 * x * x : std::abs(x) - 0.5);
      }
    }
    rpn_pick = ohem_select(alabels, loss, rpn_ohem);
  } else {
    rpn_pick = balanced_random_select(alabels, rpn_ohem, detail::shuffler(rng));
  }
  t.rpn.target_deltas = Matrix(rpn_pick.size(), 4);
  for (std::size_t i = 0; i < rpn_pick.size(); ++i) {
    const auto& s = alabels[rpn_pick[i]];
    t.rpn.anchor_index.push_back(s.index);
    t.rpn.labels.push_back(s.label == SampleLabel::positive ? 1 : 0);
    if (s.target_delta) {
      t.rpn.target_deltas(i, 0) = s.target_delta->dx;
      t.rpn.target_deltas(i, 1) = s.target_delta->dy;
      t.rpn.target_deltas(i, 2) = s.target_delta->dw;
      t.rpn.target_deltas(i, 3) = s.target_delta->dh;
    }
  }

  // Refinement head batch.
  auto props = generate_proposals(m, c, w, h, cfg.proposal_cap, cfg.nms_proposal, cfg.post_nms_train,
                                  cfg.min_proposal_size);
  std::vector<Box> rois = std::move(props.boxes);
  if (cfg.add_gt_proposals) rois.insert(rois.end(), gts.begin(), gts.end());
  const auto plabels = label_proposals(rois, gts, cfg.proposal_iou);
  std::vector<LabeledSample> cand;
  std::vector<Box> cand_rois;
  for (const auto& s : plabels) {
    if (s.label == SampleLabel::ignore) continue;
    cand.push_back(s);
    cand_rois.push_back(rois[s.index]);
  }
  if (cand.empty()) return t;  // no refinement samples in this image

  const OhemConfig head_ohem{static_cast<std::size_t>(cfg.head_batch)};
  std::vector<std::size_t> head_pick;
  if (cfg.ohem) {
    const HeadCache hc = forward_head(m, c.feature_map(), cand_rois);
    std::vector<int> labels(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) labels[i] = cand[i].label == SampleLabel::positive ? 1 : 0;
    auto loss = softmax_ce(hc.logits, labels).per_sample;
    if (cfg.ohem_rank == OhemRank::cls_reg) {
      std::vector<std::size_t> all(cand.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      const Matrix targets = detail::delta_rows(cand, all, m.cfg.head_delta_std);
      auto l1 = smooth_l1(hc.deltas, targets, labels);
      for (std::size_t i = 0; i < loss.size(); ++i) loss[i] += cfg.weights.lambda * l1.per_sample[i];
    }
    head_pick = ohem_select(cand, loss, head_ohem);
  } else {
    head_pick = balanced_random_select(cand, head_ohem, detail::shuffler(rng));
  }
  for (std::size_t i : head_pick) {
    t.head.rois.push_back(cand_rois[i]);
    t.head.labels.push_back(cand[i].label == SampleLabel::positive ? 1 : 0);
  }
  t.head.target_deltas = detail::delta_rows(cand, head_pick, m.cfg.head_delta_std);
  return t;
}

inline void check_finite(const DetectorModel& m) {
  for (const auto& [name, t] : m.named_params())
    for (double v : t->data)
      if (!std::isfinite(v)) throw std::runtime_error("non-finite parameter in " + name);
}

/// One SGD step over a batch of scenes (original resolution).
inline StepReport train_step(TrainState& state, std::span<const Scene* const> batch, const Config& cfg) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  StepReport rep;
  DetectorModel& m = state.model;
  m.zero_grad();
  const ScaleSet scales{cfg.scales};
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Matrix feats(0, state.centers.feature_dim());
  std::vector<int> feat_labels;
  double face_ce = 0, nonface_ce = 0;
  std::size_t nface = 0, nnonface = 0;

  for (const Scene* scene : batch) {
    const double s = pick_training_scale(state.rng, scales);
    const Tensor img = s == 1.0 ? scene->image : resize_image(scene->image, s, ModelConfig::stride);
    const auto gts = detail::scale_boxes(scene->gts, s, img.width(), img.height());
    ImageTargets t = build_targets(m, img, gts, cfg, state.rng);
    const StepLoss l = evaluate_loss(m, t.cache, t.rpn, t.head, state.centers, cfg.weights, true, inv_b);
    rep.total += l.total * inv_b;
    rep.rpn_cls += l.rpn_cls * inv_b;
    rep.rpn_reg += l.rpn_reg * inv_b;
    rep.head_cls += l.head.cls * inv_b;
    rep.head_reg += l.head.reg * inv_b;
    rep.center += l.head.center * inv_b;
    for (std::size_t i = 0; i < t.head.labels.size(); ++i) {
      const int y = t.head.labels[i];
      (y ? face_ce : nonface_ce) += l.head.per_sample_cls[i];
      (y ? nface : nnonface) += 1;
      (y ? rep.positives : rep.negatives) += 1;
    }
    if (!t.head.labels.empty()) {
      feats.data.insert(feats.data.end(), l.features.data.begin(), l.features.data.end());
      feats.rows += l.features.rows;
      feat_labels.insert(feat_labels.end(), t.head.labels.begin(), t.head.labels.end());
    }
  }
  rep.head_cls_face = nface ? face_ce / static_cast<double>(nface) : 0.0;
  rep.head_cls_nonface = nnonface ? nonface_ce / static_cast<double>(nnonface) : 0.0;

  double sq = 0;
  for (const auto& [name, t] : m.named_params())
    for (double g : t->grad) sq += g * g;
  rep.grad_norm = std::sqrt(sq);
  const double clip = rep.grad_norm > cfg.clip_norm ? cfg.clip_norm / rep.grad_norm : 1.0;
  std::size_t pi = 0;
  for (auto& [name, t] : m.named_params()) {
    auto& v = state.velocity[pi++];
    for (std::size_t i = 0; i < t->size(); ++i) {
      v[i] = cfg.momentum * v[i] - cfg.learning_rate * clip * t->grad[i];
      t->data[i] += v[i];
    }
  }
  if (feats.rows > 0) state.centers = update_centers(state.centers, feats, feat_labels);
  check_finite(m);
  ++state.step;
  return rep;
}

/// Trains for cfg.steps steps, cycling through `scenes` in a fresh seeded
/// order each epoch. `on_step` (optional) sees every report.
inline void train(TrainState& state, const std::vector<Scene>& scenes, const Config& cfg,
                  const std::function<void(std::int64_t, const StepReport&)>& on_step = {}) {
  if (scenes.empty()) throw std::invalid_argument("train: no training scenes");
  std::vector<std::size_t> order(scenes.size());
  std::size_t cursor = order.size();
  for (int it = 0; it < cfg.steps; ++it) {
    std::vector<const Scene*> batch;
    for (int b = 0; b < cfg.images_per_step; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), state.rng);
        cursor = 0;
      }
      batch.push_back(&scenes[order[cursor++]]);
    }
    const StepReport r = train_step(state, batch, cfg);
    if (on_step) on_step(state.step, r);
  }
}

// ---------------------------------------------------------------------------
// Inference

/// Two-stage detection on an image at its own resolution: proposals, NMS,
/// refinement head, decode, clip, score filter (score > threshold), final NMS.
inline std::vector<Detection> detect(const DetectorModel& m, const Tensor& image, const Config& cfg,
                                     double score_threshold) {
  const TrunkCache c = forward_trunk(m, image);
  const int w = image.width(), h = image.height();
  const auto props = generate_proposals(m, c, w, h, cfg.proposal_cap, cfg.nms_proposal, cfg.post_nms_test,
                                        cfg.min_proposal_size);
  if (props.boxes.empty()) return {};
  const HeadCache hc = forward_head(m, c.feature_map(), props.boxes);
  const auto& sd = m.cfg.head_delta_std;
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < props.boxes.size(); ++i) {
    const double score = face_probability(hc.logits(i, 0), hc.logits(i, 1));
    if (!(score > score_threshold)) continue;
    const Delta d{hc.deltas(i, 0) * sd[0], hc.deltas(i, 1) * sd[1], hc.deltas(i, 2) * sd[2], hc.deltas(i, 3) * sd[3]};
    const Box b = clip_box(decode_delta(detail::clamp_delta(d), props.boxes[i]), w, h);
    if (!(b.area() > 0)) continue;
    dets.push_back({b, score, 0});
  }
  return nms(dets, cfg.nms_final);
}

/// Runs detect at every scale in `scales` and merges in the original frame.
inline std::vector<Detection> detect_multiscale(const DetectorModel& m, const Tensor& image, const Config& cfg,
                                                const std::vector<double>& scales, double score_threshold) {
  const ScaleSet set{scales};
  set.validate();
  std::vector<Detection> all;
  for (std::size_t k = 0; k < scales.size(); ++k) {
    const double s = scales[k];
    const Tensor img = s == 1.0 ? image : resize_image(image, s, ModelConfig::stride);
    for (Detection d : detect(m, img, cfg, score_threshold)) {
      d.scale_id = static_cast<int>(k);
      all.push_back(d);
    }
  }
  return merge_multiscale(all, set, cfg.nms_final);
}

/// Multi-scale detection over many images; per-image work runs on
/// `threads` workers and results are stored in image order.
inline std::vector<std::vector<Detection>> detect_all(const DetectorModel& m, const std::vector<const Tensor*>& images,
                                                      const Config& cfg, const std::vector<double>& scales,
                                                      double score_threshold, int threads) {
  std::vector<std::vector<Detection>> out(images.size());
  parallel_for(images.size(), threads,
               [&](std::size_t i) { out[i] = detect_multiscale(m, *images[i], cfg, scales, score_threshold); });
  return out;
}

/// Refinement-head features grouped by class on a labeled image set:
/// proposals at the original scale (plus the ground-truth boxes) labeled with
/// the training rules. Row order is deterministic.
struct ClassFeatures {
  Matrix face, nonface;
};

inline ClassFeatures collect_features(const DetectorModel& m, const std::vector<Scene>& scenes, const Config& cfg) {
  ClassFeatures out;
  out.face = Matrix(0, static_cast<std::size_t>(m.cfg.feature_dim));
  out.nonface = Matrix(0, static_cast<std::size_t>(m.cfg.feature_dim));
  for (const Scene& s : scenes) {
    const TrunkCache c = forward_trunk(m, s.image);
    auto props = generate_proposals(m, c, s.image.width(), s.image.height(), cfg.proposal_cap, cfg.nms_proposal,
                                    cfg.post_nms_test, cfg.min_proposal_size);
    std::vector<Box> rois = std::move(props.boxes);
    rois.insert(rois.end(), s.gts.begin(), s.gts.end());
    const auto labels = label_proposals(rois, s.gts, cfg.proposal_iou);
    std::vector<Box> keep;
    std::vector<int> y;
    for (const auto& l : labels) {
      if (l.label == SampleLabel::ignore) continue;
      keep.push_back(rois[l.index]);
      y.push_back(l.label == SampleLabel::positive ? 1 : 0);
    }
    if (keep.empty()) continue;
    const HeadCache hc = forward_head(m, c.feature_map(), keep);
    for (std::size_t i = 0; i < keep.size(); ++i) {
      Matrix& dst = y[i] ? out.face : out.nonface;
      const auto row = hc.features.row(i);
      dst.data.insert(dst.data.end(), row.begin(), row.end());
      dst.rows += 1;
    }
  }
  return out;
}

/// Trace of the (population) covariance of the rows of `x`.
inline double covariance_trace(const Matrix& x) {
  if (x.rows == 0) return 0.0;
  double tr = 0;
  for (std::size_t k = 0; k < x.cols; ++k) {
    double mean = 0;
    for (std::size_t i = 0; i < x.rows; ++i) mean += x(i, k);
    mean /= static_cast<double>(x.rows);
    double var = 0;
    for (std::size_t i = 0; i < x.rows; ++i) var += (x(i, k) - mean) * (x(i, k) - mean);
    tr += var / static_cast<double>(x.rows);
  }
  return tr;
}

}  // namespace facercnn
