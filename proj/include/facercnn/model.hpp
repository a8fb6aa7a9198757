#pragma once

// Two-stage toy detector.
//
//   image {1,H,W}
//     -> conv3x3 -> ReLU -> maxpool2 -> conv3x3 -> ReLU -> maxpool2   (trunk, stride 4)
//     -> proposal head: conv3x3 -> ReLU -> 1x1 conv to 2A logits and 4A deltas
//     -> refinement head per RoI: RoI max pool PxP -> fc -> ReLU -> fc -> ReLU (feature x)
//                                 -> fc to 2 logits, fc to 4 deltas
//
// The refinement-head feature x is the input to its classifier and is the
// vector the center loss acts on. Refinement deltas are predicted in units
// of `head_delta_std`; proposal deltas are predicted raw.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "facercnn/geometry.hpp"
#include "facercnn/layers.hpp"
#include "facercnn/losses.hpp"
#include "facercnn/tensor.hpp"

namespace facercnn {

struct ModelConfig {
  static constexpr int stride = 4;
  int conv1_channels = 8;
  int conv2_channels = 16;
  int rpn_channels = 32;
  int roi_size = 4;
  int hidden = 64;
  int feature_dim = 32;
  AnchorSpec anchors;
  std::array<double, 4> head_delta_std{0.1, 0.1, 0.2, 0.2};

  int anchors_per_cell() const { return static_cast<int>(anchors.per_cell()); }

  void validate() const {
    anchors.validate();
    if (anchors.base_stride != stride) throw std::invalid_argument("anchor_stride must equal the trunk stride (4)");
    if (conv1_channels < 1 || conv2_channels < 1 || rpn_channels < 1 || hidden < 1 || feature_dim < 1)
      throw std::invalid_argument("layer widths must be >= 1");
    if (roi_size < 1) throw std::invalid_argument("roi_size must be >= 1");
    for (double s : head_delta_std)
      if (!(s > 0)) throw std::invalid_argument("head_delta_std entries must be positive");
  }
};

struct DetectorModel {
  ModelConfig cfg;
  Tensor conv1_w, conv1_b, conv2_w, conv2_b;
  Tensor rpn_w, rpn_b, rpn_cls_w, rpn_cls_b, rpn_reg_w, rpn_reg_b;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b, cls_w, cls_b, reg_w, reg_b;

  std::vector<std::pair<std::string, Tensor*>> named_params() {
    return {{"conv1.weight", &conv1_w}, {"conv1.bias", &conv1_b},     {"conv2.weight", &conv2_w},
            {"conv2.bias", &conv2_b},   {"rpn.weight", &rpn_w},       {"rpn.bias", &rpn_b},
            {"rpn_cls.weight", &rpn_cls_w}, {"rpn_cls.bias", &rpn_cls_b}, {"rpn_reg.weight", &rpn_reg_w},
            {"rpn_reg.bias", &rpn_reg_b}, {"fc1.weight", &fc1_w},     {"fc1.bias", &fc1_b},
            {"fc2.weight", &fc2_w},     {"fc2.bias", &fc2_b},         {"cls.weight", &cls_w},
            {"cls.bias", &cls_b},       {"reg.weight", &reg_w},       {"reg.bias", &reg_b}};
  }
  std::vector<std::pair<std::string, const Tensor*>> named_params() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [n, t] : const_cast<DetectorModel*>(this)->named_params()) out.emplace_back(n, t);
    return out;
  }

  void zero_grad() {
    for (auto& [n, t] : named_params()) {
      if (t->grad.size() != t->size()) t->enable_grad();
      else t->zero_grad();
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_params()) n += t->size();
    return n;
  }

  /// Uniform fan-in initialization, U(-sqrt(3/fan_in), sqrt(3/fan_in)); zero biases.
  static DetectorModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DetectorModel m;
    m.cfg = cfg;
    const int a = cfg.anchors_per_cell();
    const int pooled = cfg.conv2_channels * cfg.roi_size * cfg.roi_size;
    m.conv1_w = Tensor({cfg.conv1_channels, 1, 3, 3});
    m.conv1_b = Tensor({cfg.conv1_channels});
    m.conv2_w = Tensor({cfg.conv2_channels, cfg.conv1_channels, 3, 3});
    m.conv2_b = Tensor({cfg.conv2_channels});
    m.rpn_w = Tensor({cfg.rpn_channels, cfg.conv2_channels, 3, 3});
    m.rpn_b = Tensor({cfg.rpn_channels});
    m.rpn_cls_w = Tensor({2 * a, cfg.rpn_channels, 1, 1});
    m.rpn_cls_b = Tensor({2 * a});
    m.rpn_reg_w = Tensor({4 * a, cfg.rpn_channels, 1, 1});
    m.rpn_reg_b = Tensor({4 * a});
    m.fc1_w = Tensor({pooled, cfg.hidden});
    m.fc1_b = Tensor({cfg.hidden});
    m.fc2_w = Tensor({cfg.hidden, cfg.feature_dim});
    m.fc2_b = Tensor({cfg.feature_dim});
    m.cls_w = Tensor({cfg.feature_dim, 2});
    m.cls_b = Tensor({2});
    m.reg_w = Tensor({cfg.feature_dim, 4});
    m.reg_b = Tensor({4});

    std::mt19937_64 rng(seed);
    const auto fill = [&rng](Tensor& t, int fan_in) {
      const double lim = std::sqrt(3.0 / fan_in);
      std::uniform_real_distribution<double> u(-lim, lim);
      for (double& v : t.data) v = u(rng);
    };
    fill(m.conv1_w, 9);
    fill(m.conv2_w, 9 * cfg.conv1_channels);
    fill(m.rpn_w, 9 * cfg.conv2_channels);
    fill(m.rpn_cls_w, cfg.rpn_channels);
    fill(m.rpn_reg_w, cfg.rpn_channels);
    fill(m.fc1_w, pooled);
    fill(m.fc2_w, cfg.hidden);
    fill(m.cls_w, cfg.feature_dim);
    fill(m.reg_w, cfg.feature_dim);
    // Small regression outputs at start so early proposals stay near anchors.
    for (double& v : m.rpn_reg_w.data) v *= 0.1;
    for (double& v : m.reg_w.data) v *= 0.1;
    return m;
  }
};

/// Activations kept for the backward pass of the trunk and proposal head.
struct TrunkCache {
  Tensor input;
  Tensor act1;
  PoolResult pool1;
  Tensor act2;
  PoolResult pool2;  // pool2.out is the shared feature map
  Tensor rpn_act;
  Tensor rpn_logits;  // {2A, Hf, Wf}
  Tensor rpn_deltas;  // {4A, Hf, Wf}

  const Tensor& feature_map() const { return pool2.out; }
};

inline TrunkCache forward_trunk(const DetectorModel& m, const Tensor& image) {
  if (image.shape.size() != 3 || image.channels() != 1)
    throw std::invalid_argument("forward: expected a {1,H,W} image, got " + shape_string(image.shape));
  if (image.height() % ModelConfig::stride || image.width() % ModelConfig::stride || image.height() == 0 ||
      image.width() == 0)
    throw std::invalid_argument("forward: image dims must be positive multiples of 4, got " +
                                shape_string(image.shape));
  TrunkCache c;
  c.input = image;
  for (double& v : c.input.data) v -= 0.5;
  c.act1 = conv2d_forward(c.input, m.conv1_w, m.conv1_b);
  relu_inplace(c.act1);
  c.pool1 = maxpool2_forward(c.act1);
  c.act2 = conv2d_forward(c.pool1.out, m.conv2_w, m.conv2_b);
  relu_inplace(c.act2);
  c.pool2 = maxpool2_forward(c.act2);
  c.rpn_act = conv2d_forward(c.pool2.out, m.rpn_w, m.rpn_b);
  relu_inplace(c.rpn_act);
  c.rpn_logits = conv2d_forward(c.rpn_act, m.rpn_cls_w, m.rpn_cls_b);
  c.rpn_deltas = conv2d_forward(c.rpn_act, m.rpn_reg_w, m.rpn_reg_b);
  return c;
}

/// Proposal-head outputs for one anchor. Anchor index follows generate_anchors
/// ordering: (cell_y * Wf + cell_x) * A + a.
struct AnchorOutput {
  double logit_bg, logit_fg;
  Delta delta;
};

inline AnchorOutput anchor_output(const TrunkCache& c, std::size_t anchor_index, int anchors_per_cell) {
  const int hf = c.rpn_logits.height(), wf = c.rpn_logits.width();
  const int a = static_cast<int>(anchor_index % anchors_per_cell);
  const int cell = static_cast<int>(anchor_index / anchors_per_cell);
  const int y = cell / wf, x = cell % wf;
  (void)hf;
  return {c.rpn_logits.at(2 * a, y, x), c.rpn_logits.at(2 * a + 1, y, x),
          {c.rpn_deltas.at(4 * a, y, x), c.rpn_deltas.at(4 * a + 1, y, x), c.rpn_deltas.at(4 * a + 2, y, x),
           c.rpn_deltas.at(4 * a + 3, y, x)}};
}

/// Refinement-head activations for a set of RoIs (image coordinates).
struct HeadCache {
  std::vector<Box> rois;
  Matrix pooled;
  std::vector<std::vector<std::uint32_t>> argmax;
  Matrix hidden;
  Matrix features;
  Matrix logits;
  Matrix deltas;  // normalized by head_delta_std
};

inline HeadCache forward_head(const DetectorModel& m, const Tensor& fmap, std::span<const Box> rois) {
  HeadCache h;
  h.rois.assign(rois.begin(), rois.end());
  const int p = m.cfg.roi_size;
  const std::size_t width = static_cast<std::size_t>(fmap.channels()) * p * p;
  h.pooled = Matrix(rois.size(), width);
  h.argmax.resize(rois.size());
  const double scale = 1.0 / ModelConfig::stride;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const Box& r = rois[i];
    auto pr = roi_pool_forward(fmap, {r.x1 * scale, r.y1 * scale, r.x2 * scale, r.y2 * scale}, p);
    std::copy(pr.values.begin(), pr.values.end(), h.pooled.row(i).begin());
    h.argmax[i] = std::move(pr.argmax);
  }
  h.hidden = linear_forward(h.pooled, m.fc1_w, m.fc1_b);
  relu_inplace(h.hidden);
  h.features = linear_forward(h.hidden, m.fc2_w, m.fc2_b);
  relu_inplace(h.features);
  h.logits = linear_forward(h.features, m.cls_w, m.cls_b);
  h.deltas = linear_forward(h.features, m.reg_w, m.reg_b);
  return h;
}

/// Training targets for the proposal head: chosen anchors with labels and
/// raw delta targets (zero rows for negatives).
struct RpnTargets {
  std::vector<std::size_t> anchor_index;
  std::vector<int> labels;
  Matrix target_deltas;
};

/// Training targets for the refinement head. Deltas are already divided by
/// head_delta_std.
struct HeadTargets {
  std::vector<Box> rois;
  std::vector<int> labels;
  Matrix target_deltas;
};

struct StepLoss {
  double rpn_cls = 0, rpn_reg = 0;
  LossReport head;
  Matrix features;  // refinement-head features of the head batch
  double total = 0;
};

/// Scalar objective for fixed targets, with gradients accumulated into the
/// model's parameter grads when `backward` is set:
///   rpn_cls + lambda * rpn_reg + head_cls + lambda * head_reg + mu * center
inline StepLoss evaluate_loss(DetectorModel& m, const TrunkCache& c, const RpnTargets& rpn, const HeadTargets& head,
                              const Centers& centers, const LossWeights& w, bool backward, double grad_scale = 1.0) {
  StepLoss out;
  const int a_per = m.cfg.anchors_per_cell();
  const Tensor& fmap = c.feature_map();
  Tensor g_fmap(fmap.shape);
  Tensor g_rpn_logits, g_rpn_deltas;
  bool have_rpn = !rpn.anchor_index.empty();

  if (have_rpn) {
    const std::size_t n = rpn.anchor_index.size();
    Matrix logits(n, 2), deltas(n, 4);
    std::vector<int> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto ao = anchor_output(c, rpn.anchor_index[i], a_per);
      logits(i, 0) = ao.logit_bg;
      logits(i, 1) = ao.logit_fg;
      deltas(i, 0) = ao.delta.dx;
      deltas(i, 1) = ao.delta.dy;
      deltas(i, 2) = ao.delta.dw;
      deltas(i, 3) = ao.delta.dh;
      mask[i] = rpn.labels[i] == 1 ? 1 : 0;
    }
    auto ce = softmax_ce(logits, rpn.labels);
    auto l1 = smooth_l1(deltas, rpn.target_deltas, mask);
    out.rpn_cls = ce.loss;
    out.rpn_reg = l1.loss;
    if (backward) {
      g_rpn_logits = Tensor(c.rpn_logits.shape);
      g_rpn_deltas = Tensor(c.rpn_deltas.shape);
      const int wf = c.rpn_logits.width();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ai = rpn.anchor_index[i];
        const int a = static_cast<int>(ai % a_per);
        const int cell = static_cast<int>(ai / a_per);
        const int y = cell / wf, x = cell % wf;
        g_rpn_logits.at(2 * a, y, x) += grad_scale * ce.grad_logits(i, 0);
        g_rpn_logits.at(2 * a + 1, y, x) += grad_scale * ce.grad_logits(i, 1);
        for (int k = 0; k < 4; ++k) g_rpn_deltas.at(4 * a + k, y, x) += grad_scale * w.lambda * l1.grad(i, k);
      }
    }
  }

  if (!head.rois.empty()) {
    HeadCache h = forward_head(m, fmap, head.rois);
    std::vector<int> mask(head.labels.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = head.labels[i] == 1 ? 1 : 0;
    out.head = multitask_loss(h.logits, head.labels, h.deltas, head.target_deltas, mask, h.features, centers, w);
    out.features = h.features;
    if (backward) {
      const auto scaled = [grad_scale](Matrix g) {
        for (double& v : g.data) v *= grad_scale;
        return g;
      };
      Matrix g_logits = scaled(out.head.grad_logits);
      Matrix g_deltas = scaled(out.head.grad_deltas);
      Matrix g_feat = scaled(out.head.grad_features);
      Matrix gx_cls = linear_backward(h.features, m.cls_w, m.cls_b, g_logits, true);
      Matrix gx_reg = linear_backward(h.features, m.reg_w, m.reg_b, g_deltas, true);
      for (std::size_t i = 0; i < g_feat.data.size(); ++i) g_feat.data[i] += gx_cls.data[i] + gx_reg.data[i];
      relu_backward_inplace(g_feat.data, h.features.data);
      Matrix g_hidden = linear_backward(h.hidden, m.fc2_w, m.fc2_b, g_feat, true);
      relu_backward_inplace(g_hidden.data, h.hidden.data);
      Matrix g_pooled = linear_backward(h.pooled, m.fc1_w, m.fc1_b, g_hidden, true);
      for (std::size_t i = 0; i < h.rois.size(); ++i) roi_pool_backward(h.argmax[i], g_pooled.row(i), g_fmap.data);
    }
  }
  out.total = out.rpn_cls + w.lambda * out.rpn_reg + out.head.total;

  if (backward) {
    if (have_rpn) {
      Tensor g1 = conv2d_backward(c.rpn_act, m.rpn_cls_w, m.rpn_cls_b, g_rpn_logits, true);
      Tensor g2 = conv2d_backward(c.rpn_act, m.rpn_reg_w, m.rpn_reg_b, g_rpn_deltas, true);
      for (std::size_t i = 0; i < g1.data.size(); ++i) g1.data[i] += g2.data[i];
      relu_backward_inplace(g1.data, c.rpn_act.data);
      Tensor g3 = conv2d_backward(c.pool2.out, m.rpn_w, m.rpn_b, g1, true);
      for (std::size_t i = 0; i < g3.data.size(); ++i) g_fmap.data[i] += g3.data[i];
    }
    Tensor g_act2 = maxpool2_backward(c.act2.shape, c.pool2.argmax, g_fmap);
    relu_backward_inplace(g_act2.data, c.act2.data);
    Tensor g_pool1 = conv2d_backward(c.pool1.out, m.conv2_w, m.conv2_b, g_act2, true);
    Tensor g_act1 = maxpool2_backward(c.act1.shape, c.pool1.argmax, g_pool1);
    relu_backward_inplace(g_act1.data, c.act1.data);
    conv2d_backward(c.input, m.conv1_w, m.conv1_b, g_act1, false);
  }
  return out;
}

}  // namespace facercnn
