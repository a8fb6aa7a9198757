#pragma once

// Finite-difference gradient checks for every loss and layer.
//
// Each check draws seeded random inputs, computes the analytic gradient of a
// scalar objective and compares it with central differences (step 1e-5).
// Layers with vector outputs are reduced to a scalar through a fixed random
// projection sum_i r_i * y_i. The error of one case is
//
//   |g_analytic - g_numeric|_2 / max(|g_analytic|_2, |g_numeric|_2, 1e-12)
//
// Inputs are drawn away from the non-differentiable points of ReLU and
// SmoothL1. For the full network, a probed parameter whose +h and -h
// evaluations take different ReLU/max branches is replaced by the next
// candidate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "facercnn/config.hpp"
#include "facercnn/detector.hpp"
#include "facercnn/layers.hpp"
#include "facercnn/losses.hpp"
#include "facercnn/model.hpp"
#include "facercnn/synthdata.hpp"

namespace facercnn {

inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kLossGradTolerance = 1e-5;
inline constexpr double kNetworkGradTolerance = 1e-4;

struct GradCheckResult {
  std::string name;
  int cases = 0;
  double max_error = 0;
  double tolerance = 0;
  int skipped_probes = 0;
  bool passed() const { return cases > 0 && max_error < tolerance; }
};

inline double gradient_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

/// Central differences of f with respect to every entry of each buffer.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, std::vector<std::vector<double>*> xs,
                                            double h = kFiniteDifferenceStep) {
  std::vector<double> g;
  for (auto* x : xs) {
    for (double& v : *x) {
      const double v0 = v;
      v = v0 + h;
      const double fp = f();
      v = v0 - h;
      const double fm = f();
      v = v0;
      g.push_back((fp - fm) / (2 * h));
    }
  }
  return g;
}

namespace detail {

using Rng = std::mt19937_64;

inline std::vector<double> uniform_vec(Rng& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1, double hi = 1) {
  Matrix m(r, c);
  m.data = uniform_vec(rng, r * c, lo, hi);
  return m;
}

inline Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  t.data = uniform_vec(rng, t.size(), lo, hi);
  return t;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<double> concat(std::initializer_list<const std::vector<double>*> parts) {
  std::vector<double> out;
  for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
  return out;
}

inline std::vector<int> random_labels(Rng& rng, std::size_t n) {
  std::vector<int> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = static_cast<int>(rng() % 2);
  l[0] = 1;
  if (n > 1) l[1] = 0;
  return l;
}

// Pushes entries away from a kink at |x| == k by at least `gap`.
inline void avoid_abs(std::vector<double>& v, double k, double gap) {
  for (double& x : v)
    if (std::abs(std::abs(x) - k) < gap) x = (x < 0 ? -1 : 1) * (k + gap);
}

template <class Fn>
GradCheckResult run_cases(const std::string& name, int cases, std::uint64_t seed, double tol, Fn&& one_case) {
  GradCheckResult r{name, 0, 0, tol, 0};
  for (int k = 0; k < cases; ++k) {
    std::seed_seq ss{seed, static_cast<std::uint64_t>(k)};
    Rng rng(ss);
    r.max_error = std::max(r.max_error, one_case(rng, r));
    ++r.cases;
  }
  return r;
}

}  // namespace detail

inline GradCheckResult check_softmax_ce(int cases = 20, std::uint64_t seed = 1) {
  return detail::run_cases("softmax_ce", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const std::size_t n = 2 + rng() % 15;
    Matrix logits = detail::random_matrix(rng, n, 2, -3, 3);
    const auto labels = detail::random_labels(rng, n);
    const auto analytic = softmax_ce(logits, labels).grad_logits.data;
    const auto numeric = numeric_gradient([&] { return softmax_ce(logits, labels).loss; }, {&logits.data});
    return gradient_error(analytic, numeric);
  });
}

inline GradCheckResult check_smooth_l1(int cases = 20, std::uint64_t seed = 2) {
  return detail::run_cases("smooth_l1", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const std::size_t n = 2 + rng() % 15;
    Matrix pred = detail::random_matrix(rng, n, 4, -2, 2);
    const Matrix target = detail::random_matrix(rng, n, 4, -2, 2);
    std::vector<double> d(pred.data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = pred.data[i] - target.data[i];
    detail::avoid_abs(d, 1.0, 1e-3);
    for (std::size_t i = 0; i < d.size(); ++i) pred.data[i] = target.data[i] + d[i];
    const auto mask = detail::random_labels(rng, n);
    const auto analytic = smooth_l1(pred, target, mask).grad.data;
    const auto numeric = numeric_gradient([&] { return smooth_l1(pred, target, mask).loss; }, {&pred.data});
    return gradient_error(analytic, numeric);
  });
}

inline GradCheckResult check_center_loss(int cases = 20, std::uint64_t seed = 3) {
  return detail::run_cases("center_loss", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const std::size_t n = 2 + rng() % 15, d = 1 + rng() % 12;
    Matrix feat = detail::random_matrix(rng, n, d, -2, 2);
    Centers centers(d, 0.5);
    centers.values = detail::random_matrix(rng, 2, d, -1, 1);
    const auto labels = detail::random_labels(rng, n);
    const auto analytic = center_loss(feat, labels, centers).grad_features.data;
    const auto numeric = numeric_gradient([&] { return center_loss(feat, labels, centers).loss; }, {&feat.data});
    return gradient_error(analytic, numeric);
  });
}

inline GradCheckResult check_multitask_loss(int cases = 20, std::uint64_t seed = 4) {
  return detail::run_cases("multitask_loss", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const std::size_t n = 2 + rng() % 15, d = 1 + rng() % 12;
    Matrix logits = detail::random_matrix(rng, n, 2, -3, 3);
    Matrix deltas = detail::random_matrix(rng, n, 4, -2, 2);
    const Matrix targets = detail::random_matrix(rng, n, 4, -2, 2);
    std::vector<double> diff(deltas.data.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = deltas.data[i] - targets.data[i];
    detail::avoid_abs(diff, 1.0, 1e-3);
    for (std::size_t i = 0; i < diff.size(); ++i) deltas.data[i] = targets.data[i] + diff[i];
    Matrix feat = detail::random_matrix(rng, n, d, -2, 2);
    Centers centers(d, 0.5);
    centers.values = detail::random_matrix(rng, 2, d, -1, 1);
    const auto labels = detail::random_labels(rng, n);
    std::vector<int> mask(n);
    for (std::size_t i = 0; i < n; ++i) mask[i] = labels[i];
    LossWeights w{std::uniform_real_distribution<double>(0.5, 2)(rng), std::uniform_real_distribution<double>(0.01, 1)(rng)};
    const auto rep = multitask_loss(logits, labels, deltas, targets, mask, feat, centers, w);
    const auto analytic = detail::concat({&rep.grad_logits.data, &rep.grad_deltas.data, &rep.grad_features.data});
    const auto numeric = numeric_gradient(
        [&] { return multitask_loss(logits, labels, deltas, targets, mask, feat, centers, w).total; },
        {&logits.data, &deltas.data, &feat.data});
    return gradient_error(analytic, numeric);
  });
}

inline GradCheckResult check_conv(int cases = 20, std::uint64_t seed = 5) {
  return detail::run_cases("conv2d", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const int c = 1 + static_cast<int>(rng() % 3), o = 1 + static_cast<int>(rng() % 3);
    const int k = (rng() % 2) ? 3 : 1, h = 3 + static_cast<int>(rng() % 5), w = 3 + static_cast<int>(rng() % 5);
    Tensor in = detail::random_tensor(rng, {c, h, w});
    Tensor wt = detail::random_tensor(rng, {o, c, k, k});
    Tensor b = detail::random_tensor(rng, {o});
    const auto r = detail::uniform_vec(rng, static_cast<std::size_t>(o) * h * w, -1, 1);
    wt.enable_grad();
    b.enable_grad();
    Tensor go({o, h, w});
    go.data = r;
    const Tensor gin = conv2d_backward(in, wt, b, go, true);
    const auto analytic = detail::concat({&gin.data, &wt.grad, &b.grad});
    const auto numeric = numeric_gradient([&] { return detail::dot(conv2d_forward(in, wt, b).data, r); },
                                          {&in.data, &wt.data, &b.data});
    return gradient_error(analytic, numeric);
  });
}

inline GradCheckResult check_relu(int cases = 20, std::uint64_t seed = 6) {
  return detail::run_cases("relu", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const std::size_t n = 4 + rng() % 60;
    Tensor x = detail::random_tensor(rng, {static_cast<int>(n)});
    detail::avoid_abs(x.data, 0.0, 1e-3);
    const auto r = detail::uniform_vec(rng, n, -1, 1);
    Tensor y = x;
    relu_inplace(y);
    std::vector<double> g = r;
    relu_backward_inplace(g, y.data);
    const auto numeric = numeric_gradient(
        [&] {
          Tensor t = x;
          relu_inplace(t);
          return detail::dot(t.data, r);
        },
        {&x.data});
    return gradient_error(g, numeric);
  });
}

inline GradCheckResult check_maxpool(int cases = 20, std::uint64_t seed = 7) {
  return detail::run_cases("maxpool2", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const int c = 1 + static_cast<int>(rng() % 3), h = 2 * (1 + static_cast<int>(rng() % 4)),
              w = 2 * (1 + static_cast<int>(rng() % 4));
    Tensor x = detail::random_tensor(rng, {c, h, w});
    const auto pr = maxpool2_forward(x);
    Tensor go(pr.out.shape);
    go.data = detail::uniform_vec(rng, go.size(), -1, 1);
    const Tensor gin = maxpool2_backward(x.shape, pr.argmax, go);
    const auto numeric =
        numeric_gradient([&] { return detail::dot(maxpool2_forward(x).out.data, go.data); }, {&x.data});
    return gradient_error(gin.data, numeric);
  });
}

inline GradCheckResult check_linear(int cases = 20, std::uint64_t seed = 8) {
  return detail::run_cases("linear", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const std::size_t n = 1 + rng() % 6, in = 1 + rng() % 10, out = 1 + rng() % 10;
    Matrix x = detail::random_matrix(rng, n, in);
    Tensor wt = detail::random_tensor(rng, {static_cast<int>(in), static_cast<int>(out)});
    Tensor b = detail::random_tensor(rng, {static_cast<int>(out)});
    const Matrix gy = detail::random_matrix(rng, n, out);
    const Matrix gx = linear_backward(x, wt, b, gy, true);
    const auto analytic = detail::concat({&gx.data, &wt.grad, &b.grad});
    const auto numeric = numeric_gradient([&] { return detail::dot(linear_forward(x, wt, b).data, gy.data); },
                                          {&x.data, &wt.data, &b.data});
    return gradient_error(analytic, numeric);
  });
}

inline GradCheckResult check_roi_pool(int cases = 20, std::uint64_t seed = 9) {
  return detail::run_cases("roi_pool", cases, seed, kLossGradTolerance, [](detail::Rng& rng, GradCheckResult&) {
    const int c = 1 + static_cast<int>(rng() % 3), h = 4 + static_cast<int>(rng() % 8),
              w = 4 + static_cast<int>(rng() % 8);
    const int p = 1 + static_cast<int>(rng() % 4);
    Tensor fmap = detail::random_tensor(rng, {c, h, w});
    std::uniform_real_distribution<double> ux(0, w), uy(0, h);
    double xa = ux(rng), xb = ux(rng), ya = uy(rng), yb = uy(rng);
    if (xa > xb) std::swap(xa, xb);
    if (ya > yb) std::swap(ya, yb);
    const Box box{xa, ya, std::max(xb, xa + 0.5), std::max(yb, ya + 0.5)};
    const auto pr = roi_pool_forward(fmap, box, p);
    const auto r = detail::uniform_vec(rng, pr.values.size(), -1, 1);
    std::vector<double> g(fmap.size(), 0.0);
    roi_pool_backward(pr.argmax, r, g);
    const auto numeric =
        numeric_gradient([&] { return detail::dot(roi_pool_forward(fmap, box, p).values, r); }, {&fmap.data});
    return gradient_error(g, numeric);
  });
}

namespace detail {

// ReLU masks and max-pool/RoI-pool argmaxes of a forward pass.
inline std::vector<std::uint32_t> branch_signature(const DetectorModel& m, const Tensor& image,
                                                   const std::vector<Box>& rois) {
  const TrunkCache c = forward_trunk(m, image);
  std::vector<std::uint32_t> s;
  for (const Tensor* t : {&c.act1, &c.act2, &c.rpn_act})
    for (double v : t->data) s.push_back(v > 0);
  s.insert(s.end(), c.pool1.argmax.begin(), c.pool1.argmax.end());
  s.insert(s.end(), c.pool2.argmax.begin(), c.pool2.argmax.end());
  if (!rois.empty()) {
    const HeadCache h = forward_head(m, c.feature_map(), rois);
    for (const auto& a : h.argmax) s.insert(s.end(), a.begin(), a.end());
    for (const Matrix* t : {&h.hidden, &h.features})
      for (double v : t->data) s.push_back(v > 0);
  }
  return s;
}

}  // namespace detail

/// Small network used by the full-graph check.
inline Config gradcheck_network_config() {
  Config cfg;
  cfg.model.conv1_channels = 3;
  cfg.model.conv2_channels = 4;
  cfg.model.rpn_channels = 5;
  cfg.model.hidden = 8;
  cfg.model.feature_dim = 6;
  cfg.model.roi_size = 2;
  cfg.rpn_batch = 16;
  cfg.head_batch = 8;
  cfg.scene.image_w = 24;
  cfg.scene.image_h = 24;
  cfg.scene.faces_min = 1;
  cfg.scene.faces_max = 2;
  cfg.scene.face_size_min = 8;
  cfg.scene.face_size_max = 14;
  cfg.scene.distractors_min = 0;
  cfg.scene.distractors_max = 1;
  return cfg;
}

/// Full-graph check: one synthetic scene and a freshly initialized network
/// per case, targets fixed after labeling, 50 probed parameters.
inline GradCheckResult check_network(int cases = 20, std::uint64_t seed = 10, int probes = 50) {
  return detail::run_cases("network", cases, seed, kNetworkGradTolerance, [probes](detail::Rng& rng, GradCheckResult& res) {
    Config cfg = gradcheck_network_config();
    cfg.scene.seed = rng();
    cfg.weights = {std::uniform_real_distribution<double>(0.5, 2)(rng), std::uniform_real_distribution<double>(0.01, 1)(rng)};
    const Scene scene = generate_scene(cfg.scene, 0);
    DetectorModel m = DetectorModel::init(cfg.model, rng());
    Centers centers(static_cast<std::size_t>(cfg.model.feature_dim), cfg.center_alpha);
    centers.values = detail::random_matrix(rng, 2, centers.feature_dim(), 0, 1);
    const ImageTargets t = build_targets(m, scene.image, scene.gts, cfg, rng);

    m.zero_grad();
    evaluate_loss(m, t.cache, t.rpn, t.head, centers, cfg.weights, true);
    const auto loss = [&] {
      return evaluate_loss(m, forward_trunk(m, scene.image), t.rpn, t.head, centers, cfg.weights, false).total;
    };

    auto params = m.named_params();
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::size_t i = 0; i < params[p].second->size(); ++i) all.emplace_back(p, i);
    std::shuffle(all.begin(), all.end(), rng);

    std::vector<double> analytic, numeric;
    const double h = kFiniteDifferenceStep;
    for (std::size_t k = 0; k < all.size() && static_cast<int>(analytic.size()) < probes; ++k) {
      Tensor& tensor = *params[all[k].first].second;
      double& v = tensor.data[all[k].second];
      const double v0 = v;
      v = v0 + h;
      const auto sp = detail::branch_signature(m, scene.image, t.head.rois);
      const double fp = loss();
      v = v0 - h;
      const auto sm = detail::branch_signature(m, scene.image, t.head.rois);
      const double fm = loss();
      v = v0;
      if (sp != sm) {
        ++res.skipped_probes;
        continue;
      }
      analytic.push_back(tensor.grad[all[k].second]);
      numeric.push_back((fp - fm) / (2 * h));
    }
    return gradient_error(analytic, numeric);
  });
}

inline std::vector<GradCheckResult> run_all_gradchecks(int cases = 20) {
  return {check_softmax_ce(cases), check_smooth_l1(cases), check_center_loss(cases), check_multitask_loss(cases),
          check_conv(cases),       check_relu(cases),      check_maxpool(cases),     check_linear(cases),
          check_roi_pool(cases),   check_network(cases)};
}

}  // namespace facercnn
