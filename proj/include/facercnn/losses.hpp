#pragma once

// Training objectives for the two detector heads.
//
// The refinement head is supervised by softmax cross-entropy, SmoothL1 on box
// deltas and the center loss on its penultimate features:
//
//   total = cls + lambda * reg + mu * center
//
// Cross-entropy is averaged over the batch, SmoothL1 is normalized by the
// number of positives and the center loss is a plain sum over the batch.
// mu absorbs the difference in scale.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace facercnn {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

/// Per-class feature centroids. Row 0 is non-face, row 1 is face.
struct Centers {
  Matrix values;
  double alpha = 0.5;

  Centers() = default;
  Centers(std::size_t feature_dim, double alpha_) : values(2, feature_dim), alpha(alpha_) {}
  std::size_t feature_dim() const { return values.cols; }
};

struct LossWeights {
  double lambda = 1.0;
  double mu = 0.01;
};

struct LossReport {
  double cls = 0, reg = 0, center = 0, total = 0;
  std::vector<double> per_sample_cls;
  std::vector<double> per_sample_reg;
  Matrix grad_logits, grad_deltas, grad_features;
};

namespace detail {
inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}
}  // namespace detail

struct SoftmaxResult {
  double loss = 0;
  std::vector<double> per_sample;
  Matrix grad_logits;
};

/// Two-class softmax cross-entropy, mean over rows.
inline SoftmaxResult softmax_ce(const Matrix& logits, std::span<const int> labels) {
  if (logits.cols != 2) throw std::invalid_argument("softmax_ce: logits must have 2 columns");
  if (logits.rows < 1) throw std::invalid_argument("softmax_ce: empty batch");
  if (labels.size() != logits.rows) throw std::invalid_argument("softmax_ce: label count mismatch");
  detail::require_finite(logits.data, "softmax_ce");
  const std::size_t m = logits.rows;
  SoftmaxResult out;
  out.per_sample.resize(m);
  out.grad_logits = Matrix(m, 2);
  double sum = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = labels[i];
    if (y != 0 && y != 1) throw std::invalid_argument("softmax_ce: labels must be 0 or 1");
    const double a = logits(i, 0), b = logits(i, 1);
    const double mx = std::max(a, b);
    const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    const double l = lse - logits(i, static_cast<std::size_t>(y));
    out.per_sample[i] = l;
    sum += l;
    const double p0 = std::exp(a - lse), p1 = std::exp(b - lse);
    out.grad_logits(i, 0) = (p0 - (y == 0 ? 1.0 : 0.0)) / static_cast<double>(m);
    out.grad_logits(i, 1) = (p1 - (y == 1 ? 1.0 : 0.0)) / static_cast<double>(m);
  }
  out.loss = sum / static_cast<double>(m);
  return out;
}

/// Probability of class 1 for a two-class logit row.
inline double face_probability(double logit_bg, double logit_fg) {
  const double d = logit_bg - logit_fg;
  if (d >= 0) {
    const double e = std::exp(-d);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(d));
}

struct CenterLossResult {
  double loss = 0;
  Matrix grad_features;
};

namespace detail {
inline void check_center_inputs(const Matrix& features, std::span<const int> labels, const Centers& centers) {
  if (features.cols != centers.feature_dim())
    throw std::invalid_argument("center loss: feature dimension does not match centers");
  if (labels.size() != features.rows) throw std::invalid_argument("center loss: label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= centers.values.rows)
      throw std::invalid_argument("center loss: label has no center");
}
}  // namespace detail

/// 0.5 * sum_i ||x_i - c_{y_i}||^2. Centers are constants for the gradient.
inline CenterLossResult center_loss(const Matrix& features, std::span<const int> labels, const Centers& centers) {
  detail::check_center_inputs(features, labels, centers);
  CenterLossResult out;
  out.grad_features = Matrix(features.rows, features.cols);
  double sum = 0;
  for (std::size_t i = 0; i < features.rows; ++i) {
    const auto c = centers.values.row(static_cast<std::size_t>(labels[i]));
    for (std::size_t k = 0; k < features.cols; ++k) {
      const double diff = features(i, k) - c[k];
      out.grad_features(i, k) = diff;
      sum += diff * diff;
    }
  }
  out.loss = 0.5 * sum;
  return out;
}

/// Mini-batch center update: c_j -= alpha * sum_{y_i = j}(c_j - x_i) / (1 + n_j).
/// Classes absent from the batch are left untouched.
inline Centers update_centers(const Centers& centers, const Matrix& features, std::span<const int> labels) {
  detail::check_center_inputs(features, labels, centers);
  Centers out = centers;
  const std::size_t d = centers.feature_dim();
  for (std::size_t j = 0; j < centers.values.rows; ++j) {
    std::vector<double> delta(d, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < features.rows; ++i) {
      if (static_cast<std::size_t>(labels[i]) != j) continue;
      ++n;
      for (std::size_t k = 0; k < d; ++k) delta[k] += centers.values(j, k) - features(i, k);
    }
    if (n == 0) continue;
    const double denom = 1.0 + static_cast<double>(n);
    for (std::size_t k = 0; k < d; ++k) out.values(j, k) -= centers.alpha * delta[k] / denom;
  }
  return out;
}

struct SmoothL1Result {
  double loss = 0;
  std::vector<double> per_sample;
  Matrix grad;
};

/// SmoothL1 over masked rows, normalized by max(1, number of masked rows).
inline SmoothL1Result smooth_l1(const Matrix& pred, const Matrix& target, std::span<const int> mask) {
  if (pred.rows != target.rows || pred.cols != target.cols)
    throw std::invalid_argument("smooth_l1: prediction/target shape mismatch");
  if (mask.size() != pred.rows) throw std::invalid_argument("smooth_l1: mask length mismatch");
  detail::require_finite(pred.data, "smooth_l1");
  detail::require_finite(target.data, "smooth_l1");
  std::size_t npos = 0;
  for (int v : mask) npos += v != 0 ? 1 : 0;
  const double norm = static_cast<double>(std::max<std::size_t>(1, npos));
  SmoothL1Result out;
  out.per_sample.assign(pred.rows, 0.0);
  out.grad = Matrix(pred.rows, pred.cols);
  double sum = 0;
  for (std::size_t i = 0; i < pred.rows; ++i) {
    if (mask[i] == 0) continue;
    double row_sum = 0;
    for (std::size_t k = 0; k < pred.cols; ++k) {
      const double x = pred(i, k) - target(i, k);
      const double ax = std::abs(x);
      if (ax < 1.0) {
        row_sum += 0.5 * x * x;
        out.grad(i, k) = x / norm;
      } else {
        row_sum += ax - 0.5;
        out.grad(i, k) = (x > 0 ? 1.0 : -1.0) / norm;
      }
    }
    out.per_sample[i] = row_sum;
    sum += row_sum;
  }
  out.loss = sum / norm;
  return out;
}

/// Composite refinement-head objective. grad_features carries only the
/// center-loss path (scaled by mu); the cross-entropy path reaches the
/// features through the classifier weights in the network backward pass.
inline LossReport multitask_loss(const Matrix& logits, std::span<const int> labels, const Matrix& pred_deltas,
                                 const Matrix& target_deltas, std::span<const int> pos_mask,
                                 const Matrix& features, const Centers& centers, const LossWeights& w) {
  if (!(w.lambda >= 0) || !(w.mu >= 0) || !std::isfinite(w.lambda) || !std::isfinite(w.mu))
    throw std::invalid_argument("multitask_loss: weights must be finite and non-negative");
  const std::size_t m = logits.rows;
  if (labels.size() != m || pred_deltas.rows != m || target_deltas.rows != m || pos_mask.size() != m ||
      features.rows != m)
    throw std::invalid_argument("multitask_loss: inconsistent batch dimension");
  auto ce = softmax_ce(logits, labels);
  auto l1 = smooth_l1(pred_deltas, target_deltas, pos_mask);
  auto cl = center_loss(features, labels, centers);

  LossReport r;
  r.cls = ce.loss;
  r.reg = l1.loss;
  r.center = cl.loss;
  r.total = r.cls + w.lambda * r.reg + w.mu * r.center;
  r.per_sample_cls = std::move(ce.per_sample);
  r.per_sample_reg = std::move(l1.per_sample);
  r.grad_logits = std::move(ce.grad_logits);
  r.grad_deltas = std::move(l1.grad);
  for (double& g : r.grad_deltas.data) g *= w.lambda;
  r.grad_features = std::move(cl.grad_features);
  for (double& g : r.grad_features.data) g *= w.mu;
  return r;
}

}  // namespace facercnn
