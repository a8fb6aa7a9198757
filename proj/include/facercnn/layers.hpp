#pragma once

// Forward and backward passes for the handful of layer types the detector
// uses. Activations are plain tensors; parameter gradients accumulate into
// the parameter's grad buffer, input gradients are returned in a tensor of
// the input's shape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "facercnn/geometry.hpp"
#include "facercnn/losses.hpp"
#include "facercnn/tensor.hpp"

namespace facercnn {

// ---------------------------------------------------------------------------
// Convolution: square odd kernel, stride 1, zero padding k/2.
// weight {O, C, k, k}, bias {O}, input {C, H, W}, output {O, H, W}.

namespace detail {
struct ConvGeom {
  int out_ch, in_ch, k, pad, h, w;
};

inline ConvGeom conv_geom(const Tensor& in, const Tensor& weight, const Tensor& bias) {
  if (in.shape.size() != 3 || weight.shape.size() != 4 || bias.shape.size() != 1)
    throw std::invalid_argument("conv2d: bad tensor ranks");
  const int k = weight.dim(2);
  if (weight.dim(3) != k || k % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square and odd");
  if (weight.dim(1) != in.channels())
    throw std::invalid_argument("conv2d: input has " + std::to_string(in.channels()) + " channels, weight expects " +
                                std::to_string(weight.dim(1)));
  if (bias.dim(0) != weight.dim(0)) throw std::invalid_argument("conv2d: bias length mismatch");
  return {weight.dim(0), weight.dim(1), k, k / 2, in.height(), in.width()};
}
}  // namespace detail

inline Tensor conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias) {
  const auto g = detail::conv_geom(in, weight, bias);
  Tensor out({g.out_ch, g.h, g.w});
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  for (int o = 0; o < g.out_ch; ++o) {
    double* op = out.data.data() + o * plane;
    std::fill(op, op + plane, bias.data[o]);
    for (int c = 0; c < g.in_ch; ++c) {
      const double* ip = in.data.data() + c * plane;
      for (int ky = 0; ky < g.k; ++ky) {
        const int dy = ky - g.pad;
        const int y0 = std::max(0, -dy), y1 = std::min(g.h, g.h - dy);
        for (int kx = 0; kx < g.k; ++kx) {
          const int dx = kx - g.pad;
          const int x0 = std::max(0, -dx), x1 = std::min(g.w, g.w - dx);
          const double wv = weight.data[((static_cast<std::size_t>(o) * g.in_ch + c) * g.k + ky) * g.k + kx];
          for (int y = y0; y < y1; ++y) {
            double* orow = op + static_cast<std::size_t>(y) * g.w;
            const double* irow = ip + static_cast<std::size_t>(y + dy) * g.w + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }
  return out;
}

/// Accumulates weight/bias gradients; returns the input gradient when
/// `want_input_grad` is set (otherwise an empty tensor).
inline Tensor conv2d_backward(const Tensor& in, Tensor& weight, Tensor& bias, const Tensor& grad_out,
                              bool want_input_grad) {
  const auto g = detail::conv_geom(in, weight, bias);
  if (grad_out.shape != std::vector<int>{g.out_ch, g.h, g.w})
    throw std::invalid_argument("conv2d_backward: grad shape mismatch");
  if (weight.grad.size() != weight.size()) weight.enable_grad();
  if (bias.grad.size() != bias.size()) bias.enable_grad();
  Tensor gin;
  if (want_input_grad) gin = Tensor(in.shape);
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  for (int o = 0; o < g.out_ch; ++o) {
    const double* gp = grad_out.data.data() + o * plane;
    double bsum = 0;
    for (std::size_t i = 0; i < plane; ++i) bsum += gp[i];
    bias.grad[o] += bsum;
    for (int c = 0; c < g.in_ch; ++c) {
      const double* ip = in.data.data() + c * plane;
      double* gip = want_input_grad ? gin.data.data() + c * plane : nullptr;
      for (int ky = 0; ky < g.k; ++ky) {
        const int dy = ky - g.pad;
        const int y0 = std::max(0, -dy), y1 = std::min(g.h, g.h - dy);
        for (int kx = 0; kx < g.k; ++kx) {
          const int dx = kx - g.pad;
          const int x0 = std::max(0, -dx), x1 = std::min(g.w, g.w - dx);
          const std::size_t widx = ((static_cast<std::size_t>(o) * g.in_ch + c) * g.k + ky) * g.k + kx;
          const double wv = weight.data[widx];
          double acc = 0;
          for (int y = y0; y < y1; ++y) {
            const double* grow = gp + static_cast<std::size_t>(y) * g.w;
            const double* irow = ip + static_cast<std::size_t>(y + dy) * g.w + dx;
            for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            if (gip) {
              double* girow = gip + static_cast<std::size_t>(y + dy) * g.w + dx;
              for (int x = x0; x < x1; ++x) girow[x] += wv * grow[x];
            }
          }
          weight.grad[widx] += acc;
        }
      }
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// ReLU

inline void relu_inplace(Tensor& t) {
  for (double& v : t.data) v = v > 0 ? v : 0.0;
}

inline void relu_inplace(Matrix& m) {
  for (double& v : m.data) v = v > 0 ? v : 0.0;
}

/// Zeroes the gradient where the forward output was not positive.
inline void relu_backward_inplace(std::vector<double>& grad, const std::vector<double>& output) {
  if (grad.size() != output.size()) throw std::invalid_argument("relu_backward: size mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(output[i] > 0)) grad[i] = 0.0;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Ties go to the first element in row-major order.

struct PoolResult {
  Tensor out;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
};

inline PoolResult maxpool2_forward(const Tensor& in) {
  if (in.shape.size() != 3) throw std::invalid_argument("maxpool: expected {C,H,W}");
  const int c = in.channels(), h = in.height(), w = in.width();
  if (h % 2 || w % 2) throw std::invalid_argument("maxpool: spatial dims must be even, got " + shape_string(in.shape));
  const int oh = h / 2, ow = w / 2;
  PoolResult r{Tensor({c, oh, ow}), {}};
  r.argmax.resize(r.out.size());
  std::size_t oi = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x, ++oi) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * x;
        double bv = in.data[best];
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t ci : cand) {
          if (in.data[ci] > bv) {
            bv = in.data[ci];
            best = ci;
          }
        }
        r.out.data[oi] = bv;
        r.argmax[oi] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

inline Tensor maxpool2_backward(const std::vector<int>& in_shape, const std::vector<std::uint32_t>& argmax,
                                const Tensor& grad_out) {
  Tensor gin(in_shape);
  if (argmax.size() != grad_out.size()) throw std::invalid_argument("maxpool_backward: size mismatch");
  for (std::size_t i = 0; i < argmax.size(); ++i) gin.data[argmax[i]] += grad_out.data[i];
  return gin;
}

// ---------------------------------------------------------------------------
// Fully connected: rows of `x` are samples. weight {in, out}, bias {out}.

inline Matrix linear_forward(const Matrix& x, const Tensor& weight, const Tensor& bias) {
  if (weight.shape.size() != 2 || static_cast<std::size_t>(weight.dim(0)) != x.cols)
    throw std::invalid_argument("linear: input width " + std::to_string(x.cols) + " does not match weight " +
                                shape_string(weight.shape));
  const std::size_t nin = x.cols, nout = static_cast<std::size_t>(weight.dim(1));
  Matrix y(x.rows, nout);
  for (std::size_t n = 0; n < x.rows; ++n) {
    double* yr = y.data.data() + n * nout;
    std::copy(bias.data.begin(), bias.data.end(), yr);
    const double* xr = x.data.data() + n * nin;
    for (std::size_t i = 0; i < nin; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      const double* wr = weight.data.data() + i * nout;
      for (std::size_t o = 0; o < nout; ++o) yr[o] += xv * wr[o];
    }
  }
  return y;
}

/// Accumulates parameter gradients and returns the gradient w.r.t. x
/// (empty matrix when not requested).
inline Matrix linear_backward(const Matrix& x, Tensor& weight, Tensor& bias, const Matrix& grad_y,
                              bool want_input_grad) {
  const std::size_t nin = x.cols, nout = static_cast<std::size_t>(weight.dim(1));
  if (grad_y.rows != x.rows || grad_y.cols != nout) throw std::invalid_argument("linear_backward: shape mismatch");
  if (weight.grad.size() != weight.size()) weight.enable_grad();
  if (bias.grad.size() != bias.size()) bias.enable_grad();
  Matrix gx;
  if (want_input_grad) gx = Matrix(x.rows, nin);
  for (std::size_t n = 0; n < x.rows; ++n) {
    const double* gr = grad_y.data.data() + n * nout;
    for (std::size_t o = 0; o < nout; ++o) bias.grad[o] += gr[o];
    const double* xr = x.data.data() + n * nin;
    for (std::size_t i = 0; i < nin; ++i) {
      const double* wr = weight.data.data() + i * nout;
      double* gwr = weight.grad.data() + i * nout;
      const double xv = xr[i];
      double acc = 0;
      for (std::size_t o = 0; o < nout; ++o) {
        gwr[o] += xv * gr[o];
        acc += wr[o] * gr[o];
      }
      if (want_input_grad) gx(n, i) = acc;
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// RoI max pooling. The box is given in feature-map coordinates (image
// coordinates times the spatial scale) and clipped to the map extent. Bin
// (py, px) covers [y1 + py*bh, y1 + (py+1)*bh) and pools every feature cell
// [c, c+1) it touches. Ties go to the first cell in row-major order.

struct RoiPoolResult {
  std::vector<double> values;          // {C, P, P} flattened
  std::vector<std::uint32_t> argmax;  // flat feature-map index per value
};

inline RoiPoolResult roi_pool_forward(const Tensor& fmap, const Box& feature_box, int output_size) {
  if (fmap.shape.size() != 3) throw std::invalid_argument("roi_pool: expected {C,H,W} feature map");
  if (output_size < 1) throw std::invalid_argument("roi_pool: output size must be >= 1");
  const int c = fmap.channels(), h = fmap.height(), w = fmap.width();
  const Box b = clip_box(feature_box, w, h);
  if (!(b.width() > 0 && b.height() > 0)) throw std::invalid_argument("roi_pool: box has zero area on the feature map");
  const double bw = b.width() / output_size, bh = b.height() / output_size;

  std::vector<int> ys0(output_size), ys1(output_size), xs0(output_size), xs1(output_size);
  for (int p = 0; p < output_size; ++p) {
    const double ya = b.y1 + p * bh, yb = b.y1 + (p + 1) * bh;
    const double xa = b.x1 + p * bw, xb = b.x1 + (p + 1) * bw;
    ys0[p] = std::clamp(static_cast<int>(std::floor(ya)), 0, h - 1);
    ys1[p] = std::clamp(static_cast<int>(std::ceil(yb)), ys0[p] + 1, h);
    xs0[p] = std::clamp(static_cast<int>(std::floor(xa)), 0, w - 1);
    xs1[p] = std::clamp(static_cast<int>(std::ceil(xb)), xs0[p] + 1, w);
  }

  RoiPoolResult r;
  const std::size_t n = static_cast<std::size_t>(c) * output_size * output_size;
  r.values.resize(n);
  r.argmax.resize(n);
  std::size_t oi = 0;
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t base = static_cast<std::size_t>(ch) * h * w;
    for (int py = 0; py < output_size; ++py) {
      for (int px = 0; px < output_size; ++px, ++oi) {
        double bv = -std::numeric_limits<double>::infinity();
        std::size_t bi = 0;
        for (int y = ys0[py]; y < ys1[py]; ++y) {
          for (int x = xs0[px]; x < xs1[px]; ++x) {
            const std::size_t idx = base + static_cast<std::size_t>(y) * w + x;
            if (fmap.data[idx] > bv) {
              bv = fmap.data[idx];
              bi = idx;
            }
          }
        }
        r.values[oi] = bv;
        r.argmax[oi] = static_cast<std::uint32_t>(bi);
      }
    }
  }
  return r;
}

/// Routes the pooled gradient back to the argmax cells of `grad_fmap`.
inline void roi_pool_backward(const std::vector<std::uint32_t>& argmax, std::span<const double> grad_values,
                              std::vector<double>& grad_fmap) {
  if (argmax.size() != grad_values.size()) throw std::invalid_argument("roi_pool_backward: size mismatch");
  for (std::size_t i = 0; i < argmax.size(); ++i) grad_fmap[argmax[i]] += grad_values[i];
}

}  // namespace facercnn
