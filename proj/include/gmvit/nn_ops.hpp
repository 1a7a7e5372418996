#pragma once

#include <cmath>
#include <limits>
#include <random>

#include "gmvit/tensor.hpp"

namespace gmvit {

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

/// Per-row normalization to zero mean / unit variance followed by the
/// affine map gain * xhat + bias. Epsilon 1e-5 inside the square root.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  detail::require(x.rank() == 2, "layer_norm: input must be rank 2");
  const std::int64_t r = x.rows(), d = x.cols();
  detail::require(gain.numel() == d && bias.numel() == d,
                  "layer_norm: gain/bias length must equal " + detail::str(d));
  const T eps = T(1e-5);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(r * d));
  std::vector<T> inv_std(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    const T* row = x.data().data() + i * d;
    T mean = T(0);
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::int64_t j = 0; j < d; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * is;
      xhat[static_cast<std::size_t>(i * d + j)] = h;
      out.data()[i * d + j] = gain.data()[j] * h + bias.data()[j];
    }
  }
  if (detail::tracking<T>({&x, &gain, &bias})) {
    detail::enable_out_grad(out);
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    Tape<T>::current()->push([xn, gn, bn, on, xhat = std::move(xhat), inv_std = std::move(inv_std), r, d] {
      for (std::int64_t i = 0; i < r; ++i) {
        const T* g = on->grad.data() + i * d;
        const T* h = xhat.data() + i * d;
        if (gn->requires_grad)
          for (std::int64_t j = 0; j < d; ++j) gn->grad[j] += g[j] * h[j];
        if (bn->requires_grad)
          for (std::int64_t j = 0; j < d; ++j) bn->grad[j] += g[j];
        if (xn->requires_grad) {
          T sum_gh = T(0), sum_ghh = T(0);
          for (std::int64_t j = 0; j < d; ++j) {
            const T gg = g[j] * gn->value[j];
            sum_gh += gg;
            sum_ghh += gg * h[j];
          }
          const T invd = T(1) / static_cast<T>(d);
          const T is = inv_std[static_cast<std::size_t>(i)];
          for (std::int64_t j = 0; j < d; ++j) {
            const T gg = g[j] * gn->value[j];
            xn->grad[i * d + j] += is * (gg - sum_gh * invd - h[j] * sum_ghh * invd);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch norm (1d over [b x c], 2d over [b x c x h x w])
// ---------------------------------------------------------------------------

enum class Mode { kTrain, kEval };

namespace detail {

// Shared by the 1d and 2d variants: channels live on axis 1, statistics
// reduce over all remaining axes. spatial == 1 for the 1d case.
template <typename T>
Tensor<T> batch_norm_impl(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, T momentum,
                          std::int64_t b, std::int64_t c, std::int64_t spatial) {
  require(gamma.numel() == c && beta.numel() == c && running_mean.numel() == c &&
              running_var.numel() == c,
          "batch_norm: parameter length must equal channel count " + str(c));
  const T eps = T(1e-5);
  const std::int64_t count = b * spatial;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> mean_c(static_cast<std::size_t>(c)), inv_std_c(static_cast<std::size_t>(c));

  if (mode == Mode::kTrain) {
    require(b >= 2, "batch_norm: train mode requires batch size >= 2, got " + str(b));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T mean = T(0);
      for (std::int64_t i = 0; i < b; ++i) {
        const T* p = x.data().data() + (i * c + ch) * spatial;
        for (std::int64_t s = 0; s < spatial; ++s) mean += p[s];
      }
      mean /= static_cast<T>(count);
      T var = T(0);
      for (std::int64_t i = 0; i < b; ++i) {
        const T* p = x.data().data() + (i * c + ch) * spatial;
        for (std::int64_t s = 0; s < spatial; ++s) {
          const T d = p[s] - mean;
          var += d * d;
        }
      }
      var /= static_cast<T>(count);
      mean_c[static_cast<std::size_t>(ch)] = mean;
      inv_std_c[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(var + eps);
      // Running stats: biased variance normalizes the batch, the unbiased
      // estimate feeds the running average.
      const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
      running_mean.data()[ch] = (T(1) - momentum) * running_mean.data()[ch] + momentum * mean;
      running_var.data()[ch] = (T(1) - momentum) * running_var.data()[ch] + momentum * unbiased;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean_c[static_cast<std::size_t>(ch)] = running_mean.data()[ch];
      inv_std_c[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(running_var.data()[ch] + eps);
    }
  }

  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T m = mean_c[static_cast<std::size_t>(ch)];
      const T is = inv_std_c[static_cast<std::size_t>(ch)];
      const T gm = gamma.data()[ch], bt = beta.data()[ch];
      const T* p = x.data().data() + (i * c + ch) * spatial;
      T* q = out.data().data() + (i * c + ch) * spatial;
      for (std::int64_t s = 0; s < spatial; ++s) q[s] = gm * (p[s] - m) * is + bt;
    }

  if (tracking<T>({&x, &gamma, &beta})) {
    enable_out_grad(out);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    const bool train = mode == Mode::kTrain;
    Tape<T>::current()->push([xn, gn, bn, on, mean_c = std::move(mean_c),
                              inv_std_c = std::move(inv_std_c), b, c, spatial, train] {
      const std::int64_t count = b * spatial;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T m = mean_c[static_cast<std::size_t>(ch)];
        const T is = inv_std_c[static_cast<std::size_t>(ch)];
        T sum_g = T(0), sum_gx = T(0);
        for (std::int64_t i = 0; i < b; ++i) {
          const T* g = on->grad.data() + (i * c + ch) * spatial;
          const T* xv = xn->value.data() + (i * c + ch) * spatial;
          for (std::int64_t s = 0; s < spatial; ++s) {
            sum_g += g[s];
            sum_gx += g[s] * (xv[s] - m) * is;
          }
        }
        if (gn->requires_grad) gn->grad[ch] += sum_gx;
        if (bn->requires_grad) bn->grad[ch] += sum_g;
        if (xn->requires_grad) {
          const T gm = gn->value[ch];
          if (train) {
            const T invn = T(1) / static_cast<T>(count);
            for (std::int64_t i = 0; i < b; ++i) {
              const T* g = on->grad.data() + (i * c + ch) * spatial;
              const T* xv = xn->value.data() + (i * c + ch) * spatial;
              T* dx = xn->grad.data() + (i * c + ch) * spatial;
              for (std::int64_t s = 0; s < spatial; ++s) {
                const T xhat = (xv[s] - m) * is;
                dx[s] += gm * is * (g[s] - sum_g * invn - xhat * sum_gx * invn);
              }
            }
          } else {
            for (std::int64_t i = 0; i < b; ++i) {
              const T* g = on->grad.data() + (i * c + ch) * spatial;
              T* dx = xn->grad.data() + (i * c + ch) * spatial;
              for (std::int64_t s = 0; s < spatial; ++s) dx[s] += gm * is * g[s];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> batch_norm1d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                       T momentum = T(0.1)) {
  detail::require(x.rank() == 2, "batch_norm1d: input must be rank 2");
  return detail::batch_norm_impl(x, gamma, beta, running_mean, running_var, mode, momentum,
                                 x.dim(0), x.dim(1), 1);
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                       T momentum = T(0.1)) {
  detail::require(x.rank() == 4, "batch_norm2d: input must be rank 4");
  return detail::batch_norm_impl(x, gamma, beta, running_mean, running_var, mode, momentum,
                                 x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation semantics) via im2col + GEMM
// ---------------------------------------------------------------------------

namespace detail {

// Valid output range [lo, hi) for which k + o*stride - pad lands inside
// [0, extent).
inline std::pair<std::int64_t, std::int64_t> conv_valid_range(std::int64_t k, std::int64_t stride,
                                                              std::int64_t pad, std::int64_t extent,
                                                              std::int64_t out_extent) {
  const std::int64_t lo = pad > k ? (pad - k + stride - 1) / stride : 0;
  const std::int64_t hi = std::min(out_extent, (extent - 1 + pad - k) / stride + 1);
  return {lo, std::max(lo, hi)};
}

// im2col/col2im over one image; `col` points at this image's first column
// inside a [kdim x B*sp] batch matrix whose rows are `row_stride` apart.

template <typename T>
void im2col(const T* img, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, T* col, std::int64_t row_stride) {
  for (std::int64_t ci = 0; ci < cin; ++ci)
    for (std::int64_t ky = 0; ky < kh; ++ky) {
      const auto [oy_lo, oy_hi] = conv_valid_range(ky, stride, pad, h, oh);
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        T* dst = col + ((ci * kh + ky) * kw + kx) * row_stride;
        const auto [ox_lo, ox_hi] = conv_valid_range(kx, stride, pad, w, ow);
        std::fill(dst, dst + oy_lo * ow, T(0));
        for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
          T* row = dst + oy * ow;
          std::fill(row, row + ox_lo, T(0));
          std::fill(row + ox_hi, row + ow, T(0));
          const T* src = img + (ci * h + oy * stride - pad + ky) * w + ox_lo * stride - pad + kx;
          if (stride == 1) {
            std::copy(src, src + (ox_hi - ox_lo), row + ox_lo);
          } else {
            for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox)
              row[ox] = src[(ox - ox_lo) * stride];
          }
        }
        std::fill(dst + oy_hi * ow, dst + oh * ow, T(0));
      }
    }
}

template <typename T>
void col2im_add(const T* col, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
                std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
                std::int64_t ow, T* img, std::int64_t row_stride) {
  for (std::int64_t ci = 0; ci < cin; ++ci)
    for (std::int64_t ky = 0; ky < kh; ++ky) {
      const auto [oy_lo, oy_hi] = conv_valid_range(ky, stride, pad, h, oh);
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        const T* src = col + ((ci * kh + ky) * kw + kx) * row_stride;
        const auto [ox_lo, ox_hi] = conv_valid_range(kx, stride, pad, w, ow);
        for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
          T* dst = img + (ci * h + oy * stride - pad + ky) * w + ox_lo * stride - pad + kx;
          const T* row = src + oy * ow;
          for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox)
            dst[(ox - ox_lo) * stride] += row[ox];
        }
      }
    }
}

}  // namespace detail

/// 2D cross-correlation: x [b x cin x h x w], kernel [cout x cin x kh x kw].
/// Output spatial size floor((h + 2*pad - k)/stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::int64_t stride,
                 std::int64_t pad) {
  detail::require(x.rank() == 4, "conv2d: input must be rank 4");
  detail::require(kernel.rank() == 4, "conv2d: kernel must be rank 4");
  detail::require(stride >= 1 && pad >= 0, "conv2d: invalid stride/padding");
  const std::int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  detail::require(kernel.dim(1) == cin, "conv2d: kernel expects " + detail::str(kernel.dim(1)) +
                                            " input channels, image has " + detail::str(cin));
  const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
  detail::require(h + 2 * pad >= kh && w + 2 * pad >= kw && oh >= 1 && ow >= 1,
                  "conv2d: output size would be non-positive");

  const std::int64_t kdim = cin * kh * kw;
  const std::int64_t sp = oh * ow;
  const std::int64_t bsp = b * sp;
  Tensor<T> out = Tensor<T>::zeros({b, cout, oh, ow});
  // One [kdim x B*sp] im2col matrix and one GEMM for the whole batch, so the
  // kernel is read once even for the deep low-resolution stages; the matrix
  // stays alive for the backward pass.
  auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(kdim * bsp));
  for (std::int64_t i = 0; i < b; ++i)
    detail::im2col(x.data().data() + i * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow,
                   col->data() + i * sp, bsp);
  std::vector<T> res(static_cast<std::size_t>(cout * bsp));
  detail::mat(res, cout, bsp).noalias() =
      detail::cmat(kernel.data(), cout, kdim) * detail::cmat(*col, kdim, bsp);
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t ch = 0; ch < cout; ++ch)
      std::copy(res.begin() + ch * bsp + i * sp, res.begin() + ch * bsp + (i + 1) * sp,
                out.data().begin() + (i * cout + ch) * sp);

  if (detail::tracking<T>({&x, &kernel})) {
    detail::enable_out_grad(out);
    auto xn = x.node(), kn = kernel.node(), on = out.node();
    Tape<T>::current()->push([xn, kn, on, col, b, cin, h, w, cout, kh, kw, stride, pad, oh, ow,
                              kdim, sp, bsp] {
      std::vector<T> g(static_cast<std::size_t>(cout * bsp));
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t ch = 0; ch < cout; ++ch)
          std::copy(on->grad.begin() + (i * cout + ch) * sp,
                    on->grad.begin() + (i * cout + ch + 1) * sp, g.begin() + ch * bsp + i * sp);
      if (kn->requires_grad)
        detail::mat(kn->grad, cout, kdim).noalias() +=
            detail::cmat(g, cout, bsp) * detail::cmat(*col, kdim, bsp).transpose();
      if (xn->requires_grad) {
        std::vector<T> dcol(static_cast<std::size_t>(kdim * bsp));
        detail::mat(dcol, kdim, bsp).noalias() =
            detail::cmat(kn->value, cout, kdim).transpose() * detail::cmat(g, cout, bsp);
        for (std::int64_t i = 0; i < b; ++i)
          detail::col2im_add(dcol.data() + i * sp, cin, h, w, kh, kw, stride, pad, oh, ow,
                             xn->grad.data() + i * cin * h * w, bsp);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling; the gradient routes to each window's argmax element, ties
/// resolved to the lowest flat input index.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::int64_t window, std::int64_t stride,
                     std::int64_t pad) {
  detail::require(x.rank() == 4, "max_pool2d: input must be rank 4");
  detail::require(window >= 1 && stride >= 1 && pad >= 0 && pad < window,
                  "max_pool2d: invalid window");
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = (h + 2 * pad - window) / stride + 1;
  const std::int64_t ow = (w + 2 * pad - window) / stride + 1;
  detail::require(h + 2 * pad >= window && w + 2 * pad >= window && oh >= 1 && ow >= 1,
                  "max_pool2d: window does not fit");
  Tensor<T> out = Tensor<T>::zeros({b, c, oh, ow});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(b * c * oh * ow));
  for (std::int64_t i = 0; i < b * c; ++i) {
    const T* img = x.data().data() + i * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      const std::int64_t iy0 = oy * stride - pad;
      const std::int64_t ky_lo = std::max<std::int64_t>(0, -iy0);
      const std::int64_t ky_hi = std::min(window, h - iy0);
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        const std::int64_t ix0 = ox * stride - pad;
        const std::int64_t kx_lo = std::max<std::int64_t>(0, -ix0);
        const std::int64_t kx_hi = std::min(window, w - ix0);
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_idx = 0;
        for (std::int64_t ky = ky_lo; ky < ky_hi; ++ky) {
          const T* row = img + (iy0 + ky) * w + ix0;
          for (std::int64_t kx = kx_lo; kx < kx_hi; ++kx) {
            if (row[kx] > best) {
              best = row[kx];
              best_idx = (iy0 + ky) * w + ix0 + kx;
            }
          }
        }
        out.data()[(i * oh + oy) * ow + ox] = best;
        argmax[static_cast<std::size_t>((i * oh + oy) * ow + ox)] = i * h * w + best_idx;
      }
    }
  }
  if (detail::tracking<T>({&x})) {
    detail::enable_out_grad(out);
    auto xn = x.node(), on = out.node();
    Tape<T>::current()->push([xn, on, argmax = std::move(argmax)] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[argmax[i]] += on->grad[i];
    });
  }
  return out;
}

/// Reduces each channel map to its mean: [b x c x h x w] -> [b x c].
template <typename T>
Tensor<T> global_avg_pool2d(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool2d: input must be rank 4");
  const std::int64_t b = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({b, c});
  const T inv = T(1) / static_cast<T>(spatial);
  for (std::int64_t i = 0; i < b * c; ++i) {
    T acc = T(0);
    const T* p = x.data().data() + i * spatial;
    for (std::int64_t s = 0; s < spatial; ++s) acc += p[s];
    out.data()[i] = acc * inv;
  }
  if (detail::tracking<T>({&x})) {
    detail::enable_out_grad(out);
    auto xn = x.node(), on = out.node();
    Tape<T>::current()->push([xn, on, spatial, inv] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const T g = on->grad[i] * inv;
        T* dst = xn->grad.data() + static_cast<std::int64_t>(i) * spatial;
        for (std::int64_t s = 0; s < spatial; ++s) dst[s] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean of squared differences over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require(pred.shape() == target.shape(), "mse: shapes " + shape_str(pred.shape()) +
                                                      " and " + shape_str(target.shape()) + " differ");
  const std::int64_t n = pred.numel();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T d = pred.data()[i] - target.data()[i];
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (detail::tracking<T>({&pred, &target})) {
    detail::enable_out_grad(out);
    auto pn = pred.node(), tn = target.node(), on = out.node();
    Tape<T>::current()->push([pn, tn, on, n] {
      const T g = on->grad[0] * T(2) / static_cast<T>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        const T d = pn->value[i] - tn->value[i];
        if (pn->requires_grad) pn->grad[i] += g * d;
        if (tn->requires_grad) tn->grad[i] -= g * d;
      }
    });
  }
  return out;
}

/// Mean over the batch of -log softmax(pred)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& pred, const std::vector<std::int64_t>& labels) {
  detail::require(pred.rank() == 2, "cross_entropy: logits must be rank 2");
  const std::int64_t b = pred.rows(), c = pred.cols();
  detail::require(static_cast<std::int64_t>(labels.size()) == b,
                  "cross_entropy: label count != batch size");
  for (auto l : labels)
    detail::require(0 <= l && l < c, "cross_entropy: label " + detail::str(l) + " outside [0," +
                                         detail::str(c) + ")");
  T acc = T(0);
  std::vector<T> probs(static_cast<std::size_t>(b * c));
  for (std::int64_t i = 0; i < b; ++i) {
    const T* z = pred.data().data() + i * c;
    T mx = z[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    T sum = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      probs[static_cast<std::size_t>(i * c + j)] = std::exp(z[j] - mx);
      sum += probs[static_cast<std::size_t>(i * c + j)];
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < c; ++j) probs[static_cast<std::size_t>(i * c + j)] *= inv;
    acc += std::log(sum) + mx - z[labels[static_cast<std::size_t>(i)]];
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(b));
  if (detail::tracking<T>({&pred})) {
    detail::enable_out_grad(out);
    auto pn = pred.node(), on = out.node();
    Tape<T>::current()->push([pn, on, probs = std::move(probs), labels, b, c] {
      const T g = on->grad[0] / static_cast<T>(b);
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
          T p = probs[static_cast<std::size_t>(i * c + j)];
          if (j == labels[static_cast<std::size_t>(i)]) p -= T(1);
          pn->grad[i * c + j] += g * p;
        }
    });
  }
  return out;
}

/// Mean over rows of sum_j p_t (log p_t - log p_s). Both arguments must be
/// row-stochastic; row sums deviating from 1 by more than 1e-4 are rejected.
template <typename T>
Tensor<T> kl_div(const Tensor<T>& p_teacher, const Tensor<T>& p_student) {
  detail::require(p_teacher.rank() == 2 && p_teacher.shape() == p_student.shape(),
                  "kl_div: operands must be rank 2 with equal shapes");
  const std::int64_t r = p_teacher.rows(), c = p_teacher.cols();
  const T tiny = std::numeric_limits<T>::min();
  for (std::int64_t i = 0; i < r; ++i) {
    T st = T(0), ss = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      st += p_teacher.data()[i * c + j];
      ss += p_student.data()[i * c + j];
    }
    detail::require_numeric(std::abs(static_cast<double>(st) - 1.0) <= 1e-4 &&
                                std::abs(static_cast<double>(ss) - 1.0) <= 1e-4,
                            "kl_div: inputs are not row-stochastic (row " + detail::str(i) + ")");
  }
  T acc = T(0);
  for (std::int64_t i = 0; i < r * c; ++i) {
    const T pt = p_teacher.data()[i];
    if (pt <= T(0)) continue;
    const T ps = std::max(p_student.data()[i], tiny);
    acc += pt * (std::log(pt) - std::log(ps));
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(r));
  if (detail::tracking<T>({&p_teacher, &p_student})) {
    detail::enable_out_grad(out);
    auto tn = p_teacher.node(), sn = p_student.node(), on = out.node();
    Tape<T>::current()->push([tn, sn, on, r, c, tiny] {
      const T g = on->grad[0] / static_cast<T>(r);
      for (std::int64_t i = 0; i < r * c; ++i) {
        const T pt = tn->value[i];
        const T ps = std::max(sn->value[i], tiny);
        if (sn->requires_grad && pt > T(0)) sn->grad[i] -= g * pt / ps;
        if (tn->requires_grad && pt > T(0)) tn->grad[i] += g * (std::log(pt) - std::log(ps) + T(1));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Train mode zeroes each element with probability `rate` and scales the
/// survivors by 1/(1-rate); eval mode is the identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, Mode mode, std::mt19937_64& rng) {
  detail::require(rate >= T(0) && rate < T(1), "dropout: rate must lie in [0,1)");
  if (mode == Mode::kEval || rate == T(0)) {
    Tensor<T> out = Tensor<T>::from(x.shape(), x.data());
    if (detail::tracking<T>({&x})) {
      detail::enable_out_grad(out);
      auto xn = x.node(), on = out.node();
      Tape<T>::current()->push([xn, on] {
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      });
    }
    return out;
  }
  const T scale = T(1) / (T(1) - rate);
  std::uniform_real_distribution<T> u(T(0), T(1));
  std::vector<T> mask(x.data().size());
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = u(rng) >= rate ? scale : T(0);
    out.data()[i] = x.data()[i] * mask[i];
  }
  if (detail::tracking<T>({&x})) {
    detail::enable_out_grad(out);
    auto xn = x.node(), on = out.node();
    Tape<T>::current()->push([xn, on, mask = std::move(mask)] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * mask[i];
    });
  }
  return out;
}

}  // namespace gmvit
