/*
 * Copyright 2026 The KernelDNA Engine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <vector>

#include "kdna/tensor.hpp"

namespace kdna {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride,
                                      std::size_t padding) {
  if (stride == 0) throw ShapeError("convolution stride must be positive");
  if (k > in + 2 * padding)
    throw ShapeError("kernel extent " + std::to_string(k) + " exceeds padded input extent " +
                     std::to_string(in + 2 * padding));
  return (in + 2 * padding - k) / stride + 1;
}

/// Output shape of a grouped 2-d convolution; validates every operand.
inline Shape conv2d_output_shape(const Shape& x, const Shape& w, const ConvGeometry& g) {
  if (x.size() != 4) throw ShapeError("conv2d input must be rank 4, got " + shape_string(x));
  if (w.size() != 4) throw ShapeError("conv2d weight must be rank 4, got " + shape_string(w));
  if (w[2] != w[3]) throw ShapeError("conv2d kernel must be square, got " + shape_string(w));
  if (g.groups == 0 || w[0] % g.groups != 0)
    throw ShapeError("output channels " + std::to_string(w[0]) + " not divisible by groups " +
                     std::to_string(g.groups));
  if (x[1] != w[1] * g.groups)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x[1]) +
                     " channels, weight expects " + std::to_string(w[1] * g.groups));
  return {x[0], w[0], conv_output_extent(x[2], w[2], g.stride, g.padding),
          conv_output_extent(x[3], w[3], g.stride, g.padding)};
}

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
ConstMatMap<T> cmat(const T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return ConstMatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                        Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}
template <typename T>
MatMap<T> mmat(T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
  return MatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

struct ConvDims {
  std::size_t batch, cin, h, w, cout, k, ho, wo, groups, stride, pad;
  std::size_t cin_g() const { return cin / groups; }
  std::size_t cout_g() const { return cout / groups; }
  std::size_t patch() const { return cin_g() * k * k; }
  std::size_t plane() const { return ho * wo; }
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, const ConvGeometry& g) {
  const Shape y = conv2d_output_shape(x, w, g);
  return {x[0], x[1], x[2], x[3], w[0], w[2], y[2], y[3], g.groups, g.stride, g.padding};
}

/// Unfolds `channels` planes of one image into rows of `col` (row stride
/// `ld`), one row per (channel, kh, kw), one column per output pixel.
template <typename T>
void im2col(const T* img, std::size_t channels, const ConvDims& d, T* col, std::size_t ld) {
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = img + c * d.h * d.w;
    for (std::size_t kh = 0; kh < d.k; ++kh)
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        T* row = col + ((c * d.k + kh) * d.k + kw) * ld;
        // Output columns whose input column lands inside the image.
        const std::size_t lo = kw >= d.pad ? 0 : (d.pad - kw + d.stride - 1) / d.stride;
        const std::size_t hi =
            d.w + d.pad > kw ? std::min(d.wo, (d.w + d.pad - kw + d.stride - 1) / d.stride) : 0;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * d.stride + kh) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          T* out = row + oh * d.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h) || lo >= hi) {
            std::fill(out, out + d.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * d.w + (lo * d.stride + kw - d.pad);
          std::fill(out, out + lo, T(0));
          if (d.stride == 1) {
            std::copy(src, src + (hi - lo), out + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) out[ow] = src[(ow - lo) * d.stride];
          }
          std::fill(out + hi, out + d.wo, T(0));
        }
      }
  }
}

/// Per-thread scratch that only grows, so repeated convolutions skip the
/// allocation and zero fill of fresh buffers.
template <typename T, int Slot>
T* scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

/// Adjoint of im2col: scatters-and-adds columns back into image planes.
template <typename T>
void col2im(const T* col, std::size_t ld, std::size_t channels, const ConvDims& d, T* img) {
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = img + c * d.h * d.w;
    for (std::size_t kh = 0; kh < d.k; ++kh)
      for (std::size_t kw = 0; kw < d.k; ++kw) {
        const T* row = col + ((c * d.k + kh) * d.k + kw) * ld;
        for (std::size_t oh = 0; oh < d.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * d.stride + kh) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * d.w;
          const T* src = row + oh * d.wo;
          for (std::size_t ow = 0; ow < d.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * d.stride + kw) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(d.w)) dst[iw] += src[ow];
          }
        }
      }
  }
}

// Upper bound on the unfolded-column buffer when batching images into one GEMM.
inline constexpr std::size_t kColumnBudget = std::size_t(1) << 18;

inline std::size_t batch_chunk(const ConvDims& d) {
  const std::size_t per_image = d.patch() * d.plane();
  return std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_image, 1), 1, d.batch);
}

}  // namespace detail

/// Reference convolution: the literal summation, used as the oracle for
/// the im2col path.
template <typename T>
BasicTensor<T> conv2d_direct(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             const BasicTensor<T>* bias, const ConvGeometry& g) {
  const auto d = detail::conv_dims(x.shape(), w.shape(), g);
  BasicTensor<T> y(Shape{d.batch, d.cout, d.ho, d.wo});
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t m = 0; m < d.cout; ++m) {
      const std::size_t grp = m / d.cout_g();
      for (std::size_t i = 0; i < d.ho; ++i)
        for (std::size_t j = 0; j < d.wo; ++j) {
          T acc = bias ? (*bias)[m] : T(0);
          for (std::size_t n = 0; n < d.cin_g(); ++n)
            for (std::size_t p = 0; p < d.k; ++p)
              for (std::size_t q = 0; q < d.k; ++q) {
                const auto ih = static_cast<std::ptrdiff_t>(i * d.stride + p) -
                                static_cast<std::ptrdiff_t>(d.pad);
                const auto iw = static_cast<std::ptrdiff_t>(j * d.stride + q) -
                                static_cast<std::ptrdiff_t>(d.pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(d.h) ||
                    iw >= static_cast<std::ptrdiff_t>(d.w))
                  continue;
                acc += w(m, n, p, q) * x(b, grp * d.cin_g() + n, static_cast<std::size_t>(ih),
                                         static_cast<std::size_t>(iw));
              }
          y(b, m, i, j) = acc;
        }
    }
  return y;
}

/// im2col + GEMM convolution. Ungrouped convolutions unfold several images
/// side by side so one GEMM covers a chunk of the batch.
template <typename T>
BasicTensor<T> conv2d_im2col(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             const BasicTensor<T>* bias, const ConvGeometry& g) {
  const auto d = detail::conv_dims(x.shape(), w.shape(), g);
  BasicTensor<T> y(Shape{d.batch, d.cout, d.ho, d.wo});
  const std::size_t P = d.plane(), K = d.patch();
  const std::size_t in_img = d.cin * d.h * d.w, out_img = d.cout * P;

  if (d.groups == 1) {
    const std::size_t chunk = detail::batch_chunk(d);
    T* col = detail::scratch<T, 0>(K * P * chunk);
    T* out = detail::scratch<T, 1>(d.cout * P * chunk);
    const auto W = detail::cmat(w.data(), d.cout, K, K);
    for (std::size_t b0 = 0; b0 < d.batch; b0 += chunk) {
      const std::size_t nb = std::min(chunk, d.batch - b0);
      const std::size_t ld = nb * P;
      for (std::size_t s = 0; s < nb; ++s)
        detail::im2col(x.data() + (b0 + s) * in_img, d.cin, d, col + s * P, ld);
      if (nb == 1) {
        detail::mmat(y.data() + b0 * out_img, d.cout, P, P).noalias() =
            W * detail::cmat(col, K, P, P);
        continue;
      }
      detail::mmat(out, d.cout, ld, ld).noalias() = W * detail::cmat(col, K, ld, ld);
      for (std::size_t s = 0; s < nb; ++s)
        for (std::size_t m = 0; m < d.cout; ++m)
          std::copy_n(out + m * ld + s * P, P, y.data() + (b0 + s) * out_img + m * P);
    }
  } else {
    T* col = detail::scratch<T, 0>(K * P);
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t grp = 0; grp < d.groups; ++grp) {
        detail::im2col(x.data() + b * in_img + grp * d.cin_g() * d.h * d.w, d.cin_g(), d,
                       col, P);
        detail::mmat(y.data() + b * out_img + grp * d.cout_g() * P, d.cout_g(), P, P).noalias() =
            detail::cmat(w.data() + grp * d.cout_g() * K, d.cout_g(), K, K) *
            detail::cmat(col, K, P, P);
      }
  }
  if (bias)
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t m = 0; m < d.cout; ++m) {
        T* p = y.data() + b * out_img + m * P;
        for (std::size_t i = 0; i < P; ++i) p[i] += (*bias)[m];
      }
  return y;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> x, w, bias;
};

/// Adjoint of conv2d_im2col. Only the requested gradients are formed.
template <typename T>
ConvGrads<T> conv2d_im2col_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x,
                                    const BasicTensor<T>& w, const ConvGeometry& g, bool need_x,
                                    bool need_w, bool need_bias = false) {
  const auto d = detail::conv_dims(x.shape(), w.shape(), g);
  if (grad_out.shape() != Shape{d.batch, d.cout, d.ho, d.wo})
    throw ContractError("conv2d backward: gradient shape " + shape_string(grad_out.shape()) +
                        " does not match forward output");
  ConvGrads<T> r;
  const std::size_t P = d.plane(), K = d.patch();
  const std::size_t in_img = d.cin * d.h * d.w, out_img = d.cout * P;
  if (need_x) r.x = BasicTensor<T>(x.shape());
  if (need_w) r.w = BasicTensor<T>(w.shape());
  if (need_bias) {
    r.bias = BasicTensor<T>(Shape{d.cout});
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t m = 0; m < d.cout; ++m) {
        const T* p = grad_out.data() + b * out_img + m * P;
        T acc = 0;
        for (std::size_t i = 0; i < P; ++i) acc += p[i];
        r.bias[m] += acc;
      }
  }
  if (!need_x && !need_w) return r;

  if (d.groups == 1) {
    const std::size_t chunk = detail::batch_chunk(d);
    T* col = detail::scratch<T, 0>(K * P * chunk);
    T* gout = detail::scratch<T, 1>(d.cout * P * chunk);
    const auto W = detail::cmat(w.data(), d.cout, K, K);
    for (std::size_t b0 = 0; b0 < d.batch; b0 += chunk) {
      const std::size_t nb = std::min(chunk, d.batch - b0);
      const std::size_t ld = nb * P;
      for (std::size_t s = 0; s < nb; ++s)
        for (std::size_t m = 0; m < d.cout; ++m)
          std::copy_n(grad_out.data() + (b0 + s) * out_img + m * P, P,
                      gout + m * ld + s * P);
      const auto G = detail::cmat(gout, d.cout, ld, ld);
      if (need_w) {
        for (std::size_t s = 0; s < nb; ++s)
          detail::im2col(x.data() + (b0 + s) * in_img, d.cin, d, col + s * P, ld);
        detail::mmat(r.w.data(), d.cout, K, K).noalias() +=
            G * detail::cmat(col, K, ld, ld).transpose();
      }
      if (need_x) {
        detail::mmat(col, K, ld, ld).noalias() = W.transpose() * G;
        for (std::size_t s = 0; s < nb; ++s)
          detail::col2im(col + s * P, ld, d.cin, d, r.x.data() + (b0 + s) * in_img);
      }
    }
  } else {
    T* col = detail::scratch<T, 0>(K * P);
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t grp = 0; grp < d.groups; ++grp) {
        const auto G = detail::cmat(grad_out.data() + b * out_img + grp * d.cout_g() * P,
                                    d.cout_g(), P, P);
        const std::size_t x_off = b * in_img + grp * d.cin_g() * d.h * d.w;
        if (need_w) {
          detail::im2col(x.data() + x_off, d.cin_g(), d, col, P);
          detail::mmat(r.w.data() + grp * d.cout_g() * K, d.cout_g(), K, K).noalias() +=
              G * detail::cmat(col, K, P, P).transpose();
        }
        if (need_x) {
          detail::mmat(col, K, P, P).noalias() =
              detail::cmat(w.data() + grp * d.cout_g() * K, d.cout_g(), K, K).transpose() * G;
          detail::col2im(col, P, d.cin_g(), d, r.x.data() + x_off);
        }
      }
  }
  return r;
}

}  // namespace kdna
