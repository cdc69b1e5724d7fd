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

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "kdna/autograd.hpp"
#include "kdna/conv.hpp"

namespace kdna {

// ---------------------------------------------------------------------------
// Differentiable ops

inline Var conv2d(Tape* tape, const Var& x, const Var& w, const ConvGeometry& g,
                  const Var* bias = nullptr) {
  const Tensor* b = bias && *bias ? &bias->value() : nullptr;
  const bool rec = recording(tape, {&x, &w, bias});
  Var out = Var::result(conv2d_im2col(x.value(), w.value(), b, g), rec);
  if (rec) {
    Var bv = bias ? *bias : Var();
    tape->record(
        [x, w, bv, out, g]() mutable {
          if (!out.has_grad()) return;
          const bool nb = bv && bv.requires_grad();
          auto grads = conv2d_im2col_backward(out.grad(), x.value(), w.value(), g,
                                              x.requires_grad(), w.requires_grad(), nb);
          if (x.requires_grad()) x.accumulate_grad(grads.x);
          if (w.requires_grad()) w.accumulate_grad(grads.w);
          if (nb) bv.accumulate_grad(grads.bias);
        },
        {&x, &w, bias});
  }
  return out;
}

/// [m,k] x [k,n] -> [m,n]
inline Var matmul(Tape* tape, const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor y(Shape{m, n});
  detail::mmat(y.data(), m, n, n).noalias() =
      detail::cmat(a.value().data(), m, k, k) * detail::cmat(b.value().data(), k, n, n);
  const bool rec = recording(tape, {&a, &b});
  Var out = Var::result(std::move(y), rec);
  if (rec) {
    tape->record(
        [a, b, out, m, k, n]() mutable {
          if (!out.has_grad()) return;
          const auto G = detail::cmat(out.grad().data(), m, n, n);
          if (a.requires_grad()) {
            Tensor ga(a.shape());
            detail::mmat(ga.data(), m, k, k).noalias() =
                G * detail::cmat(b.value().data(), k, n, n).transpose();
            a.accumulate_grad(ga);
          }
          if (b.requires_grad()) {
            Tensor gb(b.shape());
            detail::mmat(gb.data(), k, n, n).noalias() =
                detail::cmat(a.value().data(), m, k, k).transpose() * G;
            b.accumulate_grad(gb);
          }
        },
        {&a, &b});
  }
  return out;
}

/// x [b,in] times weight [out,in] transposed, plus optional bias [out].
inline Var linear(Tape* tape, const Var& x, const Var& w, const Var* bias = nullptr) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1])
    throw ShapeError("linear: input " + shape_string(x.shape()) + " vs weight " +
                     shape_string(w.shape()));
  const std::size_t bsz = x.shape()[0], in = x.shape()[1], outf = w.shape()[0];
  Tensor y(Shape{bsz, outf});
  detail::mmat(y.data(), bsz, outf, outf).noalias() =
      detail::cmat(x.value().data(), bsz, in, in) *
      detail::cmat(w.value().data(), outf, in, in).transpose();
  if (bias && *bias)
    for (std::size_t i = 0; i < bsz; ++i)
      for (std::size_t j = 0; j < outf; ++j) y(i, j) += bias->value()[j];
  const bool rec = recording(tape, {&x, &w, bias});
  Var out = Var::result(std::move(y), rec);
  if (rec) {
    Var bv = bias ? *bias : Var();
    tape->record(
        [x, w, bv, out, bsz, in, outf]() mutable {
          if (!out.has_grad()) return;
          const auto G = detail::cmat(out.grad().data(), bsz, outf, outf);
          if (x.requires_grad()) {
            Tensor gx(x.shape());
            detail::mmat(gx.data(), bsz, in, in).noalias() =
                G * detail::cmat(w.value().data(), outf, in, in);
            x.accumulate_grad(gx);
          }
          if (w.requires_grad()) {
            Tensor gw(w.shape());
            detail::mmat(gw.data(), outf, in, in).noalias() =
                G.transpose() * detail::cmat(x.value().data(), bsz, in, in);
            w.accumulate_grad(gw);
          }
          if (bv && bv.requires_grad()) {
            Tensor gb(bv.shape());
            for (std::size_t i = 0; i < bsz; ++i)
              for (std::size_t j = 0; j < outf; ++j) gb[j] += out.grad()(i, j);
            bv.accumulate_grad(gb);
          }
        },
        {&x, &w, bias});
  }
  return out;
}

/// Row-wise softmax over the last dimension of a [rows, n] tensor.
inline Var softmax_rows(Tape* tape, const Var& a) {
  if (a.shape().size() != 2) throw ShapeError("softmax_rows needs rank 2");
  const std::size_t rows = a.shape()[0], n = a.shape()[1];
  Tensor y(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.value()(r, j));
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (y(r, j) = std::exp(a.value()(r, j) - mx));
    for (std::size_t j = 0; j < n; ++j) y(r, j) /= z;
  }
  const bool rec = recording(tape, {&a});
  Var out = Var::result(std::move(y), rec);
  if (rec) {
    tape->record(
        [a, out, rows, n]() mutable {
          if (!out.has_grad()) return;
          Tensor g(a.shape());
          const auto& s = out.value();
          const auto& go = out.grad();
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += go(r, j) * s(r, j);
            for (std::size_t j = 0; j < n; ++j) g(r, j) = s(r, j) * (go(r, j) - dot);
          }
          a.accumulate_grad(g);
        },
        {&a});
  }
  return out;
}

/// [b,c,h,w] -> [b,c,1,1]
inline Var global_avg_pool(Tape* tape, const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool needs rank 4, got " + shape_string(s));
  const std::size_t bc = s[0] * s[1], hw = s[2] * s[3];
  Tensor y(Shape{s[0], s[1], 1, 1});
  const double* px = x.value().data();
  for (std::size_t i = 0; i < bc; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += px[i * hw + j];
    y[i] = acc / static_cast<double>(hw);
  }
  const bool rec = recording(tape, {&x});
  Var out = Var::result(std::move(y), rec);
  if (rec) {
    tape->record(
        [x, out, bc, hw]() mutable {
          if (!out.has_grad()) return;
          Tensor g(x.shape());
          for (std::size_t i = 0; i < bc; ++i) {
            const double v = out.grad()[i] / static_cast<double>(hw);
            std::fill(g.data() + i * hw, g.data() + (i + 1) * hw, v);
          }
          x.accumulate_grad(g);
        },
        {&x});
  }
  return out;
}

inline Var max_pool2d(Tape* tape, const Var& x, std::size_t k, std::size_t stride,
                      std::size_t padding) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("max_pool2d needs rank 4, got " + shape_string(s));
  const std::size_t ho = conv_output_extent(s[2], k, stride, padding);
  const std::size_t wo = conv_output_extent(s[3], k, stride, padding);
  Tensor y(Shape{s[0], s[1], ho, wo});
  std::vector<std::size_t> argmax(y.size());
  const std::size_t planes = s[0] * s[1];
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.value().data() + p * s[2] * s[3];
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t at = 0;
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b) {
            const auto ih = static_cast<std::ptrdiff_t>(i * stride + a) -
                            static_cast<std::ptrdiff_t>(padding);
            const auto iw = static_cast<std::ptrdiff_t>(j * stride + b) -
                            static_cast<std::ptrdiff_t>(padding);
            if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(s[2]) ||
                iw >= static_cast<std::ptrdiff_t>(s[3]))
              continue;
            const std::size_t off = static_cast<std::size_t>(ih) * s[3] + static_cast<std::size_t>(iw);
            if (src[off] > best) {
              best = src[off];
              at = off;
            }
          }
        const std::size_t o = (p * ho + i) * wo + j;
        y[o] = best;
        argmax[o] = p * s[2] * s[3] + at;
      }
  }
  const bool rec = recording(tape, {&x});
  Var out = Var::result(std::move(y), rec);
  if (rec) {
    tape->record(
        [x, out, argmax = std::move(argmax)]() mutable {
          if (!out.has_grad()) return;
          Tensor g(x.shape());
          for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += out.grad()[o];
          x.accumulate_grad(g);
        },
        {&x});
  }
  return out;
}

/// Mean over the batch of -log softmax(logits)[label].
inline Var softmax_cross_entropy(Tape* tape, const Var& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("logits must be [batch, classes], got " + shape_string(s));
  if (labels.size() != s[0])
    throw InputError("got " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(s[0]));
  const std::size_t bsz = s[0], k = s[1];
  for (std::size_t i = 0; i < bsz; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw InputError("label " + std::to_string(labels[i]) + " out of range [0, " +
                       std::to_string(k) + ")");
  Tensor prob(s);
  double loss = 0;
  for (std::size_t i = 0; i < bsz; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.value()(i, j));
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += (prob(i, j) = std::exp(logits.value()(i, j) - mx));
    for (std::size_t j = 0; j < k; ++j) prob(i, j) /= z;
    loss += -(logits.value()(i, static_cast<std::size_t>(labels[i])) - mx - std::log(z));
  }
  loss /= static_cast<double>(bsz);
  const bool rec = recording(tape, {&logits});
  Var out = Var::result(Tensor::scalar(loss), rec);
  if (rec) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record(
        [logits, out, prob = std::move(prob), lab = std::move(lab), bsz, k]() mutable {
          if (!out.has_grad()) return;
          Tensor g = prob;
          for (std::size_t i = 0; i < bsz; ++i) g(i, static_cast<std::size_t>(lab[i])) -= 1.0;
          scale_inplace(g, out.grad()[0] / static_cast<double>(bsz));
          logits.accumulate_grad(g);
        },
        {&logits});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layers

/// A trainable slot with its checkpoint name. BN affine parameters are
/// flagged so the optimiser can exempt them from weight decay.
struct NamedParam {
  std::string name;
  Var var;
  bool decay = true;
};

/// Non-trainable state that still belongs in a checkpoint.
struct NamedBuffer {
  std::string name;
  Tensor* tensor = nullptr;
};

/// Fan-in scaled normal initialisation (He et al.).
inline Tensor kaiming_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t) v = dist(rng);
  return t;
}

struct Conv2dLayer {
  Var weight;  // [c_out, c_in/groups, k, k]
  Var bias;    // optional [c_out]
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  static Conv2dLayer make(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride,
                          std::size_t padding, std::mt19937_64& rng, bool with_bias = false,
                          std::size_t groups = 1) {
    Conv2dLayer l;
    l.weight = Var::parameter(kaiming_normal({c_out, c_in / groups, k, k}, c_in / groups * k * k, rng));
    if (with_bias) l.bias = Var::parameter(Tensor(Shape{c_out}));
    l.stride = stride;
    l.padding = padding;
    l.groups = groups;
    return l;
  }

  ConvGeometry geometry() const { return {stride, padding, groups}; }
  std::size_t kernel() const { return weight.shape()[2]; }
  std::size_t in_channels() const { return weight.shape()[1] * groups; }
  std::size_t out_channels() const { return weight.shape()[0]; }

  Var forward(Tape* tape, const Var& x) const {
    return conv2d(tape, x, weight, geometry(), bias ? &bias : nullptr);
  }
};

inline Tensor conv2d_forward(const Tensor& x, const Conv2dLayer& layer) {
  return conv2d_im2col(x, layer.weight.value(),
                       layer.bias ? &layer.bias.value() : nullptr, layer.geometry());
}

inline std::tuple<Tensor, Tensor, Tensor> conv2d_backward(const Tensor& grad_out, const Tensor& x,
                                                          const Conv2dLayer& layer) {
  auto g = conv2d_im2col_backward(grad_out, x, layer.weight.value(), layer.geometry(), true, true,
                                  static_cast<bool>(layer.bias));
  return {std::move(g.x), std::move(g.w), std::move(g.bias)};
}

/// Batch normalisation over dimension 1; any trailing dimensions count as
/// spatial positions, so [b,c] and [b,c,h,w] are both accepted.
struct BatchNormLayer {
  Var gamma, beta;
  Tensor running_mean, running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormLayer make(std::size_t channels) {
    BatchNormLayer l;
    l.gamma = Var::parameter(Tensor(Shape{channels}, 1.0));
    l.beta = Var::parameter(Tensor(Shape{channels}, 0.0));
    l.running_mean = Tensor(Shape{channels}, 0.0);
    l.running_var = Tensor(Shape{channels}, 1.0);
    return l;
  }

  std::size_t channels() const { return gamma.shape()[0]; }

  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedBuffer>& buffers) {
    params.push_back({prefix + ".gamma", gamma, false});
    params.push_back({prefix + ".beta", beta, false});
    buffers.push_back({prefix + ".running_mean", &running_mean});
    buffers.push_back({prefix + ".running_var", &running_var});
  }

  Var forward(Tape* tape, const Var& x, Mode mode);
};

inline Var BatchNormLayer::forward(Tape* tape, const Var& x, Mode mode) {
  const Shape& s = x.shape();
  if (s.size() < 2 || s[1] != channels())
    throw ShapeError("batchnorm expects channel extent " + std::to_string(channels()) +
                     ", got input " + shape_string(s));
  const std::size_t bsz = s[0], c = s[1];
  const std::size_t sp = shape_size(s) / (bsz * c);
  const std::size_t count = bsz * sp;
  Tensor mean(Shape{c}), inv_std(Shape{c});
  const double* px = x.value().data();
  if (mode == Mode::train) {
    if (count < 2)
      throw DegenerateInputError(
          "batchnorm in train mode needs more than one value per channel (batch 1, spatial 1)");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (std::size_t b = 0; b < bsz; ++b) {
        const double* p = px + (b * c + ch) * sp;
        for (std::size_t i = 0; i < sp; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(count);
      double var = 0;
      for (std::size_t b = 0; b < bsz; ++b) {
        const double* p = px + (b * c + ch) * sp;
        for (std::size_t i = 0; i < sp; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      var /= static_cast<double>(count);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + epsilon);
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      running_mean[ch] = (1 - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (1 - momentum) * running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var[ch] + epsilon);
    }
  }
  Tensor xhat(s), y(s);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * sp;
      const double g = gamma.value()[ch], bt = beta.value()[ch];
      for (std::size_t i = 0; i < sp; ++i) {
        const double h = (px[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = h;
        y[off + i] = g * h + bt;
      }
    }
  const bool rec = recording(tape, {&x, &gamma, &beta});
  Var out = Var::result(std::move(y), rec);
  if (rec) {
    tape->record(
        [x, gam = gamma, bet = beta, out, xhat = std::move(xhat), inv_std, mode, bsz, c, sp,
         count]() mutable {
          if (!out.has_grad()) return;
          const double* go = out.grad().data();
          Tensor dgamma(Shape{c}), dbeta(Shape{c});
          for (std::size_t b = 0; b < bsz; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (b * c + ch) * sp;
              for (std::size_t i = 0; i < sp; ++i) {
                dgamma[ch] += go[off + i] * xhat[off + i];
                dbeta[ch] += go[off + i];
              }
            }
          if (x.requires_grad()) {
            Tensor gx(x.shape());
            for (std::size_t b = 0; b < bsz; ++b)
              for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t off = (b * c + ch) * sp;
                const double scale = gam.value()[ch] * inv_std[ch];
                if (mode == Mode::train) {
                  const double mg = dbeta[ch] / static_cast<double>(count);
                  const double mgx = dgamma[ch] / static_cast<double>(count);
                  for (std::size_t i = 0; i < sp; ++i)
                    gx[off + i] = scale * (go[off + i] - mg - xhat[off + i] * mgx);
                } else {
                  for (std::size_t i = 0; i < sp; ++i) gx[off + i] = scale * go[off + i];
                }
              }
            x.accumulate_grad(gx);
          }
          if (gam.requires_grad()) gam.accumulate_grad(dgamma);
          if (bet.requires_grad()) bet.accumulate_grad(dbeta);
        },
        {&x, &gamma, &beta});
  }
  return out;
}

inline Tensor batchnorm_forward(const Tensor& x, BatchNormLayer& layer, Mode mode) {
  return layer.forward(nullptr, Var(x), mode).value();
}

inline Tensor global_avg_pool(const Tensor& x) { return global_avg_pool(nullptr, Var(x)).value(); }

inline double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return softmax_cross_entropy(nullptr, Var(logits), labels).value()[0];
}

struct LinearLayer {
  Var weight;  // [out, in]
  Var bias;    // optional [out]

  static LinearLayer make(std::size_t in, std::size_t out, std::mt19937_64& rng,
                          bool with_bias = true) {
    LinearLayer l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w(Shape{out, in});
    for (auto& v : w) v = dist(rng);
    l.weight = Var::parameter(std::move(w));
    if (with_bias) {
      Tensor b(Shape{out});
      for (auto& v : b) v = dist(rng);
      l.bias = Var::parameter(std::move(b));
    }
    return l;
  }

  Var forward(Tape* tape, const Var& x) const {
    return linear(tape, x, weight, bias ? &bias : nullptr);
  }
};

}  // namespace kdna
