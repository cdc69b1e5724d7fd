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

// Minimal dynamic-convolution baselines. Both build per-sample kernels and
// run a batch-grouped convolution (x viewed as [1, B*C_in, H, W], groups=B).
// They exist as correctness anchors and for cost measurement, not as tuned
// reimplementations of any published method.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kdna/kerneldna.hpp"

namespace kdna {

namespace detail {

inline Tensor init_kernel_stack(std::size_t n, std::size_t c_out, std::size_t c_in,
                                std::size_t k, std::mt19937_64& rng) {
  Tensor t(Shape{n, c_out, c_in, k, k});
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(c_in * k * k)));
  for (auto& v : t) v = dist(rng);
  return t;
}

inline Var init_linear(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w(Shape{out, in});
  for (auto& v : w) v = dist(rng);
  return Var::parameter(std::move(w));
}

/// y = conv(x_b, W_b) for every sample b, with W given as [B*C_out, C_in, k, k].
inline Var batch_grouped_conv(Tape* tape, const Var& x, const Var& per_sample_w,
                              std::size_t c_out, std::size_t stride, std::size_t padding) {
  const Shape& s = x.shape();
  const std::size_t b = s[0];
  Var xg = reshape(tape, x, {1, b * s[1], s[2], s[3]});
  Var y = conv2d(tape, xg, per_sample_w, {stride, padding, b});
  const Shape& ys = y.shape();
  return reshape(tape, y, {b, c_out, ys[2], ys[3]});
}

}  // namespace detail

/// W(x) = sum_i pi_i(x) W_i with pi on the simplex (softmax router over
/// the pooled input), followed by a standard convolution per sample.
struct KernelPoolConv {
  Var kernels;     // [n, c_out, c_in, k, k]
  Var router_fc1;  // [hidden, c_in]
  Var router_fc2;  // [n, hidden]
  std::size_t stride = 1;
  std::size_t padding = 0;
  /// Replaces the router output for every sample when set (length n).
  std::optional<std::vector<double>> forced_mixture;

  static KernelPoolConv make(std::size_t n, std::size_t c_in, std::size_t c_out, std::size_t k,
                             std::size_t stride, std::size_t padding, std::mt19937_64& rng,
                             std::size_t reduction = 4) {
    if (n == 0) throw ConfigError("kernel pool needs at least one kernel");
    KernelPoolConv l;
    const std::size_t hidden = reduced_width(c_in, reduction);
    l.kernels = Var::parameter(detail::init_kernel_stack(n, c_out, c_in, k, rng));
    l.router_fc1 = detail::init_linear(hidden, c_in, rng);
    l.router_fc2 = detail::init_linear(n, hidden, rng);
    l.stride = stride;
    l.padding = padding;
    return l;
  }

  std::size_t pool_size() const { return kernels.shape()[0]; }
  std::size_t out_channels() const { return kernels.shape()[1]; }
  std::size_t in_channels() const { return kernels.shape()[2]; }
  std::size_t kernel() const { return kernels.shape()[3]; }
  std::size_t kernel_elements() const { return shape_size(kernels.shape()) / pool_size(); }

  void collect(const std::string& prefix, std::vector<NamedParam>& params) {
    params.push_back({prefix + ".kernels", kernels, true});
    params.push_back({prefix + ".router_fc1", router_fc1, true});
    params.push_back({prefix + ".router_fc2", router_fc2, true});
  }

  /// pi(x): [b, n], rows on the simplex.
  Var mixture(Tape* tape, const Var& x) const {
    const Shape& s = x.shape();
    const std::size_t n = pool_size();
    if (forced_mixture) {
      if (forced_mixture->size() != n)
        throw ConfigError("forced mixture has " + std::to_string(forced_mixture->size()) +
                          " entries for a pool of " + std::to_string(n));
      Tensor pi(Shape{s[0], n});
      for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t i = 0; i < n; ++i) pi(b, i) = (*forced_mixture)[i];
      return Var(std::move(pi));
    }
    Var pooled = reshape(tape, global_avg_pool(tape, x), {s[0], s[1]});
    Var h = relu(tape, linear(tape, pooled, router_fc1));
    return softmax_rows(tape, linear(tape, h, router_fc2));
  }

  Var forward(Tape* tape, const Var& x, Mode /*mode*/ = Mode::eval) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != in_channels())
      throw ShapeError("kernel pool conv expects " + std::to_string(in_channels()) +
                       " channels, got " + shape_string(s));
    const std::size_t b = s[0], n = pool_size(), kel = kernel_elements();
    Var pi = mixture(tape, x);
    Var flat = reshape(tape, kernels, {n, kel});
    Var w = matmul(tape, pi, flat);  // [b, kel]
    KernelMeter::current().record(w.value());
    w = reshape(tape, w, {b * out_channels(), in_channels(), kernel(), kernel()});
    return detail::batch_grouped_conv(tape, x, w, out_channels(), stride, padding);
  }
};

inline Tensor pool_aggregate_forward(const Tensor& x, const KernelPoolConv& layer) {
  return layer.forward(nullptr, Var(x)).value();
}

/// Purely dynamic convolution with four input-dependent attentions
/// (kernel, filter, channel, spatial) from a shared SE-style trunk.
/// The weight stack is expanded per sample before the kernel sum, so the
/// transient tensor is [B, n, C_out, C_in, k, k].
struct BatchExpandedDynConv {
  Var weight;        // [n, c_out, c_in, k, k]
  Var trunk;         // [hidden, c_in]
  Var kernel_head;   // [n, hidden]
  Var filter_head;   // [c_out, hidden]
  Var channel_head;  // [c_in, hidden]
  Var spatial_head;  // [k*k, hidden]
  std::size_t stride = 1;
  std::size_t padding = 0;
  /// Forces every attention to exactly 1 (the neutral point).
  bool neutral_attention = false;

  static BatchExpandedDynConv make(std::size_t n, std::size_t c_in, std::size_t c_out,
                                   std::size_t k, std::size_t stride, std::size_t padding,
                                   std::mt19937_64& rng, std::size_t reduction = 4) {
    if (n == 0) throw ConfigError("batch-expanded conv needs at least one kernel");
    BatchExpandedDynConv l;
    const std::size_t hidden = reduced_width(c_in, reduction);
    l.weight = Var::parameter(detail::init_kernel_stack(n, c_out, c_in, k, rng));
    l.trunk = detail::init_linear(hidden, c_in, rng);
    l.kernel_head = detail::init_linear(n, hidden, rng);
    l.filter_head = detail::init_linear(c_out, hidden, rng);
    l.channel_head = detail::init_linear(c_in, hidden, rng);
    l.spatial_head = detail::init_linear(k * k, hidden, rng);
    l.stride = stride;
    l.padding = padding;
    return l;
  }

  std::size_t pool_size() const { return weight.shape()[0]; }
  std::size_t out_channels() const { return weight.shape()[1]; }
  std::size_t in_channels() const { return weight.shape()[2]; }
  std::size_t kernel() const { return weight.shape()[3]; }

  void collect(const std::string& prefix, std::vector<NamedParam>& params) {
    params.push_back({prefix + ".weight", weight, true});
    params.push_back({prefix + ".trunk", trunk, true});
    params.push_back({prefix + ".kernel_head", kernel_head, true});
    params.push_back({prefix + ".filter_head", filter_head, true});
    params.push_back({prefix + ".channel_head", channel_head, true});
    params.push_back({prefix + ".spatial_head", spatial_head, true});
  }

  Var forward(Tape* tape, const Var& x, Mode /*mode*/ = Mode::eval) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != in_channels())
      throw ShapeError("batch-expanded conv expects " + std::to_string(in_channels()) +
                       " channels, got " + shape_string(s));
    const std::size_t b = s[0], n = pool_size(), co = out_channels(), ci = in_channels(),
                      k = kernel();
    Var kernel_attn, filter_attn, channel_attn, spatial_attn;
    if (neutral_attention) {
      kernel_attn = Var(Tensor(Shape{b, n, 1, 1, 1, 1}, 1.0));
      spatial_attn = Var(Tensor(Shape{b, 1, 1, 1, k, k}, 1.0));
      channel_attn = Var(Tensor(Shape{b, ci, 1, 1}, 1.0));
      filter_attn = Var(Tensor(Shape{b, co, 1, 1}, 1.0));
    } else {
      Var pooled = reshape(tape, global_avg_pool(tape, x), {b, ci});
      Var h = relu(tape, linear(tape, pooled, trunk));
      kernel_attn = reshape(tape, softmax_rows(tape, linear(tape, h, kernel_head)), {b, n, 1, 1, 1, 1});
      spatial_attn = reshape(tape, sigmoid(tape, linear(tape, h, spatial_head)), {b, 1, 1, 1, k, k});
      channel_attn = reshape(tape, sigmoid(tape, linear(tape, h, channel_head)), {b, ci, 1, 1});
      filter_attn = reshape(tape, sigmoid(tape, linear(tape, h, filter_head)), {b, co, 1, 1});
    }
    Var w = reshape(tape, weight, {1, n, co, ci, k, k});
    w = mul(tape, w, kernel_attn);  // [b, n, co, ci, k, k]
    KernelMeter::current().record(w.value());
    w = mul(tape, w, spatial_attn);
    KernelMeter::current().record(w.value());
    w = sum_axis(tape, w, 1);  // [b, co, ci, k, k]
    KernelMeter::current().record(w.value());
    w = reshape(tape, w, {b * co, ci, k, k});
    Var xa = mul(tape, x, channel_attn);
    Var y = detail::batch_grouped_conv(tape, xa, w, co, stride, padding);
    return mul(tape, y, filter_attn);
  }
};

inline Tensor batch_expanded_forward(const Tensor& x, const BatchExpandedDynConv& layer) {
  return layer.forward(nullptr, Var(x)).value();
}

}  // namespace kdna
