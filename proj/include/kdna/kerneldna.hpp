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

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "kdna/layers.hpp"
#include "kdna/meter.hpp"

namespace kdna {

/// Which parts of the adapter exist. Disabling all three gives the "copy"
/// child: the parent kernel applied verbatim.
struct AdapterOptions {
  std::size_t reduction = 4;
  bool channel = true;
  bool filter = true;
  bool spatial = true;

  bool any_static() const { return filter || spatial; }
};

inline std::size_t reduced_width(std::size_t channels, std::size_t reduction) {
  if (reduction == 0) throw ConfigError("channel reduction ratio must be positive");
  return std::max<std::size_t>(1, channels / reduction);
}

/// Per-child parameters that specialise a shared parent kernel.
///
/// Channel attention is input dependent: sigmoid(fc2(relu(bn(fc1(avgpool(x)))))),
/// one weight per input channel and sample, applied to the feature map.
/// Filter attention [c_out,1,1,1] and spatial attention [1,1,k,k] are static
/// and enter the kernel as (1 + alpha), so zero means "unchanged".
struct Adapter {
  AdapterOptions options;
  Var fc1;  // [c_in/r, c_in]
  BatchNormLayer fc1_bn;
  Var fc2;  // [c_in, c_in/r]
  Var filter_attn;
  Var spatial_attn;

  static Adapter make(std::size_t c_in, std::size_t c_out, std::size_t k,
                      const AdapterOptions& options, std::mt19937_64& rng) {
    Adapter a;
    a.options = options;
    if (options.channel) {
      const std::size_t hidden = reduced_width(c_in, options.reduction);
      const double bound = 1.0 / std::sqrt(static_cast<double>(c_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      Tensor w1(Shape{hidden, c_in});
      for (auto& v : w1) v = dist(rng);
      a.fc1 = Var::parameter(std::move(w1));
      a.fc1_bn = BatchNormLayer::make(hidden);
      a.fc2 = Var::parameter(Tensor(Shape{c_in, hidden}, 0.0));
    }
    if (options.filter) a.filter_attn = Var::parameter(Tensor(Shape{c_out, 1, 1, 1}, 0.0));
    if (options.spatial) a.spatial_attn = Var::parameter(Tensor(Shape{1, 1, k, k}, 0.0));
    return a;
  }

  std::size_t in_channels() const { return fc1 ? fc1.shape()[1] : 0; }

  void collect(const std::string& prefix, std::vector<NamedParam>& params,
               std::vector<NamedBuffer>& buffers) {
    if (fc1) {
      params.push_back({prefix + ".fc1", fc1, true});
      fc1_bn.collect(prefix + ".fc1_bn", params, buffers);
      params.push_back({prefix + ".fc2", fc2, true});
    }
    if (filter_attn) params.push_back({prefix + ".filter_attn", filter_attn, true});
    if (spatial_attn) params.push_back({prefix + ".spatial_attn", spatial_attn, true});
  }
};

/// beta_c(x): [b,c,h,w] -> [b,c,1,1], every value in (0,1).
inline Var channel_attention(Tape* tape, const Var& x, Adapter& adapter, Mode mode) {
  if (!adapter.fc1) throw StateError("adapter has no channel attention");
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != adapter.in_channels())
    throw ShapeError("channel attention expects " + std::to_string(adapter.in_channels()) +
                     " channels, got input " + shape_string(s));
  Var pooled = reshape(tape, global_avg_pool(tape, x), {s[0], s[1]});
  Var h = linear(tape, pooled, adapter.fc1);
  h = relu(tape, adapter.fc1_bn.forward(tape, h, mode));
  Var beta = sigmoid(tape, linear(tape, h, adapter.fc2));
  return reshape(tape, beta, {s[0], s[1], 1, 1});
}

/// W ⊙ (1+alpha_f) ⊙ (1+alpha_s). Same shape as the parent; no batch axis.
inline Var modulate_kernel(Tape* tape, const Var& parent, const Adapter& adapter) {
  Var w = parent;
  if (adapter.filter_attn) w = mul(tape, w, add_scalar(tape, adapter.filter_attn, 1.0));
  if (adapter.spatial_attn) w = mul(tape, w, add_scalar(tape, adapter.spatial_attn, 1.0));
  return w;
}

/// A convolution that owns no kernel: it borrows its parent's weight and
/// specialises it through an adapter.
class ChildConvLayer {
 public:
  ChildConvLayer(Var parent, Adapter adapter, std::size_t stride, std::size_t padding)
      : parent_(std::move(parent)), adapter_(std::move(adapter)), stride_(stride),
        padding_(padding) {
    if (parent_.shape().size() != 4) throw ShapeError("parent kernel must be rank 4");
  }

  const Var& parent() const noexcept { return parent_; }
  Adapter& adapter() noexcept { return adapter_; }
  const Adapter& adapter() const noexcept { return adapter_; }
  ConvGeometry geometry() const { return {stride_, padding_, 1}; }
  std::size_t in_channels() const { return parent_.shape()[1]; }
  std::size_t out_channels() const { return parent_.shape()[0]; }
  std::size_t kernel() const { return parent_.shape()[2]; }

  bool dynamic_enabled() const noexcept { return dynamic_; }
  void disable_dynamic() noexcept { dynamic_ = false; }
  void enable_dynamic() noexcept { dynamic_ = true; }

  /// Cached static kernel, or nullptr when not fused.
  const Tensor* fused_weight() const noexcept { return fused_ ? &fused_.value() : nullptr; }

  /// Caches the static modulation. Training would keep changing alpha, so
  /// fusing is only legal in eval mode.
  void fuse_static(Mode mode) {
    if (mode != Mode::eval) throw StateError("fuse_static requires eval mode");
    if (fused_) return;
    fused_ = Var(modulate_kernel(nullptr, parent_, adapter_).value());
  }

  void clear_fused() noexcept { fused_ = Var(); }

  /// Restores a cache produced elsewhere (checkpoint load).
  void set_fused(Tensor w) {
    if (w.shape() != parent_.shape())
      throw ShapeError("fused kernel shape " + shape_string(w.shape()) + " differs from parent " +
                       shape_string(parent_.shape()));
    fused_ = Var(std::move(w));
  }

  Var forward(Tape* tape, const Var& x, Mode mode) {
    if (x.shape().size() != 4 || x.shape()[1] != in_channels())
      throw ShapeError("child conv expects " + std::to_string(in_channels()) +
                       " input channels, got " + shape_string(x.shape()));
    Var w;
    if (fused_) {
      if (mode == Mode::train) throw StateError("a fused child cannot run in train mode");
      w = fused_;
    } else {
      w = modulate_kernel(tape, parent_, adapter_);
      if (adapter_.options.any_static()) KernelMeter::current().record(w.value());
    }
    Var in = x;
    if (dynamic_ && adapter_.fc1) in = mul(tape, x, channel_attention(tape, x, adapter_, mode));
    return conv2d(tape, in, w, geometry());
  }

 private:
  Var parent_;
  Adapter adapter_;
  std::size_t stride_;
  std::size_t padding_;
  Var fused_;
  bool dynamic_ = true;
};

inline Tensor child_forward(const Tensor& x, ChildConvLayer& child, Mode mode) {
  return child.forward(nullptr, Var(x), mode).value();
}

/// Same layer, but beta scales the input-channel slices of a per-sample
/// kernel instead of the feature map. Costs one kernel per sample.
inline Tensor child_forward_kernel_side(const Tensor& x, ChildConvLayer& child, Mode mode) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != child.in_channels())
    throw ShapeError("child conv expects " + std::to_string(child.in_channels()) +
                     " input channels, got " + shape_string(s));
  const Tensor w = child.fused_weight() ? *child.fused_weight()
                                        : modulate_kernel(nullptr, child.parent(), child.adapter()).value();
  const bool dynamic = child.dynamic_enabled() && child.adapter().fc1;
  Tensor beta;
  if (dynamic) beta = channel_attention(nullptr, Var(x), child.adapter(), mode).value();
  const std::size_t per_image = s[1] * s[2] * s[3];
  Tensor out;
  for (std::size_t b = 0; b < s[0]; ++b) {
    Tensor xb(Shape{1, s[1], s[2], s[3]},
              std::vector<double>(x.data() + b * per_image, x.data() + (b + 1) * per_image));
    Tensor wb = w;
    if (dynamic) {
      Tensor beta_b(Shape{1, s[1], 1, 1},
                    std::vector<double>(beta.data() + b * s[1], beta.data() + (b + 1) * s[1]));
      wb = mul_broadcast(w, beta_b);
    }
    Tensor yb = conv2d_im2col<double>(xb, wb, nullptr, child.geometry());
    if (out.empty()) {
      Shape os = yb.shape();
      os[0] = s[0];
      out = Tensor(os);
    }
    std::copy(yb.begin(), yb.end(), out.data() + b * yb.size());
  }
  return out;
}

}  // namespace kdna
