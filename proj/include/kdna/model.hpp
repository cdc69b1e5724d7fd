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

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "kdna/baselines.hpp"
#include "kdna/topology.hpp"

namespace kdna {

/// Receives post-activation feature maps of every stage conv, labelled by
/// the conv's name. Only called on eval-style forwards the caller asks for.
using ProbeSink = std::function<void(const std::string& label, const Tensor& activation)>;

/// One conv slot of a stage followed by its own BatchNorm.
struct ConvUnit {
  using Op = std::variant<Conv2dLayer, ChildConvLayer, KernelPoolConv, BatchExpandedDynConv>;

  std::string name;    // "stage3.conv2"
  std::string parent;  // bound parent's name, children only
  Op op;
  BatchNormLayer bn;

  bool is_child() const { return std::holds_alternative<ChildConvLayer>(op); }
  ChildConvLayer* child() { return std::get_if<ChildConvLayer>(&op); }
  const ChildConvLayer* child() const { return std::get_if<ChildConvLayer>(&op); }

  std::size_t in_channels() const {
    return std::visit([](const auto& l) { return l.in_channels(); }, op);
  }
  std::size_t out_channels() const {
    return std::visit([](const auto& l) { return l.out_channels(); }, op);
  }
  std::size_t kernel() const {
    return std::visit([](const auto& l) { return l.kernel(); }, op);
  }
  ConvGeometry geometry() const {
    return std::visit(
        [](const auto& l) -> ConvGeometry {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2dLayer> || std::is_same_v<L, ChildConvLayer>)
            return l.geometry();
          else
            return {l.stride, l.padding, 1};
        },
        op);
  }

  Var conv(Tape* tape, const Var& x, Mode mode) {
    return std::visit(
        [&](auto& l) -> Var {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2dLayer>)
            return l.forward(tape, x);
          else
            return l.forward(tape, x, mode);
        },
        op);
  }

  void collect(std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2dLayer>)
            params.push_back({name + ".weight", l.weight, true});
          else if constexpr (std::is_same_v<L, ChildConvLayer>)
            l.adapter().collect(name + ".adapter", params, buffers);
          else
            l.collect(name, params);
        },
        op);
    bn.collect(name + ".bn", params, buffers);
  }
};

struct ResidualBlock {
  std::string name;  // "stage3.block1"
  std::vector<ConvUnit> convs;
  std::optional<Conv2dLayer> down;
  BatchNormLayer down_bn;
};

struct Stage {
  std::string name;
  StageLayout layout;
  std::vector<ResidualBlock> blocks;
};

struct ChildRef {
  std::string name;
  std::string parent;
  std::size_t stage = 0;  // zero-based
  ChildConvLayer* layer = nullptr;
};

/// Residual CNN built from a TopologySpec: stem, stages of basic blocks,
/// global average pool, linear head. Parameters live in Vars, so copying a
/// Model would alias its weights; models are move-only.
class Model {
 public:
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  static Model build(const TopologySpec& spec, std::uint64_t seed = 0) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    std::mt19937_64 rng(seed);
    if (spec.stem == Stem::imagenet)
      m.stem_ = Conv2dLayer::make(spec.input_channels, spec.stem_channels, 7, 2, 3, rng);
    else
      m.stem_ = Conv2dLayer::make(spec.input_channels, spec.stem_channels, 3, 1, 1, rng);
    m.stem_bn_ = BatchNormLayer::make(spec.stem_channels);

    std::size_t c_prev = spec.stem_channels;
    for (std::size_t si = 0; si < spec.stages.size(); ++si) {
      m.stages_.push_back(build_stage(spec, si, c_prev, rng));
      c_prev = spec.stages[si].channels;
    }
    m.fc_ = LinearLayer::make(c_prev, spec.num_classes, rng, true);
    return m;
  }

  const TopologySpec& spec() const noexcept { return spec_; }
  Mode mode() const noexcept { return mode_; }
  const std::vector<Stage>& stages() const noexcept { return stages_; }
  std::vector<Stage>& stages() noexcept { return stages_; }
  const Conv2dLayer& stem() const noexcept { return stem_; }
  const LinearLayer& head() const noexcept { return fc_; }

  /// Entering train mode drops fused caches: alpha is about to change.
  void set_mode(Mode m) {
    if (m == Mode::train) clear_fused();
    mode_ = m;
  }

  void fuse_static() {
    if (mode_ != Mode::eval) throw StateError("fuse_static requires eval mode");
    for (auto& c : children()) c.layer->fuse_static(mode_);
  }

  void clear_fused() {
    for (auto& c : children()) c.layer->clear_fused();
  }

  bool fused() const {
    for (const auto& st : stages_)
      for (const auto& b : st.blocks)
        for (const auto& u : b.convs)
          if (const auto* c = u.child(); c && c->fused_weight()) return true;
    return false;
  }

  void set_dynamic(bool on) {
    for (auto& c : children()) on ? c.layer->enable_dynamic() : c.layer->disable_dynamic();
  }

  std::vector<ChildRef> children() {
    std::vector<ChildRef> out;
    for (std::size_t si = 0; si < stages_.size(); ++si)
      for (auto& b : stages_[si].blocks)
        for (auto& u : b.convs)
          if (auto* c = u.child()) out.push_back({u.name, u.parent, si, c});
    return out;
  }

  /// Every trainable slot, each shared parent exactly once.
  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    collect(params, buffers);
    return params;
  }

  std::vector<NamedBuffer> buffers() {
    std::vector<NamedParam> params;
    std::vector<NamedBuffer> buffers;
    collect(params, buffers);
    return buffers;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    std::unordered_set<const void*> seen;
    for (const auto& p : parameters())
      if (seen.insert(p.var.id()).second) n += p.var.value().size();
    return n;
  }

  /// Names of the probed stage convs, in forward order.
  std::vector<std::string> probe_labels() const {
    std::vector<std::string> out;
    for (const auto& st : stages_)
      for (const auto& b : st.blocks)
        for (const auto& u : b.convs)
          if (u.kernel() == 3) out.push_back(u.name);
    return out;
  }

  Var forward(Tape* tape, const Var& x, const ProbeSink* probe = nullptr) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != spec_.input_channels)
      throw ShapeError("model expects input [b," + std::to_string(spec_.input_channels) +
                       ",h,w], got " + shape_string(s));
    Var h = stem_.forward(tape, x);
    h = relu(tape, stem_bn_.forward(tape, h, mode_));
    if (spec_.stem == Stem::imagenet) h = max_pool2d(tape, h, 3, 2, 1);
    for (auto& st : stages_)
      for (auto& b : st.blocks) h = block_forward(tape, b, h, probe);
    const std::size_t c = h.shape()[1];
    Var pooled = reshape(tape, global_avg_pool(tape, h), {s[0], c});
    return fc_.forward(tape, pooled);
  }

  Tensor predict(const Tensor& x, const ProbeSink* probe = nullptr) {
    return forward(nullptr, Var(x), probe).value();
  }

 private:
  Model() = default;

  static Stage build_stage(const TopologySpec& spec, std::size_t si, std::size_t c_in,
                           std::mt19937_64& rng) {
    const StageSpec& ss = spec.stages[si];
    Stage stage;
    stage.name = "stage" + std::to_string(si + 1);
    stage.layout = parse_layout(ss.layout);
    const auto binding = bind_children(stage.layout);
    const std::size_t n = stage.layout.size(), c = ss.channels;
    const auto slot_name = [&](std::size_t i) { return stage.name + ".conv" + std::to_string(i + 1); };
    const auto slot_in = [&](std::size_t i) { return i == 0 ? c_in : c; };
    const auto slot_stride = [&](std::size_t i) { return i == 0 ? ss.stride : std::size_t{1}; };
    const bool baseline = spec.variant == Variant::kernel_pool || spec.variant == Variant::batch_expanded;

    std::vector<std::optional<ConvUnit>> units(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (stage.layout.slots[i] != 'F') continue;
      ConvUnit u;
      u.name = slot_name(i);
      if (spec.variant == Variant::kernel_pool)
        u.op = KernelPoolConv::make(spec.pool_size, slot_in(i), c, 3, slot_stride(i), 1, rng,
                                    spec.adapter.reduction);
      else if (spec.variant == Variant::batch_expanded)
        u.op = BatchExpandedDynConv::make(spec.pool_size, slot_in(i), c, 3, slot_stride(i), 1, rng,
                                          spec.adapter.reduction);
      else
        u.op = Conv2dLayer::make(slot_in(i), c, 3, slot_stride(i), 1, rng);
      u.bn = BatchNormLayer::make(c);
      units[i] = std::move(u);
    }
    for (const auto& [i, p] : binding) {
      if (baseline)
        throw ConfigError(stage.name + ": variant " + to_string(spec.variant) +
                          " needs a layout without S slots");
      if (slot_stride(i) != 1)
        throw ConfigError(slot_name(i) + " changes resolution and must be an F slot");
      if (slot_in(i) != slot_in(p))
        throw ConfigError(slot_name(i) + " takes " + std::to_string(slot_in(i)) +
                          " channels but its parent " + slot_name(p) + " takes " +
                          std::to_string(slot_in(p)));
      AdapterOptions opts = spec.adapter;
      if (spec.variant == Variant::copy) opts.channel = opts.filter = opts.spatial = false;
      const Var& parent_w = std::get<Conv2dLayer>(units[p]->op).weight;
      ConvUnit u{slot_name(i), slot_name(p),
                 ChildConvLayer(parent_w, Adapter::make(slot_in(i), c, 3, opts, rng), 1, 1),
                 BatchNormLayer::make(c)};
      units[i] = std::move(u);
    }

    std::size_t slot = 0;
    for (std::size_t bi = 0; bi < stage.layout.blocks(); ++bi) {
      ResidualBlock block;
      block.name = stage.name + ".block" + std::to_string(bi + 1);
      const std::size_t first = slot;
      for (std::size_t j = 0; j < stage.layout.block_lengths[bi]; ++j, ++slot)
        block.convs.push_back(std::move(*units[slot]));
      if (slot_in(first) != c || slot_stride(first) != 1) {
        block.down = Conv2dLayer::make(slot_in(first), c, 1, slot_stride(first), 0, rng);
        block.down_bn = BatchNormLayer::make(c);
      }
      stage.blocks.push_back(std::move(block));
    }
    return stage;
  }

  Var block_forward(Tape* tape, ResidualBlock& b, const Var& x, const ProbeSink* probe) {
    Var h = x;
    const std::size_t last = b.convs.size() - 1;
    for (std::size_t i = 0; i < b.convs.size(); ++i) {
      auto& u = b.convs[i];
      h = u.bn.forward(tape, u.conv(tape, h, mode_), mode_);
      if (i == last) break;
      h = relu(tape, h);
      if (probe && u.kernel() == 3) (*probe)(u.name, h.value());
    }
    Var shortcut = x;
    if (b.down) shortcut = b.down_bn.forward(tape, b.down->forward(tape, x), mode_);
    Var out = relu(tape, add(tape, h, shortcut));
    if (probe && b.convs[last].kernel() == 3) (*probe)(b.convs[last].name, out.value());
    return out;
  }

  void collect(std::vector<NamedParam>& params, std::vector<NamedBuffer>& buffers) {
    params.push_back({"stem.conv.weight", stem_.weight, true});
    stem_bn_.collect("stem.bn", params, buffers);
    for (auto& st : stages_)
      for (auto& b : st.blocks) {
        for (auto& u : b.convs) u.collect(params, buffers);
        if (b.down) {
          params.push_back({b.name + ".down.weight", b.down->weight, true});
          b.down_bn.collect(b.name + ".down.bn", params, buffers);
        }
      }
    params.push_back({"fc.weight", fc_.weight, true});
    params.push_back({"fc.bias", fc_.bias, true});
  }

  TopologySpec spec_;
  Mode mode_ = Mode::train;
  Conv2dLayer stem_;
  BatchNormLayer stem_bn_;
  std::vector<Stage> stages_;
  LinearLayer fc_;
};

}  // namespace kdna
