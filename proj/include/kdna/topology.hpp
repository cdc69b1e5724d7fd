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

// Stage layouts and network descriptions.
//
// A layout is a string over {F, S, -}: F is a conv that owns its kernel
// (a parent), S is a child that borrows one, and '-' closes a residual
// block. "FS-SF-SF" is three blocks of two convs each.

#include <algorithm>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "kdna/config.hpp"
#include "kdna/kerneldna.hpp"

namespace kdna {

struct StageLayout {
  std::string text;
  std::vector<char> slots;                 // 'F' or 'S', in forward order
  std::vector<std::size_t> block_lengths;  // convs per residual block

  std::size_t size() const noexcept { return slots.size(); }
  std::size_t blocks() const noexcept { return block_lengths.size(); }
  std::size_t parents() const { return static_cast<std::size_t>(std::count(slots.begin(), slots.end(), 'F')); }
  std::size_t children() const { return slots.size() - parents(); }
};

/// Grammar: ([FS]+)(-[FS]+)*, with at least one F.
inline StageLayout parse_layout(std::string_view s) {
  StageLayout out;
  out.text = std::string(s);
  if (s.empty()) throw ParseError("empty layout", 0);
  std::size_t run = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (c == 'F' || c == 'S') {
      out.slots.push_back(c);
      ++run;
    } else if (c == '-') {
      if (run == 0) throw ParseError("empty block in layout '" + out.text + "'", i);
      out.block_lengths.push_back(run);
      run = 0;
    } else {
      throw ParseError(std::string("illegal character '") + c + "' in layout '" + out.text + "'", i);
    }
  }
  if (run == 0) throw ParseError("empty block in layout '" + out.text + "'", s.size());
  out.block_lengths.push_back(run);
  if (out.parents() == 0) throw ParseError("layout '" + out.text + "' has no F slot", 0);
  return out;
}

/// Child slot -> parent slot. A child binds the nearest F after it, or
/// failing that the nearest F before it.
inline std::map<std::size_t, std::size_t> bind_children(const StageLayout& layout) {
  std::map<std::size_t, std::size_t> binding;
  const auto& s = layout.slots;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != 'S') continue;
    std::size_t target = s.size();
    for (std::size_t j = i + 1; j < s.size(); ++j)
      if (s[j] == 'F') {
        target = j;
        break;
      }
    if (target == s.size())
      for (std::size_t j = i; j-- > 0;)
        if (s[j] == 'F') {
          target = j;
          break;
        }
    binding.emplace(i, target);
  }
  return binding;
}

enum class Variant { adapter, copy, kernel_pool, batch_expanded };
enum class Stem { imagenet, cifar };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::adapter: return "adapter";
    case Variant::copy: return "copy";
    case Variant::kernel_pool: return "kernel_pool";
    case Variant::batch_expanded: return "batch_expanded";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "adapter") return Variant::adapter;
  if (s == "copy") return Variant::copy;
  if (s == "kernel_pool") return Variant::kernel_pool;
  if (s == "batch_expanded") return Variant::batch_expanded;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

inline std::string to_string(Stem s) { return s == Stem::imagenet ? "imagenet" : "cifar"; }

inline Stem parse_stem(std::string_view s) {
  if (s == "imagenet") return Stem::imagenet;
  if (s == "cifar") return Stem::cifar;
  throw ConfigError("unknown stem '" + std::string(s) + "'");
}

/// "channel,filter,spatial" style list; "none" disables all three.
inline std::string attention_string(const AdapterOptions& o) {
  std::string s;
  const auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  add(o.channel, "channel");
  add(o.filter, "filter");
  add(o.spatial, "spatial");
  return s.empty() ? "none" : s;
}

inline void parse_attention(std::string_view s, AdapterOptions& o) {
  o.channel = o.filter = o.spatial = false;
  if (s == "none") return;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string_view::npos) comma = s.size();
    const std::string_view item = detail::trim(s.substr(pos, comma - pos));
    if (item == "channel")
      o.channel = true;
    else if (item == "filter")
      o.filter = true;
    else if (item == "spatial")
      o.spatial = true;
    else
      throw ConfigError("unknown attention '" + std::string(item) + "'");
    pos = comma + 1;
  }
}

struct StageSpec {
  std::string layout;
  std::size_t channels = 64;
  std::size_t stride = 1;
  std::string block = "basic";
};

struct TopologySpec {
  std::string name = "custom";
  std::size_t input_channels = 3;
  std::size_t input_size = 224;
  std::size_t num_classes = 1000;
  Stem stem = Stem::imagenet;
  std::size_t stem_channels = 64;
  Variant variant = Variant::adapter;
  AdapterOptions adapter;
  std::size_t pool_size = 4;  // kernels per layer for the two dynamic baselines
  std::vector<StageSpec> stages;

  /// Checks everything that does not need weights. Model construction
  /// repeats the shape checks that depend on the binding.
  void validate() const {
    if (stages.empty()) throw ConfigError("topology has no stages");
    if (input_channels == 0 || input_size == 0 || num_classes == 0 || stem_channels == 0)
      throw ConfigError("input channels, input size, class count and stem width must be positive");
    if (adapter.reduction == 0) throw ConfigError("channel reduction ratio must be positive");
    if ((variant == Variant::kernel_pool || variant == Variant::batch_expanded) && pool_size == 0)
      throw ConfigError("pool_size must be positive");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& st = stages[i];
      parse_layout(st.layout);
      if (st.channels == 0) throw ConfigError("stage " + std::to_string(i + 1) + " has zero channels");
      if (st.stride == 0) throw ConfigError("stage " + std::to_string(i + 1) + " has zero stride");
      if (st.block != "basic")
        throw ConfigError("stage " + std::to_string(i + 1) + ": unsupported block kind '" + st.block + "'");
    }
  }
};

/// Every S becomes an independent F.
inline TopologySpec variant_expand(TopologySpec spec) {
  for (auto& st : spec.stages) std::replace(st.layout.begin(), st.layout.end(), 'S', 'F');
  spec.variant = Variant::adapter;
  spec.name += "+expand";
  return spec;
}

/// Every S applies its parent's kernel verbatim.
inline TopologySpec variant_copy(TopologySpec spec) {
  spec.variant = Variant::copy;
  spec.name += "+copy";
  return spec;
}

// Presets ------------------------------------------------------------------

namespace detail {

inline TopologySpec resnet18(std::string name, std::string stage3, std::string stage4) {
  TopologySpec t;
  t.name = std::move(name);
  t.stages = {{"FF-FF", 64, 1, "basic"},
              {"FF-FF", 128, 2, "basic"},
              {std::move(stage3), 256, 2, "basic"},
              {std::move(stage4), 512, 2, "basic"}};
  return t;
}

inline TopologySpec tiny(std::string name, std::size_t input_channels, std::size_t input_size,
                         std::size_t w1, std::size_t w2, std::size_t w3, std::string layout) {
  TopologySpec t;
  t.name = std::move(name);
  t.input_channels = input_channels;
  t.input_size = input_size;
  t.num_classes = 10;
  t.stem = Stem::cifar;
  t.stem_channels = w1;
  t.stages = {{layout, w1, 1, "basic"}, {layout, w2, 2, "basic"}, {layout, w3, 2, "basic"}};
  return t;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"resnet18-orig",     "resnet18-kdna",     "resnet18-copy",       "resnet18-expand",
          "resnet18-ff-fff",   "resnet18-ff-ff-ff", "resnet18-fs-fsf",     "resnet18-fs-ssf",
          "tiny-cifar",        "tiny-cifar-orig",   "tiny-cifar-copy",     "tiny-cifar-expand",
          "tiny-cifar-pool",   "tiny-cifar-dynamic", "tiny-toy",           "tiny-toy-orig",
          "tiny-toy-copy",     "tiny-toy-expand"};
}

/// Named configurations. The resnet18 family keeps the first two stages in
/// the original layout and varies stages three and four.
inline TopologySpec preset(std::string_view name) {
  const std::string n(name);
  if (n == "resnet18-orig" || n == "resnet18-imagenet") return detail::resnet18(n, "FF-FF", "FF-FF");
  if (n == "resnet18-kdna" || n == "resnet18-fs-sf-sf") return detail::resnet18(n, "FS-SF-SF", "FS-SF-SF");
  if (n == "resnet18-copy") {
    auto t = detail::resnet18(n, "FS-SF-SF", "FS-SF-SF");
    t.variant = Variant::copy;
    return t;
  }
  if (n == "resnet18-expand" || n == "resnet18-ff-fff") return detail::resnet18(n, "FF-FFF", "FF-FFF");
  if (n == "resnet18-ff-ff-ff") return detail::resnet18(n, "FF-FF-FF", "FF-FF-FF");
  if (n == "resnet18-fs-fsf") return detail::resnet18(n, "FS-FSF", "FS-FSF");
  if (n == "resnet18-fs-ssf") return detail::resnet18(n, "FS-SSF", "FS-SSF");

  const bool cifar = n.rfind("tiny-cifar", 0) == 0;
  const bool toy = n.rfind("tiny-toy", 0) == 0;
  if (cifar || toy) {
    const std::string base = cifar ? "tiny-cifar" : "tiny-toy";
    const std::string suffix = n.substr(base.size());
    auto make = [&](const std::string& layout) {
      return cifar ? detail::tiny(n, 3, 32, 16, 32, 64, layout) : detail::tiny(n, 1, 16, 8, 16, 32, layout);
    };
    if (suffix.empty()) return make("FS-SF-SF");
    if (suffix == "-orig") return make("FF-FF");
    if (suffix == "-copy") {
      auto t = make("FS-SF-SF");
      t.variant = Variant::copy;
      return t;
    }
    if (suffix == "-expand") return make("FF-FF-FF");
    if (suffix == "-pool" || suffix == "-dynamic") {
      auto t = make("FF-FF-FF");
      t.variant = suffix == "-pool" ? Variant::kernel_pool : Variant::batch_expanded;
      return t;
    }
  }
  throw ConfigError("unknown preset '" + n + "'");
}

// Config file round trip ----------------------------------------------------

inline TopologySpec topology_from_ini(const IniDocument& doc) {
  const IniSection* m = doc.first("model");
  if (!m) throw ConfigError("config has no [model] section");
  TopologySpec t;
  t.name = m->get("name", "custom");
  t.input_channels = m->number<std::size_t>("input_channels", t.input_channels);
  t.input_size = m->number<std::size_t>("input_size", t.input_size);
  t.num_classes = m->number<std::size_t>("num_classes", t.num_classes);
  t.stem = parse_stem(m->get("stem", "imagenet"));
  t.stem_channels = m->number<std::size_t>("stem_channels", t.stem_channels);
  t.variant = parse_variant(m->get("variant", "adapter"));
  t.adapter.reduction = m->number<std::size_t>("reduction", 4);
  parse_attention(m->get("attention", "channel,filter,spatial"), t.adapter);
  t.pool_size = m->number<std::size_t>("pool_size", t.pool_size);
  for (const IniSection* s : doc.all("stage")) {
    StageSpec st;
    st.layout = s->require("layout");
    st.channels = s->require_number<std::size_t>("channels");
    st.stride = s->number<std::size_t>("stride", 1);
    st.block = s->get("block", "basic");
    t.stages.push_back(std::move(st));
  }
  t.validate();
  return t;
}

inline IniDocument topology_to_ini(const TopologySpec& t) {
  IniDocument doc;
  IniSection m{"model", {}};
  m.set("name", t.name);
  m.set("input_channels", std::to_string(t.input_channels));
  m.set("input_size", std::to_string(t.input_size));
  m.set("num_classes", std::to_string(t.num_classes));
  m.set("stem", to_string(t.stem));
  m.set("stem_channels", std::to_string(t.stem_channels));
  m.set("variant", to_string(t.variant));
  m.set("reduction", std::to_string(t.adapter.reduction));
  m.set("attention", attention_string(t.adapter));
  m.set("pool_size", std::to_string(t.pool_size));
  doc.sections.push_back(std::move(m));
  for (const auto& st : t.stages) {
    IniSection s{"stage", {}};
    s.set("layout", st.layout);
    s.set("channels", std::to_string(st.channels));
    s.set("stride", std::to_string(st.stride));
    s.set("block", st.block);
    doc.sections.push_back(std::move(s));
  }
  return doc;
}

}  // namespace kdna
