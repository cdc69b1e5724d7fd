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
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "kdna/model.hpp"

namespace kdna {

/// Multiply-accumulates of a plain ResNet18 (convs plus the classifier) at
/// 224x224. Published FLOP figures for that network are 1.82 G, i.e. they
/// count one operation per MAC (plus rounding). The calibration maps our
/// 2*MAC convention onto that scale, and is applied to every model alike.
inline constexpr std::uint64_t kResNet18Macs224 = 1'814'073'344ULL;
inline constexpr double kFlopCalibration = 1.82e9 / (2.0 * static_cast<double>(kResNet18Macs224));

struct ModuleCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;

  double flops() const { return 2.0 * static_cast<double>(macs) * kFlopCalibration; }
};

struct CostReport {
  std::string model;
  std::size_t resolution = 0;
  std::vector<ModuleCost> modules;  // stem, stage1..N, fc
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;

  double total_flops() const { return 2.0 * static_cast<double>(total_macs) * kFlopCalibration; }
};

namespace detail {

inline std::uint64_t conv_macs(std::size_t c_out, std::size_t c_in_per_group, std::size_t k,
                               std::size_t ho, std::size_t wo) {
  return static_cast<std::uint64_t>(c_out) * c_in_per_group * k * k * ho * wo;
}

/// MACs of one stage conv, including whatever small networks it runs to
/// produce its kernel or its attention.
inline std::uint64_t unit_macs(const ConvUnit& u, std::size_t ho, std::size_t wo) {
  const std::size_t ci = u.in_channels(), co = u.out_channels(), k = u.kernel();
  std::uint64_t macs = conv_macs(co, ci, k, ho, wo);
  if (const auto* c = u.child()) {
    const Adapter& a = c->adapter();
    if (a.fc1 && c->dynamic_enabled()) macs += 2ULL * ci * a.fc1.shape()[0];
  } else if (const auto* p = std::get_if<KernelPoolConv>(&u.op)) {
    const std::size_t hid = p->router_fc1.shape()[0], n = p->pool_size();
    macs += static_cast<std::uint64_t>(ci) * hid + hid * n + n * p->kernel_elements();
  } else if (const auto* d = std::get_if<BatchExpandedDynConv>(&u.op)) {
    const std::size_t hid = d->trunk.shape()[0], n = d->pool_size();
    const std::uint64_t kel = static_cast<std::uint64_t>(co) * ci * k * k;
    macs += static_cast<std::uint64_t>(ci) * hid + hid * (n + co + ci + k * k) + 2 * n * kel;
  }
  return macs;
}

inline std::string module_of(const std::string& param_name) {
  return param_name.substr(0, param_name.find('.'));
}

}  // namespace detail

/// Parameters (shared parents counted once) and MACs for one forward of a
/// single image at `resolution` x `resolution`.
inline CostReport count_costs(Model& model, std::size_t resolution) {
  const TopologySpec& spec = model.spec();
  CostReport r;
  r.model = spec.name;
  r.resolution = resolution;
  const auto module_index = [&](const std::string& name) -> ModuleCost& {
    for (auto& m : r.modules)
      if (m.name == name) return m;
    r.modules.push_back({name, 0, 0});
    return r.modules.back();
  };
  module_index("stem");
  for (const auto& st : model.stages()) module_index(st.name);
  module_index("fc");

  std::unordered_set<const void*> seen;
  for (const auto& p : model.parameters())
    if (seen.insert(p.var.id()).second) module_index(detail::module_of(p.name)).params += p.var.value().size();

  const Conv2dLayer& stem = model.stem();
  std::size_t h = conv_output_extent(resolution, stem.kernel(), stem.stride, stem.padding);
  module_index("stem").macs += detail::conv_macs(stem.out_channels(), stem.in_channels(), stem.kernel(), h, h);
  if (spec.stem == Stem::imagenet) h = conv_output_extent(h, 3, 2, 1);

  for (const auto& st : model.stages()) {
    ModuleCost& mc = module_index(st.name);
    for (const auto& b : st.blocks) {
      const std::size_t block_in = h;
      for (const auto& u : b.convs) {
        const auto g = u.geometry();
        h = conv_output_extent(h, u.kernel(), g.stride, g.padding);
        mc.macs += detail::unit_macs(u, h, h);
      }
      if (b.down) {
        const std::size_t hd = conv_output_extent(block_in, 1, b.down->stride, 0);
        mc.macs += detail::conv_macs(b.down->out_channels(), b.down->in_channels(), 1, hd, hd);
      }
    }
  }
  const Shape& fw = model.head().weight.shape();
  module_index("fc").macs += static_cast<std::uint64_t>(fw[0]) * fw[1];

  for (const auto& m : r.modules) {
    r.total_params += m.params;
    r.total_macs += m.macs;
  }
  return r;
}

/// CSV with columns name,params,flops; one row per module and a total row.
inline void write_cost_csv(std::ostream& out, const CostReport& r) {
  out << "name,params,flops\n";
  const auto flops = [](double f) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(0) << f;
    return s.str();
  };
  for (const auto& m : r.modules) out << m.name << ',' << m.params << ',' << flops(m.flops()) << '\n';
  out << "total," << r.total_params << ',' << flops(r.total_flops()) << '\n';
}

}  // namespace kdna
