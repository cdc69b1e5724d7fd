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

#include <gtest/gtest.h>

#include <numeric>

#include "kdna/cost.hpp"
#include "support.hpp"

using namespace kdna;
using kdna::testing::random_tensor;
using kdna::testing::rel_error;

namespace {

TopologySpec one_stage(std::string layout, std::size_t channels = 16) {
  TopologySpec t;
  t.name = "probe";
  t.input_channels = 3;
  t.input_size = 8;
  t.num_classes = 4;
  t.stem = Stem::cifar;
  t.stem_channels = channels;
  t.stages = {{std::move(layout), channels, 1, "basic"}};
  return t;
}

std::uint64_t params_of(const TopologySpec& t) {
  Model m = Model::build(t, 1);
  return count_costs(m, t.input_size).total_params;
}

std::uint64_t macs_of(const TopologySpec& t) {
  Model m = Model::build(t, 1);
  return count_costs(m, t.input_size).total_macs;
}

// Brute force reading of the binding rule: scan right for F, then left.
std::map<std::size_t, std::size_t> enumerate_binding(const std::string& flat) {
  std::map<std::size_t, std::size_t> out;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] != 'S') continue;
    std::optional<std::size_t> fwd, back;
    for (std::size_t j = 0; j < flat.size(); ++j) {
      if (flat[j] != 'F') continue;
      if (j > i && (!fwd || j < *fwd)) fwd = j;
      if (j < i && (!back || j > *back)) back = j;
    }
    out[i] = fwd ? *fwd : *back;
  }
  return out;
}

}  // namespace

TEST(Layout, OriginalStage) {
  const auto l = parse_layout("FF-FF");
  EXPECT_EQ(l.size(), 4u);
  EXPECT_EQ(l.parents(), 4u);
  EXPECT_EQ(l.blocks(), 2u);
}

TEST(Layout, SharedStage) {
  const auto l = parse_layout("FS-SF-SF");
  EXPECT_EQ(std::string(l.slots.begin(), l.slots.end()), "FSSFSF");
  EXPECT_EQ(l.block_lengths, (std::vector<std::size_t>{2, 2, 2}));
  EXPECT_EQ(l.parents(), 3u);
  EXPECT_EQ(l.children(), 3u);
}

TEST(Layout, SingleParent) {
  const auto l = parse_layout("F");
  EXPECT_EQ(l.size(), 1u);
  EXPECT_EQ(l.blocks(), 1u);
}

TEST(Layout, ErrorsCarryPosition) {
  const std::vector<std::pair<std::string, std::size_t>> bad = {
      {"", 0}, {"FX", 1}, {"F--F", 2}, {"-F", 0}, {"FF-", 3}, {"SS-S", 0}, {"ff", 0}};
  for (const auto& [text, pos] : bad) {
    try {
      parse_layout(text);
      ADD_FAILURE() << "accepted '" << text << "'";
    } catch (const ParseError& e) {
      EXPECT_EQ(e.position(), pos) << text;
    }
  }
}

TEST(Binding, SharedStageHandWorked) {
  const auto b = bind_children(parse_layout("FS-SF-SF"));
  // zero-based: slots 1,2 -> 3 and slot 4 -> 5
  EXPECT_EQ(b, (std::map<std::size_t, std::size_t>{{1, 3}, {2, 3}, {4, 5}}));
}

TEST(Binding, FallbackAndEmpty) {
  EXPECT_EQ(bind_children(parse_layout("FS")), (std::map<std::size_t, std::size_t>{{1, 0}}));
  EXPECT_TRUE(bind_children(parse_layout("FF")).empty());
}

TEST(Binding, MatchesEnumerationOverAllShortLayouts) {
  int checked = 0;
  for (std::size_t len = 1; len <= 7; ++len)
    for (std::size_t mask = 0; mask < (1u << len); ++mask) {
      std::string flat;
      for (std::size_t i = 0; i < len; ++i) flat += (mask >> i & 1u) ? 'S' : 'F';
      if (flat.find('F') == std::string::npos) continue;
      const auto b = bind_children(parse_layout(flat));
      EXPECT_EQ(b, enumerate_binding(flat)) << flat;
      for (const auto& [c, p] : b) EXPECT_EQ(flat[p], 'F');
      ++checked;
    }
  EXPECT_EQ(checked, 247);
}

TEST(Presets, AllBuildAndValidate) {
  for (const auto& n : preset_names()) {
    const TopologySpec t = preset(n);
    EXPECT_NO_THROW(t.validate()) << n;
    if (n.rfind("tiny", 0) == 0) {
      EXPECT_NO_THROW(Model::build(t)) << n;
    }
  }
  EXPECT_THROW(preset("resnet34"), ConfigError);
}

TEST(Presets, ResNet18FamilyShapes) {
  const auto t = preset("resnet18-kdna");
  ASSERT_EQ(t.stages.size(), 4u);
  EXPECT_EQ(t.stages[0].layout, "FF-FF");
  EXPECT_EQ(t.stages[2].layout, "FS-SF-SF");
  EXPECT_EQ(t.stages[3].channels, 512u);
  EXPECT_EQ(t.num_classes, 1000u);
}

TEST(Model, ChildrenBindDeclaredParents) {
  Model m = Model::build(preset("tiny-toy"), 3);
  const auto kids = m.children();
  ASSERT_EQ(kids.size(), 9u);
  std::map<std::string, const void*> weights;
  for (const auto& st : m.stages())
    for (const auto& b : st.blocks)
      for (const auto& u : b.convs)
        if (const auto* c = std::get_if<Conv2dLayer>(&u.op)) weights[u.name] = c->weight.id();
  for (const auto& k : kids) {
    ASSERT_TRUE(weights.count(k.parent)) << k.parent;
    EXPECT_EQ(k.layer->parent().id(), weights[k.parent]) << k.name;
  }
  EXPECT_EQ(kids[0].name, "stage1.conv2");
  EXPECT_EQ(kids[0].parent, "stage1.conv4");
  EXPECT_EQ(kids[2].parent, "stage1.conv6");
}

TEST(Model, StridedChildIsConfigError) {
  TopologySpec t = one_stage("SF");
  t.stages[0].stride = 2;
  EXPECT_THROW(Model::build(t), ConfigError);
}

TEST(Model, BaselineVariantRejectsChildren) {
  TopologySpec t = one_stage("FS");
  t.variant = Variant::kernel_pool;
  EXPECT_THROW(Model::build(t), ConfigError);
}

TEST(Model, ValidateRejectsBadFields) {
  TopologySpec t = one_stage("FF");
  t.stages[0].block = "bottleneck";
  EXPECT_THROW(t.validate(), ConfigError);
  t = one_stage("FF");
  t.stages[0].channels = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = one_stage("FF");
  t.stages.clear();
  EXPECT_THROW(t.validate(), ConfigError);
  t = one_stage("FF");
  t.adapter.reduction = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Cost, TotalIsSumOfParts) {
  for (const char* n : {"resnet18-orig", "resnet18-kdna", "tiny-cifar", "tiny-cifar-pool"}) {
    Model m = Model::build(preset(n));
    const auto r = count_costs(m, preset(n).input_size);
    std::uint64_t p = 0, f = 0;
    for (const auto& mc : r.modules) {
      p += mc.params;
      f += mc.macs;
    }
    EXPECT_EQ(p, r.total_params) << n;
    EXPECT_EQ(f, r.total_macs) << n;
    EXPECT_EQ(p, m.parameter_count()) << n;
  }
}

TEST(Cost, PlainResNet18CalibratesToPublishedFlops) {
  Model m = Model::build(preset("resnet18-orig"));
  const auto r = count_costs(m, 224);
  EXPECT_EQ(r.total_macs, kResNet18Macs224);
  EXPECT_NEAR(r.total_flops(), 1.82e9, 1e3);
  EXPECT_NEAR(static_cast<double>(r.total_params), 11.69e6, 0.005 * 11.69e6);
}

// Hand count for a single plain conv stage on a 3x8x8 input with width 16.
TEST(Cost, HandCountedSmallModel) {
  const TopologySpec t = one_stage("F");
  Model m = Model::build(t);
  const auto r = count_costs(m, 8);
  const std::uint64_t stem = 16 * 3 * 9 + 2 * 16, stage = 16 * 16 * 9 + 2 * 16, fc = 16 * 4 + 4;
  EXPECT_EQ(r.total_params, stem + stage + fc);
  EXPECT_EQ(r.total_macs, 16u * 3 * 9 * 64 + 16u * 16 * 9 * 64 + 16 * 4);
}

TEST(Cost, SharingDeduplicates) {
  for (const auto& [fs, ff] : std::vector<std::pair<std::string, std::string>>{
           {"FS", "FF"}, {"FS-SF-SF", "FF-FF-FF"}, {"FS-SSF", "FF-FFF"}, {"SF", "FF"}}) {
    EXPECT_LT(params_of(one_stage(fs)), params_of(one_stage(ff))) << fs;
    TopologySpec copy = one_stage(fs);
    copy.variant = Variant::copy;
    EXPECT_LT(params_of(copy), params_of(one_stage(ff))) << fs;
  }
}

TEST(Cost, AdapterOverheadFormula) {
  for (std::size_t r : {1u, 2u, 4u, 8u, 16u}) {
    TopologySpec kd = preset("resnet18-kdna");
    kd.adapter.reduction = r;
    TopologySpec cp = kd;
    cp.variant = Variant::copy;
    std::uint64_t formula = 0;
    Model m = Model::build(kd);
    for (const auto& c : m.children()) {
      const std::uint64_t ci = c.layer->in_channels(), co = c.layer->out_channels(), k = c.layer->kernel();
      const std::uint64_t hid = (ci + r - 1) / r;
      formula += 2 * ci * hid + 2 * hid + co + k * k;
    }
    EXPECT_EQ(params_of(kd) - params_of(cp), formula) << "r=" << r;
  }
}

TEST(Cost, AddingChildAddsConvAndMlpMacs) {
  for (std::size_t c : {8u, 16u, 32u}) {
    const std::uint64_t before = macs_of(one_stage("FF-FF", c));
    const std::uint64_t after = macs_of(one_stage("FF-FFS", c));
    const std::uint64_t hid = c / 4;
    EXPECT_EQ(after - before, c * c * 9 * 64 + 2 * c * hid) << c;
  }
  Model orig = Model::build(preset("resnet18-orig")), kd = Model::build(preset("resnet18-kdna"));
  EXPECT_GT(count_costs(kd, 224).total_flops(), count_costs(orig, 224).total_flops());
}

TEST(Cost, CsvRowsAndTotal) {
  Model m = Model::build(preset("tiny-toy"));
  const auto r = count_costs(m, 16);
  std::ostringstream out;
  write_cost_csv(out, r);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "name,params,flops");
  std::vector<std::string> names;
  std::uint64_t sum = 0, total = 0;
  while (std::getline(in, line)) {
    const auto a = line.find(','), b = line.find(',', a + 1);
    names.push_back(line.substr(0, a));
    const std::uint64_t p = std::stoull(line.substr(a + 1, b - a - 1));
    (names.back() == "total" ? total : sum) += p;
  }
  EXPECT_EQ(names, (std::vector<std::string>{"stem", "stage1", "stage2", "stage3", "fc", "total"}));
  EXPECT_EQ(sum, total);
  EXPECT_EQ(total, r.total_params);
}

TEST(Variants, ExpandHasNoSharing) {
  const TopologySpec e = variant_expand(preset("tiny-cifar"));
  EXPECT_EQ(e.stages[0].layout, "FF-FF-FF");
  Model m = Model::build(e);
  EXPECT_TRUE(m.children().empty());
  std::set<const void*> ids;
  for (const auto& p : m.parameters()) EXPECT_TRUE(ids.insert(p.var.id()).second) << p.name;
  EXPECT_EQ(params_of(e), params_of(preset("tiny-cifar-expand")));
}

// Copy children apply the parent kernel verbatim: compare against a direct conv.
TEST(Variants, CopyAppliesParentKernelVerbatim) {
  TopologySpec t = variant_copy(one_stage("FS-SF", 8));
  Model m = Model::build(t, 4);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 8, 6, 6}, rng);
  for (auto& b : m.stages()[0].blocks)
    for (auto& u : b.convs) {
      const auto* c = u.child();
      if (!c) continue;
      const Tensor got = u.conv(nullptr, Var(x), Mode::train).value();
      const Tensor want = conv2d_direct<double>(x, c->parent().value(), nullptr, {1, 1, 1});
      EXPECT_LE(rel_error(got, want), 1e-12) << u.name;
    }
  std::vector<NamedParam> ps = m.parameters();
  for (const auto& p : ps) EXPECT_EQ(p.name.find("adapter"), std::string::npos) << p.name;
}

TEST(Ini, RoundTrip) {
  TopologySpec t = preset("tiny-cifar-pool");
  t.adapter.reduction = 8;
  t.adapter.spatial = false;
  const TopologySpec back = topology_from_ini(parse_ini(to_ini(topology_to_ini(t))));
  EXPECT_EQ(back.name, t.name);
  EXPECT_EQ(back.variant, t.variant);
  EXPECT_EQ(back.stem, t.stem);
  EXPECT_EQ(back.adapter.reduction, 8u);
  EXPECT_FALSE(back.adapter.spatial);
  EXPECT_TRUE(back.adapter.channel);
  ASSERT_EQ(back.stages.size(), t.stages.size());
  for (std::size_t i = 0; i < t.stages.size(); ++i) {
    EXPECT_EQ(back.stages[i].layout, t.stages[i].layout);
    EXPECT_EQ(back.stages[i].channels, t.stages[i].channels);
    EXPECT_EQ(back.stages[i].stride, t.stages[i].stride);
  }
}

TEST(Ini, HandWrittenFile) {
  const auto t = topology_from_ini(parse_ini(
      "# toy\n[model]\nname = x\nstem = cifar\ninput_channels = 1\ninput_size = 16\n"
      "num_classes = 10\nstem_channels = 8\n\n[stage]\nlayout = FS-SF\nchannels = 8\n"
      "[stage]\nlayout = FF\nchannels = 16 ; wider\nstride = 2\n"));
  ASSERT_EQ(t.stages.size(), 2u);
  EXPECT_EQ(t.stages[1].channels, 16u);
  EXPECT_EQ(t.stages[1].stride, 2u);
  EXPECT_EQ(attention_string(t.adapter), "channel,filter,spatial");
}

TEST(Ini, Errors) {
  EXPECT_THROW(topology_from_ini(parse_ini("[stage]\nlayout = F\nchannels = 4\n")), ConfigError);
  EXPECT_THROW(topology_from_ini(parse_ini("[model]\n[stage]\nchannels = 4\n")), ConfigError);
  EXPECT_THROW(topology_from_ini(parse_ini("[model]\n[stage]\nlayout = F\nchannels = four\n")), ConfigError);
  EXPECT_THROW(topology_from_ini(parse_ini("[model]\nvariant = odconv\n[stage]\nlayout = F\nchannels = 4\n")),
               ConfigError);
  EXPECT_THROW(topology_from_ini(parse_ini("[model]\nattention = temporal\n[stage]\nlayout = F\nchannels = 4\n")),
               ConfigError);
  EXPECT_THROW(topology_from_ini(parse_ini("[model]\n[stage]\nlayout = FX\nchannels = 4\n")), ParseError);
  EXPECT_THROW(parse_ini("key = 1\n"), ConfigError);
  EXPECT_THROW(parse_ini("[model\n"), ConfigError);
}
