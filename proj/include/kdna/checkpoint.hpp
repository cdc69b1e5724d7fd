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

// Checkpoint layout (little-endian):
//
//   "KDCK" u32 version
//   string  model config (the INI text the model was built from)
//   u32     entry count
//   entry*  u8 kind, string name, then
//             kind 0: a KTNS tensor
//             kind 1: a string naming another conv (a child's parent)
//
// Parent kernels appear once, as "<parent>.weight". A child contributes its
// adapter tensors and one "<child>.parent" reference. Fused caches are
// stored as "<child>.fused" when present.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>

#include "kdna/model.hpp"

namespace kdna {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string config;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> references;
};

inline CheckpointData snapshot(Model& model) {
  CheckpointData d;
  d.config = to_ini(topology_to_ini(model.spec()));
  for (const auto& p : model.parameters()) d.tensors.emplace(p.name, p.var.value());
  for (const auto& b : model.buffers()) d.tensors.emplace(b.name, *b.tensor);
  for (const auto& c : model.children()) {
    d.references.emplace(c.name + ".parent", c.parent);
    if (const Tensor* f = c.layer->fused_weight()) d.tensors.emplace(c.name + ".fused", *f);
  }
  return d;
}

inline void write_checkpoint(std::ostream& os, const CheckpointData& d) {
  os.write("KDCK", 4);
  io::write_u32(os, kCheckpointVersion);
  io::write_string(os, d.config);
  io::write_u32(os, static_cast<std::uint32_t>(d.tensors.size() + d.references.size()));
  for (const auto& [name, t] : d.tensors) {
    os.put(0);
    io::write_string(os, name);
    write_tensor(os, t);
  }
  for (const auto& [name, target] : d.references) {
    os.put(1);
    io::write_string(os, name);
    io::write_string(os, target);
  }
}

inline CheckpointData read_checkpoint(std::istream& is) {
  char magic[4];
  io::read_exact(is, magic, 4, "checkpoint magic");
  if (std::string(magic, 4) != "KDCK") throw FormatError("bad checkpoint magic at byte offset 0");
  const std::uint32_t version = io::read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData d;
  d.config = io::read_string(is, "checkpoint config");
  const std::uint32_t n = io::read_u32(is, "checkpoint entry count");
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto at = static_cast<long long>(is.tellg());
    char kind = 0;
    io::read_exact(is, &kind, 1, "checkpoint entry kind");
    std::string name = io::read_string(is, "checkpoint entry name");
    if (kind == 0)
      d.tensors.emplace(std::move(name), read_tensor(is));
    else if (kind == 1)
      d.references.emplace(std::move(name), io::read_string(is, "checkpoint reference"));
    else
      throw FormatError("unknown checkpoint entry kind " + std::to_string(int(kind)) +
                        " at byte offset " + std::to_string(at));
  }
  return d;
}

/// Rebuilds the model from the stored config and restores every tensor.
/// A child whose parent reference is missing, points at the wrong conv, or
/// points at a kernel that is not stored is a format error.
inline Model restore(const CheckpointData& d) {
  Model m = Model::build(topology_from_ini(parse_ini(d.config)), 0);
  const auto tensor = [&](const std::string& name) -> const Tensor& {
    auto it = d.tensors.find(name);
    if (it == d.tensors.end()) throw FormatError("checkpoint has no entry '" + name + "'");
    return it->second;
  };
  for (const auto& c : m.children()) {
    auto ref = d.references.find(c.name + ".parent");
    if (ref == d.references.end())
      throw FormatError("child " + c.name + " has no parent reference");
    if (!d.tensors.count(ref->second + ".weight"))
      throw FormatError("child " + c.name + " references missing parent '" + ref->second + "'");
    if (ref->second != c.parent)
      throw FormatError("child " + c.name + " references '" + ref->second + "' but the layout binds it to '" +
                        c.parent + "'");
  }
  for (const auto& [name, target] : d.references)
    if (!d.tensors.count(target + ".weight"))
      throw FormatError("reference " + name + " dangles: no kernel stored for '" + target + "'");

  for (auto& p : m.parameters()) {
    const Tensor& t = tensor(p.name);
    if (t.shape() != p.var.shape())
      throw FormatError("entry '" + p.name + "' has shape " + shape_string(t.shape()) + ", model expects " +
                        shape_string(p.var.shape()));
    p.var.value() = t;
  }
  for (auto& b : m.buffers()) {
    const Tensor& t = tensor(b.name);
    if (t.shape() != b.tensor->shape())
      throw FormatError("entry '" + b.name + "' has shape " + shape_string(t.shape()));
    *b.tensor = t;
  }
  bool any_fused = false;
  for (auto& c : m.children())
    if (auto it = d.tensors.find(c.name + ".fused"); it != d.tensors.end()) {
      c.layer->set_fused(it->second);
      any_fused = true;
    }
  m.set_mode(Mode::eval);
  if (any_fused) m.fuse_static();
  return m;
}

inline void save_checkpoint(const std::string& path, Model& model) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, snapshot(model));
  io::write_file_atomic(path, os.str());
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint '" + path + "'");
  return restore(read_checkpoint(is));
}

}  // namespace kdna
