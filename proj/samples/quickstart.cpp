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

// Builds a shared-kernel network, reports its cost, trains it briefly on
// synthetic glyphs and shows that folding the static attention leaves the
// predictions unchanged.

#include <filesystem>
#include <iostream>

#include "kdna/kdna.hpp"

int main() {
  using namespace kdna;
  retain_heap_allocations();

  const TopologySpec spec = preset("tiny-toy");
  Model model = Model::build(spec, 7);
  const CostReport cost = count_costs(model, spec.input_size);
  std::cout << spec.name << ": " << cost.total_params << " params, " << cost.total_flops() / 1e6 << " MFLOPs\n";
  for (const auto& c : model.children()) std::cout << "  " << c.name << " borrows " << c.parent << '\n';

  const auto dir = std::filesystem::temp_directory_path() / "kdna-quickstart";
  std::filesystem::create_directories(dir);
  write_synthetic_dir(dir.string(), 1000, 200, spec.input_channels, spec.input_size, 3);
  const DataSplits data = load_data_dir(dir.string(), spec.num_classes);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 1;
  const TrainResult r = train(model, data, cfg);
  std::cout << "val accuracy after " << cfg.epochs << " epochs: " << r.final_val_acc << '\n';

  model.set_mode(Mode::eval);
  const Tensor before = model.predict(data.val.images);
  model.fuse_static();
  const Tensor after = model.predict(data.val.images);
  double worst = 0;
  for (std::size_t i = 0; i < before.size(); ++i) worst = std::max(worst, std::abs(before[i] - after[i]));
  std::cout << "largest logit change after fusing: " << worst << '\n';
  return 0;
}
