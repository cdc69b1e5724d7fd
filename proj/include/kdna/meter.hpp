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
#include <cstddef>

#include "kdna/tensor.hpp"

namespace kdna {

/// Per-thread record of kernel tensors materialised during a forward pass.
/// Layers report every kernel they build on the fly (modulated kernels,
/// per-sample aggregated kernels, batch-expanded weight stacks); persistent
/// parameters are not reported. `peak_bytes` is the largest single such
/// tensor seen since the last reset.
class KernelMeter {
 public:
  static KernelMeter& current() {
    thread_local KernelMeter meter;
    return meter;
  }

  void record(const Tensor& kernel) { record_bytes(kernel.size() * sizeof(double)); }
  void record_bytes(std::size_t bytes) {
    peak_ = std::max(peak_, bytes);
    total_ += bytes;
    ++count_;
  }

  void reset() { peak_ = total_ = count_ = 0; }
  std::size_t peak_bytes() const noexcept { return peak_; }
  std::size_t total_bytes() const noexcept { return total_; }
  std::size_t materialisations() const noexcept { return count_; }

 private:
  std::size_t peak_ = 0;
  std::size_t total_ = 0;
  std::size_t count_ = 0;
};

}  // namespace kdna
