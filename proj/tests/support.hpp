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

// Shared helpers for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "kdna/layers.hpp"

namespace kdna::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t) v = d(rng);
  return t;
}

inline void randomise(Var& v, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& x : v.value()) x = d(rng);
}

/// max_i |a_i - b_i| / max(max_i |b_i|, tiny)
inline double rel_error(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / std::max(scale, 1e-300);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

/// Builds a scalar loss from `inputs` on `tape` (tape may be null).
using LossFn = std::function<Var(Tape*, const std::vector<Var>&)>;

struct GradCheck {
  double worst = 0;            // largest relative error over all inputs
  std::size_t evaluations = 0;
  std::vector<double> per_input;
};

/// Central differences with step h against the tape's gradients. The error
/// for one input is max|analytic - numeric| / max(|numeric|_inf, 1e-8).
inline GradCheck check_gradients(const std::vector<Var>& inputs, const LossFn& loss_fn, double h = 1e-5) {
  for (auto v : inputs) v.zero_grad();
  Tape tape;
  Var loss = loss_fn(&tape, inputs);
  tape.backward(loss);
  GradCheck out;
  for (auto v : inputs) {
    const Tensor analytic = v.has_grad() ? v.grad() : Tensor(v.shape(), 0.0);
    Tensor numeric(v.shape(), 0.0);
    for (std::size_t i = 0; i < v.value().size(); ++i) {
      const double orig = v.value()[i];
      v.value()[i] = orig + h;
      const double lp = loss_fn(nullptr, inputs).value().item();
      v.value()[i] = orig - h;
      const double lm = loss_fn(nullptr, inputs).value().item();
      v.value()[i] = orig;
      numeric[i] = (lp - lm) / (2 * h);
      out.evaluations += 2;
    }
    double diff = 0, scale = 0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale = std::max(scale, std::abs(numeric[i]));
    }
    const double err = diff / std::max(scale, 1e-8);
    out.per_input.push_back(err);
    out.worst = std::max(out.worst, err);
  }
  for (auto v : inputs) v.zero_grad();
  return out;
}

/// Weighted sum of an output with fixed random weights: a scalar loss whose
/// gradient exercises every output element differently.
inline LossFn projected(std::function<Var(Tape*, const std::vector<Var>&)> f, Shape out_shape,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor r = random_tensor(std::move(out_shape), rng);
  return [f = std::move(f), r](Tape* t, const std::vector<Var>& in) { return dot_const(t, f(t, in), r); };
}

/// Fresh scratch directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / ("kdna_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace kdna::testing
