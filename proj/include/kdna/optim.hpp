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

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "kdna/config.hpp"
#include "kdna/layers.hpp"

namespace kdna {

struct TrainConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::string schedule = "cosine";
  bool hflip = true;

  void validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be a positive number");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch statistics)");
    if (schedule != "cosine" && schedule != "constant")
      throw ConfigError("unknown schedule '" + schedule + "'");
  }
};

inline TrainConfig train_config_from_ini(const IniDocument& doc) {
  TrainConfig c;
  if (const IniSection* s = doc.first("train")) {
    c.lr = s->number<double>("lr", c.lr);
    c.momentum = s->number<double>("momentum", c.momentum);
    c.weight_decay = s->number<double>("weight_decay", c.weight_decay);
    c.epochs = s->number<std::size_t>("epochs", c.epochs);
    c.batch_size = s->number<std::size_t>("batch_size", c.batch_size);
    c.seed = s->number<std::uint64_t>("seed", c.seed);
    c.schedule = s->get("schedule", c.schedule);
    const std::string flip = s->get("hflip", c.hflip ? "true" : "false");
    if (flip != "true" && flip != "false") throw ConfigError("hflip must be true or false");
    c.hflip = flip == "true";
  }
  c.validate();
  return c;
}

inline IniSection train_config_to_ini(const TrainConfig& c) {
  IniSection s{"train", {}};
  const auto num = [](double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
  };
  s.set("lr", num(c.lr));
  s.set("momentum", num(c.momentum));
  s.set("weight_decay", num(c.weight_decay));
  s.set("epochs", std::to_string(c.epochs));
  s.set("batch_size", std::to_string(c.batch_size));
  s.set("seed", std::to_string(c.seed));
  s.set("schedule", c.schedule);
  s.set("hflip", c.hflip ? "true" : "false");
  return s;
}

/// lr0 * 0.5 * (1 + cos(pi t / T)) for step t of T.
inline double cosine_lr(double lr0, std::size_t t, std::size_t total) {
  if (total == 0) return lr0;
  const double x = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

/// SGD with momentum and coupled weight decay:
///   v <- momentum * v + grad + wd * p;  p <- p - lr * v.
/// Parameters flagged decay=false (BatchNorm affine) skip the wd term.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<NamedParam>& params, double lr) {
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      const Tensor& g = p.var.grad();
      for (double v : g)
        if (!std::isfinite(v)) throw TrainingError("non-finite gradient in " + p.name);
    }
    for (const auto& p : params) {
      if (!p.var.has_grad()) continue;
      Var var = p.var;
      auto [it, fresh] = velocity_.try_emplace(var.id(), var.shape(), 0.0);
      Tensor& v = it->second;
      const Tensor& g = var.grad();
      Tensor& w = var.value();
      const double wd = p.decay ? weight_decay_ : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i] + wd * w[i];
        w[i] -= lr * v[i];
      }
      var.zero_grad();
    }
  }

  const Tensor* velocity(const Var& v) const {
    auto it = velocity_.find(v.id());
    return it == velocity_.end() ? nullptr : &it->second;
  }

 private:
  double momentum_;
  double weight_decay_;
  std::unordered_map<const void*, Tensor> velocity_;
};

}  // namespace kdna
