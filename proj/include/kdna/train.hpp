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
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kdna/checkpoint.hpp"
#include "kdna/data.hpp"
#include "kdna/optim.hpp"

namespace kdna {

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  double best_val_acc = -1;
  std::size_t best_epoch = 0;
  double final_val_acc = 0;
};

struct TrainOptions {
  /// When set, best.ckpt, last.ckpt and train_log.csv are written here.
  std::string out_dir;
  /// Called after every epoch; handy for progress output.
  std::function<void(const EpochLog&)> on_epoch;
};

inline std::string format_train_log(const std::vector<EpochLog>& rows) {
  std::ostringstream out;
  out << "epoch,train_loss,train_acc,val_acc,lr\n";
  out << std::setprecision(10);
  for (const auto& r : rows)
    out << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_acc << ',' << r.lr << '\n';
  return out.str();
}

/// Fraction of `data` classified correctly, in eval mode. The model's mode
/// is restored afterwards.
inline double evaluate(Model& model, const Dataset& data, std::size_t batch = 128) {
  if (data.size() == 0) throw InputError("cannot evaluate on an empty dataset");
  const Mode before = model.mode();
  model.set_mode(Mode::eval);
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = model.predict(data.gather(idx));
    const std::size_t classes = logits.shape()[1];
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = logits.data() + i * classes;
      const auto arg = static_cast<int>(std::max_element(row, row + classes) - row);
      if (arg == data.labels[start + i]) ++correct;
    }
  }
  if (before == Mode::train) model.set_mode(Mode::train);
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {
inline void hflip_inplace(Tensor& x, std::size_t i) {
  const Shape& s = x.shape();
  for (std::size_t c = 0; c < s[1]; ++c)
    for (std::size_t h = 0; h < s[2]; ++h) {
      double* row = x.data() + ((i * s[1] + c) * s[2] + h) * s[3];
      std::reverse(row, row + s[3]);
    }
}
}  // namespace detail

/// One pass of SGD over `batch`; returns (loss, correct count).
inline std::pair<double, std::size_t> train_step(Model& model, Sgd& opt, const Tensor& images,
                                                 const std::vector<int>& labels, double lr) {
  model.set_mode(Mode::train);
  Tape tape;
  Var logits = model.forward(&tape, Var(images));
  Var loss = softmax_cross_entropy(&tape, logits, labels);
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw TrainingError("loss became non-finite (" + std::to_string(value) + ")");
  tape.backward(loss);
  opt.step(model.parameters(), lr);
  const std::size_t classes = logits.shape()[1];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = logits.value().data() + i * classes;
    if (std::max_element(row, row + classes) - row == labels[i]) ++correct;
  }
  return {value, correct};
}

/// Deterministic training: shuffling and flips draw from a stream seeded
/// by config.seed; the model carries its own init seed. On a non-finite
/// loss the run stops with TrainingError and best.ckpt (if any) is left as
/// the last good state.
inline TrainResult train(Model& model, const DataSplits& data, const TrainConfig& config,
                         const TrainOptions& options = {}) {
  config.validate();
  const TopologySpec& spec = model.spec();
  if (data.train.num_classes != spec.num_classes)
    throw ConfigError("dataset has " + std::to_string(data.train.num_classes) + " classes, model head has " +
                      std::to_string(spec.num_classes));
  if (data.train.channels() != spec.input_channels)
    throw ConfigError("dataset has " + std::to_string(data.train.channels()) + " channels, model expects " +
                      std::to_string(spec.input_channels));
  const std::size_t n = data.train.size();
  if (n < 2) throw InputError("training needs at least two samples");

  const std::size_t bs = std::min(config.batch_size, n);
  std::size_t steps_per_epoch = (n + bs - 1) / bs;
  if (n % bs == 1) --steps_per_epoch;  // a lone sample has no batch statistics
  const std::size_t total = steps_per_epoch * config.epochs;

  std::mt19937_64 rng(config.seed);
  Sgd opt(config.momentum, config.weight_decay);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::size_t t = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    double lr = config.lr;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++t) {
      const std::size_t start = s * bs, len = std::min(bs, n - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      Tensor images = data.train.gather(idx);
      if (config.hflip)
        for (std::size_t i = 0; i < len; ++i)
          if (rng() & 1) detail::hflip_inplace(images, i);
      lr = config.schedule == "cosine" ? cosine_lr(config.lr, t, total) : config.lr;
      const auto [loss, ok] = train_step(model, opt, images, data.train.gather_labels(idx), lr);
      loss_sum += loss * static_cast<double>(len);
      correct += ok;
      seen += len;
    }
    EpochLog row{epoch, loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen),
                 evaluate(model, data.val), lr};
    result.epochs.push_back(row);
    if (row.val_acc > result.best_val_acc) {
      result.best_val_acc = row.val_acc;
      result.best_epoch = epoch;
      if (!options.out_dir.empty()) {
        model.set_mode(Mode::eval);
        save_checkpoint(options.out_dir + "/best.ckpt", model);
      }
    }
    if (!options.out_dir.empty())
      io::write_file_atomic(options.out_dir + "/train_log.csv", format_train_log(result.epochs));
    if (options.on_epoch) options.on_epoch(row);
  }
  model.set_mode(Mode::eval);
  result.final_val_acc = result.epochs.back().val_acc;
  if (!options.out_dir.empty()) save_checkpoint(options.out_dir + "/last.ckpt", model);
  return result;
}

}  // namespace kdna
