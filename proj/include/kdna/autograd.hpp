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
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kdna/tensor.hpp"

namespace kdna {

namespace detail {
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool leaf = true;
};
}  // namespace detail

/// Handle to a value slot. Copies alias the same slot, which is how a
/// parent kernel is shared between layers: every use accumulates into the
/// same gradient.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool is_leaf() const noexcept { return node_->leaf; }
  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }
  const void* id() const noexcept { return node_.get(); }

  void accumulate_grad(const Tensor& g) const {
    if (node_->grad.empty())
      node_->grad = g;
    else
      add_into(node_->grad, g);
  }

  /// Creates a non-leaf output slot for an op.
  static Var result(Tensor value, bool requires_grad) {
    Var v(std::move(value), requires_grad);
    v.node_->leaf = false;
    return v;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

struct GradMap {
  std::vector<std::pair<Var, Tensor>> entries;

  const Tensor& at(const Var& v) const {
    for (const auto& [var, g] : entries)
      if (var.id() == v.id()) return g;
    throw ContractError("no gradient recorded for the requested parameter");
  }
  bool contains(const Var& v) const {
    for (const auto& e : entries)
      if (e.first.id() == v.id()) return true;
    return false;
  }
};

/// Ordered record of backward rules. Replaying in reverse accumulates
/// d(loss)/d(slot) into every slot reachable from the loss.
class Tape {
 public:
  using Rule = std::function<void()>;

  void record(Rule rule, std::initializer_list<const Var*> inputs) {
    for (const Var* in : inputs) {
      if (in && *in && in->requires_grad() && in->is_leaf() && seen_.insert(in->id()).second)
        leaves_.push_back(*in);
    }
    rules_.push_back(std::move(rule));
  }

  GradMap backward(Var loss) {
    if (loss.value().size() != 1)
      throw ContractError("backward needs a scalar loss, got shape " +
                          shape_string(loss.shape()));
    if (!loss.requires_grad())
      throw ContractError("loss does not depend on any recorded parameter");
    loss.accumulate_grad(Tensor::scalar(1.0).reshape(loss.shape()));
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    GradMap map;
    for (const auto& leaf : leaves_)
      if (leaf.has_grad()) map.entries.emplace_back(leaf, leaf.grad());
    return map;
  }

  std::size_t size() const noexcept { return rules_.size(); }

  void clear() {
    rules_.clear();
    leaves_.clear();
    seen_.clear();
  }

 private:
  std::vector<Rule> rules_;
  std::vector<Var> leaves_;
  std::unordered_set<const void*> seen_;
};

inline bool recording(const Tape* tape, std::initializer_list<const Var*> inputs) {
  if (!tape) return false;
  for (const Var* v : inputs)
    if (v && *v && v->requires_grad()) return true;
  return false;
}

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Elementwise and shape ops

inline Var mul(Tape* tape, const Var& a, const Var& b) {
  const bool rec = recording(tape, {&a, &b});
  Var out = Var::result(mul_broadcast(a.value(), b.value()), rec);
  if (rec) {
    tape->record(
        [a, b, out]() mutable {
          if (!out.has_grad()) return;
          if (a.requires_grad())
            a.accumulate_grad(reduce_to_shape(mul_broadcast(out.grad(), b.value()), a.shape()));
          if (b.requires_grad())
            b.accumulate_grad(reduce_to_shape(mul_broadcast(out.grad(), a.value()), b.shape()));
        },
        {&a, &b});
  }
  return out;
}

inline Var add(Tape* tape, const Var& a, const Var& b) {
  const bool rec = recording(tape, {&a, &b});
  Var out = Var::result(add_broadcast(a.value(), b.value()), rec);
  if (rec) {
    tape->record(
        [a, b, out]() mutable {
          if (!out.has_grad()) return;
          if (a.requires_grad()) a.accumulate_grad(reduce_to_shape(out.grad(), a.shape()));
          if (b.requires_grad()) b.accumulate_grad(reduce_to_shape(out.grad(), b.shape()));
        },
        {&a, &b});
  }
  return out;
}

/// a + s for a scalar constant s.
inline Var add_scalar(Tape* tape, const Var& a, double s) {
  const bool rec = recording(tape, {&a});
  Tensor v = a.value();
  for (auto& x : v) x += s;
  Var out = Var::result(std::move(v), rec);
  if (rec) {
    tape->record(
        [a, out]() mutable {
          if (out.has_grad()) a.accumulate_grad(out.grad());
        },
        {&a});
  }
  return out;
}

inline Var scale(Tape* tape, const Var& a, double s) {
  const bool rec = recording(tape, {&a});
  Tensor v = a.value();
  scale_inplace(v, s);
  Var out = Var::result(std::move(v), rec);
  if (rec) {
    tape->record(
        [a, out, s]() mutable {
          if (!out.has_grad()) return;
          Tensor g = out.grad();
          scale_inplace(g, s);
          a.accumulate_grad(g);
        },
        {&a});
  }
  return out;
}

inline Var reshape(Tape* tape, const Var& a, Shape shape) {
  const bool rec = recording(tape, {&a});
  Var out = Var::result(a.value().reshape(std::move(shape)), rec);
  if (rec) {
    tape->record(
        [a, out]() mutable {
          if (out.has_grad()) a.accumulate_grad(out.grad().reshape(a.shape()));
        },
        {&a});
  }
  return out;
}

inline Var relu(Tape* tape, const Var& a) {
  const bool rec = recording(tape, {&a});
  Tensor v = a.value();
  for (auto& x : v) x = x > 0 ? x : 0;
  Var out = Var::result(std::move(v), rec);
  if (rec) {
    tape->record(
        [a, out]() mutable {
          if (!out.has_grad()) return;
          Tensor g = out.grad();
          const auto& x = a.value();
          for (std::size_t i = 0; i < g.size(); ++i)
            if (!(x[i] > 0)) g[i] = 0;
          a.accumulate_grad(g);
        },
        {&a});
  }
  return out;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Tape* tape, const Var& a) {
  const bool rec = recording(tape, {&a});
  Tensor v = a.value();
  for (auto& x : v) x = sigmoid_scalar(x);
  Var out = Var::result(std::move(v), rec);
  if (rec) {
    tape->record(
        [a, out]() mutable {
          if (!out.has_grad()) return;
          Tensor g = out.grad();
          const auto& y = out.value();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (1 - y[i]);
          a.accumulate_grad(g);
        },
        {&a});
  }
  return out;
}

/// Sums over one axis, removing it (rank must stay >= 1).
inline Var sum_axis(Tape* tape, const Var& a, std::size_t axis) {
  const Shape& in = a.shape();
  if (axis >= in.size() || in.size() < 2)
    throw ShapeError("sum_axis: axis " + std::to_string(axis) + " invalid for " + shape_string(in));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t n = in[axis];
  Shape out_shape = in;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor v(out_shape);
  const double* src = a.value().data();
  double* dst = v.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j) {
      const double* s = src + (o * n + j) * inner;
      double* d = dst + o * inner;
      for (std::size_t i = 0; i < inner; ++i) d[i] += s[i];
    }
  const bool rec = recording(tape, {&a});
  Var out = Var::result(std::move(v), rec);
  if (rec) {
    tape->record(
        [a, out, outer, inner, n]() mutable {
          if (!out.has_grad()) return;
          Tensor g(a.shape());
          const double* go = out.grad().data();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < n; ++j)
              std::copy(go + o * inner, go + (o + 1) * inner, g.data() + (o * n + j) * inner);
          a.accumulate_grad(g);
        },
        {&a});
  }
  return out;
}

/// Sum of a ⊙ weights for a constant weight tensor; a scalar. Used to turn
/// any tensor output into a generic scalar loss.
inline Var dot_const(Tape* tape, const Var& a, const Tensor& weights) {
  if (a.shape() != weights.shape())
    throw ShapeError("dot_const: " + shape_string(a.shape()) + " vs " +
                     shape_string(weights.shape()));
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += a.value()[i] * weights[i];
  const bool rec = recording(tape, {&a});
  Var out = Var::result(Tensor::scalar(acc), rec);
  if (rec) {
    tape->record(
        [a, out, weights]() mutable {
          if (!out.has_grad()) return;
          Tensor g = weights;
          scale_inplace(g, out.grad()[0]);
          a.accumulate_grad(g);
        },
        {&a});
  }
  return out;
}

}  // namespace kdna
