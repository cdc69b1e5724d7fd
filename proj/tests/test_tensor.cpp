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

#include <sstream>

#include "kdna/autograd.hpp"
#include "support.hpp"

using namespace kdna;
using kdna::testing::check_gradients;
using kdna::testing::projected;
using kdna::testing::random_tensor;

TEST(TensorNew, ZeroFill) {
  const Tensor t = tensor_new({2, 2}, 0.0);
  EXPECT_EQ(t.shape(), (Shape{2, 2}));
  for (double v : t) EXPECT_EQ(v, 0.0);
}

TEST(TensorNew, SingleElement) {
  const Tensor t = tensor_new({1}, 3.5);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0], 3.5);
}

TEST(TensorNew, RowMajorStrides) {
  const Tensor t = tensor_new({2, 3}, 1.0);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.strides(), (Shape{3, 1}));
  for (double v : t) EXPECT_EQ(v, 1.0);
}

TEST(TensorNew, RejectsNonPositiveExtents) {
  EXPECT_THROW(tensor_new({2, 0}, 0.0), ShapeError);
  EXPECT_THROW(tensor_new({-1, 3}, 0.0), ShapeError);
}

TEST(TensorLayout, LinearIndexMatchesStrideFormula) {
  std::mt19937_64 rng(3);
  const Tensor t = random_tensor({2, 3, 4, 5}, rng);
  const Shape st = t.strides();
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t d = 0; d < 5; ++d)
          EXPECT_EQ(t(a, b, c, d), t[a * st[0] + b * st[1] + c * st[2] + d * st[3]]);
}

TEST(Broadcast, ShapeRule) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({2, 3, 3, 3}, rng);
  const Tensor b = random_tensor({1, 1, 3, 3}, rng);
  EXPECT_EQ(mul_broadcast(a, b).shape(), (Shape{2, 3, 3, 3}));
}

TEST(Broadcast, HandExpansion) {
  const Tensor a(Shape{2, 2}, {1, 2, 3, 4});
  const Tensor b(Shape{2, 1}, {10, 100});
  const Tensor c = mul_broadcast(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(std::vector<double>(c.begin(), c.end()), (std::vector<double>{10, 20, 300, 400}));
}

TEST(Broadcast, OnesAreIdentity) {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor({3, 4, 5}, rng);
  const Tensor ones(Shape{4, 1}, 1.0);
  EXPECT_EQ(mul_broadcast(a, ones), a);
}

TEST(Broadcast, IncompatibleNamesDimension) {
  const Tensor a(Shape{2, 3}, 1.0), b(Shape{2, 4}, 1.0);
  try {
    mul_broadcast(a, b);
    FAIL() << "expected BroadcastError";
  } catch (const BroadcastError& e) {
    EXPECT_NE(std::string(e.what()).find("dimension"), std::string::npos) << e.what();
  }
}

// Independent oracle: expand each operand by explicit index projection.
TEST(Broadcast, MatchesIndexProjectionOracle) {
  std::mt19937_64 rng(9);
  const std::vector<std::pair<Shape, Shape>> cases = {
      {{2, 3, 4}, {3, 1}}, {{1, 4, 1}, {5, 1, 6}}, {{2, 1, 3, 1}, {1, 4, 1, 5}}, {{7}, {3, 1}}};
  for (const auto& [sa, sb] : cases) {
    const Tensor a = random_tensor(sa, rng), b = random_tensor(sb, rng);
    const Tensor got = mul_broadcast(a, b);
    const Shape out = broadcast_shape(sa, sb);
    const auto project = [&](const Shape& s, const Shape& idx) {
      std::size_t off = 0, stride = 1;
      for (std::size_t d = 0; d < s.size(); ++d) {
        const std::size_t dd = s.size() - 1 - d;
        const std::size_t i = idx[out.size() - 1 - d];
        off += (s[dd] == 1 ? 0 : i) * stride;
        stride *= s[dd];
      }
      return off;
    };
    Shape idx(out.size(), 0);
    for (std::size_t lin = 0; lin < shape_size(out); ++lin) {
      std::size_t rem = lin;
      for (std::size_t d = out.size(); d-- > 0;) {
        idx[d] = rem % out[d];
        rem /= out[d];
      }
      EXPECT_DOUBLE_EQ(got[lin], a[project(sa, idx)] * b[project(sb, idx)]);
    }
  }
}

TEST(Broadcast, ShapeRuleIsAssociative) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> rank(1, 4), pick(0, 2);
  int checked = 0;
  for (int trial = 0; trial < 400; ++trial) {
    Shape base;
    for (int d = 0; d < 4; ++d) base.push_back(2 + static_cast<std::size_t>(d));
    auto draw = [&] {
      Shape s;
      const int r = rank(rng);
      for (int d = 4 - r; d < 4; ++d) s.push_back(pick(rng) == 0 ? 1 : base[static_cast<std::size_t>(d)]);
      return s;
    };
    const Shape a = draw(), b = draw(), c = draw();
    EXPECT_EQ(broadcast_shape(broadcast_shape(a, b), c), broadcast_shape(a, broadcast_shape(b, c)));
    ++checked;
  }
  EXPECT_EQ(checked, 400);
}

TEST(Tape, SharedParameterSumsBranches) {
  std::mt19937_64 rng(4);
  Var w = Var::parameter(random_tensor({3}, rng));
  const Tensor x1 = random_tensor({3}, rng), x2 = random_tensor({3}, rng);
  Tape tape;
  Var l1 = dot_const(&tape, w, x1);
  Var l2 = dot_const(&tape, w, x2);
  Var loss = add(&tape, l1, l2);
  const GradMap g = tape.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g.at(w)[i], x1[i] + x2[i]);
}

TEST(Tape, HalfSquare) {
  Var w = Var::parameter(Tensor::scalar(3.0));
  Tape tape;
  Var loss = scale(&tape, mul(&tape, w, w), 0.5);
  EXPECT_DOUBLE_EQ(tape.backward(loss).at(w).item(), 3.0);
}

TEST(Tape, NonScalarLossIsContractError) {
  Var w = Var::parameter(Tensor(Shape{2}, 1.0));
  Tape tape;
  Var y = scale(&tape, w, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Tape, SharedUseEqualsSumOfSeparateTapes) {
  std::mt19937_64 rng(8);
  Var w = Var::parameter(random_tensor({2, 3}, rng));
  std::vector<Tensor> xs;
  for (int k = 0; k < 4; ++k) xs.push_back(random_tensor({2, 3}, rng));
  Tape shared;
  Var total;
  for (const auto& x : xs) {
    Var term = dot_const(&shared, sigmoid(&shared, mul(&shared, w, Var(x))), x);
    total = total ? add(&shared, total, term) : term;
  }
  const Tensor together = shared.backward(total).at(w);
  w.zero_grad();
  Tensor separate(w.shape(), 0.0);
  for (const auto& x : xs) {
    Tape t;
    Var term = dot_const(&t, sigmoid(&t, mul(&t, w, Var(x))), x);
    add_into(separate, t.backward(term).at(w));
    w.zero_grad();
  }
  EXPECT_LE(kdna::testing::rel_error(together, separate), 1e-12);
}

TEST(TapeGradients, ElementwiseOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    const Shape sa{2, 3, 4}, sb{1, 3, 1};
    Var a = Var::parameter(random_tensor(sa, rng)), b = Var::parameter(random_tensor(sb, rng));
    const auto f = [](Tape* t, const std::vector<Var>& in) {
      Var m = mul(t, in[0], in[1]);
      Var s = add(t, m, in[1]);
      s = add_scalar(t, scale(t, s, 1.7), -0.3);
      Var r = relu(t, s);
      Var g = sigmoid(t, reshape(t, r, {6, 4}));
      return sum_axis(t, g, 1);
    };
    const auto res = check_gradients({a, b}, projected(f, {6}, 100 + trial));
    EXPECT_LE(res.worst, 1e-6);
  }
}

TEST(TapeGradients, SumAxisEveryAxis) {
  std::mt19937_64 rng(12);
  for (std::size_t axis = 0; axis < 4; ++axis) {
    Var a = Var::parameter(random_tensor({2, 3, 4, 2}, rng));
    Shape out{2, 3, 4, 2};
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    const auto f = [axis](Tape* t, const std::vector<Var>& in) { return sum_axis(t, in[0], axis); };
    EXPECT_LE(check_gradients({a}, projected(f, out, 7)).worst, 1e-6);
  }
}

TEST(TensorIo, RoundTrip) {
  std::mt19937_64 rng(13);
  const Tensor t = random_tensor({3, 1, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.substr(0, 4), "KTNS");
  // rank then extents, little-endian u32
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 4);
  EXPECT_EQ(bytes.size(), 4 + 4 + 12 + 12 * 8u);
  std::stringstream in(bytes);
  EXPECT_EQ(read_tensor(in), t);
}

TEST(TensorIo, BadMagicAndTruncation) {
  std::stringstream bad("XXXX\1\0\0\0");
  EXPECT_THROW(read_tensor(bad), FormatError);
  std::stringstream ss;
  write_tensor(ss, Tensor(Shape{4}, 2.0));
  std::string cut = ss.str();
  cut.resize(cut.size() - 3);
  std::stringstream in(cut);
  try {
    read_tensor(in);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}
