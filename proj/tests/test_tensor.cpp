/*
 * Copyright (c) 2026 The crossgate Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "crossgate/gradcheck.hpp"
#include "crossgate/ops.hpp"
#include "crossgate/rng.hpp"

using namespace crossgate;
using Tensord = Tensor<double>;

namespace {

Tensord random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensord t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.normal() * scale;
  return t;
}

// Checks every input of `op` against finite differences of
// sum(op(inputs) * r) for a fixed random projection r.
void expect_gradients_match(const std::vector<Tensord>& inputs,
                            const std::function<Tensord(const std::vector<Tensord>&)>& op, Rng& rng) {
  const Tensord probe_out = op(inputs);
  const Tensord r = random_tensor(rng, probe_out.shape());
  auto loss_of = [&](const std::vector<Tensord>& xs) { return sum(mul(op(xs), r)); };

  Tape<double> tape;
  std::vector<Tensord> watched;
  for (const auto& x : inputs) watched.push_back(tape.watch(x));
  const auto grads = tape.backward(loss_of(watched));

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensord& xi) {
      auto xs = inputs;
      xs[i] = xi;
      return loss_of(xs).item();
    };
    const Tensord fd = finite_difference_gradient(f, inputs[i]);
    const Tensord& g = grads.at(watched[i]);
    ASSERT_EQ(g.shape(), inputs[i].shape());
    double worst = 0;
    for (std::size_t k = 0; k < g.numel(); ++k) worst = std::max(worst, relative_error(g[k], fd[k]));
    EXPECT_LT(worst, 1e-4) << "input " << i << " shape " << inputs[i].shape().str();
  }
}

}  // namespace

TEST(Shape, RejectsZeroExtent) {
  EXPECT_THROW(Shape({2, 0}), ShapeError);
  EXPECT_EQ(Shape{}.numel(), 1u);
  EXPECT_EQ((Shape{2, 3, 4}).numel(), 24u);
}

TEST(Tensor, CopiesDoNotAlias) {
  Tensord a(Shape{2}, {1, 2});
  Tensord b = a;
  b.mutable_data()[0] = 7;
  EXPECT_EQ(a[0], 1);
  EXPECT_EQ(b[0], 7);
}

TEST(Tensor, TrackedTensorIsImmutable) {
  Tape<double> tape;
  auto x = tape.watch(Tensord(Shape{2}, {1, 2}));
  EXPECT_THROW(x.mutable_data(), std::logic_error);
}

TEST(Ops, MatmulIdentity) {
  Tensord a(Shape{2, 2}, {1, 2, 3, 4});
  Tensord id(Shape{2, 2}, {1, 0, 0, 1});
  const auto c = matmul(a, id);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Ops, SigmoidOfZeroIsHalf) { EXPECT_EQ(sigmoid(Tensord::scalar(0)).item(), 0.5); }

TEST(Ops, SoftmaxOfUniformLogits) {
  const auto p = softmax(Tensord(Shape{3}, {1, 1, 1}));
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  Tensord a(Shape{2, 3}), b(Shape{2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensord(Shape{2, 3}), Tensord(Shape{2})), ShapeError);
  EXPECT_THROW(concat<double>({Tensord(Shape{2, 3}), Tensord(Shape{3, 3})}), ShapeError);
}

TEST(Ops, NonFiniteInputRejectedInDebugMode) {
  debug::set_finite_checks(true);
  Tensord bad(Shape{2}, {1.0, std::nan("")});
  EXPECT_THROW(sigmoid(bad), NumericError);
  debug::set_finite_checks(false);
  EXPECT_NO_THROW(sigmoid(bad));
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  const auto y = layer_norm(Tensord(Shape{4}, {5, 5, 5, 5}), Tensord(Shape{4}, 1.0), Tensord(Shape{4}, 0.0), 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVarianceInputIsUnchanged) {
  const auto y = layer_norm(Tensord(Shape{2}, {1, -1}), Tensord(Shape{2}, 1.0), Tensord(Shape{2}, 0.0), 0.0);
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], -1.0);
}

TEST(LayerNorm, GainAndBias) {
  // mean 3, var 1: ((2-3)*3+1, (4-3)*3+1)
  const auto y = layer_norm(Tensord(Shape{2}, {2, 4}), Tensord(Shape{2}, 3.0), Tensord(Shape{2}, 1.0), 0.0);
  EXPECT_EQ(y[0], -2.0);
  EXPECT_EQ(y[1], 4.0);
}

TEST(LayerNorm, NormalizedSlicesHaveZeroMeanUnitVariance) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor(rng, Shape{3, 17}, 5.0);
    const auto y = layer_norm(x, Tensord(Shape{17}, 1.0), Tensord(Shape{17}, 0.0), 1e-14);
    for (std::size_t r = 0; r < 3; ++r) {
      double m = 0, v = 0;
      for (std::size_t j = 0; j < 17; ++j) m += y[r * 17 + j];
      m /= 17;
      for (std::size_t j = 0; j < 17; ++j) v += (y[r * 17 + j] - m) * (y[r * 17 + j] - m);
      v /= 17;
      EXPECT_LT(std::abs(m), 1e-10);
      EXPECT_NEAR(v, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, RowsSumToOneUnderMasks) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_tensor(rng, Shape{2, 4, 6}, 3.0);
    Tensord mask(Shape{6}, 0.0);
    mask.mutable_data()[trial % 6] = -1e9;
    mask.mutable_data()[(trial + 2) % 6] = -1e9;
    const auto p = softmax(x, &mask);
    for (std::size_t r = 0; r < 8; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_GE(p[r * 6 + j], 0.0);
        s += p[r * 6 + j];
        if (mask[j] <= -1e9) {
          EXPECT_LT(p[r * 6 + j], 1e-12);
        }
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Backward, SumOfSquares) {
  Tape<double> tape;
  auto x = tape.watch(Tensord(Shape{3}, {1, 2, 3}));
  const auto g = tape.backward(sum(mul(x, x)));
  const auto& gx = g.at(x);
  EXPECT_EQ(gx[0], 2);
  EXPECT_EQ(gx[1], 4);
  EXPECT_EQ(gx[2], 6);
}

TEST(Backward, SigmoidSlopeAtZero) {
  Tape<double> tape;
  auto w = tape.watch(Tensord::scalar(0));
  EXPECT_EQ(tape.backward(sigmoid(w)).at(w).item(), 0.25);
}

TEST(Backward, FanOutAccumulates) {
  Tape<double> tape;
  auto x = tape.watch(Tensord(Shape{4}, {1, -2, 3, 0.5}));
  const auto g = tape.backward(add(sum(x), sum(x)));
  for (double v : g.at(x).data()) EXPECT_EQ(v, 2.0);
}

TEST(Backward, UnreachableNodesAreAbsent) {
  Tape<double> tape;
  auto x = tape.watch(Tensord(Shape{2}, 1.0));
  auto y = tape.watch(Tensord(Shape{2}, 1.0));
  auto unused = sigmoid(y);
  const auto g = tape.backward(sum(x));
  EXPECT_TRUE(g.contains(x));
  EXPECT_FALSE(g.contains(y));
  EXPECT_FALSE(g.contains(unused));
}

TEST(Backward, RejectsNonScalarRoot) {
  Tape<double> tape;
  auto x = tape.watch(Tensord(Shape{2}, 1.0));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Backward, ClearedTapeInvalidatesHandles) {
  Tape<double> tape;
  auto x = tape.watch(Tensord(Shape{2}, 1.0));
  tape.clear();
  EXPECT_THROW(sigmoid(x), std::logic_error);
}

TEST(Backward, UntappedTensorsReceiveNoGradient) {
  Tape<double> tape;
  auto x = tape.watch(Tensord(Shape{2}, 1.0));
  Tensord c(Shape{2}, 3.0);
  const auto g = tape.backward(sum(mul(x, c)));
  EXPECT_FALSE(g.contains(c));
  EXPECT_EQ(g.at(x)[0], 3.0);
}

TEST(FiniteDifference, LinearFunctionGivesOnes) {
  Rng rng(3);
  const auto x = random_tensor(rng, Shape{5});
  const auto g = finite_difference_gradient([](const Tensord& t) { return sum(t).item(); }, x);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, Square) {
  const auto g = finite_difference_gradient([](const Tensord& t) { return sum(mul(t, t)).item(); }, Tensord(Shape{1}, {3.0}));
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDifference, ReportsNonFiniteCoordinate) {
  auto f = [](const Tensord& t) { return t[1] > 0.5 ? std::log(-1.0) : 0.0; };
  try {
    finite_difference_gradient(f, Tensord(Shape{3}, {0.0, 0.5, 0.0}), 1e-3);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
}

// Property: every primitive's backward agrees with central differences at
// several random shapes.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  Rng rng(1000 + GetParam());
  const std::size_t a = 1 + rng.uniform_int(3), b = 1 + rng.uniform_int(4), c = 1 + rng.uniform_int(4), d = 2 + rng.uniform_int(4);
  using V = std::vector<Tensord>;

  expect_gradients_match({random_tensor(rng, Shape{a, b, c}), random_tensor(rng, Shape{c, d})},
                         [](const V& x) { return matmul(x[0], x[1]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, c}), random_tensor(rng, Shape{a, c, d})},
                         [](const V& x) { return matmul(x[0], x[1]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, c}), random_tensor(rng, Shape{c})},
                         [](const V& x) { return add(x[0], x[1]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{b, c}), random_tensor(rng, Shape{})},
                         [](const V& x) { return add(x[0], x[1]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, c}), random_tensor(rng, Shape{b, c})},
                         [](const V& x) { return mul(x[0], x[1]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{b, c})}, [](const V& x) { return scale(x[0], -1.7); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{b, c}), random_tensor(rng, Shape{b, d})},
                         [](const V& x) { return concat(x); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{b, c}), random_tensor(rng, Shape{d, c})},
                         [](const V& x) { return concat(x, 0); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, d})},
                         [](const V& x) { return slice(x[0], 2, 1, x[0].dim(2)); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, c})},
                         [&](const V& x) { return reshape(x[0], Shape{a * b * c}); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, c})}, [](const V& x) { return transpose(x[0]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, c})}, [](const V& x) { return mean(x[0], 1); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{a, b, c})}, [](const V& x) { return sum(x[0]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{b, c}, 2.0)}, [](const V& x) { return gelu(x[0]); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{b, c}, 2.0)}, [](const V& x) { return sigmoid(x[0]); }, rng);
  Tensord mask(Shape{d}, 0.0);
  mask.mutable_data()[0] = -1e9;
  expect_gradients_match({random_tensor(rng, Shape{a, b, d})}, [&](const V& x) { return softmax(x[0], &mask); }, rng);
  expect_gradients_match({random_tensor(rng, Shape{b, d}, 3.0), random_tensor(rng, Shape{d}), random_tensor(rng, Shape{d})},
                         [](const V& x) { return layer_norm(x[0], x[1], x[2], 1e-5); }, rng);
  const std::vector<int> ids{0, 2, 1, 2};
  expect_gradients_match({random_tensor(rng, Shape{3, d})}, [&](const V& x) { return embedding(x[0], std::span<const int>(ids)); }, rng);
  const std::vector<int> targets{1, kIgnoreLabel, 0};
  expect_gradients_match({random_tensor(rng, Shape{3, d})},
                         [&](const V& x) { return cross_entropy(x[0], std::span<const int>(targets)); }, rng);
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, PrimitiveGradients, ::testing::Range(0, 6));

TEST(CrossEntropy, AllIgnoredIsRejected) {
  const std::vector<int> t{kIgnoreLabel};
  EXPECT_THROW(cross_entropy(Tensord(Shape{1, 3}), std::span<const int>(t)), std::invalid_argument);
}
