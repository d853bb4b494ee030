#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "livesketch/numerics/errors.hpp"
#include "livesketch/numerics/layers.hpp"
#include "livesketch/numerics/ops.hpp"
#include "livesketch/numerics/params.hpp"
#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

namespace ls = livesketch;
namespace nn = livesketch::nn;
using ls::testing::check_input_gradients;

using ls::testing::random_tensor;

TEST(Tensor, RejectsMismatchedValueCount) {
  EXPECT_THROW(nn::Tensor({2, 2}, std::vector<double>{1, 2, 3}), ls::DimensionError);
  EXPECT_THROW(nn::Tensor({0, 2}), ls::DimensionError);
}

TEST(Ops, MatmulIdentity) {
  nn::Rng rng(1);
  nn::Tape tape;
  const nn::Tensor a = random_tensor(rng, 3, 3);
  nn::Var out = nn::matmul(tape.constant(nn::Tensor::identity(3)), tape.constant(a));
  EXPECT_EQ(out.value(), a);
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  nn::Tape tape;
  nn::Var s = nn::softmax_rows(tape.constant(nn::Tensor::row({0, 0, 0})));
  for (double v : s.value().values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, SoftmaxRowsSumToOneAndArePositive) {
  nn::Rng rng(2);
  nn::Tape tape;
  nn::Var s = nn::softmax_rows(tape.constant(random_tensor(rng, 20, 7, -30, 30)));
  for (std::size_t r = 0; r < 20; ++r) {
    double total = 0;
    for (double v : s.value().row_span(r)) {
      EXPECT_GT(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Ops, SquaredDistanceOfMatchingVectorsIsZero) {
  nn::Rng rng(3);
  nn::Tape tape;
  const nn::Tensor a = random_tensor(rng, 4, 6);
  nn::Var d = nn::squared_distance_rows(tape.constant(a), tape.constant(a));
  for (double v : d.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, ShapeMismatchReportsBothShapes) {
  nn::Tape tape;
  nn::Var a = tape.constant(nn::Tensor({2, 3}));
  nn::Var b = tape.constant(nn::Tensor({2, 3}));
  try {
    nn::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const ls::DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("and [2, 3]"), std::string::npos);
  }
  EXPECT_THROW(nn::add(a, tape.constant(nn::Tensor({3, 2}))), ls::DimensionError);
}

TEST(Backward, SumGivesOnes) {
  nn::Rng rng(4);
  nn::Tape tape;
  nn::Var x = tape.leaf(random_tensor(rng, 3, 5));
  tape.backward(nn::sum(x));
  const nn::Tensor g = tape.grad(x);
  for (double v : g.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquaredDistanceGradientIsAnalytic) {
  nn::Rng rng(5);
  nn::Tape tape;
  const nn::Tensor xv = random_tensor(rng, 1, 8);
  const nn::Tensor cv = random_tensor(rng, 1, 8);
  nn::Var x = tape.leaf(xv);
  tape.backward(nn::sum(nn::squared_distance_rows(x, tape.constant(cv))));
  const nn::Tensor g = tape.grad(x);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(g[i], 2 * (xv[i] - cv[i]), 1e-15);
}

TEST(Backward, NonScalarRootIsContractError) {
  nn::Tape tape;
  nn::Var x = tape.leaf(nn::Tensor({2, 2}, 1.0));
  EXPECT_THROW(tape.backward(nn::tanh(x)), ls::ContractError);
}

TEST(Backward, VisitsEachNodeOnceAndIsBitDeterministic) {
  nn::Rng rng(6);
  const nn::Tensor xv = random_tensor(rng, 3, 4);
  const nn::Tensor wv = random_tensor(rng, 4, 2);
  auto run = [&](std::size_t* visits, std::size_t* nodes) {
    nn::Tape tape;
    nn::Var x = tape.leaf(xv);
    nn::Var w = tape.leaf(wv);
    nn::Var h = nn::tanh(nn::matmul(x, w));
    nn::Var root = nn::sum(nn::mul(h, nn::sigmoid(h)));
    tape.backward(root);
    *visits = tape.backward_visits();
    *nodes = tape.node_count();
    return std::make_pair(tape.grad(x), tape.grad(w));
  };
  std::size_t v1, n1, v2, n2;
  auto g1 = run(&v1, &n1);
  auto g2 = run(&v2, &n2);
  EXPECT_EQ(v1, n1);
  EXPECT_EQ(g1.first, g2.first);
  EXPECT_EQ(g1.second, g2.second);
}

// Each differentiable op against central differences (step 1e-5).
class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const auto c = ls::testing::op_cases()[GetParam()];
  EXPECT_LE(check_input_gradients(c.fn, c.inputs), 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, ls::testing::op_cases().size()));

TEST(Backward, RandomCompositeGraphMatchesFiniteDifferences) {
  for (int trial = 0; trial < 5; ++trial) {
    nn::Rng rng(200 + trial);
    const auto x = random_tensor(rng, 4, 6);
    const auto w1 = random_tensor(rng, 6, 5);
    const auto w2 = random_tensor(rng, 5, 3);
    const auto target = random_tensor(rng, 1, 3);
    const double err = check_input_gradients(
        [&](nn::Tape& t, const std::vector<nn::Var>& v) {
          nn::Var h = nn::tanh(nn::matmul(v[0], v[1]));
          nn::Var s = nn::l2_normalize_rows(nn::matmul(nn::sigmoid(h), v[2]));
          nn::Var d = nn::squared_distance_rows(s, t.constant(target));
          return nn::add(nn::sum(nn::exp(nn::scale(d, 0.5))), nn::mean(nn::softmax_rows(h)));
        },
        {x, w1, w2});
    EXPECT_LE(err, 1e-4) << "trial " << trial;
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  nn::ParameterStore store;
  nn::Rng rng(9);
  auto& p = store.create_normal("w", {3, 3}, 1.0, rng);
  const nn::Tensor before = p.value;
  nn::Adam adam(store.all(), {});
  for (int i = 0; i < 10; ++i) {
    p.zero_grad();
    adam.step();
  }
  EXPECT_EQ(p.value, before);
  EXPECT_EQ(adam.step_count(), 10u);
}

TEST(Adam, ConstantGradientMovesAgainstItsSign) {
  nn::ParameterStore store;
  auto& p = store.create("w", nn::Tensor::row({0.0, 0.0}));
  nn::Adam adam(store.all(), {.learning_rate = 0.01});
  double prev0 = 0, prev1 = 0;
  for (int i = 0; i < 50; ++i) {
    p.grad = nn::Tensor::row({2.0, -0.5});
    adam.step();
    EXPECT_LT(p.value[0], prev0);
    EXPECT_GT(p.value[1], prev1);
    prev0 = p.value[0];
    prev1 = p.value[1];
  }
}

TEST(Adam, QuadraticBowlConvergesToClosedFormMinimum) {
  // f(w) = sum_i a_i (w_i - c_i)^2 has its minimum at w = c.
  const std::vector<double> a{1.0, 4.0, 0.25, 2.0};
  const std::vector<double> c{0.7, -1.3, 2.0, 0.1};
  nn::ParameterStore store;
  auto& p = store.create("w", nn::Tensor({1, 4}, 0.0));
  nn::Adam adam(store.all(), {.learning_rate = 0.01});
  int steps = 0;
  for (; steps < 5000; ++steps) {
    p.zero_grad();
    for (std::size_t i = 0; i < 4; ++i) p.grad[i] = 2 * a[i] * (p.value[i] - c[i]);
    adam.step();
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p.value[i], c[i], 1e-3);
}

TEST(Adam, ShapeMismatchIsDimensionError) {
  nn::ParameterStore store;
  auto& p = store.create("w", nn::Tensor({2, 2}, 0.0));
  nn::Adam adam(store.all(), {});
  p.grad = nn::Tensor({1, 4}, 1.0);
  EXPECT_THROW(adam.step(), ls::DimensionError);
}

TEST(Checkpoint, RoundTripIsLossless) {
  nn::ParameterStore store;
  nn::Rng rng(11);
  store.create_normal("a.weight", {3, 7}, 1.0, rng);
  store.create_normal("b", {1, 5}, 1e-300, rng);
  store.at("b").value[0] = std::nextafter(1.0, 2.0);
  const auto path = std::filesystem::temp_directory_path() / "livesketch_ckpt_test.bin";
  nn::Checkpoint::from(store).save(path);

  nn::ParameterStore other;
  other.create("a.weight", nn::Tensor({3, 7}));
  other.create("b", nn::Tensor({1, 5}));
  nn::Checkpoint::load(path).apply(other);
  EXPECT_EQ(other.at("a.weight").value, store.at("a.weight").value);
  EXPECT_EQ(other.at("b").value, store.at("b").value);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchOnApplyIsRejected) {
  nn::ParameterStore store;
  store.create("w", nn::Tensor({2, 2}, 1.0));
  nn::Checkpoint c = nn::Checkpoint::from(store);
  nn::ParameterStore other;
  other.create("w", nn::Tensor({2, 3}));
  EXPECT_THROW(c.apply(other), ls::DimensionError);
  EXPECT_THROW(nn::Checkpoint::deserialize("garbage"), std::runtime_error);
}

TEST(Layers, LstmCellGradientsMatchFiniteDifferences) {
  nn::ParameterStore store;
  nn::Rng rng(12);
  auto cell = nn::LstmCell::create(store, "cell", 3, 4, rng);
  auto head = nn::Linear::create(store, "head", 4, 2, rng);
  const auto x0 = random_tensor(rng, 2, 3);
  const auto x1 = random_tensor(rng, 2, 3);
  const double err = ls::testing::check_parameter_gradients(store, [&](nn::Tape& t) {
    nn::Binder b(t);
    nn::Var h = t.constant(nn::Tensor({2, 4}, 0.0));
    nn::Var c = h;
    std::tie(h, c) = cell.step(b, t.constant(x0), h, c);
    std::tie(h, c) = cell.step(b, t.constant(x1), h, c);
    return nn::sum(nn::square(head(b, h)));
  });
  EXPECT_LE(err, 1e-4);
}
