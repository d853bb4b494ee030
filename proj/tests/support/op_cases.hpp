#pragma once

// Every differentiable op as a scalar-valued gradient-check case on inputs
// in [-1, 1]. Shared by the unit tests and the acceptance gate.

#include <string>
#include <vector>

#include "livesketch/numerics/ops.hpp"
#include "support/gradcheck.hpp"

namespace livesketch::testing {

inline nn::Tensor random_tensor(nn::Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
  nn::Tensor t({rows, cols});
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

struct OpCase {
  std::string name;
  InputFn fn;
  std::vector<nn::Tensor> inputs;
};

inline std::vector<OpCase> op_cases(std::uint64_t seed = 100) {
  nn::Rng rng(seed);
  const auto a = random_tensor(rng, 3, 4);
  const auto b = random_tensor(rng, 3, 4);
  const auto w = random_tensor(rng, 4, 5);
  const auto row = random_tensor(rng, 1, 4);
  const auto col = random_tensor(rng, 3, 1);
  const auto pos = random_tensor(rng, 3, 4, 0.5, 1.5);
  // Non-scalar outputs are reduced with fixed random weights.
  const auto weighted = [](nn::Tape& t, nn::Var v) {
    nn::Rng wr(7);
    return nn::sum(nn::mul(v, t.constant(random_tensor(wr, v.rows(), v.cols()))));
  };
  using V = std::vector<nn::Var>;
  const auto unary = [&](std::string name, nn::Var (*op)(nn::Var), const nn::Tensor& x) {
    return OpCase{std::move(name), [=](nn::Tape& t, const V& v) { return weighted(t, op(v[0])); }, {x}};
  };
  const auto binary = [&](std::string name, nn::Var (*op)(nn::Var, nn::Var), const nn::Tensor& x,
                          const nn::Tensor& y) {
    return OpCase{std::move(name), [=](nn::Tape& t, const V& v) { return weighted(t, op(v[0], v[1])); }, {x, y}};
  };

  std::vector<OpCase> cases;
  cases.push_back(binary("matmul", nn::matmul, a, w));
  cases.push_back(binary("add (row broadcast)", nn::add, a, row));
  cases.push_back(binary("sub (column broadcast)", nn::sub, a, col));
  cases.push_back(binary("mul", nn::mul, a, b));
  cases.push_back(unary("tanh", nn::tanh, a));
  cases.push_back(unary("sigmoid", nn::sigmoid, a));
  cases.push_back(unary("relu", nn::relu, a));
  cases.push_back(unary("exp", nn::exp, a));
  cases.push_back(unary("log", nn::log, pos));
  cases.push_back(unary("sqrt", nn::sqrt, pos));
  cases.push_back(unary("square", nn::square, a));
  cases.push_back(unary("softmax_rows", nn::softmax_rows, a));
  cases.push_back(unary("log_softmax_rows", nn::log_softmax_rows, a));
  cases.push_back(unary("l2_normalize_rows", nn::l2_normalize_rows, a));
  cases.push_back(unary("sum_rows", nn::sum_rows, a));
  cases.push_back(binary("squared_distance_rows", nn::squared_distance_rows, a, row));
  cases.push_back({"clamp_max", [=](nn::Tape& t, const V& v) { return weighted(t, nn::clamp_max(v[0], 0.1)); }, {a}});
  cases.push_back(
      {"scale/add_scalar", [=](nn::Tape& t, const V& v) { return weighted(t, nn::scale(nn::add_scalar(v[0], 0.3), -1.7)); }, {a}});
  cases.push_back({"concat_cols", [=](nn::Tape& t, const V& v) { return weighted(t, nn::concat_cols({v[0], v[1]})); }, {a, col}});
  cases.push_back({"slice_cols", [=](nn::Tape& t, const V& v) { return weighted(t, nn::slice_cols(v[0], 1, 2)); }, {a}});
  cases.push_back({"concat_rows", [=](nn::Tape& t, const V& v) { return weighted(t, nn::concat_rows({v[0], v[1]})); }, {a, row}});
  cases.push_back({"slice_rows", [=](nn::Tape& t, const V& v) { return weighted(t, nn::slice_rows(v[0], 1, 2)); }, {a}});
  cases.push_back({"mean", [](nn::Tape&, const V& v) { return nn::mean(nn::square(v[0])); }, {a}});
  const std::vector<int> labels{0, 3, 1};
  cases.push_back({"softmax_cross_entropy", [=](nn::Tape&, const V& v) { return nn::softmax_cross_entropy(v[0], labels); }, {a}});
  nn::Tensor targets({3, 4}), weights({3, 4});
  for (std::size_t i = 0; i < 12; ++i) {
    targets[i] = double(i % 2);
    weights[i] = 0.5 + 0.1 * double(i % 3);
  }
  cases.push_back({"bce_with_logits", [=](nn::Tape&, const V& v) { return nn::bce_with_logits(v[0], targets, weights); }, {a}});
  const nn::ConvGeometry g{2, 5, 5, 3, 2, 1};
  cases.push_back({"conv2d",
                   [=](nn::Tape& t, const V& v) { return weighted(t, nn::conv2d(v[0], v[1], v[2], g)); },
                   {random_tensor(rng, 2, 2 * 25), random_tensor(rng, 2 * 9, 3), random_tensor(rng, 1, 3)}});
  cases.push_back({"global_avg_pool", [=](nn::Tape& t, const V& v) { return weighted(t, nn::global_avg_pool(v[0], 2)); }, {a}});
  return cases;
}

}  // namespace livesketch::testing
