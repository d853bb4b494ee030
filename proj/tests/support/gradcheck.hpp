#pragma once

// Central finite-difference oracle for the autodiff engine. Test-only: it
// touches nothing but forward evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "livesketch/numerics/params.hpp"

namespace livesketch::testing {

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

using InputFn = std::function<nn::Var(nn::Tape&, const std::vector<nn::Var>&)>;

/// Max relative error between autodiff and central differences for every
/// element of every input tensor.
inline double check_input_gradients(const InputFn& f, std::vector<nn::Tensor> inputs, double step = 1e-5) {
  std::vector<nn::Tensor> analytic;
  {
    nn::Tape tape;
    std::vector<nn::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    nn::Var root = f(tape, vars);
    tape.backward(root);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<nn::Tensor>& xs) {
    nn::Tape tape(nn::Tape::Mode::Inference);
    std::vector<nn::Var> vars;
    for (const auto& t : xs) vars.push_back(tape.constant(t));
    return f(tape, vars).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + step;
      const double up = eval(inputs);
      inputs[k][i] = orig - step;
      const double down = eval(inputs);
      inputs[k][i] = orig;
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2 * step)));
    }
  }
  return worst;
}

using LossFn = std::function<nn::Var(nn::Tape&)>;

/// Same check over model parameters. At most `per_param` entries of each
/// parameter are probed, chosen with a fixed stride.
inline double check_parameter_gradients(nn::ParameterStore& store, const LossFn& loss, std::size_t per_param = 0,
                                        double step = 1e-5) {
  store.zero_grad();
  {
    nn::Tape tape;
    nn::Var root = loss(tape);
    tape.backward(root);
  }
  auto eval = [&] {
    nn::Tape tape(nn::Tape::Mode::Inference);
    return loss(tape).item();
  };
  double worst = 0.0;
  for (nn::Parameter* p : store.all()) {
    const std::size_t n = p->value.size();
    const std::size_t stride = per_param == 0 || n <= per_param ? 1 : n / per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p->value[i];
      p->value[i] = orig + step;
      const double up = eval();
      p->value[i] = orig - step;
      const double down = eval();
      p->value[i] = orig;
      worst = std::max(worst, relative_error(p->grad[i], (up - down) / (2 * step)));
    }
  }
  return worst;
}

}  // namespace livesketch::testing
