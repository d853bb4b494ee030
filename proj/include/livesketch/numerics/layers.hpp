#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "livesketch/numerics/ops.hpp"
#include "livesketch/numerics/params.hpp"

namespace livesketch::nn {

/// Affine map x W + b with W: [in, out].
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       double gain = 1.0) {
    Linear l;
    l.weight = &store.create_normal(name + ".weight", {in, out}, gain / std::sqrt(double(in)), rng);
    l.bias = &store.create(name + ".bias", Tensor({1, out}, 0.0));
    return l;
  }

  static Linear bind(ParameterStore& store, const std::string& name) {
    return {&store.at(name + ".weight"), &store.at(name + ".bias")};
  }

  std::size_t in_features() const { return weight->value.rows(); }
  std::size_t out_features() const { return weight->value.cols(); }

  Var operator()(Binder& b, Var x) const { return add(matmul(x, b(*weight)), b(*bias)); }
};

/// LSTM cell with fused gate weights [in + hidden, 4 * hidden], gate order i, f, g, o.
struct LstmCell {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  std::size_t hidden = 0;

  static LstmCell create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                         Rng& rng) {
    LstmCell c;
    c.hidden = hidden;
    c.weight = &store.create_normal(name + ".weight", {in + hidden, 4 * hidden}, 1.0 / std::sqrt(double(in + hidden)),
                                    rng);
    Tensor bias({1, 4 * hidden}, 0.0);
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias[j] = 1.0;  // forget gate
    c.bias = &store.create(name + ".bias", std::move(bias));
    return c;
  }

  static LstmCell bind(ParameterStore& store, const std::string& name) {
    LstmCell c;
    c.weight = &store.at(name + ".weight");
    c.bias = &store.at(name + ".bias");
    c.hidden = c.bias->value.cols() / 4;
    return c;
  }

  std::size_t in_features() const { return weight->value.rows() - hidden; }

  /// One step; returns (h, c).
  std::pair<Var, Var> step(Binder& b, Var x, Var h, Var c) const {
    Var gates = add(matmul(concat_cols({x, h}), b(*weight)), b(*bias));
    Var i = sigmoid(slice_cols(gates, 0, hidden));
    Var f = sigmoid(slice_cols(gates, hidden, hidden));
    Var g = tanh(slice_cols(gates, 2 * hidden, hidden));
    Var o = sigmoid(slice_cols(gates, 3 * hidden, hidden));
    Var c_next = add(mul(f, c), mul(i, g));
    Var h_next = mul(o, tanh(c_next));
    return {h_next, c_next};
  }
};

/// 3x3 convolution followed by relu.
struct ConvLayer {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  ConvGeometry geometry;

  static ConvLayer create(ParameterStore& store, const std::string& name, const ConvGeometry& geometry,
                          std::size_t out_channels, Rng& rng) {
    ConvLayer l;
    l.geometry = geometry;
    const std::size_t fan_in = geometry.in_channels * geometry.kernel * geometry.kernel;
    l.weight = &store.create_normal(name + ".weight", {fan_in, out_channels}, std::sqrt(2.0 / double(fan_in)), rng);
    l.bias = &store.create(name + ".bias", Tensor({1, out_channels}, 0.0));
    return l;
  }

  std::size_t out_channels() const { return weight->value.cols(); }
  ConvGeometry next_geometry(std::size_t stride) const {
    return {out_channels(), geometry.out_height(), geometry.out_width(), geometry.kernel, stride, geometry.pad};
  }

  Var operator()(Binder& b, Var x) const { return relu(conv2d(x, b(*weight), b(*bias), geometry)); }
};

}  // namespace livesketch::nn
