#pragma once

#include <span>
#include <vector>

#include "livesketch/numerics/tape.hpp"

namespace livesketch::nn {

// Elementwise binary ops broadcast the second operand when its row count is
// 1 or matches, and its column count is 1 or matches. The result takes the
// first operand's shape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
Var clamp_max(Var a, double limit);

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t start, std::size_t count);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Each row divided by its L2 norm.
Var l2_normalize_rows(Var a);
/// Per-row squared L2 distance, shape [rows, 1]. `b` may be a single row.
Var squared_distance_rows(Var a, Var b);

Var sum(Var a);
Var mean(Var a);
/// Per-row sum, shape [rows, 1].
Var sum_rows(Var a);

/// Sum over rows of -log softmax(logits)[row, label].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
/// Sum of weight * binary cross-entropy between sigmoid(logits) and targets.
Var bce_with_logits(Var logits, const Tensor& targets, const Tensor& weights);

/// Geometry of a square-kernel 2-D convolution over channel-major rows.
struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

/// x: [batch, C*H*W]; weight: [C*k*k, out_channels]; bias: [1, out_channels].
/// Returns [batch, out_channels*Ho*Wo].
Var conv2d(Var x, Var weight, Var bias, const ConvGeometry& geometry);
/// x: [batch, channels*spatial] -> [batch, channels].
Var global_avg_pool(Var x, std::size_t channels);

}  // namespace livesketch::nn
