#include "livesketch/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "livesketch/numerics/errors.hpp"

namespace livesketch::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC as_matrix(const Tensor& t) { return MapC(t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())); }
Map as_matrix(Tensor& t) { return Map(t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())); }

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

Tensor matrix_like(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}, 0.0); }

// Index of b's element broadcast against a [rows, cols] operand.
struct Broadcast {
  std::size_t row_stride;
  std::size_t col_stride;
  std::size_t operator()(std::size_t r, std::size_t c) const { return r * row_stride + c * col_stride; }
};

Broadcast broadcast_of(const char* op, const Tensor& a, const Tensor& b) {
  const bool rows_ok = b.rows() == a.rows() || b.rows() == 1;
  const bool cols_ok = b.cols() == a.cols() || b.cols() == 1;
  if (!rows_ok || !cols_ok) shape_error(op, a, b);
  return {b.rows() == 1 ? 0 : b.cols(), b.cols() == 1 ? 0 : std::size_t{1}};
}

// Accumulates a broadcast gradient back into the smaller operand.
void accumulate_broadcast(Tensor& dst, const Tensor& src, const Broadcast& bc, double factor) {
  const std::size_t rows = src.rows(), cols = src.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[bc(r, c)] += factor * src[r * cols + c];
  }
}

// Unary elementwise op whose derivative is expressed from input x and output y.
template <typename F, typename D>
Var unary(OpKind kind, Var a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape()->record(kind, std::move(y), {a}, [dfdx](Tape& t, std::size_t self) {
    const auto in = t.node(self).inputs[0];
    if (!t.needs_grad(in)) return;
    const Tensor& x = t.node(in).value;
    const Tensor& y = t.node(self).value;
    const Tensor& g = t.node(self).grad;
    Tensor& dx = t.grad_buffer(in);
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Tensor out = matrix_like(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return a.tape()->record(OpKind::MatMul, std::move(out), {a, b}, [](Tape& t, std::size_t self) {
    const auto ia = t.node(self).inputs[0];
    const auto ib = t.node(self).inputs[1];
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      Tensor& da = t.grad_buffer(ia);
      as_matrix(da).noalias() += as_matrix(g) * as_matrix(t.node(ib).value).transpose();
    }
    if (t.needs_grad(ib)) {
      Tensor& db = t.grad_buffer(ib);
      as_matrix(db).noalias() += as_matrix(t.node(ia).value).transpose() * as_matrix(g);
    }
  });
}

namespace {

Var add_like(OpKind kind, Var a, Var b, double sign) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast_of(kind == OpKind::Add ? "add" : "sub", av, bv);
  Tensor out = av;
  const std::size_t rows = av.rows(), cols = av.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += sign * bv[bc(r, c)];
  }
  return a.tape()->record(kind, std::move(out), {a, b}, [bc, sign](Tape& t, std::size_t self) {
    const auto ia = t.node(self).inputs[0];
    const auto ib = t.node(self).inputs[1];
    const Tensor& g = t.node(self).grad;
    if (t.needs_grad(ia)) {
      Tensor& da = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    }
    if (t.needs_grad(ib)) accumulate_broadcast(t.grad_buffer(ib), g, bc, sign);
  });
}

}  // namespace

Var add(Var a, Var b) {
  if (a.value().size() < b.value().size()) std::swap(a, b);
  return add_like(OpKind::Add, a, b, 1.0);
}

Var sub(Var a, Var b) { return add_like(OpKind::Sub, a, b, -1.0); }

Var mul(Var a, Var b) {
  if (a.value().size() < b.value().size()) std::swap(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast_of("mul", av, bv);
  Tensor out = av;
  const std::size_t rows = av.rows(), cols = av.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= bv[bc(r, c)];
  }
  return a.tape()->record(OpKind::Mul, std::move(out), {a, b}, [bc](Tape& t, std::size_t self) {
    const auto ia = t.node(self).inputs[0];
    const auto ib = t.node(self).inputs[1];
    const Tensor& g = t.node(self).grad;
    const Tensor& av = t.node(ia).value;
    const Tensor& bv = t.node(ib).value;
    const std::size_t rows = av.rows(), cols = av.cols();
    if (t.needs_grad(ia)) {
      Tensor& da = t.grad_buffer(ia);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) da[r * cols + c] += g[r * cols + c] * bv[bc(r, c)];
      }
    }
    if (t.needs_grad(ib)) {
      Tensor& db = t.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) db[bc(r, c)] += g[r * cols + c] * av[r * cols + c];
      }
    }
  });
}

Var scale(Var a, double s) {
  return unary(OpKind::Scale, a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(OpKind::AddScalar, a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var tanh(Var a) {
  return unary(OpKind::Tanh, a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      OpKind::Sigmoid, a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary(OpKind::Relu, a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
  return unary(OpKind::Exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(OpKind::Log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary(OpKind::Sqrt, a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / y; });
}

Var square(Var a) {
  return unary(OpKind::Square, a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp_max(Var a, double limit) {
  return unary(OpKind::ClampMax, a, [limit](double x) { return std::min(x, limit); },
               [limit](double x, double) { return x < limit ? 1.0 : 0.0; });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Tensor out = matrix_like(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * v.cols(), v.cols(), out.data() + r * cols + offset);
    }
    offset += v.cols();
  }
  return parts[0].tape()->record(OpKind::ConcatCols, std::move(out), parts, [](Tape& t, std::size_t self) {
    const Tensor& g = t.node(self).grad;
    const std::size_t rows = g.rows(), cols = g.cols();
    std::size_t offset = 0;
    for (std::size_t in : t.node(self).inputs) {
      const std::size_t w = t.node(in).value.cols();
      if (t.needs_grad(in)) {
        Tensor& d = t.grad_buffer(in);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < w; ++c) d[r * w + c] += g[r * cols + offset + c];
        }
      }
      offset += w;
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& v = a.value();
  if (count == 0 || start + count > v.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for shape " + shape_string(v.shape()));
  }
  const std::size_t rows = v.rows(), cols = v.cols();
  Tensor out = matrix_like(rows, count);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.data() + r * cols + start, count, out.data() + r * count);
  return a.tape()->record(OpKind::SliceCols, std::move(out), {a}, [start, count](Tape& t, std::size_t self) {
    const auto in = t.node(self).inputs[0];
    const Tensor& g = t.node(self).grad;
    Tensor& d = t.grad_buffer(in);
    const std::size_t cols = d.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < count; ++c) d[r * cols + start + c] += g[r * count + c];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_error("concat_rows", parts[0].value(), p.value());
    rows += p.rows();
  }
  std::vector<double> values;
  values.reserve(rows * cols);
  for (const Var& p : parts) values.insert(values.end(), p.value().storage().begin(), p.value().storage().end());
  return parts[0].tape()->record(OpKind::ConcatRows, Tensor({rows, cols}, std::move(values)), parts,
                                 [](Tape& t, std::size_t self) {
                                   const Tensor& g = t.node(self).grad;
                                   std::size_t offset = 0;
                                   for (std::size_t in : t.node(self).inputs) {
                                     const std::size_t n = t.node(in).value.size();
                                     if (t.needs_grad(in)) {
                                       Tensor& d = t.grad_buffer(in);
                                       for (std::size_t i = 0; i < n; ++i) d[i] += g[offset + i];
                                     }
                                     offset += n;
                                   }
                                 });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& v = a.value();
  if (count == 0 || start + count > v.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of range for shape " + shape_string(v.shape()));
  }
  const std::size_t cols = v.cols();
  std::vector<double> values(v.data() + start * cols, v.data() + (start + count) * cols);
  return a.tape()->record(OpKind::SliceRows, Tensor({count, cols}, std::move(values)), {a},
                          [start, cols](Tape& t, std::size_t self) {
                            const auto in = t.node(self).inputs[0];
                            const Tensor& g = t.node(self).grad;
                            Tensor& d = t.grad_buffer(in);
                            for (std::size_t i = 0; i < g.size(); ++i) d[start * cols + i] += g[i];
                          });
}

Var softmax_rows(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= s;
  }
  return a.tape()->record(OpKind::SoftmaxRows, std::move(y), {a}, [](Tape& t, std::size_t self) {
    const auto in = t.node(self).inputs[0];
    const Tensor& y = t.node(self).value;
    const Tensor& g = t.node(self).grad;
    Tensor& d = t.grad_buffer(in);
    const std::size_t rows = y.rows(), cols = y.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var log_softmax_rows(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = xr[c] - lse;
  }
  return a.tape()->record(OpKind::LogSoftmaxRows, std::move(y), {a}, [](Tape& t, std::size_t self) {
    const auto in = t.node(self).inputs[0];
    const Tensor& y = t.node(self).value;
    const Tensor& g = t.node(self).grad;
    Tensor& d = t.grad_buffer(in);
    const std::size_t rows = y.rows(), cols = y.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gs;
    }
  });
}

Var l2_normalize_rows(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor y(x.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c] * x[r * cols + c];
    // A zero row has no direction; it stays zero.
    norms[r] = s > 0 ? std::sqrt(s) : 1.0;
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = x[r * cols + c] / norms[r];
  }
  return a.tape()->record(OpKind::L2NormalizeRows, std::move(y), {a},
                          [norms = std::move(norms)](Tape& t, std::size_t self) {
                            const auto in = t.node(self).inputs[0];
                            const Tensor& y = t.node(self).value;
                            const Tensor& g = t.node(self).grad;
                            Tensor& d = t.grad_buffer(in);
                            const std::size_t rows = y.rows(), cols = y.cols();
                            for (std::size_t r = 0; r < rows; ++r) {
                              double dot = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                              for (std::size_t c = 0; c < cols; ++c) {
                                d[r * cols + c] += (g[r * cols + c] - y[r * cols + c] * dot) / norms[r];
                              }
                            }
                          });
}

Var squared_distance_rows(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols() || (bv.rows() != av.rows() && bv.rows() != 1)) {
    shape_error("squared_distance_rows", av, bv);
  }
  const std::size_t rows = av.rows(), cols = av.cols();
  const std::size_t bstride = bv.rows() == 1 ? 0 : cols;
  Tensor out = matrix_like(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double diff = av[r * cols + c] - bv[r * bstride + c];
      s += diff * diff;
    }
    out[r] = s;
  }
  return a.tape()->record(OpKind::SquaredDistanceRows, std::move(out), {a, b},
                          [bstride](Tape& t, std::size_t self) {
                            const auto ia = t.node(self).inputs[0];
                            const auto ib = t.node(self).inputs[1];
                            const Tensor& av = t.node(ia).value;
                            const Tensor& bv = t.node(ib).value;
                            const Tensor& g = t.node(self).grad;
                            const std::size_t rows = av.rows(), cols = av.cols();
                            const bool ga = t.needs_grad(ia), gb = t.needs_grad(ib);
                            Tensor* da = ga ? &t.grad_buffer(ia) : nullptr;
                            Tensor* db = gb ? &t.grad_buffer(ib) : nullptr;
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = 0; c < cols; ++c) {
                                const double v = 2.0 * g[r] * (av[r * cols + c] - bv[r * bstride + c]);
                                if (da) (*da)[r * cols + c] += v;
                                if (db) (*db)[r * bstride + c] -= v;
                              }
                            }
                          });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  return a.tape()->record(OpKind::Sum, Tensor::scalar(s), {a}, [](Tape& t, std::size_t self) {
    const auto in = t.node(self).inputs[0];
    const double g = t.node(self).grad[0];
    Tensor& d = t.grad_buffer(in);
    for (auto& v : d.storage()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / double(a.value().size())); }

Var sum_rows(Var a) {
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  Tensor out = matrix_like(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
    out[r] = s;
  }
  return a.tape()->record(OpKind::SumRows, std::move(out), {a}, [](Tape& t, std::size_t self) {
    const auto in = t.node(self).inputs[0];
    const Tensor& g = t.node(self).grad;
    Tensor& d = t.grad_buffer(in);
    const std::size_t cols = d.cols();
    for (std::size_t r = 0; r < d.rows(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g[r];
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& x = logits.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  if (labels.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(x.shape()));
  }
  Tensor probs(x.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || std::size_t(labels[r]) >= cols) throw ContractError("softmax_cross_entropy: label out of range");
    const double* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (probs[r * cols + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= s;
    loss -= xr[labels[r]] - mx - std::log(s);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape()->record(OpKind::CrossEntropy, Tensor::scalar(loss), {logits},
                               [probs = std::move(probs), lab = std::move(lab)](Tape& t, std::size_t self) {
                                 const auto in = t.node(self).inputs[0];
                                 const double g = t.node(self).grad[0];
                                 Tensor& d = t.grad_buffer(in);
                                 const std::size_t cols = d.cols();
                                 for (std::size_t r = 0; r < d.rows(); ++r) {
                                   for (std::size_t c = 0; c < cols; ++c) {
                                     d[r * cols + c] += g * (probs[r * cols + c] - (int(c) == lab[r] ? 1.0 : 0.0));
                                   }
                                 }
                               });
}

Var bce_with_logits(Var logits, const Tensor& targets, const Tensor& weights) {
  const Tensor& x = logits.value();
  if (targets.size() != x.size()) shape_error("bce_with_logits", x, targets);
  if (weights.size() != x.size()) shape_error("bce_with_logits", x, weights);
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    // log(1 + e^x) - t*x, evaluated stably.
    const double v = x[i];
    const double softplus = v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    loss += weights[i] * (softplus - targets[i] * v);
  }
  return logits.tape()->record(OpKind::BceWithLogits, Tensor::scalar(loss), {logits},
                               [targets, weights](Tape& t, std::size_t self) {
                                 const auto in = t.node(self).inputs[0];
                                 const Tensor& x = t.node(in).value;
                                 const double g = t.node(self).grad[0];
                                 Tensor& d = t.grad_buffer(in);
                                 for (std::size_t i = 0; i < x.size(); ++i) {
                                   const double v = x[i];
                                   const double p = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                                   d[i] += g * weights[i] * (p - targets[i]);
                                 }
                               });
}

namespace {

// Unfolds one image [C, H, W] into patches [Ho*Wo, C*k*k].
void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel * g.kernel;
  const std::size_t width = g.in_channels * kk;
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      double* row = cols + (oy * wo + ox) * width;
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const long iy = long(oy * g.stride + ky) - long(g.pad);
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const long ix = long(ox * g.stride + kx) - long(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < long(g.height) && ix < long(g.width);
            row[c * kk + ky * g.kernel + kx] = inside ? img[(c * g.height + iy) * g.width + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), kk = g.kernel * g.kernel;
  const std::size_t width = g.in_channels * kk;
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const double* row = cols + (oy * wo + ox) * width;
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          const long iy = long(oy * g.stride + ky) - long(g.pad);
          if (iy < 0 || iy >= long(g.height)) continue;
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const long ix = long(ox * g.stride + kx) - long(g.pad);
            if (ix < 0 || ix >= long(g.width)) continue;
            img[(c * g.height + iy) * g.width + ix] += row[c * kk + ky * g.kernel + kx];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, const ConvGeometry& geometry) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  const std::size_t in_size = geometry.in_channels * geometry.height * geometry.width;
  const std::size_t patch = geometry.in_channels * geometry.kernel * geometry.kernel;
  if (xv.cols() != in_size) {
    throw DimensionError("conv2d: input " + shape_string(xv.shape()) + " does not match geometry " +
                         std::to_string(geometry.in_channels) + "x" + std::to_string(geometry.height) + "x" +
                         std::to_string(geometry.width));
  }
  if (wv.rows() != patch) shape_error("conv2d", xv, wv);
  const std::size_t out_channels = wv.cols();
  if (bv.size() != out_channels) shape_error("conv2d", wv, bv);
  const std::size_t batch = xv.rows();
  const std::size_t spatial = geometry.out_height() * geometry.out_width();

  Tensor out = matrix_like(batch, out_channels * spatial);
  RowMat cols{Eigen::Index(spatial), Eigen::Index(patch)};
  RowMat res{Eigen::Index(spatial), Eigen::Index(out_channels)};
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(xv.data() + b * in_size, geometry, cols.data());
    res.noalias() = cols * as_matrix(wv);
    double* o = out.data() + b * out_channels * spatial;
    for (std::size_t oc = 0; oc < out_channels; ++oc) {
      for (std::size_t s = 0; s < spatial; ++s) o[oc * spatial + s] = res(Eigen::Index(s), Eigen::Index(oc)) + bv[oc];
    }
  }
  return x.tape()->record(OpKind::Conv2d, std::move(out), {x, weight, bias}, [geometry](Tape& t, std::size_t self) {
    const auto ix = t.node(self).inputs[0];
    const auto iw = t.node(self).inputs[1];
    const auto ib = t.node(self).inputs[2];
    const Tensor& xv = t.node(ix).value;
    const Tensor& wv = t.node(iw).value;
    const Tensor& g = t.node(self).grad;
    const std::size_t in_size = geometry.in_channels * geometry.height * geometry.width;
    const std::size_t patch = geometry.in_channels * geometry.kernel * geometry.kernel;
    const std::size_t out_channels = wv.cols();
    const std::size_t spatial = geometry.out_height() * geometry.out_width();
    const bool gx = t.needs_grad(ix), gw = t.needs_grad(iw), gb = t.needs_grad(ib);
    RowMat cols{Eigen::Index(spatial), Eigen::Index(patch)};
    RowMat gout{Eigen::Index(spatial), Eigen::Index(out_channels)};
    RowMat dcols{Eigen::Index(spatial), Eigen::Index(patch)};
    for (std::size_t b = 0; b < xv.rows(); ++b) {
      const double* gb_ptr = g.data() + b * out_channels * spatial;
      for (std::size_t oc = 0; oc < out_channels; ++oc) {
        for (std::size_t s = 0; s < spatial; ++s) gout(Eigen::Index(s), Eigen::Index(oc)) = gb_ptr[oc * spatial + s];
      }
      if (gb) {
        Tensor& db = t.grad_buffer(ib);
        for (std::size_t oc = 0; oc < out_channels; ++oc) db[oc] += gout.col(Eigen::Index(oc)).sum();
      }
      if (gw) {
        im2col(xv.data() + b * in_size, geometry, cols.data());
        as_matrix(t.grad_buffer(iw)).noalias() += cols.transpose() * gout;
      }
      if (gx) {
        dcols.noalias() = gout * as_matrix(wv).transpose();
        col2im(dcols.data(), geometry, t.grad_buffer(ix).data() + b * in_size);
      }
    }
  });
}

Var global_avg_pool(Var x, std::size_t channels) {
  const Tensor& xv = x.value();
  if (channels == 0 || xv.cols() % channels != 0) {
    throw DimensionError("global_avg_pool: " + std::to_string(channels) + " channels do not divide shape " +
                         shape_string(xv.shape()));
  }
  const std::size_t batch = xv.rows(), spatial = xv.cols() / channels;
  Tensor out = matrix_like(batch, channels);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = xv.data() + b * xv.cols() + c * spatial;
      double s = 0.0;
      for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      out[b * channels + c] = s / double(spatial);
    }
  }
  return x.tape()->record(OpKind::GlobalAvgPool, std::move(out), {x}, [channels, spatial](Tape& t, std::size_t self) {
    const auto in = t.node(self).inputs[0];
    const Tensor& g = t.node(self).grad;
    Tensor& d = t.grad_buffer(in);
    for (std::size_t b = 0; b < g.rows(); ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = g[b * channels + c] / double(spatial);
        double* p = d.data() + b * d.cols() + c * spatial;
        for (std::size_t i = 0; i < spatial; ++i) p[i] += v;
      }
    }
  });
}

}  // namespace livesketch::nn
