#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "livesketch/numerics/tensor.hpp"

namespace livesketch::nn {

enum class OpKind {
  Constant,
  Leaf,
  Parameter,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Tanh,
  Sigmoid,
  Relu,
  Exp,
  Log,
  Sqrt,
  Square,
  ConcatCols,
  SliceCols,
  ConcatRows,
  SliceRows,
  SoftmaxRows,
  LogSoftmaxRows,
  L2NormalizeRows,
  SquaredDistanceRows,
  Sum,
  SumRows,
  ClampMax,
  CrossEntropy,
  BceWithLogits,
  Conv2d,
  GlobalAvgPool,
};

const char* op_name(OpKind kind);

/// Named trainable tensor. Gradients from every tape that references the
/// parameter accumulate into `grad` until `zero_grad()`.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value) : name(std::move(name)), value(std::move(value)) {}

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.shape(), 0.0); }
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Dynamic reverse-mode tape, rebuilt for every forward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// topological order and `backward` visits every node once. A tape is not
/// thread-safe; independent tapes may run concurrently.
class Tape {
 public:
  enum class Mode { Record, Inference };
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    OpKind kind = OpKind::Constant;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  explicit Tape(Mode mode = Mode::Record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::Record; }

  Var constant(Tensor value);
  /// Differentiable input whose gradient can be read back after `backward`.
  Var leaf(Tensor value);
  Var param(Parameter& p);

  /// Propagates d(root)/d(node) to every node that requires a gradient and
  /// accumulates into the gradients of referenced parameters.
  void backward(Var root);

  const Tensor& value(Var v) const { return nodes_.at(v.index()).value; }
  /// Gradient of a node after `backward`; zeros when nothing reached it.
  Tensor grad(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t backward_visits() const { return backward_visits_; }

  // Op-implementation interface.
  Var record(OpKind kind, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(OpKind kind, Tensor value, const std::vector<Var>& inputs, BackwardFn fn);
  Node& node(std::size_t i) { return nodes_[i]; }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  bool needs_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  /// Gradient accumulator of node `i`, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t i);

 private:
  Mode mode_;
  std::vector<Node> nodes_;
  std::size_t backward_visits_ = 0;
};

}  // namespace livesketch::nn
