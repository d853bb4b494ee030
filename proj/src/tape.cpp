#include "livesketch/numerics/tape.hpp"

#include "livesketch/numerics/errors.hpp"

namespace livesketch::nn {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Leaf: return "leaf";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Square: return "square";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::LogSoftmaxRows: return "log_softmax_rows";
    case OpKind::L2NormalizeRows: return "l2_normalize_rows";
    case OpKind::SquaredDistanceRows: return "squared_distance_rows";
    case OpKind::Sum: return "sum";
    case OpKind::SumRows: return "sum_rows";
    case OpKind::ClampMax: return "clamp_max";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::BceWithLogits: return "bce_with_logits";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return tape_->value(*this);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.kind = OpKind::Constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = recording();
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.kind = OpKind::Parameter;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = recording();
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(OpKind kind, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(kind, std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(OpKind kind, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape() != this) throw ContractError(std::string(op_name(kind)) + ": operand belongs to another tape");
    n.inputs.push_back(v.index());
    n.requires_grad = n.requires_grad || nodes_[v.index()].requires_grad;
  }
  if (recording() && n.requires_grad) n.backward = std::move(fn);
  else n.requires_grad = false;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t i) {
  Node& n = nodes_[i];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.index());
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw ContractError("backward: root belongs to another tape");
  if (!recording()) throw ContractError("backward on an inference-mode tape");
  const Node& r = nodes_[root.index()];
  if (r.value.size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_string(r.value.shape()));
  }
  backward_visits_ = 0;
  grad_buffer(root.index()).fill(1.0);
  for (std::size_t i = root.index() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++backward_visits_;
    if (n.backward) {
      n.backward(*this, i);
    } else if (n.param) {
      if (n.param->grad.empty() || n.param->grad.shape() != n.value.shape()) n.param->zero_grad();
      auto& dst = n.param->grad.storage();
      const auto& src = n.grad.storage();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace livesketch::nn
