#include "livesketch/perturb/perturbation.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

using nn::Tensor;
using nn::Var;

std::string_view method_name(PerturbMethod m) {
  switch (m) {
    case PerturbMethod::Linear: return "linear";
    case PerturbMethod::Slerp: return "slerp";
    case PerturbMethod::Backprop: return "backprop";
  }
  return "backprop";
}

PerturbMethod parse_method(std::string_view name) {
  if (name == "linear") return PerturbMethod::Linear;
  if (name == "slerp") return PerturbMethod::Slerp;
  if (name == "backprop") return PerturbMethod::Backprop;
  throw std::invalid_argument("unknown perturbation method: " + std::string(name));
}

namespace {

void check_targets(std::size_t dim, const std::vector<PerturbTarget>& targets, const std::vector<double>& weights,
                   bool need_s) {
  if (targets.size() != weights.size()) {
    throw DimensionError(std::to_string(weights.size()) + " weights for " + std::to_string(targets.size()) + " targets");
  }
  for (const auto& t : targets) {
    if (t.v.size() != dim) throw DimensionError("target latent dimension differs from the query");
    if (need_s && t.s.empty()) throw DimensionError("target has no search-space vector");
  }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor row_of(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

// Loss graph over a free latent v; joint weights are bound as constants.
Var loss_graph(nn::Binder& b, const JointEmbedding& joint, Var v, const std::vector<double>& q,
               const std::vector<PerturbTarget>& targets, const std::vector<double>& weights,
               const PerturbConfig& config) {
  nn::Tape& tape = b.tape();
  const Var s = joint.forward_v(b, v);
  Var total = tape.constant(Tensor::scalar(0.0));
  if (!targets.empty()) {
    const double inv_m = 1.0 / double(targets.size());
    for (std::size_t j = 0; j < targets.size(); ++j) {
      if (weights[j] == 0.0) continue;
      const Var d = squared_distance_rows(s, tape.constant(row_of(targets[j].s)));
      total = add(total, scale(sum(d), weights[j] * inv_m));
    }
  }
  const Var prox = sqrt(add_scalar(sum(square(sub(v, tape.constant(row_of(q))))), config.smoothing));
  return add(total, scale(prox, config.alpha));
}

}  // namespace

std::vector<double> f_linear(const std::vector<double>& q, const std::vector<PerturbTarget>& targets,
                             const std::vector<double>& weights) {
  check_targets(q.size(), targets, weights, false);
  std::vector<double> out = q;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t j = 0; j < q.size(); ++j) out[j] += weights[i] * (targets[i].v[j] - q[j]);
  }
  return out;
}

std::vector<double> slerp(const std::vector<double>& a, const std::vector<double>& b, double w, bool* antiparallel) {
  if (a.size() != b.size()) throw DimensionError("slerp: vector sizes differ");
  if (antiparallel) *antiparallel = false;
  if (w == 0.0) return a;
  if (w == 1.0) return b;
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  std::vector<double> out(a.size());
  const auto linear = [&] {
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = a[j] + w * (b[j] - a[j]);
    return out;
  };
  if (na == 0.0 || nb == 0.0) return linear();
  const double c = std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
  const double omega = std::acos(c);
  const double so = std::sin(omega);
  if (so < 1e-9) {
    if (c < 0.0 && antiparallel) *antiparallel = true;
    return linear();
  }
  const double wa = std::sin((1.0 - w) * omega) / so, wb = std::sin(w * omega) / so;
  for (std::size_t j = 0; j < a.size(); ++j) out[j] = wa * a[j] + wb * b[j];
  return out;
}

std::vector<double> f_slerp(const std::vector<double>& q, const std::vector<PerturbTarget>& targets,
                            const std::vector<double>& weights, std::optional<std::string>* warning) {
  check_targets(q.size(), targets, weights, false);
  std::vector<double> cur = q;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    bool anti = false;
    cur = slerp(cur, targets[i].v, weights[i], &anti);
    if (anti && warning) *warning = "antiparallel latent vectors; used linear interpolation";
  }
  return cur;
}

double perturbation_loss(const JointEmbedding& joint, const std::vector<double>& v, const std::vector<double>& q,
                         const std::vector<PerturbTarget>& targets, const std::vector<double>& weights,
                         const PerturbConfig& config) {
  check_targets(q.size(), targets, weights, true);
  nn::Tape tape(nn::Tape::Mode::Inference);
  nn::Binder b(tape, true);
  return loss_graph(b, joint, tape.constant(row_of(v)), q, targets, weights, config).item();
}

BackpropOutcome f_backprop(const JointEmbedding& joint, const std::vector<double>& q,
                           const std::vector<PerturbTarget>& targets, const std::vector<double>& weights,
                           const PerturbConfig& config) {
  check_targets(q.size(), targets, weights, true);
  if (q.size() != joint.v_dim()) throw DimensionError("query latent dimension differs from the embedding input");
  BackpropOutcome out;
  nn::Parameter v("perturb.v", row_of(q));
  nn::Adam adam({&v}, {config.learning_rate, 0.9, 0.999, 1e-8, 0.0});
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_v = q;
  for (std::size_t step = 0; step <= config.steps; ++step) {
    nn::Tape tape;
    nn::Binder b(tape, true);
    const Var loss = loss_graph(b, joint, tape.param(v), q, targets, weights, config);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      out.error = "non-finite perturbation loss at step " + std::to_string(step);
      break;
    }
    out.loss_trace.push_back(value);
    if (step == 0) out.initial_loss = value;
    if (value < best) {
      best = value;
      best_v.assign(v.value.values().begin(), v.value.values().end());
    }
    if (step == config.steps) break;
    adam.zero_grad();
    tape.backward(loss);
    adam.step();
  }
  out.v = best_v;
  out.best_loss = best;
  return out;
}

std::vector<double> target_distances(const JointEmbedding& joint, const std::vector<double>& v,
                                     const std::vector<PerturbTarget>& targets) {
  const Tensor s = joint.f_v(row_of(v));
  std::vector<double> out;
  for (const auto& t : targets) {
    if (t.s.size() != s.size()) throw DimensionError("target search vector dimension differs");
    double d = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) d += (s[j] - t.s[j]) * (s[j] - t.s[j]);
    out.push_back(std::sqrt(d));
  }
  return out;
}

PerturbationResult perturb(const Vae& vae, const JointEmbedding& joint, const PerturbationRequest& request) {
  if (request.query_v.size() != vae.latent_dim()) throw DimensionError("query latent dimension differs from the model");
  for (double w : request.weights) {
    if (!(w >= 0.0 && w <= 1.0)) throw ContractError("weights must lie in [0, 1]");
  }
  PerturbationResult r;
  r.method = request.method;
  switch (request.method) {
    case PerturbMethod::Linear:
      r.new_v = f_linear(request.query_v, request.targets, request.weights);
      break;
    case PerturbMethod::Slerp:
      r.new_v = f_slerp(request.query_v, request.targets, request.weights, &r.warning);
      break;
    case PerturbMethod::Backprop: {
      auto o = f_backprop(joint, request.query_v, request.targets, request.weights, request.config);
      r.new_v = std::move(o.v);
      r.loss_trace = std::move(o.loss_trace);
      r.error = std::move(o.error);
      break;
    }
  }
  const DecodeResult d = vae.decode(row_of(r.new_v));
  r.suggestion = d.sketch;
  r.decode_hit_max_steps = d.hit_max_steps;
  bool have_s = true;
  for (const auto& t : request.targets) have_s = have_s && !t.s.empty();
  if (have_s) {
    r.distances_before = target_distances(joint, request.query_v, request.targets);
    r.distances_after = target_distances(joint, r.new_v, request.targets);
  }
  return r;
}

std::vector<DistanceRow> search_embedding_distance_report(const JointEmbedding& joint,
                                                          const PerturbationRequest& request,
                                                          const PerturbationResult& result) {
  const auto before = target_distances(joint, request.query_v, request.targets);
  const auto after = target_distances(joint, result.new_v, request.targets);
  std::vector<DistanceRow> rows;
  for (std::size_t i = 0; i < before.size(); ++i) rows.push_back({before[i], after[i]});
  return rows;
}

std::vector<SequenceFrame> interpolation_sequence(const Vae& vae, const JointEmbedding& joint,
                                                  const PerturbationRequest& request, std::size_t steps) {
  if (steps < 2) throw ContractError("interpolation needs at least two steps");
  std::vector<SequenceFrame> frames;
  for (std::size_t k = 0; k < steps; ++k) {
    const double frac = double(k) / double(steps - 1);
    std::vector<double> w = request.weights;
    for (auto& x : w) x *= frac;
    std::vector<double> v;
    switch (request.method) {
      case PerturbMethod::Linear: v = f_linear(request.query_v, request.targets, w); break;
      case PerturbMethod::Slerp: v = f_slerp(request.query_v, request.targets, w); break;
      case PerturbMethod::Backprop: v = f_backprop(joint, request.query_v, request.targets, w, request.config).v; break;
    }
    frames.push_back({v, vae.decode(row_of(v)).sketch});
  }
  return frames;
}

nlohmann::json to_json(const PerturbationResult& result) {
  nlohmann::json j;
  j["method"] = std::string(method_name(result.method));
  j["suggestion"] = points_to_json(result.suggestion.points);
  j["decode_hit_max_steps"] = result.decode_hit_max_steps;
  j["new_v"] = result.new_v;
  j["loss_trace"] = result.loss_trace;
  nlohmann::json table = nlohmann::json::array();
  for (std::size_t i = 0; i < result.distances_before.size(); ++i) {
    table.push_back({{"target", i}, {"before", result.distances_before[i]}, {"after", result.distances_after[i]}});
  }
  j["distances"] = std::move(table);
  if (result.warning) j["warning"] = *result.warning;
  if (result.error) j["error"] = *result.error;
  return j;
}

}  // namespace livesketch
