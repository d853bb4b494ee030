#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "livesketch/models/joint_embedding.hpp"
#include "livesketch/models/vae.hpp"

namespace livesketch {

enum class PerturbMethod { Linear, Slerp, Backprop };
std::string_view method_name(PerturbMethod m);
/// Throws std::invalid_argument for unknown names.
PerturbMethod parse_method(std::string_view name);

struct PerturbConfig {
  std::size_t steps = 200;
  double learning_rate = 0.05;
  double alpha = 0.1;
  /// Smoothing inside the proximity norm sqrt(|v - q|^2 + eps).
  double smoothing = 1e-8;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PerturbConfig, steps, learning_rate, alpha, smoothing)

struct PerturbTarget {
  /// Q^V* and Q^S*, flat vectors.
  std::vector<double> v;
  std::vector<double> s;
};

struct PerturbationRequest {
  std::vector<double> query_v;
  std::vector<PerturbTarget> targets;
  std::vector<double> weights;
  PerturbMethod method = PerturbMethod::Backprop;
  PerturbConfig config;
};

struct PerturbationResult {
  PerturbMethod method = PerturbMethod::Backprop;
  std::vector<double> new_v;
  Sketch suggestion;
  bool decode_hit_max_steps = false;
  std::vector<double> loss_trace;
  std::vector<double> distances_before;
  std::vector<double> distances_after;
  std::optional<std::string> warning;
  std::optional<std::string> error;
};

/// Q^V' = Q^V + sum_i w_i (Q^V*_i - Q^V).
std::vector<double> f_linear(const std::vector<double>& q, const std::vector<PerturbTarget>& targets,
                             const std::vector<double>& weights);

/// Spherical interpolation by angle fraction w; falls back to linear for
/// (anti)parallel inputs and sets `antiparallel` when the angle is ~pi.
std::vector<double> slerp(const std::vector<double>& a, const std::vector<double>& b, double w,
                          bool* antiparallel = nullptr);
/// Sequential SLERP over targets in order.
std::vector<double> f_slerp(const std::vector<double>& q, const std::vector<PerturbTarget>& targets,
                            const std::vector<double>& weights, std::optional<std::string>* warning = nullptr);

struct BackpropOutcome {
  std::vector<double> v;
  std::vector<double> loss_trace;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::optional<std::string> error;
};

/// L_AP(v) = (1/m) sum_j w_j |F_V(v) - t_j|^2 + alpha sqrt(|v - q|^2 + eps),
/// with m the number of offered targets. Adam on v with F_V fixed; the
/// best iterate (including the start) is returned.
BackpropOutcome f_backprop(const JointEmbedding& joint, const std::vector<double>& q,
                           const std::vector<PerturbTarget>& targets, const std::vector<double>& weights,
                           const PerturbConfig& config = {});

/// L_AP evaluated at v.
double perturbation_loss(const JointEmbedding& joint, const std::vector<double>& v, const std::vector<double>& q,
                         const std::vector<PerturbTarget>& targets, const std::vector<double>& weights,
                         const PerturbConfig& config = {});

/// Validates the request, runs the chosen method and decodes Q^V'.
PerturbationResult perturb(const Vae& vae, const JointEmbedding& joint, const PerturbationRequest& request);

/// |F_V(v) - t_i| for every target.
std::vector<double> target_distances(const JointEmbedding& joint, const std::vector<double>& v,
                                     const std::vector<PerturbTarget>& targets);

struct DistanceRow {
  double before = 0.0;
  double after = 0.0;
};
std::vector<DistanceRow> search_embedding_distance_report(const JointEmbedding& joint,
                                                          const PerturbationRequest& request,
                                                          const PerturbationResult& result);

struct SequenceFrame {
  std::vector<double> v;
  Sketch sketch;
};

/// `steps` frames from the query end to the full request. Linear and SLERP
/// use evenly spaced fractions of the weights; backprop scales the weights
/// from 0 to their full value and solves each frame independently.
std::vector<SequenceFrame> interpolation_sequence(const Vae& vae, const JointEmbedding& joint,
                                                  const PerturbationRequest& request, std::size_t steps = 10);

nlohmann::json to_json(const PerturbationResult& result);

}  // namespace livesketch
