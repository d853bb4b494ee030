#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "livesketch/index/pq_index.hpp"
#include "livesketch/numerics/tensor.hpp"
#include "livesketch/sketch/sketch.hpp"

namespace livesketch {

struct IntentConfig {
  std::size_t m = 3;
  double damping = 0.5;
  std::size_t max_iterations = 200;
  std::size_t convergence_iterations = 15;
  /// Diversity penalty weight: W = -lambda * log(max(sum d, floor)).
  double lambda = 1.0;
  double log_floor = 1e-6;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(IntentConfig, m, damping, max_iterations, convergence_iterations,
                                                lambda, log_floor)

/// Symmetric matrix of L2 distances between rows of `z`, zero diagonal.
nn::Tensor pairwise_affinity(const nn::Tensor& z);

/// Classical affinity propagation on similarity -d^2 with the median
/// similarity as preference. Returns candidate clusters as sorted row
/// indices, ordered by their smallest member.
std::vector<std::vector<std::size_t>> affinity_propagation(const nn::Tensor& distances, const IntentConfig& config = {});

/// Sum of d over ordered member pairs.
double intra_distance(const std::vector<std::size_t>& cluster, const nn::Tensor& distances);
/// Diversity penalty against the members of already selected clusters.
double diversity_penalty(const std::vector<std::size_t>& cluster, const std::vector<std::size_t>& selected,
                         const nn::Tensor& distances, const IntentConfig& config = {});
/// rho(c) = intra_distance(c) + W(c, selected).
double rho(const std::vector<std::size_t>& cluster, const std::vector<std::size_t>& selected,
           const nn::Tensor& distances, const IntentConfig& config = {});

struct Selection {
  std::vector<std::vector<std::size_t>> clusters;
  /// Sum of rho at the time each cluster was chosen.
  double objective = 0.0;
};

/// Greedy choice of up to m pairwise-disjoint candidates, each minimizing
/// rho given those already chosen; ties go to the earlier candidate.
Selection greedy_select(const std::vector<std::vector<std::size_t>>& candidates, const nn::Tensor& distances,
                        const IntentConfig& config = {});

/// Sequential objective of an ordered cluster list.
double sequence_objective(const std::vector<std::vector<std::size_t>>& clusters, const nn::Tensor& distances,
                          const IntentConfig& config = {});

/// Candidate generation followed by greedy selection, over rows of z.
Selection cluster_rows(const nn::Tensor& z, const IntentConfig& config = {});

struct IntentCluster {
  std::vector<std::uint64_t> members;
  std::uint64_t representative = 0;
  std::uint64_t target_id = 0;
  Sketch target_sketch;
  nn::Tensor target_s;
  nn::Tensor target_v;
  double weight = 0.0;
};

/// Member whose S vector is closest to the query's; ties by ascending id.
std::uint64_t representative_image(std::span<const std::uint64_t> members, const nn::Tensor& member_s,
                                   std::span<const double> query_s);

/// Id of the sketch in H nearest (in S) to the representative image.
/// Throws ContractError when H is empty.
std::uint64_t nearest_sketch_target(const PQIndex& sketch_index, std::span<const double> representative_s);

double clamp_weight(double w);

}  // namespace livesketch
