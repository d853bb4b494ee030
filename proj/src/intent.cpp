#include "livesketch/intent/intent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

using nn::Tensor;

Tensor pairwise_affinity(const Tensor& z) {
  const std::size_t n = z.rows(), d = z.cols();
  Tensor out({n, n}, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (z.at(a, j) - z.at(b, j)) * (z.at(a, j) - z.at(b, j));
      out.at(a, b) = out.at(b, a) = std::sqrt(s);
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> affinity_propagation(const Tensor& distances, const IntentConfig& config) {
  const std::size_t n = distances.rows();
  if (distances.cols() != n) throw DimensionError("affinity_propagation: distance matrix is not square");
  if (n == 0) return {};
  if (n == 1) return {{0}};

  std::vector<double> s(n * n), off;
  off.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      s[i * n + k] = -distances.at(i, k) * distances.at(i, k);
      if (i != k) off.push_back(s[i * n + k]);
    }
  }
  std::sort(off.begin(), off.end());
  const double preference =
      off.size() % 2 == 1 ? off[off.size() / 2] : 0.5 * (off[off.size() / 2 - 1] + off[off.size() / 2]);
  for (std::size_t k = 0; k < n; ++k) s[k * n + k] = preference;

  std::vector<double> r(n * n, 0.0), a(n * n, 0.0);
  const double lam = config.damping;
  std::vector<char> exemplar(n, 0), previous(n, 0);
  std::size_t stable = 0;
  for (std::size_t it = 0; it < config.max_iterations; ++it) {
    // Responsibilities.
    for (std::size_t i = 0; i < n; ++i) {
      double first = -std::numeric_limits<double>::infinity(), second = first;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const double v = a[i * n + k] + s[i * n + k];
        if (v > first) {
          second = first;
          first = v;
          arg = k;
        } else if (v > second) {
          second = v;
        }
      }
      for (std::size_t k = 0; k < n; ++k) {
        const double updated = s[i * n + k] - (k == arg ? second : first);
        r[i * n + k] = lam * r[i * n + k] + (1.0 - lam) * updated;
      }
    }
    // Availabilities.
    for (std::size_t k = 0; k < n; ++k) {
      double pos = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (i != k) pos += std::max(0.0, r[i * n + k]);
      }
      for (std::size_t i = 0; i < n; ++i) {
        double updated;
        if (i == k) {
          updated = pos;
        } else {
          updated = std::min(0.0, r[k * n + k] + pos - std::max(0.0, r[i * n + k]));
        }
        a[i * n + k] = lam * a[i * n + k] + (1.0 - lam) * updated;
      }
    }
    for (std::size_t k = 0; k < n; ++k) exemplar[k] = a[k * n + k] + r[k * n + k] > 0.0;
    stable = exemplar == previous ? stable + 1 : 0;
    previous = exemplar;
    if (stable >= config.convergence_iterations) break;
  }

  std::vector<std::size_t> centres;
  for (std::size_t k = 0; k < n; ++k) {
    if (exemplar[k]) centres.push_back(k);
  }
  if (centres.empty()) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return {all};
  }
  std::vector<std::vector<std::size_t>> groups(centres.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 0; c < centres.size(); ++c) {
      if (centres[c] == i) {
        best = c;
        break;
      }
      if (s[i * n + centres[c]] > s[i * n + centres[best]]) best = c;
    }
    groups[best].push_back(i);
  }
  std::erase_if(groups, [](const auto& g) { return g.empty(); });
  std::sort(groups.begin(), groups.end(), [](const auto& x, const auto& y) { return x.front() < y.front(); });
  return groups;
}

double intra_distance(const std::vector<std::size_t>& cluster, const Tensor& distances) {
  double sum = 0.0;
  for (std::size_t a : cluster) {
    for (std::size_t b : cluster) sum += distances.at(a, b);
  }
  return sum;
}

double diversity_penalty(const std::vector<std::size_t>& cluster, const std::vector<std::size_t>& selected,
                         const Tensor& distances, const IntentConfig& config) {
  double sum = 0.0;
  for (std::size_t a : cluster) {
    for (std::size_t b : selected) sum += distances.at(a, b);
  }
  return -config.lambda * std::log(std::max(sum, config.log_floor));
}

double rho(const std::vector<std::size_t>& cluster, const std::vector<std::size_t>& selected, const Tensor& distances,
           const IntentConfig& config) {
  return intra_distance(cluster, distances) + diversity_penalty(cluster, selected, distances, config);
}

Selection greedy_select(const std::vector<std::vector<std::size_t>>& candidates, const Tensor& distances,
                        const IntentConfig& config) {
  Selection out;
  std::vector<char> used(candidates.size(), 0);
  std::set<std::size_t> taken;
  std::vector<std::size_t> selected;
  while (out.clusters.size() < config.m) {
    std::size_t best = candidates.size();
    double best_rho = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      if (used[c] || candidates[c].empty()) continue;
      const bool overlaps = std::any_of(candidates[c].begin(), candidates[c].end(),
                                        [&](std::size_t i) { return taken.count(i) > 0; });
      if (overlaps) continue;
      const double v = rho(candidates[c], selected, distances, config);
      if (v < best_rho) {
        best_rho = v;
        best = c;
      }
    }
    if (best == candidates.size()) break;
    used[best] = 1;
    out.clusters.push_back(candidates[best]);
    out.objective += best_rho;
    for (std::size_t i : candidates[best]) {
      taken.insert(i);
      selected.push_back(i);
    }
  }
  return out;
}

double sequence_objective(const std::vector<std::vector<std::size_t>>& clusters, const Tensor& distances,
                          const IntentConfig& config) {
  double total = 0.0;
  std::vector<std::size_t> selected;
  for (const auto& c : clusters) {
    total += rho(c, selected, distances, config);
    selected.insert(selected.end(), c.begin(), c.end());
  }
  return total;
}

Selection cluster_rows(const Tensor& z, const IntentConfig& config) {
  if (z.rows() == 0) return {};
  const Tensor d = pairwise_affinity(z);
  return greedy_select(affinity_propagation(d, config), d, config);
}

std::uint64_t representative_image(std::span<const std::uint64_t> members, const Tensor& member_s,
                                   std::span<const double> query_s) {
  if (members.empty()) throw ContractError("representative_image: empty cluster");
  if (member_s.rows() != members.size()) throw DimensionError("representative_image: member vectors differ in count");
  if (member_s.cols() != query_s.size()) throw DimensionError("representative_image: query dimension differs");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < members.size(); ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < query_s.size(); ++j) d += (member_s.at(i, j) - query_s[j]) * (member_s.at(i, j) - query_s[j]);
    if (d < best_d || (d == best_d && members[i] < members[best])) {
      best_d = d;
      best = i;
    }
  }
  return members[best];
}

std::uint64_t nearest_sketch_target(const PQIndex& sketch_index, std::span<const double> representative_s) {
  if (sketch_index.size() == 0) throw ContractError("sketch corpus H is empty");
  return sketch_index.knn(representative_s, 1).front().id;
}

double clamp_weight(double w) { return std::isnan(w) ? 0.0 : std::clamp(w, 0.0, 1.0); }

}  // namespace livesketch
