#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>

#include "livesketch/index/pq_index.hpp"
#include "livesketch/intent/intent.hpp"
#include "livesketch/numerics/errors.hpp"
#include "livesketch/perturb/perturbation.hpp"

namespace ls = livesketch;
namespace nn = livesketch::nn;

namespace {

nn::Tensor gaussian(nn::Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  nn::Tensor t({rows, cols});
  for (auto& v : t.storage()) v = sd * rng.normal();
  return t;
}

std::vector<std::uint64_t> iota_ids(std::size_t n, std::uint64_t start = 0) {
  std::vector<std::uint64_t> ids(n);
  std::iota(ids.begin(), ids.end(), start);
  return ids;
}

std::vector<double> row_vec(const nn::Tensor& t, std::size_t r) {
  std::vector<double> out(t.cols());
  for (std::size_t j = 0; j < t.cols(); ++j) out[j] = t.at(r, j);
  return out;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

ls::PQConfig small_pq(std::size_t m = 4, std::size_t k = 16) {
  ls::PQConfig c;
  c.subspaces = m;
  c.centroids = k;
  c.iterations = 15;
  return c;
}

}  // namespace

TEST(PQ, IdenticalVectorsHaveZeroError) {
  nn::Tensor x({40, 8});
  for (std::size_t i = 0; i < 40; ++i) {
    for (std::size_t j = 0; j < 8; ++j) x.at(i, j) = 0.25 * double(j);
  }
  const auto cb = ls::train_codebook(x, small_pq());
  EXPECT_NEAR(cb.quantization_error(x), 0.0, 1e-12);
}

TEST(PQ, ExactWhenCentroidsCoverDistinctVectors) {
  nn::Rng rng(1);
  const nn::Tensor base = gaussian(rng, 8, 8);
  nn::Tensor x({64, 8});
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t j = 0; j < 8; ++j) x.at(i, j) = float(base.at(i % 8, j));
  }
  const auto cb = ls::train_codebook(x, small_pq(2, 8));
  EXPECT_NEAR(cb.quantization_error(x), 0.0, 1e-10);
}

TEST(PQ, TrainedCodebookBeatsRandomOne) {
  nn::Rng rng(2);
  const nn::Tensor x = gaussian(rng, 500, 16);
  const auto cb = ls::train_codebook(x, small_pq());
  ls::PQCodebook random = cb;
  for (auto& v : random.values) v = float(rng.normal());
  EXPECT_LT(cb.quantization_error(x), random.quantization_error(x));
}

TEST(PQ, CentroidsReconstructExactly) {
  nn::Rng rng(3);
  const auto cb = ls::train_codebook(gaussian(rng, 200, 8), small_pq());
  for (std::size_t k = 0; k < cb.centroids; k += 5) {
    std::vector<double> v;
    for (std::size_t m = 0; m < cb.subspaces; ++m) {
      const float* c = cb.centroid(m, k);
      v.insert(v.end(), c, c + cb.sub_dim());
    }
    const auto code = cb.encode(v);
    for (std::size_t m = 0; m < cb.subspaces; ++m) EXPECT_EQ(code[m], k);
    EXPECT_EQ(cb.decode(code), v);
  }
}

TEST(PQ, TrainingPreconditions) {
  nn::Rng rng(4);
  EXPECT_THROW(ls::train_codebook(gaussian(rng, 10, 8), small_pq(4, 16)), ls::ContractError);
  EXPECT_THROW(ls::train_codebook(gaussian(rng, 100, 10), small_pq(4, 16)), ls::ContractError);
}

TEST(PQ, AdcEqualsDistanceToReconstruction) {
  nn::Rng rng(5);
  const nn::Tensor x = gaussian(rng, 300, 16);
  const auto cb = ls::train_codebook(x, small_pq());
  const auto q = row_vec(gaussian(rng, 1, 16), 0);
  const auto table = cb.distance_table(q);
  for (std::size_t i = 0; i < 300; i += 7) {
    const auto code = cb.encode(row_vec(x, i));
    // Per-subspace sums in the same order as the table build.
    const auto rec = cb.decode(code);
    double oracle = 0.0;
    for (std::size_t m = 0; m < cb.subspaces; ++m) {
      double part = 0.0;
      for (std::size_t j = 0; j < cb.sub_dim(); ++j) {
        const std::size_t d = m * cb.sub_dim() + j;
        part += (q[d] - rec[d]) * (q[d] - rec[d]);
      }
      oracle += part;
    }
    EXPECT_EQ(cb.adc(table, code.data()), oracle);
  }
}

TEST(PQIndex, KnnResultsAreSortedAndBounded) {
  nn::Rng rng(6);
  const nn::Tensor x = gaussian(rng, 400, 16);
  for (bool exact : {false, true}) {
    for (std::size_t rerank : {std::size_t(0), std::size_t(50)}) {
      ls::PQConfig c = small_pq();
      c.exact = exact;
      c.rerank = rerank;
      const auto index = ls::PQIndex::build(x, iota_ids(400), c);
      const auto res = index.knn(row_vec(gaussian(rng, 1, 16), 0), 37);
      ASSERT_EQ(res.size(), 37u);
      for (std::size_t i = 1; i < res.size(); ++i) {
        EXPECT_TRUE(res[i - 1].distance < res[i].distance ||
                    (res[i - 1].distance == res[i].distance && res[i - 1].id < res[i].id));
      }
      std::set<std::uint64_t> ids;
      for (const auto& n : res) ids.insert(n.id);
      EXPECT_EQ(ids.size(), 37u);
      EXPECT_EQ(index.knn(row_vec(x, 0), 1000).size(), 400u);
    }
  }
}

TEST(PQIndex, KEqualsOneIsTheAdcArgmin) {
  nn::Rng rng(7);
  const nn::Tensor x = gaussian(rng, 200, 8);
  const auto index = ls::PQIndex::build(x, iota_ids(200, 100), small_pq());
  const auto q = row_vec(gaussian(rng, 1, 8), 0);
  const auto table = index.codebook().distance_table(q);
  double best = std::numeric_limits<double>::infinity();
  std::uint64_t arg = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const double d = index.codebook().adc(table, index.codes().data() + i * 4);
    if (d < best) {
      best = d;
      arg = index.ids()[i];
    }
  }
  const auto top = index.knn_adc(q, 1);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0].id, arg);
  EXPECT_EQ(top[0].distance, best);
}

TEST(PQIndex, ExactModeMatchesBruteForce) {
  nn::Rng rng(8);
  nn::Tensor x = gaussian(rng, 300, 8);
  for (auto& v : x.storage()) v = float(v);  // raw copies are float32
  const auto ids = iota_ids(300, 5);
  ls::PQConfig c = small_pq();
  c.exact = true;
  const auto index = ls::PQIndex::build(x, ids, c);
  const auto q = row_vec(gaussian(rng, 1, 8), 0);
  const auto got = index.knn(q, 20), want = ls::brute_force(x, ids, q, 20);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].id, want[i].id);
    EXPECT_NEAR(got[i].distance, want[i].distance, 1e-12);
  }
}

TEST(BruteForce, InvariantUnderRowPermutation) {
  nn::Rng rng(9);
  const nn::Tensor x = gaussian(rng, 50, 4);
  const auto ids = iota_ids(50);
  std::vector<std::size_t> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  nn::Tensor y({50, 4});
  std::vector<std::uint64_t> pids(50);
  for (std::size_t i = 0; i < 50; ++i) {
    pids[i] = ids[perm[i]];
    for (std::size_t j = 0; j < 4; ++j) y.at(i, j) = x.at(perm[i], j);
  }
  const auto q = row_vec(gaussian(rng, 1, 4), 0);
  EXPECT_EQ(ls::brute_force(x, ids, q, 10), ls::brute_force(y, pids, q, 10));
  const auto all = ls::brute_force(x, ids, q, 50);
  for (const auto& n : all) EXPECT_DOUBLE_EQ(n.distance, sq_dist(row_vec(x, n.id), q));
}

TEST(PQIndex, RerankImprovesRecallOverPureAdc) {
  nn::Rng rng(10);
  const nn::Tensor x = gaussian(rng, 2000, 16);
  ls::PQConfig adc = small_pq(4, 32), rr = adc;
  adc.rerank = 0;
  rr.rerank = 200;
  const auto a = ls::PQIndex::build(x, iota_ids(2000), adc), b = ls::PQIndex::build(x, iota_ids(2000), rr);
  double ra = 0.0, rb = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto q = row_vec(gaussian(rng, 1, 16), 0);
    std::set<std::uint64_t> truth;
    for (const auto& n : ls::brute_force(x, iota_ids(2000), q, 10)) truth.insert(n.id);
    for (const auto& n : a.knn(q, 10)) ra += truth.count(n.id);
    for (const auto& n : b.knn(q, 10)) rb += truth.count(n.id);
  }
  EXPECT_GT(rb, ra);
  EXPECT_GE(rb / 200.0, 0.9);
}

TEST(PQIndex, EmptyIndexAnswersEmpty) {
  nn::Rng rng(11);
  ls::PQIndex index(ls::train_codebook(gaussian(rng, 40, 8), small_pq()), small_pq());
  EXPECT_TRUE(index.knn(std::vector<double>(8, 0.0), 5).empty());
}

TEST(PQIndex, DuplicateIdAndWrongDimensionAreRejected) {
  nn::Rng rng(12);
  const nn::Tensor x = gaussian(rng, 40, 8);
  auto index = ls::PQIndex::build(x, iota_ids(40), small_pq());
  EXPECT_THROW(index.add(3, row_vec(x, 0)), ls::ContractError);
  EXPECT_THROW(index.add(99, std::vector<double>(7, 0.0)), ls::DimensionError);
  index.add(99, row_vec(x, 0));
  EXPECT_EQ(index.size(), 41u);
}

TEST(PQIndex, SerializationRoundTrip) {
  nn::Rng rng(13);
  const nn::Tensor x = gaussian(rng, 120, 8);
  for (bool raw : {true, false}) {
    ls::PQConfig c = small_pq();
    c.store_raw = raw;
    if (!raw) c.rerank = 0;
    const auto index = ls::PQIndex::build(x, iota_ids(120, 1000), c);
    const auto path = std::filesystem::temp_directory_path() / "livesketch_pq_roundtrip.bin";
    index.save(path);
    const auto back = ls::PQIndex::load(path);
    std::filesystem::remove(path);
    EXPECT_TRUE(back == index);
    const auto q = row_vec(x, 3);
    EXPECT_EQ(back.knn(q, 10), index.knn(q, 10));
  }
}

TEST(PQIndex, CorruptFilesAreRejected) {
  nn::Rng rng(14);
  const auto bytes = ls::PQIndex::build(gaussian(rng, 40, 8), iota_ids(40), small_pq()).serialize();
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(ls::PQIndex::deserialize(bad_magic), std::runtime_error);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(ls::PQIndex::deserialize(bad_version), std::runtime_error);
  EXPECT_THROW(ls::PQIndex::deserialize(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  EXPECT_THROW(ls::PQIndex::deserialize(bytes + "x"), std::runtime_error);
}

// Intent clustering.

TEST(Affinity, MatchesPairwiseDistances) {
  nn::Rng rng(20);
  const nn::Tensor z = gaussian(rng, 6, 3);
  const nn::Tensor d = ls::pairwise_affinity(z);
  for (std::size_t a = 0; a < 6; ++a) {
    EXPECT_EQ(d.at(a, a), 0.0);
    for (std::size_t b = 0; b < 6; ++b) {
      EXPECT_NEAR(d.at(a, b), std::sqrt(sq_dist(row_vec(z, a), row_vec(z, b))), 1e-12);
      EXPECT_EQ(d.at(a, b), d.at(b, a));
    }
  }
}

TEST(Rho, FormulaOracle) {
  nn::Rng rng(21);
  const nn::Tensor d = ls::pairwise_affinity(gaussian(rng, 5, 2));
  const std::vector<std::size_t> c{0, 2}, sel{1, 4};
  const double intra = 2 * d.at(0, 2);
  const double cross = d.at(0, 1) + d.at(0, 4) + d.at(2, 1) + d.at(2, 4);
  EXPECT_NEAR(ls::rho(c, sel, d), intra - std::log(cross), 1e-12);
  ls::IntentConfig lam2;
  lam2.lambda = 2.0;
  EXPECT_NEAR(ls::diversity_penalty(c, sel, d, lam2), -2.0 * std::log(cross), 1e-12);
  // Nothing selected yet: the log argument is floored.
  EXPECT_NEAR(ls::diversity_penalty(c, {}, d), -std::log(1e-6), 1e-9);
}

TEST(Rho, FartherFromSelectionIsCheaper) {
  nn::Tensor d({3, 3}, 0.0);
  d.at(0, 1) = d.at(1, 0) = 1.0;
  d.at(0, 2) = d.at(2, 0) = 5.0;
  d.at(1, 2) = d.at(2, 1) = 4.5;
  EXPECT_LT(ls::rho({2}, {0}, d), ls::rho({1}, {0}, d));
}

TEST(AffinityPropagation, SeparatesTwoBlobs) {
  nn::Rng rng(22);
  nn::Tensor z({12, 2});
  for (std::size_t i = 0; i < 12; ++i) {
    z.at(i, 0) = (i < 6 ? -5.0 : 5.0) + 0.2 * rng.normal();
    z.at(i, 1) = 0.2 * rng.normal();
  }
  const auto groups = ls::affinity_propagation(ls::pairwise_affinity(z));
  ASSERT_GE(groups.size(), 2u);
  for (const auto& g : groups) {
    const bool left = g.front() < 6;
    for (std::size_t i : g) EXPECT_EQ(i < 6, left);
  }
  std::size_t total = 0;
  for (const auto& g : groups) total += g.size();
  EXPECT_EQ(total, 12u);
}

TEST(AffinityPropagation, DegenerateInputs) {
  const auto one = ls::affinity_propagation(nn::Tensor({1, 1}, 0.0));
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], std::vector<std::size_t>{0});
  EXPECT_THROW(ls::affinity_propagation(nn::Tensor({2, 3}, 0.0)), ls::DimensionError);
}

namespace {

// Exhaustive minimum of the sequential objective over ordered choices of
// m disjoint candidates.
double exhaustive_best(const std::vector<std::vector<std::size_t>>& cands, const nn::Tensor& d, std::size_t m,
                       const ls::IntentConfig& config) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<std::size_t>> chosen;
  std::vector<char> used(cands.size(), 0);
  std::function<void()> rec = [&] {
    if (chosen.size() == m) {
      best = std::min(best, ls::sequence_objective(chosen, d, config));
      return;
    }
    for (std::size_t c = 0; c < cands.size(); ++c) {
      if (used[c]) continue;
      used[c] = 1;
      chosen.push_back(cands[c]);
      rec();
      chosen.pop_back();
      used[c] = 0;
    }
  };
  rec();
  return best;
}

}  // namespace

TEST(GreedySelect, FirstChoiceIsTheSmallestRho) {
  nn::Rng rng(23);
  const nn::Tensor z = gaussian(rng, 10, 2);
  const nn::Tensor d = ls::pairwise_affinity(z);
  const std::vector<std::vector<std::size_t>> cands{{0, 1, 2}, {3, 4}, {5}, {6, 7, 8, 9}};
  const auto sel = ls::greedy_select(cands, d);
  ASSERT_EQ(sel.clusters.size(), 3u);
  double min_first = std::numeric_limits<double>::infinity();
  for (const auto& c : cands) min_first = std::min(min_first, ls::rho(c, {}, d));
  EXPECT_NEAR(ls::rho(sel.clusters[0], {}, d), min_first, 1e-12);
  EXPECT_NEAR(sel.objective, ls::sequence_objective(sel.clusters, d), 1e-9);
  EXPECT_GE(sel.objective, exhaustive_best(cands, d, 3, {}) - 1e-9);
}

TEST(GreedySelect, MatchesExhaustiveOnTwoSeparatedBlobs) {
  nn::Tensor z({6, 2}, 0.0);
  for (std::size_t i = 0; i < 6; ++i) {
    z.at(i, 0) = i < 3 ? 0.1 * double(i) : 10.0 + 0.1 * double(i);
  }
  const nn::Tensor d = ls::pairwise_affinity(z);
  const std::vector<std::vector<std::size_t>> cands{{0, 1, 2}, {3, 4, 5}};
  ls::IntentConfig c;
  c.m = 2;
  const auto sel = ls::greedy_select(cands, d, c);
  EXPECT_NEAR(sel.objective, exhaustive_best(cands, d, 2, c), 1e-9);
}

TEST(GreedySelect, ClustersAreDisjointAndAtMostM) {
  nn::Rng rng(24);
  for (int trial = 0; trial < 10; ++trial) {
    const nn::Tensor z = gaussian(rng, 12, 3);
    const auto sel = ls::cluster_rows(z);
    EXPECT_LE(sel.clusters.size(), 3u);
    std::set<std::size_t> seen;
    for (const auto& c : sel.clusters) {
      EXPECT_FALSE(c.empty());
      for (std::size_t i : c) EXPECT_TRUE(seen.insert(i).second);
    }
  }
}

TEST(GreedySelect, OverlappingCandidatesAreSkipped) {
  nn::Tensor d({4, 4}, 1.0);
  for (std::size_t i = 0; i < 4; ++i) d.at(i, i) = 0.0;
  const auto sel = ls::greedy_select({{0}, {0, 1}, {2}}, d);
  for (const auto& c : sel.clusters) EXPECT_NE(c, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sel.clusters.size(), 2u);
}

TEST(Representative, ClosestMemberToQueryWithIdTieBreak) {
  const std::vector<std::uint64_t> members{40, 7, 19};
  const nn::Tensor s({3, 2}, std::vector<double>{1, 0, 0, 1, 0, 1});
  const std::vector<double> q{0.0, 0.9};
  EXPECT_EQ(ls::representative_image(members, s, q), 7u);
  const std::vector<double> q2{1.0, 0.1};
  EXPECT_EQ(ls::representative_image(members, s, q2), 40u);
  EXPECT_THROW(ls::representative_image({}, nn::Tensor({1, 2}, 0.0), q), ls::ContractError);
}

TEST(NearestSketchTarget, MatchesBruteForceArgmin) {
  nn::Rng rng(25);
  nn::Tensor h = gaussian(rng, 60, 8);
  for (auto& v : h.storage()) v = float(v);
  ls::PQConfig c = small_pq();
  c.exact = true;
  const auto index = ls::PQIndex::build(h, iota_ids(60, 500), c);
  const auto rep = row_vec(gaussian(rng, 1, 8), 0);
  EXPECT_EQ(ls::nearest_sketch_target(index, rep), ls::brute_force(h, iota_ids(60, 500), rep, 1)[0].id);
  ls::PQIndex empty(index.codebook(), c);
  EXPECT_THROW(ls::nearest_sketch_target(empty, rep), ls::ContractError);
}

TEST(ClampWeight, IntoUnitInterval) {
  EXPECT_EQ(ls::clamp_weight(-0.5), 0.0);
  EXPECT_EQ(ls::clamp_weight(1.5), 1.0);
  EXPECT_EQ(ls::clamp_weight(0.3), 0.3);
  EXPECT_EQ(ls::clamp_weight(std::nan("")), 0.0);
}

// Perturbation.

namespace {

std::vector<ls::PerturbTarget> random_targets(nn::Rng& rng, const ls::JointEmbedding& joint, std::size_t n,
                                              std::size_t dim) {
  std::vector<ls::PerturbTarget> out;
  for (std::size_t i = 0; i < n; ++i) {
    ls::PerturbTarget t;
    t.v = row_vec(gaussian(rng, 1, dim), 0);
    const auto s = joint.f_v(nn::Tensor({1, dim}, t.v));
    t.s.assign(s.values().begin(), s.values().end());
    out.push_back(t);
  }
  return out;
}

double norm(const std::vector<double>& v) { return std::sqrt(sq_dist(v, std::vector<double>(v.size(), 0.0))); }

}  // namespace

TEST(Linear, EndpointsAndIdentity) {
  nn::Rng rng(30);
  const auto q = row_vec(gaussian(rng, 1, 5), 0);
  ls::PerturbTarget t{row_vec(gaussian(rng, 1, 5), 0), {}};
  EXPECT_EQ(ls::f_linear(q, {t}, {0.0}), q);
  const auto one = ls::f_linear(q, {t}, {1.0});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(one[i], t.v[i], 1e-12);
  const auto half = ls::f_linear(q, {t}, {0.5});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(half[i], 0.5 * (q[i] + t.v[i]), 1e-12);
  EXPECT_EQ(ls::f_linear(q, {}, {}), q);
  EXPECT_THROW(ls::f_linear(q, {t}, {0.5, 0.5}), ls::DimensionError);
}

TEST(Slerp, EndpointsAndFortyFiveDegrees) {
  const std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
  EXPECT_EQ(ls::slerp(a, b, 0.0), a);
  EXPECT_EQ(ls::slerp(a, b, 1.0), b);
  const auto mid = ls::slerp(a, b, 0.5);
  EXPECT_NEAR(mid[0], std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(mid[1], std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(norm(mid), 1.0, 1e-12);
}

TEST(Slerp, InterpolatesNormsAndAngleLinearly) {
  nn::Rng rng(31);
  const auto a = row_vec(gaussian(rng, 1, 6), 0);
  auto b = row_vec(gaussian(rng, 1, 6), 0);
  const double na = norm(a), factor = na / norm(b);
  for (auto& x : b) x *= factor;
  const double dot_ab = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  const double omega = std::acos(dot_ab / (na * na));
  for (double w : {0.1, 0.3, 0.77}) {
    const auto v = ls::slerp(a, b, w);
    EXPECT_NEAR(norm(v), na, 1e-9);
    const double ang = std::acos(std::inner_product(a.begin(), a.end(), v.begin(), 0.0) / (na * norm(v)));
    EXPECT_NEAR(ang, w * omega, 1e-9);
  }
}

TEST(Slerp, AntiparallelFallsBackToLinearWithWarning) {
  const std::vector<double> a{1.0, 0.0}, b{-1.0, 0.0};
  std::optional<std::string> warning;
  const auto v = ls::f_slerp(a, {{b, {}}}, {0.25}, &warning);
  EXPECT_TRUE(warning.has_value());
  EXPECT_NEAR(v[0], 0.5, 1e-12);
  const auto same = ls::slerp(a, a, 0.4);
  EXPECT_NEAR(same[0], 1.0, 1e-12);
}

TEST(Backprop, ZeroWeightsKeepTheQuery) {
  nn::Rng rng(32);
  ls::JointEmbedding joint(6, 4, {12, 5}, rng);
  const auto q = row_vec(gaussian(rng, 1, 6), 0);
  const auto targets = random_targets(rng, joint, 3, 6);
  const auto out = ls::f_backprop(joint, q, targets, {0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.v[i], q[i], 1e-6);
}

TEST(Backprop, LossDescendsAndMovesTowardTheTarget) {
  nn::Rng rng(33);
  ls::JointEmbedding joint(6, 4, {12, 5}, rng);
  const auto q = row_vec(gaussian(rng, 1, 6), 0);
  const auto targets = random_targets(rng, joint, 1, 6);
  // With a large proximity weight the query itself can be the minimizer.
  ls::PerturbConfig c;
  c.alpha = 0.01;
  const auto out = ls::f_backprop(joint, q, targets, {1.0}, c);
  EXPECT_LT(out.best_loss, out.initial_loss);
  EXPECT_NEAR(out.initial_loss, ls::perturbation_loss(joint, q, q, targets, {1.0}, c), 1e-12);
  EXPECT_NEAR(out.best_loss, ls::perturbation_loss(joint, out.v, q, targets, {1.0}, c), 1e-9);
  EXPECT_LT(ls::target_distances(joint, out.v, targets)[0], ls::target_distances(joint, q, targets)[0]);
  EXPECT_EQ(out.loss_trace.size(), 201u);
}

TEST(Backprop, ContinuousInTheWeights) {
  nn::Rng rng(34);
  ls::JointEmbedding joint(6, 4, {12, 5}, rng);
  const auto q = row_vec(gaussian(rng, 1, 6), 0);
  const auto targets = random_targets(rng, joint, 2, 6);
  const auto out = ls::f_backprop(joint, q, targets, {1e-6, 0.0});
  EXPECT_LE(std::sqrt(sq_dist(out.v, q)), 1e-3);
}

TEST(Backprop, LeavesModelGradientsUntouched) {
  nn::Rng rng(35);
  ls::JointEmbedding joint(6, 4, {12, 5}, rng);
  joint.store().zero_grad();
  const auto q = row_vec(gaussian(rng, 1, 6), 0);
  ls::f_backprop(joint, q, random_targets(rng, joint, 2, 6), {0.5, 0.8});
  for (const auto* p : std::as_const(joint.store()).all()) {
    for (double g : p->grad.values()) EXPECT_EQ(g, 0.0);
  }
}

TEST(PerturbationLoss, FormulaOracle) {
  nn::Rng rng(36);
  ls::JointEmbedding joint(6, 4, {12, 5}, rng);
  const auto q = row_vec(gaussian(rng, 1, 6), 0), v = row_vec(gaussian(rng, 1, 6), 0);
  const auto targets = random_targets(rng, joint, 2, 6);
  const std::vector<double> w{0.3, 0.9};
  const auto s = joint.f_v(nn::Tensor({1, 6}, v));
  const std::vector<double> sv(s.values().begin(), s.values().end());
  double expect = 0.0;
  for (std::size_t j = 0; j < 2; ++j) expect += w[j] * sq_dist(sv, targets[j].s) / 2.0;
  expect += 0.1 * std::sqrt(sq_dist(v, q) + 1e-8);
  EXPECT_NEAR(ls::perturbation_loss(joint, v, q, targets, w), expect, 1e-12);
}

TEST(Perturb, ValidatesWeightsAndDecodes) {
  nn::Rng rng(37);
  ls::VaeConfig vc;
  vc.latent = 6;
  vc.hidden = 8;
  vc.max_steps = 12;
  ls::Vae vae(vc, rng);
  ls::JointEmbedding joint(6, 4, {12, 5}, rng);
  ls::PerturbationRequest req;
  req.query_v = row_vec(gaussian(rng, 1, 6), 0);
  req.targets = random_targets(rng, joint, 2, 6);
  req.weights = {0.5, 1.5};
  EXPECT_THROW(ls::perturb(vae, joint, req), ls::ContractError);
  req.weights = {0.5, 0.2};
  for (auto m : {ls::PerturbMethod::Linear, ls::PerturbMethod::Slerp, ls::PerturbMethod::Backprop}) {
    req.method = m;
    const auto r = ls::perturb(vae, joint, req);
    EXPECT_EQ(r.new_v.size(), 6u);
    EXPECT_TRUE(ls::is_valid(r.suggestion));
    EXPECT_EQ(r.distances_before.size(), 2u);
    const auto j = ls::to_json(r);
    EXPECT_EQ(j["method"], std::string(ls::method_name(m)));
    EXPECT_EQ(j["distances"].size(), 2u);
  }
  EXPECT_EQ(ls::parse_method("slerp"), ls::PerturbMethod::Slerp);
  EXPECT_THROW(ls::parse_method("nope"), std::invalid_argument);
}

TEST(InterpolationSequence, StartsAtQueryAndEndsAtFullRequest) {
  nn::Rng rng(38);
  ls::VaeConfig vc;
  vc.latent = 6;
  vc.hidden = 8;
  vc.max_steps = 12;
  ls::Vae vae(vc, rng);
  ls::JointEmbedding joint(6, 4, {12, 5}, rng);
  ls::PerturbationRequest req;
  req.query_v = row_vec(gaussian(rng, 1, 6), 0);
  req.targets = random_targets(rng, joint, 1, 6);
  req.weights = {0.8};
  req.method = ls::PerturbMethod::Linear;
  const auto frames = ls::interpolation_sequence(vae, joint, req, 5);
  ASSERT_EQ(frames.size(), 5u);
  EXPECT_EQ(frames.front().v, req.query_v);
  const auto full = ls::f_linear(req.query_v, req.targets, req.weights);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(frames.back().v[i], full[i], 1e-12);
}
