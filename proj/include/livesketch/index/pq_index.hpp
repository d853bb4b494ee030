#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "livesketch/numerics/tensor.hpp"

namespace livesketch {

struct Neighbor {
  std::uint64_t id = 0;
  double distance = 0.0;  // squared L2
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};
using ResultList = std::vector<Neighbor>;

struct PQConfig {
  std::size_t subspaces = 8;
  std::size_t centroids = 256;
  std::size_t iterations = 20;
  /// Vectors sampled for k-means; 0 uses all.
  std::size_t max_train = 32768;
  /// Keep float32 copies of the vectors in the index.
  bool store_raw = true;
  /// Route queries through the exact scan (needs raw vectors).
  bool exact = false;
  /// Exact re-ranking depth over the ADC shortlist; 0 returns pure ADC.
  std::size_t rerank = 1024;
  std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PQConfig, subspaces, centroids, iterations, max_train, store_raw, exact,
                                                rerank, seed)

/// M x K centroids of dimension dim / M, float32.
struct PQCodebook {
  std::size_t dim = 0;
  std::size_t subspaces = 0;
  std::size_t centroids = 0;
  std::vector<float> values;

  std::size_t sub_dim() const { return dim / subspaces; }
  const float* centroid(std::size_t m, std::size_t k) const { return values.data() + (m * centroids + k) * sub_dim(); }

  std::vector<std::uint8_t> encode(std::span<const double> v) const;
  std::vector<double> decode(std::span<const std::uint8_t> code) const;
  /// [M, K] squared distances from the query's sub-vectors to the centroids.
  std::vector<double> distance_table(std::span<const double> q) const;
  /// Sum over subspaces of table entries; the ADC distance.
  double adc(const std::vector<double>& table, const std::uint8_t* code) const;
  /// Mean squared reconstruction error over rows.
  double quantization_error(const nn::Tensor& vectors) const;
};

/// Per-subspace k-means (k-means++ seeding, fixed iterations).
/// Throws ContractError with fewer than K vectors or dim not divisible by M.
PQCodebook train_codebook(const nn::Tensor& vectors, const PQConfig& config);

/// Exhaustive exact L2 ranking; ties by ascending id.
ResultList brute_force(const nn::Tensor& vectors, std::span<const std::uint64_t> ids, std::span<const double> q,
                       std::size_t k);

/// Product-quantized vectors scanned with asymmetric distance computation.
///
/// File layout (little-endian): magic "LSPQIDX1"; u32 version (1);
/// u32 dim, u32 M, u32 K, u64 count, u8 has_raw, u8 exact, u32 rerank;
/// f32 centroids[M*K*dim/M]; u64 ids[count]; u8 codes[count*M];
/// f32 raw[count*dim] when has_raw.
class PQIndex {
 public:
  static constexpr std::uint32_t kVersion = 1;

  PQIndex() = default;
  PQIndex(PQCodebook codebook, const PQConfig& config);

  static PQIndex build(const nn::Tensor& vectors, std::span<const std::uint64_t> ids, const PQConfig& config);

  /// Throws ContractError on a duplicate id or wrong dimension.
  void add(std::uint64_t id, std::span<const double> v);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return codebook_.dim; }
  const PQCodebook& codebook() const { return codebook_; }
  const std::vector<std::uint64_t>& ids() const { return ids_; }
  const std::vector<std::uint8_t>& codes() const { return codes_; }
  bool has_raw() const { return store_raw_; }
  bool exact() const { return exact_; }
  std::size_t rerank_depth() const { return rerank_; }
  std::vector<double> raw_vector(std::size_t row) const;

  /// Default query path: exact scan in exact mode, else ADC with optional
  /// exact re-ranking of the shortlist. Empty index -> empty list.
  ResultList knn(std::span<const double> q, std::size_t k = 500) const;
  /// Pure ADC ranking; ties by ascending id.
  ResultList knn_adc(std::span<const double> q, std::size_t k) const;
  ResultList knn_exact(std::span<const double> q, std::size_t k) const;

  void save(const std::filesystem::path& path) const;
  static PQIndex load(const std::filesystem::path& path);
  std::string serialize() const;
  static PQIndex deserialize(const std::string& bytes);

  friend bool operator==(const PQIndex& a, const PQIndex& b);

 private:
  PQCodebook codebook_;
  std::vector<std::uint64_t> ids_;
  std::unordered_set<std::uint64_t> id_set_;
  std::vector<std::uint8_t> codes_;
  std::vector<float> raw_;
  bool store_raw_ = true;
  bool exact_ = false;
  std::size_t rerank_ = 0;
};

}  // namespace livesketch
