#include "livesketch/index/pq_index.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "livesketch/numerics/errors.hpp"
#include "livesketch/numerics/params.hpp"

namespace livesketch {

namespace {

constexpr char kMagic[8] = {'L', 'S', 'P', 'Q', 'I', 'D', 'X', '1'};

bool closer(const Neighbor& a, const Neighbor& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
}

// Keeps the k best of `all` in ascending (distance, id) order.
ResultList top_k(ResultList all, std::size_t k) {
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + long(k), all.end(), closer);
  all.resize(k);
  return all;
}

// Shared by the lookup table and reconstruction paths so both agree bitwise.
double sub_distance(const double* q, const float* c, std::size_t n) {
  double d = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double diff = q[j] - double(c[j]);
    d += diff * diff;
  }
  return d;
}

double sq_distance(std::span<const double> q, const float* v) {
  double d = 0.0;
  for (std::size_t j = 0; j < q.size(); ++j) {
    const double diff = q[j] - double(v[j]);
    d += diff * diff;
  }
  return d;
}

void check_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw DimensionError(std::string(what) + ": vector has " + std::to_string(got) + " values, index dimension is " +
                         std::to_string(want));
  }
}

// k-means on n points of dimension d (row-major), k centroids.
std::vector<float> kmeans(const std::vector<double>& pts, std::size_t n, std::size_t d, std::size_t k,
                          std::size_t iterations, nn::Rng& rng) {
  std::vector<double> cent(k * d);
  auto dist = [&](std::size_t i, const double* c) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (pts[i * d + j] - c[j]) * (pts[i * d + j] - c[j]);
    return s;
  };
  // k-means++ seeding.
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.index(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy_n(pts.begin() + long(pick * d), d, cent.begin() + long(c * d));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist(i, cent.data() + c * d));
      total += best[i];
    }
    if (c + 1 == k) break;
    if (total <= 0.0) {
      pick = rng.index(n);
      continue;
    }
    double r = rng.uniform(0.0, total);
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= best[i];
      if (r < 0.0) {
        pick = i;
        break;
      }
    }
  }
  // Lloyd iterations; empty clusters keep their centroid.
  std::vector<std::size_t> assign(n, 0);
  std::vector<double> sums(k * d);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = dist(i, cent.data() + c * d);
        if (dd < bd) {
          bd = dd;
          assign[i] = c;
        }
      }
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += pts[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) cent[c * d + j] = sums[c * d + j] / double(counts[c]);
    }
  }
  return std::vector<float>(cent.begin(), cent.end());
}

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void put_array(std::string& out, const std::vector<T>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  template <typename T>
  std::vector<T> get_array(std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(T)) throw std::runtime_error("index file is truncated");
    std::vector<T> v(n);
    take(v.data(), n * sizeof(T));
    return v;
  }
  void take(void* dst, std::size_t n) {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("index file is truncated");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

// Codebook ---------------------------------------------------------------------

std::vector<std::uint8_t> PQCodebook::encode(std::span<const double> v) const {
  check_dim(v.size(), dim, "encode");
  const std::size_t sd = sub_dim();
  std::vector<std::uint8_t> code(subspaces);
  for (std::size_t m = 0; m < subspaces; ++m) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centroids; ++k) {
      const double d = sub_distance(v.data() + m * sd, centroid(m, k), sd);
      if (d < best) {
        best = d;
        code[m] = std::uint8_t(k);
      }
    }
  }
  return code;
}

std::vector<double> PQCodebook::decode(std::span<const std::uint8_t> code) const {
  if (code.size() != subspaces) throw DimensionError("decode: code length differs from subspace count");
  std::vector<double> out;
  out.reserve(dim);
  for (std::size_t m = 0; m < subspaces; ++m) {
    const float* c = centroid(m, code[m]);
    out.insert(out.end(), c, c + sub_dim());
  }
  return out;
}

std::vector<double> PQCodebook::distance_table(std::span<const double> q) const {
  check_dim(q.size(), dim, "distance_table");
  const std::size_t sd = sub_dim();
  std::vector<double> table(subspaces * centroids);
  for (std::size_t m = 0; m < subspaces; ++m) {
    for (std::size_t k = 0; k < centroids; ++k) table[m * centroids + k] = sub_distance(q.data() + m * sd, centroid(m, k), sd);
  }
  return table;
}

double PQCodebook::adc(const std::vector<double>& table, const std::uint8_t* code) const {
  double d = 0.0;
  for (std::size_t m = 0; m < subspaces; ++m) d += table[m * centroids + code[m]];
  return d;
}

double PQCodebook::quantization_error(const nn::Tensor& vectors) const {
  double total = 0.0;
  for (std::size_t r = 0; r < vectors.rows(); ++r) {
    const auto row = vectors.row_span(r);
    const auto rec = decode(encode(row));
    for (std::size_t j = 0; j < dim; ++j) total += (row[j] - rec[j]) * (row[j] - rec[j]);
  }
  return total / double(vectors.rows());
}

PQCodebook train_codebook(const nn::Tensor& vectors, const PQConfig& config) {
  const std::size_t n = vectors.rows(), dim = vectors.cols();
  if (config.subspaces == 0 || dim % config.subspaces != 0) {
    throw ContractError("dimension " + std::to_string(dim) + " is not divisible into " +
                        std::to_string(config.subspaces) + " subspaces");
  }
  if (config.centroids == 0 || config.centroids > 256) throw ContractError("centroid count must be in [1, 256]");
  if (n < config.centroids) {
    throw ContractError("codebook training needs at least " + std::to_string(config.centroids) + " vectors, got " +
                        std::to_string(n));
  }
  nn::Rng rng(config.seed);
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  if (config.max_train > 0 && n > config.max_train) {
    std::shuffle(rows.begin(), rows.end(), rng.engine());
    rows.resize(std::max(config.max_train, config.centroids));
    std::sort(rows.begin(), rows.end());
  }
  PQCodebook cb{dim, config.subspaces, config.centroids, {}};
  const std::size_t sd = cb.sub_dim();
  cb.values.reserve(config.subspaces * config.centroids * sd);
  std::vector<double> pts(rows.size() * sd);
  for (std::size_t m = 0; m < config.subspaces; ++m) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < sd; ++j) pts[i * sd + j] = vectors.at(rows[i], m * sd + j);
    }
    const auto cent = kmeans(pts, rows.size(), sd, config.centroids, config.iterations, rng);
    cb.values.insert(cb.values.end(), cent.begin(), cent.end());
  }
  return cb;
}

ResultList brute_force(const nn::Tensor& vectors, std::span<const std::uint64_t> ids, std::span<const double> q,
                       std::size_t k) {
  if (ids.size() != vectors.rows()) throw DimensionError("brute_force: id count differs from vector count");
  ResultList all;
  all.reserve(ids.size());
  for (std::size_t r = 0; r < vectors.rows(); ++r) {
    check_dim(q.size(), vectors.cols(), "brute_force");
    const auto row = vectors.row_span(r);
    double d = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) d += (q[j] - row[j]) * (q[j] - row[j]);
    all.push_back({ids[r], d});
  }
  return top_k(std::move(all), k);
}

// Index ------------------------------------------------------------------------

PQIndex::PQIndex(PQCodebook codebook, const PQConfig& config)
    : codebook_(std::move(codebook)), store_raw_(config.store_raw || config.exact), exact_(config.exact),
      rerank_(config.store_raw ? config.rerank : 0) {}

PQIndex PQIndex::build(const nn::Tensor& vectors, std::span<const std::uint64_t> ids, const PQConfig& config) {
  if (ids.size() != vectors.rows()) throw DimensionError("build: id count differs from vector count");
  PQIndex index(train_codebook(vectors, config), config);
  for (std::size_t r = 0; r < vectors.rows(); ++r) index.add(ids[r], vectors.row_span(r));
  return index;
}

void PQIndex::add(std::uint64_t id, std::span<const double> v) {
  check_dim(v.size(), codebook_.dim, "add");
  if (!id_set_.insert(id).second) throw ContractError("duplicate index id " + std::to_string(id));
  ids_.push_back(id);
  const auto code = codebook_.encode(v);
  codes_.insert(codes_.end(), code.begin(), code.end());
  if (store_raw_) {
    for (double x : v) raw_.push_back(float(x));
  }
}

std::vector<double> PQIndex::raw_vector(std::size_t row) const {
  if (!store_raw_) throw ContractError("index holds no raw vectors");
  const float* p = raw_.data() + row * dim();
  return std::vector<double>(p, p + dim());
}

namespace {

struct Candidate {
  double distance;
  std::uint64_t id;
  std::size_t row;
};

bool candidate_closer(const Candidate& a, const Candidate& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
}

void keep_best(std::vector<Candidate>& c, std::size_t k) {
  k = std::min(k, c.size());
  std::partial_sort(c.begin(), c.begin() + long(k), c.end(), candidate_closer);
  c.resize(k);
}

ResultList to_results(const std::vector<Candidate>& c) {
  ResultList out;
  out.reserve(c.size());
  for (const auto& x : c) out.push_back({x.id, x.distance});
  return out;
}

std::vector<Candidate> adc_scan(const PQCodebook& cb, const std::vector<std::uint64_t>& ids,
                                const std::vector<std::uint8_t>& codes, std::span<const double> q, std::size_t k) {
  const auto table = cb.distance_table(q);
  const std::size_t m = cb.subspaces;
  std::vector<Candidate> all(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) all[i] = {cb.adc(table, codes.data() + i * m), ids[i], i};
  keep_best(all, k);
  return all;
}

}  // namespace

ResultList PQIndex::knn_adc(std::span<const double> q, std::size_t k) const {
  if (ids_.empty() || k == 0) return {};
  return to_results(adc_scan(codebook_, ids_, codes_, q, k));
}

ResultList PQIndex::knn_exact(std::span<const double> q, std::size_t k) const {
  if (!store_raw_) throw ContractError("exact search needs raw vectors in the index");
  if (ids_.empty() || k == 0) return {};
  check_dim(q.size(), dim(), "knn");
  std::vector<Candidate> all(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) all[i] = {sq_distance(q, raw_.data() + i * dim()), ids_[i], i};
  keep_best(all, k);
  return to_results(all);
}

ResultList PQIndex::knn(std::span<const double> q, std::size_t k) const {
  if (exact_) return knn_exact(q, k);
  if (rerank_ == 0 || !store_raw_) return knn_adc(q, k);
  if (ids_.empty() || k == 0) return {};
  // Exact distances over the ADC shortlist.
  std::vector<Candidate> shortlist = adc_scan(codebook_, ids_, codes_, q, std::max(k, rerank_));
  for (auto& c : shortlist) c.distance = sq_distance(q, raw_.data() + c.row * dim());
  keep_best(shortlist, k);
  return to_results(shortlist);
}

std::string PQIndex::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, std::uint32_t(codebook_.dim));
  put<std::uint32_t>(out, std::uint32_t(codebook_.subspaces));
  put<std::uint32_t>(out, std::uint32_t(codebook_.centroids));
  put<std::uint64_t>(out, ids_.size());
  put<std::uint8_t>(out, store_raw_ ? 1 : 0);
  put<std::uint8_t>(out, exact_ ? 1 : 0);
  put<std::uint32_t>(out, std::uint32_t(rerank_));
  put_array(out, codebook_.values);
  put_array(out, ids_);
  put_array(out, codes_);
  if (store_raw_) put_array(out, raw_);
  return out;
}

PQIndex PQIndex::deserialize(const std::string& bytes) {
  Reader r(bytes);
  char magic[8];
  r.take(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw std::runtime_error("not a livesketch index file");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw std::runtime_error("unsupported index version " + std::to_string(version));
  PQIndex idx;
  idx.codebook_.dim = r.get<std::uint32_t>();
  idx.codebook_.subspaces = r.get<std::uint32_t>();
  idx.codebook_.centroids = r.get<std::uint32_t>();
  if (idx.codebook_.subspaces == 0 || idx.codebook_.dim % idx.codebook_.subspaces != 0 ||
      idx.codebook_.centroids == 0 || idx.codebook_.centroids > 256) {
    throw std::runtime_error("index header is inconsistent");
  }
  const auto count = r.get<std::uint64_t>();
  idx.store_raw_ = r.get<std::uint8_t>() != 0;
  idx.exact_ = r.get<std::uint8_t>() != 0;
  idx.rerank_ = r.get<std::uint32_t>();
  idx.codebook_.values = r.get_array<float>(idx.codebook_.subspaces * idx.codebook_.centroids * idx.codebook_.sub_dim());
  idx.ids_ = r.get_array<std::uint64_t>(count);
  idx.codes_ = r.get_array<std::uint8_t>(count * idx.codebook_.subspaces);
  if (idx.store_raw_) idx.raw_ = r.get_array<float>(count * idx.codebook_.dim);
  if (!r.done()) throw std::runtime_error("index file has trailing bytes");
  for (auto id : idx.ids_) {
    if (!idx.id_set_.insert(id).second) throw std::runtime_error("index file has duplicate ids");
  }
  return idx;
}

void PQIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write index " + path.string());
  const std::string bytes = serialize();
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

PQIndex PQIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read index " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

bool operator==(const PQIndex& a, const PQIndex& b) {
  return a.codebook_.dim == b.codebook_.dim && a.codebook_.subspaces == b.codebook_.subspaces &&
         a.codebook_.centroids == b.codebook_.centroids && a.codebook_.values == b.codebook_.values &&
         a.ids_ == b.ids_ && a.codes_ == b.codes_ && a.raw_ == b.raw_ && a.store_raw_ == b.store_raw_ &&
         a.exact_ == b.exact_ && a.rerank_ == b.rerank_;
}

}  // namespace livesketch
