#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "livesketch/numerics/tape.hpp"

namespace livesketch::nn {

/// Seeded generator threaded through every initializer and sampler.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Owns named parameters with stable addresses, in creation order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& create(const std::string& name, Tensor value);
  /// Gaussian init with standard deviation `stddev`.
  Parameter& create_normal(const std::string& name, Shape shape, double stddev, Rng& rng);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> by_name_;
};

/// Name -> tensor container with a versioned binary file format.
///
/// Layout (little-endian): 8-byte magic "LSCKPT01", u32 version (1),
/// u32 entry count, then per entry in name order: u32 name length, name
/// bytes, u32 rank, u64 dims[rank], f64 values[product(dims)].
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, Tensor> tensors;

  static Checkpoint from(const ParameterStore& store);
  /// Copies matching tensors into the store. Every store parameter must be
  /// present with an identical shape.
  void apply(ParameterStore& store) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
};

/// Binds parameters to a tape once per forward pass, so repeated uses (for
/// example across recurrent steps) share one tape node. A frozen binder
/// records parameters as constants, so backward never touches their grads.
class Binder {
 public:
  explicit Binder(Tape& tape, bool frozen = false) : tape_(tape), frozen_(frozen) {}
  Var operator()(Parameter& p);
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  bool frozen_;
  std::unordered_map<const Parameter*, Var> bound_;
};

/// Adam hyper-parameters; `clip_norm` > 0 rescales the global gradient norm.
struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;
};

/// Adam optimizer with per-parameter moments.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config);

  /// Applies one update from each parameter's `grad`.
  void step();
  void zero_grad();
  std::size_t step_count() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t steps_ = 0;
};

}  // namespace livesketch::nn
