#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "livesketch/index/pq_index.hpp"
#include "livesketch/intent/intent.hpp"
#include "livesketch/models/joint_embedding.hpp"
#include "livesketch/models/raster_encoder.hpp"
#include "livesketch/models/vae.hpp"
#include "livesketch/perturb/perturbation.hpp"
#include "livesketch/sketch/dataset.hpp"

namespace livesketch {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitCounts, train, test, gallery)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(IngestOptions, classes, split, epsilon, max_points)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthOptions, classes, per_class, seed)

struct RasterConfig {
  ConvNetConfig net;
  RasterTrainConfig train;
  /// Semantic (Z) classifier training; the structure trainer uses `train`.
  RasterTrainConfig semantic{6, 32, 1e-3, 0.2, 0.5, 1};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RasterConfig, net, train, semantic)

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t k = 500;
  std::size_t m = 3;
  /// Per-request k is capped here.
  std::size_t max_k = 500;
  double session_idle_minutes = 30.0;
  std::size_t threads = 8;
  /// Frames in the interpolation sequence returned with a suggestion.
  std::size_t sequence_frames = 10;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ServiceConfig, host, port, k, m, max_k, session_idle_minutes, threads,
                                                sequence_frames)

struct EvalConfig {
  std::size_t chance_trials = 100;
  std::vector<std::size_t> precision_ks{1, 5, 10, 20, 50, 100};
  /// (query, target) pairs in the perturbation bench.
  std::size_t bench_pairs = 100;
  std::size_t bench_frames = 10;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, chance_trials, precision_ks, bench_pairs, bench_frames)

/// Every tunable of the pipeline. Files may give any subset of sections.
struct PipelineConfig {
  std::uint64_t seed = 1;
  SynthOptions synth;
  IngestOptions ingest;
  std::size_t image_size = 64;
  VaeConfig vae;
  RasterConfig raster;
  JointConfig joint;
  PQConfig pq;
  IntentConfig intent;
  PerturbConfig perturb;
  ServiceConfig service;
  EvalConfig eval;

  /// Copies `seed` into every per-module seed.
  void propagate_seed();
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PipelineConfig, seed, synth, ingest, image_size, vae, raster, joint, pq,
                                                intent, perturb, service, eval)

/// Defaults, overlaid by the file at `path` (or $LIVESKETCH_CONFIG when no
/// path is given), then by $LIVESKETCH_SEED, then by `seed`. Throws
/// std::runtime_error on unreadable or malformed files and on k < m or m < 1.
PipelineConfig load_config(const std::optional<std::filesystem::path>& path = std::nullopt,
                           std::optional<std::uint64_t> seed = std::nullopt);

void validate(const PipelineConfig& config);

}  // namespace livesketch
