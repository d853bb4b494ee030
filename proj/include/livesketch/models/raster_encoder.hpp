#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "livesketch/numerics/layers.hpp"
#include "livesketch/numerics/params.hpp"
#include "livesketch/sketch/dataset.hpp"
#include "livesketch/sketch/raster.hpp"

namespace livesketch {

struct ConvNetConfig {
  std::size_t input_size = 64;
  /// Output channels of each stride-2 3x3 block; the first block is the stem.
  std::vector<std::size_t> channels{16, 32, 64, 64};
  std::size_t out_dim = 64;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ConvNetConfig, input_size, channels, out_dim)

struct RasterTrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double margin = 0.2;
  /// Chance that a structure positive is an augmented copy of the anchor
  /// itself rather than another sketch of the same class.
  double instance_positive_rate = 0.5;
  std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RasterTrainConfig, epochs, batch_size, learning_rate, margin,
                                                instance_positive_rate, seed)

enum class Branch { Sketch, Image };

/// Two-branch convolutional structure encoder. Each branch has its own
/// first block; the remaining blocks and the linear head are one set of
/// parameters used by both. Outputs are L2-normalized.
class StructureEncoder {
 public:
  StructureEncoder(const ConvNetConfig& config, nn::Rng& rng);
  static StructureEncoder from_checkpoint(const nn::Checkpoint& ckpt, const ConvNetConfig& config);

  const ConvNetConfig& config() const { return config_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  std::size_t out_dim() const { return config_.out_dim; }

  /// x: [B, size*size] -> [B, out_dim].
  nn::Var forward(nn::Binder& b, nn::Var x, Branch branch) const;
  nn::Tensor embed(const nn::Tensor& rasters, Branch branch, std::size_t chunk = 64) const;

  nn::Tensor r_s(const RasterCanvas& canvas) const;
  nn::Tensor r_i(const RasterCanvas& image) const;

 private:
  StructureEncoder() = default;
  void bind_layers();

  ConvNetConfig config_;
  nn::ParameterStore store_;
  nn::ConvLayer sketch_stem_, image_stem_;
  std::vector<nn::ConvLayer> trunk_;
  nn::Linear head_;
};

/// Small convolutional classifier; its penultimate (post-relu) activations
/// are the auxiliary semantic embedding Z.
class SemanticEncoder {
 public:
  SemanticEncoder(const ConvNetConfig& config, std::size_t classes, nn::Rng& rng);
  static SemanticEncoder from_checkpoint(const nn::Checkpoint& ckpt, const ConvNetConfig& config);

  const ConvNetConfig& config() const { return config_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  std::size_t classes() const { return classifier_.out_features(); }
  bool trained() const;
  void mark_trained();

  /// Returns (features, logits).
  std::pair<nn::Var, nn::Var> forward(nn::Binder& b, nn::Var x) const;
  /// Z for a batch of rasters; throws ContractError before training.
  nn::Tensor embed(const nn::Tensor& rasters, std::size_t chunk = 64) const;
  nn::Tensor z_embed(const RasterCanvas& image) const;
  nn::Tensor logits(const nn::Tensor& rasters) const;

 private:
  SemanticEncoder() = default;
  void bind_layers();

  ConvNetConfig config_;
  nn::ParameterStore store_;
  std::vector<nn::ConvLayer> blocks_;
  nn::Linear features_, classifier_;
};

/// Per-row triplet hinge [m + |a-p|^2 - |a-n|^2]+ averaged over rows.
nn::Var triplet_hinge(nn::Var anchor, nn::Var positive, nn::Var negative, double margin);

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  /// Triplet accuracy or classification accuracy, depending on the trainer.
  double accuracy = 0.0;
};

struct TrainLog {
  std::optional<std::filesystem::path> checkpoint;
  std::ostream* log = nullptr;
};

/// Triplets: anchor = sketch raster through the sketch branch; positive =
/// augmented same-class image and negative = augmented image of another
/// class, both through the image branch.
std::vector<EpochStats> train_structure(StructureEncoder& model, const std::vector<Sketch>& sketches,
                                        const std::vector<int>& labels, const RasterTrainConfig& config,
                                        const TrainLog& log = {});

/// Softmax cross-entropy on augmented renderings of the training sketches.
std::vector<EpochStats> train_semantic(SemanticEncoder& model, const std::vector<Sketch>& sketches,
                                       const std::vector<int>& labels, const RasterTrainConfig& config,
                                       const TrainLog& log = {});

/// Raster of each sketch at `size`.
nn::Tensor rasterize_all(const std::vector<Sketch>& sketches, std::size_t size);

}  // namespace livesketch
