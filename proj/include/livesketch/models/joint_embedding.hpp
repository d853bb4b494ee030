#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "livesketch/models/raster_encoder.hpp"
#include "livesketch/models/vae.hpp"
#include "livesketch/numerics/layers.hpp"

namespace livesketch {

struct JointConfig {
  std::size_t hidden = 128;
  std::size_t out_dim = 64;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double margin = 0.2;
  /// Fraction of negatives drawn from the anchor's own class (other
  /// sketches); 0 keeps negatives strictly cross-class.
  double same_class_negative_rate = 0.0;
  std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(JointConfig, hidden, out_dim, epochs, batch_size, learning_rate,
                                                margin, same_class_negative_rate, seed)

/// Four fully connected layers into the search space S. The first layer
/// is separate for vector (V) and raster (R) inputs; layers 2-4 exist once
/// and serve both paths. Outputs are L2-normalized.
class JointEmbedding {
 public:
  JointEmbedding(std::size_t v_dim, std::size_t r_dim, const JointConfig& config, nn::Rng& rng);
  static JointEmbedding from_checkpoint(const nn::Checkpoint& ckpt);

  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  std::size_t v_dim() const { return first_v_.in_features(); }
  std::size_t r_dim() const { return first_r_.in_features(); }
  std::size_t out_dim() const { return shared_[2].out_features(); }

  nn::Var forward_v(nn::Binder& b, nn::Var v) const;
  nn::Var forward_r(nn::Binder& b, nn::Var r) const;
  /// Row-wise maps, [N, v_dim] -> [N, out_dim] and [N, r_dim] -> [N, out_dim].
  nn::Tensor f_v(const nn::Tensor& v) const;
  nn::Tensor f_r(const nn::Tensor& r) const;

 private:
  JointEmbedding() = default;
  nn::Var shared(nn::Binder& b, nn::Var h) const;
  void bind_layers();

  nn::ParameterStore store_;
  nn::Linear first_v_, first_r_;
  nn::Linear shared_[3];
};

/// The trained encoders behind the search space.
struct SearchModels {
  Vae vae;
  StructureEncoder structure;
  SemanticEncoder semantic;
  JointEmbedding joint;

  std::size_t raster_size() const { return structure.config().input_size; }

  /// S_Q(Q) = F_V(V_E(Q)) with the deterministic encoder path.
  nn::Tensor s_q(const Sketch& q) const;
  nn::Tensor s_q(const std::vector<Sketch>& qs) const;
  /// S_I(I) = F_R(R_I(I)).
  nn::Tensor s_i(const RasterCanvas& image) const;
  nn::Tensor s_i(const nn::Tensor& images) const;
  /// F_R(R_S(raster)): rasters through the sketch branch.
  nn::Tensor s_r(const nn::Tensor& rasters) const;
  nn::Tensor z(const nn::Tensor& images) const { return semantic.embed(images); }
};

/// [m + |a-p|^2 - |a-n|^2]+ on given embeddings.
double triplet_loss(const nn::Tensor& a, const nn::Tensor& p, const nn::Tensor& n, double margin = 0.2);
/// Triplet loss of a sketch anchor against raster positive / negative,
/// both routed through the sketch branch R_S.
double triplet_loss(const SearchModels& models, const Sketch& anchor, const RasterCanvas& positive,
                    const RasterCanvas& negative, double margin = 0.2);

struct JointEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  /// Fraction of validation triplets with d_pos < d_neg.
  double validation_accuracy = 0.0;
};

/// Frozen-encoder features of a labelled sketch set: V = mu codes and
/// R = R_S of the sketches' own rasters.
struct JointFeatures {
  nn::Tensor v;
  nn::Tensor r;
  std::vector<int> labels;
};
JointFeatures joint_features(const Vae& vae, const StructureEncoder& structure, const std::vector<Sketch>& sketches,
                             const std::vector<int>& labels);

/// Trains the fc stack on triplets (V of anchor, R of its raster, R of a
/// raster from another class). Validation triplets use a fixed seed.
std::vector<JointEpoch> train_joint(JointEmbedding& model, const JointFeatures& train, const JointFeatures& validation,
                                    const JointConfig& config, const TrainLog& log = {});

}  // namespace livesketch
