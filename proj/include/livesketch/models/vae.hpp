#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "livesketch/numerics/layers.hpp"
#include "livesketch/numerics/params.hpp"
#include "livesketch/sketch/sketch.hpp"

namespace livesketch {

/// Variance ceiling of the latent variate, as a log-variance.
inline const double kLogVarCeiling = std::log(1e-2);

struct VaeConfig {
  std::size_t latent = 128;
  std::size_t hidden = 256;
  std::size_t classes = 2;
  std::size_t max_steps = 96;
  bool clamp_variance = true;
  /// Fixed standard deviation of the Gaussian offset likelihood; the
  /// reconstruction term is sum |d - d_hat|^2 / (2 sigma^2) plus flag BCEs.
  double offset_sigma = 0.1;
  double kl_weight = 1.0;
  /// Linear KL warm-up over this many epochs; 0 disables annealing.
  std::size_t kl_anneal_epochs = 0;
  /// 0 trains a plain sequence VAE with an idle classifier head.
  double classification_weight = 1.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VaeConfig, latent, hidden, classes, max_steps, clamp_variance,
                                                offset_sigma, kl_weight, kl_anneal_epochs, classification_weight, epochs,
                                                batch_size, learning_rate, clip_norm, seed)

struct LatentCode {
  nn::Tensor z0;
  nn::Tensor mu;
  nn::Tensor log_var;
  nn::Tensor batch_z;
};

struct VaeLosses {
  double reconstruction = 0.0;
  double kl = 0.0;
  double classification = 0.0;
  double total = 0.0;
};

struct DecodeResult {
  Sketch sketch;
  bool hit_max_steps = false;
};

/// Padded time-major batch of sketches. Step t holds [B, 3] inputs and a
/// [B, 1] mask that is 1 while t is inside the sketch.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<nn::Tensor> points;
  std::vector<nn::Tensor> masks;
  std::vector<std::size_t> lengths;

  static SequenceBatch from(const std::vector<const Sketch*>& sketches);
};

/// Graph outputs of one training forward pass.
struct VaeGraph {
  nn::Var mu;
  nn::Var log_var;
  nn::Var logits;
  nn::Var reconstruction;
  nn::Var kl;
  nn::Var classification;
  nn::Var total;
};

/// Bidirectional LSTM encoder with a mu / log-variance bottleneck, a linear
/// classifier on mu, and an LSTM decoder conditioned on the latent code.
///
/// The decoder head emits (dx, dy, lift logit, end logit) per step. It is
/// trained with a fixed-variance Gaussian likelihood on offsets and binary
/// cross-entropy on both flags, with teacher forcing; inference decodes
/// greedily.
class Vae {
 public:
  Vae(const VaeConfig& config, nn::Rng& rng);
  /// Rebuilds a model from a checkpoint; dimensions come from tensor shapes.
  static Vae from_checkpoint(const nn::Checkpoint& ckpt, std::size_t max_steps = 96);

  const VaeConfig& config() const { return config_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  std::size_t latent_dim() const { return config_.latent; }

  /// Encoder graph for a batch; returns (mu, log_var), each [B, latent].
  std::pair<nn::Var, nn::Var> encode_graph(nn::Binder& b, const SequenceBatch& batch) const;

  LatentCode encode(const Sketch& sketch, bool sample, nn::Rng* rng = nullptr) const;
  /// Deterministic codes (mu) for many sketches, [N, latent].
  nn::Tensor encode_mu(const std::vector<Sketch>& sketches, std::size_t chunk = 64) const;
  nn::Tensor class_logits(const nn::Tensor& mu) const;

  DecodeResult decode(const nn::Tensor& z, std::optional<std::size_t> max_steps = std::nullopt) const;

  /// Full loss graph. `noise` is the reparameterization draw [B, latent];
  /// zeros make the pass deterministic (batch_z = mu).
  VaeGraph loss_graph(nn::Binder& b, const SequenceBatch& batch, std::span<const int> labels, const nn::Tensor& noise,
                      double kl_weight = 1.0) const;

 private:
  Vae() = default;
  void bind_layers();

  VaeConfig config_;
  nn::ParameterStore store_;
  nn::LstmCell enc_fwd_, enc_bwd_, dec_;
  nn::Linear mu_head_, log_var_head_, classifier_, init_head_, out_head_;
};

/// -1/2 sum(1 + log_var - mu^2 - exp(log_var)) per row, averaged over rows.
nn::Var kl_loss(nn::Var mu, nn::Var log_var);
double kl_loss(const nn::Tensor& mu, const nn::Tensor& log_var);
nn::Tensor covariance_clamp(const nn::Tensor& log_var);

struct VaeEpoch {
  std::size_t epoch = 0;
  VaeLosses train;
  /// Running training-batch accuracy during the epoch.
  double accuracy = 0.0;
};

struct VaeTrainOptions {
  std::optional<std::filesystem::path> checkpoint;
  std::ostream* log = nullptr;
};

/// Adam on the total loss. Writes a checkpoint after every epoch when a
/// path is given. A non-finite loss restores the last good epoch's weights
/// and throws DivergenceError.
std::vector<VaeEpoch> train_vae(Vae& model, const std::vector<Sketch>& sketches, const std::vector<int>& labels,
                                const VaeTrainOptions& options = {});

double classification_accuracy(const Vae& model, const std::vector<Sketch>& sketches, const std::vector<int>& labels);

}  // namespace livesketch
