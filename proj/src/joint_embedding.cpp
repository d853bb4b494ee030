#include "livesketch/models/joint_embedding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

using nn::Tensor;
using nn::Var;

namespace {

Tensor gather(const Tensor& all, const std::vector<std::size_t>& rows) {
  const std::size_t cols = all.cols();
  std::vector<double> v;
  v.reserve(rows.size() * cols);
  for (std::size_t r : rows) v.insert(v.end(), all.values().begin() + long(r * cols), all.values().begin() + long((r + 1) * cols));
  return Tensor({rows.size(), cols}, std::move(v));
}

// Negative index for anchor i: another class, or with probability `same`
// another sketch of the anchor's class.
std::size_t pick_negative(std::size_t i, const std::vector<int>& labels,
                          const std::vector<std::vector<std::size_t>>& classes, double same, nn::Rng& rng) {
  const auto own = std::size_t(labels[i]);
  if (same > 0.0 && classes[own].size() > 1 && rng.uniform() < same) {
    for (;;) {
      const std::size_t j = classes[own][rng.index(classes[own].size())];
      if (j != i) return j;
    }
  }
  for (;;) {
    const std::size_t c = rng.index(classes.size());
    if (c != own && !classes[c].empty()) return classes[c][rng.index(classes[c].size())];
  }
}

std::vector<std::vector<std::size_t>> group(const std::vector<int>& labels) {
  int top = 0;
  for (int l : labels) top = std::max(top, l);
  std::vector<std::vector<std::size_t>> out(std::size_t(top) + 1);
  for (std::size_t i = 0; i < labels.size(); ++i) out[std::size_t(labels[i])].push_back(i);
  std::size_t populated = 0;
  for (const auto& c : out) populated += !c.empty();
  if (populated < 2) throw ContractError("joint training needs at least two classes");
  return out;
}

}  // namespace

JointEmbedding::JointEmbedding(std::size_t v_dim, std::size_t r_dim, const JointConfig& config, nn::Rng& rng) {
  const double gain = std::sqrt(2.0);
  nn::Linear::create(store_, "joint.first_v", v_dim, config.hidden, rng, gain);
  nn::Linear::create(store_, "joint.first_r", r_dim, config.hidden, rng, gain);
  nn::Linear::create(store_, "joint.shared2", config.hidden, config.hidden, rng, gain);
  nn::Linear::create(store_, "joint.shared3", config.hidden, config.hidden, rng, gain);
  nn::Linear::create(store_, "joint.shared4", config.hidden, config.out_dim, rng);
  bind_layers();
}

void JointEmbedding::bind_layers() {
  first_v_ = nn::Linear::bind(store_, "joint.first_v");
  first_r_ = nn::Linear::bind(store_, "joint.first_r");
  shared_[0] = nn::Linear::bind(store_, "joint.shared2");
  shared_[1] = nn::Linear::bind(store_, "joint.shared3");
  shared_[2] = nn::Linear::bind(store_, "joint.shared4");
}

JointEmbedding JointEmbedding::from_checkpoint(const nn::Checkpoint& ckpt) {
  JointEmbedding e;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("joint.", 0) == 0) e.store_.create(name, t);
  }
  for (const char* name : {"joint.first_v", "joint.first_r", "joint.shared2", "joint.shared3", "joint.shared4"}) {
    for (const char* part : {".weight", ".bias"}) {
      if (!e.store_.find(std::string(name) + part)) throw ContractError(std::string("checkpoint is missing ") + name + part);
    }
  }
  e.bind_layers();
  return e;
}

Var JointEmbedding::shared(nn::Binder& b, Var h) const {
  h = relu(shared_[0](b, relu(h)));
  h = relu(shared_[1](b, h));
  return l2_normalize_rows(shared_[2](b, h));
}

Var JointEmbedding::forward_v(nn::Binder& b, Var v) const { return shared(b, first_v_(b, v)); }
Var JointEmbedding::forward_r(nn::Binder& b, Var r) const { return shared(b, first_r_(b, r)); }

Tensor JointEmbedding::f_v(const Tensor& v) const {
  if (v.cols() != v_dim()) {
    throw DimensionError("f_v: input " + nn::shape_string(v.shape()) + " expects " + std::to_string(v_dim()) + " columns");
  }
  nn::Tape tape(nn::Tape::Mode::Inference);
  nn::Binder b(tape);
  return forward_v(b, tape.constant(v)).value();
}

Tensor JointEmbedding::f_r(const Tensor& r) const {
  if (r.cols() != r_dim()) {
    throw DimensionError("f_r: input " + nn::shape_string(r.shape()) + " expects " + std::to_string(r_dim()) + " columns");
  }
  nn::Tape tape(nn::Tape::Mode::Inference);
  nn::Binder b(tape);
  return forward_r(b, tape.constant(r)).value();
}

Tensor SearchModels::s_q(const Sketch& q) const { return joint.f_v(vae.encode(q, false).mu); }
Tensor SearchModels::s_q(const std::vector<Sketch>& qs) const { return joint.f_v(vae.encode_mu(qs)); }
Tensor SearchModels::s_i(const RasterCanvas& image) const { return joint.f_r(structure.r_i(image)); }
Tensor SearchModels::s_i(const Tensor& images) const { return joint.f_r(structure.embed(images, Branch::Image)); }
Tensor SearchModels::s_r(const Tensor& rasters) const { return joint.f_r(structure.embed(rasters, Branch::Sketch)); }

double triplet_loss(const Tensor& a, const Tensor& p, const Tensor& n, double margin) {
  if (a.size() != p.size() || a.size() != n.size()) throw DimensionError("triplet_loss: embedding sizes differ");
  double dp = 0.0, dn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dp += (a[i] - p[i]) * (a[i] - p[i]);
    dn += (a[i] - n[i]) * (a[i] - n[i]);
  }
  return std::max(0.0, margin + dp - dn);
}

double triplet_loss(const SearchModels& models, const Sketch& anchor, const RasterCanvas& positive,
                    const RasterCanvas& negative, double margin) {
  return triplet_loss(models.s_q(anchor), models.joint.f_r(models.structure.r_s(positive)),
                      models.joint.f_r(models.structure.r_s(negative)), margin);
}

JointFeatures joint_features(const Vae& vae, const StructureEncoder& structure, const std::vector<Sketch>& sketches,
                             const std::vector<int>& labels) {
  if (sketches.size() != labels.size()) throw DimensionError("joint_features: sketch and label counts differ");
  return {vae.encode_mu(sketches),
          structure.embed(rasterize_all(sketches, structure.config().input_size), Branch::Sketch), labels};
}

std::vector<JointEpoch> train_joint(JointEmbedding& model, const JointFeatures& train, const JointFeatures& validation,
                                    const JointConfig& config, const TrainLog& log) {
  if (train.v.rows() != train.labels.size() || train.r.rows() != train.labels.size()) {
    throw DimensionError("train_joint: feature rows differ from label count");
  }
  const auto classes = group(train.labels);
  nn::Rng rng(config.seed ^ 0x10147ULL);
  nn::Adam adam(model.store().all(), {config.learning_rate, 0.9, 0.999, 1e-8, 5.0});

  // Fixed validation triplets.
  std::vector<std::size_t> val_neg;
  if (!validation.labels.empty()) {
    const auto val_classes = group(validation.labels);
    nn::Rng vrng(config.seed ^ 0xFA11ULL);
    for (std::size_t i = 0; i < validation.labels.size(); ++i) {
      val_neg.push_back(pick_negative(i, validation.labels, val_classes, 0.0, vrng));
    }
  }

  std::vector<std::size_t> order(train.labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<JointEpoch> curve;
  nn::Checkpoint last_good = nn::Checkpoint::from(model.store());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      std::vector<std::size_t> idx(order.begin() + long(start), order.begin() + long(start + n)), neg;
      for (std::size_t i : idx) neg.push_back(pick_negative(i, train.labels, classes, config.same_class_negative_rate, rng));
      nn::Tape tape;
      nn::Binder b(tape);
      const Var a = model.forward_v(b, tape.constant(gather(train.v, idx)));
      const Var p = model.forward_r(b, tape.constant(gather(train.r, idx)));
      const Var ng = model.forward_r(b, tape.constant(gather(train.r, neg)));
      const Var loss = triplet_hinge(a, p, ng, config.margin);
      if (!std::isfinite(loss.item())) {
        last_good.apply(model.store());
        throw DivergenceError("joint loss became non-finite; restored the last good weights");
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      loss_sum += loss.item() * double(n);
    }
    JointEpoch e{epoch + 1, loss_sum / double(order.size()), 0.0};
    if (!val_neg.empty()) {
      const Tensor a = model.f_v(validation.v), r = model.f_r(validation.r);
      std::size_t ok = 0;
      for (std::size_t i = 0; i < val_neg.size(); ++i) {
        double dp = 0.0, dn = 0.0;
        for (std::size_t k = 0; k < a.cols(); ++k) {
          dp += std::pow(a.at(i, k) - r.at(i, k), 2);
          dn += std::pow(a.at(i, k) - r.at(val_neg[i], k), 2);
        }
        ok += dp < dn;
      }
      e.validation_accuracy = double(ok) / double(val_neg.size());
    }
    curve.push_back(e);
    last_good = nn::Checkpoint::from(model.store());
    if (log.checkpoint) last_good.save(*log.checkpoint);
    if (log.log) *log.log << "joint epoch " << e.epoch << " loss " << e.loss << " val_acc " << e.validation_accuracy << '\n';
  }
  return curve;
}

}  // namespace livesketch
