#include "livesketch/models/raster_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

using nn::Tensor;
using nn::Var;

namespace {

nn::ConvGeometry stem_geometry(const ConvNetConfig& c) { return {1, c.input_size, c.input_size, 3, 2, 1}; }

void check_config(const ConvNetConfig& c) {
  if (c.channels.empty()) throw ContractError("conv net needs at least one block");
  if (c.input_size < 8) throw ContractError("conv net input must be at least 8 pixels");
}

const Tensor& tensor_of(const nn::Checkpoint& ckpt, const std::string& name) {
  auto it = ckpt.tensors.find(name);
  if (it == ckpt.tensors.end()) throw ContractError("checkpoint is missing " + name);
  return it->second;
}

// Channel list recovered from conv weight shapes [in*9, out].
std::vector<std::size_t> channels_from(const nn::Checkpoint& ckpt, const std::string& first,
                                       const std::string& prefix) {
  std::vector<std::size_t> out{tensor_of(ckpt, first + ".weight").cols()};
  for (std::size_t k = 1;; ++k) {
    auto it = ckpt.tensors.find(prefix + std::to_string(k) + ".weight");
    if (it == ckpt.tensors.end()) break;
    out.push_back(it->second.cols());
  }
  return out;
}

void check_canvas(const RasterCanvas& c, std::size_t size) {
  if (c.width != size || c.height != size) {
    throw DimensionError("canvas is " + std::to_string(c.width) + "x" + std::to_string(c.height) + ", encoder expects " +
                         std::to_string(size) + "x" + std::to_string(size));
  }
}

void check_rows(const Tensor& rasters, std::size_t size) {
  if (rasters.cols() != size * size) {
    throw DimensionError("raster batch " + nn::shape_string(rasters.shape()) + " does not match input size " +
                         std::to_string(size));
  }
}

template <typename F>
Tensor chunked(const Tensor& rasters, std::size_t chunk, std::size_t out_dim, F f) {
  std::vector<double> values;
  values.reserve(rasters.rows() * out_dim);
  const std::size_t cols = rasters.cols();
  for (std::size_t start = 0; start < rasters.rows(); start += chunk) {
    const std::size_t n = std::min(chunk, rasters.rows() - start);
    Tensor part({n, cols}, std::vector<double>(rasters.values().begin() + long(start * cols),
                                               rasters.values().begin() + long((start + n) * cols)));
    nn::Tape tape(nn::Tape::Mode::Inference);
    nn::Binder b(tape);
    const Tensor& out = f(b, tape.constant(std::move(part))).value();
    values.insert(values.end(), out.values().begin(), out.values().end());
  }
  return Tensor({rasters.rows(), out_dim}, std::move(values));
}

Tensor gather_rows(const Tensor& all, const std::vector<std::size_t>& rows) {
  const std::size_t cols = all.cols();
  std::vector<double> v;
  v.reserve(rows.size() * cols);
  for (std::size_t r : rows) v.insert(v.end(), all.values().begin() + long(r * cols), all.values().begin() + long((r + 1) * cols));
  return Tensor({rows.size(), cols}, std::move(v));
}

std::vector<std::vector<std::size_t>> by_class(const std::vector<int>& labels) {
  int top = 0;
  for (int l : labels) {
    if (l < 0) throw ContractError("negative class label");
    top = std::max(top, l);
  }
  std::vector<std::vector<std::size_t>> out(std::size_t(top) + 1);
  for (std::size_t i = 0; i < labels.size(); ++i) out[std::size_t(labels[i])].push_back(i);
  std::size_t populated = 0;
  for (const auto& c : out) populated += !c.empty();
  if (populated < 2) throw ContractError("training needs at least two classes");
  return out;
}

std::vector<nn::Parameter*> trainable(nn::ParameterStore& store) {
  std::vector<nn::Parameter*> out;
  for (auto* p : store.all()) {
    if (p->name != "semantic.trained") out.push_back(p);
  }
  return out;
}

void finish_epoch(std::vector<EpochStats>& curve, const EpochStats& e, nn::Checkpoint& last_good,
                  const nn::ParameterStore& store, const TrainLog& log, const char* what) {
  curve.push_back(e);
  last_good = nn::Checkpoint::from(store);
  if (log.checkpoint) last_good.save(*log.checkpoint);
  if (log.log) *log.log << what << " epoch " << e.epoch << " loss " << e.loss << " acc " << e.accuracy << '\n';
}

}  // namespace

Tensor rasterize_all(const std::vector<Sketch>& sketches, std::size_t size) {
  std::vector<RasterCanvas> canvases;
  canvases.reserve(sketches.size());
  for (const auto& s : sketches) canvases.push_back(rasterize(s, size));
  return stack_rows(canvases);
}

// Structure encoder -----------------------------------------------------------

StructureEncoder::StructureEncoder(const ConvNetConfig& config, nn::Rng& rng) : config_(config) {
  check_config(config);
  const nn::ConvGeometry g0 = stem_geometry(config);
  nn::ConvLayer::create(store_, "structure.sketch_stem", g0, config.channels[0], rng);
  nn::ConvLayer::create(store_, "structure.image_stem", g0, config.channels[0], rng);
  nn::ConvGeometry g{config.channels[0], g0.out_height(), g0.out_width(), 3, 2, 1};
  for (std::size_t k = 1; k < config.channels.size(); ++k) {
    nn::ConvLayer::create(store_, "structure.trunk" + std::to_string(k), g, config.channels[k], rng);
    g = {config.channels[k], g.out_height(), g.out_width(), 3, 2, 1};
  }
  nn::Linear::create(store_, "structure.head", config.channels.back(), config.out_dim, rng);
  bind_layers();
}

void StructureEncoder::bind_layers() {
  const nn::ConvGeometry g0 = stem_geometry(config_);
  sketch_stem_ = {&store_.at("structure.sketch_stem.weight"), &store_.at("structure.sketch_stem.bias"), g0};
  image_stem_ = {&store_.at("structure.image_stem.weight"), &store_.at("structure.image_stem.bias"), g0};
  trunk_.clear();
  nn::ConvGeometry g{config_.channels[0], g0.out_height(), g0.out_width(), 3, 2, 1};
  for (std::size_t k = 1; k < config_.channels.size(); ++k) {
    const std::string name = "structure.trunk" + std::to_string(k);
    trunk_.push_back({&store_.at(name + ".weight"), &store_.at(name + ".bias"), g});
    g = {config_.channels[k], g.out_height(), g.out_width(), 3, 2, 1};
  }
  head_ = nn::Linear::bind(store_, "structure.head");
}

StructureEncoder StructureEncoder::from_checkpoint(const nn::Checkpoint& ckpt, const ConvNetConfig& config) {
  ConvNetConfig c = config;
  c.channels = channels_from(ckpt, "structure.sketch_stem", "structure.trunk");
  c.out_dim = tensor_of(ckpt, "structure.head.bias").cols();
  nn::Rng rng(0);
  StructureEncoder e(c, rng);
  ckpt.apply(e.store_);
  return e;
}

Var StructureEncoder::forward(nn::Binder& b, Var x, Branch branch) const {
  Var h = (branch == Branch::Sketch ? sketch_stem_ : image_stem_)(b, x);
  for (const auto& layer : trunk_) h = layer(b, h);
  return l2_normalize_rows(head_(b, global_avg_pool(h, config_.channels.back())));
}

Tensor StructureEncoder::embed(const Tensor& rasters, Branch branch, std::size_t chunk) const {
  check_rows(rasters, config_.input_size);
  return chunked(rasters, chunk, config_.out_dim, [&](nn::Binder& b, Var x) { return forward(b, x, branch); });
}

Tensor StructureEncoder::r_s(const RasterCanvas& canvas) const {
  check_canvas(canvas, config_.input_size);
  return embed(canvas.as_row(), Branch::Sketch);
}

Tensor StructureEncoder::r_i(const RasterCanvas& image) const {
  check_canvas(image, config_.input_size);
  return embed(image.as_row(), Branch::Image);
}

// Semantic encoder ------------------------------------------------------------

SemanticEncoder::SemanticEncoder(const ConvNetConfig& config, std::size_t classes, nn::Rng& rng) : config_(config) {
  check_config(config);
  if (classes < 2) throw ContractError("semantic classifier needs at least two classes");
  nn::ConvGeometry g = stem_geometry(config);
  for (std::size_t k = 0; k < config.channels.size(); ++k) {
    nn::ConvLayer::create(store_, "semantic.block" + std::to_string(k), g, config.channels[k], rng);
    g = {config.channels[k], g.out_height(), g.out_width(), 3, 2, 1};
  }
  nn::Linear::create(store_, "semantic.features", config.channels.back(), config.out_dim, rng, std::sqrt(2.0));
  nn::Linear::create(store_, "semantic.classifier", config.out_dim, classes, rng);
  store_.create("semantic.trained", Tensor({1, 1}, 0.0));
  bind_layers();
}

void SemanticEncoder::bind_layers() {
  blocks_.clear();
  nn::ConvGeometry g = stem_geometry(config_);
  for (std::size_t k = 0; k < config_.channels.size(); ++k) {
    const std::string name = "semantic.block" + std::to_string(k);
    blocks_.push_back({&store_.at(name + ".weight"), &store_.at(name + ".bias"), g});
    g = {config_.channels[k], g.out_height(), g.out_width(), 3, 2, 1};
  }
  features_ = nn::Linear::bind(store_, "semantic.features");
  classifier_ = nn::Linear::bind(store_, "semantic.classifier");
}

SemanticEncoder SemanticEncoder::from_checkpoint(const nn::Checkpoint& ckpt, const ConvNetConfig& config) {
  ConvNetConfig c = config;
  c.channels = channels_from(ckpt, "semantic.block0", "semantic.block");
  c.out_dim = tensor_of(ckpt, "semantic.features.bias").cols();
  nn::Rng rng(0);
  SemanticEncoder e(c, tensor_of(ckpt, "semantic.classifier.bias").cols(), rng);
  ckpt.apply(e.store_);
  return e;
}

bool SemanticEncoder::trained() const { return store_.find("semantic.trained")->value[0] != 0.0; }
void SemanticEncoder::mark_trained() { store_.at("semantic.trained").value[0] = 1.0; }

std::pair<Var, Var> SemanticEncoder::forward(nn::Binder& b, Var x) const {
  Var h = x;
  for (const auto& layer : blocks_) h = layer(b, h);
  const Var feat = relu(features_(b, global_avg_pool(h, config_.channels.back())));
  return {feat, classifier_(b, feat)};
}

Tensor SemanticEncoder::embed(const Tensor& rasters, std::size_t chunk) const {
  if (!trained()) throw ContractError("semantic encoder is untrained");
  check_rows(rasters, config_.input_size);
  return chunked(rasters, chunk, config_.out_dim, [&](nn::Binder& b, Var x) { return forward(b, x).first; });
}

Tensor SemanticEncoder::z_embed(const RasterCanvas& image) const {
  check_canvas(image, config_.input_size);
  return embed(image.as_row());
}

Tensor SemanticEncoder::logits(const Tensor& rasters) const {
  check_rows(rasters, config_.input_size);
  return chunked(rasters, 64, classes(), [&](nn::Binder& b, Var x) { return forward(b, x).second; });
}

// Training --------------------------------------------------------------------

Var triplet_hinge(Var anchor, Var positive, Var negative, double margin) {
  const Var dp = squared_distance_rows(anchor, positive);
  const Var dn = squared_distance_rows(anchor, negative);
  return mean(relu(add_scalar(sub(dp, dn), margin)));
}

std::vector<EpochStats> train_structure(StructureEncoder& model, const std::vector<Sketch>& sketches,
                                        const std::vector<int>& labels, const RasterTrainConfig& config,
                                        const TrainLog& log) {
  if (sketches.size() != labels.size()) throw DimensionError("train_structure: sketch and label counts differ");
  const auto classes = by_class(labels);
  const std::size_t size = model.config().input_size;
  const Tensor anchors = rasterize_all(sketches, size);
  nn::Rng rng(config.seed ^ 0x57C7ULL);
  nn::Adam adam(model.store().all(), {config.learning_rate, 0.9, 0.999, 1e-8, 5.0});
  std::vector<std::size_t> order(sketches.size());
  std::iota(order.begin(), order.end(), 0);

  auto other_class = [&](int own) {
    for (;;) {
      const std::size_t c = rng.index(classes.size());
      if (int(c) != own && !classes[c].empty()) return c;
    }
  };

  std::vector<EpochStats> curve;
  nn::Checkpoint last_good = nn::Checkpoint::from(model.store());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      std::vector<std::size_t> idx(order.begin() + long(start), order.begin() + long(start + n));
      std::vector<RasterCanvas> images;
      for (std::size_t i : idx) {
        const auto& own = classes[std::size_t(labels[i])];
        const std::size_t pos = rng.uniform() < config.instance_positive_rate ? i : own[rng.index(own.size())];
        images.push_back(augmented_image(sketches[pos], size, rng));
      }
      for (std::size_t i : idx) {
        const auto& neg = classes[other_class(labels[i])];
        images.push_back(augmented_image(sketches[neg[rng.index(neg.size())]], size, rng));
      }
      nn::Tape tape;
      nn::Binder b(tape);
      const Var a = model.forward(b, tape.constant(gather_rows(anchors, idx)), Branch::Sketch);
      const Var pn = model.forward(b, tape.constant(stack_rows(images)), Branch::Image);
      const Var p = slice_rows(pn, 0, n), ng = slice_rows(pn, n, n);
      const Var loss = triplet_hinge(a, p, ng, config.margin);
      if (!std::isfinite(loss.item())) {
        last_good.apply(model.store());
        throw DivergenceError("structure loss became non-finite; restored the last good weights");
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      loss_sum += loss.item() * double(n);
      const Tensor dp = squared_distance_rows(a, p).value(), dn = squared_distance_rows(a, ng).value();
      for (std::size_t r = 0; r < n; ++r) correct += dp[r] < dn[r];
    }
    finish_epoch(curve, {epoch + 1, loss_sum / double(order.size()), double(correct) / double(order.size())}, last_good,
                 model.store(), log, "structure");
  }
  return curve;
}

std::vector<EpochStats> train_semantic(SemanticEncoder& model, const std::vector<Sketch>& sketches,
                                       const std::vector<int>& labels, const RasterTrainConfig& config,
                                       const TrainLog& log) {
  if (sketches.size() != labels.size()) throw DimensionError("train_semantic: sketch and label counts differ");
  by_class(labels);
  for (int l : labels) {
    if (std::size_t(l) >= model.classes()) throw ContractError("train_semantic: label out of range");
  }
  const std::size_t size = model.config().input_size;
  nn::Rng rng(config.seed ^ 0x5E3AULL);
  nn::Adam adam(trainable(model.store()), {config.learning_rate, 0.9, 0.999, 1e-8, 5.0});
  std::vector<std::size_t> order(sketches.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochStats> curve;
  nn::Checkpoint last_good = nn::Checkpoint::from(model.store());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      std::vector<RasterCanvas> images;
      std::vector<int> batch_labels;
      for (std::size_t k = start; k < start + n; ++k) {
        images.push_back(augmented_image(sketches[order[k]], size, rng));
        batch_labels.push_back(labels[order[k]]);
      }
      nn::Tape tape;
      nn::Binder b(tape);
      const Var logits = model.forward(b, tape.constant(stack_rows(images))).second;
      const Var loss = scale(softmax_cross_entropy(logits, batch_labels), 1.0 / double(n));
      if (!std::isfinite(loss.item())) {
        last_good.apply(model.store());
        throw DivergenceError("semantic loss became non-finite; restored the last good weights");
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      loss_sum += loss.item() * double(n);
      for (std::size_t r = 0; r < n; ++r) {
        const auto row = logits.value().row_span(r);
        correct += int(std::max_element(row.begin(), row.end()) - row.begin()) == batch_labels[r];
      }
    }
    model.mark_trained();
    finish_epoch(curve, {epoch + 1, loss_sum / double(order.size()), double(correct) / double(order.size())}, last_good,
                 model.store(), log, "semantic");
  }
  return curve;
}

}  // namespace livesketch
