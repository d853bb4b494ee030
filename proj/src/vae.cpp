#include "livesketch/models/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

using nn::Tensor;
using nn::Var;
using nn::concat_cols;
using nn::concat_rows;

SequenceBatch SequenceBatch::from(const std::vector<const Sketch*>& sketches) {
  if (sketches.empty()) throw ContractError("empty sequence batch");
  SequenceBatch b;
  b.batch = sketches.size();
  for (const auto* s : sketches) {
    if (s->points.empty()) throw ContractError("cannot encode an empty sketch");
    b.lengths.push_back(s->size());
    b.steps = std::max(b.steps, s->size());
  }
  for (std::size_t t = 0; t < b.steps; ++t) {
    Tensor pts({b.batch, 3}, 0.0), mask({b.batch, 1}, 0.0);
    for (std::size_t i = 0; i < b.batch; ++i) {
      if (t >= b.lengths[i]) continue;
      const StrokePoint& p = sketches[i]->points[t];
      pts.at(i, 0) = p.dx;
      pts.at(i, 1) = p.dy;
      pts.at(i, 2) = p.lift;
      mask.at(i, 0) = 1.0;
    }
    b.points.push_back(std::move(pts));
    b.masks.push_back(std::move(mask));
  }
  return b;
}

Vae::Vae(const VaeConfig& config, nn::Rng& rng) : config_(config) {
  if (config.classes < 2) throw ContractError("VAE needs at least two classes");
  const std::size_t h = config.hidden, d = config.latent;
  nn::LstmCell::create(store_, "vae.enc_fwd", 3, h, rng);
  nn::LstmCell::create(store_, "vae.enc_bwd", 3, h, rng);
  nn::Linear::create(store_, "vae.mu", 2 * h, d, rng);
  nn::Linear::create(store_, "vae.log_var", 2 * h, d, rng, 0.1);
  nn::Linear::create(store_, "vae.classifier", d, config.classes, rng);
  nn::Linear::create(store_, "vae.dec_init", d, 2 * h, rng);
  nn::LstmCell::create(store_, "vae.dec", 3 + d, h, rng);
  nn::Linear::create(store_, "vae.dec_out", h, 4, rng);
  bind_layers();
}

void Vae::bind_layers() {
  enc_fwd_ = nn::LstmCell::bind(store_, "vae.enc_fwd");
  enc_bwd_ = nn::LstmCell::bind(store_, "vae.enc_bwd");
  mu_head_ = nn::Linear::bind(store_, "vae.mu");
  log_var_head_ = nn::Linear::bind(store_, "vae.log_var");
  classifier_ = nn::Linear::bind(store_, "vae.classifier");
  init_head_ = nn::Linear::bind(store_, "vae.dec_init");
  dec_ = nn::LstmCell::bind(store_, "vae.dec");
  out_head_ = nn::Linear::bind(store_, "vae.dec_out");
}

Vae Vae::from_checkpoint(const nn::Checkpoint& ckpt, std::size_t max_steps) {
  auto shape_of = [&](const std::string& name) -> const nn::Shape& {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ContractError("checkpoint is missing " + name);
    return it->second.shape();
  };
  Vae v;
  v.config_.hidden = shape_of("vae.enc_fwd.bias")[1] / 4;
  v.config_.latent = shape_of("vae.mu.bias")[1];
  v.config_.classes = shape_of("vae.classifier.bias")[1];
  v.config_.max_steps = max_steps;
  nn::Rng rng(0);
  Vae shaped(v.config_, rng);
  ckpt.apply(shaped.store_);
  shaped.config_.max_steps = max_steps;
  return shaped;
}

std::pair<Var, Var> Vae::encode_graph(nn::Binder& b, const SequenceBatch& batch) const {
  nn::Tape& tape = b.tape();
  const std::size_t h = config_.hidden;
  const Var zeros = tape.constant(Tensor({batch.batch, h}, 0.0));

  // Padding sits at the end, so the masked update leaves short sequences'
  // state untouched past their end (forward) or before their start (backward).
  auto run = [&](const nn::LstmCell& cell, bool reverse) {
    Var hs = zeros, cs = zeros;
    for (std::size_t k = 0; k < batch.steps; ++k) {
      const std::size_t t = reverse ? batch.steps - 1 - k : k;
      const Var x = tape.constant(batch.points[t]);
      auto [hn, cn] = cell.step(b, x, hs, cs);
      const Var m = tape.constant(batch.masks[t]);
      hs = add(hs, mul(sub(hn, hs), m));
      cs = add(cs, mul(sub(cn, cs), m));
    }
    return hs;
  };
  const Var feat = concat_cols({run(enc_fwd_, false), run(enc_bwd_, true)});
  const Var mu = mu_head_(b, feat);
  Var log_var = log_var_head_(b, feat);
  if (config_.clamp_variance) log_var = clamp_max(log_var, kLogVarCeiling);
  return {mu, log_var};
}

LatentCode Vae::encode(const Sketch& sketch, bool sample, nn::Rng* rng) const {
  validate(sketch);
  nn::Tape tape(nn::Tape::Mode::Inference);
  nn::Binder b(tape);
  auto [mu, log_var] = encode_graph(b, SequenceBatch::from({&sketch}));
  LatentCode code{mu.value(), mu.value(), log_var.value(), mu.value()};
  if (sample) {
    if (!rng) throw ContractError("sampling requires an rng");
    for (std::size_t j = 0; j < code.mu.size(); ++j) {
      code.batch_z[j] = code.mu[j] + std::exp(code.log_var[j] / 2.0) * rng->normal();
    }
  }
  return code;
}

Tensor Vae::encode_mu(const std::vector<Sketch>& sketches, std::size_t chunk) const {
  if (sketches.empty()) throw ContractError("encode_mu: no sketches");
  std::vector<double> values;
  values.reserve(sketches.size() * config_.latent);
  for (std::size_t start = 0; start < sketches.size(); start += chunk) {
    const std::size_t end = std::min(sketches.size(), start + chunk);
    std::vector<const Sketch*> part;
    for (std::size_t i = start; i < end; ++i) {
      validate(sketches[i]);
      part.push_back(&sketches[i]);
    }
    nn::Tape tape(nn::Tape::Mode::Inference);
    nn::Binder b(tape);
    const Var mu = encode_graph(b, SequenceBatch::from(part)).first;
    values.insert(values.end(), mu.value().values().begin(), mu.value().values().end());
  }
  return Tensor({sketches.size(), config_.latent}, std::move(values));
}

Tensor Vae::class_logits(const Tensor& mu) const {
  nn::Tape tape(nn::Tape::Mode::Inference);
  nn::Binder b(tape);
  return classifier_(b, tape.constant(mu)).value();
}

DecodeResult Vae::decode(const Tensor& z, std::optional<std::size_t> max_steps) const {
  if (z.size() != config_.latent) {
    throw DimensionError("decode: latent has " + std::to_string(z.size()) + " values, expected " +
                         std::to_string(config_.latent));
  }
  const std::size_t limit = std::max<std::size_t>(1, max_steps.value_or(config_.max_steps));
  const std::size_t h = config_.hidden;
  nn::Tape tape(nn::Tape::Mode::Inference);
  nn::Binder b(tape);
  const Var zv = tape.constant(z.reshaped({1, config_.latent}));
  const Var init = tanh(init_head_(b, zv));
  Var hs = slice_cols(init, 0, h), cs = slice_cols(init, h, h);

  DecodeResult out;
  Tensor prev({1, 3}, 0.0);
  for (std::size_t t = 0; t < limit; ++t) {
    auto [hn, cn] = dec_.step(b, concat_cols({tape.constant(prev), zv}), hs, cs);
    hs = hn;
    cs = cn;
    const Tensor& o = out_head_(b, hs).value();
    StrokePoint p{o[0], o[1], std::uint8_t(o[2] > 0.0 ? 1 : 0)};
    const bool end = o[3] > 0.0;
    if (end) p.lift = 1;
    out.sketch.points.push_back(p);
    if (end) return out;
    prev = Tensor({1, 3}, {p.dx, p.dy, double(p.lift)});
  }
  out.sketch.points.back().lift = 1;
  out.hit_max_steps = true;
  return out;
}

VaeGraph Vae::loss_graph(nn::Binder& b, const SequenceBatch& batch, std::span<const int> labels, const Tensor& noise,
                         double kl_weight) const {
  if (labels.size() != batch.batch) throw DimensionError("loss_graph: label count differs from batch size");
  nn::Tape& tape = b.tape();
  const std::size_t h = config_.hidden, n = batch.batch, T = batch.steps;
  VaeGraph g;
  std::tie(g.mu, g.log_var) = encode_graph(b, batch);

  const Var z = add(g.mu, mul(exp(scale(g.log_var, 0.5)), tape.constant(noise)));
  const Var init = tanh(init_head_(b, z));
  Var hs = slice_cols(init, 0, h), cs = slice_cols(init, h, h);

  // Teacher forcing: step t sees the true point t-1 (zeros at t = 0).
  std::vector<Var> outs;
  Tensor targets({T * n, 4}, 0.0), offset_mask({T * n, 1}, 0.0), flag_mask({T * n, 2}, 0.0);
  Var prev = tape.constant(Tensor({n, 3}, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    auto [hn, cn] = dec_.step(b, concat_cols({prev, z}), hs, cs);
    hs = hn;
    cs = cn;
    outs.push_back(out_head_(b, hs));
    prev = tape.constant(batch.points[t]);
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.masks[t][i] == 0.0) continue;
      const std::size_t r = t * n + i;
      targets.at(r, 0) = batch.points[t].at(i, 0);
      targets.at(r, 1) = batch.points[t].at(i, 1);
      targets.at(r, 2) = batch.points[t].at(i, 2);
      targets.at(r, 3) = t + 1 == batch.lengths[i] ? 1.0 : 0.0;
      offset_mask[r] = 1.0;
      flag_mask.at(r, 0) = flag_mask.at(r, 1) = 1.0;
    }
  }
  const Var all = concat_rows(outs);
  const Var target_offsets = tape.constant(Tensor({T * n, 2}, [&] {
    std::vector<double> v;
    for (std::size_t r = 0; r < T * n; ++r) {
      v.push_back(targets.at(r, 0));
      v.push_back(targets.at(r, 1));
    }
    return v;
  }()));
  Tensor flag_targets({T * n, 2}, 0.0);
  for (std::size_t r = 0; r < T * n; ++r) {
    flag_targets.at(r, 0) = targets.at(r, 2);
    flag_targets.at(r, 1) = targets.at(r, 3);
  }
  const double inv_two_var = 1.0 / (2.0 * config_.offset_sigma * config_.offset_sigma);
  const Var offset_err =
      scale(sum(mul(square(sub(slice_cols(all, 0, 2), target_offsets)), tape.constant(offset_mask))), inv_two_var);
  const Var flag_err = bce_with_logits(slice_cols(all, 2, 2), flag_targets, flag_mask);
  const double inv_n = 1.0 / double(n);
  g.reconstruction = scale(add(offset_err, flag_err), inv_n);
  g.kl = kl_loss(g.mu, g.log_var);
  g.logits = classifier_(b, g.mu);
  g.classification = scale(softmax_cross_entropy(g.logits, labels), inv_n);
  g.total = add(add(g.reconstruction, scale(g.kl, kl_weight)), scale(g.classification, config_.classification_weight));
  return g;
}

Var kl_loss(Var mu, Var log_var) {
  if (mu.shape() != log_var.shape()) throw DimensionError("kl_loss: mu " + nn::shape_string(mu.shape()) +
                                                          " vs log_var " + nn::shape_string(log_var.shape()));
  const Var inner = sub(sub(add_scalar(log_var, 1.0), square(mu)), exp(log_var));
  return scale(sum(inner), -0.5 / double(mu.rows()));
}

double kl_loss(const Tensor& mu, const Tensor& log_var) {
  nn::Tape tape(nn::Tape::Mode::Inference);
  return kl_loss(tape.constant(mu), tape.constant(log_var)).item();
}

Tensor covariance_clamp(const Tensor& log_var) {
  Tensor out = log_var;
  for (auto& v : out.values()) v = std::min(v, kLogVarCeiling);
  return out;
}

double classification_accuracy(const Vae& model, const std::vector<Sketch>& sketches, const std::vector<int>& labels) {
  if (sketches.empty()) return 0.0;
  const Tensor logits = model.class_logits(model.encode_mu(sketches));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < sketches.size(); ++i) {
    const auto row = logits.row_span(i);
    const auto best = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
    correct += int(best) == labels[i];
  }
  return double(correct) / double(sketches.size());
}

std::vector<VaeEpoch> train_vae(Vae& model, const std::vector<Sketch>& sketches, const std::vector<int>& labels,
                                const VaeTrainOptions& options) {
  if (sketches.size() != labels.size()) throw DimensionError("train_vae: sketch and label counts differ");
  if (sketches.empty()) throw ContractError("train_vae: empty corpus");
  const VaeConfig& cfg = model.config();
  for (int l : labels) {
    if (l < 0 || std::size_t(l) >= cfg.classes) throw ContractError("train_vae: label out of range");
  }
  nn::Rng rng(cfg.seed ^ 0x5eedULL);
  nn::Adam adam(model.store().all(), {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
  std::vector<std::size_t> order(sketches.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<VaeEpoch> curve;
  nn::Checkpoint last_good = nn::Checkpoint::from(model.store());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    const double kl_weight =
        cfg.kl_weight * (cfg.kl_anneal_epochs == 0 ? 1.0 : std::min(1.0, double(epoch + 1) / double(cfg.kl_anneal_epochs)));
    VaeLosses sums;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Sketch*> part;
      std::vector<int> part_labels;
      for (std::size_t i = start; i < end; ++i) {
        part.push_back(&sketches[order[i]]);
        part_labels.push_back(labels[order[i]]);
      }
      const SequenceBatch batch = SequenceBatch::from(part);
      Tensor noise({batch.batch, cfg.latent});
      for (auto& v : noise.values()) v = rng.normal();

      nn::Tape tape;
      nn::Binder b(tape);
      const VaeGraph g = model.loss_graph(b, batch, part_labels, noise, kl_weight);
      if (!std::isfinite(g.total.item())) {
        last_good.apply(model.store());
        throw DivergenceError("VAE loss became non-finite in epoch " + std::to_string(epoch + 1) +
                              "; restored the last good weights");
      }
      adam.zero_grad();
      tape.backward(g.total);
      adam.step();
      const double w = double(batch.batch);
      sums.reconstruction += g.reconstruction.item() * w;
      sums.kl += g.kl.item() * w;
      sums.classification += g.classification.item() * w;
      seen += batch.batch;
      for (std::size_t i = 0; i < batch.batch; ++i) {
        const auto row = g.logits.value().row_span(i);
        correct += int(std::max_element(row.begin(), row.end()) - row.begin()) == part_labels[i];
      }
    }
    VaeEpoch e;
    e.epoch = epoch + 1;
    e.train.reconstruction = sums.reconstruction / double(seen);
    e.train.kl = sums.kl / double(seen);
    e.train.classification = sums.classification / double(seen);
    e.train.total = e.train.reconstruction + e.train.kl + e.train.classification;
    e.accuracy = double(correct) / double(seen);
    curve.push_back(e);
    last_good = nn::Checkpoint::from(model.store());
    if (options.checkpoint) last_good.save(*options.checkpoint);
    if (options.log) {
      *options.log << "vae epoch " << e.epoch << " total " << e.train.total << " recon " << e.train.reconstruction
                   << " kl " << e.train.kl << " cls " << e.train.classification << " acc " << e.accuracy << '\n';
    }
  }
  return curve;
}

}  // namespace livesketch
