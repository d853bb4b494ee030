#include "livesketch/pipeline.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

Dataset build_toy_corpus(const PipelineConfig& config) {
  if (config.synth.classes < 2) throw ContractError("toy corpus needs at least two classes");
  std::stringstream buf;
  write_quickdraw_ndjson(buf, synthesize_sketches(config.synth));
  return ingest(parse_ndjson(buf), config.ingest);
}

Vae train_vae_stage(const Dataset& dataset, const PipelineConfig& config, std::ostream* log) {
  VaeConfig vc = config.vae;
  vc.classes = dataset.classes.size();
  nn::Rng rng(vc.seed);
  Vae vae(vc, rng);
  train_vae(vae, dataset.sketches(Split::Train), dataset.labels(Split::Train), {std::nullopt, log});
  return vae;
}

Vae train_baseline_vae_stage(const Dataset& dataset, const PipelineConfig& config, std::ostream* log) {
  PipelineConfig plain = config;
  plain.vae.clamp_variance = false;
  plain.vae.classification_weight = 0.0;
  return train_vae_stage(dataset, plain, log);
}

double branch_gap(const StructureEncoder& structure, const std::vector<Sketch>& sketches) {
  if (sketches.empty()) throw ContractError("branch_gap: no sketches");
  std::vector<RasterCanvas> canvases;
  canvases.reserve(sketches.size());
  for (const auto& s : sketches) canvases.push_back(rasterize(s, structure.config().input_size));
  const nn::Tensor rasters = stack_rows(canvases);
  const nn::Tensor a = structure.embed(rasters, Branch::Sketch), b = structure.embed(rasters, Branch::Image);
  double total = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double d = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) d += (a.at(r, c) - b.at(r, c)) * (a.at(r, c) - b.at(r, c));
    total += std::sqrt(d);
  }
  return total / double(a.rows());
}

StructureEncoder train_structure_stage(const Dataset& dataset, const PipelineConfig& config, std::ostream* log) {
  nn::Rng rng(config.raster.train.seed);
  StructureEncoder structure(config.raster.net, rng);
  train_structure(structure, dataset.sketches(Split::Train), dataset.labels(Split::Train), config.raster.train,
                  {std::nullopt, log});
  if (log) {
    const auto held_out = dataset.sketches(Split::Test);
    if (!held_out.empty()) *log << "structure branch gap (test rasters) " << branch_gap(structure, held_out) << "\n";
  }
  return structure;
}

SemanticEncoder train_semantic_stage(const Dataset& dataset, const PipelineConfig& config, std::ostream* log) {
  nn::Rng rng(config.raster.semantic.seed);
  SemanticEncoder semantic(config.raster.net, dataset.classes.size(), rng);
  train_semantic(semantic, dataset.sketches(Split::Train), dataset.labels(Split::Train), config.raster.semantic,
                 {std::nullopt, log});
  return semantic;
}

JointEmbedding train_joint_stage(const Dataset& dataset, const Vae& vae, const StructureEncoder& structure,
                                 const PipelineConfig& config, std::ostream* log) {
  const auto train = joint_features(vae, structure, dataset.sketches(Split::Train), dataset.labels(Split::Train));
  const auto validation = joint_features(vae, structure, dataset.sketches(Split::Test), dataset.labels(Split::Test));
  nn::Rng rng(config.joint.seed);
  JointEmbedding joint(vae.latent_dim(), structure.out_dim(), config.joint, rng);
  train_joint(joint, train, validation, config.joint, {std::nullopt, log});
  return joint;
}

SearchModels train_all(const Dataset& dataset, const PipelineConfig& config, std::ostream* log) {
  Vae vae = train_vae_stage(dataset, config, log);
  StructureEncoder structure = train_structure_stage(dataset, config, log);
  SemanticEncoder semantic = train_semantic_stage(dataset, config, log);
  JointEmbedding joint = train_joint_stage(dataset, vae, structure, config, log);
  return {std::move(vae), std::move(structure), std::move(semantic), std::move(joint)};
}

}  // namespace livesketch
