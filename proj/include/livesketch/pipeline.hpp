#pragma once

#include <iosfwd>

#include "livesketch/config.hpp"

namespace livesketch {

/// Synthesized parametric sketches ingested into the configured splits.
/// Throws ContractError for fewer than two classes.
Dataset build_toy_corpus(const PipelineConfig& config);

// Training stages. Class counts come from the dataset, not the config.

Vae train_vae_stage(const Dataset& dataset, const PipelineConfig& config, std::ostream* log = nullptr);
/// Same architecture and data, trained as a plain sequence VAE: no
/// classification loss, no variance clamp. Interpolation benchmark only.
Vae train_baseline_vae_stage(const Dataset& dataset, const PipelineConfig& config, std::ostream* log = nullptr);
/// Mean L2 distance between the sketch and image branch outputs on the same
/// rasters. Logged after structure training; nothing gates on it.
double branch_gap(const StructureEncoder& structure, const std::vector<Sketch>& sketches);

StructureEncoder train_structure_stage(const Dataset& dataset, const PipelineConfig& config,
                                       std::ostream* log = nullptr);
SemanticEncoder train_semantic_stage(const Dataset& dataset, const PipelineConfig& config,
                                     std::ostream* log = nullptr);
/// Trains F_V / F_R on frozen features; validation triplets come from the
/// test split and are only reported.
JointEmbedding train_joint_stage(const Dataset& dataset, const Vae& vae, const StructureEncoder& structure,
                                 const PipelineConfig& config, std::ostream* log = nullptr);

SearchModels train_all(const Dataset& dataset, const PipelineConfig& config, std::ostream* log = nullptr);

}  // namespace livesketch
