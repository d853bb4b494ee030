#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "livesketch/config.hpp"
#include "livesketch/index/pq_index.hpp"
#include "livesketch/models/joint_embedding.hpp"
#include "livesketch/sketch/dataset.hpp"

namespace livesketch {

/// Model directory layout: vae.ckpt, structure.ckpt, semantic.ckpt,
/// joint.ckpt, one checkpoint per trained module.
namespace model_files {
inline constexpr const char* kVae = "vae.ckpt";
inline constexpr const char* kStructure = "structure.ckpt";
inline constexpr const char* kSemantic = "semantic.ckpt";
inline constexpr const char* kJoint = "joint.ckpt";
/// Optional plain sequence VAE, used only by the interpolation benchmark.
inline constexpr const char* kVaeBaseline = "vae_baseline.ckpt";
}  // namespace model_files

/// Writes all four checkpoints into `dir`, creating it.
void save_models(const std::filesystem::path& dir, const SearchModels& models);
/// Throws std::runtime_error naming the first missing file.
SearchModels load_models(const std::filesystem::path& dir, const PipelineConfig& config);
/// The baseline VAE in `dir`, if one was trained.
std::optional<Vae> load_baseline_vae(const std::filesystem::path& dir, const PipelineConfig& config);

/// 8-bit grayscale PNG of a canvas with ink drawn dark on white.
std::string encode_png(const RasterCanvas& canvas);

/// Index directory layout:
///   manifest.json    counts, dimensions, dataset path and scale
///   images.pqidx     S_I of every gallery image (ids = image ids)
///   sketches.pqidx   S_Q of the sketch corpus H (train split)
///   z.ckpt           tensors "z" [N, dz] and "ids" [N, 1], gallery order
///   thumbs/<id>.png  thumbnails of gallery images and H sketches
struct IndexSummary {
  std::size_t images = 0;
  std::size_t sketches = 0;
  std::size_t s_dim = 0;
  std::size_t z_dim = 0;
};

/// Encodes the gallery and H and writes the index directory. The same
/// dataset, models and seed reproduce byte-identical files. Throws
/// ContractError for an empty gallery or sketch split and DimensionError
/// when the models disagree with the configured raster size.
IndexSummary index_corpus(const Dataset& dataset, const std::filesystem::path& dataset_path,
                          const SearchModels& models, const PipelineConfig& config, const std::filesystem::path& out);

struct CorpusIndex {
  nlohmann::json manifest;
  PQIndex images;
  PQIndex sketches;
  nn::Tensor z;
  std::vector<std::uint64_t> z_ids;
  std::filesystem::path thumbs;

  /// Row of an image id in `z`; throws std::out_of_range if unknown.
  std::size_t z_row(std::uint64_t id) const { return z_rows_.at(id); }
  std::size_t image_row(std::uint64_t id) const { return image_rows_.at(id); }
  std::size_t sketch_row(std::uint64_t id) const { return sketch_rows_.at(id); }

  /// Throws std::runtime_error when files are missing or inconsistent.
  static CorpusIndex load(const std::filesystem::path& dir);

 private:
  std::map<std::uint64_t, std::size_t> z_rows_, image_rows_, sketch_rows_;
};

}  // namespace livesketch
