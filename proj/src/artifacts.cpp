#include "livesketch/service/artifacts.hpp"

#include <png.h>

#include <fstream>
#include <stdexcept>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

namespace fs = std::filesystem;
using nn::Tensor;

namespace {

nn::Checkpoint load_required(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("missing model file " + path.string());
  return nn::Checkpoint::load(path);
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

PQIndex build_index(const Tensor& vectors, const std::vector<std::uint64_t>& ids, PQConfig config, bool exact) {
  // Tiny corpora cannot fill K centroids.
  config.centroids = std::min(config.centroids, vectors.rows());
  config.exact = exact;
  return PQIndex::build(vectors, ids, config);
}

}  // namespace

void save_models(const fs::path& dir, const SearchModels& models) {
  fs::create_directories(dir);
  nn::Checkpoint::from(models.vae.store()).save(dir / model_files::kVae);
  nn::Checkpoint::from(models.structure.store()).save(dir / model_files::kStructure);
  nn::Checkpoint::from(models.semantic.store()).save(dir / model_files::kSemantic);
  nn::Checkpoint::from(models.joint.store()).save(dir / model_files::kJoint);
}

SearchModels load_models(const fs::path& dir, const PipelineConfig& config) {
  Vae vae = Vae::from_checkpoint(load_required(dir / model_files::kVae), config.vae.max_steps);
  StructureEncoder structure = StructureEncoder::from_checkpoint(load_required(dir / model_files::kStructure), config.raster.net);
  SemanticEncoder semantic = SemanticEncoder::from_checkpoint(load_required(dir / model_files::kSemantic), config.raster.net);
  JointEmbedding joint = JointEmbedding::from_checkpoint(load_required(dir / model_files::kJoint));
  if (joint.v_dim() != vae.latent_dim()) throw DimensionError("joint V input differs from the VAE latent size");
  if (joint.r_dim() != structure.out_dim()) throw DimensionError("joint R input differs from the structure output");
  return {std::move(vae), std::move(structure), std::move(semantic), std::move(joint)};
}

std::optional<Vae> load_baseline_vae(const fs::path& dir, const PipelineConfig& config) {
  const fs::path path = dir / model_files::kVaeBaseline;
  if (!fs::exists(path)) return std::nullopt;
  return Vae::from_checkpoint(nn::Checkpoint::load(path), config.vae.max_steps);
}

std::string encode_png(const RasterCanvas& canvas) {
  std::vector<png_byte> gray(canvas.pixels.size());
  for (std::size_t i = 0; i < gray.size(); ++i) {
    gray[i] = png_byte(std::lround(255.0 * (1.0 - std::clamp(canvas.pixels[i], 0.0, 1.0))));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = png_uint_32(canvas.width);
  image.height = png_uint_32(canvas.height);
  image.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, gray.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, gray.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png: ") + image.message);
  }
  out.resize(size);
  return out;
}

IndexSummary index_corpus(const Dataset& dataset, const fs::path& dataset_path, const SearchModels& models,
                          const PipelineConfig& config, const fs::path& out) {
  const std::size_t size = config.image_size;
  if (models.raster_size() != size) throw DimensionError("structure encoder expects a different raster size");
  const auto gallery = build_image_gallery(dataset, size, config.seed);
  const auto h_items = dataset.split(Split::Train);
  if (gallery.empty()) throw ContractError("dataset has no gallery images to index");
  if (h_items.empty()) throw ContractError("dataset has no sketch corpus H (train split)");

  std::vector<RasterCanvas> canvases;
  std::vector<std::uint64_t> image_ids;
  for (const auto& g : gallery) {
    canvases.push_back(g.canvas);
    image_ids.push_back(g.id);
  }
  const Tensor images = stack_rows(canvases);
  const Tensor s_images = models.s_i(images);
  const Tensor z = models.z(images);

  std::vector<Sketch> h;
  std::vector<std::uint64_t> h_ids;
  for (const auto* item : h_items) {
    h.push_back(item->sketch);
    h_ids.push_back(item->id);
  }
  const Tensor s_sketches = models.s_q(h);

  fs::create_directories(out / "thumbs");
  build_index(s_images, image_ids, config.pq, false).save(out / "images.pqidx");
  build_index(s_sketches, h_ids, config.pq, true).save(out / "sketches.pqidx");

  nn::Checkpoint zc;
  zc.tensors["z"] = z;
  Tensor ids({image_ids.size(), 1});
  for (std::size_t i = 0; i < image_ids.size(); ++i) ids[i] = double(image_ids[i]);
  zc.tensors["ids"] = ids;
  zc.save(out / "z.ckpt");

  for (const auto& g : gallery) write_file(out / "thumbs" / (std::to_string(g.id) + ".png"), encode_png(g.canvas));
  for (std::size_t i = 0; i < h.size(); ++i) {
    write_file(out / "thumbs" / (std::to_string(h_ids[i]) + ".png"), encode_png(rasterize(h[i], size)));
  }

  IndexSummary summary{gallery.size(), h.size(), s_images.cols(), z.cols()};
  nlohmann::json manifest = {{"format", "livesketch-index"},
                             {"version", 1},
                             {"dataset", dataset_path.string()},
                             {"scale", dataset.scale},
                             {"image_size", size},
                             {"images", summary.images},
                             {"sketches", summary.sketches},
                             {"s_dim", summary.s_dim},
                             {"z_dim", summary.z_dim},
                             {"seed", config.seed}};
  write_file(out / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

CorpusIndex CorpusIndex::load(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw std::runtime_error("no index at " + dir.string() + " (manifest.json missing)");
  CorpusIndex c;
  std::ifstream in(manifest_path);
  try {
    in >> c.manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed index manifest: " + std::string(e.what()));
  }
  if (c.manifest.value("format", "") != "livesketch-index") throw std::runtime_error("not a livesketch index manifest");
  c.images = PQIndex::load(dir / "images.pqidx");
  c.sketches = PQIndex::load(dir / "sketches.pqidx");
  const auto zc = nn::Checkpoint::load(dir / "z.ckpt");
  c.z = zc.tensors.at("z");
  const Tensor& ids = zc.tensors.at("ids");
  for (std::size_t i = 0; i < ids.size(); ++i) c.z_ids.push_back(std::uint64_t(ids[i]));
  c.thumbs = dir / "thumbs";
  if (c.images.size() == 0 || c.sketches.size() == 0) throw std::runtime_error("index is empty");
  if (c.z.rows() != c.images.size()) throw std::runtime_error("Z store and image index differ in size");
  if (c.images.dim() != c.sketches.dim()) throw std::runtime_error("image and sketch indices differ in dimension");
  for (std::size_t i = 0; i < c.z_ids.size(); ++i) c.z_rows_[c.z_ids[i]] = i;
  for (std::size_t i = 0; i < c.images.size(); ++i) c.image_rows_[c.images.ids()[i]] = i;
  for (std::size_t i = 0; i < c.sketches.size(); ++i) c.sketch_rows_[c.sketches.ids()[i]] = i;
  for (std::uint64_t id : c.images.ids()) {
    if (!c.z_rows_.count(id)) throw std::runtime_error("image " + std::to_string(id) + " has no Z vector");
  }
  return c;
}

}  // namespace livesketch
