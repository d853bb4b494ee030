#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "livesketch/numerics/params.hpp"
#include "livesketch/sketch/raster.hpp"
#include "livesketch/sketch/sketch.hpp"

namespace livesketch {

enum class Split { Train, Test, Gallery };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct DatasetItem {
  std::size_t id = 0;
  Split split = Split::Train;
  int label = 0;
  Sketch sketch;
};

/// Ingested, simplified and offset-normalized sketches with split tags.
///
/// File format (JSON): {"format": "livesketch-dataset", "version": 1,
/// "classes": [...], "scale": s, "epsilon": e, "max_points": n,
/// "items": [{"id", "split", "label", "points"}]}.
struct Dataset {
  std::vector<std::string> classes;
  double scale = 1.0;
  double epsilon = 2.0;
  std::size_t max_points = 96;
  std::vector<DatasetItem> items;

  std::vector<const DatasetItem*> split(Split s) const;
  std::vector<Sketch> sketches(Split s) const;
  std::vector<int> labels(Split s) const;
  const DatasetItem& item(std::size_t id) const;

  void save(const std::filesystem::path& path) const;
  static Dataset load(const std::filesystem::path& path);
};

struct SplitCounts {
  std::size_t train = 500;
  std::size_t test = 100;
  std::size_t gallery = 200;
  std::size_t total() const { return train + test + gallery; }
};

struct IngestOptions {
  /// Classes to keep, in output label order; empty keeps every class seen.
  std::vector<std::string> classes;
  SplitCounts split;
  /// RDP tolerance in source (absolute) coordinates.
  double epsilon = 2.0;
  std::size_t max_points = 96;
};

struct IngestReport {
  std::size_t records = 0;
  std::size_t errors = 0;
  std::size_t warnings = 0;
  std::size_t kept = 0;
};

/// Builds a dataset from parsed records: per class the first `train`
/// records go to train, the next `test` to test and the next `gallery` to
/// the image-gallery sources. Throws when a class has too few records or
/// fewer than two classes remain.
Dataset ingest(const ParseResult& parsed, const IngestOptions& options, IngestReport* report = nullptr);

/// Parametric shape classes used for the desk-scale corpus.
const std::vector<std::string>& synthetic_class_names();

struct SynthOptions {
  std::size_t classes = 10;
  std::size_t per_class = 800;
  std::uint64_t seed = 1;
};

/// Jittered parametric drawings in QuickDraw coordinates (integers in
/// [0, 255]), interleaved by class.
std::vector<Sketch> synthesize_sketches(const SynthOptions& options);
void write_quickdraw_ndjson(std::ostream& out, const std::vector<Sketch>& sketches);

struct ImageAugment {
  double max_rotation_deg = 10.0;
  double min_scale = 0.8;
  double max_scale = 1.2;
  double min_width = 1.0;
  double max_width = 2.0;
};

/// Stand-in "photo": a randomly rotated, scaled and thickened rendering.
RasterCanvas augmented_image(const Sketch& sketch, std::size_t size, nn::Rng& rng, const ImageAugment& aug = {});

struct ImageItem {
  std::size_t id = 0;
  int label = 0;
  std::size_t source_sketch = 0;
  RasterCanvas canvas;
};

/// One augmented image per gallery-split sketch; image id = source sketch id.
std::vector<ImageItem> build_image_gallery(const Dataset& dataset, std::size_t size, std::uint64_t seed);

}  // namespace livesketch
