#include "livesketch/sketch/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Gallery: return "gallery";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "gallery") return Split::Gallery;
  throw std::invalid_argument("unknown split: " + std::string(s));
}

std::vector<const DatasetItem*> Dataset::split(Split s) const {
  std::vector<const DatasetItem*> out;
  for (const auto& it : items) {
    if (it.split == s) out.push_back(&it);
  }
  return out;
}

std::vector<Sketch> Dataset::sketches(Split s) const {
  std::vector<Sketch> out;
  for (const auto* it : split(s)) out.push_back(it->sketch);
  return out;
}

std::vector<int> Dataset::labels(Split s) const {
  std::vector<int> out;
  for (const auto* it : split(s)) out.push_back(it->label);
  return out;
}

const DatasetItem& Dataset::item(std::size_t id) const {
  if (id < items.size() && items[id].id == id) return items[id];
  for (const auto& it : items) {
    if (it.id == id) return it;
  }
  throw std::out_of_range("no dataset item with id " + std::to_string(id));
}

void Dataset::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = "livesketch-dataset";
  j["version"] = 1;
  j["classes"] = classes;
  j["scale"] = scale;
  j["epsilon"] = epsilon;
  j["max_points"] = max_points;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& it : items) {
    arr.push_back({{"id", it.id},
                   {"split", std::string(split_name(it.split))},
                   {"label", it.label},
                   {"points", points_to_json(it.sketch.points)}});
  }
  j["items"] = std::move(arr);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  out << j.dump() << '\n';
}

Dataset Dataset::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format", "") != "livesketch-dataset") throw std::runtime_error(path.string() + " is not a dataset file");
  Dataset d;
  d.classes = j.at("classes").get<std::vector<std::string>>();
  d.scale = j.at("scale").get<double>();
  d.epsilon = j.at("epsilon").get<double>();
  d.max_points = j.at("max_points").get<std::size_t>();
  for (const auto& e : j.at("items")) {
    DatasetItem it;
    it.id = e.at("id").get<std::size_t>();
    it.split = parse_split(e.at("split").get<std::string>());
    it.label = e.at("label").get<int>();
    it.sketch.points = points_from_json(e.at("points"));
    it.sketch.label = d.classes.at(std::size_t(it.label));
    d.items.push_back(std::move(it));
  }
  return d;
}

Dataset ingest(const ParseResult& parsed, const IngestOptions& options, IngestReport* report) {
  std::vector<std::string> classes = options.classes;
  if (classes.empty()) {
    for (const auto& s : parsed.sketches) {
      if (s.label && std::find(classes.begin(), classes.end(), *s.label) == classes.end()) classes.push_back(*s.label);
    }
  }
  if (classes.size() < 2) throw ContractError("ingest needs at least two classes");

  const SplitCounts& sc = options.split;
  std::map<std::string, std::vector<const Sketch*>> by_class;
  for (const auto& s : parsed.sketches) {
    if (!s.label) continue;
    auto& bucket = by_class[*s.label];
    if (bucket.size() < sc.total()) bucket.push_back(&s);
  }

  // Simplify in source coordinates, then normalize offsets over the corpus.
  std::vector<Sketch> simplified;
  std::vector<int> labels;
  std::vector<Split> splits;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& bucket = by_class[classes[c]];
    if (bucket.size() < sc.total()) {
      throw std::runtime_error("class '" + classes[c] + "' has " + std::to_string(bucket.size()) + " records, " +
                               std::to_string(sc.total()) + " required");
    }
    for (std::size_t i = 0; i < bucket.size(); ++i) {
      simplified.push_back(simplify_to_length(*bucket[i], options.epsilon, options.max_points));
      labels.push_back(int(c));
      splits.push_back(i < sc.train ? Split::Train : i < sc.train + sc.test ? Split::Test : Split::Gallery);
    }
  }
  NormalizedCorpus norm = normalize_offsets(simplified);

  Dataset d;
  d.classes = classes;
  d.scale = norm.scale;
  d.epsilon = options.epsilon;
  d.max_points = options.max_points;
  for (std::size_t i = 0; i < norm.sketches.size(); ++i) {
    DatasetItem it;
    it.id = i;
    it.split = splits[i];
    it.label = labels[i];
    it.sketch = std::move(norm.sketches[i]);
    it.sketch.label = classes[std::size_t(labels[i])];
    d.items.push_back(std::move(it));
  }
  if (report) {
    report->records = parsed.sketches.size() + parsed.errors.size() + parsed.warnings.size();
    report->errors = parsed.errors.size();
    report->warnings = parsed.warnings.size();
    report->kept = d.items.size();
  }
  return d;
}

// Synthetic shapes -----------------------------------------------------------

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"circle", "box",  "triangle", "star",  "zigzag",
                                              "cross_on_box", "spiral", "wave", "house", "arrow"};
  return names;
}

namespace {

using std::numbers::pi;

Polyline densify(const Polyline& line, double step) {
  Polyline out;
  for (std::size_t i = 0; i + 1 < line.size(); ++i) {
    const double dx = line[i + 1].x - line[i].x, dy = line[i + 1].y - line[i].y;
    const int n = std::max(1, int(std::ceil(std::hypot(dx, dy) / step)));
    for (int k = 0; k < n; ++k) out.push_back({line[i].x + dx * k / n, line[i].y + dy * k / n});
  }
  if (!line.empty()) out.push_back(line.back());
  return out;
}

Polyline closed(Polyline line) {
  if (!line.empty()) line.push_back(line.front());
  return line;
}

Polyline rotate_start(Polyline ring, std::size_t k) {
  std::rotate(ring.begin(), ring.begin() + long(k % ring.size()), ring.end());
  return ring;
}

std::vector<Polyline> shape(std::size_t cls, nn::Rng& rng) {
  switch (cls % 10) {
    case 0: {  // circle
      const double t0 = rng.uniform(0, 2 * pi);
      const double dir = rng.uniform() < 0.8 ? 1.0 : -1.0;
      Polyline p;
      for (int i = 0; i <= 48; ++i) {
        const double t = t0 + dir * 2 * pi * i / 48.0;
        p.push_back({std::cos(t), std::sin(t)});
      }
      return {p};
    }
    case 1: {  // box
      Polyline ring{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
      return {closed(rotate_start(ring, rng.index(4)))};
    }
    case 2: {  // triangle
      const double apex = rng.uniform(-0.4, 0.4);
      Polyline ring{{apex, -1}, {1, 0.8}, {-1, 0.8}};
      return {closed(rotate_start(ring, rng.index(3)))};
    }
    case 3: {  // star
      Polyline ring;
      const double inner = rng.uniform(0.3, 0.5);
      for (int i = 0; i < 10; ++i) {
        const double t = -pi / 2 + pi * i / 5.0;
        const double r = i % 2 == 0 ? 1.0 : inner;
        ring.push_back({r * std::cos(t), r * std::sin(t)});
      }
      return {closed(ring)};
    }
    case 4: {  // zigzag
      const int teeth = 3 + int(rng.index(4));
      const double amp = rng.uniform(0.4, 0.8);
      Polyline p;
      for (int i = 0; i <= 2 * teeth; ++i) p.push_back({-1.0 + double(i) / teeth, i % 2 == 0 ? amp : -amp});
      return {p};
    }
    case 5: {  // cross on a box
      const double w = rng.uniform(0.45, 0.7);
      Polyline box = closed({{-w, 0}, {w, 0}, {w, 1}, {-w, 1}});
      const double bar = rng.uniform(-0.75, -0.45);
      return {box, {{0, 0}, {0, -1}}, {{-0.35, bar}, {0.35, bar}}};
    }
    case 6: {  // spiral
      const double turns = rng.uniform(2.0, 3.0);
      const double t0 = rng.uniform(0, 2 * pi);
      Polyline p;
      for (int i = 0; i <= 90; ++i) {
        const double u = i / 90.0;
        const double r = 0.08 + 0.92 * u;
        const double t = t0 + 2 * pi * turns * u;
        p.push_back({r * std::cos(t), r * std::sin(t)});
      }
      return {p};
    }
    case 7: {  // wave
      const double k = rng.uniform(1.2, 2.4);
      const double phase = rng.uniform(0, 2 * pi);
      const double amp = rng.uniform(0.3, 0.55);
      Polyline p;
      for (int i = 0; i <= 60; ++i) {
        const double x = -1.0 + 2.0 * i / 60.0;
        p.push_back({x, amp * std::sin(pi * k * x + phase)});
      }
      return {p};
    }
    case 8: {  // house
      const double w = rng.uniform(0.55, 0.8);
      Polyline box = closed({{-w, 0}, {-w, 1}, {w, 1}, {w, 0}});
      const double peak = rng.uniform(-1.0, -0.6);
      return {box, {{-w - 0.1, 0}, {0, peak}, {w + 0.1, 0}}};
    }
    default: {  // arrow
      const double head = rng.uniform(0.3, 0.55);
      return {{{-1, 0}, {1, 0}}, {{1 - head, -head}, {1, 0}, {1 - head, head}}};
    }
  }
}

}  // namespace

std::vector<Sketch> synthesize_sketches(const SynthOptions& options) {
  const auto& names = synthetic_class_names();
  if (options.classes < 2 || options.classes > names.size()) {
    throw ContractError("synthetic corpus supports 2.." + std::to_string(names.size()) + " classes");
  }
  nn::Rng rng(options.seed);
  std::vector<Sketch> out;
  out.reserve(options.classes * options.per_class);
  for (std::size_t i = 0; i < options.per_class; ++i) {
    for (std::size_t c = 0; c < options.classes; ++c) {
      std::vector<Polyline> strokes = shape(c, rng);
      const double theta = rng.uniform(-0.2, 0.2);
      const double sx = rng.uniform(0.75, 1.0), sy = rng.uniform(0.75, 1.0);
      const double ox = rng.uniform(-8, 8), oy = rng.uniform(-8, 8);
      const double cs = std::cos(theta), sn = std::sin(theta);
      for (auto& s : strokes) {
        s = densify(s, 0.03);
        for (auto& p : s) {
          const double x = p.x * sx, y = p.y * sy;
          p = {std::round(128 + ox + 110 * (cs * x - sn * y) + rng.uniform(-0.75, 0.75)),
               std::round(128 + oy + 110 * (sn * x + cs * y) + rng.uniform(-0.75, 0.75))};
          p.x = std::clamp(p.x, 0.0, 255.0);
          p.y = std::clamp(p.y, 0.0, 255.0);
        }
      }
      out.push_back(from_strokes(strokes, names[c]));
    }
  }
  return out;
}

void write_quickdraw_ndjson(std::ostream& out, const std::vector<Sketch>& sketches) {
  for (const auto& s : sketches) out << to_quickdraw_json(s).dump() << '\n';
}

RasterCanvas augmented_image(const Sketch& sketch, std::size_t size, nn::Rng& rng, const ImageAugment& aug) {
  RasterOptions opt;
  opt.size = size;
  opt.rotation = rng.uniform(-aug.max_rotation_deg, aug.max_rotation_deg) * pi / 180.0;
  opt.scale = rng.uniform(aug.min_scale, aug.max_scale);
  opt.line_width = rng.uniform(aug.min_width, aug.max_width);
  return rasterize(sketch, opt);
}

std::vector<ImageItem> build_image_gallery(const Dataset& dataset, std::size_t size, std::uint64_t seed) {
  nn::Rng rng(seed);
  std::vector<ImageItem> out;
  for (const auto* it : dataset.split(Split::Gallery)) {
    out.push_back({it->id, it->label, it->id, augmented_image(it->sketch, size, rng)});
  }
  return out;
}

}  // namespace livesketch
