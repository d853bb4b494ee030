#include "livesketch/sketch/sketch.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <random>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

std::size_t Sketch::stroke_count() const {
  return std::size_t(std::count_if(points.begin(), points.end(), [](const StrokePoint& p) { return p.lift == 1; }));
}

void validate(const Sketch& sketch) {
  if (sketch.points.empty()) throw ContractError("sketch is empty");
  for (const auto& p : sketch.points) {
    if (p.lift > 1) throw ContractError("pen-lift flag must be 0 or 1");
    if (!std::isfinite(p.dx) || !std::isfinite(p.dy)) throw ContractError("sketch offsets must be finite");
  }
  if (sketch.points.back().lift != 1) throw ContractError("final sketch point must lift the pen");
}

bool is_valid(const Sketch& sketch) {
  try {
    validate(sketch);
    return true;
  } catch (const ContractError&) {
    return false;
  }
}

std::vector<Polyline> to_strokes(const Sketch& sketch) {
  std::vector<Polyline> strokes;
  Polyline current;
  double x = 0.0, y = 0.0;
  for (const auto& p : sketch.points) {
    x += p.dx;
    y += p.dy;
    current.push_back({x, y});
    if (p.lift == 1) {
      strokes.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) strokes.push_back(std::move(current));
  return strokes;
}

Sketch from_strokes(const std::vector<Polyline>& strokes, std::optional<std::string> label,
                    std::optional<Point2> origin) {
  Sketch s;
  s.label = std::move(label);
  Point2 prev{};
  bool first = true;
  for (const auto& stroke : strokes) {
    for (std::size_t i = 0; i < stroke.size(); ++i) {
      if (first) {
        prev = origin.value_or(stroke[i]);
        first = false;
      }
      s.points.push_back({stroke[i].x - prev.x, stroke[i].y - prev.y, std::uint8_t(i + 1 == stroke.size())});
      prev = stroke[i];
    }
  }
  return s;
}

// Parsing ---------------------------------------------------------------------

std::vector<StrokePoint> points_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("points must be an array");
  std::vector<StrokePoint> points;
  points.reserve(j.size());
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 3) throw std::invalid_argument("each point must be [dx, dy, lift]");
    const int lift = p[2].get<int>();
    if (lift != 0 && lift != 1) throw std::invalid_argument("lift must be 0 or 1");
    points.push_back({p[0].get<double>(), p[1].get<double>(), std::uint8_t(lift)});
  }
  return points;
}

nlohmann::json points_to_json(const std::vector<StrokePoint>& points) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : points) arr.push_back({p.dx, p.dy, int(p.lift)});
  return arr;
}

Sketch sketch_from_json(const nlohmann::json& j) {
  Sketch s;
  s.points = points_from_json(j.at("points"));
  if (j.contains("class") && j["class"].is_string()) s.label = j["class"].get<std::string>();
  return s;
}

nlohmann::json to_json(const Sketch& sketch) {
  nlohmann::json j;
  j["class"] = sketch.label ? nlohmann::json(*sketch.label) : nlohmann::json(nullptr);
  j["points"] = points_to_json(sketch.points);
  return j;
}

Sketch parse_record(const nlohmann::json& record) {
  if (!record.is_object()) throw std::invalid_argument("record is not a JSON object");
  if (record.contains("points")) return sketch_from_json(record);
  if (!record.contains("drawing")) throw std::invalid_argument("record has neither 'drawing' nor 'points'");
  const auto& drawing = record["drawing"];
  if (!drawing.is_array()) throw std::invalid_argument("'drawing' must be an array");
  std::vector<Polyline> strokes;
  for (const auto& stroke : drawing) {
    if (!stroke.is_array() || stroke.size() < 2) throw std::invalid_argument("stroke must be [xs, ys, ...]");
    const auto& xs = stroke[0];
    const auto& ys = stroke[1];
    if (!xs.is_array() || !ys.is_array() || xs.size() != ys.size()) {
      throw std::invalid_argument("stroke coordinate arrays must have equal length");
    }
    Polyline line;
    for (std::size_t i = 0; i < xs.size(); ++i) line.push_back({xs[i].get<double>(), ys[i].get<double>()});
    if (!line.empty()) strokes.push_back(std::move(line));
  }
  std::optional<std::string> label;
  if (record.contains("word") && record["word"].is_string()) label = record["word"].get<std::string>();
  return from_strokes(strokes, std::move(label));
}

ParseResult parse_ndjson(std::istream& in) {
  ParseResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      Sketch s = parse_record(nlohmann::json::parse(line));
      if (s.points.empty()) {
        result.warnings.push_back({line_no, "empty drawing skipped"});
        continue;
      }
      validate(s);
      result.sketches.push_back(std::move(s));
    } catch (const std::exception& e) {
      result.errors.push_back({line_no, e.what()});
    }
  }
  return result;
}

nlohmann::json to_quickdraw_json(const Sketch& sketch) {
  nlohmann::json drawing = nlohmann::json::array();
  for (const auto& stroke : to_strokes(sketch)) {
    nlohmann::json xs = nlohmann::json::array(), ys = nlohmann::json::array();
    for (const auto& p : stroke) {
      xs.push_back(p.x);
      ys.push_back(p.y);
    }
    drawing.push_back({xs, ys});
  }
  nlohmann::json j;
  if (sketch.label) j["word"] = *sketch.label;
  j["drawing"] = std::move(drawing);
  return j;
}

// Geometry --------------------------------------------------------------------

double point_segment_distance(Point2 p, Point2 a, Point2 b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = p.x - a.x, wy = p.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

namespace {

void rdp_recurse(const Polyline& line, std::size_t first, std::size_t last, double epsilon, std::vector<bool>& keep) {
  if (last <= first + 1) return;
  double worst = -1.0;
  std::size_t index = first;
  for (std::size_t i = first + 1; i < last; ++i) {
    const double d = point_segment_distance(line[i], line[first], line[last]);
    if (d > worst) {
      worst = d;
      index = i;
    }
  }
  if (worst > epsilon) {
    keep[index] = true;
    rdp_recurse(line, first, index, epsilon, keep);
    rdp_recurse(line, index, last, epsilon, keep);
  }
}

}  // namespace

Polyline rdp_simplify(const Polyline& line, double epsilon) {
  if (epsilon <= 0 || line.size() < 3) return line;
  std::vector<bool> keep(line.size(), false);
  keep.front() = keep.back() = true;
  rdp_recurse(line, 0, line.size() - 1, epsilon, keep);
  Polyline out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (keep[i]) out.push_back(line[i]);
  }
  return out;
}

Sketch rdp_simplify(const Sketch& sketch, double epsilon) {
  if (epsilon < 0) throw ContractError("rdp epsilon must be non-negative");
  if (epsilon == 0) return sketch;
  std::vector<Polyline> strokes = to_strokes(sketch);
  for (auto& s : strokes) s = rdp_simplify(s, epsilon);
  return from_strokes(strokes, sketch.label, Point2{0.0, 0.0});
}

Sketch simplify_to_length(const Sketch& sketch, double epsilon, std::size_t max_points) {
  Sketch out = rdp_simplify(sketch, epsilon);
  double eps = std::max(epsilon, 0.5);
  for (int round = 0; out.size() > max_points && round < 40; ++round) {
    eps *= 1.5;
    out = rdp_simplify(sketch, eps);
  }
  if (out.size() > max_points) {
    std::vector<Polyline> strokes = to_strokes(out);
    std::size_t total = 0, keep = 0;
    while (keep < strokes.size() && total + strokes[keep].size() <= max_points) total += strokes[keep++].size();
    strokes.resize(std::max<std::size_t>(keep, 1));
    if (strokes.front().size() > max_points) strokes.front().resize(max_points);
    out = from_strokes(strokes, sketch.label, Point2{0.0, 0.0});
  }
  return out;
}

NormalizedCorpus normalize_offsets(const std::vector<Sketch>& corpus) {
  if (corpus.empty()) throw ContractError("normalize_offsets: empty corpus");
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (const auto& s : corpus) {
    for (const auto& p : s.points) {
      sum += p.dx + p.dy;
      sum_sq += p.dx * p.dx + p.dy * p.dy;
      n += 2;
    }
  }
  if (n == 0) throw ContractError("normalize_offsets: corpus has no points");
  const double m = sum / double(n);
  const double var = sum_sq / double(n) - m * m;
  if (!(var > 1e-24)) throw ContractError("normalize_offsets: zero-variance corpus");
  NormalizedCorpus out;
  out.scale = std::sqrt(var);
  out.sketches.reserve(corpus.size());
  for (const auto& s : corpus) out.sketches.push_back(scale_offsets(s, 1.0 / out.scale));
  return out;
}

Sketch scale_offsets(const Sketch& sketch, double factor) {
  Sketch out = sketch;
  for (auto& p : out.points) {
    p.dx *= factor;
    p.dy *= factor;
  }
  return out;
}

Sketch shuffle_strokes(const Sketch& sketch, std::uint64_t seed) {
  // Each stroke is its absolute start plus its original internal offsets.
  struct Piece {
    Point2 start;
    std::vector<StrokePoint> points;
  };
  std::vector<Piece> pieces;
  double x = 0.0, y = 0.0;
  bool new_stroke = true;
  for (const auto& p : sketch.points) {
    x += p.dx;
    y += p.dy;
    if (new_stroke) pieces.push_back({{x, y}, {}});
    pieces.back().points.push_back(p);
    new_stroke = p.lift == 1;
  }
  if (pieces.size() < 2) return sketch;

  std::mt19937_64 rng(seed);
  std::shuffle(pieces.begin(), pieces.end(), rng);

  Sketch out;
  out.label = sketch.label;
  Point2 pen{0.0, 0.0};
  for (auto& piece : pieces) {
    piece.points.front().dx = piece.start.x - pen.x;
    piece.points.front().dy = piece.start.y - pen.y;
    double px = piece.start.x, py = piece.start.y;
    for (std::size_t i = 1; i < piece.points.size(); ++i) {
      px += piece.points[i].dx;
      py += piece.points[i].dy;
    }
    pen = {px, py};
    out.points.insert(out.points.end(), piece.points.begin(), piece.points.end());
  }
  out.points.back().lift = 1;
  return out;
}

}  // namespace livesketch
