#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace livesketch {

/// One pen movement. `lift` = 1 means the pen is raised after this point,
/// so the movement to the next point is not drawn.
struct StrokePoint {
  double dx = 0.0;
  double dy = 0.0;
  std::uint8_t lift = 0;

  friend bool operator==(const StrokePoint&, const StrokePoint&) = default;
};

/// Vector sketch as relative pen movements. The first offset is taken from
/// the origin, so it fixes the absolute position of the drawing.
struct Sketch {
  std::vector<StrokePoint> points;
  std::optional<std::string> label;

  std::size_t size() const { return points.size(); }
  std::size_t stroke_count() const;

  friend bool operator==(const Sketch&, const Sketch&) = default;
};

/// Throws ContractError unless the sketch is non-empty, ends with a pen
/// lift, has binary lifts and finite offsets.
void validate(const Sketch& sketch);
bool is_valid(const Sketch& sketch);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};
using Polyline = std::vector<Point2>;

/// Absolute stroke polylines, starting from the origin.
std::vector<Polyline> to_strokes(const Sketch& sketch);
/// Relative coding of absolute strokes. The first offset is measured from
/// `origin`; by default the first point itself, giving a (0, 0) first move.
Sketch from_strokes(const std::vector<Polyline>& strokes, std::optional<std::string> label = std::nullopt,
                    std::optional<Point2> origin = std::nullopt);

// Parsing and serialization ---------------------------------------------------

struct RecordError {
  std::size_t line = 0;
  std::string message;
};

struct ParseResult {
  std::vector<Sketch> sketches;
  std::vector<RecordError> errors;
  std::vector<RecordError> warnings;
};

/// Newline-delimited records, either QuickDraw exports (`word`, `drawing`
/// as per-stroke [xs, ys(, ts)] absolute coordinates) or the internal
/// format `{"class": str|null, "points": [[dx, dy, lift], ...]}`.
/// Malformed lines are collected as errors; empty drawings as warnings.
ParseResult parse_ndjson(std::istream& in);
Sketch parse_record(const nlohmann::json& record);

/// QuickDraw-style record with absolute coordinates.
nlohmann::json to_quickdraw_json(const Sketch& sketch);
/// Internal point format.
nlohmann::json to_json(const Sketch& sketch);
Sketch sketch_from_json(const nlohmann::json& j);
nlohmann::json points_to_json(const std::vector<StrokePoint>& points);
std::vector<StrokePoint> points_from_json(const nlohmann::json& j);

// Geometry --------------------------------------------------------------------

/// Distance from p to the segment [a, b].
double point_segment_distance(Point2 p, Point2 a, Point2 b);

/// Ramer-Douglas-Peucker on every stroke. Endpoints and stroke structure
/// are kept; epsilon 0 returns the input unchanged.
Sketch rdp_simplify(const Sketch& sketch, double epsilon);
Polyline rdp_simplify(const Polyline& line, double epsilon);

/// Simplifies with `epsilon`, then with growing epsilon until the sketch has
/// at most `max_points` points. Trailing strokes are dropped as a last resort.
Sketch simplify_to_length(const Sketch& sketch, double epsilon, std::size_t max_points);

/// Corpus-wide offset scaling: every dx, dy divided by the population
/// standard deviation of all offsets. Returns the scale for inversion.
struct NormalizedCorpus {
  std::vector<Sketch> sketches;
  double scale = 1.0;
};
NormalizedCorpus normalize_offsets(const std::vector<Sketch>& corpus);
Sketch scale_offsets(const Sketch& sketch, double factor);

/// Random stroke-level permutation; points inside a stroke keep their
/// order and absolute positions are preserved.
Sketch shuffle_strokes(const Sketch& sketch, std::uint64_t seed);

}  // namespace livesketch
