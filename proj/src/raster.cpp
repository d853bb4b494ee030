#include "livesketch/sketch/raster.hpp"

#include <algorithm>
#include <cmath>

#include "livesketch/numerics/errors.hpp"

namespace livesketch {

nn::Tensor RasterCanvas::as_row() const { return nn::Tensor({1, pixels.size()}, pixels); }

namespace {

void draw_segment(RasterCanvas& canvas, Point2 a, Point2 b, double width) {
  const double reach = width / 2.0 + 0.5;
  const long x0 = std::max(0L, long(std::floor(std::min(a.x, b.x) - reach)));
  const long x1 = std::min(long(canvas.width) - 1, long(std::ceil(std::max(a.x, b.x) + reach)));
  const long y0 = std::max(0L, long(std::floor(std::min(a.y, b.y) - reach)));
  const long y1 = std::min(long(canvas.height) - 1, long(std::ceil(std::max(a.y, b.y) + reach)));
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      const double d = point_segment_distance({double(x) + 0.5, double(y) + 0.5}, a, b);
      const double coverage = std::clamp(reach - d, 0.0, 1.0);
      double& px = canvas.at(std::size_t(y), std::size_t(x));
      px = std::max(px, coverage);
    }
  }
}

}  // namespace

RasterCanvas rasterize(const Sketch& sketch, std::size_t size) {
  RasterOptions options;
  options.size = size;
  return rasterize(sketch, options);
}

RasterCanvas rasterize(const Sketch& sketch, const RasterOptions& options) {
  if (options.size < 16) throw ContractError("raster size must be at least 16 pixels");
  validate(sketch);
  RasterCanvas canvas{options.size, options.size, std::vector<double>(options.size * options.size, 0.0)};

  std::vector<Polyline> strokes = to_strokes(sketch);
  double min_x = INFINITY, min_y = INFINITY, max_x = -INFINITY, max_y = -INFINITY;
  for (const auto& s : strokes) {
    for (const auto& p : s) {
      min_x = std::min(min_x, p.x);
      max_x = std::max(max_x, p.x);
      min_y = std::min(min_y, p.y);
      max_y = std::max(max_y, p.y);
    }
  }
  const double extent = std::max(max_x - min_x, max_y - min_y);
  const double side = double(options.size);
  const double centre = side / 2.0;
  if (!(extent > 1e-12)) {
    draw_segment(canvas, {centre, centre}, {centre, centre}, options.line_width);
    return canvas;
  }
  const double fit = side * (1.0 - 2.0 * options.margin) / extent * options.scale;
  const double cx = (min_x + max_x) / 2.0, cy = (min_y + max_y) / 2.0;
  const double cs = std::cos(options.rotation), sn = std::sin(options.rotation);
  auto place = [&](Point2 p) {
    const double x = (p.x - cx) * fit, y = (p.y - cy) * fit;
    return Point2{centre + cs * x - sn * y, centre + sn * x + cs * y};
  };
  for (const auto& s : strokes) {
    if (s.size() == 1) {
      const Point2 p = place(s[0]);
      draw_segment(canvas, p, p, options.line_width);
      continue;
    }
    for (std::size_t i = 0; i + 1 < s.size(); ++i) draw_segment(canvas, place(s[i]), place(s[i + 1]), options.line_width);
  }
  return canvas;
}

std::vector<bool> dilate(const RasterCanvas& canvas, double threshold) {
  const long w = long(canvas.width), h = long(canvas.height);
  std::vector<bool> out(canvas.pixels.size(), false);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      if (canvas.pixels[std::size_t(y * w + x)] < threshold) continue;
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) out[std::size_t(yy * w + xx)] = true;
        }
      }
    }
  }
  return out;
}

double dilated_iou(const RasterCanvas& a, const RasterCanvas& b, double threshold) {
  if (a.width != b.width || a.height != b.height) throw DimensionError("dilated_iou: canvas sizes differ");
  const auto ma = dilate(a, threshold), mb = dilate(b, threshold);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    inter += ma[i] && mb[i];
    uni += ma[i] || mb[i];
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

nn::Tensor stack_rows(const std::vector<RasterCanvas>& canvases) {
  if (canvases.empty()) throw ContractError("stack_rows: no canvases");
  const std::size_t n = canvases[0].pixels.size();
  std::vector<double> values;
  values.reserve(canvases.size() * n);
  for (const auto& c : canvases) {
    if (c.pixels.size() != n) throw DimensionError("stack_rows: canvases differ in size");
    values.insert(values.end(), c.pixels.begin(), c.pixels.end());
  }
  return nn::Tensor({canvases.size(), n}, std::move(values));
}

}  // namespace livesketch
