#pragma once

#include <cstddef>
#include <vector>

#include "livesketch/numerics/tensor.hpp"
#include "livesketch/sketch/sketch.hpp"

namespace livesketch {

/// Grayscale image with intensities in [0, 1], row-major.
struct RasterCanvas {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  double& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }
  /// As a [1, width*height] tensor row.
  nn::Tensor as_row() const;

  friend bool operator==(const RasterCanvas&, const RasterCanvas&) = default;
};

struct RasterOptions {
  std::size_t size = 64;
  double margin = 0.04;
  double line_width = 1.0;
  /// Rotation about the drawing centre, radians.
  double rotation = 0.0;
  /// Extra scale applied after fitting the bounding box.
  double scale = 1.0;
};

/// Renders strokes as anti-aliased polylines. The bounding box is centred
/// and uniformly scaled to fit inside the margin, so the result does not
/// depend on translation, uniform scale or stroke order. A sketch whose
/// points all coincide renders as a dot at the centre.
RasterCanvas rasterize(const Sketch& sketch, const RasterOptions& options = {});
RasterCanvas rasterize(const Sketch& sketch, std::size_t size);

/// Binary dilation by one pixel (8-neighbourhood) of pixels with intensity at least `threshold`.
std::vector<bool> dilate(const RasterCanvas& canvas, double threshold = 0.5);
/// Intersection over union of the dilated ink masks.
double dilated_iou(const RasterCanvas& a, const RasterCanvas& b, double threshold = 0.5);

/// Stacks canvases into a [count, width*height] tensor.
nn::Tensor stack_rows(const std::vector<RasterCanvas>& canvases);

}  // namespace livesketch
