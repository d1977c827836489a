#pragma once

// Pinhole camera with top-left pixel-corner origin, +u right, +v down.

#include "neural_descent/diffcore.hpp"

#include <stdexcept>

namespace neural_descent {

inline constexpr double kMinDepth = 1e-6;

/// A point at or behind the camera plane.
class ProjectionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

struct CropSpec {
  double x0 = 0.0;
  double y0 = 0.0;
  double w = 480.0;
  double h = 480.0;
  double out = 480.0;

  void validate() const;
  friend bool operator==(const CropSpec&, const CropSpec&) = default;
};

/// fx = fy = max(H, W), principal point at the image center.
Intrinsics approx_intrinsics(double height, double width);

/// N x 3 camera-space points to N x 2 pixels. Throws ProjectionError when any z <= kMinDepth.
Var project(const Var& points, const Intrinsics& C);
Array project(const Array& points, const Intrinsics& C);

/// 5 x 5 map K with [C_c; 1] = K [C; 1], C ordered (fx, fy, cx, cy).
Array crop_matrix(const CropSpec& crop);
Intrinsics apply_intrinsics_map(const Array& K, const Intrinsics& C);
Intrinsics crop_intrinsics(const Intrinsics& C, const CropSpec& crop);
/// Inverse of crop_intrinsics for the same crop.
Intrinsics uncrop_intrinsics(const Intrinsics& C_crop, const CropSpec& crop);

/// Rescales crop-space intrinsics (side `crop_out`) to a width x height raster.
Intrinsics raster_intrinsics(const Intrinsics& C_crop, double crop_out, std::size_t width, std::size_t height);

}  // namespace neural_descent
