#include "neural_descent/camera.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace neural_descent {

void CropSpec::validate() const {
  if (!(w > 0.0) || !(h > 0.0) || !(out > 0.0)) throw std::invalid_argument("crop: w, h and out must be positive");
}

Intrinsics approx_intrinsics(double height, double width) {
  if (!(height > 0.0) || !(width > 0.0)) throw std::invalid_argument("approx_intrinsics: image extent must be positive");
  const double f = std::max(height, width);
  return {f, f, width / 2.0, height / 2.0};
}

namespace {

void check_depths(const Array& points) {
  if (points.ndim() != 2 || points.dim(1) != 3) throw ShapeError("project", shape_string(points.shape()));
  for (std::size_t i = 0; i < points.dim(0); ++i) {
    const double z = points(i, 2);
    if (!(z > kMinDepth)) {
      throw ProjectionError("project: point " + std::to_string(i) + " has depth " + std::to_string(z));
    }
  }
}

}  // namespace

Var project(const Var& points, const Intrinsics& C) {
  const Array& p = points.value();
  check_depths(p);
  const std::size_t n = p.dim(0);
  Array uv(Shape{n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    uv(i, 0) = C.fx * p(i, 0) / p(i, 2) + C.cx;
    uv(i, 1) = C.fy * p(i, 1) / p(i, 2) + C.cy;
  }
  return points.tape().record("project", std::move(uv), {points}, [C, n](const GradContext& ctx) {
    const Array& x = *ctx.inputs[0];
    Array& gx = *ctx.input_grads[0];
    for (std::size_t i = 0; i < n; ++i) {
      const double inv_z = 1.0 / x(i, 2);
      const double gu = ctx.grad(i, 0) * C.fx * inv_z;
      const double gv = ctx.grad(i, 1) * C.fy * inv_z;
      gx(i, 0) += gu;
      gx(i, 1) += gv;
      gx(i, 2) -= (gu * x(i, 0) + gv * x(i, 1)) * inv_z;
    }
  });
}

Array project(const Array& points, const Intrinsics& C) {
  Tape tape;
  return project(tape.constant(points), C).value();
}

Array crop_matrix(const CropSpec& crop) {
  crop.validate();
  const double sx = crop.out / crop.w;
  const double sy = crop.out / crop.h;
  Array K(Shape{5, 5});
  K(0, 0) = sx;
  K(1, 1) = sy;
  K(2, 2) = sx;
  K(2, 4) = -sx * crop.x0;
  K(3, 3) = sy;
  K(3, 4) = -sy * crop.y0;
  K(4, 4) = 1.0;
  return K;
}

Intrinsics apply_intrinsics_map(const Array& K, const Intrinsics& C) {
  if (K.shape() != Shape{5, 5}) throw ShapeError("apply_intrinsics_map", shape_string(K.shape()));
  const double in[5] = {C.fx, C.fy, C.cx, C.cy, 1.0};
  double out[5] = {0, 0, 0, 0, 0};
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) out[r] += K(r, c) * in[c];
  return {out[0] / out[4], out[1] / out[4], out[2] / out[4], out[3] / out[4]};
}

Intrinsics crop_intrinsics(const Intrinsics& C, const CropSpec& crop) {
  crop.validate();
  const double sx = crop.out / crop.w;
  const double sy = crop.out / crop.h;
  return {sx * C.fx, sy * C.fy, sx * (C.cx - crop.x0), sy * (C.cy - crop.y0)};
}

Intrinsics uncrop_intrinsics(const Intrinsics& C_crop, const CropSpec& crop) {
  crop.validate();
  const double sx = crop.out / crop.w;
  const double sy = crop.out / crop.h;
  return {C_crop.fx / sx, C_crop.fy / sy, C_crop.cx / sx + crop.x0, C_crop.cy / sy + crop.y0};
}

Intrinsics raster_intrinsics(const Intrinsics& C_crop, double crop_out, std::size_t width, std::size_t height) {
  if (!(crop_out > 0.0) || width == 0 || height == 0) throw std::invalid_argument("raster_intrinsics: extents must be positive");
  const double sx = static_cast<double>(width) / crop_out;
  const double sy = static_cast<double>(height) / crop_out;
  return {sx * C_crop.fx, sy * C_crop.fy, sx * C_crop.cx, sy * C_crop.cy};
}

}  // namespace neural_descent
