#include "neural_descent/camera.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace neural_descent;

namespace {

void expect_intrinsics_near(const Intrinsics& a, const Intrinsics& b, double tol) {
  EXPECT_NEAR(a.fx, b.fx, tol);
  EXPECT_NEAR(a.fy, b.fy, tol);
  EXPECT_NEAR(a.cx, b.cx, tol);
  EXPECT_NEAR(a.cy, b.cy, tol);
}

Array matmul5(const Array& a, const Array& b) {
  Array c(Shape{5, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 5; ++k) c(i, j) += a(i, k) * b(k, j);
  return c;
}

}  // namespace

TEST(ApproxIntrinsics, Examples) {
  EXPECT_EQ(approx_intrinsics(480, 640), (Intrinsics{640, 640, 320, 240}));
  EXPECT_EQ(approx_intrinsics(480, 480), (Intrinsics{480, 480, 240, 240}));
  EXPECT_EQ(approx_intrinsics(1, 1), (Intrinsics{1, 1, 0.5, 0.5}));
  EXPECT_THROW(approx_intrinsics(0, 5), std::invalid_argument);
}

TEST(Project, Examples) {
  EXPECT_EQ(project(Array::matrix(1, 3, {0, 0, 1}), Intrinsics{1, 1, 0, 0}), Array::matrix(1, 2, {0, 0}));
  EXPECT_EQ(project(Array::matrix(1, 3, {2, 4, 2}), Intrinsics{100, 100, 50, 50}), Array::matrix(1, 2, {150, 250}));
  EXPECT_THROW(project(Array::matrix(1, 3, {0, 0, -1}), Intrinsics{}), ProjectionError);
  EXPECT_THROW(project(Array::matrix(1, 3, {0, 0, 1e-7}), Intrinsics{}), ProjectionError);
}

TEST(Project, GradientAwayFromCameraPlane) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Intrinsics C{500, 450, 240, 260};
  Array w(Shape{4, 2});
  for (double& v : w.values()) v = u(rng);
  for (int trial = 0; trial < 10; ++trial) {
    Array p(Shape{4, 3});
    for (std::size_t i = 0; i < 4; ++i) {
      p(i, 0) = u(rng);
      p(i, 1) = u(rng);
      p(i, 2) = 2.0 + u(rng);
    }
    // Scale the output down so the relative error is measured on O(1) gradients.
    const double err = check_gradient([&](const Var& x) { return sum(project(x, C) * x.tape().constant(w)) * 1e-3; }, p, 1e-6);
    EXPECT_LT(err, 1e-6);
  }
}

TEST(CropIntrinsics, Examples) {
  const Intrinsics C{480, 480, 240, 240};
  EXPECT_EQ(crop_intrinsics(C, {0, 0, 480, 480, 480}), C);
  EXPECT_EQ(crop_intrinsics(C, {120, 120, 240, 240, 480}), (Intrinsics{960, 960, 240, 240}));
  EXPECT_EQ(apply_intrinsics_map(crop_matrix({120, 120, 240, 240, 480}), C), (Intrinsics{960, 960, 240, 240}));
  EXPECT_THROW(crop_intrinsics(C, {0, 0, 0, 480, 480}), std::invalid_argument);
}

TEST(CropIntrinsics, ProjectionConsistency) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Intrinsics C{1280, 1280, 640, 360};
  const CropSpec crop{410.5, 120.25, 300, 260, 480};
  const Intrinsics Cc = crop_intrinsics(C, crop);
  for (int trial = 0; trial < 50; ++trial) {
    const Array p = Array::matrix(1, 3, {u(rng), u(rng), 3.0 + u(rng)});
    const Array full = project(p, C);
    const Array cropped = project(p, Cc);
    EXPECT_NEAR(cropped[0], (full[0] - crop.x0) * crop.out / crop.w, 1e-9);
    EXPECT_NEAR(cropped[1], (full[1] - crop.y0) * crop.out / crop.h, 1e-9);
  }
}

TEST(CropIntrinsics, CropOfCropComposes) {
  const Intrinsics C{1280, 1280, 640, 360};
  const CropSpec first{300, 100, 400, 500, 480};
  const CropSpec second{50, 70, 200, 160, 64};
  const double s1x = first.out / first.w;
  const double s1y = first.out / first.h;
  const CropSpec combined{first.x0 + second.x0 / s1x, first.y0 + second.y0 / s1y, second.w / s1x, second.h / s1y, second.out};
  const Array K = matmul5(crop_matrix(second), crop_matrix(first));
  const Array Kc = crop_matrix(combined);
  // Combined crop's out is shared by both axes, so compare the maps by their effect.
  expect_intrinsics_near(apply_intrinsics_map(K, C), crop_intrinsics(crop_intrinsics(C, first), second), 1e-9);
  expect_intrinsics_near(apply_intrinsics_map(Kc, C), apply_intrinsics_map(K, C), 1e-9);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(K[i], Kc[i], 1e-9);
}

TEST(CropIntrinsics, RoundTrip) {
  const Intrinsics C{1280, 1280, 640, 360};
  const CropSpec crop{411.3, 95.7, 333.3, 333.3, 480};
  expect_intrinsics_near(uncrop_intrinsics(crop_intrinsics(C, crop), crop), C, 1e-12);
}

TEST(RasterIntrinsics, ScalesCropSpace) {
  const Intrinsics Cc{960, 960, 240, 240};
  EXPECT_EQ(raster_intrinsics(Cc, 480, 64, 64), (Intrinsics{128, 128, 32, 32}));
}
