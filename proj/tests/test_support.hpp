#pragma once

// Shared fixtures: noiseless observations rendered from a known state.

#include "neural_descent/bodymodel.hpp"
#include "neural_descent/camera.hpp"
#include "neural_descent/renderloss.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace test_support {

using namespace neural_descent;

inline Intrinsics test_crop_intrinsics() { return approx_intrinsics(480, 480); }

inline Observation observe(const Skeleton& skeleton, const ModelState& state, std::size_t raster = 32) {
  Observation obs;
  obs.crop_intrinsics = test_crop_intrinsics();
  obs.crop_size = 480.0;
  const Array joints = pose_joints(skeleton, state);
  obs.keypoints = project(joints, obs.crop_intrinsics);
  obs.confidences = Array(Shape{skeleton.joint_count()}, 1.0);
  const Mesh mesh = pose_mesh(skeleton, state);
  obs.part_map = hard_rasterize(mesh, raster_intrinsics(obs.crop_intrinsics, obs.crop_size, raster, raster), raster, raster);
  obs.gt_joints = joints;
  obs.gt_vertices = mesh.vertices;
  return obs;
}

/// A state with the body roughly centered in front of the test camera.
inline ModelState random_visible_state(const Skeleton& skeleton, std::uint64_t seed, double pose_scale = 0.3) {
  SamplingConfig cfg;
  cfg.pose_scale = pose_scale;
  cfg.shape_scale = 0.5;
  cfg.t_min = {-0.2, -0.2, 3.0};
  cfg.t_max = {0.2, 0.2, 4.0};
  return sample_state(skeleton, cfg, seed);
}

// Single rigid prism of bone `bone` from a posed body, as its own mesh.
inline Mesh single_prism(const Skeleton& s, const ModelState& st, std::size_t bone) {
  const Mesh full = pose_mesh(s, st);
  Mesh m;
  m.vertices = Array(Shape{kPrismVertices, 3});
  m.vertex_semantics = Array(Shape{kPrismVertices, kPartCount + 1});
  const std::size_t base = bone * kPrismVertices;
  for (std::size_t v = 0; v < kPrismVertices; ++v) {
    for (std::size_t i = 0; i < 3; ++i) m.vertices(v, i) = full.vertices(base + v, i);
    for (std::size_t c = 0; c <= kPartCount; ++c) m.vertex_semantics(v, c) = full.vertex_semantics(base + v, c);
  }
  for (std::size_t j = bone * kPrismTriangles; j < (bone + 1) * kPrismTriangles; ++j) {
    const auto& tri = full.triangles[j];
    m.triangles.push_back({tri[0] - base, tri[1] - base, tri[2] - base});
  }
  return m;
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  const double t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
  return std::hypot(px - ax - t * dx, py - ay - t * dy);
}

// Pixels whose centers are farther than 1 px from every projected edge.
inline std::vector<bool> interior_mask(const Mesh& m, const Intrinsics& C, std::size_t W, std::size_t H) {
  const Array uv = project(m.vertices, C);
  std::vector<bool> mask(W * H, true);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      for (const auto& tri : m.triangles) {
        for (int e = 0; e < 3; ++e) {
          const std::size_t a = tri[e];
          const std::size_t b = tri[(e + 1) % 3];
          if (segment_distance(px, py, uv(a, 0), uv(a, 1), uv(b, 0), uv(b, 1)) <= 1.0) mask[y * W + x] = false;
        }
      }
    }
  }
  return mask;
}

}  // namespace test_support
