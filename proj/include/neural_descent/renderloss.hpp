#pragma once

// Observation losses: keypoint reprojection, soft-rasterized part alignment,
// the combined per-stage unit loss, and 3D supervision.

#include "neural_descent/bodymodel.hpp"
#include "neural_descent/camera.hpp"
#include "neural_descent/diffcore.hpp"

#include <array>
#include <optional>
#include <span>

namespace neural_descent {

/// 2D evidence for one person crop, optionally with 3D ground truth.
struct Observation {
  Array keypoints;     ///< N_j x 2, crop pixels
  Array confidences;   ///< N_j, in [0, 1]
  Array part_map;      ///< H x W x (P+1), channel P is the foreground probability
  Intrinsics crop_intrinsics;
  double crop_size = 480.0;  ///< side of the square crop in pixels
  std::optional<Array> gt_joints;    ///< J x 3, meters
  std::optional<Array> gt_vertices;  ///< N_v x 3, meters

  std::size_t raster_height() const { return part_map.empty() ? 0 : part_map.dim(0); }
  std::size_t raster_width() const { return part_map.empty() ? 0 : part_map.dim(1); }
  /// Intrinsics in part-map pixels.
  Intrinsics raster_intrinsics() const;
  friend bool operator==(const Observation&, const Observation&) = default;
};

struct LossWeights {
  double lambda_k = 1.0;
  double lambda_b = 1.0;
  double lambda_m = 1.0;
  double lambda_3d = 1.0;
  /// Weight on ||theta||^2 + ||beta||^2. The unit loss uses 1 unless overridden.
  double lambda_prior = 1.0;

  void validate() const;
};

struct RasterConfig {
  double sigma = 1.0;   ///< edge softness, squared pixels
  double gamma = 1e-2;  ///< depth aggregation temperature
  std::size_t width = 64;
  std::size_t height = 64;

  void validate() const;
};

/// Fragments with d^2/sigma above this, outside their triangle, are dropped.
inline constexpr double kCullThreshold = 40.0;

/// Differentiable soft rasterization. `uv` is N_v x 2 in raster pixels with
/// pixel centers at (x + 0.5, y + 0.5); `depth` is N_v and positive.
/// Returns H x W x (P+1): P part channels then alpha.
Var soft_rasterize(const Var& uv, const Var& depth, std::span<const std::array<std::size_t, 3>> triangles,
                   std::span<const std::size_t> triangle_part, std::size_t part_count, const RasterConfig& cfg);

/// Projects and soft-rasterizes a posed mesh. `C` is in raster pixels.
Array soft_rasterize(const Mesh& mesh, const Intrinsics& C, const RasterConfig& cfg);

/// Z-buffer rasterization on mean triangle depth: one-hot part plus alpha 1
/// where a triangle covers the pixel center, zeros elsewhere.
Array hard_rasterize(const Mesh& mesh, const Intrinsics& C, std::size_t width, std::size_t height);

/// Part label of each triangle, taken as the majority label of its vertices.
std::vector<std::size_t> triangle_parts(const Mesh& mesh);

// Differentiable losses. `state` is the packed state vector on any tape.
Var keypoint_loss(const Skeleton& skeleton, const Var& state, const Observation& obs);
Var keypoint_loss(const Var& joints, const Observation& obs);
Var part_loss(const Skeleton& skeleton, const Var& state, const Observation& obs, const RasterConfig& cfg);
Var part_loss(const Var& vertices, const MeshTemplate& tpl, const Observation& obs, const RasterConfig& cfg);
Var fs_loss(const Skeleton& skeleton, const Var& state, const Observation& obs, const LossWeights& weights);

/// Weighted contributions; they sum to `total`.
struct UnitLossTerms {
  Var total;
  Var keypoint;
  Var part;
  Var prior;
};

struct LossBreakdown {
  double total = 0.0;
  double keypoint = 0.0;
  double part = 0.0;
  double prior = 0.0;
};

LossBreakdown values(const UnitLossTerms& terms);

/// L_u = lambda_k L_k + lambda_b L_b + lambda_prior (||theta||^2 + ||beta||^2).
/// The part term is skipped (and reported as 0) when lambda_b is 0.
UnitLossTerms unit_loss(const Skeleton& skeleton, const Var& state, const Observation& obs,
                        const LossWeights& weights, const RasterConfig& cfg);
LossBreakdown unit_loss(const Skeleton& skeleton, const ModelState& state, const Observation& obs,
                        const LossWeights& weights, const RasterConfig& cfg);
double fs_loss(const Skeleton& skeleton, const ModelState& state, const Observation& obs, const LossWeights& weights);

}  // namespace neural_descent
