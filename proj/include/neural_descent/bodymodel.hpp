#pragma once

// Articulated prism-body: kinematic tree, exponential bone-length shape space,
// 6D global rotation, rigid per-bone meshes with semantic part labels.

#include "neural_descent/diffcore.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace neural_descent {

inline constexpr std::size_t kDefaultJointCount = 17;
inline constexpr std::size_t kDefaultShapeDims = 4;
inline constexpr std::size_t kPartCount = 15;
inline constexpr std::size_t kPrismVertices = 8;
inline constexpr std::size_t kPrismTriangles = 12;

/// Raised when a 6D rotation has a zero or parallel column pair.
class DegenerateRotation : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Skeleton {
  std::vector<std::size_t> parent;      ///< parent[0] == 0 (root); parent[j] < j otherwise
  Array rest_offsets;                   ///< J x 3, meters
  std::vector<std::size_t> part_of_joint;
  Array shape_basis;                    ///< J x N_s, orthonormal columns
  std::uint64_t shape_basis_seed = 0;
  double girth = 0.25;                  ///< prism width as a fraction of bone length

  std::size_t joint_count() const { return parent.size(); }
  std::size_t shape_dims() const { return shape_basis.empty() ? 0 : shape_basis.dim(1); }
  std::size_t pose_dims() const { return 3 * (joint_count() - 1); }
  std::size_t state_dims() const { return pose_dims() + shape_dims() + 9; }
  std::size_t vertex_count() const { return kPrismVertices * (joint_count() - 1); }

  /// Pelvis-rooted 17-joint humanoid in a y-down, z-forward camera-style frame.
  static Skeleton humanoid17(std::uint64_t shape_basis_seed = 20201116);

  /// Throws std::invalid_argument when the tree or constants are malformed.
  void validate() const;

  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

/// Deterministic J x N_s matrix with orthonormal columns.
Array make_shape_basis(std::size_t joints, std::size_t dims, std::uint64_t seed);

/// s = (theta, beta, r, t). Packed layout: [theta | beta | r(6) | t(3)].
struct ModelState {
  std::vector<double> theta;
  std::vector<double> beta;
  std::array<double, 6> r{1, 0, 0, 0, 1, 0};
  std::array<double, 3> t{0, 0, 0};

  static ModelState rest(const Skeleton& skeleton, std::array<double, 3> t = {0, 0, 0});
  static ModelState unpack(const Skeleton& skeleton, std::span<const double> packed);
  Array pack() const;
  bool finite() const;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

/// Offsets of each block inside the packed state vector.
struct StateLayout {
  std::size_t pose = 0;
  std::size_t shape = 0;

  explicit StateLayout(const Skeleton& s) : pose(s.pose_dims()), shape(s.shape_dims()) {}
  std::size_t theta_begin() const { return 0; }
  std::size_t beta_begin() const { return pose; }
  std::size_t r_begin() const { return pose + shape; }
  std::size_t t_begin() const { return pose + shape + 6; }
  std::size_t size() const { return pose + shape + 9; }
};

struct Mesh {
  Array vertices;                         ///< N_v x 3
  std::vector<std::array<std::size_t, 3>> triangles;
  Array vertex_semantics;                 ///< N_v x (P+1): part one-hot + alpha 1
};

/// Mesh topology and labels, independent of the state.
struct MeshTemplate {
  std::vector<std::array<std::size_t, 3>> triangles;
  std::vector<std::size_t> vertex_part;
  std::vector<std::size_t> triangle_part;  ///< majority vertex label
  Array vertex_semantics;
};

MeshTemplate mesh_template(const Skeleton& skeleton);

/// Posed joints and (optionally) mesh vertices of one state.
struct PosedBody {
  Var joints;    ///< J x 3, camera space
  Var vertices;  ///< N_v x 3, invalid when not requested
};

// Differentiable forms. `state` is the packed state vector.
PosedBody pose_body(const Skeleton& skeleton, const Var& state, bool with_vertices);
Var rot6d_to_matrix(const Var& r6);
Var bone_scales(const Skeleton& skeleton, const Var& beta);
Var pose_joints(const Skeleton& skeleton, const Var& state);
Var pose_vertices(const Skeleton& skeleton, const Var& state);
/// ||theta||^2 + ||beta||^2.
Var prior_loss(const Skeleton& skeleton, const Var& state);

// Value forms.
Array rot6d_to_matrix(std::span<const double> r6);
Array bone_scales(const Skeleton& skeleton, std::span<const double> beta);
Array pose_joints(const Skeleton& skeleton, const ModelState& state);
Mesh pose_mesh(const Skeleton& skeleton, const ModelState& state);
double prior_loss(const ModelState& state);

struct SamplingConfig {
  double pose_scale = 0.3;
  double shape_scale = 1.0;
  std::array<double, 3> t_min{-0.5, -0.5, 2.0};
  std::array<double, 3> t_max{0.5, 0.5, 6.0};
  /// Heading is uniform in [-yaw_range, yaw_range] about the body's vertical axis.
  double yaw_range = 3.141592653589793;
  /// Std-dev (radians) of the tilt about the two horizontal axes.
  double tilt_std = 0.1;
};

/// Draws a state from the Gaussian pose/shape prior with a random global
/// rotation and a uniform translation. Deterministic in `seed`.
ModelState sample_state(const Skeleton& skeleton, const SamplingConfig& config, std::uint64_t seed);

/// 6D encoding (first two columns) of a rotation matrix.
std::array<double, 6> matrix_to_rot6d(const Array& R);

}  // namespace neural_descent
