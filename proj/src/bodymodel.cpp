#include "neural_descent/bodymodel.hpp"

#include <cmath>
#include <random>
#include <string>

namespace neural_descent {

namespace {

constexpr double kDegenerateTolerance = 1e-9;

struct Vec3 {
  double x, y, z;
};

Vec3 cross3(Vec3 a, Vec3 b) { return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x}; }
double dot3(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 scale3(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
Vec3 add3(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 unit3(Vec3 a) { return scale3(a, 1.0 / std::sqrt(dot3(a, a))); }

// Corners of a unit-scale prism for bone j, expressed in the joint's own frame.
Array prism_corners(const Skeleton& skeleton, std::size_t j) {
  const Vec3 o{skeleton.rest_offsets(j, 0), skeleton.rest_offsets(j, 1), skeleton.rest_offsets(j, 2)};
  const double length = std::sqrt(dot3(o, o));
  const Vec3 dir = scale3(o, 1.0 / length);
  const Vec3 ref = std::abs(dir.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
  const Vec3 u = unit3(cross3(dir, ref));
  const Vec3 v = cross3(dir, u);
  const double half = 0.5 * skeleton.girth * length;
  static constexpr double kSigns[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
  Array corners(Shape{kPrismVertices, 3});
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t k = 0; k < 4; ++k) {
      const Vec3 p = add3(scale3(o, static_cast<double>(a)),
                          add3(scale3(u, half * kSigns[k][0]), scale3(v, half * kSigns[k][1])));
      const std::size_t row = a * 4 + k;
      corners(row, 0) = p.x;
      corners(row, 1) = p.y;
      corners(row, 2) = p.z;
    }
  }
  return corners;
}

}  // namespace

Skeleton Skeleton::humanoid17(std::uint64_t shape_basis_seed) {
  Skeleton s;
  // pelvis, spine, thorax, neck, head, l_shoulder, l_elbow, l_wrist, r_shoulder,
  // r_elbow, r_wrist, l_hip, l_knee, l_ankle, r_hip, r_knee, r_ankle
  s.parent = {0, 0, 1, 2, 3, 2, 5, 6, 2, 8, 9, 0, 11, 12, 0, 14, 15};
  s.rest_offsets = Array(Shape{17, 3}, std::vector<double>{
                                           0.00,  0.00,  0.00,   //
                                           0.00,  -0.22, 0.00,   //
                                           0.00,  -0.24, 0.00,   //
                                           0.00,  -0.10, 0.00,   //
                                           0.00,  -0.16, -0.02,  //
                                           0.17,  0.02,  0.00,   //
                                           0.19,  0.19,  0.00,   //
                                           0.17,  0.17,  0.00,   //
                                           -0.17, 0.02,  0.00,   //
                                           -0.19, 0.19,  0.00,   //
                                           -0.17, 0.17,  0.00,   //
                                           0.11,  0.05,  0.00,   //
                                           0.02,  0.42,  0.00,   //
                                           0.00,  0.41,  0.02,   //
                                           -0.11, 0.05,  0.00,   //
                                           -0.02, 0.42,  0.00,   //
                                           0.00,  0.41,  0.02,   //
                                       });
  // 0 lower torso, 1 upper torso, 2 neck, 3 head, 4-6 left arm, 7-9 right arm,
  // 10 hips, 11-12 left leg, 13-14 right leg.
  s.part_of_joint = {10, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 10, 13, 14};
  s.shape_basis_seed = shape_basis_seed;
  s.shape_basis = make_shape_basis(17, kDefaultShapeDims, shape_basis_seed);
  s.validate();
  return s;
}

void Skeleton::validate() const {
  const std::size_t J = joint_count();
  if (J < 2) throw std::invalid_argument("skeleton: need at least two joints");
  if (parent[0] != 0) throw std::invalid_argument("skeleton: joint 0 must be the root");
  if (rest_offsets.shape() != Shape{J, 3}) throw std::invalid_argument("skeleton: rest_offsets must be J x 3");
  if (part_of_joint.size() != J) throw std::invalid_argument("skeleton: part_of_joint must have J entries");
  if (shape_basis.ndim() != 2 || shape_basis.dim(0) != J) throw std::invalid_argument("skeleton: shape basis must be J x N_s");
  for (std::size_t j = 1; j < J; ++j) {
    if (parent[j] >= j) throw std::invalid_argument("skeleton: parent of joint " + std::to_string(j) + " must precede it");
    const double len2 = rest_offsets(j, 0) * rest_offsets(j, 0) + rest_offsets(j, 1) * rest_offsets(j, 1) +
                        rest_offsets(j, 2) * rest_offsets(j, 2);
    if (!(len2 > 0.0)) throw std::invalid_argument("skeleton: zero rest offset at joint " + std::to_string(j));
  }
  for (std::size_t p : part_of_joint) {
    if (p >= kPartCount) throw std::invalid_argument("skeleton: part id out of range");
  }
  if (!(girth > 0.0)) throw std::invalid_argument("skeleton: girth must be positive");
}

Array make_shape_basis(std::size_t joints, std::size_t dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Array basis(Shape{joints, dims});
  for (double& v : basis.values()) v = normal(rng);
  // Modified Gram-Schmidt over columns.
  for (std::size_t c = 0; c < dims; ++c) {
    for (std::size_t prev = 0; prev < c; ++prev) {
      double d = 0.0;
      for (std::size_t r = 0; r < joints; ++r) d += basis(r, c) * basis(r, prev);
      for (std::size_t r = 0; r < joints; ++r) basis(r, c) -= d * basis(r, prev);
    }
    double n = 0.0;
    for (std::size_t r = 0; r < joints; ++r) n += basis(r, c) * basis(r, c);
    n = std::sqrt(n);
    for (std::size_t r = 0; r < joints; ++r) basis(r, c) /= n;
  }
  return basis;
}

ModelState ModelState::rest(const Skeleton& skeleton, std::array<double, 3> t) {
  ModelState s;
  s.theta.assign(skeleton.pose_dims(), 0.0);
  s.beta.assign(skeleton.shape_dims(), 0.0);
  s.t = t;
  return s;
}

ModelState ModelState::unpack(const Skeleton& skeleton, std::span<const double> packed) {
  const StateLayout layout(skeleton);
  if (packed.size() != layout.size()) {
    throw ShapeError("ModelState::unpack", std::to_string(packed.size()) + " values, expected " + std::to_string(layout.size()));
  }
  ModelState s;
  s.theta.assign(packed.begin(), packed.begin() + static_cast<std::ptrdiff_t>(layout.beta_begin()));
  s.beta.assign(packed.begin() + static_cast<std::ptrdiff_t>(layout.beta_begin()),
                packed.begin() + static_cast<std::ptrdiff_t>(layout.r_begin()));
  for (std::size_t i = 0; i < 6; ++i) s.r[i] = packed[layout.r_begin() + i];
  for (std::size_t i = 0; i < 3; ++i) s.t[i] = packed[layout.t_begin() + i];
  return s;
}

Array ModelState::pack() const {
  std::vector<double> v;
  v.reserve(theta.size() + beta.size() + 9);
  v.insert(v.end(), theta.begin(), theta.end());
  v.insert(v.end(), beta.begin(), beta.end());
  v.insert(v.end(), r.begin(), r.end());
  v.insert(v.end(), t.begin(), t.end());
  return Array::vector(std::move(v));
}

bool ModelState::finite() const {
  for (double v : pack().values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

MeshTemplate mesh_template(const Skeleton& skeleton) {
  static constexpr std::size_t kBox[kPrismTriangles][3] = {
      {0, 1, 2}, {0, 2, 3}, {4, 6, 5}, {4, 7, 6},  // caps
      {0, 1, 5}, {0, 5, 4}, {1, 2, 6}, {1, 6, 5},  // sides
      {2, 3, 7}, {2, 7, 6}, {3, 0, 4}, {3, 4, 7},
  };
  MeshTemplate m;
  const std::size_t bones = skeleton.joint_count() - 1;
  m.vertex_semantics = Array(Shape{bones * kPrismVertices, kPartCount + 1});
  for (std::size_t b = 0; b < bones; ++b) {
    const std::size_t part = skeleton.part_of_joint[b + 1];
    const std::size_t base = b * kPrismVertices;
    for (std::size_t v = 0; v < kPrismVertices; ++v) {
      m.vertex_part.push_back(part);
      m.vertex_semantics(base + v, part) = 1.0;
      m.vertex_semantics(base + v, kPartCount) = 1.0;
    }
    for (const auto& tri : kBox) {
      m.triangles.push_back({base + tri[0], base + tri[1], base + tri[2]});
    }
  }
  for (const auto& tri : m.triangles) {
    const std::size_t a = m.vertex_part[tri[0]];
    const std::size_t b = m.vertex_part[tri[1]];
    const std::size_t c = m.vertex_part[tri[2]];
    m.triangle_part.push_back((b == c && b != a) ? b : a);
  }
  return m;
}

Var rot6d_to_matrix(const Var& r6) {
  if (r6.size() != 6) throw ShapeError("rot6d_to_matrix", shape_string(r6.shape()));
  const Var a1 = slice(r6, 0, 0, 3);
  const Var a2 = slice(r6, 0, 3, 6);
  const double* v = r6.value().data();
  if (std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) < kDegenerateTolerance) {
    throw DegenerateRotation("rot6d_to_matrix: first column is zero");
  }
  const Var b1 = normalize(a1);
  const Var ortho = a2 - sum(b1 * a2) * b1;
  const double* o = ortho.value().data();
  if (std::sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2]) < kDegenerateTolerance) {
    throw DegenerateRotation("rot6d_to_matrix: columns are parallel");
  }
  const Var b2 = normalize(ortho);
  const Var b3 = cross(b1, b2);
  return transpose(stack({b1, b2, b3}));
}

Var bone_scales(const Skeleton& skeleton, const Var& beta) {
  return exp(matmul(beta.tape().constant(skeleton.shape_basis), beta));
}

PosedBody pose_body(const Skeleton& skeleton, const Var& state, bool with_vertices) {
  Tape& tape = state.tape();
  const StateLayout layout(skeleton);
  if (state.size() != layout.size()) {
    throw ShapeError("pose_body", shape_string(state.shape()) + ", expected [" + std::to_string(layout.size()) + "]");
  }
  const std::size_t J = skeleton.joint_count();
  const Var scales = bone_scales(skeleton, slice(state, 0, layout.beta_begin(), layout.r_begin()));
  std::vector<Var> rotation(J);
  std::vector<Var> position(J);
  rotation[0] = rot6d_to_matrix(slice(state, 0, layout.r_begin(), layout.t_begin()));
  position[0] = slice(state, 0, layout.t_begin(), layout.size());

  std::vector<Var> bone_vertices;
  if (with_vertices) bone_vertices.reserve(J - 1);
  for (std::size_t j = 1; j < J; ++j) {
    const std::size_t p = skeleton.parent[j];
    const Var local = axis_angle_to_matrix(slice(state, 0, 3 * (j - 1), 3 * j));
    rotation[j] = matmul(rotation[p], local);
    const Var scale = slice(scales, 0, j, j + 1);
    const Var offset = tape.constant(Array::vector({skeleton.rest_offsets(j, 0), skeleton.rest_offsets(j, 1),
                                                    skeleton.rest_offsets(j, 2)}));
    position[j] = position[p] + matmul(rotation[j], offset) * scale;
    if (with_vertices) {
      const Var corners = tape.constant(prism_corners(skeleton, j)) * scale;
      bone_vertices.push_back(matmul(corners, transpose(rotation[j])) + position[p]);
    }
  }
  PosedBody body;
  body.joints = stack(position);
  if (with_vertices) body.vertices = concat(bone_vertices, 0);
  return body;
}

Var pose_joints(const Skeleton& skeleton, const Var& state) { return pose_body(skeleton, state, false).joints; }

Var pose_vertices(const Skeleton& skeleton, const Var& state) { return pose_body(skeleton, state, true).vertices; }

Var prior_loss(const Skeleton& skeleton, const Var& state) {
  const StateLayout layout(skeleton);
  return sum(square(slice(state, 0, 0, layout.r_begin())));
}

Array rot6d_to_matrix(std::span<const double> r6) {
  Tape tape;
  return rot6d_to_matrix(tape.constant(Array::vector({r6.begin(), r6.end()}))).value();
}

Array bone_scales(const Skeleton& skeleton, std::span<const double> beta) {
  Tape tape;
  return bone_scales(skeleton, tape.constant(Array::vector({beta.begin(), beta.end()}))).value();
}

Array pose_joints(const Skeleton& skeleton, const ModelState& state) {
  Tape tape;
  return pose_joints(skeleton, tape.constant(state.pack())).value();
}

Mesh pose_mesh(const Skeleton& skeleton, const ModelState& state) {
  Tape tape;
  MeshTemplate tpl = mesh_template(skeleton);
  Mesh mesh;
  mesh.vertices = pose_vertices(skeleton, tape.constant(state.pack())).value();
  mesh.triangles = std::move(tpl.triangles);
  mesh.vertex_semantics = std::move(tpl.vertex_semantics);
  return mesh;
}

double prior_loss(const ModelState& state) {
  double total = 0.0;
  for (double v : state.theta) total += v * v;
  for (double v : state.beta) total += v * v;
  return total;
}

std::array<double, 6> matrix_to_rot6d(const Array& R) {
  return {R(0, 0), R(1, 0), R(2, 0), R(0, 1), R(1, 1), R(2, 1)};
}

ModelState sample_state(const Skeleton& skeleton, const SamplingConfig& config, std::uint64_t seed) {
  if (config.pose_scale < 0.0 || config.shape_scale < 0.0) {
    throw std::invalid_argument("sample_state: scales must be non-negative");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  ModelState s = ModelState::rest(skeleton);
  // "+ 0.0" keeps zero-variance draws at +0.0.
  for (double& v : s.theta) v = config.pose_scale * normal(rng) + 0.0;
  for (double& v : s.beta) v = config.shape_scale * normal(rng) + 0.0;

  const double yaw = config.yaw_range * (2.0 * unit(rng) - 1.0);
  const double tilt_x = config.tilt_std * normal(rng);
  const double tilt_z = config.tilt_std * normal(rng);
  Tape tape;
  // Heading about the body's vertical (y) axis, then tilt about x and z.
  const Var Ry = axis_angle_to_matrix(tape.constant(Array::vector({0.0, yaw, 0.0})));
  const Var Rx = axis_angle_to_matrix(tape.constant(Array::vector({tilt_x, 0.0, 0.0})));
  const Var Rz = axis_angle_to_matrix(tape.constant(Array::vector({0.0, 0.0, tilt_z})));
  s.r = matrix_to_rot6d(matmul(Rx, matmul(Rz, Ry)).value());

  for (std::size_t i = 0; i < 3; ++i) s.t[i] = config.t_min[i] + (config.t_max[i] - config.t_min[i]) * unit(rng);
  return s;
}

}  // namespace neural_descent
