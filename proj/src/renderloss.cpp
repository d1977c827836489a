#include "neural_descent/renderloss.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>

namespace neural_descent {

Intrinsics Observation::raster_intrinsics() const {
  return neural_descent::raster_intrinsics(crop_intrinsics, crop_size, raster_width(), raster_height());
}

void LossWeights::validate() const {
  for (double w : {lambda_k, lambda_b, lambda_m, lambda_3d, lambda_prior}) {
    if (!std::isfinite(w) || w < 0.0) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
}

void RasterConfig::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("raster: sigma must be positive");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("raster: gamma must be positive");
  if (width == 0 || height == 0) throw std::invalid_argument("raster: extent must be positive");
}

namespace {

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Fragment {
  std::uint32_t pixel;
  std::uint32_t tri;
  std::uint8_t edge;  // nearest edge: vertices (edge, edge + 1 mod 3)
  bool inside;
  double s;           // signed d^2 / sigma
  double t;           // position of the closest point along the edge
  double ex, ey;      // pixel center minus closest point
};

struct RasterCache {
  std::vector<std::array<std::size_t, 3>> triangles;
  std::vector<std::size_t> labels;
  std::vector<double> zbar;             // per triangle, 3 / sum of vertex depths
  std::vector<Fragment> fragments;      // grouped by pixel, triangle order within a pixel
  std::vector<std::uint32_t> offsets;   // pixel -> first fragment, size H*W + 1
  std::vector<double> alpha;            // per pixel
  std::vector<double> transmittance;    // per pixel, 1 - alpha
  std::vector<double> weight;           // per fragment, normalized aggregation weight
};

// Range of pixel indices whose centers lie within [lo, hi].
bool pixel_range(double lo, double hi, std::size_t extent, std::size_t& first, std::size_t& last) {
  const double a = std::ceil(lo - 0.5);
  const double b = std::floor(hi - 0.5);
  if (b < 0.0 || a > static_cast<double>(extent) - 1.0 || a > b) return false;
  first = static_cast<std::size_t>(std::max(a, 0.0));
  last = static_cast<std::size_t>(std::min(b, static_cast<double>(extent) - 1.0));
  return true;
}

bool inside_triangle(double px, double py, const double* x, const double* y) {
  const double area = (x[1] - x[0]) * (y[2] - y[0]) - (y[1] - y[0]) * (x[2] - x[0]);
  if (area == 0.0) return false;
  for (int e = 0; e < 3; ++e) {
    const int n = (e + 1) % 3;
    const double edge = (x[n] - x[e]) * (py - y[e]) - (y[n] - y[e]) * (px - x[e]);
    if (edge * area < 0.0) return false;
  }
  return true;
}

void check_finite(const Array& a, const char* what) {
  for (double v : a.values()) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("soft_rasterize: non-finite ") + what);
  }
}

std::shared_ptr<RasterCache> rasterize_forward(const Array& uv, const Array& depth,
                                               std::span<const std::array<std::size_t, 3>> triangles,
                                               std::span<const std::size_t> labels, std::size_t part_count,
                                               const RasterConfig& cfg, Array& image) {
  const std::size_t H = cfg.height;
  const std::size_t W = cfg.width;
  const std::size_t channels = part_count + 1;
  const double reach = std::sqrt(kCullThreshold * cfg.sigma);

  auto cache = std::make_shared<RasterCache>();
  cache->triangles.assign(triangles.begin(), triangles.end());
  cache->labels.assign(labels.begin(), labels.end());
  cache->zbar.resize(triangles.size());

  std::vector<Fragment> raw;
  for (std::size_t j = 0; j < triangles.size(); ++j) {
    const auto& tri = triangles[j];
    double x[3], y[3];
    double zsum = 0.0;
    for (int k = 0; k < 3; ++k) {
      x[k] = uv(tri[k], 0);
      y[k] = uv(tri[k], 1);
      zsum += depth[tri[k]];
    }
    cache->zbar[j] = 3.0 / zsum;
    std::size_t x0, x1, y0, y1;
    if (!pixel_range(std::min({x[0], x[1], x[2]}) - reach, std::max({x[0], x[1], x[2]}) + reach, W, x0, x1)) continue;
    if (!pixel_range(std::min({y[0], y[1], y[2]}) - reach, std::max({y[0], y[1], y[2]}) + reach, H, y0, y1)) continue;
    double len2[3];
    for (int e = 0; e < 3; ++e) {
      const int n = (e + 1) % 3;
      len2[e] = (x[n] - x[e]) * (x[n] - x[e]) + (y[n] - y[e]) * (y[n] - y[e]);
    }
    for (std::size_t py = y0; py <= y1; ++py) {
      const double cy = static_cast<double>(py) + 0.5;
      for (std::size_t px = x0; px <= x1; ++px) {
        const double cx = static_cast<double>(px) + 0.5;
        Fragment f{};
        double best = std::numeric_limits<double>::infinity();
        for (int e = 0; e < 3; ++e) {
          const int n = (e + 1) % 3;
          const double dx = x[n] - x[e];
          const double dy = y[n] - y[e];
          double t = len2[e] > 0.0 ? ((cx - x[e]) * dx + (cy - y[e]) * dy) / len2[e] : 0.0;
          t = std::clamp(t, 0.0, 1.0);
          const double ex = cx - (x[e] + t * dx);
          const double ey = cy - (y[e] + t * dy);
          const double d2 = ex * ex + ey * ey;
          if (d2 < best) {
            best = d2;
            f.edge = static_cast<std::uint8_t>(e);
            f.t = t;
            f.ex = ex;
            f.ey = ey;
          }
        }
        f.inside = inside_triangle(cx, cy, x, y);
        const double scaled = best / cfg.sigma;
        if (!f.inside && scaled > kCullThreshold) continue;
        f.s = f.inside ? scaled : -scaled;
        f.pixel = static_cast<std::uint32_t>(py * W + px);
        f.tri = static_cast<std::uint32_t>(j);
        raw.push_back(f);
      }
    }
  }

  // Stable counting sort by pixel.
  cache->offsets.assign(H * W + 1, 0);
  for (const Fragment& f : raw) ++cache->offsets[f.pixel + 1];
  for (std::size_t p = 0; p < H * W; ++p) cache->offsets[p + 1] += cache->offsets[p];
  cache->fragments.resize(raw.size());
  {
    std::vector<std::uint32_t> cursor(cache->offsets.begin(), cache->offsets.end() - 1);
    for (const Fragment& f : raw) cache->fragments[cursor[f.pixel]++] = f;
  }

  image = Array(Shape{H, W, channels});
  cache->alpha.assign(H * W, 0.0);
  cache->transmittance.assign(H * W, 1.0);
  cache->weight.assign(cache->fragments.size(), 0.0);
  for (std::size_t p = 0; p < H * W; ++p) {
    const std::uint32_t begin = cache->offsets[p];
    const std::uint32_t end = cache->offsets[p + 1];
    if (begin == end) continue;
    double occupancy = 0.0;
    double umax = -std::numeric_limits<double>::infinity();
    for (std::uint32_t i = begin; i < end; ++i) {
      const Fragment& f = cache->fragments[i];
      // softplus(s) and softplus(-s) share log1p(exp(-|s|)).
      const double shared = std::log1p(std::exp(-std::abs(f.s)));
      occupancy += std::max(f.s, 0.0) + shared;
      const double u = -(std::max(-f.s, 0.0) + shared) + cache->zbar[f.tri] / cfg.gamma;
      cache->weight[i] = u;
      umax = std::max(umax, u);
    }
    double total = 0.0;
    for (std::uint32_t i = begin; i < end; ++i) {
      cache->weight[i] = std::exp(cache->weight[i] - umax);
      total += cache->weight[i];
    }
    const double A = -std::expm1(-occupancy);
    cache->alpha[p] = A;
    cache->transmittance[p] = std::exp(-occupancy);
    double* out = image.data() + p * channels;
    for (std::uint32_t i = begin; i < end; ++i) {
      cache->weight[i] /= total;
      out[cache->labels[cache->fragments[i].tri]] += A * cache->weight[i];
    }
    out[part_count] = A;
  }
  return cache;
}

}  // namespace

Var soft_rasterize(const Var& uv, const Var& depth, std::span<const std::array<std::size_t, 3>> triangles,
                   std::span<const std::size_t> triangle_part, std::size_t part_count, const RasterConfig& cfg) {
  cfg.validate();
  const Array& uv_value = uv.value();
  const Array& depth_value = depth.value();
  if (uv_value.ndim() != 2 || uv_value.dim(1) != 2) throw ShapeError("soft_rasterize", "uv " + shape_string(uv.shape()));
  const std::size_t n = uv_value.dim(0);
  if (depth_value.shape() != Shape{n}) throw ShapeError("soft_rasterize", "depth " + shape_string(depth.shape()));
  if (triangle_part.size() != triangles.size()) throw ShapeError("soft_rasterize", "one part label per triangle");
  for (std::size_t j = 0; j < triangles.size(); ++j) {
    for (std::size_t v : triangles[j]) {
      if (v >= n) throw std::out_of_range("soft_rasterize: triangle index out of range");
    }
    if (triangle_part[j] >= part_count) throw std::out_of_range("soft_rasterize: part label out of range");
  }
  check_finite(uv_value, "vertex");
  check_finite(depth_value, "depth");
  for (double z : depth_value.values()) {
    if (!(z > kMinDepth)) throw ProjectionError("soft_rasterize: vertex at or behind the camera");
  }

  Array image;
  auto cache = rasterize_forward(uv_value, depth_value, triangles, triangle_part, part_count, cfg, image);
  const double sigma = cfg.sigma;
  const double gamma = cfg.gamma;
  const std::size_t pixels = cfg.width * cfg.height;

  return uv.tape().record("soft_rasterize", std::move(image), {uv, depth}, [cache, sigma, gamma, pixels, part_count](const GradContext& ctx) {
    const std::size_t channels = part_count + 1;
    std::vector<double> dzbar(cache->triangles.size(), 0.0);
    Array* guv = ctx.input_grads[0];
    for (std::size_t p = 0; p < pixels; ++p) {
      const std::uint32_t begin = cache->offsets[p];
      const std::uint32_t end = cache->offsets[p + 1];
      if (begin == end) continue;
      const double* G = ctx.grad.data() + p * channels;
      const double A = cache->alpha[p];
      double label_dot = 0.0;  // sum_f w_f G_label(f)
      for (std::uint32_t i = begin; i < end; ++i) label_dot += cache->weight[i] * G[cache->labels[cache->fragments[i].tri]];
      const double dA = G[part_count] + label_dot;
      const double hbar = A * label_dot;
      for (std::uint32_t i = begin; i < end; ++i) {
        const Fragment& f = cache->fragments[i];
        const double w = cache->weight[i];
        const double du = w * (A * G[cache->labels[f.tri]] - hbar);
        const double D = sigmoid_value(f.s);
        const double ds = dA * cache->transmittance[p] * D + du * (1.0 - D);
        dzbar[f.tri] += du / gamma;
        if (guv == nullptr) continue;
        const double dd2 = (f.inside ? ds : -ds) / sigma;
        const auto& tri = cache->triangles[f.tri];
        const std::size_t a = tri[f.edge];
        const std::size_t b = tri[(f.edge + 1) % 3];
        (*guv)(a, 0) -= dd2 * 2.0 * (1.0 - f.t) * f.ex;
        (*guv)(a, 1) -= dd2 * 2.0 * (1.0 - f.t) * f.ey;
        (*guv)(b, 0) -= dd2 * 2.0 * f.t * f.ex;
        (*guv)(b, 1) -= dd2 * 2.0 * f.t * f.ey;
      }
    }
    if (Array* gz = ctx.input_grads[1]) {
      for (std::size_t j = 0; j < cache->triangles.size(); ++j) {
        if (dzbar[j] == 0.0) continue;
        const double z = cache->zbar[j];
        const double g = -dzbar[j] * z * z / 3.0;
        for (std::size_t v : cache->triangles[j]) (*gz)[v] += g;
      }
    }
  });
}

std::vector<std::size_t> triangle_parts(const Mesh& mesh) {
  const std::size_t channels = mesh.vertex_semantics.dim(1);
  const std::size_t parts = channels - 1;
  auto label_of = [&](std::size_t v) {
    for (std::size_t c = 0; c < parts; ++c) {
      if (mesh.vertex_semantics(v, c) > 0.5) return c;
    }
    throw std::invalid_argument("mesh vertex " + std::to_string(v) + " has no part label");
  };
  std::vector<std::size_t> labels;
  labels.reserve(mesh.triangles.size());
  for (const auto& tri : mesh.triangles) {
    const std::size_t a = label_of(tri[0]);
    const std::size_t b = label_of(tri[1]);
    const std::size_t c = label_of(tri[2]);
    labels.push_back((b == c && b != a) ? b : a);
  }
  return labels;
}

Array soft_rasterize(const Mesh& mesh, const Intrinsics& C, const RasterConfig& cfg) {
  Tape tape;
  const Var vertices = tape.constant(mesh.vertices);
  const Var uv = project(vertices, C);
  const Var depth = reshape(slice(vertices, 1, 2, 3), {mesh.vertices.dim(0)});
  const std::vector<std::size_t> labels = triangle_parts(mesh);
  return soft_rasterize(uv, depth, mesh.triangles, labels, mesh.vertex_semantics.dim(1) - 1, cfg).value();
}

Array hard_rasterize(const Mesh& mesh, const Intrinsics& C, std::size_t width, std::size_t height) {
  const Array uv = project(mesh.vertices, C);
  const std::vector<std::size_t> labels = triangle_parts(mesh);
  const std::size_t channels = mesh.vertex_semantics.dim(1);
  std::vector<double> zbuffer(width * height, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> owner(width * height, 0);
  for (std::size_t j = 0; j < mesh.triangles.size(); ++j) {
    const auto& tri = mesh.triangles[j];
    double x[3], y[3];
    double z = 0.0;
    for (int k = 0; k < 3; ++k) {
      x[k] = uv(tri[k], 0);
      y[k] = uv(tri[k], 1);
      z += mesh.vertices(tri[k], 2) / 3.0;
    }
    std::size_t x0, x1, y0, y1;
    if (!pixel_range(std::min({x[0], x[1], x[2]}), std::max({x[0], x[1], x[2]}), width, x0, x1)) continue;
    if (!pixel_range(std::min({y[0], y[1], y[2]}), std::max({y[0], y[1], y[2]}), height, y0, y1)) continue;
    for (std::size_t py = y0; py <= y1; ++py) {
      for (std::size_t px = x0; px <= x1; ++px) {
        const std::size_t p = py * width + px;
        if (z < zbuffer[p] && inside_triangle(static_cast<double>(px) + 0.5, static_cast<double>(py) + 0.5, x, y)) {
          zbuffer[p] = z;
          owner[p] = j;
        }
      }
    }
  }
  Array image(Shape{height, width, channels});
  for (std::size_t p = 0; p < width * height; ++p) {
    if (!std::isfinite(zbuffer[p])) continue;
    image[p * channels + labels[owner[p]]] = 1.0;
    image[p * channels + channels - 1] = 1.0;
  }
  return image;
}

Var keypoint_loss(const Var& joints, const Observation& obs) {
  const std::size_t n = joints.value().dim(0);
  if (obs.keypoints.shape() != Shape{n, 2} || obs.confidences.shape() != Shape{n}) {
    throw ShapeError("keypoint_loss", "observation has " + shape_string(obs.keypoints.shape()) + " keypoints for " +
                                          std::to_string(n) + " joints");
  }
  Tape& tape = joints.tape();
  const Var residual = project(joints, obs.crop_intrinsics) - tape.constant(obs.keypoints);
  return sum(norm_rows(residual) * tape.constant(obs.confidences)) * (1.0 / static_cast<double>(n));
}

Var keypoint_loss(const Skeleton& skeleton, const Var& state, const Observation& obs) {
  return keypoint_loss(pose_joints(skeleton, state), obs);
}

Var part_loss(const Var& vertices, const MeshTemplate& tpl, const Observation& obs, const RasterConfig& cfg) {
  const std::size_t channels = tpl.vertex_semantics.dim(1);
  if (obs.part_map.shape() != Shape{cfg.height, cfg.width, channels}) {
    throw ShapeError("part_loss", "part map " + shape_string(obs.part_map.shape()) + " vs raster " +
                                      shape_string({cfg.height, cfg.width, channels}));
  }
  Tape& tape = vertices.tape();
  const Var uv = project(vertices, obs.raster_intrinsics());
  const Var depth = reshape(slice(vertices, 1, 2, 3), {vertices.value().dim(0)});
  const Var image = soft_rasterize(uv, depth, tpl.triangles, tpl.triangle_part, channels - 1, cfg);
  return sum(abs(image - tape.constant(obs.part_map))) * (1.0 / static_cast<double>(cfg.width * cfg.height));
}

Var part_loss(const Skeleton& skeleton, const Var& state, const Observation& obs, const RasterConfig& cfg) {
  return part_loss(pose_vertices(skeleton, state), mesh_template(skeleton), obs, cfg);
}

Var fs_loss(const Skeleton& skeleton, const Var& state, const Observation& obs, const LossWeights& weights) {
  Tape& tape = state.tape();
  const bool use_mesh = obs.gt_vertices.has_value() && weights.lambda_m != 0.0;
  const bool use_joints = obs.gt_joints.has_value() && weights.lambda_3d != 0.0;
  Var loss = tape.constant(0.0);
  if (!use_mesh && !use_joints) return loss;
  const PosedBody body = pose_body(skeleton, state, use_mesh);
  if (use_mesh) {
    if (obs.gt_vertices->shape() != body.vertices.shape()) throw ShapeError("fs_loss", "ground-truth vertex count");
    loss = loss + mean(norm_rows(body.vertices - tape.constant(*obs.gt_vertices))) * weights.lambda_m;
  }
  if (use_joints) {
    if (obs.gt_joints->shape() != body.joints.shape()) throw ShapeError("fs_loss", "ground-truth joint count");
    loss = loss + mean(norm_rows(body.joints - tape.constant(*obs.gt_joints))) * weights.lambda_3d;
  }
  return loss;
}

LossBreakdown values(const UnitLossTerms& terms) {
  return {terms.total.item(), terms.keypoint.item(), terms.part.item(), terms.prior.item()};
}

UnitLossTerms unit_loss(const Skeleton& skeleton, const Var& state, const Observation& obs, const LossWeights& weights,
                        const RasterConfig& cfg) {
  Tape& tape = state.tape();
  const bool use_parts = weights.lambda_b != 0.0;
  const PosedBody body = pose_body(skeleton, state, use_parts);
  UnitLossTerms terms;
  terms.keypoint = keypoint_loss(body.joints, obs) * weights.lambda_k;
  terms.part = use_parts ? part_loss(body.vertices, mesh_template(skeleton), obs, cfg) * weights.lambda_b : tape.constant(0.0);
  terms.prior = prior_loss(skeleton, state) * weights.lambda_prior;
  terms.total = terms.keypoint + terms.part + terms.prior;
  return terms;
}

LossBreakdown unit_loss(const Skeleton& skeleton, const ModelState& state, const Observation& obs,
                        const LossWeights& weights, const RasterConfig& cfg) {
  Tape tape;
  return values(unit_loss(skeleton, tape.constant(state.pack()), obs, weights, cfg));
}

double fs_loss(const Skeleton& skeleton, const ModelState& state, const Observation& obs, const LossWeights& weights) {
  Tape tape;
  return fs_loss(skeleton, tape.constant(state.pack()), obs, weights).item();
}

}  // namespace neural_descent
