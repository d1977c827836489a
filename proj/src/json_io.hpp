#pragma once

// JSON forms shared by checkpoints and dataset files.

#include "neural_descent/bodymodel.hpp"
#include "neural_descent/camera.hpp"

#include <json.hpp>

namespace neural_descent::json_io {

inline nlohmann::json to_json(const Skeleton& s) {
  return {{"parent", s.parent},
          {"rest_offsets", s.rest_offsets.storage()},
          {"part_of_joint", s.part_of_joint},
          {"girth", s.girth},
          {"shape_dims", s.shape_dims()},
          {"shape_basis_seed", s.shape_basis_seed}};
}

inline Skeleton skeleton_from_json(const nlohmann::json& j) {
  Skeleton s;
  s.parent = j.at("parent").get<std::vector<std::size_t>>();
  const std::size_t J = s.parent.size();
  s.rest_offsets = Array(Shape{J, 3}, j.at("rest_offsets").get<std::vector<double>>());
  s.part_of_joint = j.at("part_of_joint").get<std::vector<std::size_t>>();
  s.girth = j.at("girth").get<double>();
  s.shape_basis_seed = j.at("shape_basis_seed").get<std::uint64_t>();
  s.shape_basis = make_shape_basis(J, j.at("shape_dims").get<std::size_t>(), s.shape_basis_seed);
  s.validate();
  return s;
}

inline nlohmann::json to_json(const Intrinsics& c) { return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}}; }

inline Intrinsics intrinsics_from_json(const nlohmann::json& j) {
  return {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(), j.at("cy").get<double>()};
}

inline nlohmann::json to_json(const CropSpec& c) {
  return {{"x0", c.x0}, {"y0", c.y0}, {"w", c.w}, {"h", c.h}, {"out", c.out}};
}

inline CropSpec crop_from_json(const nlohmann::json& j) {
  return {j.at("x0").get<double>(), j.at("y0").get<double>(), j.at("w").get<double>(), j.at("h").get<double>(),
          j.at("out").get<double>()};
}

inline nlohmann::json to_json(const ModelState& s) {
  return {{"theta", s.theta}, {"beta", s.beta}, {"r", s.r}, {"t", s.t}};
}

inline ModelState state_from_json(const nlohmann::json& j) {
  ModelState s;
  s.theta = j.at("theta").get<std::vector<double>>();
  s.beta = j.at("beta").get<std::vector<double>>();
  s.r = j.at("r").get<std::array<double, 6>>();
  s.t = j.at("t").get<std::array<double, 3>>();
  return s;
}

/// Rows of an N x k array as nested lists.
inline nlohmann::json rows_to_json(const Array& a) {
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t k = 0; k < a.dim(1); ++k) row.push_back(a(i, k));
    out.push_back(std::move(row));
  }
  return out;
}

inline Array rows_from_json(const nlohmann::json& j, std::size_t cols) {
  Array a(Shape{j.size(), cols});
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != cols) throw std::runtime_error("expected rows of length " + std::to_string(cols));
    for (std::size_t k = 0; k < cols; ++k) a(i, k) = j[i][k].get<double>();
  }
  return a;
}

}  // namespace neural_descent::json_io
