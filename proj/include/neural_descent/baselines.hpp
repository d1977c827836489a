#pragma once

// Classical fitting baselines over the unit loss, and pose error metrics.

#include "neural_descent/bodymodel.hpp"
#include "neural_descent/hund.hpp"
#include "neural_descent/renderloss.hpp"

#include <Eigen/Core>

#include <functional>
#include <string_view>
#include <vector>

namespace neural_descent {

enum class Termination { max_iters, converged, non_finite, line_search_failed };

std::string_view to_string(Termination reason);

/// Returns f(x) and writes the gradient. A thrown std::domain_error counts as an
/// evaluation with value +inf.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct VectorTrace {
  std::vector<Eigen::VectorXd> iterates;
  std::vector<double> losses;
  std::vector<std::size_t> evals;  ///< cumulative objective calls when the iterate was accepted
  Termination reason = Termination::max_iters;
};

struct BfgsConfig {
  std::size_t max_iters = 200;
  double grad_tol = 1e-6;  ///< on the max-norm of the gradient
  double c1 = 1e-4;
  double c2 = 0.9;
  std::size_t max_probes = 30;
  double curvature_eps = 1e-10;

  void validate() const;
};

VectorTrace minimize_gd(const Objective& f, const Eigen::VectorXd& x0, std::size_t steps, double step_size);

/// Dense inverse-Hessian BFGS with a strong-Wolfe bracketing line search.
VectorTrace minimize_bfgs(const Objective& f, const Eigen::VectorXd& x0, const BfgsConfig& config);

struct OptimizerTrace {
  std::vector<ModelState> iterates;
  std::vector<LossBreakdown> losses;
  std::vector<std::size_t> evals;
  Termination reason = Termination::max_iters;
};

/// L_u and its state gradient as an Objective over the packed state.
Objective unit_objective(const Skeleton& skeleton, const Observation& obs, const LossWeights& weights,
                         const RasterConfig& cfg);

/// Rest pose at t = [0, 0, 3].
ModelState apose(const Skeleton& skeleton);

OptimizerTrace fit_gd(const Skeleton& skeleton, const Observation& obs, const ModelState& init,
                      const LossWeights& weights, const RasterConfig& cfg, std::size_t steps, double step_size);

OptimizerTrace fit_bfgs(const Skeleton& skeleton, const Observation& obs, const ModelState& init,
                        const LossWeights& weights, const RasterConfig& cfg, const BfgsConfig& config);

/// `stages` refiner stages, then BFGS from the last state. config.max_iters = 0 skips BFGS.
OptimizerTrace fit_hybrid(const Skeleton& skeleton, const Observation& obs, const RefinerParams& params,
                          std::size_t stages, const LossWeights& weights, const RasterConfig& cfg,
                          const BfgsConfig& config);

/// Y ~ scale * rotation * X + translation.
struct Similarity {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// Least-squares similarity between N x 3 point sets, rotation kept proper.
Similarity procrustes_align(const Array& X, const Array& Y);

/// Millimetres, from joint positions in metres.
struct PoseErrors {
  double mpjpe = 0.0;
  double mpjpe_pa = 0.0;
  double mpjpe_trans = 0.0;
};

PoseErrors pose_errors(const Array& pred_joints, const Array& gt_joints);

}  // namespace neural_descent
