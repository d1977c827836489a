#include "neural_descent/baselines.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>

namespace neural_descent {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Wraps an objective so every call is counted and failures read as +inf.
class CountedObjective {
 public:
  explicit CountedObjective(const Objective& f) : f_(f) {}

  double operator()(const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
    ++calls_;
    grad.resize(x.size());
    try {
      const double v = f_(x, grad);
      if (!std::isfinite(v) || !grad.allFinite()) return kInf;
      return v;
    } catch (const std::domain_error&) {
      return kInf;
    }
  }

  std::size_t calls() const { return calls_; }

 private:
  const Objective& f_;
  std::size_t calls_ = 0;
};

struct Probe {
  double alpha = 0.0;
  double value = 0.0;
  double slope = 0.0;
  Eigen::VectorXd x;
  Eigen::VectorXd grad;
};

class LineSearch {
 public:
  LineSearch(CountedObjective& f, const BfgsConfig& cfg, const Eigen::VectorXd& x, double fx,
             const Eigen::VectorXd& g, const Eigen::VectorXd& p)
      : f_(f), cfg_(cfg), x_(x), p_(p), f0_(fx), d0_(g.dot(p)) {
    start_.alpha = 0.0;
    start_.value = fx;
    start_.slope = d0_;
    start_.x = x;
    start_.grad = g;
  }

  std::optional<Probe> run(double alpha) {
    Probe prev = start_;
    for (bool first = true; probes_ < cfg_.max_probes; first = false) {
      Probe cur = probe(alpha);
      if (!std::isfinite(cur.value) || cur.value > armijo(cur.alpha) || (!first && cur.value >= prev.value)) {
        return zoom(prev, cur);
      }
      if (std::abs(cur.slope) <= -cfg_.c2 * d0_) return cur;
      if (cur.slope >= 0.0) return zoom(cur, prev);
      prev = std::move(cur);
      alpha *= 2.0;
    }
    return std::nullopt;
  }

 private:
  double armijo(double alpha) const { return f0_ + cfg_.c1 * alpha * d0_; }

  Probe probe(double alpha) {
    ++probes_;
    Probe p;
    p.alpha = alpha;
    p.x = x_ + alpha * p_;
    p.value = f_(p.x, p.grad);
    p.slope = std::isfinite(p.value) ? p.grad.dot(p_) : kInf;
    return p;
  }

  // Quadratic through lo (value, slope) and hi (value), kept inside the middle 80%.
  static double trial(const Probe& lo, const Probe& hi) {
    const double d = hi.alpha - lo.alpha;
    const double mid = lo.alpha + 0.5 * d;
    if (!std::isfinite(hi.value)) return mid;
    const double denom = 2.0 * (hi.value - lo.value - lo.slope * d);
    if (denom <= 0.0) return mid;
    const double a = lo.alpha - lo.slope * d * d / denom;
    const double a_min = std::min(lo.alpha, hi.alpha) + 0.1 * std::abs(d);
    const double a_max = std::max(lo.alpha, hi.alpha) - 0.1 * std::abs(d);
    return std::isfinite(a) && a >= a_min && a <= a_max ? a : mid;
  }

  std::optional<Probe> zoom(Probe lo, Probe hi) {
    while (probes_ < cfg_.max_probes) {
      Probe cur = probe(trial(lo, hi));
      if (!std::isfinite(cur.value) || cur.value > armijo(cur.alpha) || cur.value >= lo.value) {
        hi = std::move(cur);
        continue;
      }
      if (std::abs(cur.slope) <= -cfg_.c2 * d0_) return cur;
      if (cur.slope * (hi.alpha - lo.alpha) >= 0.0) hi = std::move(lo);
      lo = std::move(cur);
    }
    return std::nullopt;
  }

  CountedObjective& f_;
  const BfgsConfig& cfg_;
  const Eigen::VectorXd& x_;
  const Eigen::VectorXd& p_;
  double f0_;
  double d0_;
  Probe start_;
  std::size_t probes_ = 0;
};

void record(VectorTrace& trace, const Eigen::VectorXd& x, double fx, std::size_t evals) {
  trace.iterates.push_back(x);
  trace.losses.push_back(fx);
  trace.evals.push_back(evals);
}

Eigen::VectorXd to_eigen(const Array& a) { return Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size())); }

LossBreakdown evaluate_unit(const Skeleton& skeleton, const Observation& obs, const LossWeights& weights,
                            const RasterConfig& cfg, const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
  Tape tape;
  const Var s = tape.variable(Array::vector(std::vector<double>(x.data(), x.data() + x.size())));
  const UnitLossTerms terms = unit_loss(skeleton, s, obs, weights, cfg);
  grad = to_eigen(tape.gradient(terms.total, {s})[0]);
  return values(terms);
}

// Runs a vector minimizer on L_u and maps the accepted iterates back to states.
OptimizerTrace fit_unit(const Skeleton& skeleton, const Observation& obs, const ModelState& init,
                        const LossWeights& weights, const RasterConfig& cfg,
                        const std::function<VectorTrace(const Objective&, const Eigen::VectorXd&)>& minimize) {
  std::vector<std::pair<Eigen::VectorXd, LossBreakdown>> seen;
  const Objective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
    const LossBreakdown b = evaluate_unit(skeleton, obs, weights, cfg, x, grad);
    seen.emplace_back(x, b);
    return b.total;
  };
  const VectorTrace vt = minimize(f, to_eigen(init.pack()));
  OptimizerTrace out;
  out.reason = vt.reason;
  out.evals = vt.evals;
  for (const Eigen::VectorXd& x : vt.iterates) {
    out.iterates.push_back(ModelState::unpack(skeleton, std::span<const double>(x.data(), static_cast<std::size_t>(x.size()))));
    auto it = std::find_if(seen.rbegin(), seen.rend(), [&](const auto& e) { return e.first == x; });
    out.losses.push_back(it->second);
  }
  return out;
}

}  // namespace

std::string_view to_string(Termination reason) {
  switch (reason) {
    case Termination::max_iters: return "max_iters";
    case Termination::converged: return "converged";
    case Termination::non_finite: return "non_finite";
    case Termination::line_search_failed: return "line_search_failed";
  }
  return "unknown";
}

void BfgsConfig::validate() const {
  if (!(grad_tol >= 0.0)) throw std::invalid_argument("bfgs: grad_tol must be >= 0");
  if (!(c1 > 0.0 && c1 < c2 && c2 < 1.0)) throw std::invalid_argument("bfgs: need 0 < c1 < c2 < 1");
  if (max_probes == 0) throw std::invalid_argument("bfgs: max_probes must be >= 1");
}

VectorTrace minimize_gd(const Objective& f, const Eigen::VectorXd& x0, std::size_t steps, double step_size) {
  CountedObjective eval(f);
  VectorTrace trace;
  Eigen::VectorXd x = x0;
  Eigen::VectorXd g;
  double fx = eval(x, g);
  if (!std::isfinite(fx)) {
    trace.reason = Termination::non_finite;
    return trace;
  }
  record(trace, x, fx, eval.calls());
  for (std::size_t k = 0; k < steps; ++k) {
    x -= step_size * g;
    fx = eval(x, g);
    if (!std::isfinite(fx)) {
      trace.reason = Termination::non_finite;
      return trace;
    }
    record(trace, x, fx, eval.calls());
  }
  trace.reason = Termination::max_iters;
  return trace;
}

VectorTrace minimize_bfgs(const Objective& f, const Eigen::VectorXd& x0, const BfgsConfig& config) {
  config.validate();
  if (config.max_iters == 0) throw std::invalid_argument("bfgs: max_iters must be >= 1");
  CountedObjective eval(f);
  VectorTrace trace;
  Eigen::VectorXd x = x0;
  Eigen::VectorXd g;
  double fx = eval(x, g);
  if (!std::isfinite(fx)) {
    trace.reason = Termination::non_finite;
    return trace;
  }
  record(trace, x, fx, eval.calls());

  const auto n = x.size();
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  trace.reason = Termination::max_iters;
  for (std::size_t iter = 0; iter < config.max_iters; ++iter) {
    if (g.lpNorm<Eigen::Infinity>() < config.grad_tol) {
      trace.reason = Termination::converged;
      break;
    }
    Eigen::VectorXd p = -H * g;
    if (!(g.dot(p) < 0.0)) {
      H.setIdentity();
      p = -g;
    }
    const double alpha0 = iter == 0 ? std::min(1.0, 1.0 / g.norm()) : 1.0;
    LineSearch search(eval, config, x, fx, g, p);
    std::optional<Probe> step = search.run(alpha0);
    if (!step) {
      trace.reason = Termination::line_search_failed;
      break;
    }
    const Eigen::VectorXd s = step->x - x;
    const Eigen::VectorXd y = step->grad - g;
    const double sy = s.dot(y);
    if (sy > config.curvature_eps) {
      if (iter == 0) H *= sy / y.squaredNorm();
      const double rho = 1.0 / sy;
      const Eigen::VectorXd Hy = H * y;
      // (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded.
      H += (rho * rho * y.dot(Hy) + rho) * (s * s.transpose()) - rho * (Hy * s.transpose() + s * Hy.transpose());
    }
    x = std::move(step->x);
    g = std::move(step->grad);
    fx = step->value;
    record(trace, x, fx, eval.calls());
  }
  if (trace.reason == Termination::max_iters && g.lpNorm<Eigen::Infinity>() < config.grad_tol) {
    trace.reason = Termination::converged;
  }
  return trace;
}

Objective unit_objective(const Skeleton& skeleton, const Observation& obs, const LossWeights& weights,
                         const RasterConfig& cfg) {
  return [&skeleton, &obs, weights, cfg](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
    return evaluate_unit(skeleton, obs, weights, cfg, x, grad).total;
  };
}

ModelState apose(const Skeleton& skeleton) { return ModelState::rest(skeleton, {0.0, 0.0, 3.0}); }

OptimizerTrace fit_gd(const Skeleton& skeleton, const Observation& obs, const ModelState& init,
                      const LossWeights& weights, const RasterConfig& cfg, std::size_t steps, double step_size) {
  return fit_unit(skeleton, obs, init, weights, cfg, [&](const Objective& f, const Eigen::VectorXd& x0) {
    return minimize_gd(f, x0, steps, step_size);
  });
}

OptimizerTrace fit_bfgs(const Skeleton& skeleton, const Observation& obs, const ModelState& init,
                        const LossWeights& weights, const RasterConfig& cfg, const BfgsConfig& config) {
  return fit_unit(skeleton, obs, init, weights, cfg, [&](const Objective& f, const Eigen::VectorXd& x0) {
    return minimize_bfgs(f, x0, config);
  });
}

OptimizerTrace fit_hybrid(const Skeleton& skeleton, const Observation& obs, const RefinerParams& params,
                          std::size_t stages, const LossWeights& weights, const RasterConfig& cfg,
                          const BfgsConfig& config) {
  if (stages > params.shape.stages) throw std::invalid_argument("hybrid: more stages than the refiner was built for");
  OptimizerTrace out;
  if (stages == 0) {
    const ModelState s0 = encode_context(obs, params, skeleton).initial_state;
    out.iterates.push_back(s0);
    out.losses.push_back(unit_loss(skeleton, s0, obs, weights, cfg));
    out.evals.push_back(1);
  } else {
    Trajectory t = unroll(obs, params, skeleton, stages, weights, cfg);
    out.iterates = std::move(t.states);
    out.losses = std::move(t.losses);
    for (std::size_t i = 0; i < out.iterates.size(); ++i) out.evals.push_back(i + 1);
    if (t.truncated) {
      out.reason = Termination::non_finite;
      return out;
    }
  }
  out.reason = Termination::max_iters;
  if (config.max_iters == 0) return out;

  const OptimizerTrace tail = fit_bfgs(skeleton, obs, out.iterates.back(), weights, cfg, config);
  const std::size_t offset = out.evals.back();
  for (std::size_t k = 1; k < tail.iterates.size(); ++k) {
    out.iterates.push_back(tail.iterates[k]);
    out.losses.push_back(tail.losses[k]);
    out.evals.push_back(offset + tail.evals[k]);
  }
  out.reason = tail.reason;
  return out;
}

Similarity procrustes_align(const Array& X, const Array& Y) {
  if (X.ndim() != 2 || X.dim(1) != 3 || X.shape() != Y.shape()) throw ShapeError("procrustes", "expected matching N x 3 arrays");
  const auto n = static_cast<Eigen::Index>(X.dim(0));
  if (n < 3) throw std::invalid_argument("procrustes: need at least 3 points");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
  const Eigen::Map<const RowMat> x(X.data(), n, 3);
  const Eigen::Map<const RowMat> y(Y.data(), n, 3);
  const Eigen::RowVector3d mx = x.colwise().mean();
  const Eigen::RowVector3d my = y.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - mx;
  const Eigen::MatrixXd yc = y.rowwise() - my;

  const Eigen::JacobiSVD<Eigen::MatrixXd> spread(xc);
  const auto sv = spread.singularValues();
  if (!(sv(1) > 1e-12 * std::max(sv(0), 1e-300))) throw std::invalid_argument("procrustes: source points are degenerate");

  const Eigen::Matrix3d cov = yc.transpose() * xc / static_cast<double>(n);
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) d(2) = -1.0;
  Similarity out;
  out.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  const double var_x = xc.squaredNorm() / static_cast<double>(n);
  out.scale = svd.singularValues().dot(d) / var_x;
  out.translation = my.transpose() - out.scale * out.rotation * mx.transpose();
  return out;
}

PoseErrors pose_errors(const Array& pred_joints, const Array& gt_joints) {
  if (pred_joints.ndim() != 2 || pred_joints.dim(1) != 3 || pred_joints.shape() != gt_joints.shape()) {
    throw ShapeError("pose_errors", "expected matching J x 3 joint arrays");
  }
  const std::size_t J = pred_joints.dim(0);
  const Similarity a = procrustes_align(pred_joints, gt_joints);
  PoseErrors e;
  for (std::size_t j = 0; j < J; ++j) {
    const Eigen::Vector3d p(pred_joints(j, 0), pred_joints(j, 1), pred_joints(j, 2));
    const Eigen::Vector3d g(gt_joints(j, 0), gt_joints(j, 1), gt_joints(j, 2));
    e.mpjpe += (p - g).norm();
    e.mpjpe_pa += (a.scale * a.rotation * p + a.translation - g).norm();
    if (j == 0) e.mpjpe_trans = (p - g).norm();
  }
  e.mpjpe *= 1000.0 / static_cast<double>(J);
  e.mpjpe_pa *= 1000.0 / static_cast<double>(J);
  e.mpjpe_trans *= 1000.0;
  return e;
}

}  // namespace neural_descent
