#include "neural_descent/baselines.hpp"

#include "test_support.hpp"

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace neural_descent;
using test_support::observe;
using test_support::random_visible_state;

namespace {

Objective quadratic(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, std::size_t* calls = nullptr) {
  return [A, b, calls](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    if (calls) ++*calls;
    g = A * x - b;
    return 0.5 * x.dot(A * x) - b.dot(x);
  };
}

Array random_points(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> N(0.0, scale);
  Array a(Shape{n, 3});
  for (double& v : a.values()) v = N(rng);
  return a;
}

Array transform(const Array& X, double s, const Eigen::Matrix3d& R, const Eigen::Vector3d& t) {
  Array Y(X.shape());
  for (std::size_t i = 0; i < X.dim(0); ++i) {
    const Eigen::Vector3d y = s * R * Eigen::Vector3d(X(i, 0), X(i, 1), X(i, 2)) + t;
    for (int k = 0; k < 3; ++k) Y(i, static_cast<std::size_t>(k)) = y(k);
  }
  return Y;
}

double residual(const Array& X, const Array& Y) {
  const Similarity a = procrustes_align(X, Y);
  const Array Z = transform(X, a.scale, a.rotation, a.translation);
  double r = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) r += (Z[i] - Y[i]) * (Z[i] - Y[i]);
  return r;
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> N;
  return Eigen::Quaterniond(N(rng), N(rng), N(rng), N(rng)).normalized().toRotationMatrix();
}

ModelState zero_pose_state(const Skeleton& s, std::uint64_t seed) {
  ModelState st = random_visible_state(s, seed);
  std::fill(st.theta.begin(), st.theta.end(), 0.0);
  std::fill(st.beta.begin(), st.beta.end(), 0.0);
  return st;
}

const LossWeights kKeypointPrior{1.0, 0.0, 1.0, 1.0, 1.0};

}  // namespace

TEST(GradientDescent, ZeroStepsAndContraction) {
  const Eigen::VectorXd target = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  const Objective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    g = 2.0 * (x - target);
    return (x - target).squaredNorm();
  };
  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(5, 3.0);
  const VectorTrace none = minimize_gd(f, x0, 0, 0.1);
  ASSERT_EQ(none.iterates.size(), 1u);
  EXPECT_EQ(none.iterates[0], x0);

  for (double step : {0.1, 0.3, 0.8}) {
    const VectorTrace t = minimize_gd(f, x0, 10, step);
    ASSERT_EQ(t.iterates.size(), 11u);
    for (std::size_t k = 1; k < t.iterates.size(); ++k) {
      const double ratio = (t.iterates[k] - target).norm() / (t.iterates[k - 1] - target).norm();
      EXPECT_NEAR(ratio, std::abs(1.0 - 2.0 * step), 1e-12);
      EXPECT_EQ(t.evals[k], k + 1);
    }
  }
}

TEST(GradientDescent, SmallStepDescendsOnUnitLoss) {
  const Skeleton s = Skeleton::humanoid17();
  const Observation obs = observe(s, random_visible_state(s, 3), 32);
  const ModelState init = random_visible_state(s, 4);
  // Keypoint loss is in squared pixels; rescale so a 1e-3 step is small.
  const LossWeights w{1e-4, 0.0, 1.0, 1.0, 1e-4};
  const OptimizerTrace t = fit_gd(s, obs, init, w, {.width = 32, .height = 32}, 50, 1e-3);
  ASSERT_EQ(t.iterates.size(), 51u);
  for (std::size_t k = 1; k < t.losses.size(); ++k) EXPECT_LE(t.losses[k].total, t.losses[k - 1].total);
  EXPECT_LT(t.losses.back().total, t.losses.front().total);
}

TEST(Bfgs, QuadraticConvergesQuickly) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N;
  Eigen::MatrixXd M(8, 8);
  for (auto& v : M.reshaped()) v = N(rng);
  const Eigen::MatrixXd A = M * M.transpose() + Eigen::MatrixXd::Identity(8, 8);
  Eigen::VectorXd b(8);
  for (auto& v : b) v = N(rng);
  std::size_t calls = 0;
  BfgsConfig cfg;
  cfg.grad_tol = 1e-8;
  // Finite termination needs near-exact line searches.
  cfg.c2 = 0.1;
  const VectorTrace t = minimize_bfgs(quadratic(A, b, &calls), Eigen::VectorXd::Zero(8), cfg);
  EXPECT_EQ(t.reason, Termination::converged);
  EXPECT_LE(t.iterates.size() - 1, 20u);
  cfg.c2 = 0.9;
  EXPECT_LE(minimize_bfgs(quadratic(A, b), Eigen::VectorXd::Zero(8), cfg).iterates.size() - 1, 40u);
  EXPECT_LT((A * t.iterates.back() - b).lpNorm<Eigen::Infinity>(), 1e-8);
  EXPECT_EQ(t.evals.back(), calls);
  for (std::size_t k = 1; k < t.losses.size(); ++k) {
    EXPECT_LE(t.losses[k], t.losses[k - 1]);
    EXPECT_GT(t.evals[k], t.evals[k - 1]);
  }
}

TEST(Bfgs, Rosenbrock) {
  const Objective f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const double a = 1.0 - x(0);
    const double b = x(1) - x(0) * x(0);
    g.resize(2);
    g(0) = -2.0 * a - 400.0 * x(0) * b;
    g(1) = 200.0 * b;
    return a * a + 100.0 * b * b;
  };
  BfgsConfig cfg;
  cfg.grad_tol = 1e-10;
  const VectorTrace t = minimize_bfgs(f, Eigen::Vector2d(-1.2, 1.0), cfg);
  EXPECT_EQ(t.reason, Termination::converged);
  EXPECT_NEAR(t.iterates.back()(0), 1.0, 1e-6);
  EXPECT_NEAR(t.iterates.back()(1), 1.0, 1e-6);
  for (std::size_t k = 1; k < t.losses.size(); ++k) EXPECT_LE(t.losses[k], t.losses[k - 1]);
}

TEST(Bfgs, RejectsBadConfigAndStopsOnFailure) {
  BfgsConfig cfg;
  cfg.max_iters = 0;
  const Objective f = quadratic(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2));
  EXPECT_THROW(minimize_bfgs(f, Eigen::VectorXd::Ones(2), cfg), std::invalid_argument);
  cfg.max_iters = 10;
  cfg.c2 = 1e-5;
  EXPECT_THROW(minimize_bfgs(f, Eigen::VectorXd::Ones(2), cfg), std::invalid_argument);

  // Every probe off the start point fails.
  const Objective wall = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    if (x(0) != 1.0) throw std::domain_error("wall");
    g = Eigen::VectorXd::Ones(2);
    return 1.0;
  };
  const VectorTrace t = minimize_bfgs(wall, Eigen::VectorXd::Ones(2), BfgsConfig{});
  EXPECT_EQ(t.reason, Termination::line_search_failed);
  EXPECT_EQ(t.iterates.size(), 1u);
  EXPECT_EQ(t.evals.back(), 1u);
}

TEST(FitBfgs, GroundTruthIsStationary) {
  const Skeleton s = Skeleton::humanoid17();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ModelState gt = zero_pose_state(s, seed);
    const Observation obs = observe(s, gt, 32);
    const OptimizerTrace t = fit_bfgs(s, obs, gt, kKeypointPrior, {.width = 32, .height = 32}, {});
    EXPECT_EQ(t.reason, Termination::converged);
    ASSERT_EQ(t.iterates.size(), 1u);
    EXPECT_EQ(t.evals.back(), 1u);
    EXPECT_LT(pose_errors(pose_joints(s, t.iterates.back()), *obs.gt_joints).mpjpe, 1e-3);
  }
}

TEST(FitBfgs, DescendsFromApose) {
  const Skeleton s = Skeleton::humanoid17();
  const Observation obs = observe(s, random_visible_state(s, 7), 32);
  BfgsConfig cfg;
  cfg.max_iters = 40;
  const OptimizerTrace t = fit_bfgs(s, obs, apose(s), kKeypointPrior, {.width = 32, .height = 32}, cfg);
  ASSERT_GT(t.iterates.size(), 10u);
  EXPECT_EQ(t.iterates.size(), t.losses.size());
  EXPECT_EQ(t.iterates.size(), t.evals.size());
  for (std::size_t k = 1; k < t.losses.size(); ++k) {
    EXPECT_LE(t.losses[k].total, t.losses[k - 1].total);
    EXPECT_GT(t.evals[k], t.evals[k - 1]);
    const LossBreakdown again = unit_loss(s, t.iterates[k], obs, kKeypointPrior, {.width = 32, .height = 32});
    EXPECT_EQ(again.total, t.losses[k].total);
  }
  EXPECT_LT(t.losses.back().total, 0.2 * t.losses.front().total);
  EXPECT_LT(t.losses.back().keypoint, 0.1 * t.losses.front().keypoint);
}

TEST(FitBfgs, CountsMatchHook) {
  const Skeleton s = Skeleton::humanoid17();
  const Observation obs = observe(s, random_visible_state(s, 8), 32);
  const Objective inner = unit_objective(s, obs, kKeypointPrior, {.width = 32, .height = 32});
  std::size_t calls = 0;
  const Objective counted = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    ++calls;
    return inner(x, g);
  };
  BfgsConfig cfg;
  cfg.max_iters = 25;
  const VectorTrace t = minimize_bfgs(counted, Eigen::Map<const Eigen::VectorXd>(apose(s).pack().data(), 61), cfg);
  EXPECT_EQ(t.evals.back(), calls);
  EXPECT_GE(calls, t.iterates.size());
}

TEST(Hybrid, DegenerateCasesAndNoWorseThanRefiner) {
  const Skeleton s = Skeleton::humanoid17();
  const RefinerParams p = init_params(RefinerShape::for_skeleton(s), 3);
  RefinerParams moving = p;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.01, 0.01);
  for (double& v : moving.out_w.values()) v = u(rng);
  const RasterConfig cfg{.width = 32, .height = 32};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Observation obs = observe(s, random_visible_state(s, 20 + seed), 32);
    BfgsConfig none;
    none.max_iters = 0;
    const OptimizerTrace alone = fit_hybrid(s, obs, moving, 5, kKeypointPrior, cfg, none);
    const Trajectory traj = unroll(obs, moving, s, 5, kKeypointPrior, cfg);
    ASSERT_EQ(alone.iterates, traj.states);
    EXPECT_EQ(alone.evals.back(), traj.eval_count);

    BfgsConfig some;
    some.max_iters = 10;
    const OptimizerTrace h0 = fit_hybrid(s, obs, moving, 0, kKeypointPrior, cfg, some);
    EXPECT_EQ(h0.iterates.front(), encode_context(obs, moving, s).initial_state);
    const OptimizerTrace h5 = fit_hybrid(s, obs, moving, 5, kKeypointPrior, cfg, some);
    EXPECT_LE(h5.losses.back().total, alone.losses.back().total + 1e-12);
    EXPECT_GT(h5.evals.back(), 6u);
    for (std::size_t k = 1; k < h5.evals.size(); ++k) EXPECT_GT(h5.evals[k], h5.evals[k - 1]);
  }
  EXPECT_THROW(fit_hybrid(s, observe(s, random_visible_state(s, 1), 32), p, 6, kKeypointPrior, cfg, {}),
               std::invalid_argument);
}

TEST(Procrustes, Examples) {
  std::mt19937_64 rng(2);
  const Array X = random_points(rng, 17);
  const Similarity id = procrustes_align(X, X);
  EXPECT_NEAR(id.scale, 1.0, 1e-12);
  EXPECT_LT((id.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-12);
  EXPECT_LT(id.translation.norm(), 1e-12);
  EXPECT_LT(residual(X, X), 1e-20);

  const Eigen::Matrix3d R90 = Eigen::AngleAxisd(M_PI / 2, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const Eigen::Vector3d t0(0.3, -1.0, 2.0);
  const Similarity got = procrustes_align(X, transform(X, 2.0, R90, t0));
  EXPECT_NEAR(got.scale, 2.0, 1e-9);
  EXPECT_LT((got.rotation - R90).norm(), 1e-9);
  EXPECT_LT((got.translation - t0).norm(), 1e-9);

  Array mirror = X;
  for (std::size_t i = 0; i < X.dim(0); ++i) mirror(i, 0) = -X(i, 0);
  const Similarity m = procrustes_align(X, mirror);
  EXPECT_NEAR(m.rotation.determinant(), 1.0, 1e-12);
  EXPECT_GT(residual(X, mirror), 1e-3);

  Array line(Shape{5, 3});
  for (std::size_t i = 0; i < 5; ++i) line(i, 0) = static_cast<double>(i);
  EXPECT_THROW(procrustes_align(line, X), ShapeError);
  EXPECT_THROW(procrustes_align(line, line), std::invalid_argument);
  EXPECT_THROW(procrustes_align(Array(Shape{2, 3}), Array(Shape{2, 3})), std::invalid_argument);
}

TEST(Procrustes, MatchesUmeyamaAndIsInvariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Array X = random_points(rng, 17);
    const Array Y = random_points(rng, 17);
    const Similarity a = procrustes_align(X, Y);

    Eigen::Matrix<double, 3, Eigen::Dynamic> src(3, 17), dst(3, 17);
    for (Eigen::Index i = 0; i < 17; ++i)
      for (Eigen::Index k = 0; k < 3; ++k) {
        src(k, i) = X(static_cast<std::size_t>(i), static_cast<std::size_t>(k));
        dst(k, i) = Y(static_cast<std::size_t>(i), static_cast<std::size_t>(k));
      }
    const Eigen::Matrix4d T = Eigen::umeyama(src, dst, true);
    EXPECT_LT((a.scale * a.rotation - T.topLeftCorner<3, 3>()).norm(), 1e-9);
    EXPECT_LT((a.translation - T.topRightCorner<3, 1>()).norm(), 1e-9);

    const Array X2 = transform(X, u(rng), random_rotation(rng), Eigen::Vector3d::Random());
    EXPECT_NEAR(residual(X2, Y), residual(X, Y), 1e-9);
  }
}

TEST(Metrics, Examples) {
  const Skeleton s = Skeleton::humanoid17();
  const Array gt = pose_joints(s, random_visible_state(s, 1));
  const PoseErrors zero = pose_errors(gt, gt);
  EXPECT_NEAR(zero.mpjpe, 0.0, 1e-12);
  EXPECT_NEAR(zero.mpjpe_pa, 0.0, 1e-9);
  EXPECT_EQ(zero.mpjpe_trans, 0.0);

  Array shifted = gt;
  for (std::size_t j = 0; j < gt.dim(0); ++j) shifted(j, 0) += 0.010;
  const PoseErrors e = pose_errors(shifted, gt);
  EXPECT_NEAR(e.mpjpe, 10.0, 1e-9);
  EXPECT_NEAR(e.mpjpe_trans, 10.0, 1e-9);
  EXPECT_NEAR(e.mpjpe_pa, 0.0, 1e-9);
  EXPECT_THROW(pose_errors(gt, Array(Shape{16, 3})), ShapeError);
}

TEST(Metrics, AlignedNeverWorseOnRandomPairs) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const Array X = random_points(rng, 17, 0.5);
    const Array Y = random_points(rng, 17, 0.5);
    const PoseErrors e = pose_errors(X, Y);
    EXPECT_LE(e.mpjpe_pa, e.mpjpe);
  }
}
