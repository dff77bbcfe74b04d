#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "rkhs/solver.hpp"

using namespace rkhs;

namespace {

SampleSet random_sample(std::size_t n, std::uint64_t seed) {
  const EigenSpec spec = build_spec(0.5, 21);
  std::vector<double> g(21);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : g) v = normal(rng);
  return draw_sample(make_target(spec, 0.5, g, 0.5), n, seed + 1);
}

// Zooming box search: a dense grid over the box, then repeated shrinking
// around the incumbent.
double box_search(const std::function<double(const std::vector<double>&)>& f, std::size_t dim, double half_width,
                  int points_per_axis, int zooms) {
  std::vector<double> centre(dim, 0.0), best_x(dim, 0.0);
  double best = f(centre);
  double width = half_width;
  std::vector<double> x(dim);
  for (int z = 0; z < zooms; ++z) {
    std::vector<int> idx(dim, 0);
    while (true) {
      for (std::size_t d = 0; d < dim; ++d)
        x[d] = centre[d] + width * (2.0 * idx[d] / (points_per_axis - 1) - 1.0);
      const double v = f(x);
      if (v < best) {
        best = v;
        best_x = x;
      }
      std::size_t d = 0;
      while (d < dim && ++idx[d] == points_per_axis) idx[d++] = 0;
      if (d == dim) break;
    }
    centre = best_x;
    width *= 0.35;
  }
  return best;
}

}  // namespace

TEST(RidgeSolve, ScalarCase) {
  Eigen::MatrixXd g(1, 1);
  g << 1.0;
  Eigen::VectorXd y(1);
  y << 1.0;
  for (double eta : {1e-3, 0.5, 2.0, 100.0}) EXPECT_NEAR(ridge_solve(g, y, eta)[0], 1.0 / (1.0 + eta), 1e-14);
  EXPECT_THROW(ridge_solve(g, y, 0.0), PreconditionError);
}

TEST(RidgeSolve, LargePenaltyShrinks) {
  const EigenSpec spec = build_spec(0.5, 201);
  const SampleSet s = random_sample(40, 1);
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(s.ys.data(), 40);
  const Eigen::VectorXd alpha = ridge_solve(gram_matrix(spec, s.xs), y, 1e6);
  EXPECT_LE(alpha.norm(), 1e-5 * y.norm());
}

TEST(RidgeSolve, MatchesBoxSearch) {
  const EigenSpec spec = build_spec(0.5, 201);
  const SampleSet s = random_sample(5, 2);
  const Eigen::MatrixXd g = gram_matrix(spec, s.xs);
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(s.ys.data(), 5);
  const double eta = 0.05;
  auto objective = [&](const Eigen::VectorXd& a) {
    return (g * a - y).squaredNorm() / 5.0 + eta * a.dot(g * a);
  };
  RidgeSolveInfo info;
  const Eigen::VectorXd alpha = ridge_solve(g, y, eta, &info);
  EXPECT_LE(info.residual, kResidualTolerance);
  const double solved = objective(alpha);
  const double width = 2.0 * alpha.cwiseAbs().maxCoeff() + 1.0;
  const double searched = box_search(
      [&](const std::vector<double>& v) { return objective(Eigen::Map<const Eigen::VectorXd>(v.data(), 5)); }, 5,
      width, 9, 40);
  EXPECT_LE(solved, searched * (1 + 1e-12));
  EXPECT_NEAR(searched, solved, 1e-6 * solved);
}

TEST(RidgeSolve, RankDeficientGramUsesJitter) {
  Eigen::MatrixXd g = Eigen::MatrixXd::Ones(3, 3);
  Eigen::VectorXd y = Eigen::VectorXd::Ones(3);
  RidgeSolveInfo info;
  const Eigen::VectorXd alpha = ridge_solve(g, y, 1e-300, &info);
  EXPECT_GT(info.jitter, 0.0);
  EXPECT_TRUE(alpha.allFinite());
}

TEST(Frontier, ZeroResponses) {
  const EigenSpec spec = build_spec(0.5, 201);
  SampleSet s = random_sample(10, 3);
  std::fill(s.ys.begin(), s.ys.end(), 0.0);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  for (const auto& pt : f.points) {
    EXPECT_EQ(pt.alpha.norm(), 0.0);
    EXPECT_EQ(pt.norm, 0.0);
    EXPECT_EQ(pt.loss, 0.0);
  }
}

TEST(Frontier, EndpointsAndMonotonicity) {
  const EigenSpec spec = build_spec(0.5, 201);
  for (std::size_t n : {30u, 400u}) {
    const SampleSet s = random_sample(n, 4);
    const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
    double mean_y2 = 0.0;
    for (double y : s.ys) mean_y2 += y * y / static_cast<double>(n);
    EXPECT_LE(f.points.front().norm, 1e-6);
    EXPECT_NEAR(f.points.front().loss, mean_y2, 1e-5 * mean_y2);
    const auto m = f.points.size();
    EXPECT_LE(std::abs(f.points[m - 1].loss - f.points[m - 2].loss), 1e-6 * mean_y2);
    for (std::size_t k = 1; k < m; ++k) {
      EXPECT_LT(f.points[k].eta, f.points[k - 1].eta);
      EXPECT_GT(f.points[k].norm, f.points[k - 1].norm);
      EXPECT_LE(f.points[k].loss, f.points[k - 1].loss + 1e-10 * std::max(1.0, f.points[k - 1].loss));
      EXPECT_LE(f.points[k].residual, kResidualTolerance);
    }
  }
}

TEST(Frontier, RejectsBadGrids) {
  const EigenSpec spec = build_spec(0.5, 21);
  const auto system = make_ridge_system(spec, random_sample(10, 5));
  EXPECT_THROW(build_frontier(system, log_grid(1.0, 0.5, 10)), PreconditionError);
  auto grid = default_eta_grid();
  grid[5] *= 1.01;
  EXPECT_THROW(build_frontier(system, grid), PreconditionError);
  auto increasing = default_eta_grid();
  std::reverse(increasing.begin(), increasing.end());
  EXPECT_THROW(build_frontier(system, increasing), PreconditionError);
}

TEST(Frontier, FeatureAndKernelSolversAgree) {
  const EigenSpec spec = build_spec(0.5, 21);
  const SampleSet s = random_sample(60, 6);
  const KernelRidgeSystem dual(spec, s);
  const FeatureRidgeSystem primal(spec, s);
  for (double eta : {1e-6, 1e-3, 1.0}) {
    const FrontierPoint a = dual.solve(eta), b = primal.solve(eta);
    EXPECT_NEAR(a.norm, b.norm, 1e-7 * std::max(1.0, a.norm));
    EXPECT_NEAR(a.loss, b.loss, 1e-9);
    EXPECT_LE((a.coords - b.coords).norm(), 1e-7 * std::max(1.0, a.coords.norm()));
  }
}

TEST(Frontier, StoredLossMatchesRecomputation) {
  const EigenSpec spec = build_spec(0.5, 201);
  const SampleSet s = random_sample(50, 7);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  for (std::size_t k = 0; k < f.points.size(); k += 7) {
    double loss = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      double v = 0.0;
      for (std::size_t m = 0; m < s.size(); ++m) v += f.points[k].alpha[m] * kernel_eval(spec, s.xs[m], s.xs[i]);
      loss += (v - s.ys[i]) * (v - s.ys[i]);
    }
    EXPECT_NEAR(loss / s.size(), f.points[k].loss, 1e-10 * std::max(1.0, f.points[k].loss));
  }
}

// Samples with n near the truncation give Gram matrices whose smallest
// eigenvalues sit below double precision; the path must stop at the floor.
TEST(Frontier, IllConditionedSamplesStayMonotone) {
  const EigenSpec spec = build_spec(0.5, 201);
  const RegressionTask task = make_target(spec, 0.5, power_profile(201, 0.55), 0.5);
  for (std::size_t n : {128, 200, 256}) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const SampleSet s = draw_sample(task, n, 1000 * n + seed);
      Frontier f;
      ASSERT_NO_THROW(f = build_frontier(make_ridge_system(spec, s), default_eta_grid())) << n << " " << seed;
      const double nn = static_cast<double>(n);
      const double floor = kEtaFloor * gram_matrix(spec, s.xs).trace() / (nn * nn);
      EXPECT_GE(f.points.back().eta * std::pow(10.0, 0.1) * (1 + 1e-12), floor);
    }
  }
}

TEST(RegularizedErm, NullPicksLeastLoss) {
  const EigenSpec spec = build_spec(0.5, 201);
  const SampleSet s = random_sample(30, 8);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  RegularizerSpec reg{RegularizerKind::Null, Constants{}, spec, 30.0, 1.0};
  const FittedFunction fit = regularized_erm(f, reg, 1.0);
  double min_loss = INFINITY;
  for (const auto& pt : f.points) min_loss = std::min(min_loss, pt.loss);
  EXPECT_LE(fit.loss, min_loss + 1e-12);
}

TEST(RegularizedErm, HugeWeightGivesZeroFunction) {
  const EigenSpec spec = build_spec(0.5, 201);
  const SampleSet s = random_sample(30, 9);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  Constants c;
  c.kappa1 = 1e9;
  const FittedFunction fit = regularized_erm(f, RegularizerSpec{RegularizerKind::RidgeBaseline, c, spec, 30.0, 1.0}, 1.0);
  EXPECT_LE(fit.norm, 1e-6);
}

// Brute force over f = sum_j sqrt(lambda_j) t_j phi_j, which covers every
// function in the truncated space, not only kernel sections.
class BruteForceErm : public ::testing::TestWithParam<std::tuple<std::size_t, RegularizerKind>> {};

TEST_P(BruteForceErm, FrontierMinimumIsGlobal) {
  const auto [n, kind] = GetParam();
  const EigenSpec spec = build_spec(0.5, 3);
  std::vector<double> g{0.8, -1.2, 0.6};
  const RegressionTask task = make_target(spec, 0.5, g, 0.5);
  const SampleSet s = draw_sample(task, n, 100 + n);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  Constants c;
  c.kappa1 = 0.05;
  const double nn = std::max(3.0, static_cast<double>(n));
  const RegularizerSpec reg{kind, c, spec, nn, 1.0};
  const FittedFunction fit = regularized_erm(f, reg, 1.0);

  const Eigen::MatrixXd phi = feature_matrix(spec, s.xs);
  auto objective = [&](const std::vector<double>& t) {
    const Eigen::Map<const Eigen::VectorXd> tv(t.data(), 3);
    const Eigen::VectorXd fitted = phi * tv;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += (fitted[i] - s.ys[i]) * (fitted[i] - s.ys[i]);
    return loss / n + c.kappa1 * evaluate_regularizer(reg, tv.norm(), 1.0);
  };
  const double bound = 1.5 * f.points.back().norm + 1.0;
  const double searched = box_search(objective, 3, bound, 41, 30);
  EXPECT_LE(fit.objective, searched * (1 + 1e-6) + 1e-12);
  EXPECT_NEAR(fit.objective, searched, 1e-6 * std::max(searched, 1e-12));
}

INSTANTIATE_TEST_SUITE_P(SmallInstances, BruteForceErm,
                         ::testing::Combine(::testing::Values(std::size_t{3}, std::size_t{4}),
                                            ::testing::Values(RegularizerKind::Sublinear, RegularizerKind::Quadratic,
                                                              RegularizerKind::RidgeBaseline)));

TEST(RegularizedErm, ZeroFunctionIsACandidate) {
  const EigenSpec spec = build_spec(0.5, 21);
  const SampleSet s = random_sample(30, 15);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  Constants c;
  c.kappa1 = 1e9;
  const FittedFunction fit = regularized_erm(f, RegularizerSpec{RegularizerKind::Quadratic, c, spec, 30.0, 1.0}, 1.0);
  EXPECT_TRUE(std::isinf(fit.eta));
  EXPECT_EQ(fit.norm, 0.0);
  EXPECT_EQ(fit.alpha.norm(), 0.0);
  double y2 = 0.0;
  for (double y : s.ys) y2 += y * y;
  EXPECT_NEAR(fit.loss, y2 / 30.0, 1e-15);
  for (double v : fit.coeffs) EXPECT_EQ(v, 0.0);
  const FittedFunction back = fitted_from_json(nlohmann::json::parse(to_json(fit, "h").dump()), spec);
  EXPECT_TRUE(std::isinf(back.eta));
}

TEST(FittedFunction, KernelAndEigenEvaluationAgree) {
  const EigenSpec spec = build_spec(0.5, 201);
  const SampleSet s = random_sample(40, 10);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  const FittedFunction fit = regularized_erm(f, RegularizerSpec{RegularizerKind::Sublinear, Constants{}, spec, 40.0, 1.0}, 1.0);
  ASSERT_EQ(fit.coeffs.size(), spec.size());
  for (int g = 0; g <= 100; ++g) EXPECT_NEAR(fit(spec, g / 100.0), fit.eigen_eval(g / 100.0), 1e-10);
  // c_j = lambda_j sum_i alpha_i phi_j(x_i)
  for (std::size_t j = 0; j < spec.size(); j += 17) {
    double c = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) c += fit.alpha[i] * fourier::basis(j, s.xs[i]);
    EXPECT_NEAR(fit.coeffs[j], spec.eigenvalues[j] * c, 1e-10);
  }
}

TEST(FittedFunction, JsonRoundTrip) {
  const EigenSpec spec = build_spec(0.5, 201);
  const SampleSet s = random_sample(25, 11);
  const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
  const FittedFunction fit = regularized_erm(f, RegularizerSpec{RegularizerKind::Improved, Constants{}, spec, 25.0, 1.0}, 1.0);
  const FittedFunction back = fitted_from_json(nlohmann::json::parse(to_json(fit, "abc").dump()), spec);
  EXPECT_EQ(back.anchors, fit.anchors);
  EXPECT_EQ(back.eta, fit.eta);
  EXPECT_EQ(back.norm, fit.norm);
  for (std::size_t j = 0; j < spec.size(); ++j) EXPECT_NEAR(back.coeffs[j], fit.coeffs[j], 1e-12);
  auto doc = to_json(fit, "abc");
  doc["alpha"].push_back(1.0);
  EXPECT_THROW(fitted_from_json(doc, spec), FormatError);
  doc.erase("eta");
  EXPECT_THROW(fitted_from_json(doc, spec), FormatError);
}

TEST(H1Diagnostic, ZeroFunction) {
  const EigenSpec spec = build_spec(0.5, 51);
  FittedFunction f;
  f.coeffs.assign(spec.size(), 0.0);
  const SampleSet s = random_sample(10, 12);
  const H1Report r = h1_diagnostic(f, spec, 1.0, s);
  EXPECT_EQ(r.membership, 0.0);
  EXPECT_TRUE(r.in_h1);
  EXPECT_EQ(r.population_second_moment, 0.0);
}

TEST(H1Diagnostic, KernelSection) {
  const EigenSpec spec = build_spec(0.5, 201);
  for (double x0 : {0.25, 0.6180339887}) {
    FittedFunction f;
    f.anchors = {x0};
    f.alpha = Eigen::VectorXd::Ones(1);
    f.norm = std::sqrt(kernel_eval(spec, x0, x0));
    f.coeffs.resize(spec.size());
    for (std::size_t j = 0; j < spec.size(); ++j) f.coeffs[j] = spec.eigenvalues[j] * fourier::basis(j, x0);
    const H1Report r = h1_diagnostic(f, spec, 1.0, random_sample(10, 13));
    EXPECT_NEAR(r.sup_norm, f.norm * f.norm, 1e-8);
    double second = 0.0;
    for (std::size_t j = 0; j < spec.size(); ++j) second += f.coeffs[j] * f.coeffs[j];
    EXPECT_NEAR(r.population_second_moment, second, 1e-15);
    EXPECT_GT(r.lemma51_ratio, 0.0);
  }
}

TEST(H1Diagnostic, LowerBoundOnSolvedInstances) {
  const EigenSpec spec = build_spec(0.5, 201);
  Constants c;
  c.kappa1 = 0.01;
  double fitted = INFINITY;
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    const SampleSet s = random_sample(60, seed);
    const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
    const FittedFunction fit = regularized_erm(f, RegularizerSpec{RegularizerKind::Sublinear, c, spec, 60.0, 1.0}, 1.0);
    const H1Report r = h1_diagnostic(fit, spec, 1.0, s);
    if (fit.norm > 0) fitted = std::min(fitted, r.lemma51_ratio);
  }
  EXPECT_GT(fitted, 0.0);
  EXPECT_TRUE(std::isfinite(fitted));
}

TEST(OracleInequality, ViolationRateOverSeeds) {
  const EigenSpec spec = build_spec(0.5, 201);
  const RegressionTask task = make_power_target(spec, 0.5, 0.55);
  Constants c;
  c.kappa1 = 0.01;
  c.kappa2 = 1.0;
  const double n = 256.0;
  int violations = 0;
  const int trials = 100;
  for (int seed = 0; seed < trials; ++seed) {
    const SampleSet s = draw_sample(task, static_cast<std::size_t>(n), derive_seed(77, {static_cast<std::uint64_t>(seed)}));
    const Frontier f = build_frontier(make_ridge_system(spec, s), default_eta_grid());
    const RegularizerSpec reg{RegularizerKind::Sublinear, c, spec, n, 1.0};
    const FittedFunction fit = regularized_erm(f, reg, c.u);
    const double achieved = population_risk_excess(fit.coeffs, task);
    double oracle = INFINITY;
    for (const auto& pt : f.points)
      oracle = std::min(oracle, population_risk_excess(l2_coordinates(spec, pt.coords), task) +
                                    c.kappa2 * evaluate_regularizer(reg, pt.norm, c.u));
    if (achieved > oracle) ++violations;
  }
  const double rate = static_cast<double>(violations) / trials;
  RecordProperty("violation_rate", std::to_string(rate));
  EXPECT_LE(rate, 0.1);
}
