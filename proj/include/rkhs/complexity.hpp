#pragma once

// Numerical counterparts of the localization geometry: intersection
// ellipsoids, localized Gaussian complexity, dual-Sudakov covering bounds,
// the two-regime entropy integral, and Monte Carlo checks of the
// isomorphic inequality and the localization inclusions.
//
// Every Monte Carlo routine derives one seed per draw or trial from a root
// seed, so results do not depend on execution order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rkhs/error.hpp"
#include "rkhs/regfunc.hpp"
#include "rkhs/seeding.hpp"
#include "rkhs/solver.hpp"
#include "rkhs/spectrum.hpp"
#include "rkhs/sup_norm.hpp"
#include "rkhs/synth.hpp"

namespace rkhs {

struct IntersectionEllipsoid {
  std::vector<double> axes;  // theta_j = min{sqrt(x / lambda_j), r}
  double x = 0.0;
  double r = 0.0;
};

inline IntersectionEllipsoid ellipsoid_axes(double x, double r, std::span<const double> lambda) {
  require(x >= 0.0 && r >= 0.0, "ellipsoid_axes: x and r must be nonnegative");
  IntersectionEllipsoid e;
  e.x = x;
  e.r = r;
  e.axes.resize(lambda.size());
  for (std::size_t j = 0; j < lambda.size(); ++j)
    e.axes[j] = lambda[j] > 0.0 ? std::min(std::sqrt(x / lambda[j]), r) : r;
  return e;
}

inline IntersectionEllipsoid ellipsoid_axes(double x, double r, const EigenSpec& spec) {
  return ellipsoid_axes(x, r, spec.eigenvalues);
}

// sup_{t in E} <t, v> = (sum theta_j^2 v_j^2)^{1/2}.
inline double ellipsoid_support(const IntersectionEllipsoid& e, std::span<const double> v) {
  require(v.size() == e.axes.size(), "ellipsoid_support: dimension mismatch");
  double total = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) total += e.axes[j] * e.axes[j] * v[j] * v[j];
  return std::sqrt(total);
}

struct MCConfig {
  std::size_t draws = 2000;
  std::uint64_t seed = 1;
};

struct MCEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline MCEstimate summarize(std::span<const double> values) {
  MCEstimate out;
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stderr_ = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return out;
}

inline void check_mc(const MCConfig& mc) { require(mc.draws >= 100, "Monte Carlo needs at least 100 draws"); }

// E sup_{t in E_{x,r}} |(1/n) sum_i g_i <t, Phi(X_i)>| for several levels x,
// sharing the draws of (X, g) across levels.
inline std::vector<MCEstimate> localized_gaussian_complexity(const EigenSpec& spec, std::size_t n,
                                                             std::span<const double> levels, double r,
                                                             const MCConfig& mc) {
  require(n >= 2, "localized_gaussian_complexity: n must be at least 2");
  check_mc(mc);
  const std::size_t dim = spec.size();
  std::vector<IntersectionEllipsoid> bodies;
  for (double x : levels) bodies.push_back(ellipsoid_axes(x, r, spec));
  std::vector<std::vector<double>> values(levels.size(), std::vector<double>(mc.draws));
  std::vector<double> phi(dim), v(dim);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t d = 0; d < mc.draws; ++d) {
    Rng rng = make_rng(derive_seed(mc.seed, {d}));
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = unit(rng);
      const double g = gauss(rng);
      fourier::fill_basis(x, phi);
      for (std::size_t j = 0; j < dim; ++j) v[j] += g * phi[j];
    }
    for (std::size_t j = 0; j < dim; ++j) v[j] *= std::sqrt(spec.eigenvalues[j]);
    for (std::size_t k = 0; k < levels.size(); ++k)
      values[k][d] = ellipsoid_support(bodies[k], v) / static_cast<double>(n);
  }
  std::vector<MCEstimate> out;
  for (const auto& column : values) out.push_back(summarize(column));
  return out;
}

inline MCEstimate localized_gaussian_complexity(const EigenSpec& spec, std::size_t n, double x, double r,
                                                const MCConfig& mc) {
  const double levels[] = {x};
  return localized_gaussian_complexity(spec, n, levels, r, mc).front();
}

// Rows W_i = T Phi(X_i) with T = diag(theta).
inline Eigen::MatrixXd transformed_features(const EigenSpec& spec, std::span<const double> xs, double x, double r) {
  Eigen::MatrixXd w = feature_matrix(spec, xs);
  const IntersectionEllipsoid e = ellipsoid_axes(x, r, spec);
  for (std::size_t j = 0; j < spec.size(); ++j) w.col(static_cast<Eigen::Index>(j)) *= e.axes[j];
  return w;
}

struct DualSudakov {
  MCEstimate gaussian;       // E ||G||_Ebar = E max_i |<G, W_i>|
  double max_row_norm = 0.0;  // max_i ||W_i||_2
  double log_covering = 0.0;  // (E ||G||_Ebar / epsilon)^2
};

inline MCEstimate expected_dual_norm(const Eigen::MatrixXd& rows, const MCConfig& mc) {
  check_mc(mc);
  const auto dim = rows.cols();
  std::vector<double> values(mc.draws);
  constexpr std::size_t kBatch = 250;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t start = 0; start < mc.draws; start += kBatch) {
    const std::size_t count = std::min(kBatch, mc.draws - start);
    Eigen::MatrixXd g(dim, static_cast<Eigen::Index>(count));
    for (std::size_t d = 0; d < count; ++d) {
      Rng rng = make_rng(derive_seed(mc.seed, {start + d}));
      for (Eigen::Index j = 0; j < dim; ++j) g(j, static_cast<Eigen::Index>(d)) = gauss(rng);
    }
    const Eigen::MatrixXd proj = rows * g;
    for (std::size_t d = 0; d < count; ++d) values[start + d] = proj.col(static_cast<Eigen::Index>(d)).cwiseAbs().maxCoeff();
  }
  return summarize(values);
}

inline DualSudakov dual_sudakov_bound(const EigenSpec& spec, std::span<const double> xs, double x, double r,
                                      double epsilon, const MCConfig& mc) {
  require(epsilon > 0.0, "dual_sudakov_bound: epsilon must be positive");
  require(!xs.empty(), "dual_sudakov_bound: empty sample");
  const Eigen::MatrixXd rows = transformed_features(spec, xs, x, r);
  DualSudakov out;
  out.max_row_norm = rows.rowwise().norm().maxCoeff();
  if (out.max_row_norm == 0.0) return out;
  out.gaussian = expected_dual_norm(rows, mc);
  out.log_covering = (out.gaussian.mean / epsilon) * (out.gaussian.mean / epsilon);
  return out;
}

struct DudleyBound {
  double bound = 0.0;
  double q = 0.0;
  double epsilon0 = 0.0;
  double diameter = 0.0;
  double small_scale = 0.0;  // int_0^{eps0} n eps ln(eps0 / eps) = n eps0^2 / 4
  double large_scale = 0.0;  // int_{eps0}^{D2} M^2 / eps = M^2 ln(D2 / eps0)
  MCEstimate gaussian;
};

// Two-regime entropy integral: volumetric covering below
// eps0 = c4 Q sqrt(ln n / n), dual Sudakov above it up to the diameter D2
// of the Euclidean ball in ||.||_Ebar, which is 2 max_i ||W_i||_2.
inline DudleyBound dudley_gamma2_bound(const EigenSpec& spec, std::span<const double> xs, double x, double r,
                                       const MCConfig& mc, double c4 = 1.0) {
  require(xs.size() >= 2, "dudley_gamma2_bound: need at least two points");
  DudleyBound out;
  const double n = static_cast<double>(xs.size());
  out.q = Q_fn(x, r, spec, TailMode::Truncated);
  if (out.q == 0.0) return out;
  const Eigen::MatrixXd rows = transformed_features(spec, xs, x, r);
  out.diameter = 2.0 * rows.rowwise().norm().maxCoeff();
  out.gaussian = expected_dual_norm(rows, mc);
  out.epsilon0 = c4 * out.q * std::sqrt(std::log(n) / n);
  out.small_scale = n * out.epsilon0 * out.epsilon0 / 4.0;
  if (out.diameter > out.epsilon0)
    out.large_scale = out.gaussian.mean * out.gaussian.mean * std::log(out.diameter / out.epsilon0);
  out.bound = std::sqrt(out.small_scale + out.large_scale);
  return out;
}

// ---------------------------------------------------------------------------
// Isomorphic inequality

struct IsomorphismConfig {
  double threshold_c = 1.0;  // x = threshold_c * max{Theta^{2/(1+p)}, Theta^{2/p}}
  double confidence_c = 1.0; // c in c (1 + b^2) u / n
  double u = 1.0;
  std::size_t trials = 200;
  std::uint64_t seed = 1;
};

struct IsomorphismTrial {
  bool failed = false;
  // Smallest threshold_c for which this trial passes (0 if any value works).
  double required_c = 0.0;
  std::size_t functions = 0;
};

struct IsomorphismResult {
  double failure_rate = 0.0;
  std::vector<IsomorphismTrial> trials;
  double x = 0.0;
  double slack = 0.0;  // c (1 + b^2) u / n
};

inline IsomorphismTrial isomorphism_trial(const RegressionTask& task, double r, std::size_t n, double base_x,
                                          double slack, double threshold_c, std::uint64_t seed,
                                          const BallProjection& star) {
  const SampleSet sample = draw_sample(task, n, seed);
  const auto system = make_ridge_system(task.spec, sample);
  const Frontier frontier = build_frontier(system, default_eta_grid());

  // f*(X_i) and its empirical loss.
  const Eigen::MatrixXd features = feature_matrix(task.spec, sample.xs);
  const Eigen::VectorXd t_star = Eigen::Map<const Eigen::VectorXd>(star.t.data(), static_cast<Eigen::Index>(star.t.size()));
  const Eigen::VectorXd star_values = features * t_star;
  const Eigen::VectorXd ys = Eigen::Map<const Eigen::VectorXd>(sample.ys.data(), static_cast<Eigen::Index>(n));
  const double star_empirical = (star_values - ys).squaredNorm() / static_cast<double>(n);

  IsomorphismTrial trial;
  double worst = -std::numeric_limits<double>::infinity();
  for (const FrontierPoint& pt : frontier.points) {
    if (pt.norm > r) continue;
    const std::vector<double> c = l2_coordinates(task.spec, pt.coords);
    const double population = population_risk_excess(c, task) - star.excess;
    const Eigen::VectorXd values = features * pt.coords;
    const double empirical = (values - ys).squaredNorm() / static_cast<double>(n) - star_empirical;
    worst = std::max({worst, 0.5 * empirical - population, population - 2.0 * empirical});
    ++trial.functions;
  }
  // Pass iff worst <= x / 2 + slack with x = c * base_x.
  trial.required_c = std::max(0.0, 2.0 * (worst - slack) / base_x);
  trial.failed = worst > 0.5 * threshold_c * base_x + slack;
  return trial;
}

// Per trial: draw a sample, solve the ridge frontier, keep the functions with
// ||f||_H <= r and test both sides of
//   (1/2) P_n L_f - x/2 - s <= P L_f <= 2 P_n L_f + x/2 + s,
// with L_f the excess loss relative to the best element of r B_H.
inline IsomorphismResult isomorphism_mc(const RegressionTask& task, double r, std::size_t n,
                                        const IsomorphismConfig& cfg) {
  require(cfg.trials >= 1, "isomorphism_mc: need at least one trial");
  require(r >= 1.0 && n >= 2, "isomorphism_mc: requires r >= 1 and n >= 2");
  IsomorphismResult out;
  const double base_x = threshold_x(r, static_cast<double>(n), task.spec, 1.0);
  out.x = cfg.threshold_c * base_x;
  const double b = std::max(r, task.response_bound());
  out.slack = cfg.confidence_c * (1.0 + b * b) * cfg.u / static_cast<double>(n);
  const BallProjection star = best_in_ball(task, r);
  std::size_t failures = 0;
  for (std::size_t k = 0; k < cfg.trials; ++k) {
    out.trials.push_back(isomorphism_trial(task, r, n, base_x, out.slack, cfg.threshold_c,
                                           derive_seed(cfg.seed, {k}), star));
    if (out.trials.back().failed) ++failures;
  }
  out.failure_rate = static_cast<double>(failures) / static_cast<double>(cfg.trials);
  return out;
}

// Empirical quantile (nearest rank) of the per-trial required constants.
inline double calibrate_threshold(const IsomorphismResult& calibration, double quantile) {
  require(!calibration.trials.empty(), "calibrate_threshold: no trials");
  std::vector<double> required;
  for (const auto& t : calibration.trials) required.push_back(t.required_c);
  std::sort(required.begin(), required.end());
  const auto rank = static_cast<std::size_t>(std::ceil(quantile * static_cast<double>(required.size())));
  return required[std::min(required.size() - 1, rank == 0 ? 0 : rank - 1)];
}

// ---------------------------------------------------------------------------
// Localization inclusion

struct InclusionResult {
  double max_ratio = 0.0;
  double max_distance_ratio = 0.0;  // ||t - t*||_2 / (2r)
  double max_variance_ratio = 0.0;  // sum lambda (t - t*)^2 / (4x)
  std::size_t accepted = 0;
  std::size_t proposals = 0;
};

inline constexpr std::size_t kMaxProposals = 1000000;

// Samples t in r B_2 with excess loss E L_{f_t} <= x relative to
// t* = best_in_ball(task, r) and records how close the differences come to
// the inclusion {t - t*} in 2 sqrt(x) D and 2 r B_2.
inline InclusionResult lemma41_check(const RegressionTask& task, double r, double x, std::size_t samples,
                                     std::uint64_t seed) {
  require(x > 0.0 && r > 0.0, "lemma41_check: requires x > 0 and r > 0");
  const BallProjection star = best_in_ball(task, r);
  const auto& lambda = task.spec.eigenvalues;
  const std::size_t dim = lambda.size();
  const IntersectionEllipsoid local = ellipsoid_axes(x, r, lambda);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  InclusionResult out;
  std::vector<double> t(dim), c(dim);

  auto project_to_ball = [&] {
    double norm = 0.0;
    for (double v : t) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > r)
      for (double& v : t) v *= r / norm;
  };
  auto uniform_ball = [&](std::vector<double>& out_t) {
    double norm = 0.0;
    for (double& v : out_t) {
      v = gauss(rng);
      norm += v * v;
    }
    const double radius = r * std::pow(unit(rng), 1.0 / static_cast<double>(dim));
    for (double& v : out_t) v *= radius / std::sqrt(norm);
  };

  std::vector<double> other(dim);
  while (out.accepted < samples) {
    if (++out.proposals > kMaxProposals) throw NumericalError("lemma41_check: rejection sampling starved");
    switch (out.proposals % 3) {
      case 0: {  // local perturbation shaped like the localized body
        const double scale = 2.0 * unit(rng) / std::sqrt(static_cast<double>(dim));
        for (std::size_t j = 0; j < dim; ++j) t[j] = star.t[j] + scale * local.axes[j] * gauss(rng);
        project_to_ball();
        break;
      }
      case 1: uniform_ball(t); break;
      default: {  // segment toward a random point of the ball
        uniform_ball(other);
        const double w = std::pow(unit(rng), 3.0);
        for (std::size_t j = 0; j < dim; ++j) t[j] = star.t[j] + w * (other[j] - star.t[j]);
        break;
      }
    }
    for (std::size_t j = 0; j < dim; ++j) c[j] = std::sqrt(lambda[j]) * t[j];
    const double excess = population_risk_excess(c, task) - star.excess;
    if (excess > x) continue;
    ++out.accepted;
    double dist2 = 0.0, var = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = t[j] - star.t[j];
      dist2 += d * d;
      var += lambda[j] * d * d;
    }
    out.max_distance_ratio = std::max(out.max_distance_ratio, std::sqrt(dist2) / (2.0 * r));
    out.max_variance_ratio = std::max(out.max_variance_ratio, var / (4.0 * x));
  }
  out.max_ratio = std::max(out.max_distance_ratio, out.max_variance_ratio);
  return out;
}

// ---------------------------------------------------------------------------
// Sup-norm / second-moment ratio

struct Lemma51Result {
  double min_ratio = std::numeric_limits<double>::infinity();
  std::string argmin_family;
  std::size_t functions = 0;
};

inline constexpr std::size_t kLemma51Grid = 4096;

// ratio(f) = E f^2 (||f||_H^p / ||f||_inf)^{2/(1-p)} over random dense,
// random sparse and kernel-section functions.
inline Lemma51Result lemma51_check(const EigenSpec& spec, std::size_t m, std::uint64_t seed) {
  require(m >= 100, "lemma51_check: family size must be at least 100");
  require(spec.p < 1.0, "lemma51_check: requires p < 1");
  const std::size_t dim = spec.size();
  const auto& lambda = spec.eigenvalues;
  const SupNormEvaluator sup(dim, std::max<std::size_t>(kLemma51Grid, 8 * dim));
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(m));
  std::vector<std::string> family(m);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < m; ++k) {
    auto col = t.col(static_cast<Eigen::Index>(k));
    switch (k % 3) {
      case 0: {
        const double decay = 2.0 * unit(rng);
        for (std::size_t j = 0; j < dim; ++j)
          col(static_cast<Eigen::Index>(j)) = gauss(rng) * std::pow(static_cast<double>(j + 1), -decay);
        family[k] = "dense";
        break;
      }
      case 1: {
        const int nonzero = 1 + static_cast<int>(unit(rng) * 5.0);
        for (int s = 0; s < nonzero; ++s) {
          const auto j = std::min<std::size_t>(dim - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(dim)));
          col(static_cast<Eigen::Index>(j)) = gauss(rng);
        }
        family[k] = "sparse";
        break;
      }
      default: {
        const double anchor = unit(rng);
        col = feature_vector(spec, anchor);
        family[k] = "section";
        break;
      }
    }
  }
  Eigen::MatrixXd coeffs = t;
  for (std::size_t j = 0; j < dim; ++j) coeffs.row(static_cast<Eigen::Index>(j)) *= std::sqrt(lambda[j]);
  const std::vector<double> sups = sup.sup_batch(coeffs);
  const double exponent = 2.0 / (1.0 - spec.p);
  Lemma51Result out;
  for (std::size_t k = 0; k < m; ++k) {
    const double h = t.col(static_cast<Eigen::Index>(k)).norm();
    if (h == 0.0 || sups[k] == 0.0) continue;
    const double second = coeffs.col(static_cast<Eigen::Index>(k)).squaredNorm();
    const double ratio = second * std::pow(std::pow(h, spec.p) / sups[k], exponent);
    ++out.functions;
    if (ratio < out.min_ratio) {
      out.min_ratio = ratio;
      out.argmin_family = family[k];
    }
  }
  return out;
}

}  // namespace rkhs
