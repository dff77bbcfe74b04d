#pragma once

// Synthetic regression tasks with a source condition, written in the
// eigencoordinates of the kernel: f_rho = sum_j a_j phi_j with
// a_j = lambda_j^sigma g_j. Population quantities are exact in these
// coordinates.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "rkhs/error.hpp"
#include "rkhs/seeding.hpp"
#include "rkhs/spectrum.hpp"

namespace rkhs {

inline constexpr double kDefaultNoise = 0.5;

struct RegressionTask {
  EigenSpec spec;
  double sigma = 0.5;
  std::vector<double> g;
  double noise = kDefaultNoise;
  std::vector<double> coeffs;  // L2 coefficients a_j
  // When set, g_j = (j + 1)^{-tail_q} continues beyond the truncation along
  // the power-law eigenvalues; population quantities then include the
  // untruncated tail.
  std::optional<double> tail_q;

  [[nodiscard]] double operator()(double x) const {
    std::vector<double> phi(coeffs.size());
    fourier::fill_basis(x, phi);
    return std::inner_product(coeffs.begin(), coeffs.end(), phi.begin(), 0.0);
  }

  [[nodiscard]] double l2_norm() const;
  [[nodiscard]] double g_norm() const;

  // A * sum |a_j| >= ||f_rho||_inf.
  [[nodiscard]] double sup_bound() const {
    double total = 0.0;
    for (double a : coeffs) total += std::abs(a);
    return spec.basis_bound * total;
  }

  [[nodiscard]] double response_bound() const { return sup_bound() + noise; }
};

namespace detail {

// Sum_{k >= first} term(k) for a smooth, eventually decaying term: direct
// summation of the first 256 terms, then the Euler-Maclaurin remainder with
// the integral evaluated by adaptive Gauss-Kronrod in log k.
template <class Term>
double tail_series(Term&& term, double first) {
  constexpr int kDirect = 256;
  double total = 0.0;
  for (int i = 0; i < kDirect; ++i) total += term(first + i);
  const double start = first + kDirect;
  auto integrand = [&](double u) {
    const double k = start * std::exp(u);
    if (!std::isfinite(k)) return 0.0;
    const double v = term(k) * k;
    return std::isfinite(v) ? v : 0.0;
  };
  const double integral = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      integrand, 0.0, std::numeric_limits<double>::infinity(), 20, 1e-13);
  return total + integral + 0.5 * term(start) - (term(start + 1.0) - term(start - 1.0)) / 24.0;
}

// Frequency pairs k >= first_frequency beyond the truncation.
struct TailModel {
  double scale, p, sigma, q;
  double first_frequency;

  [[nodiscard]] double lambda(double k) const { return scale * std::pow(k + 1.0, -1.0 / p); }
  [[nodiscard]] double g2(double k) const { return std::pow(2.0 * k, -2.0 * q) + std::pow(2.0 * k + 1.0, -2.0 * q); }
};

inline std::optional<TailModel> tail_model(const RegressionTask& task) {
  if (!task.tail_q) return std::nullopt;
  const auto n = task.spec.size();
  return TailModel{task.spec.scale, task.spec.p, task.sigma, *task.tail_q,
                   static_cast<double>(fourier::frequency(n - 1) + 1)};
}

// sum over the tail of lambda^{2 sigma} g^2 eta^2 / (lambda + eta)^2;
// eta = infinity gives the tail of ||f_rho||_{L2}^2.
inline double tail_excess(const TailModel& m, double eta) {
  return tail_series(
      [&](double k) {
        const double l = m.lambda(k);
        const double w = std::isinf(eta) ? 1.0 : eta / (l + eta);
        return std::pow(l, 2.0 * m.sigma) * m.g2(k) * w * w;
      },
      m.first_frequency);
}

// sum over the tail of lambda^{1 + 2 sigma} g^2 / (lambda + eta)^2.
inline double tail_norm2(const TailModel& m, double eta) {
  if (eta == 0.0) {
    // lambda^{2 sigma - 1} g^2 ~ k^{(1 - 2 sigma)/p - 2q}
    if ((1.0 - 2.0 * m.sigma) / m.p - 2.0 * m.q >= -1.0) return std::numeric_limits<double>::infinity();
  }
  return tail_series(
      [&](double k) {
        const double l = m.lambda(k);
        return std::pow(l, 1.0 + 2.0 * m.sigma) * m.g2(k) / ((l + eta) * (l + eta));
      },
      m.first_frequency);
}

}  // namespace detail

inline double RegressionTask::l2_norm() const {
  double total = std::inner_product(coeffs.begin(), coeffs.end(), coeffs.begin(), 0.0);
  if (const auto m = detail::tail_model(*this)) total += detail::tail_excess(*m, std::numeric_limits<double>::infinity());
  return std::sqrt(total);
}

inline double RegressionTask::g_norm() const {
  double total = std::inner_product(g.begin(), g.end(), g.begin(), 0.0);
  if (tail_q) {
    if (2.0 * *tail_q <= 1.0) return std::numeric_limits<double>::infinity();
    total += zeta_tail(2.0 * *tail_q, static_cast<double>(g.size() + 1));
  }
  return std::sqrt(total);
}

enum class ExponentPolicy {
  Strict,      // 0 < sigma <= 1
  AllowZero,   // also sigma = 0 (identity operator), diagnostics only
};

inline RegressionTask make_target(const EigenSpec& spec, double sigma, std::vector<double> g,
                                  double noise = kDefaultNoise, ExponentPolicy policy = ExponentPolicy::Strict) {
  if (policy == ExponentPolicy::AllowZero) {
    require(sigma >= 0.0 && sigma <= 1.0, "make_target: sigma must lie in [0, 1]");
  } else {
    require(sigma > 0.0 && sigma <= 1.0, "make_target: sigma must lie in (0, 1]");
  }
  require(g.size() <= spec.size(), "make_target: g has more coordinates than the truncation");
  require(noise >= 0.0, "make_target: noise half-width must be nonnegative");
  g.resize(spec.size(), 0.0);
  RegressionTask task;
  task.spec = spec;
  task.sigma = sigma;
  task.noise = noise;
  task.coeffs.resize(spec.size());
  for (std::size_t j = 0; j < spec.size(); ++j) {
    task.coeffs[j] = (sigma == 0.0 ? 1.0 : std::pow(spec.eigenvalues[j], sigma)) * g[j];
  }
  task.g = std::move(g);
  return task;
}

// g_j = (j + 1)^{-q}.
inline std::vector<double> power_profile(std::size_t truncation, double q) {
  std::vector<double> g(truncation);
  for (std::size_t j = 0; j < truncation; ++j) g[j] = std::pow(static_cast<double>(j + 1), -q);
  return g;
}

// make_target with g = power_profile(N, q) continued analytically beyond N.
inline RegressionTask make_power_target(const EigenSpec& spec, double sigma, double q, double noise = kDefaultNoise) {
  require(spec.size() % 2 == 1, "make_power_target: truncation must be odd");
  require(spec.p > 0.0 && spec.p < 1.0, "make_power_target: needs 0 < p < 1");
  require(q > 0.0, "make_power_target: q must be positive");
  RegressionTask task = make_target(spec, sigma, power_profile(spec.size(), q), noise);
  task.tail_q = q;
  return task;
}

struct SampleSet {
  std::vector<double> xs;
  std::vector<double> ys;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t size() const { return xs.size(); }
};

inline SampleSet draw_sample(const RegressionTask& task, std::size_t n, std::uint64_t seed) {
  require(n >= 1, "draw_sample: n must be at least 1");
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> noise(-task.noise, task.noise);
  SampleSet sample;
  sample.seed = seed;
  sample.xs.resize(n);
  sample.ys.resize(n);
  std::vector<double> phi(task.coeffs.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double x = unit(rng);
    const double eps = task.noise > 0.0 ? noise(rng) : 0.0;
    fourier::fill_basis(x, phi);
    sample.xs[i] = x;
    sample.ys[i] = std::inner_product(task.coeffs.begin(), task.coeffs.end(), phi.begin(), 0.0) + eps;
  }
  return sample;
}

// ||f - f_rho||_{L2}^2 for f = sum_j c_j phi_j.
inline double population_risk_excess(std::span<const double> c, const RegressionTask& task) {
  require(c.size() <= task.coeffs.size(), "population_risk_excess: too many coordinates");
  double total = 0.0;
  for (std::size_t j = 0; j < task.coeffs.size(); ++j) {
    const double cj = j < c.size() ? c[j] : 0.0;
    total += (cj - task.coeffs[j]) * (cj - task.coeffs[j]);
  }
  if (const auto m = detail::tail_model(task)) total += detail::tail_excess(*m, std::numeric_limits<double>::infinity());
  return total;
}

struct BallProjection {
  std::vector<double> t;  // H coordinates, f = sum_j sqrt(lambda_j) t_j phi_j
                          // (truncated part only when the task has a tail)
  double excess = 0.0;
  double multiplier = 0.0;  // Lagrange multiplier eta
  int iterations = 0;
};

namespace detail {

inline double projected_norm(const RegressionTask& task, double eta) {
  double total = 0.0;
  for (std::size_t j = 0; j < task.coeffs.size(); ++j) {
    const double lambda = task.spec.eigenvalues[j];
    const double a = task.coeffs[j];
    if (a == 0.0) continue;
    if (lambda + eta <= 0.0) return std::numeric_limits<double>::infinity();
    const double t = std::sqrt(lambda) * a / (lambda + eta);
    total += t * t;
  }
  if (const auto m = tail_model(task)) total += tail_norm2(*m, eta);
  return std::sqrt(total);
}

inline BallProjection projection_at(const RegressionTask& task, double eta) {
  BallProjection out;
  out.multiplier = eta;
  out.t.resize(task.coeffs.size());
  for (std::size_t j = 0; j < task.coeffs.size(); ++j) {
    const double lambda = task.spec.eigenvalues[j];
    const double a = task.coeffs[j];
    if (lambda + eta <= 0.0) {
      out.t[j] = 0.0;
      out.excess += a * a;
      continue;
    }
    out.t[j] = std::sqrt(lambda) * a / (lambda + eta);
    const double residual = a * eta / (lambda + eta);
    out.excess += residual * residual;
  }
  if (const auto m = tail_model(task)) {
    out.excess += tail_excess(*m, eta);
  }
  return out;
}

}  // namespace detail

// Minimizer of ||f_t - f_rho||_{L2} over ||t||_2 <= r.
inline BallProjection best_in_ball(const RegressionTask& task, double r) {
  require(r >= 0.0, "best_in_ball: radius must be nonnegative");
  if (r == 0.0) {
    BallProjection out;
    out.t.assign(task.coeffs.size(), 0.0);
    out.excess = population_risk_excess({}, task);
    out.multiplier = std::numeric_limits<double>::infinity();
    return out;
  }
  // Coefficients on zero eigenvalues cannot be reached by any element of H.
  if (detail::projected_norm(task, 0.0) <= r) return detail::projection_at(task, 0.0);

  const double lambda1 = task.spec.eigenvalues.empty() ? 0.0 : task.spec.eigenvalues.front();
  double hi = std::max(std::sqrt(lambda1) * task.l2_norm() / r, std::numeric_limits<double>::min());
  int expansions = 0;
  while (detail::projected_norm(task, hi) > r) {
    hi *= 2.0;
    if (++expansions > 2000) {
      std::ostringstream msg;
      msg << "best_in_ball: bracket expansion failed, hi = " << hi << ", r = " << r;
      throw NumericalError(msg.str());
    }
  }
  double lo = 0.0;
  int iterations = 0;
  constexpr double kRelTol = 1e-12;
  while (hi - lo > kRelTol * hi) {
    const double mid = (lo > 0.0 && hi / lo > 4.0) ? std::sqrt(lo * hi) : (lo == 0.0 ? hi / 16.0 : 0.5 * (lo + hi));
    if (detail::projected_norm(task, mid) > r) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (++iterations > 5000) {
      std::ostringstream msg;
      msg << "best_in_ball: bisection did not converge, bracket [" << lo << ", " << hi << "]";
      throw NumericalError(msg.str());
    }
  }
  BallProjection out = detail::projection_at(task, hi);
  out.iterations = iterations;
  return out;
}

struct ApproximationCheck {
  double exact = 0.0;
  double bound = 0.0;
  [[nodiscard]] bool holds() const { return exact <= bound * (1.0 + 1e-12) + 1e-300; }
};

// Exact A(r - 1) against r^{-4 sigma / (1 - 2 sigma)} ||g||^{2 / (1 - 2 sigma)}.
inline ApproximationCheck check_approx_bound(const RegressionTask& task, double r) {
  if (!(task.sigma > 0.0 && task.sigma < 0.5))
    throw PreconditionError("check_approx_bound: requires 0 < sigma < 1/2");
  require(r >= 1.0, "check_approx_bound: r must be at least 1");
  ApproximationCheck out;
  out.exact = best_in_ball(task, r - 1.0).excess;
  const double k = 4.0 * task.sigma / (1.0 - 2.0 * task.sigma);
  out.bound = std::pow(r, -k) * std::pow(task.g_norm(), 2.0 / (1.0 - 2.0 * task.sigma));
  return out;
}

// CSV with header "x,y" and 17 significant digits.
inline void write_sample_csv(const SampleSet& sample, std::ostream& out) {
  out << "x,y\n";
  char buffer[64];
  for (std::size_t i = 0; i < sample.size(); ++i) {
    std::snprintf(buffer, sizeof buffer, "%.17g,", sample.xs[i]);
    out << buffer;
    std::snprintf(buffer, sizeof buffer, "%.17g\n", sample.ys[i]);
    out << buffer;
  }
}

inline SampleSet read_sample_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "x,y") throw FormatError("sample csv: expected header 'x,y'");
  SampleSet sample;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("sample csv: missing comma on row " + std::to_string(row));
    try {
      std::size_t used = 0;
      const double x = std::stod(line.substr(0, comma), &used);
      const double y = std::stod(line.substr(comma + 1));
      sample.xs.push_back(x);
      sample.ys.push_back(y);
    } catch (const std::exception&) {
      throw FormatError("sample csv: unparsable number on row " + std::to_string(row));
    }
  }
  return sample;
}

}  // namespace rkhs
