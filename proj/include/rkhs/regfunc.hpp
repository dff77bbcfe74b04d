#pragma once

// Regularization functionals, complexity thresholds and fixed points.
// Every unnamed constant is a field of Constants (default 1). Logarithms
// are natural throughout; the empirical measure is the sample mean.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rkhs/error.hpp"
#include "rkhs/spectrum.hpp"

namespace rkhs {

struct Constants {
  double c_tilde = 1.0;     // fixed-point constant
  double c_p = 1.0;         // decay-dependent constant
  double c_Y = 1.0;         // target-dependent constant
  double c3 = 1.0;          // front constant of V_tilde
  double c_improved = 1.0;  // front constant of the improved regularizer
  double c_p_prime = 1.0;   // U_tilde = c'_p Q_tilde log n
  double c_Y_prime = 1.0;   // theta-shift wrapping, 1 + c'_Y n + log r
  double kappa1 = 1.0;      // regularized ERM weight
  double kappa2 = 1.0;      // oracle-inequality weight
  double kappa3 = 1.0;      // H_1 membership constant
  double u = 1.0;           // confidence parameter
  double u_c1 = 1.0;        // admissible u range, lower: c1 log log n
  double u_c2 = 1.0;        // admissible u range, upper: c2 (log n)^{2/(1-p)}
};

inline void validate(const Constants& c) {
  const double values[] = {c.c_tilde, c.c_p, c.c_Y, c.c3, c.c_improved, c.c_p_prime,
                           c.c_Y_prime, c.kappa1, c.kappa2, c.kappa3, c.u, c.u_c1, c.u_c2};
  for (double v : values) require(v > 0.0 && std::isfinite(v), "constants must be strictly positive and finite");
}

inline nlohmann::json to_json(const Constants& c) {
  return nlohmann::json{{"c_tilde", c.c_tilde}, {"c_p", c.c_p},         {"c_Y", c.c_Y},
                        {"c3", c.c3},           {"c_improved", c.c_improved}, {"c_p_prime", c.c_p_prime},
                        {"c_Y_prime", c.c_Y_prime}, {"kappa1", c.kappa1}, {"kappa2", c.kappa2},
                        {"kappa3", c.kappa3},   {"u", c.u},             {"u_c1", c.u_c1},
                        {"u_c2", c.u_c2}};
}

inline Constants constants_from_json(const nlohmann::json& doc) {
  Constants c;
  try {
    c.c_tilde = doc.value("c_tilde", c.c_tilde);
    c.c_p = doc.value("c_p", c.c_p);
    c.c_Y = doc.value("c_Y", c.c_Y);
    c.c3 = doc.value("c3", c.c3);
    c.c_improved = doc.value("c_improved", c.c_improved);
    c.c_p_prime = doc.value("c_p_prime", c.c_p_prime);
    c.c_Y_prime = doc.value("c_Y_prime", c.c_Y_prime);
    c.kappa1 = doc.value("kappa1", c.kappa1);
    c.kappa2 = doc.value("kappa2", c.kappa2);
    c.kappa3 = doc.value("kappa3", c.kappa3);
    c.u = doc.value("u", c.u);
    c.u_c1 = doc.value("u_c1", c.u_c1);
    c.u_c2 = doc.value("u_c2", c.u_c2);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("constants: ") + e.what());
  }
  validate(c);
  return c;
}

inline const double kLogZeta2 = std::log(std::numbers::pi * std::numbers::pi / 6.0);

// ---------------------------------------------------------------------------
// Sums over the spectrum

inline double sum_min(double x, double r, std::span<const double> lambda) {
  require(x >= 0.0 && r >= 0.0, "sum_min: x and r must be nonnegative");
  double total = 0.0;
  const double r2 = r * r;
  for (double l : lambda) total += std::min(x, r2 * l);
  return total;
}

inline double sum_min(double x, double r, const EigenSpec& spec, TailMode mode = TailMode::WithTail) {
  double total = sum_min(x, r, spec.eigenvalues);
  if (mode == TailMode::WithTail && x > 0.0 && r > 0.0) total += spec.tail_sum_min(x, r);
  return total;
}

// Smallest z > 0 with z >= c_tilde ((1/n) sum_i min{z, lambda_i})^{1/2}.
// `tail(z)` adds the contribution of eigenvalues beyond the supplied list.
template <class Tail>
double fixed_point_z(std::span<const double> lambda, double n, double c_tilde, Tail&& tail) {
  require(n >= 1.0, "fixed_point_z: n must be at least 1");
  require(c_tilde > 0.0, "fixed_point_z: c_tilde must be positive");
  require(is_nonincreasing(lambda), "fixed_point_z: eigenvalues must be nonincreasing");
  // suffix[k] = sum_{i >= k} lambda_i
  std::vector<double> suffix(lambda.size() + 1, 0.0);
  for (std::size_t k = lambda.size(); k-- > 0;) suffix[k] = suffix[k + 1] + lambda[k];
  const double total = suffix.front() + tail(std::numeric_limits<double>::infinity());
  if (total <= 0.0) return 0.0;

  auto sum_at = [&](double z) {
    // first index with lambda_i <= z
    const auto it = std::lower_bound(lambda.begin(), lambda.end(), z, [](double l, double v) { return l > v; });
    const auto above = static_cast<std::size_t>(it - lambda.begin());
    return z * static_cast<double>(above) + suffix[above] + tail(z);
  };
  auto gap = [&](double z) { return z - c_tilde * std::sqrt(sum_at(z) / n); };

  double hi = c_tilde * std::sqrt(total / n);
  double lo = 0.0;
  if (gap(hi) < 0.0) throw NumericalError("fixed_point_z: invalid upper bracket");
  constexpr double kRelTol = 1e-9;
  for (int it = 0; it < 400 && hi - lo > kRelTol * hi; ++it) {
    const double mid = (lo > 0.0 && hi / lo > 4.0) ? std::sqrt(lo * hi) : (lo == 0.0 ? hi / 16.0 : 0.5 * (lo + hi));
    if (gap(mid) >= 0.0) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

inline double fixed_point_z(std::span<const double> lambda, double n, double c_tilde) {
  return fixed_point_z(lambda, n, c_tilde, [](double) { return 0.0; });
}

inline double fixed_point_z(const EigenSpec& spec, double n, double c_tilde, TailMode mode = TailMode::WithTail) {
  if (mode == TailMode::Truncated) return fixed_point_z(spec.eigenvalues, n, c_tilde);
  return fixed_point_z(spec.eigenvalues, n, c_tilde, [&spec](double z) { return spec.tail_sum_min(z, 1.0); });
}

inline double lemma34_ratio(double x, double r, const EigenSpec& spec, TailMode mode = TailMode::WithTail) {
  require(x > 0.0 && r >= 0.0, "lemma34_ratio: x must be positive and r nonnegative");
  if (r == 0.0) return 0.0;
  return sum_min(x, r, spec, mode) / (spec.weak_lp * std::pow(x, 1.0 - spec.p) * std::pow(r, 2.0 * spec.p));
}

inline double Q_fn(double x, double r, const EigenSpec& spec, TailMode mode = TailMode::WithTail) {
  return spec.basis_bound * std::sqrt(sum_min(x, r, spec, mode));
}

// Q_tilde(x, r) = (c_p A^2 Lambda x^{1-p} r^{2p})^{1/2}.
inline double Q_tilde(double x, double r, const EigenSpec& spec, const Constants& c) {
  return std::sqrt(c.c_p * spec.basis_bound * spec.basis_bound * spec.weak_lp * std::pow(x, 1.0 - spec.p) *
                   std::pow(r, 2.0 * spec.p));
}

// ---------------------------------------------------------------------------
// Thresholds

inline double Theta(double r, double n, const EigenSpec& spec) {
  require(r >= 1.0 && n >= 2.0, "Theta: requires r >= 1 and n >= 2");
  return spec.basis_bound * std::sqrt(spec.weak_lp) * std::pow(r, spec.p) * std::log(n) / std::sqrt(n);
}

inline double threshold_from_theta(double theta, double p, double c) {
  return c * std::max(std::pow(theta, 2.0 / (1.0 + p)), std::pow(theta, 2.0 / p));
}

inline double threshold_x(double r, double n, const EigenSpec& spec, double c) {
  return threshold_from_theta(Theta(r, n, spec), spec.p, c);
}

// ---------------------------------------------------------------------------
// Regularization functionals

inline double rho_quadratic(double r, double u, double n, const EigenSpec& spec, const Constants& c) {
  require(r >= 1.0 && u >= 0.0 && n >= 1.0, "rho_quadratic: requires r >= 1, u >= 0, n >= 1");
  return c.c_p * r * r * std::pow(spec.weak_lp / n, 1.0 / (1.0 + spec.p)) + c.c_Y * (1.0 + r * r) * u / n;
}

inline double rho_improved(double r, double u, double n, const EigenSpec& spec, const Constants& c) {
  require(r >= 1.0 && u >= 0.0 && n >= 2.0, "rho_improved: requires r >= 1, u >= 0, n >= 2");
  const double p = spec.p;
  const double leading = std::pow(r, 2.0 * p / (1.0 + p)) * std::pow(std::log(n), 2.0 / (1.0 + p)) *
                         std::pow(n, -1.0 / (1.0 + p));
  return c.c_improved * (1.0 + u) * std::max(leading, r * r / n);
}

// c3 (1 + u + c_Y ln n + ln ln(h + e)) ((h + 1)^p ln n / sqrt n)^{2/(1+p)}.
inline double V_tilde(double h, double u, double n, const EigenSpec& spec, const Constants& c) {
  require(h >= 0.0 && u >= 0.0 && n >= 3.0, "V_tilde: requires h >= 0, u >= 0, n >= 3");
  const double p = spec.p;
  const double front = 1.0 + u + c.c_Y * std::log(n) + std::log(std::log(h + std::numbers::e));
  const double core = std::pow(h + 1.0, p) * std::log(n) / std::sqrt(n);
  return c.c3 * front * std::pow(core, 2.0 / (1.0 + p));
}

// x + ln(pi^2/6) + 2 ln(1 + pl1 / rho1 + log r).
inline double theta_shift(double r, double x, double pl1, double rho1) {
  if (!(rho1 > 0.0)) throw PreconditionError("theta_shift: rho1 must be positive");
  require(r >= 1.0 && x > 0.0 && pl1 >= 0.0, "theta_shift: requires r >= 1, x > 0, pl1 >= 0");
  return x + kLogZeta2 + 2.0 * std::log(1.0 + pl1 / rho1 + std::log(r));
}

inline double phi_tilde(double x, double r, double n, double el_star, const EigenSpec& spec, const Constants& c) {
  require(x >= 0.0 && r >= 1.0 && el_star >= 0.0 && n >= 2.0, "phi_tilde: invalid arguments");
  const double u_scaled = c.c_p_prime * Q_tilde(x, r, spec, c) * std::log(n) / std::sqrt(n);
  return u_scaled * std::max({std::sqrt(x), std::sqrt(el_star), u_scaled});
}

// Closed-form peeling constant sum_i 2^{1-p/2} 2^{-i p/2}.
inline double peeling_constant(double p) { return std::pow(2.0, 1.0 - p / 2.0) / (1.0 - std::pow(2.0, -p / 2.0)); }

inline bool u_in_admissible_range(double u, double n, double p, const Constants& c) {
  const double lower = c.u_c1 * std::log(std::max(std::log(n), 1.0));
  const double upper = c.u_c2 * std::pow(std::log(n), 2.0 / (1.0 - std::min(p, 0.999999)));
  return u >= lower && u <= upper;
}

// ---------------------------------------------------------------------------
// Dispatch

enum class RegularizerKind { Quadratic, Improved, Sublinear, RidgeBaseline, Null };

inline std::string to_string(RegularizerKind kind) {
  switch (kind) {
    case RegularizerKind::Quadratic: return "quadratic";
    case RegularizerKind::Improved: return "improved";
    case RegularizerKind::Sublinear: return "sublinear";
    case RegularizerKind::RidgeBaseline: return "ridge";
    case RegularizerKind::Null: return "null";
  }
  throw PreconditionError("unknown regularizer kind");
}

inline RegularizerKind regularizer_from_string(const std::string& name) {
  if (name == "quadratic") return RegularizerKind::Quadratic;
  if (name == "improved") return RegularizerKind::Improved;
  if (name == "sublinear") return RegularizerKind::Sublinear;
  if (name == "ridge") return RegularizerKind::RidgeBaseline;
  if (name == "null") return RegularizerKind::Null;
  throw FormatError("unknown regularizer kind '" + name + "'");
}

struct RegularizerSpec {
  RegularizerKind kind = RegularizerKind::Sublinear;
  Constants constants;
  EigenSpec spec;
  double n = 3.0;
  double ridge_eta = 1.0;
};

// Wrapped confidence level for the r-indexed functionals:
// u + ln(pi^2/6) + 2 ln(1 + c'_Y n + log r).
inline double shifted_confidence(double r, double u, double n, const Constants& c) {
  return u + kLogZeta2 + 2.0 * std::log(1.0 + c.c_Y_prime * n + std::log(r));
}

// Penalty as a function of h = ||f||_H, with r(f) = h + 1.
inline double evaluate_regularizer(const RegularizerSpec& reg, double h, double u) {
  require(h >= 0.0, "evaluate_regularizer: h must be nonnegative");
  const double r = h + 1.0;
  switch (reg.kind) {
    case RegularizerKind::Null: return 0.0;
    case RegularizerKind::RidgeBaseline: return reg.ridge_eta * h * h;
    case RegularizerKind::Quadratic:
      return rho_quadratic(2.0 * r, shifted_confidence(r, u, reg.n, reg.constants), reg.n, reg.spec, reg.constants);
    case RegularizerKind::Improved:
      return rho_improved(2.0 * r, shifted_confidence(r, u, reg.n, reg.constants), reg.n, reg.spec, reg.constants);
    case RegularizerKind::Sublinear: return V_tilde(h, u, reg.n, reg.spec, reg.constants);
  }
  throw PreconditionError("evaluate_regularizer: unknown regularizer kind");
}

}  // namespace rkhs
