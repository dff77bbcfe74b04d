#pragma once

// Mercer kernels on [0,1] (uniform measure) with a prescribed polynomial
// eigenvalue decay, realized with the real Fourier basis.
//
// Index convention: basis index j is zero-based. j = 0 is the constant
// function; for j >= 1 the frequency is k = (j + 1) / 2, odd j carries
// sqrt(2) cos(2 pi k x) and even j carries sqrt(2) sin(2 pi k x). Both members
// of a frequency pair share one eigenvalue, so the kernel is translation
// invariant whenever the truncation is odd.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "rkhs/error.hpp"

namespace rkhs {

inline constexpr double kFourierBound = std::numbers::sqrt2;
inline constexpr std::size_t kDefaultTruncation = 201;

enum class TailMode { Truncated, WithTail };

namespace fourier {

inline std::size_t frequency(std::size_t j) { return (j + 1) / 2; }

inline double basis(std::size_t j, double x) {
  if (j == 0) return 1.0;
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(frequency(j)) * x;
  return kFourierBound * ((j % 2 == 1) ? std::cos(angle) : std::sin(angle));
}

// Writes phi_0(x), ..., phi_{out.size()-1}(x). Uses the angle-addition
// recurrence, renormalized every 32 steps to bound drift.
inline void fill_basis(double x, std::span<double> out) {
  if (out.empty()) return;
  out[0] = 1.0;
  const double step = 2.0 * std::numbers::pi * x;
  const double c1 = std::cos(step);
  const double s1 = std::sin(step);
  double ck = c1;
  double sk = s1;
  std::size_t k = 1;
  for (std::size_t j = 1; j < out.size(); j += 2, ++k) {
    if (k > 1) {
      if (k % 32 == 0) {
        ck = std::cos(step * static_cast<double>(k));
        sk = std::sin(step * static_cast<double>(k));
      } else {
        const double cn = ck * c1 - sk * s1;
        sk = sk * c1 + ck * s1;
        ck = cn;
      }
    }
    out[j] = kFourierBound * ck;
    if (j + 1 < out.size()) out[j + 1] = kFourierBound * sk;
  }
}

}  // namespace fourier

// Sum_{m >= first} m^{-exponent}, exponent > 1.
inline double zeta_tail(double exponent, double first) {
  require(exponent > 1.0, "zeta_tail: exponent must exceed 1");
  first = std::max(first, 1.0);
  double total = 0.0;
  constexpr int kDirect = 32;
  for (int i = 0; i < kDirect; ++i) total += std::pow(first + i, -exponent);
  const double m = first + kDirect;
  const double a = exponent;
  // Euler-Maclaurin remainder.
  total += std::pow(m, 1.0 - a) / (a - 1.0) + 0.5 * std::pow(m, -a) + a * std::pow(m, -a - 1.0) / 12.0 -
           a * (a + 1.0) * (a + 2.0) * std::pow(m, -a - 3.0) / 720.0;
  return total;
}

// Sum_{m >= first} min{cap, scale * m^{-exponent}}.
inline double power_tail_min(double cap, double scale, double exponent, double first) {
  if (scale <= 0.0 || cap <= 0.0) return 0.0;
  if (std::isinf(cap)) return scale * zeta_tail(exponent, first);
  const double crossing = std::floor(std::pow(scale / cap, 1.0 / exponent));
  const double capped = std::max(0.0, crossing - first + 1.0);
  return cap * capped + scale * zeta_tail(exponent, std::max(first, crossing + 1.0));
}

[[nodiscard]] inline bool is_nonincreasing(std::span<const double> values) {
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[i - 1]) return false;
  return true;
}

// sup_i i^{1/p} lambda_i over the supplied (finite) sequence.
inline double weak_lp_norm(std::span<const double> lambda, double p) {
  require(p > 0.0 && p <= 1.0, "weak_lp_norm: p must lie in (0, 1]");
  require(is_nonincreasing(lambda), "weak_lp_norm: eigenvalues must be nonincreasing");
  double best = 0.0;
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    require(lambda[i] >= 0.0, "weak_lp_norm: eigenvalues must be nonnegative");
    best = std::max(best, std::pow(static_cast<double>(i + 1), 1.0 / p) * lambda[i]);
  }
  return best;
}

struct EigenSpec {
  double p = 0.5;
  double scale = 1.0;
  double basis_bound = kFourierBound;
  double weak_lp = 0.0;
  std::vector<double> eigenvalues;
  // True when the eigenvalues are the scaled power law produced by
  // build_spec, so the untruncated tail has a closed form.
  bool power_law_tail = false;

  [[nodiscard]] std::size_t size() const { return eigenvalues.size(); }
  [[nodiscard]] bool diagnostic() const { return p >= 1.0; }

  // Sum_{j >= N} min{cap, r^2 lambda_j} over the continuation of the power
  // law; zero when no closed form is available.
  [[nodiscard]] double tail_sum_min(double cap, double r) const {
    if (!power_law_tail || diagnostic() || eigenvalues.empty()) return 0.0;
    const double exponent = 1.0 / p;
    const double r2s = r * r * scale;
    const std::size_t last = eigenvalues.size() - 1;
    const std::size_t k_last = fourier::frequency(last);
    double total = 0.0;
    if (last >= 1 && last % 2 == 1) {
      total += std::min(cap, r2s * std::pow(static_cast<double>(k_last + 1), -exponent));
    }
    total += 2.0 * power_tail_min(cap, r2s, exponent, static_cast<double>(k_last + 2));
    return total;
  }

  [[nodiscard]] double tail_sum() const {
    return tail_sum_min(std::numeric_limits<double>::infinity(), 1.0);
  }
};

inline double raw_eigenvalue(std::size_t j, double p) {
  return std::pow(static_cast<double>(fourier::frequency(j) + 1), -1.0 / p);
}

// Largest value of sum_j lambda_j phi_j(x)^2 over an equispaced grid.
inline double max_diagonal(std::span<const double> lambda, std::size_t grid_points) {
  std::vector<double> phi(lambda.size());
  double best = 0.0;
  for (std::size_t g = 0; g < grid_points; ++g) {
    const double x = static_cast<double>(g) / static_cast<double>(grid_points - 1);
    fourier::fill_basis(x, phi);
    double diag = 0.0;
    for (std::size_t j = 0; j < lambda.size(); ++j) diag += lambda[j] * phi[j] * phi[j];
    best = std::max(best, diag);
  }
  return best;
}

inline constexpr std::size_t kNormalizationGrid = 10000;
inline constexpr double kNormalizationMargin = 1.1;

// Fourier-basis spectrum with lambda = s * (k + 1)^{-1/p} for frequency k,
// scaled so that sup_x K(x, x) <= 1 / 1.1.
inline EigenSpec build_spec(double p, std::size_t truncation = kDefaultTruncation,
                            double basis_bound = kFourierBound) {
  require(p > 0.0 && p <= 1.0, "build_spec: p must lie in (0, 1) (p = 1 allowed for diagnostics)");
  require(truncation >= 1, "build_spec: truncation must be at least 1");
  EigenSpec spec;
  spec.p = p;
  spec.basis_bound = basis_bound;
  spec.power_law_tail = true;
  std::vector<double> raw(truncation);
  for (std::size_t j = 0; j < truncation; ++j) raw[j] = raw_eigenvalue(j, p);
  spec.scale = 1.0 / (kNormalizationMargin * max_diagonal(raw, kNormalizationGrid));
  spec.eigenvalues.resize(truncation);
  for (std::size_t j = 0; j < truncation; ++j) spec.eigenvalues[j] = spec.scale * raw[j];
  spec.weak_lp = weak_lp_norm(spec.eigenvalues, p);
  return spec;
}

inline void check_point(double x) {
  require(x >= 0.0 && x <= 1.0, "point outside [0, 1]");
}

inline double kernel_eval(const EigenSpec& spec, double x, double y) {
  check_point(x);
  check_point(y);
  const std::size_t n = spec.size();
  std::vector<double> px(n), py(n);
  fourier::fill_basis(x, px);
  fourier::fill_basis(y, py);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) total += spec.eigenvalues[j] * px[j] * py[j];
  return total;
}

inline Eigen::VectorXd feature_vector(const EigenSpec& spec, double x) {
  check_point(x);
  Eigen::VectorXd phi(static_cast<Eigen::Index>(spec.size()));
  fourier::fill_basis(x, std::span<double>(phi.data(), spec.size()));
  for (std::size_t j = 0; j < spec.size(); ++j) phi[static_cast<Eigen::Index>(j)] *= std::sqrt(spec.eigenvalues[j]);
  return phi;
}

// Rows are phi_j(x_i), unweighted.
inline Eigen::MatrixXd basis_matrix(std::size_t truncation, std::span<const double> xs) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(
      static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(truncation));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    check_point(xs[i]);
    fourier::fill_basis(xs[i], std::span<double>(out.row(static_cast<Eigen::Index>(i)).data(), truncation));
  }
  return out;
}

// n x N matrix whose rows are feature vectors Phi(x_i).
inline Eigen::MatrixXd feature_matrix(const EigenSpec& spec, std::span<const double> xs) {
  Eigen::MatrixXd out = basis_matrix(spec.size(), xs);
  for (std::size_t j = 0; j < spec.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) *= std::sqrt(spec.eigenvalues[j]);
  return out;
}

inline Eigen::MatrixXd gram_matrix(const EigenSpec& spec, std::span<const double> xs) {
  const Eigen::MatrixXd features = feature_matrix(spec, xs);
  Eigen::MatrixXd gram = features * features.transpose();
  // Exact symmetry.
  gram = 0.5 * (gram + gram.transpose()).eval();
  return gram;
}

// Serialization: {"p", "truncation", "scale", "basis_bound", "weak_lp",
// "power_law_tail", "eigenvalues": [...]}.
inline nlohmann::json to_json(const EigenSpec& spec) {
  return nlohmann::json{{"p", spec.p},
                        {"truncation", spec.size()},
                        {"scale", spec.scale},
                        {"basis_bound", spec.basis_bound},
                        {"weak_lp", spec.weak_lp},
                        {"power_law_tail", spec.power_law_tail},
                        {"eigenvalues", spec.eigenvalues}};
}

inline EigenSpec spec_from_json(const nlohmann::json& doc) {
  EigenSpec spec;
  try {
    spec.p = doc.at("p").get<double>();
    spec.scale = doc.at("scale").get<double>();
    spec.basis_bound = doc.at("basis_bound").get<double>();
    spec.weak_lp = doc.at("weak_lp").get<double>();
    spec.power_law_tail = doc.value("power_law_tail", false);
    spec.eigenvalues = doc.at("eigenvalues").get<std::vector<double>>();
    if (doc.at("truncation").get<std::size_t>() != spec.eigenvalues.size())
      throw FormatError("spec document: truncation does not match eigenvalue count");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("spec document: ") + e.what());
  }
  require(is_nonincreasing(spec.eigenvalues), "spec document: eigenvalues must be nonincreasing");
  return spec;
}

inline void save_spec(const EigenSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path);
  out << to_json(spec).dump(2) << '\n';
}

inline EigenSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("spec document: ") + e.what());
  }
  return spec_from_json(doc);
}

}  // namespace rkhs
