#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "rkhs/spectrum.hpp"

namespace rkhs {

// Evaluates sup_x |sum_j c_j phi_j(x)| for trigonometric polynomials in the
// Fourier basis: maximization over an equispaced periodic grid followed by
// golden-section refinement around the best grid point.
class SupNormEvaluator {
 public:
  SupNormEvaluator(std::size_t truncation, std::size_t grid_points)
      : truncation_(truncation), grid_points_(grid_points) {
    std::vector<double> xs(grid_points);
    for (std::size_t g = 0; g < grid_points; ++g) xs[g] = static_cast<double>(g) / static_cast<double>(grid_points);
    basis_ = basis_matrix(truncation, xs);
  }

  [[nodiscard]] std::size_t truncation() const { return truncation_; }
  [[nodiscard]] std::size_t grid_points() const { return grid_points_; }

  [[nodiscard]] double evaluate(std::span<const double> coeffs, double x) const {
    x -= std::floor(x);
    std::vector<double> phi(coeffs.size());
    fourier::fill_basis(x, phi);
    return std::inner_product(coeffs.begin(), coeffs.end(), phi.begin(), 0.0);
  }

  [[nodiscard]] double sup(std::span<const double> coeffs) const {
    Eigen::Map<const Eigen::VectorXd> c(coeffs.data(), static_cast<Eigen::Index>(coeffs.size()));
    const Eigen::VectorXd values = basis_.leftCols(c.size()) * c;
    return refine(coeffs, values);
  }

  // One sup per column of `coeffs` (truncation x m).
  [[nodiscard]] std::vector<double> sup_batch(const Eigen::MatrixXd& coeffs) const {
    const Eigen::MatrixXd values = basis_.leftCols(coeffs.rows()) * coeffs;
    std::vector<double> out(static_cast<std::size_t>(coeffs.cols()));
    std::vector<double> column(static_cast<std::size_t>(coeffs.rows()));
    for (Eigen::Index k = 0; k < coeffs.cols(); ++k) {
      Eigen::VectorXd::Map(column.data(), coeffs.rows()) = coeffs.col(k);
      out[static_cast<std::size_t>(k)] = refine(column, values.col(k));
    }
    return out;
  }

 private:
  template <class Values>
  double refine(std::span<const double> coeffs, const Values& values) const {
    Eigen::Index best = 0;
    values.cwiseAbs().maxCoeff(&best);
    const double h = 1.0 / static_cast<double>(grid_points_);
    double lo = static_cast<double>(best) * h - h;
    double hi = static_cast<double>(best) * h + h;
    auto f = [&](double x) { return std::abs(evaluate(coeffs, x)); };
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = hi - inv_phi * (hi - lo);
    double b = lo + inv_phi * (hi - lo);
    double fa = f(a);
    double fb = f(b);
    for (int it = 0; it < 80; ++it) {
      if (fa < fb) {
        lo = a;
        a = b;
        fa = fb;
        b = lo + inv_phi * (hi - lo);
        fb = f(b);
      } else {
        hi = b;
        b = a;
        fb = fa;
        a = hi - inv_phi * (hi - lo);
        fa = f(a);
      }
    }
    return std::max({std::abs(values(best)), fa, fb});
  }

  std::size_t truncation_;
  std::size_t grid_points_;
  Eigen::MatrixXd basis_;
};

}  // namespace rkhs
