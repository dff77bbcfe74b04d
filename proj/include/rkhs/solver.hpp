#pragma once

// Regularized empirical risk minimization over an RKHS. The search over
// norm levels runs along the ridge path: for the squared loss, the ridge
// solution at penalty eta is the empirical minimizer over the ball of
// radius ||f_eta||_H, so minimizing P_n l_f + kappa1 * reg(||f||_H) over H
// reduces to a one-dimensional search in eta.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "rkhs/error.hpp"
#include "rkhs/regfunc.hpp"
#include "rkhs/spectrum.hpp"
#include "rkhs/sup_norm.hpp"
#include "rkhs/synth.hpp"

namespace rkhs {

struct RidgeSolveInfo {
  double jitter = 0.0;
  double smallest_pivot = 0.0;
  double residual = 0.0;  // ||(G + n eta I) alpha - y|| / max(1, ||y||)
};

inline constexpr double kResidualTolerance = 1e-8;

// alpha = (G + n eta I)^{-1} y by Cholesky, with one step of iterative
// refinement. A diagonal jitter of 1e-12 trace(G)/n is added when the
// factorization breaks down.
inline Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& gram, const Eigen::VectorXd& ys, double eta,
                                   RidgeSolveInfo* info = nullptr) {
  require(eta > 0.0, "ridge_solve: eta must be positive");
  require(gram.rows() == gram.cols() && gram.rows() == ys.size(), "ridge_solve: dimension mismatch");
  const auto n = gram.rows();
  Eigen::MatrixXd system = gram;
  system.diagonal().array() += static_cast<double>(n) * eta;

  auto smallest_pivot = [](const Eigen::LLT<Eigen::MatrixXd>& llt) {
    return llt.matrixLLT().diagonal().minCoeff();
  };
  Eigen::LLT<Eigen::MatrixXd> llt(system);
  double jitter = 0.0;
  if (llt.info() != Eigen::Success || !(smallest_pivot(llt) > 1e-150)) {
    jitter = 1e-12 * std::max(gram.trace(), 1e-300) / static_cast<double>(n);
    system.diagonal().array() += jitter;
    llt.compute(system);
    if (llt.info() != Eigen::Success || !(smallest_pivot(llt) > 0.0)) {
      std::ostringstream msg;
      msg << "ridge_solve: Cholesky failed (eta = " << eta << ", smallest pivot = " << smallest_pivot(llt) << ")";
      throw NumericalError(msg.str());
    }
  }
  Eigen::VectorXd alpha = llt.solve(ys);
  alpha += llt.solve(ys - system * alpha);
  const double scale = std::max(1.0, ys.norm());
  const double residual = (system * alpha - ys).norm() / scale;
  if (info != nullptr) *info = {jitter, smallest_pivot(llt), residual};
  return alpha;
}

struct FrontierPoint {
  double eta = 0.0;
  Eigen::VectorXd alpha;   // kernel-section coefficients
  Eigen::VectorXd coords;  // H coordinates t = Phi^T alpha (empty without a spectrum)
  double norm = 0.0;       // ||f||_H
  double loss = 0.0;       // (1/n) sum (f(X_i) - y_i)^2
  double jitter = 0.0;
  double residual = 0.0;
};

// A ridge problem that can be solved at any penalty.
class RidgeSystem {
 public:
  virtual ~RidgeSystem() = default;
  [[nodiscard]] virtual FrontierPoint solve(double eta) const = 0;
  // f(X_i) for a coefficient vector.
  [[nodiscard]] virtual Eigen::VectorXd fitted_values(const Eigen::VectorXd& alpha) const = 0;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(ys_.size()); }
  [[nodiscard]] const Eigen::VectorXd& responses() const { return ys_; }
  [[nodiscard]] const std::vector<double>& anchors() const { return anchors_; }
  [[nodiscard]] const std::optional<EigenSpec>& spectrum() const { return spec_; }

  // trace(G) for the Gram matrix G of the sample.
  [[nodiscard]] virtual double gram_trace() const = 0;

  [[nodiscard]] double mean_square_response() const {
    return ys_.size() == 0 ? 0.0 : ys_.squaredNorm() / static_cast<double>(ys_.size());
  }

 protected:
  Eigen::VectorXd ys_;
  std::vector<double> anchors_;
  std::optional<EigenSpec> spec_;
};

// Dense dual solver over the n x n Gram matrix.
class KernelRidgeSystem final : public RidgeSystem {
 public:
  KernelRidgeSystem(Eigen::MatrixXd gram, Eigen::VectorXd ys) : gram_(std::move(gram)) {
    require(gram_.rows() == gram_.cols() && gram_.rows() == ys.size(), "KernelRidgeSystem: dimension mismatch");
    ys_ = std::move(ys);
  }

  KernelRidgeSystem(const EigenSpec& spec, const SampleSet& sample)
      : KernelRidgeSystem(gram_matrix(spec, sample.xs),
                          Eigen::Map<const Eigen::VectorXd>(sample.ys.data(), static_cast<Eigen::Index>(sample.size()))) {
    anchors_ = sample.xs;
    spec_ = spec;
    features_ = feature_matrix(spec, sample.xs);
  }

  [[nodiscard]] FrontierPoint solve(double eta) const override {
    FrontierPoint pt;
    RidgeSolveInfo info;
    pt.eta = eta;
    pt.alpha = ridge_solve(gram_, ys_, eta, &info);
    pt.jitter = info.jitter;
    pt.residual = info.residual;
    const Eigen::VectorXd fitted = gram_ * pt.alpha;
    pt.norm = std::sqrt(std::max(0.0, pt.alpha.dot(fitted)));
    pt.loss = (fitted - ys_).squaredNorm() / static_cast<double>(size());
    if (features_.size() > 0) pt.coords = features_.transpose() * pt.alpha;
    return pt;
  }

  [[nodiscard]] Eigen::VectorXd fitted_values(const Eigen::VectorXd& alpha) const override { return gram_ * alpha; }

  [[nodiscard]] double gram_trace() const override { return gram_.trace(); }

  [[nodiscard]] const Eigen::MatrixXd& gram() const { return gram_; }

 private:
  Eigen::MatrixXd gram_;
  Eigen::MatrixXd features_;
};

// Finite-rank solver: with G = Phi Phi^T (Phi is n x N), the ridge solution
// is alpha = (y - Phi w) / (n eta) where (Phi^T Phi + n eta I) w = Phi^T y.
// One N x N eigendecomposition serves every penalty.
class FeatureRidgeSystem final : public RidgeSystem {
 public:
  FeatureRidgeSystem(const EigenSpec& spec, const SampleSet& sample) {
    anchors_ = sample.xs;
    spec_ = spec;
    ys_ = Eigen::Map<const Eigen::VectorXd>(sample.ys.data(), static_cast<Eigen::Index>(sample.size()));
    features_ = feature_matrix(spec, sample.xs);
    const Eigen::MatrixXd moment = features_.transpose() * features_;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(moment);
    if (eig.info() != Eigen::Success) throw NumericalError("FeatureRidgeSystem: eigendecomposition failed");
    eigenvalues_ = eig.eigenvalues().cwiseMax(0.0);
    eigenvectors_ = eig.eigenvectors();
    cross_ = features_.transpose() * ys_;
    rotated_ = eigenvectors_.transpose() * cross_;
  }

  [[nodiscard]] FrontierPoint solve(double eta) const override {
    require(eta > 0.0, "FeatureRidgeSystem::solve: eta must be positive");
    const double n_eta = static_cast<double>(size()) * eta;
    FrontierPoint pt;
    pt.eta = eta;
    const Eigen::VectorXd scaled = rotated_.array() / (eigenvalues_.array() + n_eta);
    pt.coords = eigenvectors_ * scaled;
    const Eigen::VectorXd fitted = features_ * pt.coords;
    pt.alpha = (ys_ - fitted) / n_eta;
    pt.norm = pt.coords.norm();
    pt.loss = (fitted - ys_).squaredNorm() / static_cast<double>(size());
    const Eigen::VectorXd normal = features_.transpose() * fitted + n_eta * pt.coords - cross_;
    pt.residual = normal.norm() / std::max(1.0, cross_.norm());
    return pt;
  }

  [[nodiscard]] Eigen::VectorXd fitted_values(const Eigen::VectorXd& alpha) const override {
    return features_ * (features_.transpose() * alpha);
  }

  [[nodiscard]] double gram_trace() const override { return eigenvalues_.sum(); }

  [[nodiscard]] const Eigen::MatrixXd& features() const { return features_; }

 private:
  Eigen::MatrixXd features_;
  Eigen::VectorXd eigenvalues_;
  Eigen::MatrixXd eigenvectors_;
  Eigen::VectorXd cross_;
  Eigen::VectorXd rotated_;
};

// Picks the dense dual solver for small samples and the finite-rank solver
// otherwise; both return the same ridge solutions.
inline std::shared_ptr<const RidgeSystem> make_ridge_system(const EigenSpec& spec, const SampleSet& sample) {
  if (sample.size() <= spec.size()) return std::make_shared<KernelRidgeSystem>(spec, sample);
  return std::make_shared<FeatureRidgeSystem>(spec, sample);
}

struct Frontier {
  std::vector<FrontierPoint> points;  // eta decreasing
  std::shared_ptr<const RidgeSystem> system;
};

inline constexpr double kMonotoneSlack = 1e-10;
inline constexpr std::size_t kFrontierCap = 10000;
inline constexpr double kEtaFloor = 1e-12;

// Log-spaced, decreasing: `per_decade` points per factor 10 from hi to lo.
inline std::vector<double> log_grid(double hi, double lo, int per_decade = 10) {
  require(hi > lo && lo > 0.0 && per_decade >= 1, "log_grid: need hi > lo > 0");
  const int count = static_cast<int>(std::ceil(std::log10(hi / lo) * per_decade)) + 1;
  std::vector<double> grid(static_cast<std::size_t>(count));
  const double step = std::log(hi / lo) / (count - 1);
  for (int i = 0; i < count; ++i) grid[static_cast<std::size_t>(i)] = hi * std::exp(-step * i);
  return grid;
}

inline std::vector<double> default_eta_grid() { return log_grid(1e3, 1e-9, 10); }

// Throws when the frontier is not monotone: moving toward smaller eta the
// norm must not decrease and the empirical loss must not increase.
inline void check_frontier(const Frontier& frontier) {
  const auto& pts = frontier.points;
  for (std::size_t k = 1; k < pts.size(); ++k) {
    const bool norm_ok = pts[k].norm >= pts[k - 1].norm - kMonotoneSlack * std::max(1.0, pts[k - 1].norm);
    const bool loss_ok = pts[k].loss <= pts[k - 1].loss + kMonotoneSlack * std::max(1.0, pts[k - 1].loss);
    if (!norm_ok || !loss_ok) {
      std::ostringstream msg;
      msg << "frontier not monotone between eta = " << pts[k - 1].eta << " and " << pts[k].eta;
      throw NumericalError(msg.str());
    }
  }
}

inline Frontier build_frontier(std::shared_ptr<const RidgeSystem> system, std::vector<double> eta_grid) {
  require(eta_grid.size() >= 20, "build_frontier: eta grid needs at least 20 points");
  for (std::size_t k = 1; k < eta_grid.size(); ++k)
    require(eta_grid[k] < eta_grid[k - 1] && eta_grid[k] > 0.0, "build_frontier: eta grid must decrease");
  const double ratio = eta_grid[0] / eta_grid[1];
  for (std::size_t k = 2; k < eta_grid.size(); ++k)
    require(std::abs(eta_grid[k - 1] / eta_grid[k] / ratio - 1.0) < 1e-6, "build_frontier: eta grid must be log-spaced");

  Frontier frontier;
  frontier.system = std::move(system);
  auto& pts = frontier.points;
  for (double eta : eta_grid) pts.push_back(frontier.system->solve(eta));

  constexpr double kZeroNorm = 1e-6;
  constexpr double kLossTol = 1e-6;
  while (pts.front().norm > kZeroNorm) {
    if (pts.size() >= kFrontierCap) throw NumericalError("build_frontier: grid extension cap exceeded (large eta)");
    pts.insert(pts.begin(), frontier.system->solve(pts.front().eta * ratio));
  }
  const double loss_scale = frontier.system->mean_square_response();
  // n eta at the jitter level of ridge_solve: smaller penalties are not
  // resolved in double precision.
  const double n = static_cast<double>(std::max<std::size_t>(frontier.system->size(), 1));
  const double eta_floor = kEtaFloor * frontier.system->gram_trace() / (n * n);
  auto settled = [&] {
    const std::size_t m = pts.size();
    return std::abs(pts[m - 2].loss - pts[m - 1].loss) <= kLossTol * loss_scale || pts[m - 1].eta <= eta_floor;
  };
  while (!settled()) {
    if (pts.size() >= kFrontierCap) throw NumericalError("build_frontier: grid extension cap exceeded (small eta)");
    pts.push_back(frontier.system->solve(pts.back().eta / ratio));
  }
  check_frontier(frontier);
  return frontier;
}

inline Frontier build_frontier(const Eigen::MatrixXd& gram, const Eigen::VectorXd& ys,
                               std::vector<double> eta_grid = default_eta_grid()) {
  return build_frontier(std::make_shared<KernelRidgeSystem>(gram, ys), std::move(eta_grid));
}

struct FittedFunction {
  Eigen::VectorXd alpha;
  std::vector<double> anchors;
  double eta = 0.0;  // infinity for the zero function
  double norm = 0.0;
  double loss = 0.0;
  double objective = 0.0;
  double jitter = 0.0;
  std::vector<double> coeffs;  // L2 eigencoordinates c_j = sqrt(lambda_j) t_j

  // f(x) = sum_i alpha_i K(x_i, x)
  [[nodiscard]] double operator()(const EigenSpec& spec, double x) const {
    double total = 0.0;
    for (std::size_t i = 0; i < anchors.size(); ++i) total += alpha[static_cast<Eigen::Index>(i)] * kernel_eval(spec, anchors[i], x);
    return total;
  }

  // f(x) = sum_j c_j phi_j(x)
  [[nodiscard]] double eigen_eval(double x) const {
    std::vector<double> phi(coeffs.size());
    fourier::fill_basis(x, phi);
    return std::inner_product(coeffs.begin(), coeffs.end(), phi.begin(), 0.0);
  }
};

inline std::vector<double> l2_coordinates(const EigenSpec& spec, const Eigen::VectorXd& h_coords) {
  std::vector<double> c(spec.size());
  for (std::size_t j = 0; j < spec.size(); ++j) c[j] = std::sqrt(spec.eigenvalues[j]) * h_coords[static_cast<Eigen::Index>(j)];
  return c;
}

inline FittedFunction make_fitted(const Frontier& frontier, const FrontierPoint& pt, double objective) {
  FittedFunction f;
  f.alpha = pt.alpha;
  f.anchors = frontier.system->anchors();
  f.eta = pt.eta;
  f.norm = pt.norm;
  f.loss = pt.loss;
  f.objective = objective;
  f.jitter = pt.jitter;
  if (frontier.system->spectrum() && pt.coords.size() > 0) f.coeffs = l2_coordinates(*frontier.system->spectrum(), pt.coords);
  return f;
}

// Minimizes P_n l_f + kappa1 * reg(||f||_H, u) along the frontier, then
// refines by golden-section search in log eta between the neighbours of the
// best grid point (40 solves). The zero function (eta = infinity) is also a
// candidate. Ties go to the smaller norm.
inline FittedFunction regularized_erm(const Frontier& frontier, const RegularizerSpec& reg, double u) {
  require(!frontier.points.empty(), "regularized_erm: empty frontier");
  const double kappa = reg.constants.kappa1;
  auto objective = [&](const FrontierPoint& pt) { return pt.loss + kappa * evaluate_regularizer(reg, pt.norm, u); };
  auto better = [](double obj, double norm, double best_obj, double best_norm) {
    const double tie = 1e-14 * std::max(1.0, std::abs(best_obj));
    if (obj < best_obj - tie) return true;
    return std::abs(obj - best_obj) <= tie && norm < best_norm;
  };

  const auto& pts = frontier.points;
  std::size_t best_index = 0;
  double best_obj = objective(pts[0]);
  for (std::size_t k = 1; k < pts.size(); ++k) {
    const double obj = objective(pts[k]);
    if (better(obj, pts[k].norm, best_obj, pts[best_index].norm)) {
      best_index = k;
      best_obj = obj;
    }
  }
  FrontierPoint best = pts[best_index];
  const std::size_t lo_index = best_index == 0 ? 0 : best_index - 1;
  const std::size_t hi_index = std::min(best_index + 1, pts.size() - 1);
  double a = std::log(pts[hi_index].eta), b = std::log(pts[lo_index].eta);
  if (b > a) {
    constexpr double kInvPhi = 0.6180339887498949;
    auto probe = [&](double log_eta) {
      FrontierPoint candidate = frontier.system->solve(std::exp(log_eta));
      const double obj = objective(candidate);
      if (better(obj, candidate.norm, best_obj, best.norm)) {
        best_obj = obj;
        best = candidate;
      }
      return obj;
    };
    double c = b - kInvPhi * (b - a), d = a + kInvPhi * (b - a);
    double fc = probe(c), fd = probe(d);
    for (int step = 0; step < 38; ++step) {
      if (fc <= fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - kInvPhi * (b - a);
        fc = probe(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + kInvPhi * (b - a);
        fd = probe(d);
      }
    }
  }
  // The eta -> infinity end of the path: the zero function.
  FrontierPoint zero;
  zero.eta = std::numeric_limits<double>::infinity();
  zero.alpha = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(frontier.system->size()));
  if (frontier.system->spectrum()) zero.coords = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(frontier.system->spectrum()->size()));
  zero.loss = frontier.system->mean_square_response();
  const double zero_obj = objective(zero);
  if (better(zero_obj, 0.0, best_obj, best.norm)) {
    best = std::move(zero);
    best_obj = zero_obj;
  }
  return make_fitted(frontier, best, best_obj);
}

// ---------------------------------------------------------------------------
// H_1 membership diagnostic

struct H1Report {
  double sup_norm = 0.0;
  double membership = 0.0;          // kappa3 (||f||_inf / ||f||_H^p)^{2/(1-p)}
  bool in_h1 = true;                // membership <= 50, or f = 0
  double empirical_second_moment = 0.0;  // P_n f^2
  bool second_moment_guard = false;      // P_n f^2 >= 9
  double population_second_moment = 0.0;  // E f^2, exact
  double lemma51_ratio = 0.0;  // E f^2 / (||f||_inf / ||f||_H^p)^{2/(1-p)}
};

inline constexpr std::size_t kDiagnosticGrid = 20000;

inline H1Report h1_diagnostic(const FittedFunction& f, const EigenSpec& spec, double kappa3, const SampleSet& sample) {
  require(f.coeffs.size() == spec.size(), "h1_diagnostic: fitted function lacks eigencoordinates");
  require(spec.p < 1.0, "h1_diagnostic: requires p < 1");
  H1Report report;
  const SupNormEvaluator sup(spec.size(), kDiagnosticGrid);
  report.sup_norm = sup.sup(f.coeffs);
  for (double c : f.coeffs) report.population_second_moment += c * c;
  double moment = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double v = f.eigen_eval(sample.xs[i]);
    moment += v * v;
  }
  report.empirical_second_moment = sample.size() > 0 ? moment / static_cast<double>(sample.size()) : 0.0;
  report.second_moment_guard = report.empirical_second_moment >= 9.0;
  const double exponent = 2.0 / (1.0 - spec.p);
  if (f.norm > 0.0 && report.sup_norm > 0.0) {
    const double shape = std::pow(report.sup_norm / std::pow(f.norm, spec.p), exponent);
    report.membership = kappa3 * shape;
    report.in_h1 = report.membership <= 50.0;
    report.lemma51_ratio = report.population_second_moment / shape;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Serialization: {"anchors", "alpha", "eta", "norm", "loss", "objective",
// "jitter", "config_hash"}. Evaluation only needs the spectrum.

inline nlohmann::json to_json(const FittedFunction& f, const std::string& config_hash) {
  return nlohmann::json{{"anchors", f.anchors},
                        {"alpha", std::vector<double>(f.alpha.data(), f.alpha.data() + f.alpha.size())},
                        {"eta", std::isinf(f.eta) ? nlohmann::json(nullptr) : nlohmann::json(f.eta)},
                        {"norm", f.norm},
                        {"loss", f.loss},
                        {"objective", f.objective},
                        {"jitter", f.jitter},
                        {"config_hash", config_hash}};
}

inline FittedFunction fitted_from_json(const nlohmann::json& doc, const EigenSpec& spec) {
  FittedFunction f;
  try {
    f.anchors = doc.at("anchors").get<std::vector<double>>();
    const auto alpha = doc.at("alpha").get<std::vector<double>>();
    if (alpha.size() != f.anchors.size()) throw FormatError("fitted function: alpha/anchors size mismatch");
    f.alpha = Eigen::Map<const Eigen::VectorXd>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
    f.eta = doc.at("eta").is_null() ? std::numeric_limits<double>::infinity() : doc.at("eta").get<double>();
    f.norm = doc.at("norm").get<double>();
    f.loss = doc.at("loss").get<double>();
    f.objective = doc.value("objective", 0.0);
    f.jitter = doc.value("jitter", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("fitted function: ") + e.what());
  }
  // Recover eigencoordinates c_j = lambda_j sum_i alpha_i phi_j(x_i).
  const Eigen::MatrixXd basis = basis_matrix(spec.size(), f.anchors);
  const Eigen::VectorXd projected = basis.transpose() * f.alpha;
  f.coeffs.resize(spec.size());
  for (std::size_t j = 0; j < spec.size(); ++j) f.coeffs[j] = spec.eigenvalues[j] * projected[static_cast<Eigen::Index>(j)];
  return f;
}

}  // namespace rkhs
