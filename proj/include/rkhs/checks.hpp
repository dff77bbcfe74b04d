#pragma once

// The check suite: each check returns one table row with the statistic it
// measured, the threshold it was held to and a pass flag. Complexity sweeps
// produce their own tables and feed the scaling checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "rkhs/complexity.hpp"
#include "rkhs/experiment.hpp"
#include "rkhs/regfunc.hpp"
#include "rkhs/spectrum.hpp"
#include "rkhs/synth.hpp"

namespace rkhs {

struct CheckRow {
  std::string check;
  std::string params;
  double statistic = 0.0;
  std::string threshold;
  bool pass = false;
  std::string message;
};

namespace detail {

inline constexpr std::uint64_t kCheckStream = 3;
inline constexpr std::uint64_t kComplexityStream = 4;

inline std::string num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

inline std::vector<double> log_points(double lo, double hi, std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t k = 0; k < count; ++k)
    out[k] = lo * std::pow(hi / lo, static_cast<double>(k) / static_cast<double>(count - 1));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fixed point

struct FixedPointSweep {
  std::vector<double> ns;
  std::vector<double> z;
};

// z(n) on lambda_i = i^{-1/p}, i <= length, plus the analytic tail.
inline FixedPointSweep fixed_point_sweep(double p, double c_tilde, int min_exp, int max_exp, std::size_t length) {
  std::vector<double> lambda(length);
  for (std::size_t i = 0; i < length; ++i) lambda[i] = std::pow(static_cast<double>(i + 1), -1.0 / p);
  const double first = static_cast<double>(length + 1);
  FixedPointSweep out;
  for (int e = min_exp; e <= max_exp; ++e) {
    const double n = std::ldexp(1.0, e);
    out.ns.push_back(n);
    out.z.push_back(
        fixed_point_z(lambda, n, c_tilde, [&](double z) { return power_tail_min(z, 1.0, 1.0 / p, first); }));
  }
  return out;
}

inline CheckRow check_fixed_point_slope(double p, double c_tilde, int min_exp, int max_exp, std::size_t length,
                                        double tolerance = 0.03) {
  const auto sweep = fixed_point_sweep(p, c_tilde, min_exp, max_exp, length);
  const SlopeFit fit = fit_loglog(sweep.ns, sweep.z);
  const double target = -1.0 / (1.0 + p);
  CheckRow row{"fixed_point_slope",
               "p=" + detail::num(p) + ";c_tilde=" + detail::num(c_tilde) + ";n=2^" + std::to_string(min_exp) +
                   "..2^" + std::to_string(max_exp),
               fit.slope, detail::num(target) + "+-" + detail::num(tolerance), false, ""};
  row.pass = std::abs(fit.slope - target) <= tolerance;
  row.message = "predicted " + detail::num(target);
  return row;
}

// z(n) against c_p (Lambda / n)^{1/(1+p)} with Lambda = 1.
inline CheckRow check_fixed_point_constant(double p, const Constants& c, int min_exp, int max_exp, std::size_t length) {
  const auto sweep = fixed_point_sweep(p, c.c_tilde, min_exp, max_exp, length);
  double worst = 0.0;
  for (std::size_t k = 0; k < sweep.ns.size(); ++k) {
    const double predicted = c.c_p * std::pow(1.0 / sweep.ns[k], 1.0 / (1.0 + p));
    worst = std::max(worst, std::abs(std::log(sweep.z[k] / predicted)));
  }
  CheckRow row{"fixed_point_constant",
               "p=" + detail::num(p) + ";c_tilde=" + detail::num(c.c_tilde) + ";c_p=" + detail::num(c.c_p),
               std::exp(worst), "<=10", false, ""};
  row.pass = std::exp(worst) <= 10.0;
  row.message = "largest factor between z(n) and c_p (1/n)^{1/(1+p)}";
  return row;
}

// ---------------------------------------------------------------------------
// Sum-min ratio

inline CheckRow check_lemma34(const EigenSpec& spec, std::size_t grid = 41) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  const double lambda1 = spec.eigenvalues.front();
  for (double x : detail::log_points(1e-6, 1.0, grid)) {
    for (double r : detail::log_points(1.0, 1e3, grid)) {
      if (x > r * r * lambda1) continue;
      const double ratio = lemma34_ratio(x, r, spec);
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
    }
  }
  CheckRow row{"lemma34_ratio", "p=" + detail::num(spec.p) + ";N=" + std::to_string(spec.size()) +
                                    ";x=1e-6..1;r=1..1e3",
               hi / lo, "<=10", false, ""};
  row.pass = hi / lo <= 10.0;
  row.message = "ratio range [" + detail::num(lo) + ", " + detail::num(hi) + "]";
  return row;
}

// ---------------------------------------------------------------------------
// Approximation error

inline CheckRow check_approximation(double p, std::size_t truncation, double sigma, double q, double tolerance = 0.1) {
  const EigenSpec spec = build_spec(p, truncation);
  const RegressionTask task = make_power_target(spec, sigma, q);
  std::vector<double> rs, excess;
  bool holds = true;
  double worst = 0.0;
  for (double r = 1.0; r <= 256.0; r *= 2.0) {
    const ApproximationCheck a = check_approx_bound(task, r);
    holds = holds && a.holds();
    worst = std::max(worst, a.exact / a.bound);
    rs.push_back(r);
    excess.push_back(best_in_ball(task, r).excess);
  }
  const std::size_t half = rs.size() / 2;
  const SlopeFit fit = fit_loglog(std::span(rs).subspan(half), std::span(excess).subspan(half));
  const double target = -4.0 * sigma / (1.0 - 2.0 * sigma);
  CheckRow row{"approximation_error",
               "p=" + detail::num(p) + ";sigma=" + detail::num(sigma) + ";q=" + detail::num(q) + ";r=1..256",
               fit.slope, detail::num(target) + "+-" + detail::num(100 * tolerance) + "%", false, ""};
  row.pass = holds && std::abs(fit.slope - target) <= tolerance * std::abs(target);
  row.message = std::string(holds ? "bound holds" : "bound violated") + "; max exact/bound " + detail::num(worst);
  return row;
}

// ---------------------------------------------------------------------------
// Localization inclusion and sup-norm ratio

inline CheckRow check_lemma41(const RegressionTask& task, double r, double x, std::size_t samples,
                              std::uint64_t seed) {
  const InclusionResult res = lemma41_check(task, r, x, samples, seed);
  CheckRow row{"lemma41_inclusion",
               "sigma=" + detail::num(task.sigma) + ";r=" + detail::num(r) + ";x=" + detail::num(x) +
                   ";samples=" + std::to_string(samples),
               res.max_ratio, "<=1", false, ""};
  row.pass = res.max_ratio <= 1.0;
  row.message = "distance " + detail::num(res.max_distance_ratio) + "; variance " +
                detail::num(res.max_variance_ratio) + "; proposals " + std::to_string(res.proposals);
  return row;
}

inline CheckRow check_lemma51(double p, std::size_t truncation, std::size_t m, std::uint64_t seed) {
  const Lemma51Result base = lemma51_check(build_spec(p, truncation), m, seed);
  const Lemma51Result wide = lemma51_check(build_spec(p, 2 * truncation - 1), m, seed);
  const double change = std::max(base.min_ratio / wide.min_ratio, wide.min_ratio / base.min_ratio);
  CheckRow row{"lemma51_ratio",
               "p=" + detail::num(p) + ";N=" + std::to_string(truncation) + "/" + std::to_string(2 * truncation - 1) +
                   ";m=" + std::to_string(m),
               base.min_ratio, ">0;change<=2", false, ""};
  row.pass = base.min_ratio > 0.0 && wide.min_ratio > 0.0 && change <= 2.0;
  row.message = "min ratio " + detail::num(base.min_ratio) + " (" + base.argmin_family + ") vs " +
                detail::num(wide.min_ratio) + " (" + wide.argmin_family + ")";
  return row;
}

// ---------------------------------------------------------------------------
// Peeling sum

inline CheckRow check_peeling(const EigenSpec& spec, const Constants& c, double n) {
  const double bound = peeling_constant(spec.p);
  double worst = 0.0;
  for (double x : detail::log_points(1e-6, 1.0, 25)) {
    for (double r : {1.0, 4.0, 32.0}) {
      for (double el : {0.0, 1e-3, 1e-1}) {
        const double base = phi_tilde(x, r, n, el, spec, c);
        if (base <= 0.0) continue;
        double total = 0.0;
        for (int i = 0; i <= 60; ++i) total += std::ldexp(1.0, -i) * phi_tilde(std::ldexp(x, i + 1), r, n, el, spec, c);
        worst = std::max(worst, total / (bound * base));
      }
    }
  }
  CheckRow row{"peeling_sum", "p=" + detail::num(spec.p) + ";n=" + detail::num(n) + ";x=1e-6..1", worst, "<=1", false, ""};
  row.pass = worst <= 1.0 + 1e-12;
  row.message = "sum relative to " + detail::num(bound) + " phi(x)";
  return row;
}

// ---------------------------------------------------------------------------
// Isomorphic inequality

struct IsomorphismOutcome {
  double calibrated_c = 0.0;
  IsomorphismResult calibration;
  IsomorphismResult test;
};

inline IsomorphismOutcome isomorphism_study(const RegressionTask& task, double r, std::size_t n, std::size_t trials,
                                            double quantile, const Constants& c, std::uint64_t seed) {
  IsomorphismConfig cfg;
  cfg.confidence_c = c.c_Y;
  cfg.u = c.u;
  cfg.trials = trials;
  cfg.seed = derive_seed(seed, {0});
  IsomorphismOutcome out;
  out.calibration = isomorphism_mc(task, r, n, cfg);
  out.calibrated_c = calibrate_threshold(out.calibration, quantile);
  cfg.threshold_c = out.calibrated_c;
  cfg.seed = derive_seed(seed, {1});
  out.test = isomorphism_mc(task, r, n, cfg);
  return out;
}

inline CheckRow check_isomorphism(const RegressionTask& task, double r, std::size_t n, std::size_t trials,
                                  double quantile, double max_failure, const Constants& c, std::uint64_t seed) {
  const IsomorphismOutcome res = isomorphism_study(task, r, n, trials, quantile, c, seed);
  CheckRow row{"isomorphism_mc",
               "p=" + detail::num(task.spec.p) + ";n=" + std::to_string(n) + ";r=" + detail::num(r) +
                   ";trials=" + std::to_string(trials),
               res.test.failure_rate, "<=" + detail::num(max_failure), false, ""};
  row.pass = res.test.failure_rate <= max_failure;
  row.message = "threshold constant " + detail::num(res.calibrated_c) + " from calibration quantile " +
                detail::num(quantile) + "; x " + detail::num(res.test.x);
  return row;
}

// ---------------------------------------------------------------------------
// Complexity sweeps

struct LocalizedRow {
  std::size_t n = 0;
  double x = 0.0;
  double r = 0.0;
  MCEstimate estimate;
  double bound = 0.0;  // ((1/n) sum min{x, r^2 lambda_i})^{1/2}
};

inline std::vector<LocalizedRow> localized_sweep(const EigenSpec& spec, const ComplexityConfig& c, std::uint64_t seed,
                                                 std::size_t jobs) {
  std::vector<std::vector<LocalizedRow>> parts(c.n_exponents.size());
  parallel_for(c.n_exponents.size(), jobs, [&](std::size_t k) {
    const std::size_t n = std::size_t{1} << c.n_exponents[k];
    const MCConfig mc{c.draws, derive_seed(seed, {n})};
    const auto est = localized_gaussian_complexity(spec, n, c.levels, c.r, mc);
    for (std::size_t l = 0; l < c.levels.size(); ++l) {
      const double bound = std::sqrt(sum_min(c.levels[l], c.r, spec, TailMode::Truncated) / static_cast<double>(n));
      parts[k].push_back(LocalizedRow{n, c.levels[l], c.r, est[l], bound});
    }
  });
  std::vector<LocalizedRow> out;
  for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

struct SudakovRow {
  std::size_t n = 0;
  DualSudakov sudakov;
  double c2 = 0.0;  // E||G|| / (sqrt(ln n) max_i ||W_i||)
  DudleyBound dudley;
  double dudley_ratio = 0.0;  // bound / (Q ln n)
};

// Points are prefixes of one uniform stream and the Gaussian draws are shared
// across n.
inline std::vector<SudakovRow> sudakov_sweep(const EigenSpec& spec, const ComplexityConfig& c, std::uint64_t seed,
                                             std::size_t jobs) {
  require(!c.sudakov_exponents.empty(), "sudakov_sweep: empty n sweep");
  const int max_exp = *std::max_element(c.sudakov_exponents.begin(), c.sudakov_exponents.end());
  std::vector<double> stream(std::size_t{1} << max_exp);
  Rng rng = make_rng(derive_seed(seed, {0}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double& v : stream) v = unit(rng);
  const MCConfig mc{c.sudakov_draws, derive_seed(seed, {1})};
  std::vector<SudakovRow> out(c.sudakov_exponents.size());
  parallel_for(out.size(), jobs, [&](std::size_t k) {
    const std::size_t n = std::size_t{1} << c.sudakov_exponents[k];
    const std::span<const double> xs(stream.data(), n);
    SudakovRow row;
    row.n = n;
    row.sudakov = dual_sudakov_bound(spec, xs, c.sudakov_x, c.sudakov_r, 1.0, mc);
    if (row.sudakov.max_row_norm > 0.0)
      row.c2 = row.sudakov.gaussian.mean / (std::sqrt(std::log(static_cast<double>(n))) * row.sudakov.max_row_norm);
    if (n >= 2) {
      row.dudley = dudley_gamma2_bound(spec, xs, c.sudakov_x, c.sudakov_r, mc, c.c4);
      if (row.dudley.q > 0.0) row.dudley_ratio = row.dudley.bound / (row.dudley.q * std::log(static_cast<double>(n)));
    }
    out[k] = row;
  });
  return out;
}

// Wide spectrum with p = 1/2.
inline std::vector<SudakovRow> sudakov_sweep(const ComplexityConfig& c, std::uint64_t seed, std::size_t jobs) {
  const EigenSpec spec = build_spec(0.5, c.sudakov_truncation);
  return sudakov_sweep(spec, c, seed, jobs);
}

inline CheckRow check_localized(const std::vector<LocalizedRow>& rows, double max_spread = 3.0) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& r : rows) {
    if (r.bound <= 0.0) continue;
    const double ratio = r.estimate.mean / r.bound;
    lo = std::min(lo, ratio);
    hi = std::max(hi, ratio);
  }
  CheckRow row{"localized_complexity", "rows=" + std::to_string(rows.size()), hi / lo, "<=" + detail::num(max_spread), false, ""};
  row.pass = hi / lo <= max_spread;
  row.message = "fitted constant range [" + detail::num(lo) + ", " + detail::num(hi) + "]";
  return row;
}

inline CheckRow check_slepian(const std::vector<SudakovRow>& rows, double max_drift = 2.0) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& r : rows) {
    lo = std::min(lo, r.c2);
    hi = std::max(hi, r.c2);
  }
  CheckRow row{"slepian_c2", "n=" + std::to_string(rows.front().n) + ".." + std::to_string(rows.back().n), hi / lo,
               "<=" + detail::num(max_drift), false, ""};
  row.pass = lo > 0.0 && hi / lo <= max_drift;
  row.message = "c2 range [" + detail::num(lo) + ", " + detail::num(hi) + "]";
  return row;
}

// Growth exponent of bound / (Q ln n) in ln n over n >= 2^min_exponent.
inline CheckRow check_dudley(const std::vector<SudakovRow>& rows, int min_exponent) {
  std::vector<double> logs, ratios;
  double hi = 0.0;
  for (const auto& r : rows) {
    if (r.n < (std::size_t{1} << min_exponent) || r.dudley_ratio <= 0.0) continue;
    logs.push_back(std::log(static_cast<double>(r.n)));
    ratios.push_back(r.dudley_ratio);
    hi = std::max(hi, r.dudley_ratio);
  }
  const SlopeFit fit = fit_loglog(logs, ratios);
  CheckRow row{"dudley_ratio", "n=2^" + std::to_string(min_exponent) + ".." + std::to_string(rows.back().n),
               fit.slope, "[0,1]", false, ""};
  row.pass = std::isfinite(hi) && fit.slope >= 0.0 && fit.slope <= 1.0;
  row.message = "max bound/(Q ln n) " + detail::num(hi);
  return row;
}

inline CsvTable localized_table(const std::string& hash, const std::vector<LocalizedRow>& rows) {
  CsvTable t({"config_hash", "n", "x", "r", "estimate", "stderr", "bound", "ratio"});
  for (const auto& r : rows)
    t.add({hash, std::to_string(r.n), fmt17(r.x), fmt17(r.r), fmt17(r.estimate.mean), fmt17(r.estimate.stderr_),
           fmt17(r.bound), r.bound > 0.0 ? fmt17(r.estimate.mean / r.bound) : ""});
  return t;
}

inline CsvTable sudakov_table(const std::string& hash, const std::vector<SudakovRow>& rows) {
  CsvTable t({"config_hash", "n", "gaussian_mean", "gaussian_stderr", "max_row_norm", "c2", "q", "epsilon0",
              "diameter", "dudley_bound", "dudley_ratio"});
  for (const auto& r : rows)
    t.add({hash, std::to_string(r.n), fmt17(r.sudakov.gaussian.mean), fmt17(r.sudakov.gaussian.stderr_),
           fmt17(r.sudakov.max_row_norm), fmt17(r.c2), fmt17(r.dudley.q), fmt17(r.dudley.epsilon0),
           fmt17(r.dudley.diameter), fmt17(r.dudley.bound), fmt17(r.dudley_ratio)});
  return t;
}

struct ComplexityResult {
  std::string hash;
  std::vector<LocalizedRow> localized;
  std::vector<SudakovRow> sudakov;
};

inline ComplexityResult run_complexity(const ExperimentConfig& cfg) {
  validate(cfg);
  ComplexityResult out;
  out.hash = config_hash(cfg);
  const EigenSpec spec = experiment_spec(cfg);
  out.localized = localized_sweep(spec, cfg.complexity, derive_seed(cfg.seed, {detail::kComplexityStream, 0}), cfg.jobs);
  out.sudakov = sudakov_sweep(cfg.complexity, derive_seed(cfg.seed, {detail::kComplexityStream, 1}), cfg.jobs);
  return out;
}

inline void write_complexity(const ComplexityResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  localized_table(r.hash, r.localized).write(dir / "localized.csv");
  sudakov_table(r.hash, r.sudakov).write(dir / "sudakov.csv");
}

// ---------------------------------------------------------------------------
// Full suite

inline std::vector<CheckRow> run_checks(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto& ch = cfg.checks;
  const auto& c = cfg.constants;
  auto seed_for = [&](std::uint64_t id) { return derive_seed(cfg.seed, {detail::kCheckStream, id}); };

  std::vector<std::pair<std::string, std::function<std::vector<CheckRow>()>>> tasks;
  for (double p : {1.0 / 3.0, 0.5, 2.0 / 3.0}) {
    tasks.emplace_back("fixed_point_slope", [&, p] {
      return std::vector<CheckRow>{check_fixed_point_slope(p, c.c_tilde, ch.fixed_point_min_exponent,
                                                           ch.fixed_point_max_exponent, ch.fixed_point_length)};
    });
  }
  tasks.emplace_back("fixed_point_constant", [&] {
    return std::vector<CheckRow>{check_fixed_point_constant(0.5, c, ch.fixed_point_min_exponent,
                                                            ch.fixed_point_max_exponent, ch.fixed_point_length)};
  });
  tasks.emplace_back("lemma34_ratio", [&] {
    return std::vector<CheckRow>{check_lemma34(build_spec(cfg.p < 1.0 ? cfg.p : 0.5, cfg.truncation))};
  });
  for (double sigma : ch.approx_sigmas) {
    tasks.emplace_back("approximation_error", [&, sigma] {
      // odd truncation for the analytic tail
      return std::vector<CheckRow>{check_approximation(0.5, cfg.truncation | 1, sigma, ch.approx_q)};
    });
  }
  tasks.emplace_back("lemma41_inclusion", [&] {
    const EigenSpec spec = experiment_spec(cfg);
    const RegressionTask task = make_target(spec, 0.5, power_profile(spec.size(), cfg.q), cfg.noise);
    return std::vector<CheckRow>{check_lemma41(task, ch.lemma41_r, ch.lemma41_x, ch.lemma41_samples, seed_for(1))};
  });
  tasks.emplace_back("lemma51_ratio", [&] {
    return std::vector<CheckRow>{check_lemma51(cfg.p < 1.0 ? cfg.p : 0.5, cfg.truncation, ch.lemma51_m, seed_for(2))};
  });
  tasks.emplace_back("peeling_sum", [&] {
    return std::vector<CheckRow>{check_peeling(experiment_spec(cfg), c, 1024.0)};
  });
  tasks.emplace_back("isomorphism_mc", [&] {
    const EigenSpec spec = experiment_spec(cfg);
    const RegressionTask task = experiment_task(cfg, spec);
    return std::vector<CheckRow>{check_isomorphism(task, ch.isomorphism_r, ch.isomorphism_n, ch.isomorphism_trials,
                                                   ch.isomorphism_quantile, ch.isomorphism_max_failure, c,
                                                   seed_for(3))};
  });
  tasks.emplace_back("localized_complexity", [&] {
    const auto rows = localized_sweep(experiment_spec(cfg), cfg.complexity,
                                      derive_seed(cfg.seed, {detail::kComplexityStream, 0}), 1);
    return std::vector<CheckRow>{check_localized(rows)};
  });
  tasks.emplace_back("slepian_c2", [&] {
    const auto rows = sudakov_sweep(cfg.complexity, derive_seed(cfg.seed, {detail::kComplexityStream, 1}), 1);
    return std::vector<CheckRow>{check_slepian(rows), check_dudley(rows, cfg.complexity.dudley_min_exponent)};
  });

  std::vector<std::vector<CheckRow>> results(tasks.size());
  parallel_for(tasks.size(), cfg.jobs, [&](std::size_t k) {
    try {
      results[k] = tasks[k].second();
    } catch (const std::exception& e) {
      CheckRow row{tasks[k].first, "", std::numeric_limits<double>::quiet_NaN(), "", false,
                   std::string("error: ") + e.what()};
      results[k] = {row};
    }
  });
  std::vector<CheckRow> out;
  for (auto& r : results) out.insert(out.end(), r.begin(), r.end());
  return out;
}

inline CsvTable checks_table(const std::string& hash, const std::vector<CheckRow>& rows) {
  CsvTable t({"config_hash", "check", "params", "statistic", "threshold", "pass", "message"});
  for (const auto& r : rows)
    t.add({hash, r.check, r.params, fmt17(r.statistic), r.threshold, r.pass ? "pass" : "fail", r.message});
  return t;
}

}  // namespace rkhs
