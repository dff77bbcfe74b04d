#pragma once

// Experiment configuration, deterministic cell-parallel execution, CSV
// emission and the rate study.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "rkhs/error.hpp"
#include "rkhs/regfunc.hpp"
#include "rkhs/seeding.hpp"
#include "rkhs/solver.hpp"
#include "rkhs/spectrum.hpp"
#include "rkhs/synth.hpp"

namespace rkhs {

// ---------------------------------------------------------------------------
// CSV

inline std::string fmt17(double v) {
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, "%.17g", v);
  return buffer;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<std::string> row) {
    require(row.size() == header_.size(), "csv: row width does not match header");
    rows_.push_back(std::move(row));
  }

  [[nodiscard]] const std::vector<std::string>& header() const { return header_; }
  [[nodiscard]] const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  [[nodiscard]] std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t k = 0; k < cells.size(); ++k) {
        if (k) out += ',';
        out += csv_field(cells[k]);
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << str();
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quote");
  cells.push_back(cur);
  return cells;
}

inline CsvTable parse_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw FormatError("csv: missing header");
  CsvTable table(split_csv_line(line));
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != table.header().size())
      throw FormatError("csv: row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " fields");
    table.add(std::move(cells));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Parallel map with results stored by index.

template <class Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs <= 1) {
    for (std::size_t k = 0; k < count; ++k) fn(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t k = next++; k < count; k = next++) {
        try {
          fn(k);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Configuration

struct RateConfig {
  std::vector<std::size_t> n_grid{64, 128, 256, 512, 1024, 2048, 4096, 8192};
  std::size_t seeds = 50;
  std::vector<RegularizerKind> kinds{RegularizerKind::Sublinear, RegularizerKind::Quadratic};
  std::size_t drop_smallest = 1;
  double min_completion = 0.8;
  bool calibrate = true;
  std::size_t pilot_n = 512;
  std::size_t calibration_seeds = 10;
  std::vector<double> kappa_grid{1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0};
};

struct ComplexityConfig {
  // localized Gaussian complexity
  std::vector<int> n_exponents{6, 7, 8, 9, 10, 11, 12};
  std::vector<double> levels{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  double r = 1.0;
  std::size_t draws = 400;
  // dual Sudakov and the entropy integral, on a separate wide spectrum
  std::size_t sudakov_truncation = 4097;
  double sudakov_x = 1e-10;
  double sudakov_r = 1.0;
  std::vector<int> sudakov_exponents{4, 5, 6, 7, 8, 9, 10, 11, 12};
  int dudley_min_exponent = 6;
  std::size_t sudakov_draws = 300;
  double c4 = 1.0;
};

struct CheckConfig {
  int fixed_point_min_exponent = 10;
  int fixed_point_max_exponent = 20;
  std::size_t fixed_point_length = std::size_t{1} << 20;
  std::vector<double> approx_sigmas{0.2, 0.35};
  double approx_q = 0.505;
  std::size_t lemma41_samples = 10000;
  double lemma41_r = 2.0;
  double lemma41_x = 0.05;
  std::size_t lemma51_m = 1000;
  std::size_t isomorphism_n = 512;
  double isomorphism_r = 2.0;
  std::size_t isomorphism_trials = 200;
  double isomorphism_quantile = 0.975;
  double isomorphism_max_failure = 0.05;
};

struct ExperimentConfig {
  std::uint64_t seed = 20240501;
  double p = 0.5;
  std::size_t truncation = kDefaultTruncation;
  double sigma = 0.5;
  double q = 0.55;
  double noise = kDefaultNoise;
  Constants constants;
  RateConfig rates;
  ComplexityConfig complexity;
  CheckConfig checks;
  std::size_t jobs = 1;  // not part of the hash
};

inline void validate(const ExperimentConfig& cfg) {
  require(cfg.p > 0.0 && cfg.p <= 1.0, "config: p must lie in (0, 1]");
  require(cfg.truncation >= 1, "config: truncation must be at least 1");
  require(cfg.sigma > 0.0 && cfg.sigma <= 1.0, "config: sigma must lie in (0, 1]");
  require(cfg.noise >= 0.0, "config: noise must be nonnegative");
  require(cfg.q >= 0.0, "config: q must be nonnegative");
  validate(cfg.constants);
  const auto& r = cfg.rates;
  require(!r.n_grid.empty(), "config: rates.n_grid is empty");
  for (std::size_t k = 0; k < r.n_grid.size(); ++k) {
    require(r.n_grid[k] >= 2, "config: rates.n_grid entries must be at least 2");
    if (k) require(r.n_grid[k] > r.n_grid[k - 1], "config: rates.n_grid must be strictly increasing");
  }
  require(r.seeds >= 1, "config: rates.seeds must be at least 1");
  require(!r.kinds.empty(), "config: rates.kinds is empty");
  require(r.min_completion > 0.0 && r.min_completion <= 1.0, "config: rates.min_completion must lie in (0, 1]");
  require(!r.calibrate || (!r.kappa_grid.empty() && r.calibration_seeds >= 1 && r.pilot_n >= 2),
          "config: calibration needs kappa_grid, calibration_seeds >= 1 and pilot_n >= 2");
  for (double k : r.kappa_grid) require(k > 0.0, "config: kappa_grid entries must be positive");
  require(cfg.complexity.draws >= 100 && cfg.complexity.sudakov_draws >= 100, "config: Monte Carlo needs >= 100 draws");
  require(cfg.checks.isomorphism_trials >= 100, "config: isomorphism trials must be at least 100");
  require(cfg.checks.lemma51_m >= 100, "config: lemma51 family size must be at least 100");
  require(cfg.jobs >= 1, "config: jobs must be at least 1");
}

namespace detail {

template <class T>
void read_if(const nlohmann::json& doc, const char* key, T& out) {
  if (doc.contains(key)) out = doc.at(key).get<T>();
}

inline void reject_unknown(const nlohmann::json& doc, std::initializer_list<const char*> keys, const std::string& where) {
  require(doc.is_object(), "config: " + where + " must be an object");
  for (const auto& item : doc.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known) throw PreconditionError("config: unknown key '" + item.key() + "' in " + where);
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json kinds = nlohmann::json::array();
  for (auto k : cfg.rates.kinds) kinds.push_back(to_string(k));
  const auto& r = cfg.rates;
  const auto& c = cfg.complexity;
  const auto& ch = cfg.checks;
  return nlohmann::json{
      {"seed", cfg.seed},
      {"spec", {{"p", cfg.p}, {"truncation", cfg.truncation}}},
      {"task", {{"sigma", cfg.sigma}, {"q", cfg.q}, {"noise", cfg.noise}}},
      {"constants", to_json(cfg.constants)},
      {"rates",
       {{"n_grid", r.n_grid},
        {"seeds", r.seeds},
        {"kinds", kinds},
        {"drop_smallest", r.drop_smallest},
        {"min_completion", r.min_completion},
        {"calibrate", r.calibrate},
        {"pilot_n", r.pilot_n},
        {"calibration_seeds", r.calibration_seeds},
        {"kappa_grid", r.kappa_grid}}},
      {"complexity",
       {{"n_exponents", c.n_exponents},
        {"levels", c.levels},
        {"r", c.r},
        {"draws", c.draws},
        {"sudakov_truncation", c.sudakov_truncation},
        {"sudakov_x", c.sudakov_x},
        {"sudakov_r", c.sudakov_r},
        {"sudakov_exponents", c.sudakov_exponents},
        {"dudley_min_exponent", c.dudley_min_exponent},
        {"sudakov_draws", c.sudakov_draws},
        {"c4", c.c4}}},
      {"checks",
       {{"fixed_point_min_exponent", ch.fixed_point_min_exponent},
        {"fixed_point_max_exponent", ch.fixed_point_max_exponent},
        {"fixed_point_length", ch.fixed_point_length},
        {"approx_sigmas", ch.approx_sigmas},
        {"approx_q", ch.approx_q},
        {"lemma41_samples", ch.lemma41_samples},
        {"lemma41_r", ch.lemma41_r},
        {"lemma41_x", ch.lemma41_x},
        {"lemma51_m", ch.lemma51_m},
        {"isomorphism_n", ch.isomorphism_n},
        {"isomorphism_r", ch.isomorphism_r},
        {"isomorphism_trials", ch.isomorphism_trials},
        {"isomorphism_quantile", ch.isomorphism_quantile},
        {"isomorphism_max_failure", ch.isomorphism_max_failure}}}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  try {
    detail::reject_unknown(doc, {"seed", "spec", "task", "constants", "rates", "complexity", "checks", "jobs"}, "config");
    detail::read_if(doc, "seed", cfg.seed);
    detail::read_if(doc, "jobs", cfg.jobs);
    if (doc.contains("spec")) {
      const auto& s = doc.at("spec");
      detail::reject_unknown(s, {"p", "truncation"}, "spec");
      detail::read_if(s, "p", cfg.p);
      detail::read_if(s, "truncation", cfg.truncation);
    }
    if (doc.contains("task")) {
      const auto& t = doc.at("task");
      detail::reject_unknown(t, {"sigma", "q", "noise"}, "task");
      detail::read_if(t, "sigma", cfg.sigma);
      detail::read_if(t, "q", cfg.q);
      detail::read_if(t, "noise", cfg.noise);
    }
    if (doc.contains("constants")) {
      detail::reject_unknown(doc.at("constants"),
                             {"c_tilde", "c_p", "c_Y", "c3", "c_improved", "c_p_prime", "c_Y_prime", "kappa1",
                              "kappa2", "kappa3", "u", "u_c1", "u_c2"},
                             "constants");
      cfg.constants = constants_from_json(doc.at("constants"));
    }
    if (doc.contains("rates")) {
      const auto& r = doc.at("rates");
      detail::reject_unknown(r,
                             {"n_grid", "seeds", "kinds", "drop_smallest", "min_completion", "calibrate", "pilot_n",
                              "calibration_seeds", "kappa_grid"},
                             "rates");
      detail::read_if(r, "n_grid", cfg.rates.n_grid);
      detail::read_if(r, "seeds", cfg.rates.seeds);
      if (r.contains("kinds")) {
        cfg.rates.kinds.clear();
        for (const auto& k : r.at("kinds")) cfg.rates.kinds.push_back(regularizer_from_string(k.get<std::string>()));
      }
      detail::read_if(r, "drop_smallest", cfg.rates.drop_smallest);
      detail::read_if(r, "min_completion", cfg.rates.min_completion);
      detail::read_if(r, "calibrate", cfg.rates.calibrate);
      detail::read_if(r, "pilot_n", cfg.rates.pilot_n);
      detail::read_if(r, "calibration_seeds", cfg.rates.calibration_seeds);
      detail::read_if(r, "kappa_grid", cfg.rates.kappa_grid);
    }
    if (doc.contains("complexity")) {
      const auto& c = doc.at("complexity");
      detail::reject_unknown(c,
                             {"n_exponents", "levels", "r", "draws", "sudakov_truncation", "sudakov_x", "sudakov_r",
                              "sudakov_exponents", "dudley_min_exponent", "sudakov_draws", "c4"},
                             "complexity");
      auto& cc = cfg.complexity;
      detail::read_if(c, "n_exponents", cc.n_exponents);
      detail::read_if(c, "levels", cc.levels);
      detail::read_if(c, "r", cc.r);
      detail::read_if(c, "draws", cc.draws);
      detail::read_if(c, "sudakov_truncation", cc.sudakov_truncation);
      detail::read_if(c, "sudakov_x", cc.sudakov_x);
      detail::read_if(c, "sudakov_r", cc.sudakov_r);
      detail::read_if(c, "sudakov_exponents", cc.sudakov_exponents);
      detail::read_if(c, "dudley_min_exponent", cc.dudley_min_exponent);
      detail::read_if(c, "sudakov_draws", cc.sudakov_draws);
      detail::read_if(c, "c4", cc.c4);
    }
    if (doc.contains("checks")) {
      const auto& c = doc.at("checks");
      detail::reject_unknown(c,
                             {"fixed_point_min_exponent", "fixed_point_max_exponent", "fixed_point_length",
                              "approx_sigmas", "approx_q", "lemma41_samples", "lemma41_r", "lemma41_x", "lemma51_m",
                              "isomorphism_n", "isomorphism_r", "isomorphism_trials", "isomorphism_quantile",
                              "isomorphism_max_failure"},
                             "checks");
      auto& k = cfg.checks;
      detail::read_if(c, "fixed_point_min_exponent", k.fixed_point_min_exponent);
      detail::read_if(c, "fixed_point_max_exponent", k.fixed_point_max_exponent);
      detail::read_if(c, "fixed_point_length", k.fixed_point_length);
      detail::read_if(c, "approx_sigmas", k.approx_sigmas);
      detail::read_if(c, "approx_q", k.approx_q);
      detail::read_if(c, "lemma41_samples", k.lemma41_samples);
      detail::read_if(c, "lemma41_r", k.lemma41_r);
      detail::read_if(c, "lemma41_x", k.lemma41_x);
      detail::read_if(c, "lemma51_m", k.lemma51_m);
      detail::read_if(c, "isomorphism_n", k.isomorphism_n);
      detail::read_if(c, "isomorphism_r", k.isomorphism_r);
      detail::read_if(c, "isomorphism_trials", k.isomorphism_trials);
      detail::read_if(c, "isomorphism_quantile", k.isomorphism_quantile);
      detail::read_if(c, "isomorphism_max_failure", k.isomorphism_max_failure);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return config_from_json(doc);
}

// FNV-1a over the canonical JSON rendering (jobs excluded).
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buffer[17];
  std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(h));
  return buffer;
}

inline EigenSpec experiment_spec(const ExperimentConfig& cfg) { return build_spec(cfg.p, cfg.truncation); }

inline RegressionTask experiment_task(const ExperimentConfig& cfg, const EigenSpec& spec) {
  return make_target(spec, cfg.sigma, power_profile(spec.size(), cfg.q), cfg.noise);
}

// ---------------------------------------------------------------------------
// Slope fitting

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual = 0.0;  // root mean square residual in log space
  std::size_t points = 0;
};

// Least squares of ln y on ln x.
inline SlopeFit fit_loglog(std::span<const double> xs, std::span<const double> ys) {
  require(xs.size() == ys.size() && xs.size() >= 2, "fit_loglog: need at least two points");
  const auto m = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require(xs[k] > 0.0 && ys[k] > 0.0, "fit_loglog: values must be positive");
    mx += std::log(xs[k]);
    my += std::log(ys[k]);
  }
  mx /= m;
  my /= m;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double dx = std::log(xs[k]) - mx;
    sxy += dx * (std::log(ys[k]) - my);
    sxx += dx * dx;
  }
  require(sxx > 0.0, "fit_loglog: abscissae must not all coincide");
  SlopeFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double e = std::log(ys[k]) - (fit.intercept + fit.slope * std::log(xs[k]));
    ss += e * e;
  }
  fit.residual = std::sqrt(ss / m);
  fit.points = xs.size();
  return fit;
}

// ---------------------------------------------------------------------------
// Rate study

// Predicted exponents of n for the excess risk.
struct RatePrediction {
  std::string name;
  std::string formula;
  double slope = 0.0;
};

inline std::vector<RatePrediction> rate_predictions(double p, double sigma) {
  if (p >= 1.0) return {};
  return {{"classical", "-sigma/(1+2sigma)", -sigma / (1.0 + 2.0 * sigma)},
          {"quadratic", "-2sigma/(1+p)", -2.0 * sigma / (1.0 + p)},
          {"sublinear", "-2sigma/(p+2sigma)", -2.0 * sigma / (p + 2.0 * sigma)}};
}

inline std::optional<double> predicted_slope(RegularizerKind kind, double p, double sigma) {
  if (p >= 1.0) return std::nullopt;
  switch (kind) {
    case RegularizerKind::Sublinear: return -2.0 * sigma / (p + 2.0 * sigma);
    case RegularizerKind::Quadratic:
    case RegularizerKind::Improved: return -2.0 * sigma / (1.0 + p);
    default: return std::nullopt;
  }
}

// Power of ln n carried by each functional's leading term.
inline double log_factor_power(RegularizerKind kind, double p) {
  switch (kind) {
    case RegularizerKind::Sublinear:
    case RegularizerKind::Improved: return 2.0 / (1.0 + p);
    default: return 0.0;
  }
}

struct RateCell {
  RegularizerKind kind{};
  std::size_t n = 0;
  std::size_t seed_index = 0;
  bool ok = false;
  double excess = 0.0;
  double norm = 0.0;
  double eta = 0.0;
  double loss = 0.0;
  std::string message;
};

struct RateRow {
  RegularizerKind kind{};
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
  std::size_t seeds = 0;
  std::size_t completed = 0;
};

struct KindFit {
  RegularizerKind kind{};
  bool ok = false;
  SlopeFit raw;
  SlopeFit log_adjusted;
  std::optional<double> predicted;
  std::string message;
};

struct Calibration {
  RegularizerKind kind{};
  std::vector<double> kappas;
  std::vector<double> validation_mse;
  double selected = 1.0;
};

struct RateResult {
  std::string hash;
  std::vector<Calibration> calibration;
  std::vector<RateCell> cells;
  std::vector<RateRow> rows;
  std::vector<KindFit> fits;
  double completion = 0.0;
};

namespace detail {

inline constexpr std::uint64_t kRateStream = 1;
inline constexpr std::uint64_t kCalibrationStream = 2;

inline double validation_mse(const std::vector<double>& coeffs, const Eigen::MatrixXd& basis, const SampleSet& v) {
  const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(coeffs.data(), static_cast<Eigen::Index>(coeffs.size()));
  const Eigen::VectorXd ys = Eigen::Map<const Eigen::VectorXd>(v.ys.data(), static_cast<Eigen::Index>(v.size()));
  return (basis * c - ys).squaredNorm() / static_cast<double>(v.size());
}

}  // namespace detail

// Hold-out selection of kappa1 per kind at the pilot sample size, on seeds
// disjoint from the rate cells.
inline std::vector<Calibration> calibrate_kappa(const ExperimentConfig& cfg, const EigenSpec& spec,
                                                const RegressionTask& task) {
  const auto& rc = cfg.rates;
  const std::size_t kinds = rc.kinds.size(), kappas = rc.kappa_grid.size();
  // mse[seed][kind * kappas + k]
  std::vector<std::vector<double>> mse(rc.calibration_seeds, std::vector<double>(kinds * kappas));
  parallel_for(rc.calibration_seeds, cfg.jobs, [&](std::size_t s) {
    const SampleSet train = draw_sample(task, rc.pilot_n, derive_seed(cfg.seed, {detail::kCalibrationStream, s, 0}));
    const SampleSet valid = draw_sample(task, rc.pilot_n, derive_seed(cfg.seed, {detail::kCalibrationStream, s, 1}));
    const Eigen::MatrixXd basis = basis_matrix(spec.size(), valid.xs);
    const Frontier frontier = build_frontier(make_ridge_system(spec, train), default_eta_grid());
    for (std::size_t k = 0; k < kinds; ++k) {
      for (std::size_t c = 0; c < kappas; ++c) {
        RegularizerSpec reg{rc.kinds[k], cfg.constants, spec, static_cast<double>(rc.pilot_n)};
        reg.constants.kappa1 = rc.kappa_grid[c];
        const FittedFunction f = regularized_erm(frontier, reg, cfg.constants.u);
        mse[s][k * kappas + c] = detail::validation_mse(f.coeffs, basis, valid);
      }
    }
  });
  std::vector<Calibration> out;
  for (std::size_t k = 0; k < kinds; ++k) {
    Calibration cal;
    cal.kind = rc.kinds[k];
    cal.kappas = rc.kappa_grid;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < kappas; ++c) {
      double total = 0.0;
      for (std::size_t s = 0; s < rc.calibration_seeds; ++s) total += mse[s][k * kappas + c];
      total /= static_cast<double>(rc.calibration_seeds);
      cal.validation_mse.push_back(total);
      if (total < best) {
        best = total;
        cal.selected = rc.kappa_grid[c];
      }
    }
    out.push_back(std::move(cal));
  }
  return out;
}

inline std::vector<RateRow> aggregate_cells(const std::vector<RateCell>& cells, const RateConfig& rc) {
  std::vector<RateRow> rows;
  for (auto kind : rc.kinds) {
    for (std::size_t n : rc.n_grid) {
      RateRow row{kind, n};
      row.seeds = rc.seeds;
      std::vector<double> values;
      for (const auto& c : cells)
        if (c.kind == kind && c.n == n && c.ok) values.push_back(c.excess);
      row.completed = values.size();
      if (!values.empty()) {
        row.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
        double ss = 0.0;
        for (double v : values) ss += (v - row.mean) * (v - row.mean);
        row.std = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

inline KindFit fit_kind(RegularizerKind kind, const std::vector<RateRow>& rows, const ExperimentConfig& cfg) {
  KindFit fit;
  fit.kind = kind;
  fit.predicted = predicted_slope(kind, cfg.p, cfg.sigma);
  std::size_t total = 0, done = 0;
  std::vector<double> ns, means, adjusted;
  std::size_t index = 0;
  for (const auto& row : rows) {
    if (row.kind != kind) continue;
    total += row.seeds;
    done += row.completed;
    const bool burn_in = index++ < cfg.rates.drop_smallest;
    if (burn_in || row.completed == 0 || !(row.mean > 0.0)) continue;
    ns.push_back(static_cast<double>(row.n));
    means.push_back(row.mean);
    adjusted.push_back(row.mean / std::pow(std::log(static_cast<double>(row.n)), log_factor_power(kind, cfg.p)));
  }
  if (total == 0 || static_cast<double>(done) < cfg.rates.min_completion * static_cast<double>(total)) {
    fit.message = "cell completion below threshold";
    return fit;
  }
  if (ns.size() < 2) {
    fit.message = "fewer than two usable sample sizes";
    return fit;
  }
  fit.raw = fit_loglog(ns, means);
  fit.log_adjusted = fit_loglog(ns, adjusted);
  fit.ok = true;
  return fit;
}

inline RateResult run_rates(const ExperimentConfig& cfg, std::ostream& log = std::cerr) {
  validate(cfg);
  RateResult out;
  out.hash = config_hash(cfg);
  const EigenSpec spec = experiment_spec(cfg);
  const RegressionTask task = experiment_task(cfg, spec);
  const auto& rc = cfg.rates;

  std::vector<double> kappa(rc.kinds.size(), cfg.constants.kappa1);
  if (rc.calibrate) {
    out.calibration = calibrate_kappa(cfg, spec, task);
    for (std::size_t k = 0; k < rc.kinds.size(); ++k) kappa[k] = out.calibration[k].selected;
  }

  const std::size_t count = rc.n_grid.size() * rc.seeds;
  std::vector<std::vector<RateCell>> results(count);
  parallel_for(count, cfg.jobs, [&](std::size_t item) {
    const std::size_t n = rc.n_grid[item / rc.seeds];
    const std::size_t s = item % rc.seeds;
    auto& cells = results[item];
    for (auto kind : rc.kinds) cells.push_back(RateCell{kind, n, s, false, 0.0, 0.0, 0.0, 0.0, ""});
    try {
      const SampleSet sample = draw_sample(task, n, derive_seed(cfg.seed, {detail::kRateStream, n, s}));
      const Frontier frontier = build_frontier(make_ridge_system(spec, sample), default_eta_grid());
      for (std::size_t k = 0; k < rc.kinds.size(); ++k) {
        RegularizerSpec reg{rc.kinds[k], cfg.constants, spec, static_cast<double>(n)};
        reg.constants.kappa1 = kappa[k];
        const FittedFunction f = regularized_erm(frontier, reg, cfg.constants.u);
        auto& cell = cells[k];
        cell.excess = population_risk_excess(f.coeffs, task);
        cell.norm = f.norm;
        cell.eta = f.eta;
        cell.loss = f.loss;
        cell.ok = true;
      }
    } catch (const std::exception& e) {
      for (auto& cell : cells) {
        cell.ok = false;
        cell.message = e.what();
      }
    }
  });
  std::size_t done = 0;
  for (auto& group : results) {
    for (auto& cell : group) {
      if (!cell.ok) log << "rates: cell n=" << cell.n << " seed=" << cell.seed_index << " kind=" << to_string(cell.kind)
                        << " failed: " << cell.message << '\n';
      done += cell.ok ? 1 : 0;
      out.cells.push_back(std::move(cell));
    }
  }
  // Deterministic order: kind, n, seed.
  std::stable_sort(out.cells.begin(), out.cells.end(), [&](const RateCell& a, const RateCell& b) {
    const auto ka = std::find(rc.kinds.begin(), rc.kinds.end(), a.kind) - rc.kinds.begin();
    const auto kb = std::find(rc.kinds.begin(), rc.kinds.end(), b.kind) - rc.kinds.begin();
    if (ka != kb) return ka < kb;
    if (a.n != b.n) return a.n < b.n;
    return a.seed_index < b.seed_index;
  });
  out.completion = static_cast<double>(done) / static_cast<double>(out.cells.size());
  out.rows = aggregate_cells(out.cells, rc);
  for (auto kind : rc.kinds) out.fits.push_back(fit_kind(kind, out.rows, cfg));
  return out;
}

inline std::string opt_field(const std::optional<double>& v) { return v ? fmt17(*v) : std::string(); }

inline CsvTable rate_cells_table(const RateResult& r) {
  CsvTable t({"config_hash", "kind", "n", "seed", "status", "excess", "norm", "eta", "empirical_loss"});
  for (const auto& c : r.cells) {
    t.add({r.hash, to_string(c.kind), std::to_string(c.n), std::to_string(c.seed_index), c.ok ? "ok" : "missing",
           c.ok ? fmt17(c.excess) : "", c.ok ? fmt17(c.norm) : "", c.ok ? fmt17(c.eta) : "",
           c.ok ? fmt17(c.loss) : ""});
  }
  return t;
}

inline CsvTable rates_table(const RateResult& r, const ExperimentConfig& cfg) {
  CsvTable t({"config_hash", "kind", "n", "mean_excess", "std_excess", "seeds", "completed", "predicted_slope"});
  for (const auto& row : r.rows) {
    t.add({r.hash, to_string(row.kind), std::to_string(row.n), row.completed ? fmt17(row.mean) : "",
           row.completed ? fmt17(row.std) : "", std::to_string(row.seeds), std::to_string(row.completed),
           opt_field(predicted_slope(row.kind, cfg.p, cfg.sigma))});
  }
  return t;
}

inline CsvTable rate_fit_table(const RateResult& r) {
  CsvTable t({"config_hash", "kind", "status", "slope", "intercept", "residual", "log_adjusted_slope",
              "predicted_slope", "points", "message"});
  for (const auto& f : r.fits) {
    t.add({r.hash, to_string(f.kind), f.ok ? "ok" : "insufficient", f.ok ? fmt17(f.raw.slope) : "",
           f.ok ? fmt17(f.raw.intercept) : "", f.ok ? fmt17(f.raw.residual) : "",
           f.ok ? fmt17(f.log_adjusted.slope) : "", opt_field(f.predicted), std::to_string(f.raw.points), f.message});
  }
  return t;
}

inline CsvTable predictions_table(const std::string& hash, const ExperimentConfig& cfg) {
  CsvTable t({"config_hash", "name", "formula", "slope"});
  for (const auto& p : rate_predictions(cfg.p, cfg.sigma)) t.add({hash, p.name, p.formula, fmt17(p.slope)});
  return t;
}

inline CsvTable calibration_table(const RateResult& r) {
  CsvTable t({"config_hash", "kind", "kappa1", "validation_mse", "selected"});
  for (const auto& c : r.calibration)
    for (std::size_t k = 0; k < c.kappas.size(); ++k)
      t.add({r.hash, to_string(c.kind), fmt17(c.kappas[k]), fmt17(c.validation_mse[k]),
             c.kappas[k] == c.selected ? "1" : "0"});
  return t;
}

// Re-fits slopes from a rates table; rows from different configurations are
// rejected.
inline std::vector<std::pair<std::string, SlopeFit>> fit_rates_table(const CsvTable& table, std::size_t drop_smallest) {
  const auto& h = table.header();
  auto col = [&](const std::string& name) {
    const auto it = std::find(h.begin(), h.end(), name);
    if (it == h.end()) throw FormatError("rates csv: missing column " + name);
    return static_cast<std::size_t>(it - h.begin());
  };
  const std::size_t c_hash = col("config_hash"), c_kind = col("kind"), c_n = col("n"), c_mean = col("mean_excess");
  std::set<std::string> hashes;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  std::vector<std::string> order;
  for (const auto& row : table.rows()) {
    hashes.insert(row[c_hash]);
    if (row[c_mean].empty()) continue;
    if (!series.count(row[c_kind])) order.push_back(row[c_kind]);
    series[row[c_kind]].emplace_back(std::stod(row[c_n]), std::stod(row[c_mean]));
  }
  if (hashes.size() > 1) throw FormatError("rates csv: rows from different configurations cannot be fitted together");
  std::vector<std::pair<std::string, SlopeFit>> out;
  for (const auto& kind : order) {
    auto pts = series[kind];
    std::sort(pts.begin(), pts.end());
    std::vector<double> xs, ys;
    for (std::size_t k = drop_smallest; k < pts.size(); ++k) {
      xs.push_back(pts[k].first);
      ys.push_back(pts[k].second);
    }
    out.emplace_back(kind, fit_loglog(xs, ys));
  }
  return out;
}

inline void write_rates(const RateResult& r, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  rate_cells_table(r).write(dir / "rates_cells.csv");
  rates_table(r, cfg).write(dir / "rates.csv");
  rate_fit_table(r).write(dir / "rates_fit.csv");
  predictions_table(r.hash, cfg).write(dir / "predictions.csv");
  if (!r.calibration.empty()) calibration_table(r).write(dir / "calibration.csv");
}

}  // namespace rkhs
