#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "rkhs/checks.hpp"
#include "rkhs/experiment.hpp"
#include "rkhs/plot.hpp"

using namespace rkhs;

namespace {

// Minimal XML well-formedness check: balanced tags, quoted attributes,
// known entities, nothing after the root element.
class XmlChecker {
 public:
  explicit XmlChecker(const std::string& text) : s_(text) {}

  std::string check() {
    try {
      skip_space();
      if (starts("<?xml")) skip_past("?>");
      skip_space();
      if (!starts("<")) return "missing root element";
      element();
      skip_space();
      if (i_ != s_.size()) return "content after root element";
      return "";
    } catch (const std::string& e) {
      return e + " at offset " + std::to_string(i_);
    }
  }

 private:
  bool starts(const std::string& t) const { return s_.compare(i_, t.size(), t) == 0; }
  void skip_space() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
  }
  void skip_past(const std::string& t) {
    const auto k = s_.find(t, i_);
    if (k == std::string::npos) throw std::string("unterminated " + t);
    i_ = k + t.size();
  }
  std::string name() {
    const std::size_t start = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '-' || s_[i_] == ':' || s_[i_] == '_'))
      ++i_;
    if (i_ == start) throw std::string("expected a name");
    return s_.substr(start, i_ - start);
  }
  void entity() {
    for (const char* e : {"&amp;", "&lt;", "&gt;", "&quot;", "&apos;"})
      if (starts(e)) {
        i_ += std::string(e).size();
        return;
      }
    throw std::string("bad entity");
  }
  void element() {
    ++i_;  // '<'
    const std::string tag = name();
    while (true) {
      skip_space();
      if (starts("/>")) {
        i_ += 2;
        return;
      }
      if (starts(">")) {
        ++i_;
        break;
      }
      name();
      skip_space();
      if (!starts("=")) throw std::string("expected '='");
      ++i_;
      skip_space();
      if (!starts("\"")) throw std::string("unquoted attribute");
      ++i_;
      while (i_ < s_.size() && s_[i_] != '"') {
        if (s_[i_] == '<') throw std::string("'<' in attribute");
        if (s_[i_] == '&') entity();
        else ++i_;
      }
      if (i_ == s_.size()) throw std::string("unterminated attribute");
      ++i_;
    }
    while (true) {
      if (i_ >= s_.size()) throw std::string("unclosed <" + tag + ">");
      if (starts("</")) {
        i_ += 2;
        if (name() != tag) throw std::string("mismatched </" + tag + ">");
        skip_space();
        if (!starts(">")) throw std::string("expected '>'");
        ++i_;
        return;
      }
      if (starts("<!--")) {
        skip_past("-->");
      } else if (starts("<")) {
        element();
      } else if (s_[i_] == '&') {
        entity();
      } else {
        ++i_;
      }
    }
  }

  const std::string& s_;
  std::size_t i_ = 0;
};

ExperimentConfig small_rates_config() {
  ExperimentConfig cfg;
  cfg.truncation = 41;
  cfg.rates.n_grid = {32, 64, 128};
  cfg.rates.seeds = 4;
  cfg.rates.pilot_n = 64;
  cfg.rates.calibration_seeds = 2;
  cfg.rates.kappa_grid = {0.01, 0.1, 1.0};
  return cfg;
}

ExperimentConfig small_checks_config() {
  ExperimentConfig cfg;
  cfg.truncation = 41;
  auto& ch = cfg.checks;
  ch.fixed_point_length = std::size_t{1} << 14;
  ch.lemma41_samples = 300;
  ch.lemma51_m = 120;
  ch.isomorphism_n = 64;
  ch.isomorphism_trials = 100;
  auto& c = cfg.complexity;
  c.n_exponents = {6, 7};
  c.levels = {1e-3, 1e-1};
  c.draws = 100;
  c.sudakov_truncation = 129;
  c.sudakov_exponents = {4, 6, 8};
  c.dudley_min_exponent = 6;
  c.sudakov_draws = 100;
  return cfg;
}

CsvTable rates_csv(const std::vector<std::array<std::string, 4>>& rows) {
  CsvTable t({"config_hash", "kind", "n", "mean_excess", "predicted_slope"});
  for (const auto& r : rows) t.add({r[0], r[1], r[2], r[3], r[1] == "sublinear" ? "-0.66666666666666663" : ""});
  return t;
}

}  // namespace

TEST(Csv, SeventeenDigitsRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 2.0 / 3.0, 1e-300, 123456.789, -2.5e17}) {
    const std::string s = fmt17(v);
    EXPECT_EQ(std::stod(s), v);
  }
  EXPECT_EQ(fmt17(0.1), "0.10000000000000001");
}

TEST(Csv, LineEndingsAndQuoting) {
  CsvTable t({"a", "b"});
  t.add({"plain", "with,comma"});
  t.add({"say \"hi\"", "x"});
  const std::string text = t.str();
  EXPECT_EQ(text.find('\r'), std::string::npos);
  EXPECT_EQ(text, "a,b\nplain,\"with,comma\"\n\"say \"\"hi\"\"\",x\n");
  std::istringstream in(text);
  const CsvTable back = parse_csv(in);
  EXPECT_EQ(back.rows(), t.rows());
  EXPECT_THROW(t.add({"one"}), PreconditionError);
}

TEST(Csv, ParseErrors) {
  std::istringstream empty("");
  EXPECT_THROW(parse_csv(empty), FormatError);
  std::istringstream ragged("a,b\n1,2,3\n");
  EXPECT_THROW(parse_csv(ragged), FormatError);
  std::istringstream quote("a,b\n\"1,2\n");
  EXPECT_THROW(parse_csv(quote), FormatError);
}

TEST(ParallelFor, IndexAddressedAndPropagatesErrors) {
  std::vector<int> out(100, 0);
  parallel_for(100, 7, [&](std::size_t k) { out[k] = static_cast<int>(k * k); });
  for (std::size_t k = 0; k < out.size(); ++k) EXPECT_EQ(out[k], static_cast<int>(k * k));
  std::atomic<int> ran{0};
  EXPECT_THROW(parallel_for(20, 4,
                            [&](std::size_t k) {
                              ++ran;
                              if (k == 13) throw NumericalError("boom");
                            }),
               NumericalError);
  EXPECT_EQ(ran.load(), 20);
}

TEST(Config, DefaultsRoundTripThroughJson) {
  const ExperimentConfig cfg;
  const ExperimentConfig back = config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_EQ(config_hash(back), config_hash(cfg));
}

TEST(Config, PartialDocumentKeepsDefaults) {
  const auto cfg = config_from_json(nlohmann::json::parse(R"({"seed": 7, "task": {"sigma": 0.25}, "jobs": 3})"));
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.sigma, 0.25);
  EXPECT_EQ(cfg.jobs, 3u);
  EXPECT_EQ(cfg.p, ExperimentConfig{}.p);
  EXPECT_EQ(cfg.rates.n_grid, ExperimentConfig{}.rates.n_grid);
}

TEST(Config, RejectsBadDocuments) {
  using nlohmann::json;
  EXPECT_THROW(config_from_json(json::parse(R"({"sede": 1})")), PreconditionError);
  EXPECT_THROW(config_from_json(json::parse(R"({"spec": {"p": 0.5, "N": 3}})")), PreconditionError);
  EXPECT_THROW(config_from_json(json::parse(R"({"spec": {"p": "half"}})")), FormatError);
  EXPECT_THROW(config_from_json(json::parse(R"({"spec": {"p": 1.5}})")), PreconditionError);
  EXPECT_THROW(config_from_json(json::parse(R"({"rates": {"n_grid": [64, 32]}})")), PreconditionError);
  EXPECT_THROW(config_from_json(json::parse(R"({"rates": {"seeds": 0}})")), PreconditionError);
  EXPECT_THROW(config_from_json(json::parse(R"({"rates": {"kinds": ["lasso"]}})")), FormatError);
  EXPECT_THROW(config_from_json(json::parse(R"({"constants": {"kappa1": 0}})")), PreconditionError);
  EXPECT_THROW(config_from_json(json::parse(R"([1, 2])")), PreconditionError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), FormatError);
}

TEST(Config, HashIgnoresJobsOnly) {
  ExperimentConfig a, b;
  b.jobs = 8;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed += 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  ExperimentConfig c;
  c.constants.kappa1 = 0.5;
  EXPECT_NE(config_hash(a), config_hash(c));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(SlopeFit, RecoversExactPowerLaw) {
  for (double beta : {0.25, 2.0 / 3.0, 1.7}) {
    std::vector<double> ns, ys;
    for (double n = 64; n <= 8192; n *= 2) {
      ns.push_back(n);
      ys.push_back(3.7 * std::pow(n, -beta));
    }
    const SlopeFit fit = fit_loglog(ns, ys);
    EXPECT_NEAR(fit.slope, -beta, 1e-10);
    EXPECT_NEAR(std::exp(fit.intercept), 3.7, 1e-9);
    EXPECT_LT(fit.residual, 1e-12);
  }
  const std::vector<double> one{1.0};
  EXPECT_THROW(fit_loglog(one, one), PreconditionError);
}

TEST(SlopeFit, RatesTableRefitAndMixedHashRejection) {
  const CsvTable same = rates_csv({{"h1", "sublinear", "64", "0.1"},
                                   {"h1", "sublinear", "128", fmt17(0.1 * std::pow(2.0, -2.0 / 3.0))},
                                   {"h1", "sublinear", "256", fmt17(0.1 * std::pow(4.0, -2.0 / 3.0))}});
  const auto fits = fit_rates_table(same, 0);
  ASSERT_EQ(fits.size(), 1u);
  EXPECT_NEAR(fits[0].second.slope, -2.0 / 3.0, 1e-10);
  const CsvTable mixed = rates_csv({{"h1", "sublinear", "64", "0.1"}, {"h2", "sublinear", "128", "0.05"}});
  EXPECT_THROW(fit_rates_table(mixed, 0), FormatError);
  EXPECT_THROW(plot_series(mixed), FormatError);
}

TEST(Predictions, Exponents) {
  EXPECT_NEAR(*predicted_slope(RegularizerKind::Sublinear, 0.5, 0.5), -2.0 / 3.0, 1e-15);
  EXPECT_NEAR(*predicted_slope(RegularizerKind::Sublinear, 0.5, 0.25), -0.5, 1e-15);
  EXPECT_NEAR(*predicted_slope(RegularizerKind::Quadratic, 0.5, 0.25), -1.0 / 3.0, 1e-15);
  const auto all = rate_predictions(0.5, 0.5);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_NEAR(all[0].slope, -0.25, 1e-15);
  EXPECT_TRUE(rate_predictions(1.0, 0.5).empty());
  EXPECT_FALSE(predicted_slope(RegularizerKind::Sublinear, 1.0, 0.5).has_value());
  EXPECT_FALSE(predicted_slope(RegularizerKind::Null, 0.5, 0.5).has_value());
}

TEST(Plot, EmptyDataIsAnError) {
  CsvTable t({"config_hash", "kind", "n", "mean_excess"});
  EXPECT_THROW(emit_plot(t), FormatError);
  CsvTable missing({"kind", "n"});
  missing.add({"sublinear", "64"});
  EXPECT_THROW(emit_plot(missing), FormatError);
}

TEST(Plot, SingleSeriesTwoPoints) {
  const CsvTable t = rates_csv({{"h", "sublinear", "64", "0.1"}, {"h", "sublinear", "128", "0.06"}});
  const std::string svg = emit_plot(t);
  EXPECT_EQ(XmlChecker(svg).check(), "");
  std::size_t polylines = 0, dashed = 0;
  for (std::size_t k = svg.find("<polyline"); k != std::string::npos; k = svg.find("<polyline", k + 1)) ++polylines;
  for (std::size_t k = svg.find("stroke-dasharray"); k != std::string::npos; k = svg.find("stroke-dasharray", k + 1)) ++dashed;
  EXPECT_EQ(polylines, 1u);
  EXPECT_EQ(dashed, 1u);
}

TEST(Plot, EscapesLabels) {
  const CsvTable t = rates_csv({{"h", "a<b&c", "64", "0.1"}, {"h", "a<b&c", "128", "0.06"}});
  const std::string svg = emit_plot(t);
  EXPECT_EQ(XmlChecker(svg).check(), "");
  EXPECT_NE(svg.find("a&lt;b&amp;c"), std::string::npos);
  EXPECT_NE(XmlChecker("<svg><g></svg>").check(), "");
}

TEST(Rates, NoiselessInterpolationVanishes) {
  ExperimentConfig cfg;
  cfg.truncation = 41;
  cfg.noise = 0.0;
  cfg.rates.kinds = {RegularizerKind::Null};
  cfg.rates.n_grid = {16, 256};
  cfg.rates.seeds = 3;
  cfg.rates.calibrate = false;
  const RateResult r = run_rates(cfg);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.completion, 1.0);
  EXPECT_LT(r.rows[1].mean, 1e-8);
  EXPECT_LT(r.rows[1].mean, r.rows[0].mean);
}

TEST(Rates, DeterministicAcrossJobs) {
  ExperimentConfig cfg = small_rates_config();
  const RateResult a = run_rates(cfg);
  cfg.jobs = 3;
  const RateResult b = run_rates(cfg);
  EXPECT_EQ(rate_cells_table(a).str(), rate_cells_table(b).str());
  EXPECT_EQ(rates_table(a, cfg).str(), rates_table(b, cfg).str());
  EXPECT_EQ(rate_fit_table(a).str(), rate_fit_table(b).str());
  EXPECT_EQ(calibration_table(a).str(), calibration_table(b).str());
  EXPECT_EQ(a.cells.size(), cfg.rates.kinds.size() * cfg.rates.n_grid.size() * cfg.rates.seeds);
  for (const auto& row : a.rows) {
    EXPECT_GE(row.mean, 0.0);
    EXPECT_EQ(row.completed, cfg.rates.seeds);
  }
  for (const auto& line : {rates_table(a, cfg).str(), rate_cells_table(a).str()})
    EXPECT_EQ(line.find('\r'), std::string::npos);
}

TEST(Rates, CompletionThresholdBlocksFits) {
  ExperimentConfig cfg = small_rates_config();
  std::vector<RateRow> rows;
  for (std::size_t n : cfg.rates.n_grid) rows.push_back(RateRow{RegularizerKind::Sublinear, n, 0.1 / n, 0.0, 4, 2});
  const KindFit fit = fit_kind(RegularizerKind::Sublinear, rows, cfg);
  EXPECT_FALSE(fit.ok);
  EXPECT_EQ(fit.message, "cell completion below threshold");
  for (auto& row : rows) row.completed = 4;
  const KindFit good = fit_kind(RegularizerKind::Sublinear, rows, cfg);
  EXPECT_TRUE(good.ok);
  EXPECT_EQ(good.raw.points, 2u);
  EXPECT_NEAR(good.raw.slope, -1.0, 1e-12);
}

TEST(Checks, TableShapeAndDeterminism) {
  ExperimentConfig cfg = small_checks_config();
  const auto a = run_checks(cfg);
  cfg.jobs = 4;
  const auto b = run_checks(cfg);
  EXPECT_GE(a.size(), 9u);
  const std::string hash = config_hash(cfg);
  EXPECT_EQ(checks_table(hash, a).str(), checks_table(hash, b).str());
  for (const auto& row : a) EXPECT_EQ(row.message.rfind("error:", 0), std::string::npos) << row.check << ": " << row.message;
}

TEST(Checks, FaultInjectionSeparatesSlopeFromConstant) {
  Constants broken;
  broken.c_tilde = 1e-6;
  const std::size_t length = std::size_t{1} << 16;
  EXPECT_TRUE(check_fixed_point_slope(0.5, broken.c_tilde, 10, 20, length).pass);
  EXPECT_FALSE(check_fixed_point_constant(0.5, broken, 10, 20, length).pass);
  EXPECT_TRUE(check_fixed_point_constant(0.5, Constants{}, 10, 20, length).pass);
}

TEST(Checks, CrashingCheckBecomesFailRow) {
  ExperimentConfig cfg = small_checks_config();
  cfg.checks.lemma41_x = -1.0;  // rejected inside the inclusion check
  const auto rows = run_checks(cfg);
  bool found = false;
  for (const auto& row : rows)
    if (row.check == "lemma41_inclusion") {
      found = true;
      EXPECT_FALSE(row.pass);
      EXPECT_EQ(row.message.rfind("error: ", 0), 0u);
    }
  EXPECT_TRUE(found);
}
