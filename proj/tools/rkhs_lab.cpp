// rkhs_lab: rate studies, the check suite, complexity sweeps and plots.
//
//   rkhs_lab rates      [--config f.json] [--out dir] [--seed s] [--jobs k]
//   rkhs_lab checks     [--config f.json] [--out dir] [--seed s] [--jobs k]
//   rkhs_lab complexity [--config f.json] [--out dir] [--seed s] [--jobs k]
//   rkhs_lab plot <rates.csv> [--out file.svg]
//
// Exit status: 0 success, 1 check failure, 2 usage or configuration error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rkhs/checks.hpp"
#include "rkhs/experiment.hpp"
#include "rkhs/plot.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailure = 1;
constexpr int kUsage = 2;

struct CommonFlags {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "JSON experiment configuration")->check(CLI::ExistingFile);
  cmd->add_option("--out", flags.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", flags.seed, "root seed (overrides the config)");
  cmd->add_option("--jobs", flags.jobs, "worker threads")->check(CLI::PositiveNumber);
}

rkhs::ExperimentConfig resolve(const CommonFlags& flags) {
  rkhs::ExperimentConfig cfg = flags.config.empty() ? rkhs::ExperimentConfig{} : rkhs::load_config(flags.config);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.jobs) cfg.jobs = *flags.jobs;
  rkhs::validate(cfg);
  return cfg;
}

int cmd_rates(const CommonFlags& flags) {
  const auto cfg = resolve(flags);
  const auto result = rkhs::run_rates(cfg);
  rkhs::write_rates(result, cfg, flags.out);
  bool ok = true;
  for (const auto& f : result.fits) {
    if (f.ok) {
      std::cout << rkhs::to_string(f.kind) << ": slope " << f.raw.slope << " (log-adjusted " << f.log_adjusted.slope
                << ")";
      if (f.predicted) std::cout << ", predicted " << *f.predicted;
      std::cout << '\n';
    } else {
      std::cout << rkhs::to_string(f.kind) << ": " << f.message << '\n';
      ok = false;
    }
  }
  return ok ? kOk : kCheckFailure;
}

int cmd_checks(const CommonFlags& flags) {
  const auto cfg = resolve(flags);
  const auto rows = rkhs::run_checks(cfg);
  std::filesystem::create_directories(flags.out);
  rkhs::checks_table(rkhs::config_hash(cfg), rows).write(std::filesystem::path(flags.out) / "checks.csv");
  bool ok = true;
  for (const auto& r : rows) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.check << " [" << r.params << "] statistic " << r.statistic
              << " threshold " << r.threshold << '\n';
    ok = ok && r.pass;
  }
  return ok ? kOk : kCheckFailure;
}

int cmd_complexity(const CommonFlags& flags) {
  const auto cfg = resolve(flags);
  const auto result = rkhs::run_complexity(cfg);
  rkhs::write_complexity(result, flags.out);
  std::cout << "wrote " << result.localized.size() << " localized rows and " << result.sudakov.size()
            << " sudakov rows to " << flags.out << '\n';
  return kOk;
}

int cmd_plot(const std::string& csv, const std::string& out) {
  std::ifstream in(csv);
  if (!in) throw rkhs::FormatError("cannot open " + csv);
  const auto table = rkhs::parse_csv(in);
  const std::string svg = rkhs::emit_plot(table);
  const std::filesystem::path path(out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary);
  if (!file) throw rkhs::FormatError("cannot write " + out);
  file << svg;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regularized least squares in an RKHS: rates, checks and complexity sweeps"};
  app.require_subcommand(1);

  CommonFlags rates_flags, checks_flags, complexity_flags;
  auto* rates = app.add_subcommand("rates", "excess-risk rate study over the n-grid");
  add_common(rates, rates_flags);
  auto* checks = app.add_subcommand("checks", "run the check suite");
  add_common(checks, checks_flags);
  auto* complexity = app.add_subcommand("complexity", "localized complexity and covering-number sweeps");
  add_common(complexity, complexity_flags);

  std::string plot_csv, plot_out = "out/rates.svg";
  auto* plot = app.add_subcommand("plot", "log-log SVG of a rates CSV");
  plot->add_option("csv", plot_csv, "rates.csv produced by `rates`")->required();
  plot->add_option("--out", plot_out, "output SVG path")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*rates) return cmd_rates(rates_flags);
    if (*checks) return cmd_checks(checks_flags);
    if (*complexity) return cmd_complexity(complexity_flags);
    if (*plot) return cmd_plot(plot_csv, plot_out);
  } catch (const rkhs::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const rkhs::PreconditionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailure;
  }
  return kUsage;
}
