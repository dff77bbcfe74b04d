// Prints the regularization path of one sample and the point each
// regularizer selects on it, as CSV on stdout.

#include <iostream>

#include "rkhs/experiment.hpp"
#include "rkhs/solver.hpp"

int main() {
  using namespace rkhs;
  const ExperimentConfig cfg;
  const EigenSpec spec = experiment_spec(cfg);
  const RegressionTask task = experiment_task(cfg, spec);
  const std::size_t n = 256;
  const SampleSet sample = draw_sample(task, n, cfg.seed);
  const Frontier frontier = build_frontier(make_ridge_system(spec, sample), default_eta_grid());

  CsvTable path({"eta", "norm", "empirical_loss"});
  for (const auto& pt : frontier.points) path.add({fmt17(pt.eta), fmt17(pt.norm), fmt17(pt.loss)});
  std::cout << path.str() << '\n';

  Constants constants = cfg.constants;
  constants.kappa1 = 0.01;
  CsvTable chosen({"kind", "eta", "norm", "empirical_loss", "excess_risk"});
  for (auto kind : {RegularizerKind::Sublinear, RegularizerKind::Quadratic, RegularizerKind::Improved,
                    RegularizerKind::RidgeBaseline, RegularizerKind::Null}) {
    const RegularizerSpec reg{kind, constants, spec, static_cast<double>(n), 1.0};
    const FittedFunction fit = regularized_erm(frontier, reg, constants.u);
    chosen.add({to_string(kind), fmt17(fit.eta), fmt17(fit.norm), fmt17(fit.loss),
                fmt17(population_risk_excess(fit.coeffs, task))});
  }
  std::cout << chosen.str();
}
