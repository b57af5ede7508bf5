#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "sfm/core.hpp"
#include "sfm/estimator.hpp"
#include "sfm/model_selection.hpp"

namespace sfm {

/// Global minimum-variance weights w = Sigma^{-1} 1 / (1^T Sigma^{-1} 1).
template <typename Scalar>
Vec<Scalar> gmvp_weights(const CovarianceMatrix<Scalar>& sigma) {
  sigma.validate();
  const Index p = sigma.p();
  Eigen::LLT<Mat<Scalar>> llt(sigma.sigma);
  if (llt.info() != Eigen::Success)
    throw NumericalError("gmvp_weights: covariance is not positive definite");
  // LLT can run to completion on a numerically singular matrix (for example a
  // sample covariance built from fewer rows than assets); reject before the
  // solve turns rounding noise into weights.
  if (llt.rcond() < Scalar(1e-12))
    throw NumericalError("gmvp_weights: covariance is numerically singular");
  Vec<Scalar> w = llt.solve(Vec<Scalar>::Ones(p));
  const Scalar denom = w.sum();
  if (!(denom > Scalar(0)) || !w.allFinite())
    throw NumericalError("gmvp_weights: degenerate solve");
  return w / denom;
}

/// r[t][j] = 100 * ln(P[t+1][j] / P[t][j]); one fewer row than the input.
template <typename Derived>
Mat<typename Derived::Scalar> log_returns(const Eigen::MatrixBase<Derived>& prices) {
  using Scalar = typename Derived::Scalar;
  if (prices.rows() < 2) throw std::invalid_argument("log_returns: need at least two rows");
  if (!(prices.array() > Scalar(0)).all())
    throw std::invalid_argument("log_returns: prices must be positive");
  Mat<Scalar> r(prices.rows() - 1, prices.cols());
  for (Index t = 0; t + 1 < prices.rows(); ++t)
    r.row(t) = Scalar(100) * (prices.row(t + 1).array() / prices.row(t).array()).log();
  return r;
}

enum class PortfolioEstimatorKind { sample_covariance, equal_weight, factor_model };

struct PortfolioEstimator {
  std::string label;
  PortfolioEstimatorKind kind = PortfolioEstimatorKind::factor_model;
  LossKind loss = LossKind::gaussian;          // factor_model only
  PenaltyFamily family = PenaltyFamily::scad;  // factor_model only
};

/// The static comparison set: sample covariance, the four penalized factor
/// fits, and the 1/p baseline.
inline std::vector<PortfolioEstimator> default_portfolio_estimators() {
  using K = PortfolioEstimatorKind;
  return {
      {"sample", K::sample_covariance, LossKind::gaussian, PenaltyFamily::scad},
      {"equal", K::equal_weight, LossKind::gaussian, PenaltyFamily::scad},
      {"gaussian-scad", K::factor_model, LossKind::gaussian, PenaltyFamily::scad},
      {"gaussian-mcp", K::factor_model, LossKind::gaussian, PenaltyFamily::mcp},
      {"ls-scad", K::factor_model, LossKind::least_squares, PenaltyFamily::scad},
      {"ls-mcp", K::factor_model, LossKind::least_squares, PenaltyFamily::mcp},
  };
}

template <typename Scalar>
struct BacktestReport {
  std::string estimator_label;
  Scalar avg = 0;  // annualized mean: daily mean * 252
  Scalar sd = 0;   // annualized std: daily std (n-1 denominator) * sqrt(252)
  Scalar ir = std::numeric_limits<Scalar>::quiet_NaN();  // avg / sd; NaN when sd == 0
  Vec<Scalar> weights;
  Scalar gamma_star = std::numeric_limits<Scalar>::quiet_NaN();  // factor estimators only
  bool failed = false;
  std::string message;
};

/// Split-sample backtest: each estimator builds Sigma-hat from the in-sample
/// rows (de-meaned there unless the data is flagged centered), takes GMVP
/// weights once, and holds them over the raw out-of-sample rows.  Estimator
/// failures are recorded per label, not propagated.
template <typename Scalar>
std::vector<BacktestReport<Scalar>> backtest(const DataSet<Scalar>& returns, Index split_index,
                                             Index m, const std::vector<PortfolioEstimator>& estimators,
                                             const EstimatorConfig<Scalar>& config,
                                             const CvPlan<Scalar>& plan, int threads = 1) {
  returns.validate();
  config.validate();
  plan.validate();
  const Index n = returns.n(), p = returns.p();
  if (m < 1 || m > p) throw std::invalid_argument("backtest: need 1 <= m <= p");
  if (split_index < std::max<Index>(p, 2) || n - split_index < 2)
    throw std::invalid_argument(
        "backtest: split must leave >= max(p,2) in-sample and >= 2 out-of-sample rows");
  if (estimators.empty()) throw std::invalid_argument("backtest: empty estimator list");
  if (threads < 1) threads = 1;

  DataSet<Scalar> in_sample;
  in_sample.x = returns.x.topRows(split_index);
  in_sample.centered = returns.centered;
  const Mat<Scalar> oos = returns.x.bottomRows(n - split_index);

  std::vector<BacktestReport<Scalar>> reports(estimators.size());

  auto run_one = [&](std::size_t idx) {
    const PortfolioEstimator& est = estimators[idx];
    BacktestReport<Scalar>& rep = reports[idx];
    rep.estimator_label = est.label;
    try {
      Vec<Scalar> w;
      switch (est.kind) {
        case PortfolioEstimatorKind::equal_weight:
          w = Vec<Scalar>::Constant(p, Scalar(1) / Scalar(p));
          break;
        case PortfolioEstimatorKind::sample_covariance:
          w = gmvp_weights(sample_covariance(in_sample));
          break;
        case PortfolioEstimatorKind::factor_model: {
          EstimatorConfig<Scalar> cfg = config;
          cfg.loss = est.loss;
          cfg.penalty.family = est.family;
          if (config.penalty.family != est.family)
            cfg.penalty.shape = PenaltySpec<Scalar>::default_shape(est.family);
          cfg.seed = derive_seed(config.seed, std::uint64_t(idx) + 1);
          CvPlan<Scalar> pl = plan;
          pl.seed = derive_seed(plan.seed, std::uint64_t(idx) + 1);
          const CvReport<Scalar> cv = cross_validate(in_sample, m, cfg, pl);
          cfg.penalty.gamma = cv.gamma_star;
          const FitResult<Scalar> fit = fit_sparse(in_sample, m, cfg);
          rep.gamma_star = cv.gamma_star;
          w = gmvp_weights(assemble_sigma(fit.params));
          break;
        }
      }
      rep.weights = w;
      const Vec<Scalar> port = oos * w;  // daily portfolio returns, raw
      const Scalar mean = port.mean();
      const Scalar var = (port.array() - mean).square().sum() / Scalar(port.size() - 1);
      rep.avg = mean * Scalar(252);
      rep.sd = std::sqrt(var) * std::sqrt(Scalar(252));
      rep.ir = rep.sd > Scalar(0) ? rep.avg / rep.sd
                                  : std::numeric_limits<Scalar>::quiet_NaN();
    } catch (const std::exception& e) {  // never escapes a worker thread
      rep.failed = true;
      rep.message = e.what();
    }
  };

  if (threads == 1 || estimators.size() == 1) {
    for (std::size_t i = 0; i < estimators.size(); ++i) run_one(i);
  } else {
    const std::size_t workers = std::min<std::size_t>(std::size_t(threads), estimators.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < estimators.size(); i += workers) run_one(i);
      });
    for (auto& th : pool) th.join();
  }
  return reports;
}

}  // namespace sfm
