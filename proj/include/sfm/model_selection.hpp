#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "sfm/core.hpp"
#include "sfm/estimator.hpp"
#include "sfm/rng.hpp"

namespace sfm {

enum class CvMode { kfold, timesplit };

template <typename Scalar>
struct CvPlan {
  CvMode mode = CvMode::kfold;
  int folds = 5;
  Scalar train_fraction = Scalar(0.75);
  std::vector<Scalar> c_grid;  // multipliers on the sqrt(log(pm)/n) rate
  std::uint64_t seed = 0;

  void validate() const {
    if (c_grid.empty()) throw std::invalid_argument("CvPlan: c_grid must be non-empty");
    for (std::size_t i = 0; i < c_grid.size(); ++i) {
      if (!(c_grid[i] >= Scalar(0)) || !std::isfinite(double(c_grid[i])))
        throw std::invalid_argument("CvPlan: c_grid entries must be finite and >= 0");
      if (i > 0 && !(c_grid[i] > c_grid[i - 1]))
        throw std::invalid_argument("CvPlan: c_grid must be strictly increasing");
    }
    if (mode == CvMode::kfold && folds < 2)
      throw std::invalid_argument("CvPlan: folds >= 2");
    if (mode == CvMode::timesplit &&
        !(train_fraction > Scalar(0) && train_fraction < Scalar(1)))
      throw std::invalid_argument("CvPlan: train_fraction in (0,1)");
  }
};

template <typename Scalar>
std::vector<Scalar> default_c_grid() {
  std::vector<Scalar> c;
  c.push_back(Scalar(0.01));
  for (int i = 1; i <= 40; ++i) c.push_back(Scalar(i) * Scalar(0.1));
  return c;
}

template <typename Scalar>
struct CvReport {
  std::vector<Scalar> gammas;
  std::vector<Scalar> scores;  // +inf marks a grid point where every fit failed
  Scalar gamma_star = 0;
  std::vector<Index> fold_sizes;
  std::uint64_t seed = 0;
};

/// Penalty levels c * sqrt(log(pm)/n) for each multiplier in the plan.
template <typename Scalar>
std::vector<Scalar> gamma_grid(const CvPlan<Scalar>& plan, Index n, Index p, Index m) {
  plan.validate();
  if (p * m < 2) throw std::invalid_argument("gamma_grid: need p*m >= 2");
  if (n < 2) throw std::invalid_argument("gamma_grid: need n >= 2");
  const Scalar rate = std::sqrt(std::log(Scalar(p) * Scalar(m)) / Scalar(n));
  std::vector<Scalar> out(plan.c_grid.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = plan.c_grid[i] * rate;
  return out;
}

namespace detail {

// Smallest gamma among the (near-)minimal scores loses to the largest: ties
// within 1e-10 resolve toward the sparser fit.
template <typename Scalar>
std::size_t select_gamma(const std::vector<Scalar>& scores) {
  Scalar best = std::numeric_limits<Scalar>::infinity();
  for (const Scalar s : scores) best = std::min(best, s);
  if (!std::isfinite(double(best)))
    throw NumericalError("cross-validation: every penalty level failed on some fold");
  std::size_t pick = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] <= best + Scalar(1e-10)) pick = i;
  return pick;
}

template <typename Scalar>
DataSet<Scalar> take_rows(const DataSet<Scalar>& data, const std::vector<Index>& rows) {
  DataSet<Scalar> out;
  out.x.resize(Index(rows.size()), data.x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.x.row(Index(i)) = data.x.row(rows[i]);
  out.centered = data.centered;
  return out;
}

template <typename Scalar>
struct CvFold {
  CovarianceMatrix<Scalar> s_train;
  CovarianceMatrix<Scalar> s_test;
  Index test_size;
};

// Shared scoring loop: fit each gamma on every fold's training covariance
// (reusing the gamma-free constrained init per fold) and score on the held
// out covariance with the unpenalized loss.
template <typename Scalar>
CvReport<Scalar> score_folds(const std::vector<CvFold<Scalar>>& folds, Index m,
                             const EstimatorConfig<Scalar>& config,
                             const std::vector<Scalar>& gammas, std::uint64_t report_seed) {
  CvReport<Scalar> report;
  report.gammas = gammas;
  report.seed = report_seed;
  report.scores.assign(gammas.size(), Scalar(0));
  for (const auto& f : folds) report.fold_sizes.push_back(f.test_size);

  for (std::size_t fi = 0; fi < folds.size(); ++fi) {
    const CvFold<Scalar>& fold = folds[fi];
    bool have_init = false;
    FactorParams<Scalar> init;
    try {
      init = fit_ic5(fold.s_train, m, config.loss, config);
      have_init = true;
    } catch (const ConvergenceError<FactorParams<Scalar>>& e) {
      init = e.best;  // stationarity shortfall: still a usable warm start
      have_init = true;
    } catch (const NumericalError&) {
      have_init = false;
    }

    for (std::size_t gi = 0; gi < gammas.size(); ++gi) {
      if (!std::isfinite(double(report.scores[gi]))) continue;
      Scalar score = std::numeric_limits<Scalar>::infinity();
      if (have_init) {
        EstimatorConfig<Scalar> cfg = config;
        cfg.penalty.gamma = gammas[gi];
        cfg.seed = derive_seed(config.seed, (std::uint64_t(fi) << 20) | std::uint64_t(gi));
        try {
          const FitResult<Scalar> fit = fit_sparse(fold.s_train, m, cfg, init);
          score = loss_value(config.loss, fold.s_test, fit.params);
        } catch (const NumericalError&) {
          score = std::numeric_limits<Scalar>::infinity();
        }
      }
      report.scores[gi] =
          std::isfinite(double(score)) ? report.scores[gi] + score
                                       : std::numeric_limits<Scalar>::infinity();
    }
  }

  report.gamma_star = gammas[select_gamma(report.scores)];
  return report;
}

}  // namespace detail

/// K-fold cross-validation of the penalty level.  Fold membership is a
/// seeded permutation; sizes differ by at most one with the remainder going
/// to the first folds.  The score of a gamma is the sum over folds of the
/// held-out unpenalized loss; ties resolve to the largest gamma.
template <typename Scalar>
CvReport<Scalar> cv_kfold(const DataSet<Scalar>& data, Index m,
                          const EstimatorConfig<Scalar>& config, const CvPlan<Scalar>& plan) {
  data.validate();
  config.validate();
  plan.validate();
  if (plan.mode != CvMode::kfold) throw std::invalid_argument("cv_kfold: plan.mode mismatch");
  const Index n = data.n(), p = data.p();
  if (n < Index(plan.folds) * 2)
    throw std::invalid_argument("cv_kfold: need at least 2 rows per fold");

  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index(0));
  Rng rng(derive_seed(plan.seed, 0xf01dULL));
  for (Index i = n - 1; i > 0; --i)
    std::swap(perm[std::size_t(i)], perm[rng.below(std::uint64_t(i) + 1)]);

  std::vector<std::vector<Index>> fold_rows(std::size_t(plan.folds));
  {
    const Index base = n / plan.folds, extra = n % plan.folds;
    Index at = 0;
    for (int f = 0; f < plan.folds; ++f) {
      const Index sz = base + (Index(f) < extra ? 1 : 0);
      for (Index i = 0; i < sz; ++i) fold_rows[std::size_t(f)].push_back(perm[std::size_t(at++)]);
    }
  }

  std::vector<detail::CvFold<Scalar>> folds;
  for (int f = 0; f < plan.folds; ++f) {
    std::vector<Index> train_rows;
    for (int g = 0; g < plan.folds; ++g)
      if (g != f)
        train_rows.insert(train_rows.end(), fold_rows[std::size_t(g)].begin(),
                          fold_rows[std::size_t(g)].end());
    detail::CvFold<Scalar> fold;
    fold.s_train = sample_covariance(detail::take_rows(data, train_rows));
    fold.s_test = sample_covariance(detail::take_rows(data, fold_rows[std::size_t(f)]));
    fold.test_size = Index(fold_rows[std::size_t(f)].size());
    folds.push_back(std::move(fold));
  }

  return detail::score_folds(folds, m, config, gamma_grid(plan, n, p, m), plan.seed);
}

/// Ordered split for serially dependent rows: the first floor(n * fraction)
/// rows train, the rest score.  Unlike the k-fold driver this is sensitive
/// to row order by design.
template <typename Scalar>
CvReport<Scalar> cv_timesplit(const DataSet<Scalar>& data, Index m,
                              const EstimatorConfig<Scalar>& config, const CvPlan<Scalar>& plan) {
  data.validate();
  config.validate();
  plan.validate();
  if (plan.mode != CvMode::timesplit)
    throw std::invalid_argument("cv_timesplit: plan.mode mismatch");
  const Index n = data.n(), p = data.p();
  const Index n_train = Index(std::floor(double(plan.train_fraction) * double(n)));
  if (n_train < 2 || n - n_train < 2)
    throw std::invalid_argument("cv_timesplit: split leaves too few rows on one side");

  std::vector<Index> train_rows, test_rows;
  for (Index i = 0; i < n_train; ++i) train_rows.push_back(i);
  for (Index i = n_train; i < n; ++i) test_rows.push_back(i);

  detail::CvFold<Scalar> fold;
  fold.s_train = sample_covariance(detail::take_rows(data, train_rows));
  fold.s_test = sample_covariance(detail::take_rows(data, test_rows));
  fold.test_size = Index(test_rows.size());

  std::vector<detail::CvFold<Scalar>> folds{std::move(fold)};
  return detail::score_folds(folds, m, config, gamma_grid(plan, n, p, m), plan.seed);
}

/// Dispatch on the plan's mode.
template <typename Scalar>
CvReport<Scalar> cross_validate(const DataSet<Scalar>& data, Index m,
                                const EstimatorConfig<Scalar>& config,
                                const CvPlan<Scalar>& plan) {
  return plan.mode == CvMode::kfold ? cv_kfold(data, m, config, plan)
                                    : cv_timesplit(data, m, config, plan);
}

}  // namespace sfm
