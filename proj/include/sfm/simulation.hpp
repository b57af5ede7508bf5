#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "sfm/core.hpp"
#include "sfm/estimator.hpp"
#include "sfm/model_selection.hpp"
#include "sfm/rng.hpp"

namespace sfm {

enum class SimPattern {
  perfect_simple,                 // m contiguous blocks, one factor per row; s = p
  perfect_simple_overlap,         // blocks plus next-factor overlaps of size ceil(0.5 p/m)
  perfect_simple_overlap_sparse,  // overlap support thinned to 30% of p*m nonzeros
  arbitrary                       // uniform random support, s = round(0.15 p*m)
};

struct SimDesign {
  SimPattern pattern = SimPattern::perfect_simple;
  Index p = 0;
  Index m = 0;
  Index n = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (m < 1 || p < m) throw std::invalid_argument("SimDesign: need p >= m >= 1");
    if (n < 1) throw std::invalid_argument("SimDesign: need n >= 1");
  }
};

template <typename Scalar>
struct GroundTruth {
  FactorParams<Scalar> params;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> support;
  Index s = 0;
};

namespace detail {

inline Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> block_support(Index p, Index m) {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> sup(p, m);
  sup.setConstant(false);
  const Index base = p / m;
  for (Index j = 0; j < m; ++j) {
    const Index lo = j * base;
    const Index hi = (j == m - 1) ? p : lo + base;  // remainder joins the last block
    for (Index i = lo; i < hi; ++i) sup(i, j) = true;
  }
  return sup;
}

inline Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> overlap_support(Index p, Index m) {
  auto sup = block_support(p, m);
  if (m == 1) return sup;
  const Index base = p / m;
  const Index overlap = (p + 2 * m - 1) / (2 * m);  // ceil(0.5 p / m)
  if (overlap > base)
    throw std::invalid_argument("pattern infeasible: overlap exceeds block size");
  for (Index j = 0; j + 1 < m; ++j) {
    const Index hi = (j + 1) * base;  // one past block j (blocks 0..m-2 have size `base`)
    for (Index i = hi - overlap; i < hi; ++i) sup(i, j + 1) = true;
  }
  return sup;
}

// Keep `keep` uniformly chosen cells from the support (seeded shuffle).
inline void thin_support(Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& sup, Index keep,
                         Rng& rng) {
  std::vector<std::pair<Index, Index>> cells;
  for (Index j = 0; j < sup.cols(); ++j)
    for (Index i = 0; i < sup.rows(); ++i)
      if (sup(i, j)) cells.emplace_back(i, j);
  if (keep > Index(cells.size()))
    throw std::invalid_argument("pattern infeasible: too few support cells to thin");
  for (std::size_t i = cells.size() - 1; i > 0; --i)
    std::swap(cells[i], cells[rng.below(std::uint64_t(i) + 1)]);
  sup.setConstant(false);
  for (Index k = 0; k < keep; ++k) sup(cells[std::size_t(k)].first, cells[std::size_t(k)].second) = true;
}

}  // namespace detail

/// Ground-truth generation: support per the requested pattern, psi uniform
/// on [0.5, 1], nonzero loadings uniform on [-2,-0.5] u [0.5, 2].  Patterns
/// one and two have seed-independent support; the sparse variants draw their
/// support locations from the seed.
template <typename Scalar = double>
GroundTruth<Scalar> generate_model(const SimDesign& design) {
  design.validate();
  const Index p = design.p, m = design.m;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> sup;
  Rng support_rng(derive_seed(design.seed, 1));

  switch (design.pattern) {
    case SimPattern::perfect_simple:
      sup = detail::block_support(p, m);
      break;
    case SimPattern::perfect_simple_overlap:
      sup = detail::overlap_support(p, m);
      break;
    case SimPattern::perfect_simple_overlap_sparse: {
      sup = detail::overlap_support(p, m);
      const Index zeros = Index(std::llround(0.7 * double(p) * double(m)));
      const Index keep = p * m - zeros;
      if (keep < 1) throw std::invalid_argument("pattern infeasible: empty support");
      detail::thin_support(sup, keep, support_rng);
      break;
    }
    case SimPattern::arbitrary: {
      const Index keep = Index(std::llround(0.15 * double(p) * double(m)));
      if (keep < 1) throw std::invalid_argument("pattern infeasible: empty support");
      sup.resize(p, m);
      sup.setConstant(true);
      detail::thin_support(sup, keep, support_rng);
      break;
    }
  }

  GroundTruth<Scalar> truth;
  truth.support = sup;
  truth.s = Index(sup.count());

  Rng value_rng(derive_seed(design.seed, 2));
  Vec<Scalar> psi(p);
  for (Index k = 0; k < p; ++k) psi(k) = Scalar(value_rng.uniform(0.5, 1.0));
  Mat<Scalar> lambda = Mat<Scalar>::Zero(p, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < p; ++i)
      if (sup(i, j)) {
        const Scalar mag = Scalar(value_rng.uniform(0.5, 2.0));
        lambda(i, j) = value_rng.uniform() < 0.5 ? -mag : mag;
      }
  // Emit the canonical signed-permutation representative so that the ground
  // truth and a canonicalized fit are directly comparable cell by cell.
  // Sigma* and the nonzero count are unchanged; the support mask follows the
  // same column map.
  lambda = canonicalize_loadings(lambda, Scalar(0));
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < p; ++i) truth.support(i, j) = lambda(i, j) != Scalar(0);
  truth.params = FactorParams<Scalar>{std::move(lambda), std::move(psi)};
  return truth;
}

/// i.i.d. mean-zero Gaussian rows with covariance Lambda* Lambda*^T + Psi*.
/// The returned data is flagged as centered: the population mean is known to
/// be zero, so second moments are taken about zero.
template <typename Scalar>
DataSet<Scalar> sample_data(const GroundTruth<Scalar>& truth, Index n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_data: need n >= 1");
  const Index p = truth.params.p();
  const Mat<Scalar> sigma = assemble_sigma(truth.params).sigma;
  Eigen::LLT<Mat<Scalar>> llt(sigma);
  if (llt.info() != Eigen::Success) throw NumericalError("sample_data: covariance not PD");
  const Mat<Scalar> chol = llt.matrixL();

  Rng rng(seed);
  DataSet<Scalar> data;
  data.x.resize(n, p);
  Vec<Scalar> z(p);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < p; ++j) z(j) = Scalar(rng.normal());
    data.x.row(i) = (chol * z).transpose();
  }
  data.centered = true;
  return data;
}

template <typename Scalar>
struct RecoveryMetrics {
  Scalar c1 = 0;   // % of true zeros with |lambda_hat| <= zero_tol
  Scalar c2 = 0;   // % of true nonzeros with |lambda_hat| > zero_tol
  Scalar mse = 0;  // squared Frobenius distance of the loadings
};

template <typename Scalar>
RecoveryMetrics<Scalar> recovery_metrics(const Mat<std::type_identity_t<Scalar>>& lambda_hat,
                                         const GroundTruth<Scalar>& truth, Scalar zero_tol) {
  if (lambda_hat.rows() != truth.params.p() || lambda_hat.cols() != truth.params.m())
    throw std::invalid_argument("recovery_metrics: dimension mismatch");
  Index zeros = 0, zeros_hit = 0, nonzeros = 0, nonzeros_hit = 0;
  for (Index j = 0; j < lambda_hat.cols(); ++j)
    for (Index i = 0; i < lambda_hat.rows(); ++i) {
      const bool est_zero = std::abs(lambda_hat(i, j)) <= zero_tol;
      if (truth.support(i, j)) {
        ++nonzeros;
        if (!est_zero) ++nonzeros_hit;
      } else {
        ++zeros;
        if (est_zero) ++zeros_hit;
      }
    }
  RecoveryMetrics<Scalar> out;
  out.c1 = zeros == 0 ? Scalar(100) : Scalar(100) * Scalar(zeros_hit) / Scalar(zeros);
  out.c2 = nonzeros == 0 ? Scalar(100) : Scalar(100) * Scalar(nonzeros_hit) / Scalar(nonzeros);
  out.mse = (lambda_hat - truth.params.lambda).squaredNorm();
  return out;
}

/// Orthogonal Procrustes alignment: the orthogonal R minimizing
/// ||lambda_hat - lambda_star R||_F, from the SVD of lambda_star^T lambda_hat.
template <typename Scalar>
Mat<Scalar> align_rotation(const Mat<Scalar>& lambda_hat, const Mat<Scalar>& lambda_star) {
  if (lambda_hat.rows() != lambda_star.rows() || lambda_hat.cols() != lambda_star.cols())
    throw std::invalid_argument("align_rotation: dimension mismatch");
  auto check_rank = [](const Mat<Scalar>& a, const char* who) {
    Eigen::JacobiSVD<Mat<Scalar>> svd(a);
    const auto& sv = svd.singularValues();
    if (sv(sv.size() - 1) <= Scalar(1e-12) * std::max(Scalar(1), sv(0)))
      throw NumericalError(std::string("align_rotation: ") + who + " is rank deficient");
  };
  check_rank(lambda_hat, "lambda_hat");
  check_rank(lambda_star, "lambda_star");
  Eigen::JacobiSVD<Mat<Scalar>> svd(lambda_star.transpose() * lambda_hat,
                                    Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

template <typename Scalar>
struct RepRecord {
  int rep = 0;
  std::uint64_t seed = 0;  // model seed of the replication
  Scalar c1 = 0, c2 = 0, mse = 0;
  bool converged = false;
  int iterations = 0;
  Scalar gamma_star = 0;
  bool failed = false;
  std::string message;
};

template <typename Scalar>
struct BatchSummary {
  SimDesign design;
  std::vector<RepRecord<Scalar>> records;
  Scalar mean_c1 = 0, mean_c2 = 0, mean_mse = 0;
  int failures = 0;
};

/// Replication loop: generate -> cross-validate gamma -> fit -> score.  Each
/// replication derives its own RNG streams from the design/config/plan seeds
/// and its index, so results do not depend on the thread count.
template <typename Scalar>
BatchSummary<Scalar> run_batch(const SimDesign& design, int reps,
                               const EstimatorConfig<Scalar>& config, const CvPlan<Scalar>& plan,
                               int threads = 1) {
  design.validate();
  config.validate();
  plan.validate();
  if (reps < 1) throw std::invalid_argument("run_batch: reps >= 1");
  if (threads < 1) threads = 1;

  BatchSummary<Scalar> summary;
  summary.design = design;
  summary.records.resize(std::size_t(reps));

  auto run_one = [&](int r) {
    RepRecord<Scalar>& rec = summary.records[std::size_t(r)];
    rec.rep = r;
    rec.seed = derive_seed(design.seed, std::uint64_t(r) * 4);
    try {
      SimDesign d = design;
      d.seed = rec.seed;
      const GroundTruth<Scalar> truth = generate_model<Scalar>(d);
      const DataSet<Scalar> data =
          sample_data(truth, design.n, derive_seed(design.seed, std::uint64_t(r) * 4 + 1));

      EstimatorConfig<Scalar> cfg = config;
      cfg.seed = derive_seed(config.seed, std::uint64_t(r) + 1);
      CvPlan<Scalar> pl = plan;
      pl.seed = derive_seed(plan.seed, std::uint64_t(r) + 1);

      const CvReport<Scalar> cv = cross_validate(data, design.m, cfg, pl);
      cfg.penalty.gamma = cv.gamma_star;
      const FitResult<Scalar> fit = fit_sparse(data, design.m, cfg);
      const RecoveryMetrics<Scalar> met =
          recovery_metrics(fit.params.lambda, truth, config.zero_tol);

      rec.c1 = met.c1;
      rec.c2 = met.c2;
      rec.mse = met.mse;
      rec.converged = fit.converged;
      rec.iterations = fit.iterations;
      rec.gamma_star = cv.gamma_star;
    } catch (const NumericalError& e) {
      rec.failed = true;
      rec.message = e.what();
    }
  };

  if (threads == 1 || reps == 1) {
    for (int r = 0; r < reps; ++r) run_one(r);
  } else {
    const int workers = std::min(threads, reps);
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t)
      pool.emplace_back([&, t] {
        for (int r = t; r < reps; r += workers) run_one(r);
      });
    for (auto& th : pool) th.join();
  }

  Scalar c1 = 0, c2 = 0, mse = 0;
  int ok = 0;
  for (const auto& rec : summary.records) {
    if (rec.failed) {
      ++summary.failures;
      continue;
    }
    c1 += rec.c1;
    c2 += rec.c2;
    mse += rec.mse;
    ++ok;
  }
  const Scalar nan = std::numeric_limits<Scalar>::quiet_NaN();
  summary.mean_c1 = ok ? c1 / Scalar(ok) : nan;
  summary.mean_c2 = ok ? c2 / Scalar(ok) : nan;
  summary.mean_mse = ok ? mse / Scalar(ok) : nan;
  return summary;
}

}  // namespace sfm
