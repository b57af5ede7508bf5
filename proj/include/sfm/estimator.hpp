#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <type_traits>
#include <vector>

#include "sfm/core.hpp"
#include "sfm/loss.hpp"
#include "sfm/penalty.hpp"
#include "sfm/rng.hpp"

namespace sfm {

template <typename Scalar>
struct EstimatorConfig {
  LossKind loss = LossKind::gaussian;
  PenaltySpec<Scalar> penalty{};
  int grid_size_k = 20;       // rotation-init restarts K
  int max_outer_iters = 500;  // alternating-loop budget
  Scalar rel_tol = Scalar(1e-6);
  Scalar psi_min = Scalar(1e-6);
  Scalar zero_tol = Scalar(1e-6);
  std::uint64_t seed = 0;
  bool skip_psi_step = false;    // keep psi from the constrained init
  bool jitter_singular = false;  // Gaussian loss on singular S: opt-in ridge instead of error
  int max_inner_iters = 300;     // per-call budget of the proximal L-step
  int ic5_max_iters = 100000;    // budget of the constrained initial fit

  void validate() const {
    penalty.validate();
    if (grid_size_k < 1) throw std::invalid_argument("EstimatorConfig: grid_size_k >= 1");
    if (max_outer_iters < 1) throw std::invalid_argument("EstimatorConfig: max_outer_iters >= 1");
    if (max_inner_iters < 1) throw std::invalid_argument("EstimatorConfig: max_inner_iters >= 1");
    if (ic5_max_iters < 1) throw std::invalid_argument("EstimatorConfig: ic5_max_iters >= 1");
    if (!(rel_tol > Scalar(0))) throw std::invalid_argument("EstimatorConfig: rel_tol > 0");
    if (!(psi_min > Scalar(0))) throw std::invalid_argument("EstimatorConfig: psi_min > 0");
    if (!(zero_tol >= Scalar(0))) throw std::invalid_argument("EstimatorConfig: zero_tol >= 0");
  }
};

template <typename Scalar>
struct FitResult {
  FactorParams<Scalar> params;
  Mat<Scalar> q_hat;  // orthogonal; q_hat^T estimates the rotation R*
  std::vector<Scalar> objective_trace;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> support;
  bool converged = false;
  int iterations = 0;
};

enum class StepKind { init, l_step, q_step, psi_step };

template <typename Scalar>
struct StepEvent {
  StepKind kind;
  int outer_iter;
  Scalar objective;    // penalized objective after the step
  Scalar smooth_loss;  // loss part alone
  const Mat<Scalar>* lambda;  // valid only during the callback
};

template <typename Scalar>
using StepObserver = std::function<void(const StepEvent<Scalar>&)>;

template <typename Scalar>
struct RotationPair {
  Mat<Scalar> l_hat;  // lower trapezoidal, non-negative top diagonal
  Mat<Scalar> q_hat;  // orthogonal
};

namespace detail {

template <typename Scalar>
void check_orthogonal(const Mat<Scalar>& q, const char* who, Scalar tol = Scalar(1e-8)) {
  if (q.rows() != q.cols()) throw std::invalid_argument(std::string(who) + ": not square");
  const Scalar err =
      (q.transpose() * q - Mat<Scalar>::Identity(q.rows(), q.cols())).cwiseAbs().maxCoeff();
  if (err > tol) throw std::invalid_argument(std::string(who) + ": matrix is not orthogonal");
}

// Nearest orthogonal matrix (polar factor) via SVD.
template <typename Scalar>
Mat<Scalar> polar_factor(const Mat<Scalar>& a) {
  Eigen::JacobiSVD<Mat<Scalar>> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

// Haar-ish random orthogonal matrix: QR of a Gaussian draw with the R
// diagonal sign fixed.
template <typename Scalar>
Mat<Scalar> random_orthogonal(Index m, Rng& rng) {
  Mat<Scalar> g(m, m);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < m; ++i) g(i, j) = Scalar(rng.normal());
  Eigen::HouseholderQR<Mat<Scalar>> qr(g);
  Mat<Scalar> q = qr.householderQ();
  const Mat<Scalar> r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (Index j = 0; j < m; ++j)
    if (r(j, j) < Scalar(0)) q.col(j) = -q.col(j);
  return q;
}

// Minimize  sum_ij p(|(target W)_ij|)  over orthogonal W by subgradient
// steps with a polar retraction and a halving line search.  Monotone: the
// returned W is never worse than w_init.
template <typename Scalar>
Mat<Scalar> minimize_rotation(const Mat<Scalar>& target, const PenaltySpec<Scalar>& penalty,
                              const Mat<Scalar>& w_init, int max_iters = 150) {
  const Index m = w_init.rows();
  Mat<Scalar> w = w_init;
  Scalar val = penalty_sum(penalty, Mat<Scalar>(target * w));
  if (penalty.gamma == Scalar(0)) return w;

  for (int it = 0; it < max_iters; ++it) {
    const Mat<Scalar> rotated = target * w;
    Mat<Scalar> sub(rotated.rows(), m);  // subgradient of the penalty at `rotated`
    for (Index j = 0; j < m; ++j)
      for (Index i = 0; i < rotated.rows(); ++i) {
        const Scalar x = rotated(i, j);
        sub(i, j) = x == Scalar(0)
                        ? Scalar(0)
                        : (x > Scalar(0) ? Scalar(1) : Scalar(-1)) *
                              penalty_derivative(penalty, std::abs(x));
      }
    const Mat<Scalar> grad = target.transpose() * sub;
    const Scalar gnorm = grad.norm();
    if (gnorm < Scalar(1e-14)) break;

    Scalar step = Scalar(1) / gnorm;
    bool improved = false;
    for (int half = 0; half < 40; ++half) {
      const Mat<Scalar> trial = polar_factor<Scalar>(w - step * grad);
      const Scalar trial_val = penalty_sum(penalty, Mat<Scalar>(target * trial));
      if (trial_val < val - Scalar(1e-14) * std::max(Scalar(1), std::abs(val))) {
        w = trial;
        val = trial_val;
        improved = true;
        break;
      }
      step /= Scalar(2);
    }
    if (!improved) break;  // stationary for this search direction
  }
  return w;
}

// Strictly-upper entries of the top m x m block are pinned to zero; the top
// diagonal is kept positive by projection; psi is floored.
template <typename Scalar>
void project_ic5(Mat<Scalar>& lambda, Vec<Scalar>& psi, Scalar psi_min,
                 Scalar diag_floor = Scalar(1e-8)) {
  const Index m = lambda.cols();
  for (Index t = 1; t < m; ++t)
    for (Index s = 0; s < t; ++s) lambda(s, t) = Scalar(0);
  for (Index j = 0; j < m; ++j) lambda(j, j) = std::max(lambda(j, j), diag_floor);
  psi = psi.cwiseMax(psi_min);
}

// Projected-gradient optimality measure: pinned coordinates contribute 0;
// coordinates sitting on their lower bound only count when the gradient
// pushes away from the bound.
template <typename Scalar>
Scalar ic5_opt_measure(const Mat<Scalar>& lambda, const Vec<Scalar>& psi,
                       const GradientPair<Scalar>& grad, Scalar psi_min,
                       Scalar diag_floor = Scalar(1e-8)) {
  const Index p = lambda.rows(), m = lambda.cols();
  Scalar acc = 0;
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < p; ++i) {
      if (i < m && i < j) continue;  // pinned to zero
      Scalar g = grad.grad_lambda(i, j);
      if (i == j && i < m && lambda(i, j) <= diag_floor && g > Scalar(0)) g = 0;
      acc += g * g;
    }
  for (Index k = 0; k < p; ++k) {
    Scalar g = grad.grad_psi(k);
    if (psi(k) <= psi_min && g > Scalar(0)) g = 0;
    acc += g * g;
  }
  return std::sqrt(acc);
}

template <typename Scalar>
void zero_pinned(Mat<Scalar>& grad_lambda, Index m) {
  for (Index t = 1; t < m; ++t)
    for (Index s = 0; s < t; ++s) grad_lambda(s, t) = Scalar(0);
}

// Gaussian loss on a singular S is ill-posed without the ridge opt-in.
template <typename Scalar>
CovarianceMatrix<Scalar> prepare_s_hat(const CovarianceMatrix<Scalar>& s_hat, LossKind loss,
                                       bool jitter) {
  s_hat.validate();
  if (loss != LossKind::gaussian) return s_hat;
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(s_hat.sigma, Eigen::EigenvaluesOnly);
  const Scalar lo = es.eigenvalues().minCoeff();
  const Scalar hi = es.eigenvalues().maxCoeff();
  if (lo > Scalar(1e-12) * std::max(Scalar(1), hi)) return s_hat;
  if (!jitter)
    throw NumericalError(
        "sample covariance is numerically singular; Gaussian loss needs the ridge opt-in");
  CovarianceMatrix<Scalar> out = s_hat;
  const Scalar eps = Scalar(1e-8) * out.sigma.trace() / Scalar(out.p());
  out.sigma.diagonal().array() += eps;
  return out;
}

}  // namespace detail

/// Unpenalized fit over the identified set: the top m x m block of Lambda is
/// lower triangular with positive diagonal.  Projected gradient descent with
/// spectral (Barzilai-Borwein) steps and an Armijo backtracking safeguard,
/// started from a principal-axis solution rotated into constraint shape.
template <typename Scalar>
FactorParams<Scalar> fit_ic5(const CovarianceMatrix<Scalar>& s_hat, Index m, LossKind loss,
                             const EstimatorConfig<Scalar>& config) {
  config.validate();
  const CovarianceMatrix<Scalar> s = detail::prepare_s_hat(s_hat, loss, config.jitter_singular);
  const Index p = s.p();
  if (m < 1 || m > p) throw std::invalid_argument("fit_ic5: need 1 <= m <= p");

  // Principal-axis start: top-m eigenpairs with the tail mean subtracted.
  Eigen::SelfAdjointEigenSolver<Mat<Scalar>> es(s.sigma);
  Vec<Scalar> evals = es.eigenvalues().reverse();
  Mat<Scalar> evecs = es.eigenvectors().rowwise().reverse();
  Scalar tail = 0;
  if (m < p) tail = evals.tail(p - m).sum() / Scalar(p - m);
  Mat<Scalar> lambda(p, m);
  for (Index j = 0; j < m; ++j)
    lambda.col(j) =
        evecs.col(j) * std::sqrt(std::max(evals(j) - tail, Scalar(1e-4)));
  // Rotate into constraint shape (QR of Lambda^T), then project.
  {
    Eigen::HouseholderQR<Mat<Scalar>> qr(lambda.transpose());
    lambda = Mat<Scalar>(qr.matrixQR().topRows(m).template triangularView<Eigen::Upper>())
                 .transpose();
    for (Index j = 0; j < m; ++j)  // column flips keep Lambda Lambda^T
      if (lambda(j, j) < Scalar(0)) lambda.col(j) = -lambda.col(j);
  }
  Vec<Scalar> psi = (s.sigma.diagonal() - lambda.rowwise().squaredNorm()).cwiseMax(config.psi_min);
  detail::project_ic5(lambda, psi, config.psi_min);

  auto value = [&](const Mat<Scalar>& l, const Vec<Scalar>& ps) {
    return loss_value(loss, s, FactorParams<Scalar>{l, ps});
  };
  auto gradient = [&](const Mat<Scalar>& l, const Vec<Scalar>& ps) {
    GradientPair<Scalar> g = loss_gradient(loss, s, FactorParams<Scalar>{l, ps});
    detail::zero_pinned(g.grad_lambda, m);
    return g;
  };

  Scalar f = value(lambda, psi);
  GradientPair<Scalar> g = gradient(lambda, psi);
  Scalar step = Scalar(1) / std::max(Scalar(1), g.grad_lambda.norm() + g.grad_psi.norm());

  Mat<Scalar> best_lambda = lambda;
  Vec<Scalar> best_psi = psi;
  Scalar best_f = f;
  Scalar best_measure = detail::ic5_opt_measure(lambda, psi, g, config.psi_min);
  auto target = [](Scalar loss) { return Scalar(1e-5) * std::max(Scalar(1), std::abs(loss)); };

  for (int it = 0; it < config.ic5_max_iters && best_measure > target(best_f); ++it) {
    // Armijo backtracking on the projected step.
    Mat<Scalar> lam_new;
    Vec<Scalar> psi_new;
    Scalar f_new = f;
    Scalar t = step;
    bool accepted = false;
    for (int half = 0; half < 60; ++half) {
      lam_new = lambda - t * g.grad_lambda;
      psi_new = psi - t * g.grad_psi;
      detail::project_ic5(lam_new, psi_new, config.psi_min);
      const Scalar decrease = (lambda - lam_new).squaredNorm() + (psi - psi_new).squaredNorm();
      if (decrease == Scalar(0)) break;  // projection absorbed the whole step
      bool ok = true;
      try {
        f_new = value(lam_new, psi_new);
      } catch (const NumericalError&) {
        ok = false;
      }
      if (ok && f_new <= f - Scalar(1e-4) / t * decrease) {
        accepted = true;
        break;
      }
      t /= Scalar(2);
    }
    if (!accepted) break;

    const GradientPair<Scalar> g_new = gradient(lam_new, psi_new);
    // BB spectral step from the accepted move.
    const Scalar sy = (lam_new - lambda).cwiseProduct(g_new.grad_lambda - g.grad_lambda).sum() +
                      (psi_new - psi).dot(g_new.grad_psi - g.grad_psi);
    const Scalar ss = (lam_new - lambda).squaredNorm() + (psi_new - psi).squaredNorm();
    step = (sy > Scalar(1e-18)) ? std::clamp(ss / sy, Scalar(1e-10), Scalar(1e4)) : t * Scalar(2);

    lambda.swap(lam_new);
    psi.swap(psi_new);
    f = f_new;
    g = g_new;
    const Scalar measure = detail::ic5_opt_measure(lambda, psi, g, config.psi_min);
    if (measure < best_measure) {
      best_measure = measure;
      best_lambda = lambda;
      best_psi = psi;
      best_f = f;
    }
  }

  FactorParams<Scalar> out{best_lambda, best_psi};
  if (best_measure > target(best_f))
    throw ConvergenceError<FactorParams<Scalar>>(
        "fit_ic5: projected gradient did not reach the stationarity target", out);
  return out;
}

/// Rotation initialization: K random orthogonal candidates (QR of U([-2,2])
/// draws) plus the identity, each refined by penalty minimization over the
/// orthogonal group; the lowest-penalty refined candidate wins, first in
/// seed order on ties.
template <typename Scalar>
Mat<Scalar> init_rotation(const Mat<Scalar>& lambda_hat, const PenaltySpec<Scalar>& penalty,
                          int grid_size_k, std::uint64_t seed) {
  penalty.validate();
  if (grid_size_k < 1) throw std::invalid_argument("init_rotation: grid_size_k >= 1");
  if (!lambda_hat.allFinite()) throw std::invalid_argument("init_rotation: non-finite lambda");
  const Index m = lambda_hat.cols();
  if (m == 1) return Mat<Scalar>::Identity(1, 1);

  Mat<Scalar> best;
  Scalar best_val = std::numeric_limits<Scalar>::infinity();
  for (int k = 0; k <= grid_size_k; ++k) {
    Mat<Scalar> q0;
    if (k == grid_size_k) {
      q0 = Mat<Scalar>::Identity(m, m);
    } else {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
      Mat<Scalar> draw(m, m);
      for (Index j = 0; j < m; ++j)
        for (Index i = 0; i < m; ++i) draw(i, j) = Scalar(rng.uniform(-2.0, 2.0));
      Eigen::HouseholderQR<Mat<Scalar>> qr(draw);
      q0 = qr.householderQ();
      const Mat<Scalar> r = qr.matrixQR().template triangularView<Eigen::Upper>();
      for (Index j = 0; j < m; ++j)
        if (r(j, j) < Scalar(0)) q0.col(j) = -q0.col(j);
    }
    const Mat<Scalar> refined = detail::minimize_rotation(lambda_hat, penalty, q0);
    const Scalar val = penalty_sum(penalty, Mat<Scalar>(lambda_hat * refined));
    if (val < best_val) {
      best_val = val;
      best = refined;
    }
  }
  return best;
}

/// L-step: proximal gradient on the penalized loss over the loadings.  For a
/// fixed orthogonal q the L-variable problem is the same problem in rotated
/// coordinates, so the iteration runs on Lambda directly; q only enters as
/// the bookkeeping rotation.  Monotone by backtracking on the smooth-part
/// majorization; the first step size comes from a power-iteration estimate
/// of the local curvature.
template <typename Scalar>
Mat<Scalar> l_step(const Mat<std::type_identity_t<Scalar>>& q,
                   const Vec<std::type_identity_t<Scalar>>& psi,
                   const CovarianceMatrix<Scalar>& s_hat,
                   const Mat<std::type_identity_t<Scalar>>& lambda_warm,
                   const EstimatorConfig<Scalar>& config) {
  config.validate();
  detail::check_orthogonal(q, "l_step(q)");
  if ((psi.array() < config.psi_min * (Scalar(1) - Scalar(1e-12))).any())
    throw std::invalid_argument("l_step: psi below psi_min");
  s_hat.validate();

  const PenaltySpec<Scalar>& pen = config.penalty;
  auto smooth = [&](const Mat<Scalar>& l) {
    return loss_value(config.loss, s_hat, FactorParams<Scalar>{l, psi});
  };
  auto smooth_grad = [&](const Mat<Scalar>& l) {
    return loss_gradient(config.loss, s_hat, FactorParams<Scalar>{l, psi}).grad_lambda;
  };
  Mat<Scalar> lambda = lambda_warm;
  Scalar f_smooth = smooth(lambda);
  Scalar f_total = f_smooth + penalty_sum(pen, lambda);
  Mat<Scalar> grad = smooth_grad(lambda);

  // Power iteration on the smooth Hessian (finite-difference products).
  Scalar lips = Scalar(1);
  {
    Rng rng(derive_seed(config.seed, 0x9f2dULL));
    Mat<Scalar> v(lambda.rows(), lambda.cols());
    for (Index j = 0; j < v.cols(); ++j)
      for (Index i = 0; i < v.rows(); ++i) v(i, j) = Scalar(rng.normal());
    v /= std::max(v.norm(), Scalar(1e-30));
    const Scalar eps = Scalar(1e-5) * std::max(Scalar(1), lambda.norm());
    for (int it = 0; it < 6; ++it) {
      Mat<Scalar> hv;
      try {
        hv = (smooth_grad(lambda + eps * v) - grad) / eps;
      } catch (const NumericalError&) {
        break;
      }
      const Scalar norm = hv.norm();
      if (norm < Scalar(1e-30)) break;
      lips = norm;
      v = hv / norm;
    }
  }
  Scalar step = Scalar(1) / std::max(lips, Scalar(1e-12));
  const Scalar step_cap =
      pen.gamma > Scalar(0) ? Scalar(0.99) * prox_step_bound(pen) : Scalar(1e6);
  step = std::min(step, step_cap);

  for (int it = 0; it < config.max_inner_iters; ++it) {
    Mat<Scalar> lam_new(lambda.rows(), lambda.cols());
    bool accepted = false;
    Scalar fs_new = 0;
    for (int half = 0; half < 60; ++half) {
      for (Index j = 0; j < lambda.cols(); ++j)
        for (Index i = 0; i < lambda.rows(); ++i) {
          const Scalar z = lambda(i, j) - step * grad(i, j);
          lam_new(i, j) = pen.gamma > Scalar(0) ? prox(pen, z, step) : z;
        }
      const Mat<Scalar> diff = lam_new - lambda;
      const Scalar dist2 = diff.squaredNorm();
      if (dist2 <= Scalar(1e-28) * std::max(Scalar(1), lambda.squaredNorm())) {
        return lambda;  // prox-gradient fixed point
      }
      bool ok = true;
      try {
        fs_new = smooth(lam_new);
      } catch (const NumericalError&) {
        ok = false;
      }
      // Majorization test on the smooth part: guarantees total descent.
      if (ok && fs_new <= f_smooth + grad.cwiseProduct(diff).sum() + dist2 / (Scalar(2) * step) +
                              Scalar(1e-12) * std::max(Scalar(1), std::abs(f_smooth))) {
        accepted = true;
        break;
      }
      step /= Scalar(2);
    }
    if (!accepted) break;

    const Mat<Scalar> grad_new = smooth_grad(lam_new);
    const Scalar f_total_new = fs_new + penalty_sum(pen, lam_new);
    // Spectral step for the next round, capped by the prox bound.
    const Scalar sy = (lam_new - lambda).cwiseProduct(grad_new - grad).sum();
    const Scalar ss = (lam_new - lambda).squaredNorm();
    if (sy > Scalar(1e-18)) step = std::clamp(ss / sy, Scalar(1e-12), step_cap);

    const bool done =
        std::abs(f_total - f_total_new) <= Scalar(1e-9) * std::max(Scalar(1), std::abs(f_total));
    lambda.swap(lam_new);
    grad = grad_new;
    f_smooth = fs_new;
    f_total = f_total_new;
    if (done) break;
  }
  return lambda;
}

/// Q-step: minimize the penalty of L Q^T over orthogonal Q.  The smooth loss
/// is untouched by construction (L Q^T Q L^T = L L^T).  Subgradient descent
/// with polar retraction from the warm start plus 5 random restarts.
template <typename Scalar>
Mat<Scalar> q_step(const Mat<std::type_identity_t<Scalar>>& l_mat,
                   const PenaltySpec<Scalar>& penalty,
                   const Mat<std::type_identity_t<Scalar>>& q_warm,
                   const EstimatorConfig<Scalar>& config) {
  penalty.validate();
  detail::check_orthogonal(q_warm, "q_step(q_warm)");
  const Index m = q_warm.rows();
  if (l_mat.cols() != m) throw std::invalid_argument("q_step: dimension mismatch");
  if (m == 1) return q_warm;  // penalty is sign-invariant on O(1)
  if (penalty.gamma == Scalar(0)) return q_warm;

  // Work on W = Q^T: objective sum p(|(L W)_ij|).
  Mat<Scalar> best_w = detail::minimize_rotation(l_mat, penalty, Mat<Scalar>(q_warm.transpose()));
  Scalar best_val = penalty_sum(penalty, Mat<Scalar>(l_mat * best_w));
  Rng rng(derive_seed(config.seed, 0x05e9ULL));
  for (int restart = 0; restart < 5; ++restart) {
    const Mat<Scalar> w0 = detail::random_orthogonal<Scalar>(m, rng);
    const Mat<Scalar> w = detail::minimize_rotation(l_mat, penalty, w0);
    const Scalar val = penalty_sum(penalty, Mat<Scalar>(l_mat * w));
    if (val < best_val) {
      best_val = val;
      best_w = w;
    }
  }
  return best_w.transpose();
}

/// Psi-step.  Least squares: exact coordinate solution clamped at psi_min.
/// Gaussian: damped Newton (gradient fallback) with an Armijo search on the
/// clamped trial; the loss never increases.
template <typename Scalar>
Vec<Scalar> psi_step(const Mat<std::type_identity_t<Scalar>>& lambda,
                     const CovarianceMatrix<Scalar>& s_hat, LossKind loss,
                     const Vec<std::type_identity_t<Scalar>>& psi_warm,
                     const EstimatorConfig<Scalar>& config) {
  config.validate();
  s_hat.validate();
  if ((psi_warm.array() < config.psi_min * (Scalar(1) - Scalar(1e-12))).any())
    throw std::invalid_argument("psi_step: psi_warm below psi_min");
  const Index p = s_hat.p();

  if (loss == LossKind::least_squares) {
    const Vec<Scalar> common = s_hat.sigma.diagonal() - lambda.rowwise().squaredNorm();
    return common.cwiseMax(config.psi_min);
  }

  Vec<Scalar> psi = psi_warm.cwiseMax(config.psi_min);
  auto value = [&](const Vec<Scalar>& ps) {
    return loss_value(loss, s_hat, FactorParams<Scalar>{lambda, ps});
  };
  Scalar f = value(psi);
  for (int it = 0; it < 80; ++it) {
    const Mat<Scalar> sigma = assemble_sigma(FactorParams<Scalar>{lambda, psi}).sigma;
    Eigen::LLT<Mat<Scalar>> llt(sigma);
    if (llt.info() != Eigen::Success) throw NumericalError("psi_step: covariance not PD");
    const Mat<Scalar> inv = llt.solve(Mat<Scalar>::Identity(p, p));
    Mat<Scalar> v = inv - inv * s_hat.sigma * inv;
    v = ((v + v.transpose()) / Scalar(2)).eval();
    const Vec<Scalar> grad = v.diagonal();

    // Optimality with the clamp: bound-active coordinates only count when
    // pushed into the feasible side.
    Scalar measure = 0;
    for (Index k = 0; k < p; ++k) {
      Scalar g = grad(k);
      if (psi(k) <= config.psi_min && g > Scalar(0)) g = 0;
      measure += g * g;
    }
    measure = std::sqrt(measure);
    if (measure < Scalar(1e-8) * std::max(Scalar(1), std::abs(f))) break;

    const Mat<Scalar> hess =
        (inv.array() * inv.array() - Scalar(2) * (inv.array() * v.array())).matrix();
    Vec<Scalar> dir;
    Eigen::LDLT<Mat<Scalar>> ldlt(hess);
    bool newton_ok = ldlt.info() == Eigen::Success;
    if (newton_ok) {
      dir = ldlt.solve(-grad);
      newton_ok = dir.allFinite() && dir.dot(grad) < Scalar(0);
    }
    if (!newton_ok) dir = -grad;

    Scalar alpha = 1;
    bool moved = false;
    for (int half = 0; half < 50; ++half) {
      Vec<Scalar> trial = (psi + alpha * dir).cwiseMax(config.psi_min);
      const Scalar d2 = (trial - psi).squaredNorm();
      if (d2 == Scalar(0)) break;
      Scalar ft;
      bool ok = true;
      try {
        ft = value(trial);
      } catch (const NumericalError&) {
        ok = false;
        ft = f;
      }
      if (ok && ft <= f - Scalar(1e-4) * alpha * std::abs(dir.dot(grad))) {
        psi = std::move(trial);
        f = ft;
        moved = true;
        break;
      }
      alpha /= Scalar(2);
    }
    if (!moved) break;
  }
  return psi;
}

/// QR rotation extraction: Lambda = L Q with L lower trapezoidal and a
/// non-negative top diagonal; Q^T estimates the identification rotation.
template <typename Derived>
RotationPair<typename Derived::Scalar> extract_rotation(
    const Eigen::MatrixBase<Derived>& lambda_hat) {
  using Scalar = typename Derived::Scalar;
  const Index p = lambda_hat.rows(), m = lambda_hat.cols();
  if (m < 1 || p < m) throw std::invalid_argument("extract_rotation: need p >= m >= 1");
  if (!lambda_hat.allFinite())
    throw std::invalid_argument("extract_rotation: non-finite entries");

  Eigen::HouseholderQR<Mat<Scalar>> qr(lambda_hat.transpose());  // m x p
  Mat<Scalar> q_r = qr.householderQ();                           // m x m
  Mat<Scalar> r = qr.matrixQR().topRows(m).template triangularView<Eigen::Upper>();  // m x p

  Scalar diag_max = 0;
  for (Index j = 0; j < m; ++j) diag_max = std::max(diag_max, std::abs(r(j, j)));
  for (Index j = 0; j < m; ++j)
    if (std::abs(r(j, j)) <= Scalar(1e-12) * std::max(Scalar(1), diag_max))
      throw NumericalError("extract_rotation: loading matrix is rank deficient");

  RotationPair<Scalar> out;
  out.l_hat = r.transpose();       // p x m, lower trapezoidal
  out.q_hat = q_r.transpose();     // m x m orthogonal
  for (Index j = 0; j < m; ++j)
    if (out.l_hat(j, j) < Scalar(0)) {
      out.l_hat.col(j) = -out.l_hat.col(j);
      out.q_hat.row(j) = -out.q_hat.row(j);
    }
  return out;
}

/// Deterministic representative of the signed-column-permutation class: the
/// loss and every column-separable penalty are blind to reordering or negating
/// whole columns, so comparable output needs a fixed convention.  Each column
/// is keyed by the row of its first dominant entry — the first magnitude at
/// least half the column maximum (and above `zero_tol`) — then columns are
/// sorted by key (all-zero columns last, ties keeping their relative order)
/// and flipped so the key entry is positive.  Keying on dominant rather than
/// merely nonzero entries keeps the representative stable when an estimate
/// carries small spurious entries.
template <typename Scalar>
Mat<Scalar> canonicalize_loadings(const Mat<std::type_identity_t<Scalar>>& lambda,
                                  Scalar zero_tol) {
  const Index p = lambda.rows(), m = lambda.cols();
  std::vector<Index> order(static_cast<std::size_t>(m));
  std::vector<Index> leading(static_cast<std::size_t>(m), p);
  for (Index j = 0; j < m; ++j) {
    order[std::size_t(j)] = j;
    const Scalar dominant =
        std::max(zero_tol, Scalar(0.5) * lambda.col(j).cwiseAbs().maxCoeff());
    for (Index i = 0; i < p; ++i)
      if (std::abs(lambda(i, j)) > zero_tol && std::abs(lambda(i, j)) >= dominant) {
        leading[std::size_t(j)] = i;
        break;
      }
  }
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return leading[std::size_t(a)] < leading[std::size_t(b)];
  });
  Mat<Scalar> out(p, m);
  for (Index j = 0; j < m; ++j) {
    const Index src = order[std::size_t(j)];
    const Scalar flip = (leading[std::size_t(src)] < p &&
                         lambda(leading[std::size_t(src)], src) < Scalar(0))
                            ? Scalar(-1)
                            : Scalar(1);
    out.col(j) = flip * lambda.col(src);
  }
  return out;
}

/// Full sparse fit: constrained init, penalty-minimal initial rotation, then
/// alternate L-step / Q-step / Psi-step until the penalized objective
/// stalls.  The returned loadings are in canonical column order and sign
/// (see canonicalize_loadings); `observer` (optional) sees the raw iterate
/// after every step.
template <typename Scalar>
FitResult<Scalar> fit_sparse(const CovarianceMatrix<Scalar>& s_hat, Index m,
                             const EstimatorConfig<Scalar>& config,
                             const FactorParams<Scalar>& init,
                             const StepObserver<std::type_identity_t<Scalar>>& observer = {}) {
  config.validate();
  const CovarianceMatrix<Scalar> s =
      detail::prepare_s_hat(s_hat, config.loss, config.jitter_singular);
  init.validate();
  if (init.m() != m || init.p() != s.p())
    throw std::invalid_argument("fit_sparse: init dimensions mismatch");

  const Mat<Scalar> q0 =
      init_rotation(init.lambda, config.penalty, config.grid_size_k, derive_seed(config.seed, 1));
  Mat<Scalar> lambda = init.lambda * q0;
  Mat<Scalar> q = q0;
  Vec<Scalar> psi = init.psi.cwiseMax(config.psi_min);

  auto objective = [&](const Mat<Scalar>& l, const Vec<Scalar>& ps, Scalar* smooth_out = nullptr) {
    const Scalar smooth = loss_value(config.loss, s, FactorParams<Scalar>{l, ps});
    if (smooth_out) *smooth_out = smooth;
    return smooth + penalty_sum(config.penalty, l);
  };
  auto emit = [&](StepKind kind, int outer) {
    if (!observer) return;
    Scalar smooth = 0;
    const Scalar obj = objective(lambda, psi, &smooth);
    observer(StepEvent<Scalar>{kind, outer, obj, smooth, &lambda});
  };

  FitResult<Scalar> result;
  Scalar obj = objective(lambda, psi);
  result.objective_trace.push_back(obj);
  emit(StepKind::init, 0);

  for (int outer = 1; outer <= config.max_outer_iters; ++outer) {
    lambda = l_step(q, psi, s, lambda, config);
    emit(StepKind::l_step, outer);

    const Mat<Scalar> l_mat = lambda * q;
    const Mat<Scalar> q_new = q_step(l_mat, config.penalty, q, config);
    lambda = l_mat * q_new.transpose();
    q = q_new;
    emit(StepKind::q_step, outer);

    if (!config.skip_psi_step) {
      psi = psi_step(lambda, s, config.loss, psi, config);
      emit(StepKind::psi_step, outer);
    }

    const Scalar obj_new = objective(lambda, psi);
    result.objective_trace.push_back(obj_new);
    result.iterations = outer;
    if (std::abs(obj - obj_new) <= config.rel_tol * std::max(Scalar(1), std::abs(obj))) {
      result.converged = true;
      obj = obj_new;
      break;
    }
    obj = obj_new;
  }

  lambda = canonicalize_loadings(lambda, config.zero_tol);
  result.params = FactorParams<Scalar>{lambda, psi};
  result.support = lambda.array().abs() > config.zero_tol;
  try {
    result.q_hat = extract_rotation(lambda).q_hat;
  } catch (const NumericalError&) {
    result.q_hat = Mat<Scalar>::Identity(m, m);  // all-zero or deficient loadings
  }
  return result;
}

template <typename Scalar>
FitResult<Scalar> fit_sparse(const CovarianceMatrix<Scalar>& s_hat, Index m,
                             const EstimatorConfig<Scalar>& config,
                             const StepObserver<std::type_identity_t<Scalar>>& observer = {}) {
  config.validate();
  FactorParams<Scalar> init = [&] {
    try {
      return fit_ic5(s_hat, m, config.loss, config);
    } catch (ConvergenceError<FactorParams<Scalar>>& e) {
      // The alternation below descends from any start, so a warm start that
      // ran out of polishing budget is still a usable warm start.
      return std::move(e.best);
    }
  }();
  return fit_sparse(s_hat, m, config, init, observer);
}

template <typename Scalar>
FitResult<Scalar> fit_sparse(const DataSet<Scalar>& data, Index m,
                             const EstimatorConfig<Scalar>& config,
                             const StepObserver<std::type_identity_t<Scalar>>& observer = {}) {
  return fit_sparse(sample_covariance(data), m, config, observer);
}

}  // namespace sfm
