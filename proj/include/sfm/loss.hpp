#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "sfm/core.hpp"
#include "sfm/penalty.hpp"

namespace sfm {

enum class LossKind { gaussian, least_squares };

template <typename Scalar>
struct GradientPair {
  Mat<Scalar> grad_lambda;  // p x m
  Vec<Scalar> grad_psi;     // p (diagonal of the Psi gradient)
};

/// Dense second-derivative blocks in vec(Lambda) / diag(Psi) coordinates.
template <typename Scalar>
struct HessianBlocks {
  Mat<Scalar> h_ll;  // pm x pm
  Mat<Scalar> h_lp;  // pm x p
  Mat<Scalar> h_pp;  // p x p
};

namespace detail {

template <typename Scalar>
void check_pair(const CovarianceMatrix<Scalar>& s_hat, const FactorParams<Scalar>& params) {
  s_hat.validate();
  params.validate();
  if (s_hat.p() != params.p())
    throw std::invalid_argument("loss: dimension mismatch between S and parameters");
}

template <typename Scalar>
Eigen::LLT<Mat<Scalar>> chol_sigma(const Mat<Scalar>& sigma) {
  Eigen::LLT<Mat<Scalar>> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw NumericalError("loss: model covariance is not positive definite");
  return llt;
}

// Left-multiplication by the commutation matrix K_mp:
// row (k*p + j) of the result is row (j*m + k) of the input, j < p, k < m.
template <typename Scalar>
Mat<Scalar> commute_rows(const Mat<Scalar>& in, Index p, Index m) {
  Mat<Scalar> out(in.rows(), in.cols());
  for (Index j = 0; j < p; ++j)
    for (Index k = 0; k < m; ++k) out.row(k * p + j) = in.row(j * m + k);
  return out;
}

template <typename Scalar>
Mat<Scalar> kron(const Mat<Scalar>& a, const Mat<Scalar>& b) {
  Mat<Scalar> out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Row r of  D*^T (A (x) B)  for the diagonal-selection matrix D*:
// kron of the r-th rows of A (p x m) and B (p x p), laid out in vec order.
template <typename Scalar>
void diag_select_row(const Mat<Scalar>& a, const Mat<Scalar>& b, Index r, Vec<Scalar>& out) {
  const Index m = a.cols(), p = b.cols();
  for (Index j = 0; j < m; ++j) out.segment(j * p, p) = a(r, j) * b.row(r).transpose();
}

}  // namespace detail

/// Gaussian: tr(S Sigma^-1) + log det Sigma.   Least squares: ||S - Sigma||_F^2.
template <typename Scalar>
Scalar loss_value(LossKind kind, const CovarianceMatrix<Scalar>& s_hat,
                  const FactorParams<Scalar>& params) {
  detail::check_pair(s_hat, params);
  const Mat<Scalar> sigma = assemble_sigma(params).sigma;
  if (kind == LossKind::least_squares) return (s_hat.sigma - sigma).squaredNorm();
  auto llt = detail::chol_sigma(sigma);
  Scalar logdet = 0;
  const auto& l = llt.matrixLLT();
  for (Index i = 0; i < l.rows(); ++i) logdet += std::log(l(i, i));
  logdet *= Scalar(2);
  return llt.solve(s_hat.sigma).trace() + logdet;
}

/// Analytic gradient.  Both losses share the shape grad_Lambda = 2 V Lambda,
/// grad_psi = diag(V), with V = Sigma^-1 (Sigma - S) Sigma^-1 (Gaussian)
/// or V = 2 (Sigma - S) (least squares).
template <typename Scalar>
GradientPair<Scalar> loss_gradient(LossKind kind, const CovarianceMatrix<Scalar>& s_hat,
                                   const FactorParams<Scalar>& params) {
  detail::check_pair(s_hat, params);
  const Mat<Scalar> sigma = assemble_sigma(params).sigma;
  Mat<Scalar> v;
  if (kind == LossKind::least_squares) {
    v = Scalar(2) * (sigma - s_hat.sigma);
  } else {
    auto llt = detail::chol_sigma(sigma);
    const Mat<Scalar> inv = llt.solve(Mat<Scalar>::Identity(sigma.rows(), sigma.cols()));
    v = inv - inv * s_hat.sigma * inv;
    v = ((v + v.transpose()) / Scalar(2)).eval();
  }
  return GradientPair<Scalar>{Scalar(2) * v * params.lambda, v.diagonal()};
}

/// Dense Hessian blocks; p*m is capped to keep the pm x pm block affordable.
template <typename Scalar>
HessianBlocks<Scalar> loss_hessian(LossKind kind, const CovarianceMatrix<Scalar>& s_hat,
                                   const FactorParams<Scalar>& params) {
  using detail::commute_rows;
  using detail::kron;
  detail::check_pair(s_hat, params);
  const Index p = params.p(), m = params.m();
  if (p * m > 2000)
    throw std::invalid_argument("loss_hessian: p*m too large for dense blocks");

  const Mat<Scalar> lambda = params.lambda;
  const Mat<Scalar> sigma = assemble_sigma(params).sigma;
  const Mat<Scalar> eye_m = Mat<Scalar>::Identity(m, m);
  const Mat<Scalar> eye_p = Mat<Scalar>::Identity(p, p);

  HessianBlocks<Scalar> h;
  if (kind == LossKind::least_squares) {
    const Mat<Scalar> v = Scalar(2) * (sigma - s_hat.sigma);
    h.h_ll = Scalar(4) * commute_rows(kron(lambda, Mat<Scalar>(lambda.transpose())), p, m) +
             Scalar(4) * kron(Mat<Scalar>(lambda.transpose() * lambda), eye_p) +
             Scalar(2) * kron(eye_m, v);
    h.h_lp = Mat<Scalar>::Zero(p * m, p);
    for (Index k = 0; k < p; ++k)
      for (Index j = 0; j < m; ++j) h.h_lp(j * p + k, k) = Scalar(4) * lambda(k, j);
    h.h_pp = Scalar(2) * eye_p;
    return h;
  }

  auto llt = detail::chol_sigma(sigma);
  const Mat<Scalar> inv = llt.solve(eye_p);
  Mat<Scalar> v = inv - inv * s_hat.sigma * inv;
  v = ((v + v.transpose()) / Scalar(2)).eval();

  const Mat<Scalar> inv_l = inv * lambda;                  // p x m
  const Mat<Scalar> v_l = v * lambda;                      // p x m
  const Mat<Scalar> lt_inv = inv_l.transpose();            // m x p
  const Mat<Scalar> lt_v = v_l.transpose();                // m x p
  const Mat<Scalar> lt_inv_l = lambda.transpose() * inv_l; // m x m
  const Mat<Scalar> lt_v_l = lambda.transpose() * v_l;     // m x m

  h.h_ll = Scalar(2) * commute_rows(kron(inv_l, lt_inv), p, m) -
           Scalar(2) * commute_rows(Mat<Scalar>(kron(v_l, lt_inv) + kron(inv_l, lt_v)), p, m) +
           Scalar(2) * (kron(lt_inv_l, inv) - kron(lt_inv_l, v) + kron(eye_m, v) -
                        kron(lt_v_l, inv));

  h.h_lp.resize(p * m, p);
  Vec<Scalar> row(p * m);
  for (Index k = 0; k < p; ++k) {
    Vec<Scalar> acc = Vec<Scalar>::Zero(p * m);
    detail::diag_select_row(inv_l, inv, k, row);
    acc += row;
    detail::diag_select_row(inv_l, v, k, row);
    acc -= row;
    detail::diag_select_row(v_l, inv, k, row);
    acc -= row;
    h.h_lp.col(k) = Scalar(2) * acc;
  }

  h.h_pp = (inv.array() * inv.array() - Scalar(2) * (inv.array() * v.array())).matrix();
  return h;
}

/// Orthogonal rotation R* entering the triangularity constraint.
template <typename Scalar>
struct ConstraintSpec {
  Mat<Scalar> rotation_r;  // m x m orthogonal R*

  Index m() const { return rotation_r.rows(); }
  Index constraint_count() const { return m() * (m() - 1) / 2; }

  void validate() const {
    if (rotation_r.rows() < 1 || rotation_r.rows() != rotation_r.cols())
      throw std::invalid_argument("ConstraintSpec: rotation_r must be square");
    const Mat<Scalar> gram = rotation_r.transpose() * rotation_r;
    const Scalar err =
        (gram - Mat<Scalar>::Identity(rotation_r.rows(), rotation_r.cols())).cwiseAbs().maxCoeff();
    if (err > Scalar(1e-10))
      throw std::invalid_argument("ConstraintSpec: rotation_r is not orthogonal");
  }
};

/// Strictly upper-triangular entries of the top m x m block of Lambda R*,
/// column-major order: (s, t) with t = 1..m-1 and s < t.  Length m(m-1)/2.
/// Zero exactly when Lambda R* satisfies the lower-triangular normalization.
template <typename Scalar>
Vec<Scalar> constraint_value(const Mat<Scalar>& lambda, const ConstraintSpec<Scalar>& spec) {
  spec.validate();
  const Index m = spec.m();
  if (lambda.cols() != m || lambda.rows() < m)
    throw std::invalid_argument("constraint_value: lambda must be p x m with p >= m");
  const Mat<Scalar> rotated = lambda.topRows(m) * spec.rotation_r;
  Vec<Scalar> h(m * (m - 1) / 2);
  Index l = 0;
  for (Index t = 1; t < m; ++t)
    for (Index s = 0; s < t; ++s) h(l++) = rotated(s, t);
  return h;
}

/// Exact Jacobian of constraint_value w.r.t. vec(Lambda): the constraint is
/// linear, d h_l / d Lambda(s, c) = 1{s = s_l} R*(c, t_l).
template <typename Scalar>
Mat<Scalar> constraint_jacobian(const Mat<Scalar>& lambda, const ConstraintSpec<Scalar>& spec) {
  spec.validate();
  const Index m = spec.m(), p = lambda.rows();
  if (lambda.cols() != m || p < m)
    throw std::invalid_argument("constraint_jacobian: lambda must be p x m with p >= m");
  Mat<Scalar> jac = Mat<Scalar>::Zero(m * (m - 1) / 2, p * m);
  Index l = 0;
  for (Index t = 1; t < m; ++t)
    for (Index s = 0; s < t; ++s) {
      for (Index c = 0; c < m; ++c) jac(l, c * p + s) = spec.rotation_r(c, t);
      ++l;
    }
  return jac;
}

/// Stacked residual of the penalized estimating system:
///   [ vec(grad_Lambda) + J(h)^T eta + q(|vec Lambda|) o sgn(vec Lambda) ;
///     grad_psi ; h(Lambda | R*) ],   with sgn(0) := 0.
template <typename Scalar>
Vec<Scalar> estimating_residual(const FactorParams<Scalar>& params, const Vec<Scalar>& eta,
                                const ConstraintSpec<Scalar>& cspec,
                                const CovarianceMatrix<Scalar>& s_hat, LossKind kind,
                                const PenaltySpec<Scalar>& penalty) {
  penalty.validate();
  cspec.validate();
  const Index p = params.p(), m = params.m();
  if (cspec.m() != m)
    throw std::invalid_argument("estimating_residual: constraint dimension mismatch");
  const Index r = m * (m - 1) / 2;
  if (eta.size() != r)
    throw std::invalid_argument("estimating_residual: eta must have length m(m-1)/2");

  const GradientPair<Scalar> grad = loss_gradient(kind, s_hat, params);
  const Mat<Scalar> jac = constraint_jacobian(params.lambda, cspec);
  const Vec<Scalar> h = constraint_value(params.lambda, cspec);

  Vec<Scalar> out(p * m + p + r);
  Vec<Scalar> lam_part =
      Eigen::Map<const Vec<Scalar>>(grad.grad_lambda.data(), p * m) + jac.transpose() * eta;
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < p; ++i) {
      const Scalar x = params.lambda(i, j);
      if (x != Scalar(0)) {
        const Scalar s = x > Scalar(0) ? Scalar(1) : Scalar(-1);
        lam_part(j * p + i) += s * penalty_derivative(penalty, std::abs(x));
      }
    }
  out.head(p * m) = lam_part;
  out.segment(p * m, p) = grad.grad_psi;
  out.tail(r) = h;
  return out;
}

}  // namespace sfm
