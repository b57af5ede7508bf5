#pragma once

// Finite-difference oracles: gradients from loss values, Hessians from
// analytic gradients.  Central differences throughout.

#include <sfm/core.hpp>
#include <sfm/loss.hpp>

namespace testsupport {

using sfm::CovarianceMatrix;
using sfm::FactorParams;
using sfm::GradientPair;
using sfm::Index;
using sfm::LossKind;
using sfm::Mat;
using sfm::Vec;

// theta = (vec(lambda), psi), matching the Hessian block layout.
inline Vec<double> pack(const FactorParams<double>& params) {
  const Index pm = params.p() * params.m(), p = params.p();
  Vec<double> theta(pm + p);
  Index at = 0;
  for (Index j = 0; j < params.m(); ++j)
    for (Index i = 0; i < p; ++i) theta(at++) = params.lambda(i, j);
  theta.tail(p) = params.psi;
  return theta;
}

inline FactorParams<double> unpack(const Vec<double>& theta, Index p, Index m) {
  FactorParams<double> params;
  params.lambda.resize(p, m);
  Index at = 0;
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < p; ++i) params.lambda(i, j) = theta(at++);
  params.psi = theta.tail(p);
  return params;
}

inline Vec<double> fd_gradient(LossKind kind, const CovarianceMatrix<double>& s_hat,
                               const FactorParams<double>& params, double h = 1e-6) {
  const Index p = params.p(), m = params.m();
  const Vec<double> theta0 = pack(params);
  Vec<double> grad(theta0.size());
  for (Index c = 0; c < theta0.size(); ++c) {
    Vec<double> theta = theta0;
    theta(c) = theta0(c) + h;
    const double fp = sfm::loss_value(kind, s_hat, unpack(theta, p, m));
    theta(c) = theta0(c) - h;
    const double fm = sfm::loss_value(kind, s_hat, unpack(theta, p, m));
    grad(c) = (fp - fm) / (2 * h);
  }
  return grad;
}

inline Vec<double> pack_gradient(const GradientPair<double>& g) {
  const Index pm = g.grad_lambda.size(), p = g.grad_psi.size();
  Vec<double> out(pm + p);
  Index at = 0;
  for (Index j = 0; j < g.grad_lambda.cols(); ++j)
    for (Index i = 0; i < g.grad_lambda.rows(); ++i) out(at++) = g.grad_lambda(i, j);
  out.tail(p) = g.grad_psi;
  return out;
}

// Full (pm+p) x (pm+p) Hessian by differencing the analytic gradient.
inline Mat<double> fd_hessian(LossKind kind, const CovarianceMatrix<double>& s_hat,
                              const FactorParams<double>& params, double h = 1e-6) {
  const Index p = params.p(), m = params.m();
  const Vec<double> theta0 = pack(params);
  Mat<double> hess(theta0.size(), theta0.size());
  for (Index c = 0; c < theta0.size(); ++c) {
    Vec<double> theta = theta0;
    theta(c) = theta0(c) + h;
    const Vec<double> gp = pack_gradient(sfm::loss_gradient(kind, s_hat, unpack(theta, p, m)));
    theta(c) = theta0(c) - h;
    const Vec<double> gm = pack_gradient(sfm::loss_gradient(kind, s_hat, unpack(theta, p, m)));
    hess.col(c) = (gp - gm) / (2 * h);
  }
  return hess;
}

inline double rel_err(const Mat<double>& got, const Mat<double>& want) {
  return (got - want).norm() / std::max(1.0, want.norm());
}

inline double rel_err(const Vec<double>& got, const Vec<double>& want) {
  return (got - want).norm() / std::max(1.0, want.norm());
}

}  // namespace testsupport
