#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sfm/estimator.hpp>
#include <sfm/loss.hpp>
#include <sfm/rng.hpp>

#include "support/fd.hpp"
#include "support/instances.hpp"

using namespace sfm;
using testsupport::fd_gradient;
using testsupport::fd_hessian;
using testsupport::pack_gradient;
using testsupport::rel_err;

namespace {

Mat<double> full_hessian(const HessianBlocks<double>& h) {
  const Index pm = h.h_ll.rows(), p = h.h_pp.rows();
  Mat<double> full(pm + p, pm + p);
  full.topLeftCorner(pm, pm) = h.h_ll;
  full.topRightCorner(pm, p) = h.h_lp;
  full.bottomLeftCorner(p, pm) = h.h_lp.transpose();
  full.bottomRightCorner(p, p) = h.h_pp;
  return full;
}

Mat<double> rotation2d(double theta) {
  Mat<double> q(2, 2);
  q << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  return q;
}

}  // namespace

TEST_CASE("gaussian loss at the identity") {
  FactorParams<double> params;
  params.lambda = Mat<double>::Zero(4, 2);
  params.psi = Vec<double>::Ones(4);
  CovarianceMatrix<double> s;
  s.sigma = Mat<double>::Identity(4, 4);
  CHECK(loss_value(LossKind::gaussian, s, params) == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("gaussian loss scalar example") {
  FactorParams<double> params;
  params.lambda.resize(1, 1);
  params.lambda << 1;
  params.psi = Vec<double>::Ones(1);
  CovarianceMatrix<double> s;
  s.sigma.resize(1, 1);
  s.sigma << 2;
  CHECK(loss_value(LossKind::gaussian, s, params) ==
        doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("least-squares loss is zero at a perfect fit and positive otherwise") {
  Rng rng(3);
  const auto params = testsupport::random_params(5, 2, rng);
  const auto s = assemble_sigma(params);
  CHECK(loss_value(LossKind::least_squares, s, params) == doctest::Approx(0.0).epsilon(1e-12));

  auto bumped = params;
  bumped.psi(0) += 0.5;
  CHECK(loss_value(LossKind::least_squares, s, bumped) > 0.0);
}

TEST_CASE("gradients vanish at a perfect fit") {
  Rng rng(17);
  const auto params = testsupport::random_params(6, 2, rng);
  const auto s = assemble_sigma(params);
  for (const auto kind : {LossKind::gaussian, LossKind::least_squares}) {
    const auto g = loss_gradient(kind, s, params);
    CHECK(g.grad_lambda.cwiseAbs().maxCoeff() < 1e-10);
    CHECK(g.grad_psi.cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("least-squares gradient by hand") {
  FactorParams<double> params;
  params.lambda.resize(2, 1);
  params.lambda << 1, 0;
  params.psi = Vec<double>::Ones(2);
  CovarianceMatrix<double> s;
  s.sigma = Mat<double>::Identity(2, 2);
  const auto g = loss_gradient(LossKind::least_squares, s, params);
  CHECK(g.grad_lambda(0, 0) == doctest::Approx(4.0).epsilon(1e-14));
  CHECK(g.grad_lambda(1, 0) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(g.grad_psi(0) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(g.grad_psi(1) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("gradients match finite differences on random instances") {
  Rng rng(101);
  for (int trial = 0; trial < 25; ++trial) {
    const Index p = trial % 2 == 0 ? 5 : 8;
    const Index m = trial % 3 == 0 ? 3 : 2;
    const auto params = testsupport::random_params(p, m, rng);
    const auto s = testsupport::random_spd(p, rng);
    for (const auto kind : {LossKind::gaussian, LossKind::least_squares}) {
      const auto analytic = pack_gradient(loss_gradient(kind, s, params));
      const auto fd = fd_gradient(kind, s, params);
      CHECK(rel_err(analytic, fd) < 1e-5);
    }
  }
}

TEST_CASE("hessians match finite differences of the gradient") {
  Rng rng(202);
  for (int trial = 0; trial < 10; ++trial) {
    const Index p = trial % 2 == 0 ? 4 : 6;
    const Index m = 2;
    const auto params = testsupport::random_params(p, m, rng);
    const auto s = testsupport::random_spd(p, rng);
    for (const auto kind : {LossKind::gaussian, LossKind::least_squares}) {
      const auto blocks = loss_hessian(kind, s, params);
      const auto fd = fd_hessian(kind, s, params);
      CHECK(rel_err(full_hessian(blocks), fd) < 1e-4);
    }
  }
}

TEST_CASE("hessian symmetric blocks and least-squares closed forms") {
  Rng rng(303);
  const auto params = testsupport::random_params(5, 2, rng);
  const auto s = testsupport::random_spd(5, rng);
  for (const auto kind : {LossKind::gaussian, LossKind::least_squares}) {
    const auto h = loss_hessian(kind, s, params);
    CHECK((h.h_ll - h.h_ll.transpose()).norm() / std::max(1.0, h.h_ll.norm()) < 1e-10);
    CHECK((h.h_pp - h.h_pp.transpose()).norm() / std::max(1.0, h.h_pp.norm()) < 1e-10);
  }

  const auto ls = loss_hessian(LossKind::least_squares, s, params);
  CHECK((ls.h_pp - 2.0 * Mat<double>::Identity(5, 5)).cwiseAbs().maxCoeff() == 0.0);
  // Cross block: entry (j*p+k, k) = 4*lambda(k,j), zero elsewhere.
  for (Index j = 0; j < 2; ++j)
    for (Index k = 0; k < 5; ++k)
      for (Index c = 0; c < 5; ++c) {
        const double want = c == k ? 4.0 * params.lambda(k, j) : 0.0;
        CHECK(ls.h_lp(j * 5 + k, c) == doctest::Approx(want).epsilon(1e-13));
      }

  auto zero = params;
  zero.lambda.setZero();
  CHECK(loss_hessian(LossKind::least_squares, s, zero).h_lp.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("losses are rotation invariant, gradients equivariant") {
  Rng rng(404);
  const auto params = testsupport::random_params(6, 2, rng);
  const auto s = testsupport::random_spd(6, rng);
  const Mat<double> q = rotation2d(0.61);
  FactorParams<double> rotated{params.lambda * q, params.psi};
  for (const auto kind : {LossKind::gaussian, LossKind::least_squares}) {
    CHECK(loss_value(kind, s, params) ==
          doctest::Approx(loss_value(kind, s, rotated)).epsilon(1e-12));
    const auto g = loss_gradient(kind, s, params);
    const auto gr = loss_gradient(kind, s, rotated);
    CHECK((gr.grad_lambda - g.grad_lambda * q).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((gr.grad_psi - g.grad_psi).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("gaussian loss rejects a numerically singular model covariance") {
  // Lambda Lambda^T + Psi is positive definite in exact arithmetic when psi > 0,
  // with psi far below the loading scale the sum rounds to a rank-one matrix
  // and the factorization must report the failure instead of dividing by it.
  FactorParams<double> params;
  params.lambda = Mat<double>::Constant(3, 1, 1e5);
  params.psi = Vec<double>::Constant(3, 1e-300);
  CovarianceMatrix<double> s;
  s.sigma = Mat<double>::Identity(3, 3);
  CHECK_THROWS_AS(loss_value(LossKind::gaussian, s, params), NumericalError);
}

TEST_CASE("constraint value on the strictly-upper top block") {
  ConstraintSpec<double> spec;
  spec.rotation_r = Mat<double>::Identity(2, 2);
  Mat<double> lambda(2, 2);
  lambda << 1, 2, 3, 4;
  const Vec<double> h = constraint_value(lambda, spec);
  REQUIRE(h.size() == 1);
  CHECK(h(0) == 2.0);

  Mat<double> shaped(2, 2);
  shaped << 1, 0, 3, 4;
  CHECK(constraint_value(shaped, spec).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("constraint is invariant when the rotation moves with lambda") {
  Rng rng(505);
  const Mat<double> lambda = testsupport::random_matrix(5, 3, rng);
  ConstraintSpec<double> spec;
  spec.rotation_r = sfm::detail::random_orthogonal<double>(3, rng);
  const Mat<double> r = sfm::detail::random_orthogonal<double>(3, rng);
  ConstraintSpec<double> moved;
  moved.rotation_r = r.transpose() * spec.rotation_r;
  const Vec<double> a = constraint_value(lambda, spec);
  const Vec<double> b = constraint_value(Mat<double>(lambda * r), moved);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("constraint jacobian: identity rotation gives unit rows") {
  ConstraintSpec<double> spec;
  spec.rotation_r = Mat<double>::Identity(3, 3);
  Rng rng(606);
  const Mat<double> lambda = testsupport::random_matrix(5, 3, rng);
  const Mat<double> jac = constraint_jacobian(lambda, spec);
  REQUIRE(jac.rows() == 3);  // m(m-1)/2
  REQUIRE(jac.cols() == 15);
  for (Index l = 0; l < jac.rows(); ++l) {
    CHECK(jac.row(l).cwiseAbs().sum() == 1.0);
    CHECK(jac.row(l).cwiseAbs().maxCoeff() == 1.0);
  }
}

TEST_CASE("constraint jacobian matches finite differences") {
  Rng rng(707);
  for (int trial = 0; trial < 5; ++trial) {
    const Index p = 6, m = 3;
    const Mat<double> lambda = testsupport::random_matrix(p, m, rng);
    ConstraintSpec<double> spec;
    spec.rotation_r = sfm::detail::random_orthogonal<double>(m, rng);
    const Mat<double> jac = constraint_jacobian(lambda, spec);
    const double h = 1e-6;
    for (Index j = 0; j < m; ++j)
      for (Index i = 0; i < p; ++i) {
        Mat<double> lp = lambda, lm = lambda;
        lp(i, j) += h;
        lm(i, j) -= h;
        const Vec<double> fd =
            (constraint_value(lp, spec) - constraint_value(lm, spec)) / (2 * h);
        for (Index l = 0; l < jac.rows(); ++l)
          CHECK(jac(l, j * p + i) == doctest::Approx(fd(l)).epsilon(1e-8));
      }
  }
}

TEST_CASE("constraint jacobian rows have disjoint support across distinct rows") {
  Rng rng(808);
  ConstraintSpec<double> spec;
  spec.rotation_r = sfm::detail::random_orthogonal<double>(3, rng);
  const Mat<double> lambda = testsupport::random_matrix(6, 3, rng);
  const Mat<double> jac = constraint_jacobian(lambda, spec);
  // Constraint l touches only the coordinates of its constrained row s_l:
  // columns j*p + s_l for j = 0..m-1.
  const Index p = 6;
  const Index s_of[3] = {0, 0, 1};  // column-major strictly-upper (s,t) pairs
  for (Index l = 0; l < 3; ++l)
    for (Index j = 0; j < 3; ++j)
      for (Index i = 0; i < p; ++i)
        if (i != s_of[l]) CHECK(jac(l, j * p + i) == 0.0);
}

TEST_CASE("estimating residual: zero at an exact unpenalized stationary point") {
  Rng rng(909);
  auto params = testsupport::random_params(5, 2, rng);
  params.lambda(0, 1) = 0;  // IC5 shape under the identity rotation
  const auto s = assemble_sigma(params);
  ConstraintSpec<double> spec;
  spec.rotation_r = Mat<double>::Identity(2, 2);
  const Vec<double> eta = Vec<double>::Zero(1);
  const auto pen = make_scad(0.0);
  const Vec<double> res =
      estimating_residual(params, eta, spec, s, LossKind::gaussian, pen);
  REQUIRE(res.size() == 5 * 2 + 5 + 1);
  CHECK(res.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("estimating residual stacks penalty subgradients and the constraint") {
  Rng rng(1010);
  const auto params = testsupport::random_params(4, 2, rng);
  const auto s = testsupport::random_spd(4, rng);
  ConstraintSpec<double> spec;
  spec.rotation_r = Mat<double>::Identity(2, 2);
  const Vec<double> eta = Vec<double>::Constant(1, 0.3);
  const auto pen = make_scad(0.5);
  const Vec<double> res = estimating_residual(params, eta, spec, s, LossKind::least_squares, pen);

  const auto g = loss_gradient(LossKind::least_squares, s, params);
  const Mat<double> jac = constraint_jacobian(params.lambda, spec);
  const Vec<double> correction = jac.transpose() * eta;
  // First pm block: grad + H^T eta + q(|x|) sgn(x), with sgn(0) = 0.
  for (Index j = 0; j < 2; ++j)
    for (Index i = 0; i < 4; ++i) {
      const double x = params.lambda(i, j);
      const double sub =
          x == 0.0 ? 0.0
                   : (x > 0 ? 1.0 : -1.0) * penalty_derivative(pen, std::abs(x));
      const double want = g.grad_lambda(i, j) + correction(j * 4 + i) + sub;
      CHECK(res(j * 4 + i) == doctest::Approx(want).epsilon(1e-13));
    }
  // Middle block: psi gradient; tail: constraint values.
  for (Index k = 0; k < 4; ++k)
    CHECK(res(8 + k) == doctest::Approx(g.grad_psi(k)).epsilon(1e-13));
  const Vec<double> h = constraint_value(params.lambda, spec);
  CHECK(res(12) == doctest::Approx(h(0)).epsilon(1e-13));
}

TEST_CASE("estimating residual ignores zero coordinates in the penalty term") {
  FactorParams<double> params;
  params.lambda = Mat<double>::Zero(3, 1);
  params.psi = Vec<double>::Ones(3);
  CovarianceMatrix<double> s;
  s.sigma = Mat<double>::Identity(3, 3);
  ConstraintSpec<double> spec;
  spec.rotation_r = Mat<double>::Identity(1, 1);
  const auto pen = make_scad(10.0);  // large enough to dominate if applied
  const Vec<double> res =
      estimating_residual(params, Vec<double>(), spec, s, LossKind::least_squares, pen);
  // Sigma equals S-hat, so the smooth gradient is 0; with sgn(0) = 0 the
  // penalty contributes nothing despite the huge gamma.
  CHECK(res.cwiseAbs().maxCoeff() < 1e-12);
}
