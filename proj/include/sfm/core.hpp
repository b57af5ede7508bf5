#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

#include "sfm/error.hpp"

namespace sfm {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Eigen::Index;

/// Loadings + uniquenesses of a factor model  Sigma = Lambda Lambda^T + Psi,
/// Psi = diag(psi).  Factors are orthogonal with unit variance, so Lambda
/// is identified only up to right-multiplication by an orthogonal matrix.
template <typename Scalar>
struct FactorParams {
  Mat<Scalar> lambda;  // p x m
  Vec<Scalar> psi;     // p, strictly positive

  Index p() const { return lambda.rows(); }
  Index m() const { return lambda.cols(); }

  void validate() const {
    if (lambda.rows() < 1 || lambda.cols() < 1)
      throw std::invalid_argument("FactorParams: lambda must be p x m with p, m >= 1");
    if (lambda.cols() > lambda.rows())
      throw std::invalid_argument("FactorParams: need m <= p");
    if (psi.size() != lambda.rows())
      throw std::invalid_argument("FactorParams: psi length must equal rows of lambda");
    if (!lambda.allFinite() || !psi.allFinite())
      throw std::invalid_argument("FactorParams: non-finite entries");
    if ((psi.array() <= Scalar(0)).any())
      throw std::invalid_argument("FactorParams: psi must be strictly positive");
  }
};

/// A p x p covariance matrix.  Kept symmetric exactly; validate() tolerates
/// 1e-12 relative asymmetry so matrices read back from text survive.
template <typename Scalar>
struct CovarianceMatrix {
  Mat<Scalar> sigma;

  Index p() const { return sigma.rows(); }

  void validate() const {
    if (sigma.rows() < 1 || sigma.rows() != sigma.cols())
      throw std::invalid_argument("CovarianceMatrix: must be square, p >= 1");
    if (!sigma.allFinite())
      throw std::invalid_argument("CovarianceMatrix: non-finite entries");
    const Scalar scale = std::max(Scalar(1), sigma.cwiseAbs().maxCoeff());
    const Scalar asym = (sigma - sigma.transpose()).cwiseAbs().maxCoeff();
    if (asym > Scalar(1e-12) * scale)
      throw std::invalid_argument("CovarianceMatrix: asymmetry beyond tolerance");
  }
};

/// n observations of a p-vector, one row each.  `centered` declares the mean
/// known to be zero (simulated data); otherwise estimators de-mean first.
template <typename Scalar>
struct DataSet {
  Mat<Scalar> x;  // n x p
  bool centered = false;

  Index n() const { return x.rows(); }
  Index p() const { return x.cols(); }

  void validate() const {
    if (x.rows() < 2 || x.cols() < 1)
      throw std::invalid_argument("DataSet: need n >= 2 rows and p >= 1 columns");
    if (!x.allFinite()) throw std::invalid_argument("DataSet: non-finite entries");
  }
};

/// Sigma = Lambda Lambda^T + diag(psi), exactly symmetric by construction.
template <typename Scalar>
CovarianceMatrix<Scalar> assemble_sigma(const FactorParams<Scalar>& params) {
  params.validate();
  Mat<Scalar> s = Mat<Scalar>::Zero(params.p(), params.p());
  s.template selfadjointView<Eigen::Lower>().rankUpdate(params.lambda);
  s.template triangularView<Eigen::StrictlyUpper>() =
      s.template triangularView<Eigen::StrictlyLower>().transpose();
  s.diagonal() += params.psi;
  return CovarianceMatrix<Scalar>{std::move(s)};
}

/// Second-moment estimate S = n^-1 sum_i x_i x_i^T.  Data not declared
/// centered are de-meaned column-wise first.  Normalization is 1/n.
template <typename Scalar>
CovarianceMatrix<Scalar> sample_covariance(const DataSet<Scalar>& data) {
  data.validate();
  const Index n = data.n();
  Mat<Scalar> xc;
  const Mat<Scalar>* xp = &data.x;
  if (!data.centered) {
    xc = data.x.rowwise() - data.x.colwise().mean();
    xp = &xc;
  }
  Mat<Scalar> s = Mat<Scalar>::Zero(data.p(), data.p());
  s.template selfadjointView<Eigen::Lower>().rankUpdate(xp->transpose(),
                                                        Scalar(1) / Scalar(n));
  s.template triangularView<Eigen::StrictlyUpper>() =
      s.template triangularView<Eigen::StrictlyLower>().transpose();
  return CovarianceMatrix<Scalar>{std::move(s)};
}

}  // namespace sfm
