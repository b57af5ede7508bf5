#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <sfm/portfolio.hpp>
#include <sfm/simulation.hpp>

#include "support/instances.hpp"

using namespace sfm;

// ---------------------------------------------------------------------------
// gmvp_weights
// ---------------------------------------------------------------------------

TEST_CASE("gmvp_weights on the identity is the equal-weight portfolio") {
  CovarianceMatrix<double> sigma{Mat<double>::Identity(5, 5)};
  const Vec<double> w = gmvp_weights(sigma);
  CHECK((w - Vec<double>::Constant(5, 0.2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gmvp_weights on a diagonal covariance weight by inverse variance") {
  CovarianceMatrix<double> sigma{Mat<double>::Zero(2, 2)};
  sigma.sigma(0, 0) = 1.0;
  sigma.sigma(1, 1) = 4.0;
  const Vec<double> w = gmvp_weights(sigma);
  CHECK(w(0) == doctest::Approx(0.8).epsilon(1e-14));
  CHECK(w(1) == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("gmvp_weights sum to one and minimize variance over random portfolios") {
  Rng rng(81);
  for (int trial = 0; trial < 5; ++trial) {
    const auto sigma = testsupport::random_spd(8, rng);
    const Vec<double> w = gmvp_weights(sigma);
    CHECK(std::abs(w.sum() - 1.0) < 1e-12);
    const double var = w.dot(sigma.sigma * w);
    for (int k = 0; k < 200; ++k) {
      Vec<double> u(8);
      for (Index i = 0; i < 8; ++i) u(i) = rng.uniform(-1.0, 2.0);
      if (std::abs(u.sum()) < 1e-8) continue;
      u /= u.sum();  // feasible: weights sum to one
      CHECK(var <= u.dot(sigma.sigma * u) + 1e-12);
    }
  }
}

TEST_CASE("gmvp_weights are invariant to rescaling the covariance") {
  Rng rng(82);
  const auto sigma = testsupport::random_spd(6, rng);
  CovarianceMatrix<double> scaled{7.5 * sigma.sigma};
  const Vec<double> a = gmvp_weights(sigma);
  const Vec<double> b = gmvp_weights(scaled);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("gmvp_weights rejects singular covariances") {
  Mat<double> s = Mat<double>::Ones(3, 3);  // rank one
  CHECK_THROWS_AS(gmvp_weights(CovarianceMatrix<double>{s}), NumericalError);

  Rng rng(83);
  Mat<double> a = testsupport::random_matrix(4, 2, rng);
  CHECK_THROWS_AS(gmvp_weights(CovarianceMatrix<double>{Mat<double>(a * a.transpose())}),
                  NumericalError);
}

// ---------------------------------------------------------------------------
// log_returns
// ---------------------------------------------------------------------------

TEST_CASE("log_returns by hand") {
  Mat<double> prices(3, 2);
  prices << 100, 50, 100, 100, 200, 100;
  const Mat<double> r = log_returns(prices);
  REQUIRE(r.rows() == 2);
  REQUIRE(r.cols() == 2);
  CHECK(r(0, 0) == doctest::Approx(0.0).epsilon(1e-15));           // flat
  CHECK(r(0, 1) == doctest::Approx(100.0 * std::log(2.0)));        // doubling
  CHECK(r(1, 0) == doctest::Approx(100.0 * std::log(2.0)));
  CHECK(r(1, 1) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("log_returns input validation") {
  CHECK_THROWS_AS(log_returns(Mat<double>::Ones(1, 3)), std::invalid_argument);
  Mat<double> bad = Mat<double>::Ones(3, 2);
  bad(1, 1) = 0.0;
  CHECK_THROWS_AS(log_returns(bad), std::invalid_argument);
  bad(1, 1) = -2.0;
  CHECK_THROWS_AS(log_returns(bad), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

namespace {

CvPlan<double> ts_plan() {
  CvPlan<double> plan;
  plan.mode = CvMode::timesplit;
  plan.train_fraction = 0.75;
  plan.c_grid = {0.5, 2.0};
  plan.seed = 4;
  return plan;
}

EstimatorConfig<double> bt_config() {
  EstimatorConfig<double> cfg;
  cfg.seed = 3;
  return cfg;
}

std::vector<PortfolioEstimator> pick(std::initializer_list<const char*> labels) {
  std::vector<PortfolioEstimator> out;
  for (const auto& est : default_portfolio_estimators())
    for (const char* want : labels)
      if (est.label == want) out.push_back(est);
  return out;
}

}  // namespace

TEST_CASE("default estimator list carries the six standard labels") {
  const auto ests = default_portfolio_estimators();
  REQUIRE(ests.size() == 6);
  const char* want[] = {"sample", "equal", "gaussian-scad", "gaussian-mcp", "ls-scad", "ls-mcp"};
  for (std::size_t i = 0; i < 6; ++i) CHECK(ests[i].label == want[i]);
  CHECK(ests[2].loss == LossKind::gaussian);
  CHECK(ests[4].loss == LossKind::least_squares);
  CHECK(ests[3].family == PenaltyFamily::mcp);
}

TEST_CASE("backtest annualizes by hand on a known tail") {
  // Two assets moving identically: every weighting gives the same portfolio.
  // The out-of-sample rows are (1, 2, 3), so the daily mean is 2 and the
  // daily standard deviation is 1 (n-1 denominator).
  const Index n = 15, p = 2;
  DataSet<double> returns;
  returns.x.resize(n, p);
  Rng rng(84);
  for (Index i = 0; i < n - 3; ++i) {
    const double v = rng.normal();
    returns.x(i, 0) = v;
    returns.x(i, 1) = 0.5 * v + 0.1 * rng.normal();
  }
  for (Index i = n - 3; i < n; ++i) {
    const double v = double(i - (n - 3) + 1);  // 1, 2, 3
    returns.x(i, 0) = v;
    returns.x(i, 1) = v;
  }

  const auto reports =
      backtest(returns, n - 3, Index(1), pick({"equal"}), bt_config(), ts_plan());
  REQUIRE(reports.size() == 1);
  const auto& rep = reports[0];
  CHECK(!rep.failed);
  CHECK(rep.avg == doctest::Approx(2.0 * 252.0).epsilon(1e-12));
  CHECK(rep.sd == doctest::Approx(std::sqrt(252.0)).epsilon(1e-12));
  CHECK(rep.ir == doctest::Approx(2.0 * 252.0 / std::sqrt(252.0)).epsilon(1e-12));
  CHECK((rep.weights - Vec<double>::Constant(2, 0.5)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("backtest reports NaN information ratio on a flat tail") {
  DataSet<double> returns;
  returns.x = Mat<double>::Zero(12, 2);
  Rng rng(85);
  for (Index i = 0; i < 10; ++i)
    for (Index j = 0; j < 2; ++j) returns.x(i, j) = rng.normal();
  returns.x.row(10).setConstant(1.0);  // constant portfolio return out of sample
  returns.x.row(11).setConstant(1.0);

  const auto reports =
      backtest(returns, Index(10), Index(1), pick({"equal"}), bt_config(), ts_plan());
  CHECK(reports[0].sd == 0.0);
  CHECK(std::isnan(reports[0].ir));
  CHECK(reports[0].avg == doctest::Approx(252.0));
}

TEST_CASE("backtest captures per-estimator failures without propagating") {
  // Five in-sample rows of five assets: the de-meaned sample covariance is
  // singular, so the sample estimator fails while equal weights sail through.
  Rng rng(86);
  DataSet<double> returns;
  returns.x = testsupport::random_matrix(8, 5, rng);
  const auto reports = backtest(returns, Index(5), Index(1), pick({"sample", "equal"}),
                                bt_config(), ts_plan());
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].estimator_label == "sample");
  CHECK(reports[0].failed);
  CHECK(!reports[0].message.empty());
  CHECK(reports[1].estimator_label == "equal");
  CHECK(!reports[1].failed);
}

TEST_CASE("backtest on a single asset leaves factor estimators to fail per label") {
  Rng rng(87);
  DataSet<double> returns;
  returns.x = testsupport::random_matrix(10, 1, rng);
  const auto reports = backtest(returns, Index(7), Index(1),
                                pick({"sample", "equal", "gaussian-scad"}), bt_config(), ts_plan());
  REQUIRE(reports.size() == 3);
  CHECK(!reports[0].failed);
  CHECK((reports[0].weights - Vec<double>::Ones(1)).norm() == 0.0);
  CHECK(!reports[1].failed);
  CHECK((reports[1].weights - Vec<double>::Ones(1)).norm() == 0.0);
  CHECK(reports[2].failed);  // penalty grid needs p * m >= 2
  CHECK(!reports[2].message.empty());
}

TEST_CASE("backtest runs the full factor pipeline end to end") {
  const Index p = 8, n = 120, split = 90;
  SimDesign d;
  d.pattern = SimPattern::perfect_simple;
  d.p = p;
  d.m = 2;
  d.n = n;
  d.seed = 88;
  const auto truth = generate_model(d);
  auto returns = sample_data(truth, n, 880);
  returns.centered = false;  // treat as raw returns: estimators de-mean

  const auto ests = pick({"sample", "equal", "gaussian-scad", "ls-mcp"});
  const auto reports = backtest(returns, split, Index(2), ests, bt_config(), ts_plan());
  REQUIRE(reports.size() == 4);
  for (const auto& rep : reports) {
    INFO(rep.estimator_label, ": ", rep.message);
    CHECK(!rep.failed);
    CHECK(std::isfinite(rep.avg));
    CHECK(rep.sd > 0.0);
    CHECK(std::abs(rep.weights.sum() - 1.0) < 1e-12);
  }
  // gamma_star is reported for the factor fits and only for them.
  CHECK(std::isnan(reports[0].gamma_star));
  CHECK(std::isnan(reports[1].gamma_star));
  CHECK(reports[2].gamma_star > 0.0);
  CHECK(reports[3].gamma_star > 0.0);

  // Same inputs, same reports; two threads don't change the numbers.
  const auto again = backtest(returns, split, Index(2), ests, bt_config(), ts_plan(), 2);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    CHECK(reports[i].avg == again[i].avg);
    CHECK(reports[i].sd == again[i].sd);
    CHECK((reports[i].weights - again[i].weights).norm() == 0.0);
  }
}

TEST_CASE("backtest split preconditions") {
  Rng rng(89);
  DataSet<double> returns;
  returns.x = testsupport::random_matrix(20, 6, rng);
  const auto ests = pick({"equal"});
  // In-sample must hold at least max(p, 2) rows.
  CHECK_THROWS_AS(backtest(returns, Index(5), Index(1), ests, bt_config(), ts_plan()),
                  std::invalid_argument);
  // Out-of-sample must hold at least 2 rows.
  CHECK_THROWS_AS(backtest(returns, Index(19), Index(1), ests, bt_config(), ts_plan()),
                  std::invalid_argument);
  CHECK_THROWS_AS(backtest(returns, Index(10), Index(7), ests, bt_config(), ts_plan()),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      backtest(returns, Index(10), Index(1), {}, bt_config(), ts_plan()),
      std::invalid_argument);
}
