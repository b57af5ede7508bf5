#pragma once

#include <json.hpp>
#include <string>

#include "sfm/core.hpp"
#include "sfm/estimator.hpp"
#include "sfm/model_selection.hpp"
#include "sfm/portfolio.hpp"
#include "sfm/simulation.hpp"

namespace sfm {

using Json = nlohmann::ordered_json;

namespace detail {

template <typename Scalar>
Json matrix_json(const Mat<Scalar>& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(double(m(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

template <typename Scalar>
Json vector_json(const Vec<Scalar>& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(double(v(i)));
  return out;
}

inline Json support_json(const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>& s) {
  Json rows = Json::array();
  for (Index i = 0; i < s.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < s.cols(); ++j) row.push_back(bool(s(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

inline const char* to_string(LossKind k) {
  return k == LossKind::gaussian ? "gaussian" : "ls";
}
inline const char* to_string(PenaltyFamily f) {
  return f == PenaltyFamily::scad ? "scad" : "mcp";
}
inline const char* to_string(SimPattern p) {
  switch (p) {
    case SimPattern::perfect_simple: return "i";
    case SimPattern::perfect_simple_overlap: return "ii";
    case SimPattern::perfect_simple_overlap_sparse: return "iii";
    default: return "iv";
  }
}

template <typename Scalar>
Json to_json(const FitResult<Scalar>& fit) {
  Json j;
  j["lambda"] = detail::matrix_json(fit.params.lambda);
  j["psi"] = detail::vector_json(fit.params.psi);
  j["q_hat"] = detail::matrix_json(fit.q_hat);
  j["support"] = detail::support_json(fit.support);
  j["objective_trace"] = fit.objective_trace;
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  return j;
}

template <typename Scalar>
Json to_json(const CvReport<Scalar>& report) {
  Json j;
  j["gamma_grid"] = report.gammas;
  j["scores"] = report.scores;  // +inf serializes as null: failed grid point
  j["gamma_star"] = double(report.gamma_star);
  j["fold_sizes"] = report.fold_sizes;
  j["seed"] = report.seed;
  return j;
}

template <typename Scalar>
Json to_json(const GroundTruth<Scalar>& truth) {
  Json j;
  j["lambda"] = detail::matrix_json(truth.params.lambda);
  j["psi"] = detail::vector_json(truth.params.psi);
  j["support"] = detail::support_json(truth.support);
  j["s"] = truth.s;
  return j;
}

template <typename Scalar>
Json to_json(const BatchSummary<Scalar>& summary) {
  Json j;
  j["pattern"] = to_string(summary.design.pattern);
  j["p"] = summary.design.p;
  j["m"] = summary.design.m;
  j["n"] = summary.design.n;
  j["seed"] = summary.design.seed;
  j["reps"] = summary.records.size();
  j["failures"] = summary.failures;
  j["mean_c1"] = double(summary.mean_c1);
  j["mean_c2"] = double(summary.mean_c2);
  j["mean_mse"] = double(summary.mean_mse);
  Json recs = Json::array();
  for (const auto& r : summary.records) {
    Json rec;
    rec["rep"] = r.rep;
    rec["seed"] = r.seed;
    rec["failed"] = r.failed;
    if (r.failed) {
      rec["message"] = r.message;
    } else {
      rec["c1"] = double(r.c1);
      rec["c2"] = double(r.c2);
      rec["mse"] = double(r.mse);
      rec["converged"] = r.converged;
      rec["iterations"] = r.iterations;
      rec["gamma_star"] = double(r.gamma_star);
    }
    recs.push_back(std::move(rec));
  }
  j["replications"] = std::move(recs);
  return j;
}

template <typename Scalar>
Json to_json(const std::vector<BacktestReport<Scalar>>& reports) {
  Json arr = Json::array();
  for (const auto& r : reports) {
    Json j;
    j["estimator"] = r.estimator_label;
    j["failed"] = r.failed;
    if (r.failed) {
      j["message"] = r.message;
    } else {
      j["avg"] = double(r.avg);
      j["sd"] = double(r.sd);
      j["ir"] = double(r.ir);  // NaN -> null for zero-variance series
      if (std::isfinite(double(r.gamma_star))) j["gamma_star"] = double(r.gamma_star);
      j["weights"] = detail::vector_json(r.weights);
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace sfm
