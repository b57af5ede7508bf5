// sparsefm: sparse factor models of covariance matrices from the command
// line.  Subcommands: gen-data, fit, cv, simulate, backtest.  Every run is a
// pure function of its inputs, flags, and seed.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sfm/csv.hpp"
#include "sfm/estimator.hpp"
#include "sfm/model_selection.hpp"
#include "sfm/portfolio.hpp"
#include "sfm/serialize.hpp"
#include "sfm/simulation.hpp"

namespace {

using sfm::Index;

struct EstimatorOpts {
  std::string loss = "gaussian";
  std::string penalty = "scad";
  double shape = 0;  // 0: family default
  double gamma = 0;
  double psi_min = 1e-6;
  double zero_tol = 1e-6;
  double rel_tol = 1e-6;
  int max_outer = 500;
  int grid_size_k = 20;
  bool skip_psi_step = false;
  bool jitter_singular = false;
  std::uint64_t seed = 1;
};

struct CvOpts {
  std::string mode = "kfold";
  int folds = 5;
  double train_fraction = 0.75;
  std::vector<double> c_grid;  // empty: built-in default grid
};

void add_estimator_opts(CLI::App* cmd, EstimatorOpts& o, bool with_gamma) {
  cmd->add_option("--loss", o.loss, "Loss: gaussian or ls")
      ->check(CLI::IsMember({"gaussian", "ls"}));
  cmd->add_option("--penalty", o.penalty, "Penalty family: scad or mcp")
      ->check(CLI::IsMember({"scad", "mcp"}));
  cmd->add_option("--shape", o.shape, "Penalty shape (default 3.7 SCAD / 3.5 MCP)");
  if (with_gamma) cmd->add_option("--gamma", o.gamma, "Penalty level (default 0)");
  cmd->add_option("--psi-min", o.psi_min, "Lower bound on the noise variances");
  cmd->add_option("--zero-tol", o.zero_tol, "Support threshold on |lambda|");
  cmd->add_option("--rel-tol", o.rel_tol, "Outer-loop relative stopping tolerance");
  cmd->add_option("--max-outer", o.max_outer, "Outer-loop iteration cap");
  cmd->add_option("--grid-size-k", o.grid_size_k, "Rotation-init random candidates");
  cmd->add_flag("--skip-psi-step", o.skip_psi_step, "Freeze psi at its initial value");
  cmd->add_flag("--jitter-singular", o.jitter_singular,
                "Ridge a singular sample covariance for the Gaussian loss");
  cmd->add_option("--seed", o.seed, "Seed for every random draw in this run");
}

void add_cv_opts(CLI::App* cmd, CvOpts& o, const std::string& default_mode) {
  o.mode = default_mode;
  cmd->add_option("--cv-mode", o.mode, "Penalty selection: kfold or timesplit")
      ->check(CLI::IsMember({"kfold", "timesplit"}));
  cmd->add_option("--folds", o.folds, "Folds for kfold selection");
  cmd->add_option("--train-fraction", o.train_fraction, "Train share for timesplit");
  cmd->add_option("--c-grid", o.c_grid,
                  "Multipliers on sqrt(log(pm)/n) (default 0.01,0.1,...,4.0)")
      ->delimiter(',');
}

sfm::EstimatorConfig<double> build_config(const EstimatorOpts& o) {
  sfm::EstimatorConfig<double> cfg;
  cfg.loss = o.loss == "gaussian" ? sfm::LossKind::gaussian : sfm::LossKind::least_squares;
  cfg.penalty.family =
      o.penalty == "scad" ? sfm::PenaltyFamily::scad : sfm::PenaltyFamily::mcp;
  cfg.penalty.shape = o.shape > 0
                          ? o.shape
                          : sfm::PenaltySpec<double>::default_shape(cfg.penalty.family);
  cfg.penalty.gamma = o.gamma;
  cfg.psi_min = o.psi_min;
  cfg.zero_tol = o.zero_tol;
  cfg.rel_tol = o.rel_tol;
  cfg.max_outer_iters = o.max_outer;
  cfg.grid_size_k = o.grid_size_k;
  cfg.skip_psi_step = o.skip_psi_step;
  cfg.jitter_singular = o.jitter_singular;
  cfg.seed = o.seed;
  return cfg;
}

sfm::CvPlan<double> build_plan(const CvOpts& o, std::uint64_t seed) {
  sfm::CvPlan<double> plan;
  plan.mode = o.mode == "kfold" ? sfm::CvMode::kfold : sfm::CvMode::timesplit;
  plan.folds = o.folds;
  plan.train_fraction = o.train_fraction;
  plan.c_grid = o.c_grid.empty() ? sfm::default_c_grid<double>() : o.c_grid;
  plan.seed = seed;
  return plan;
}

sfm::SimPattern parse_pattern(const std::string& s) {
  if (s == "i") return sfm::SimPattern::perfect_simple;
  if (s == "ii") return sfm::SimPattern::perfect_simple_overlap;
  if (s == "iii") return sfm::SimPattern::perfect_simple_overlap_sparse;
  if (s == "iv") return sfm::SimPattern::arbitrary;
  throw std::invalid_argument("unknown pattern: " + s);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::fputs(text.c_str(), stdout);
    return;
  }
  std::ofstream out(path);
  if (!out) throw sfm::IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw sfm::IoError("write failed: " + path);
}

void write_json(const std::string& path, const sfm::Json& j) {
  write_text(path, j.dump(2) + "\n");
}

sfm::DataSet<double> load_data(const std::string& path, bool assume_centered) {
  const sfm::CsvTable table = sfm::read_csv(path);
  sfm::DataSet<double> data;
  data.x = table.values;
  data.centered = assume_centered;
  data.validate();
  return data;
}

// ---- subcommand payloads -------------------------------------------------

struct GenDataArgs {
  std::string pattern = "i";
  Index p = 0, m = 0, n = 0;
  std::uint64_t seed = 1;
  std::string out;
  std::string truth_out;
};

int run_gen_data(const GenDataArgs& a) {
  sfm::SimDesign design{parse_pattern(a.pattern), a.p, a.m, a.n, a.seed};
  const auto truth = sfm::generate_model<double>(design);
  const auto data = sfm::sample_data(truth, a.n, sfm::derive_seed(a.seed, 7));
  sfm::write_csv(a.out, data.x);
  if (!a.truth_out.empty()) write_json(a.truth_out, sfm::to_json(truth));
  return 0;
}

struct FitArgs {
  std::string data_path;
  Index m = 0;
  EstimatorOpts est;
  CvOpts cv;
  bool use_cv = false;
  bool assume_centered = false;
  std::string out;
};

int run_fit(const FitArgs& a) {
  const auto data = load_data(a.data_path, a.assume_centered);
  if (a.m > data.p()) throw std::invalid_argument("--m exceeds the number of columns");
  sfm::EstimatorConfig<double> cfg = build_config(a.est);

  sfm::Json j;
  if (a.use_cv) {
    const auto plan = build_plan(a.cv, a.est.seed);
    const auto report = sfm::cross_validate(data, a.m, cfg, plan);
    cfg.penalty.gamma = report.gamma_star;
    j["cv"] = sfm::to_json(report);
  }
  const auto fit = sfm::fit_sparse(data, a.m, cfg);
  j["loss"] = sfm::to_string(cfg.loss);
  j["penalty"] = sfm::to_string(cfg.penalty.family);
  j["gamma"] = cfg.penalty.gamma;
  j["shape"] = cfg.penalty.shape;
  j["seed"] = cfg.seed;
  j.update(sfm::to_json(fit));
  write_json(a.out, j);
  return 0;
}

struct CvArgs {
  std::string data_path;
  Index m = 0;
  EstimatorOpts est;
  CvOpts cv;
  bool assume_centered = false;
  std::string out;
};

int run_cv(const CvArgs& a) {
  const auto data = load_data(a.data_path, a.assume_centered);
  if (a.m > data.p()) throw std::invalid_argument("--m exceeds the number of columns");
  const auto cfg = build_config(a.est);
  const auto plan = build_plan(a.cv, a.est.seed);
  const auto report = sfm::cross_validate(data, a.m, cfg, plan);
  sfm::Json j = sfm::to_json(report);
  j["loss"] = sfm::to_string(cfg.loss);
  j["penalty"] = sfm::to_string(cfg.penalty.family);
  write_json(a.out, j);
  return 0;
}

struct SimulateArgs {
  std::string pattern = "i";
  Index p = 0, m = 0, n = 0;
  int reps = 1;
  int threads = 1;
  EstimatorOpts est;
  CvOpts cv;
  std::string out_json;
  std::string out_csv;
};

int run_simulate(const SimulateArgs& a) {
  sfm::SimDesign design{parse_pattern(a.pattern), a.p, a.m, a.n, a.est.seed};
  const auto cfg = build_config(a.est);
  const auto plan = build_plan(a.cv, a.est.seed);
  const auto summary = sfm::run_batch(design, a.reps, cfg, plan, a.threads);

  if (!a.out_csv.empty()) {
    std::string text = "seed,c1,c2,mse,converged,iterations,gamma_star\n";
    for (const auto& r : summary.records) {
      text += std::to_string(r.seed) + ",";
      if (r.failed) {
        text += "nan,nan,nan,0,0,nan\n";
      } else {
        text += sfm::format_g17(r.c1) + "," + sfm::format_g17(r.c2) + "," +
                sfm::format_g17(r.mse) + "," + (r.converged ? "1" : "0") + "," +
                std::to_string(r.iterations) + "," + sfm::format_g17(r.gamma_star) + "\n";
      }
    }
    write_text(a.out_csv, text);
  }
  write_json(a.out_json, sfm::to_json(summary));
  if (summary.failures == int(summary.records.size()))
    throw sfm::NumericalError("simulate: every replication failed");
  return 0;
}

struct BacktestArgs {
  std::string returns_path;
  std::string prices_path;
  Index split_index = 0;
  Index m = 0;
  int threads = 1;
  std::vector<std::string> estimators;
  EstimatorOpts est;
  CvOpts cv;
  bool assume_centered = false;
  std::string out_json;
  std::string out_csv;
};

int run_backtest(const BacktestArgs& a) {
  sfm::DataSet<double> returns;
  if (!a.prices_path.empty()) {
    const auto table = sfm::read_csv(a.prices_path);
    returns.x = sfm::log_returns(table.values);
    returns.centered = a.assume_centered;
  } else {
    returns = load_data(a.returns_path, a.assume_centered);
  }

  std::vector<sfm::PortfolioEstimator> chosen;
  const auto all = sfm::default_portfolio_estimators();
  if (a.estimators.empty()) {
    chosen = all;
  } else {
    for (const auto& label : a.estimators) {
      bool found = false;
      for (const auto& e : all)
        if (e.label == label) {
          chosen.push_back(e);
          found = true;
          break;
        }
      if (!found) throw std::invalid_argument("unknown estimator label: " + label);
    }
  }

  const auto cfg = build_config(a.est);
  const auto plan = build_plan(a.cv, a.est.seed);
  const auto reports =
      sfm::backtest(returns, a.split_index, a.m, chosen, cfg, plan, a.threads);

  write_json(a.out_json, sfm::to_json(reports));
  if (!a.out_csv.empty()) {
    std::string text = "label,avg,sd,ir\n";
    for (const auto& r : reports) {
      if (r.failed) {
        text += r.estimator_label + ",nan,nan,nan\n";
      } else {
        text += r.estimator_label + "," + sfm::format_g17(r.avg) + "," +
                sfm::format_g17(r.sd) + "," + sfm::format_g17(r.ir) + "\n";
      }
    }
    write_text(a.out_csv, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse factor models of covariance matrices"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "Simulate a dataset from a ground-truth model");
  cmd_gen->set_config("--config");
  cmd_gen->add_option("--pattern", gen.pattern, "Sparsity pattern: i, ii, iii, iv")
      ->check(CLI::IsMember({"i", "ii", "iii", "iv"}));
  cmd_gen->add_option("--p", gen.p, "Number of variables")->required();
  cmd_gen->add_option("--m", gen.m, "Number of factors")->required();
  cmd_gen->add_option("--n", gen.n, "Number of observations")->required();
  cmd_gen->add_option("--seed", gen.seed, "Seed");
  cmd_gen->add_option("--out", gen.out, "Output data CSV")->required();
  cmd_gen->add_option("--truth", gen.truth_out, "Ground-truth JSON sidecar");

  FitArgs fit;
  CLI::App* cmd_fit = app.add_subcommand("fit", "Fit a sparse factor model to a dataset");
  cmd_fit->set_config("--config");
  cmd_fit->add_option("--data", fit.data_path, "Input CSV (rows = observations)")->required();
  cmd_fit->add_option("--m", fit.m, "Number of factors")->required();
  add_estimator_opts(cmd_fit, fit.est, /*with_gamma=*/true);
  cmd_fit->add_flag("--cv", fit.use_cv, "Pick gamma by cross-validation instead of --gamma");
  add_cv_opts(cmd_fit, fit.cv, "kfold");
  cmd_fit->add_flag("--assume-centered", fit.assume_centered,
                    "Treat the data as mean zero (skip de-meaning)");
  cmd_fit->add_option("--out", fit.out, "Output JSON (default stdout)");

  CvArgs cv;
  CLI::App* cmd_cv = app.add_subcommand("cv", "Cross-validate the penalty level");
  cmd_cv->set_config("--config");
  cmd_cv->add_option("--data", cv.data_path, "Input CSV")->required();
  cmd_cv->add_option("--m", cv.m, "Number of factors")->required();
  add_estimator_opts(cmd_cv, cv.est, /*with_gamma=*/false);
  add_cv_opts(cmd_cv, cv.cv, "kfold");
  cmd_cv->add_flag("--assume-centered", cv.assume_centered,
                   "Treat the data as mean zero (skip de-meaning)");
  cmd_cv->add_option("--out", cv.out, "Output JSON (default stdout)");

  SimulateArgs sim;
  CLI::App* cmd_sim = app.add_subcommand("simulate", "Replication study with recovery metrics");
  cmd_sim->set_config("--config");
  cmd_sim->add_option("--pattern", sim.pattern, "Sparsity pattern: i, ii, iii, iv")
      ->check(CLI::IsMember({"i", "ii", "iii", "iv"}));
  cmd_sim->add_option("--p", sim.p, "Number of variables")->required();
  cmd_sim->add_option("--m", sim.m, "Number of factors")->required();
  cmd_sim->add_option("--n", sim.n, "Observations per replication")->required();
  cmd_sim->add_option("--reps", sim.reps, "Number of replications")->required();
  cmd_sim->add_option("--threads", sim.threads, "Worker threads (results independent)");
  add_estimator_opts(cmd_sim, sim.est, /*with_gamma=*/false);
  add_cv_opts(cmd_sim, sim.cv, "kfold");
  cmd_sim->add_option("--out-json", sim.out_json, "Aggregate JSON (default stdout)");
  cmd_sim->add_option("--out-csv", sim.out_csv, "Per-replication CSV");

  BacktestArgs bt;
  CLI::App* cmd_bt = app.add_subcommand("backtest", "GMVP backtest on a returns file");
  cmd_bt->set_config("--config");
  auto* opt_data = cmd_bt->add_option("--data", bt.returns_path, "Returns CSV");
  auto* opt_prices =
      cmd_bt->add_option("--prices", bt.prices_path, "Prices CSV (routed through log returns)");
  opt_data->excludes(opt_prices);
  cmd_bt->add_option("--split-index", bt.split_index, "In-sample row count")->required();
  cmd_bt->add_option("--m", bt.m, "Number of factors")->required();
  cmd_bt->add_option("--threads", bt.threads, "Worker threads (results independent)");
  cmd_bt->add_option("--estimators", bt.estimators,
                     "Labels: sample,equal,gaussian-scad,gaussian-mcp,ls-scad,ls-mcp")
      ->delimiter(',');
  add_estimator_opts(cmd_bt, bt.est, /*with_gamma=*/false);
  add_cv_opts(cmd_bt, bt.cv, "timesplit");
  cmd_bt->add_flag("--assume-centered", bt.assume_centered,
                   "Treat returns as mean zero (skip de-meaning)");
  cmd_bt->add_option("--out-json", bt.out_json, "Report JSON (default stdout)");
  cmd_bt->add_option("--out-csv", bt.out_csv, "Flat CSV of (label, avg, sd, ir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cmd_gen->parsed()) return run_gen_data(gen);
    if (cmd_fit->parsed()) return run_fit(fit);
    if (cmd_cv->parsed()) return run_cv(cv);
    if (cmd_sim->parsed()) return run_simulate(sim);
    if (cmd_bt->parsed()) return run_backtest(bt);
  } catch (const sfm::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const sfm::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
