// Command-line front end: simulation studies, single fits, lambda tuning and
// the saturated-model analysis on CSV input.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "mevs/csv.hpp"
#include "mevs/errors.hpp"
#include "mevs/simharness.hpp"
#include "mevs/tuning.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStudyFailures = 3;
constexpr int kExitSolver = 4;

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(csv);
  while (std::getline(in, cur, ',')) {
    while (!cur.empty() && cur.front() == ' ') cur.erase(0, 1);
    while (!cur.empty() && cur.back() == ' ') cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw mevs::ConfigError("cannot write " + path);
  out << text;
}

// ---- simulate ----

struct SimulateArgs {
  std::string design = "example1";
  long n = 1000;
  int reps = 200;
  std::uint64_t seed = 1;
  std::string criteria = "ee,gcv,bic";
  std::string out_dir;
  std::string config_path;
  std::string cache_dir;
  int lambda_points = 25;
  double sigma_u = -1.0;
  int threads = 0;
  long n_mc_c = 100000;
};

mevs::StudyConfig study_config_from(const SimulateArgs& args) {
  mevs::StudyConfig config;
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw mevs::ConfigError("cannot open config " + args.config_path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& err) {
      throw mevs::ConfigError(std::string("bad config json: ") + err.what());
    }
    if (j.contains("design")) config.design = j["design"].get<std::string>();
    if (j.contains("n")) config.n = j["n"].get<long>();
    if (j.contains("replications"))
      config.replications = j["replications"].get<int>();
    if (j.contains("seed")) config.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("lambda_points"))
      config.lambda_points = j["lambda_points"].get<int>();
    if (j.contains("sigma_u")) config.sigma_u = j["sigma_u"].get<double>();
    if (j.contains("n_mc_c")) config.n_mc_c = j["n_mc_c"].get<long>();
    if (j.contains("threads")) config.threads = j["threads"].get<int>();
    if (j.contains("criteria")) {
      config.criteria.clear();
      for (const auto& c : j["criteria"])
        config.criteria.push_back(mevs::parse_criterion(c.get<std::string>()));
    }
  }
  return config;
}

int cmd_simulate(const SimulateArgs& args, const CLI::App& cmd) {
  mevs::StudyConfig config = study_config_from(args);
  auto overridden = [&](const std::string& flag) {
    return cmd.count(flag) > 0;
  };
  if (args.config_path.empty() || overridden("--design"))
    config.design = args.design;
  if (args.config_path.empty() || overridden("--n")) config.n = args.n;
  if (args.config_path.empty() || overridden("--reps"))
    config.replications = args.reps;
  if (args.config_path.empty() || overridden("--seed")) config.seed = args.seed;
  if (args.config_path.empty() || overridden("--grid-points"))
    config.lambda_points = args.lambda_points;
  if (overridden("--sigma-u")) config.sigma_u = args.sigma_u;
  if (overridden("--threads")) config.threads = args.threads;
  if (overridden("--n-mc")) config.n_mc_c = args.n_mc_c;
  if (args.config_path.empty() || overridden("--criteria")) {
    config.criteria.clear();
    for (const auto& name : split_list(args.criteria))
      config.criteria.push_back(mevs::parse_criterion(name));
  }
  config.cache_dir = args.cache_dir;

  const mevs::StudyReport report = mevs::run_study(config);
  const std::string table = report.table_markdown();
  std::cout << table;
  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    write_text((fs::path(args.out_dir) / "raw.csv").string(),
               report.raw_csv());
    write_text((fs::path(args.out_dir) / "report.md").string(), table);
  }
  return kExitOk;
}

// ---- gen ----

int cmd_gen(const std::string& design_name, long n, std::uint64_t seed,
            double sigma_u, const std::string& out) {
  const mevs::SimDesign design = mevs::design_by_name(design_name, sigma_u);
  const mevs::Dataset data = mevs::gen_dataset(design, n, seed);
  mevs::CsvTable table;
  table.header.push_back("w");
  if (design.semipar) table.header.push_back("zs");
  const std::string zname = design.name == "example2" ? "s" : "z";
  for (int j = 0; j < data.z.cols(); ++j)
    table.header.push_back(zname + std::to_string(j + 1));
  table.header.push_back("y");
  for (long i = 0; i < data.n(); ++i) {
    std::vector<std::string> row;
    row.push_back(mevs::format_double(data.w(i)));
    if (design.semipar) row.push_back(mevs::format_double(data.zs(i)));
    for (int j = 0; j < data.z.cols(); ++j)
      row.push_back(mevs::format_double(data.z(i, j)));
    row.push_back(mevs::format_double(data.y(i)));
    table.rows.push_back(std::move(row));
  }
  mevs::write_csv(out, table);
  std::cout << "wrote " << data.n() << " rows to " << out << "\n";
  return kExitOk;
}

// ---- shared CSV-model loading for fit/tune/analyze ----

struct AnalysisArgs {
  std::string input;
  std::string response = "y";
  std::string surrogate = "w";
  std::string covariates;  // comma list; empty = all other columns
  std::string terms;       // comma list; required
  double sigma_u = 0.0;
  std::string penalty = "scad";
  double scad_a = 3.7;
  bool no_standardize = false;
  std::string unpenalized;  // comma list of term labels
  int x_grid = 25, w_quad = 20, inner_quad = 20;
  int grid_points = 40;
  double grid_min = 0.0, grid_max = 0.0;
  double lambda = 0.0;
  std::string criterion = "bic";
  std::string out;
  std::string curves;
};

struct LoadedAnalysis {
  mevs::Dataset data;
  mevs::MEModelSpec model;
  std::vector<std::string> term_labels;
  mevs::SolverConfig solver;
  mevs::PenaltySpec penalty;
};

LoadedAnalysis load_analysis(const AnalysisArgs& args) {
  if (args.terms.empty())
    throw mevs::ConfigError("--terms is required (e.g. \"1,w,z1,w*z1\")");
  if (args.sigma_u < 0.0) throw mevs::ConfigError("--sigma-u must be >= 0");
  const mevs::CsvTable csv = mevs::read_csv(args.input);
  const int y_col = csv.col(args.response);
  const int w_col = csv.col(args.surrogate);
  if (y_col < 0)
    throw mevs::ConfigError("response column '" + args.response + "' missing");
  if (w_col < 0)
    throw mevs::ConfigError("surrogate column '" + args.surrogate + "' missing");

  std::vector<std::string> z_names;
  if (!args.covariates.empty()) {
    z_names = split_list(args.covariates);
  } else {
    for (const auto& name : csv.header)
      if (name != args.response && name != args.surrogate)
        z_names.push_back(name);
  }
  const long n = static_cast<long>(csv.rows.size());
  if (n < 1) throw mevs::ConfigError("empty data set");

  LoadedAnalysis out;
  out.data.w.resize(n);
  out.data.y.resize(n);
  out.data.z.resize(n, static_cast<long>(z_names.size()));
  for (long i = 0; i < n; ++i) {
    out.data.w(i) = csv.num(i, w_col);
    out.data.y(i) = csv.num(i, y_col);
  }
  for (size_t j = 0; j < z_names.size(); ++j) {
    const int c = csv.col(z_names[j]);
    if (c < 0)
      throw mevs::ConfigError("covariate column '" + z_names[j] + "' missing");
    for (long i = 0; i < n; ++i) out.data.z(i, j) = csv.num(i, c);
  }

  double sigma_u = args.sigma_u;
  if (!args.no_standardize) {
    // standardize the surrogate and every non-binary covariate; the error
    // SD scales along with W
    auto standardize = [](Eigen::VectorXd& v) {
      const double mean = v.mean();
      const double sd = std::sqrt((v.array() - mean).square().sum() /
                                  std::max<long>(v.size() - 1, 1));
      if (sd > 0.0) v = (v.array() - mean) / sd;
      return sd > 0.0 ? sd : 1.0;
    };
    const double w_sd = standardize(out.data.w);
    sigma_u /= w_sd;
    for (int j = 0; j < out.data.z.cols(); ++j) {
      std::set<double> distinct;
      for (long i = 0; i < n && distinct.size() < 3; ++i)
        distinct.insert(out.data.z(i, j));
      if (distinct.size() <= 2) continue;
      Eigen::VectorXd col = out.data.z.col(j);
      standardize(col);
      out.data.z.col(j) = col;
    }
  }

  out.term_labels = split_list(args.terms);
  if (out.term_labels.empty()) throw mevs::ConfigError("empty term list");
  out.model.family = mevs::Family::Logistic;
  out.model.design =
      mevs::DesignSpec::parse(out.term_labels, args.surrogate, z_names);
  out.model.error = mevs::GaussianErrorModel{sigma_u};
  out.model.posited = mevs::GaussianPosited{0.0, 1.0};
  out.model.quad.x_grid_size = args.x_grid;
  out.model.quad.w_quad_size = args.w_quad;
  out.model.quad.inner_size = args.inner_quad;

  if (args.penalty == "scad")
    out.penalty = mevs::PenaltySpec::scad(0.0, args.scad_a);
  else if (args.penalty == "l1")
    out.penalty = mevs::PenaltySpec::l1(0.0);
  else
    throw mevs::ConfigError("unknown penalty '" + args.penalty + "'");

  for (const auto& label : split_list(args.unpenalized)) {
    bool found = false;
    for (size_t t = 0; t < out.term_labels.size(); ++t) {
      if (out.term_labels[t] == label) {
        out.solver.unpenalized_mask.insert(static_cast<int>(t));
        found = true;
      }
    }
    if (!found)
      throw mevs::ConfigError("unpenalized term '" + label + "' not in terms");
  }
  return out;
}

std::string fit_table(const std::vector<std::string>& labels,
                      const mevs::FitResult& fit, const Eigen::VectorXd& se) {
  char buf[160];
  std::ostringstream out;
  out << "| term | estimate (SE) |\n|---|---|\n";
  for (size_t t = 0; t < labels.size(); ++t) {
    if (fit.beta(t) == 0.0) {
      std::snprintf(buf, sizeof(buf), "| %s | 0 (NA) |\n", labels[t].c_str());
    } else {
      std::snprintf(buf, sizeof(buf), "| %s | %.3f (%.3f) |\n",
                    labels[t].c_str(), fit.beta(t), se(t));
    }
    out << buf;
  }
  return out.str();
}

Eigen::VectorXd se_or_nan(const mevs::FitResult& fit,
                          const mevs::MEModelSpec& model,
                          const mevs::Dataset& data,
                          mevs::EffScoreEngine* engine) {
  Eigen::VectorXd se = Eigen::VectorXd::Constant(
      fit.beta.size(), std::numeric_limits<double>::quiet_NaN());
  if (fit.active_set.empty() || !fit.converged) return se;
  const Eigen::MatrixXd cov = mevs::sandwich_cov(fit, model, data, engine);
  for (int i = 0; i < fit.d1(); ++i)
    se(fit.active_set[i]) = std::sqrt(std::max(cov(i, i), 0.0));
  return se;
}

int cmd_fit(const AnalysisArgs& args) {
  LoadedAnalysis loaded = load_analysis(args);
  mevs::EffScoreEngine engine(loaded.model, loaded.data,
                              loaded.solver.engine);
  mevs::FitResult fit;
  if (args.lambda > 0.0) {
    fit = mevs::solve_penalized(loaded.model, loaded.data, args.lambda,
                                loaded.penalty, loaded.solver, {}, &engine);
  } else {
    fit = mevs::solve_unpenalized(loaded.model, loaded.data, loaded.solver, {},
                                  &engine);
  }
  if (!fit.converged) {
    std::cerr << "fit did not converge (residual " << fit.residual_inf
              << ")\n";
    return kExitSolver;
  }
  const Eigen::VectorXd se =
      se_or_nan(fit, loaded.model, loaded.data, &engine);
  const std::string table = fit_table(loaded.term_labels, fit, se);
  std::cout << "lambda=" << mevs::format_double(fit.lambda) << " iterations="
            << fit.iterations << "\n" << table;
  if (!args.out.empty()) {
    std::ostringstream csv;
    csv << "term,estimate,se\n";
    for (size_t t = 0; t < loaded.term_labels.size(); ++t)
      csv << mevs::csv_escape(loaded.term_labels[t]) << ','
          << mevs::format_double(fit.beta(t)) << ','
          << (std::isfinite(se(t)) ? mevs::format_double(se(t)) : "NA") << "\n";
    write_text(args.out, csv.str());
  }
  return kExitOk;
}

Eigen::VectorXd make_grid(const AnalysisArgs& args, double max_abs_beta) {
  if (args.grid_min > 0.0 && args.grid_max > args.grid_min) {
    Eigen::VectorXd grid(args.grid_points);
    const double llo = std::log(args.grid_min), lhi = std::log(args.grid_max);
    for (int i = 0; i < args.grid_points; ++i)
      grid(i) = std::exp(llo + (lhi - llo) * i /
                         std::max(args.grid_points - 1, 1));
    return grid;
  }
  return mevs::default_lambda_grid(max_abs_beta, args.grid_points);
}

int cmd_tune(const AnalysisArgs& args) {
  LoadedAnalysis loaded = load_analysis(args);
  mevs::EffScoreEngine engine(loaded.model, loaded.data, loaded.solver.engine);
  const mevs::FitResult unpen = mevs::solve_unpenalized(
      loaded.model, loaded.data, loaded.solver, {}, &engine);
  if (!unpen.converged) {
    std::cerr << "unpenalized fit did not converge\n";
    return kExitSolver;
  }
  const Eigen::VectorXd grid =
      make_grid(args, unpen.beta.cwiseAbs().maxCoeff());
  const mevs::TuningTrace trace =
      mevs::select_lambda(loaded.model, loaded.data, grid, loaded.penalty,
                          loaded.solver, &engine, unpen.beta);
  const std::string csv = mevs::trace_to_csv(trace);
  std::cout << "lambda_gcv=" << mevs::format_double(trace.lambda_for(mevs::Criterion::GCV))
            << " lambda_bic=" << mevs::format_double(trace.lambda_for(mevs::Criterion::BIC))
            << "\n";
  for (const auto& warning : trace.warnings)
    std::cerr << "warning: " << warning << "\n";
  if (!args.out.empty()) write_text(args.out, csv);
  else std::cout << csv;
  return kExitOk;
}

int cmd_analyze(const AnalysisArgs& args) {
  LoadedAnalysis loaded = load_analysis(args);
  mevs::EffScoreEngine engine(loaded.model, loaded.data, loaded.solver.engine);
  const mevs::FitResult unpen = mevs::solve_unpenalized(
      loaded.model, loaded.data, loaded.solver, {}, &engine);
  if (!unpen.converged) {
    std::cerr << "unpenalized fit did not converge\n";
    return kExitSolver;
  }
  const Eigen::VectorXd grid =
      make_grid(args, unpen.beta.cwiseAbs().maxCoeff());
  const mevs::TuningTrace trace =
      mevs::select_lambda(loaded.model, loaded.data, grid, loaded.penalty,
                          loaded.solver, &engine, unpen.beta);
  const mevs::FitResult& gcv_fit =
      trace.entry_for(mevs::Criterion::GCV).fit;
  const mevs::FitResult& bic_fit =
      trace.entry_for(mevs::Criterion::BIC).fit;

  const Eigen::VectorXd se_ee =
      se_or_nan(unpen, loaded.model, loaded.data, &engine);
  const Eigen::VectorXd se_gcv =
      se_or_nan(gcv_fit, loaded.model, loaded.data, &engine);
  const Eigen::VectorXd se_bic =
      se_or_nan(bic_fit, loaded.model, loaded.data, &engine);

  char buf[256];
  std::ostringstream out;
  out << "# selected lambda: gcv="
      << mevs::format_double(trace.lambda_for(mevs::Criterion::GCV))
      << " bic=" << mevs::format_double(trace.lambda_for(mevs::Criterion::BIC))
      << "\n\n| term | EE | GCV | BIC |\n|---|---|---|---|\n";
  auto cell = [&](const mevs::FitResult& fit, const Eigen::VectorXd& se,
                  size_t t) {
    char c[64];
    if (fit.beta(t) == 0.0) return std::string("0 (NA)");
    std::snprintf(c, sizeof(c), "%.3f (%.3f)", fit.beta(t), se(t));
    return std::string(c);
  };
  for (size_t t = 0; t < loaded.term_labels.size(); ++t) {
    std::snprintf(buf, sizeof(buf), "| %s | %s | %s | %s |\n",
                  loaded.term_labels[t].c_str(), cell(unpen, se_ee, t).c_str(),
                  cell(gcv_fit, se_gcv, t).c_str(),
                  cell(bic_fit, se_bic, t).c_str());
    out << buf;
  }
  std::cout << out.str();
  if (!args.out.empty()) write_text(args.out, out.str());

  if (!args.curves.empty()) {
    // GCV/BIC score curves normalized to [0,1]
    double gmin = 1e300, gmax = -1e300, bmin = 1e300, bmax = -1e300;
    for (const auto& entry : trace.entries) {
      if (!entry.scored) continue;
      gmin = std::min(gmin, entry.gcv);
      gmax = std::max(gmax, entry.gcv);
      bmin = std::min(bmin, entry.bic);
      bmax = std::max(bmax, entry.bic);
    }
    std::ostringstream csv;
    csv << "lambda,gcv,bic,gcv_norm,bic_norm\n";
    for (const auto& entry : trace.entries) {
      if (!entry.scored) continue;
      const double gn = gmax > gmin ? (entry.gcv - gmin) / (gmax - gmin) : 0.0;
      const double bn = bmax > bmin ? (entry.bic - bmin) / (bmax - bmin) : 0.0;
      csv << mevs::format_double(entry.lambda) << ','
          << mevs::format_double(entry.gcv) << ','
          << mevs::format_double(entry.bic) << ',' << mevs::format_double(gn)
          << ',' << mevs::format_double(bn) << "\n";
    }
    write_text(args.curves, csv.str());
  }
  for (const auto& warning : trace.warnings)
    std::cerr << "warning: " << warning << "\n";
  return kExitOk;
}

void add_analysis_flags(CLI::App* cmd, AnalysisArgs& args) {
  cmd->add_option("--input", args.input, "input CSV path")->required();
  cmd->add_option("--response", args.response, "response column (default y)");
  cmd->add_option("--surrogate", args.surrogate,
                  "error-prone surrogate column (default w)");
  cmd->add_option("--covariates", args.covariates,
                  "comma list of error-free columns (default: all others)");
  cmd->add_option("--terms", args.terms,
                  "comma list of design terms, e.g. \"1,w,z1,w*z1,z2^2\"")
      ->required();
  cmd->add_option("--sigma-u", args.sigma_u, "measurement error SD")
      ->required();
  cmd->add_option("--penalty", args.penalty, "scad|l1 (default scad)");
  cmd->add_option("--a", args.scad_a, "SCAD shape (default 3.7)");
  cmd->add_flag("--no-standardize", args.no_standardize,
                "skip standardization of surrogate/covariates");
  cmd->add_option("--unpenalized", args.unpenalized,
                  "comma list of term labels kept unpenalized");
  cmd->add_option("--x-grid", args.x_grid, "collocation grid size");
  cmd->add_option("--w-quad", args.w_quad, "W quadrature size");
  cmd->add_option("--inner-quad", args.inner_quad,
                  "posited-measure quadrature size");
  cmd->add_option("--grid-points", args.grid_points, "lambda grid size");
  cmd->add_option("--grid-min", args.grid_min, "lambda grid lower end");
  cmd->add_option("--grid-max", args.grid_max, "lambda grid upper end");
  cmd->add_option("--out", args.out, "output path");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SCAD-penalized estimating equations for measurement error models"};
  app.require_subcommand(1);

  SimulateArgs sim;
  CLI::App* simulate = app.add_subcommand("simulate", "run a replication study");
  simulate->add_option("--design", sim.design,
                       "example1|example2|framingham_like");
  simulate->add_option("--n", sim.n, "sample size per replication");
  simulate->add_option("--reps", sim.reps, "number of replications");
  simulate->add_option("--seed", sim.seed, "master seed");
  simulate->add_option("--criteria", sim.criteria, "comma list of ee,gcv,bic");
  simulate->add_option("--out-dir", sim.out_dir, "directory for raw.csv/report.md");
  simulate->add_option("--config", sim.config_path, "JSON config file");
  simulate->add_option("--grid-points", sim.lambda_points, "lambda grid size");
  simulate->add_option("--sigma-u", sim.sigma_u, "measurement error SD");
  simulate->add_option("--threads", sim.threads, "worker threads (0=auto)");
  simulate->add_option("--n-mc", sim.n_mc_c, "Monte Carlo size for C matrices");
  simulate->add_option("--cache-dir", sim.cache_dir, "C-matrix cache directory");

  std::string gen_design = "example1", gen_out = "data.csv";
  long gen_n = 500;
  std::uint64_t gen_seed = 1;
  double gen_sigma_u = -1.0;
  CLI::App* gen = app.add_subcommand("gen", "write a synthetic CSV data set");
  gen->add_option("--design", gen_design, "example1|example2|framingham_like");
  gen->add_option("--n", gen_n, "rows");
  gen->add_option("--seed", gen_seed, "seed");
  gen->add_option("--sigma-u", gen_sigma_u, "measurement error SD");
  gen->add_option("--out", gen_out, "output CSV path")->required();

  AnalysisArgs fit_args;
  CLI::App* fit = app.add_subcommand("fit", "single fit at a given lambda");
  add_analysis_flags(fit, fit_args);
  fit->add_option("--lambda", fit_args.lambda, "penalty level (0=unpenalized)");

  AnalysisArgs tune_args;
  CLI::App* tune = app.add_subcommand("tune", "lambda grid search trace");
  add_analysis_flags(tune, tune_args);

  AnalysisArgs analyze_args;
  CLI::App* analyze =
      app.add_subcommand("analyze", "EE/GCV/BIC table on CSV input");
  add_analysis_flags(analyze, analyze_args);
  analyze->add_option("--curves", analyze_args.curves,
                      "CSV path for normalized score curves");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim, *simulate);
    if (gen->parsed()) return cmd_gen(gen_design, gen_n, gen_seed, gen_sigma_u, gen_out);
    if (fit->parsed()) return cmd_fit(fit_args);
    if (tune->parsed()) return cmd_tune(tune_args);
    if (analyze->parsed()) return cmd_analyze(analyze_args);
  } catch (const mevs::ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const mevs::StudyAborted& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitStudyFailures;
  } catch (const mevs::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitSolver;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitSolver;
  }
  return kExitConfig;
}
