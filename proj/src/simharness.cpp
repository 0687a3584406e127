#include "mevs/simharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "mevs/csv.hpp"
#include "mevs/errors.hpp"
#include "mevs/rng.hpp"

namespace mevs {

namespace {

// lower-triangular factor of the AR covariance 0.5^|i-j|
Eigen::MatrixXd ar_cholesky(int p) {
  Eigen::MatrixXd sigma(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) sigma(i, j) = std::pow(0.5, std::abs(i - j));
  return Eigen::LLT<Eigen::MatrixXd>(sigma).matrixL();
}

}  // namespace

SimDesign example1_design(double sigma_u, QuadratureSettings quad) {
  SimDesign design;
  design.name = "example1";
  design.sigma_u = sigma_u;
  design.model.family = Family::Logistic;
  design.model.design = make_logistic_quadratic_design(7);
  design.model.error = GaussianErrorModel{sigma_u};
  design.model.posited = GaussianPosited{0.0, 1.0};
  design.model.quad = quad;
  design.beta0 = Eigen::VectorXd::Zero(10);
  design.beta0 << 0.0, 1.5, 2.0, 0.0, 3.0, 0.0, 1.5, 0.0, 0.0, 0.0;
  design.true_zeros = {0, 3, 5, 7, 8, 9};
  const Eigen::MatrixXd chol = ar_cholesky(6);
  design.sampler = [sigma_u, chol](Rng& rng) {
    DesignDraw draw;
    draw.x = rng.normal();
    Eigen::VectorXd e(6);
    for (int j = 0; j < 6; ++j) e(j) = rng.normal();
    draw.z.resize(7);
    draw.z.head(6) = (chol * e).transpose();
    draw.z(6) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    draw.w = draw.x + rng.normal(0.0, sigma_u);
    return draw;
  };
  return design;
}

SimDesign example2_design(double sigma_u, QuadratureSettings quad) {
  SimDesign design;
  design.name = "example2";
  design.sigma_u = sigma_u;
  design.semipar = true;
  design.theta_fn = [](double z) { return 0.5 * std::cos(z); };
  design.model.family = Family::Logistic;
  std::vector<Term> terms;
  terms.push_back({1, {}, "x"});
  for (int j = 0; j < 9; ++j)
    terms.push_back({0, {{j, 1}}, "s" + std::to_string(j + 1)});
  design.model.design = DesignSpec(std::move(terms), 9);
  design.model.error = GaussianErrorModel{sigma_u};
  design.model.posited = GaussianPosited{0.0, 1.0};
  design.model.quad = quad;
  design.beta0 = Eigen::VectorXd::Zero(10);
  design.beta0 << 1.5, 2.0, 0.0, 0.0, 3.0, 0.0, 1.5, 0.0, 0.0, 0.0;
  design.true_zeros = {2, 3, 5, 7, 8, 9};
  const Eigen::MatrixXd chol = ar_cholesky(8);
  auto theta = design.theta_fn;
  design.sampler = [sigma_u, chol, theta](Rng& rng) {
    DesignDraw draw;
    draw.x = rng.normal();
    Eigen::VectorXd e(8);
    for (int j = 0; j < 8; ++j) e(j) = rng.normal();
    draw.z.resize(9);
    draw.z.head(8) = (chol * e).transpose();
    draw.z(8) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    draw.zs = rng.uniform(-M_PI / 2.0, M_PI / 2.0);
    draw.theta = theta(draw.zs);
    draw.w = draw.x + rng.normal(0.0, sigma_u);
    return draw;
  };
  return design;
}

SimDesign framingham_like_design(double sigma_u, QuadratureSettings quad) {
  SimDesign design;
  design.name = "framingham_like";
  design.sigma_u = sigma_u;
  design.model.family = Family::Logistic;
  const std::vector<std::string> term_strs = {
      "w",      "w*z1", "w*z2", "w*z3", "1",     "z1",
      "z2",     "z3",   "z2^2", "z1*z2", "z1*z3", "z2*z3"};
  design.model.design = DesignSpec::parse(term_strs, "w", {"z1", "z2", "z3"});
  design.model.error = GaussianErrorModel{sigma_u};
  design.model.posited = GaussianPosited{0.0, 1.0};
  design.model.quad = quad;
  design.beta0 = Eigen::VectorXd::Zero(12);
  // sparse truth mirroring the terms kept by the aggressive selector
  design.beta0(0) = 0.6;   // x
  design.beta0(4) = -2.2;  // intercept
  design.beta0(5) = 0.5;   // z1
  design.beta0(6) = 0.9;   // z2
  design.true_zeros = {1, 2, 3, 7, 8, 9, 10, 11};
  design.sampler = [sigma_u](Rng& rng) {
    DesignDraw draw;
    draw.z.resize(3);
    draw.z(0) = rng.normal();
    draw.z(1) = rng.normal();
    draw.z(2) = rng.bernoulli(0.4) ? 1.0 : 0.0;
    draw.x = rng.normal();
    draw.w = draw.x + rng.normal(0.0, sigma_u);
    return draw;
  };
  return design;
}

SimDesign design_by_name(const std::string& name, double sigma_u,
                         QuadratureSettings quad) {
  if (name == "example1")
    return example1_design(sigma_u < 0 ? 0.1 : sigma_u, quad);
  if (name == "example2")
    return example2_design(sigma_u < 0 ? 0.1 : sigma_u, quad);
  if (name == "framingham_like")
    return framingham_like_design(sigma_u < 0 ? std::sqrt(0.0126) : sigma_u,
                                  quad);
  throw ConfigError("unknown design '" + name +
                    "'; valid designs: example1, example2, framingham_like");
}

std::vector<std::string> known_designs() {
  return {"example1", "example2", "framingham_like"};
}

Dataset gen_dataset(const SimDesign& design, long n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  Rng rng(seed);
  Dataset data;
  data.w.resize(n);
  data.y.resize(n);
  data.z.resize(n, design.model.design.n_z_cols());
  if (design.semipar) data.zs.resize(n);
  for (long i = 0; i < n; ++i) {
    const DesignDraw draw = design.sampler(rng);
    data.w(i) = draw.w;
    data.z.row(i) = draw.z;
    if (design.semipar) data.zs(i) = draw.zs;
    const double eta =
        draw.theta +
        design.beta0.dot(design.model.design.design_vector(draw.x, draw.z));
    data.y(i) = rng.bernoulli(sigmoid(eta)) ? 1.0 : 0.0;
  }
  return data;
}

Dataset gen_example1(long n, std::uint64_t seed, double sigma_u) {
  return gen_dataset(example1_design(sigma_u), n, seed);
}
Dataset gen_example2(long n, std::uint64_t seed, double sigma_u) {
  return gen_dataset(example2_design(sigma_u), n, seed);
}
Dataset gen_framingham_like(long n, std::uint64_t seed, double sigma_u) {
  return gen_dataset(framingham_like_design(sigma_u), n, seed);
}

void StudyConfig::validate() const {
  if (replications < 1) throw ConfigError("replications must be >= 1");
  if (n < 50) throw ConfigError("study n must be >= 50");
  if (criteria.empty()) throw ConfigError("study needs at least one criterion");
  if (lambda_points < 1) throw ConfigError("lambda_points must be >= 1");
  if (n_mc_c < 10000) throw ConfigError("n_mc_c must be >= 1e4");
  design_by_name(design, sigma_u);
}

namespace {

bool needs_tuning(const StudyConfig& config) {
  for (Criterion c : config.criteria)
    if (c != Criterion::EE) return true;
  return false;
}

Eigen::VectorXd se_from_cov(const FitResult& fit, const Eigen::MatrixXd& cov) {
  Eigen::VectorXd se = Eigen::VectorXd::Constant(
      fit.beta.size(), std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < fit.d1(); ++i)
    se(fit.active_set[i]) = std::sqrt(std::max(cov(i, i), 0.0));
  return se;
}

RepRecord run_parametric_rep(const SimDesign& design,
                             const StudyConfig& config,
                             const ErrorMetricContext& ctx, int rep) {
  RepRecord record;
  record.rep = rep;
  const Dataset data =
      gen_dataset(design, config.n, split_seed(config.seed, rep));
  EffScoreEngine engine(design.model, data, config.solver.engine);

  FitResult unpen =
      solve_unpenalized(design.model, data, config.solver, {}, &engine);
  if (!unpen.converged)
    throw Error("unpenalized fit did not converge");

  PenaltySpec penalty = config.penalty_family == PenaltyFamily::SCAD
                            ? PenaltySpec::scad(0.0, config.scad_a)
                            : PenaltySpec::l1(0.0);
  TuningTrace trace;
  if (needs_tuning(config)) {
    const Eigen::VectorXd grid =
        default_lambda_grid(unpen.beta.cwiseAbs().maxCoeff(),
                            config.lambda_points, config.lambda_lo_frac);
    trace = select_lambda(design.model, data, grid, penalty, config.solver,
                          &engine, unpen.beta);
  }

  for (Criterion crit : config.criteria) {
    const FitResult& fit =
        crit == Criterion::EE ? unpen : trace.entry_for(crit).fit;
    CritRecord out;
    out.criterion = crit;
    out.lambda = fit.lambda;
    out.converged = fit.converged;
    out.beta = fit.beta;
    out.rame = rame(fit, unpen, ctx, false);
    out.rame_w = rame(fit, unpen, ctx, true);
    const auto zeros = count_zeros(fit, ctx.true_zeros);
    out.c_zeros = zeros.first;
    out.e_zeros = zeros.second;
    if (!fit.active_set.empty()) {
      const Eigen::MatrixXd cov =
          sandwich_cov(fit, design.model, data, &engine);
      out.se = se_from_cov(fit, cov);
    } else {
      out.se = Eigen::VectorXd::Constant(
          fit.beta.size(), std::numeric_limits<double>::quiet_NaN());
    }
    record.results.push_back(std::move(out));
  }
  return record;
}

RepRecord run_semipar_rep(const SimDesign& design, const StudyConfig& config,
                          const ErrorMetricContext& ctx, int rep) {
  RepRecord record;
  record.rep = rep;
  const Dataset data =
      gen_dataset(design, config.n, split_seed(config.seed, rep));

  const double h =
      config.bandwidth > 0.0 ? config.bandwidth : default_bandwidth(data.zs);
  SemiparModel sm = make_semipar_model(design.model,
                                       KernelSpec(config.kernel_family, h));
  PenaltySpec penalty = config.penalty_family == PenaltyFamily::SCAD
                            ? PenaltySpec::scad(0.0, config.scad_a)
                            : PenaltySpec::l1(0.0);

  ProfileFitResult unpen =
      profile_fit(sm, data, 0.0, penalty, config.solver, config.semipar);
  if (!unpen.fit.converged)
    throw Error("unpenalized profile fit did not converge");

  std::map<double, ProfileFitResult> by_lambda;
  auto theta_offsets = [&](const ProfileFitResult& pr) {
    Eigen::VectorXd off(data.n());
    for (long i = 0; i < data.n(); ++i) {
      double v = 0.0;
      for (int r = 0; r < sm.m; ++r)
        v += sm.augmented.design.terms()[sm.n_beta + r].z_monomial(
                 data.z.row(i)) *
             pr.profile.theta(i, r);
      off(i) = v;
    }
    return off;
  };

  TuningTrace trace;
  if (needs_tuning(config)) {
    const Eigen::VectorXd grid =
        default_lambda_grid(unpen.fit.beta.cwiseAbs().maxCoeff(),
                            config.lambda_points, config.lambda_lo_frac);
    trace = select_lambda_generic(
        design.model, data, grid,
        [&](double lambda) {
          ProfileFitResult pr = profile_fit(sm, data, lambda, penalty,
                                            config.solver, config.semipar,
                                            unpen.fit.beta);
          const FitResult fit = pr.fit;
          by_lambda[lambda] = std::move(pr);
          return fit;
        },
        [&](const FitResult& fit) {
          return theta_offsets(by_lambda.at(fit.lambda));
        });
  }

  for (Criterion crit : config.criteria) {
    const ProfileFitResult& pr =
        crit == Criterion::EE ? unpen
                              : by_lambda.at(trace.entry_for(crit).lambda);
    CritRecord out;
    out.criterion = crit;
    out.lambda = pr.fit.lambda;
    out.converged = pr.fit.converged;
    out.beta = pr.fit.beta;
    out.rame = rame(pr.fit, unpen.fit, ctx, false);
    out.rame_w = rame(pr.fit, unpen.fit, ctx, true);
    const auto zeros = count_zeros(pr.fit, ctx.true_zeros);
    out.c_zeros = zeros.first;
    out.e_zeros = zeros.second;
    if (!pr.fit.active_set.empty()) {
      const Eigen::MatrixXd cov =
          semipar_sandwich(pr, sm, data, config.semipar);
      out.se = se_from_cov(pr.fit, cov);
    } else {
      out.se = Eigen::VectorXd::Constant(
          pr.fit.beta.size(), std::numeric_limits<double>::quiet_NaN());
    }
    record.results.push_back(std::move(out));
  }
  return record;
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double mad_scaled(const std::vector<double>& values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double med = median(values);
  std::vector<double> dev;
  dev.reserve(values.size());
  for (double v : values) dev.push_back(std::fabs(v - med));
  return median(dev) / 0.6745;
}

StudyReport run_study(const StudyConfig& config) {
  config.validate();
  const SimDesign design =
      design_by_name(config.design, config.sigma_u, config.quad);

  ErrorMetricContext ctx;
  ctx.beta0 = design.beta0;
  ctx.true_zeros = design.true_zeros;
  const std::uint64_t c_seed = split_seed(config.seed, 0x000C0FFEE);
  if (config.cache_dir.empty()) {
    ctx.c_x = estimate_C(design.sampler, design.model.design,
                         design.model.family, design.beta0, config.n_mc_c,
                         c_seed, false);
    ctx.c_w = estimate_C(design.sampler, design.model.design,
                         design.model.family, design.beta0, config.n_mc_c,
                         c_seed, true);
  } else {
    ctx.c_x = load_or_estimate_C(config.cache_dir, design.name, design.sampler,
                                 design.model.design, design.model.family,
                                 design.beta0, config.n_mc_c, c_seed, false);
    ctx.c_w = load_or_estimate_C(config.cache_dir, design.name, design.sampler,
                                 design.model.design, design.model.family,
                                 design.beta0, config.n_mc_c, c_seed, true);
  }

  StudyReport report;
  report.config = config;
  report.beta0 = design.beta0;
  report.true_zeros = design.true_zeros;
  report.records.resize(config.replications);

  int n_threads = config.threads > 0
                      ? config.threads
                      : static_cast<int>(std::thread::hardware_concurrency());
  n_threads = std::clamp(n_threads, 1, config.replications);

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int rep = next.fetch_add(1);
      if (rep >= config.replications) return;
      try {
        report.records[rep] = design.semipar
                                  ? run_semipar_rep(design, config, ctx, rep)
                                  : run_parametric_rep(design, config, ctx, rep);
      } catch (const std::exception& err) {
        RepRecord failed;
        failed.rep = rep;
        failed.failed = true;
        failed.error = err.what();
        report.records[rep] = std::move(failed);
      }
    }
  };
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& rec : report.records)
    if (rec.failed) ++report.failures;
  if (report.failures * 5 > config.replications)
    throw StudyAborted(std::to_string(report.failures) + " of " +
                       std::to_string(config.replications) +
                       " replications failed");
  return report;
}

StudyReport::CritSummary StudyReport::summary(Criterion crit) const {
  CritSummary s;
  s.criterion = crit;
  const int d = static_cast<int>(beta0.size());
  std::vector<double> rames, rames_w;
  std::vector<std::vector<double>> betas(d), ses(d);
  double c_sum = 0.0, e_sum = 0.0;
  for (const auto& rec : records) {
    if (rec.failed) continue;
    for (const auto& res : rec.results) {
      if (res.criterion != crit) continue;
      ++s.count;
      if (std::isfinite(res.rame)) rames.push_back(res.rame);
      if (std::isfinite(res.rame_w)) rames_w.push_back(res.rame_w);
      c_sum += res.c_zeros;
      e_sum += res.e_zeros;
      for (int j = 0; j < d; ++j) {
        betas[j].push_back(res.beta(j));
        if (std::isfinite(res.se(j))) ses[j].push_back(res.se(j));
      }
    }
  }
  if (s.count == 0) return s;
  s.rame_median = median(rames);
  s.rame_mad = mad_scaled(rames);
  s.rame_w_median = median(rames_w);
  s.rame_w_mad = mad_scaled(rames_w);
  s.mean_c = c_sum / s.count;
  s.mean_e = e_sum / s.count;
  s.bias.resize(d);
  s.sd.resize(d);
  s.se_mean.resize(d);
  s.se_sd.resize(d);
  for (int j = 0; j < d; ++j) {
    const auto& b = betas[j];
    double mean = 0.0;
    for (double v : b) mean += v;
    mean /= b.size();
    double var = 0.0;
    for (double v : b) var += (v - mean) * (v - mean);
    var = b.size() > 1 ? var / (b.size() - 1) : 0.0;
    s.bias(j) = mean - beta0(j);
    s.sd(j) = std::sqrt(var);
    const auto& e = ses[j];
    if (e.empty()) {
      s.se_mean(j) = std::numeric_limits<double>::quiet_NaN();
      s.se_sd(j) = std::numeric_limits<double>::quiet_NaN();
    } else {
      double semean = 0.0;
      for (double v : e) semean += v;
      semean /= e.size();
      double sevar = 0.0;
      for (double v : e) sevar += (v - semean) * (v - semean);
      sevar = e.size() > 1 ? sevar / (e.size() - 1) : 0.0;
      s.se_mean(j) = semean;
      s.se_sd(j) = std::sqrt(sevar);
    }
  }
  return s;
}

std::string StudyReport::raw_csv() const {
  const int d = static_cast<int>(beta0.size());
  std::ostringstream out;
  out << "rep,criterion,lambda,converged,rame,rame_w,c_zeros,e_zeros";
  for (int j = 0; j < d; ++j) out << ",beta_" << j;
  for (int j = 0; j < d; ++j) out << ",se_" << j;
  out << ",failed,error\n";
  for (const auto& rec : records) {
    if (rec.failed) {
      out << rec.rep << ",,,,,,,";
      for (int j = 0; j < 2 * d; ++j) out << ',';
      out << ",1," << csv_escape(rec.error) << "\n";
      continue;
    }
    for (const auto& res : rec.results) {
      out << rec.rep << ',' << criterion_name(res.criterion) << ','
          << format_double(res.lambda) << ',' << (res.converged ? 1 : 0) << ','
          << format_double(res.rame) << ',' << format_double(res.rame_w) << ','
          << format_double(res.c_zeros) << ',' << format_double(res.e_zeros);
      for (int j = 0; j < d; ++j) out << ',' << format_double(res.beta(j));
      for (int j = 0; j < d; ++j)
        out << ','
            << (std::isfinite(res.se(j)) ? format_double(res.se(j)) : "NA");
      out << ",0,\n";
    }
  }
  return out.str();
}

std::string StudyReport::table_markdown() const {
  char buf[256];
  std::ostringstream out;
  out << "# " << config.design << " study: n=" << config.n
      << ", replications=" << config.replications << " (" << failures
      << " failed), seed=" << config.seed << "\n";
  out << "# rng=" << Rng::generator_name() << "\n\n";
  out << "| criterion | RAME median (MAD) | RAME_W median (MAD) | C | E |\n";
  out << "|---|---|---|---|---|\n";
  for (Criterion crit : config.criteria) {
    if (crit == Criterion::EE) continue;
    const CritSummary s = summary(crit);
    std::snprintf(buf, sizeof(buf),
                  "| %s | %.3f (%.3f) | %.3f (%.3f) | %.3f | %.3f |\n",
                  criterion_name(crit), s.rame_median, s.rame_mad,
                  s.rame_w_median, s.rame_w_mad, s.mean_c, s.mean_e);
    out << buf;
  }
  out << "\n| criterion | coefficient | bias (SD) | SE (Std(SE)) |\n";
  out << "|---|---|---|---|\n";
  // the first two nonzero-truth coefficients, as in the reference tables
  std::vector<int> shown;
  for (int j = 0; j < beta0.size() && shown.size() < 2; ++j)
    if (beta0(j) != 0.0) shown.push_back(j);
  for (Criterion crit : config.criteria) {
    const CritSummary s = summary(crit);
    if (s.count == 0) continue;
    for (int j : shown) {
      std::snprintf(buf, sizeof(buf),
                    "| %s | beta_%d | %.3f (%.3f) | %.3f (%.3f) |\n",
                    criterion_name(crit), j, s.bias(j), s.sd(j), s.se_mean(j),
                    s.se_sd(j));
      out << buf;
    }
  }
  return out.str();
}

}  // namespace mevs
