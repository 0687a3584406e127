#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mevs/evaluation.hpp"
#include "mevs/kernel.hpp"
#include "mevs/model.hpp"
#include "mevs/semipar.hpp"
#include "mevs/solver.hpp"
#include "mevs/tuning.hpp"

namespace mevs {

// A simulation design: the model to fit, the generating truth, and a fresh
// covariate sampler for the model-error matrices.
struct SimDesign {
  std::string name;
  MEModelSpec model;      // parametric model over (w, z)
  Eigen::VectorXd beta0;
  std::vector<int> true_zeros;
  bool semipar = false;
  std::function<double(double)> theta_fn;  // true theta(zs), semipar only
  DesignSampler sampler;
  double sigma_u = 0.1;
};

SimDesign example1_design(double sigma_u = 0.1, QuadratureSettings quad = {});
SimDesign example2_design(double sigma_u = 0.1, QuadratureSettings quad = {});
SimDesign framingham_like_design(double sigma_u = std::sqrt(0.0126),
                                 QuadratureSettings quad = {});
SimDesign design_by_name(const std::string& name, double sigma_u,
                         QuadratureSettings quad = {});
// Names accepted by design_by_name.
std::vector<std::string> known_designs();

// Draw order is fixed per observation (x, error-free covariates, u, y), so
// a given seed reproduces bit-identical data sets.
Dataset gen_example1(long n, std::uint64_t seed, double sigma_u = 0.1);
Dataset gen_example2(long n, std::uint64_t seed, double sigma_u = 0.1);
Dataset gen_framingham_like(long n, std::uint64_t seed,
                            double sigma_u = std::sqrt(0.0126));
Dataset gen_dataset(const SimDesign& design, long n, std::uint64_t seed);

struct StudyConfig {
  std::string design = "example1";
  long n = 1000;
  int replications = 200;
  std::vector<Criterion> criteria = {Criterion::EE, Criterion::GCV,
                                     Criterion::BIC};
  std::uint64_t seed = 1;
  int lambda_points = 25;
  double lambda_lo_frac = 1e-3;
  double scad_a = 3.7;
  PenaltyFamily penalty_family = PenaltyFamily::SCAD;
  double sigma_u = -1.0;  // <0: design default
  long n_mc_c = 100000;   // Monte Carlo size for C_X / C_W
  std::string cache_dir;  // optional on-disk C cache
  int threads = 0;        // 0 = hardware concurrency
  KernelFamily kernel_family = KernelFamily::Quartic;
  double bandwidth = 0.0;  // 0 = 1.2 sd(z) n^(-1/3)
  QuadratureSettings quad;
  SolverConfig solver;
  SemiparOptions semipar;

  void validate() const;
};

struct CritRecord {
  Criterion criterion = Criterion::EE;
  double lambda = 0.0;
  bool converged = false;
  double rame = 0.0;
  double rame_w = 0.0;
  double c_zeros = 0.0;
  double e_zeros = 0.0;
  Eigen::VectorXd beta;
  Eigen::VectorXd se;  // NaN where undefined (inactive coordinates)
};

struct RepRecord {
  int rep = 0;
  bool failed = false;
  std::string error;
  std::vector<CritRecord> results;
};

struct StudyReport {
  StudyConfig config;
  Eigen::VectorXd beta0;
  std::vector<int> true_zeros;
  std::vector<RepRecord> records;
  int failures = 0;

  struct CritSummary {
    Criterion criterion;
    int count = 0;
    double rame_median = 0.0, rame_mad = 0.0;
    double rame_w_median = 0.0, rame_w_mad = 0.0;
    double mean_c = 0.0, mean_e = 0.0;
    Eigen::VectorXd bias, sd, se_mean, se_sd;  // per coefficient
  };
  CritSummary summary(Criterion c) const;

  std::string raw_csv() const;
  std::string table_markdown() const;
};

// Generate-fit-tune-evaluate over independent replications; failed
// replications are recorded and skipped, and the study aborts when more than
// 20% of them fail.
StudyReport run_study(const StudyConfig& config);

double median(std::vector<double> values);
// median absolute deviation divided by 0.6745
double mad_scaled(const std::vector<double>& values);

}  // namespace mevs
