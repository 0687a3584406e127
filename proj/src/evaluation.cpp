#include "mevs/evaluation.hpp"

#include <cmath>
#include <filesystem>
#include <limits>

#include "mevs/csv.hpp"
#include "mevs/errors.hpp"

namespace mevs {

namespace {
double mean_derivative(Family family, double eta) {
  if (family == Family::Logistic) {
    const double mu = sigmoid(eta);
    return mu * (1.0 - mu);
  }
  return 1.0;
}
}  // namespace

Eigen::MatrixXd estimate_C(const DesignSampler& sampler,
                           const DesignSpec& design, Family family,
                           const Eigen::VectorXd& beta0, long n_mc,
                           std::uint64_t seed, bool use_w) {
  if (n_mc < 1) throw ConfigError("estimate_C needs n_mc >= 1");
  const int d = design.dim();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, d);
  Rng rng(split_seed(seed, use_w ? 1 : 0));
  for (long i = 0; i < n_mc; ++i) {
    const DesignDraw draw = sampler(rng);
    const Eigen::VectorXd v =
        design.design_vector(use_w ? draw.w : draw.x, draw.z);
    const double eta = draw.theta + beta0.dot(v);
    const double g = mean_derivative(family, eta);
    acc.selfadjointView<Eigen::Lower>().rankUpdate(v, g * g);
  }
  Eigen::MatrixXd c = acc.selfadjointView<Eigen::Lower>();
  return c / static_cast<double>(n_mc);
}

Eigen::MatrixXd load_or_estimate_C(const std::string& cache_dir,
                                   const std::string& design_name,
                                   const DesignSampler& sampler,
                                   const DesignSpec& design, Family family,
                                   const Eigen::VectorXd& beta0, long n_mc,
                                   std::uint64_t seed, bool use_w) {
  namespace fs = std::filesystem;
  const std::string name = design_name + "_seed" + std::to_string(seed) +
                           "_mc" + std::to_string(n_mc) +
                           (use_w ? "_w" : "_x") + ".csv";
  const fs::path path = fs::path(cache_dir) / name;
  const int d = design.dim();
  if (fs::exists(path)) {
    const CsvTable table = read_csv(path.string());
    if (static_cast<int>(table.rows.size()) == d &&
        static_cast<int>(table.header.size()) == d) {
      Eigen::MatrixXd c(d, d);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) c(i, j) = table.num(i, j);
      return c;
    }
  }
  const Eigen::MatrixXd c =
      estimate_C(sampler, design, family, beta0, n_mc, seed, use_w);
  fs::create_directories(path.parent_path());
  CsvTable table;
  table.comments.push_back("# design=" + design_name +
                           " seed=" + std::to_string(seed) +
                           " n_mc=" + std::to_string(n_mc) +
                           " use_w=" + (use_w ? std::string("1") : "0"));
  for (int j = 0; j < d; ++j) table.header.push_back("c" + std::to_string(j));
  for (int i = 0; i < d; ++i) {
    std::vector<std::string> row;
    for (int j = 0; j < d; ++j) row.push_back(format_double(c(i, j)));
    table.rows.push_back(std::move(row));
  }
  write_csv(path.string(), table);
  return c;
}

double ame(const Eigen::VectorXd& beta_hat, const ErrorMetricContext& ctx,
           bool use_w) {
  const Eigen::VectorXd diff = beta_hat - ctx.beta0;
  const Eigen::MatrixXd& c = use_w ? ctx.c_w : ctx.c_x;
  return diff.dot(c * diff);
}

double rame(const FitResult& selected, const FitResult& full,
            const ErrorMetricContext& ctx, bool use_w) {
  const double denom = ame(full.beta, ctx, use_w);
  if (denom == 0.0) return std::numeric_limits<double>::infinity();
  return ame(selected.beta, ctx, use_w) / denom;
}

std::pair<double, double> count_zeros(const FitResult& fit,
                                      const std::vector<int>& true_zeros) {
  double correct = 0.0, erroneous = 0.0;
  for (int j = 0; j < fit.beta.size(); ++j) {
    if (fit.beta(j) != 0.0) continue;
    const bool is_true_zero =
        std::find(true_zeros.begin(), true_zeros.end(), j) != true_zeros.end();
    (is_true_zero ? correct : erroneous) += 1.0;
  }
  return {correct, erroneous};
}

}  // namespace mevs
