#pragma once

#include <stdexcept>
#include <string>

namespace mevs {

// Base for all library failures so callers can catch one type.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

// Observed-data likelihood underflowed to zero at one observation.
struct DegenerateLikelihood : Error {
  long obs_index;
  DegenerateLikelihood(long idx, const std::string& msg)
      : Error("degenerate likelihood at observation " + std::to_string(idx) +
              ": " + msg),
        obs_index(idx) {}
};

// Discretized integral-equation kernel stayed singular after ridge escalation.
struct SingularKernel : Error {
  double condition_estimate;
  SingularKernel(double cond, const std::string& msg)
      : Error("singular integral-equation kernel (cond~" +
              std::to_string(cond) + "): " + msg),
        condition_estimate(cond) {}
};

struct SingularBread : Error {
  explicit SingularBread(const std::string& msg)
      : Error("singular (E - Sigma_lambda): " + msg) {}
};

struct SingularInfo : Error {
  explicit SingularInfo(const std::string& msg)
      : Error("singular (I + Sigma_lambda): " + msg) {}
};

struct SingularOmega : Error {
  explicit SingularOmega(const std::string& msg)
      : Error("singular Omega(z): " + msg) {}
};

struct EmptyWindow : Error {
  double z_target;
  EmptyWindow(double z, const std::string& msg)
      : Error("empty kernel window at z=" + std::to_string(z) + ": " + msg),
        z_target(z) {}
};

struct DfSaturated : Error {
  explicit DfSaturated(const std::string& msg)
      : Error("df >= n: " + msg) {}
};

struct AllFitsFailed : Error {
  explicit AllFitsFailed(const std::string& msg)
      : Error("no lambda produced a converged fit: " + msg) {}
};

// More than 20% of study replications failed.
struct StudyAborted : Error {
  explicit StudyAborted(const std::string& msg)
      : Error("study aborted: " + msg) {}
};

}  // namespace mevs
