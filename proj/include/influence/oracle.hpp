#pragma once

#include <optional>
#include <string>
#include <vector>

#include "influence/influence.hpp"
#include "influence/tasks.hpp"

// Brute-force references. Nothing here touches the curvature operators or the
// influence estimators, except fd_check, whose job is to test them.
namespace influence::oracle {

struct RetrainConfig {
  double tolerance = 1e-10;  // on the (prox-)gradient norm
  int max_iterations = 200000;
  std::optional<ParamVector> warm_start;
  // Linear features + Gaussian head + smooth regularizer: solve the normal
  // equations instead of iterating.
  bool allow_closed_form = true;
};

struct RetrainResult {
  ParamVector theta;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool closed_form = false;
};

// (1/n) sum_i w_i l(z_i, theta) + lambda pi(theta)
double weighted_objective(const Model& model, const ExpFamilyHead& head, const Dataset& data, const WeightVector& w,
                          const Regularizer& reg, const ParamVector& theta);

// argmin of the weighted objective: gradient descent with backtracking line
// search (Barzilai-Borwein trial steps), proximal gradient for L1.
// Cold starts use zeros for linear models and init_params(0) otherwise.
RetrainResult retrain_detailed(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                               const WeightVector& w, const Regularizer& reg, const RetrainConfig& cfg = {});
ParamVector retrain(const Model& model, const ExpFamilyHead& head, const Dataset& data, const WeightVector& w,
                    const Regularizer& reg, const RetrainConfig& cfg = {});

// Retrains on every fold from sample_folds and scores the held-out rows.
CvResult exact_cv(const Model& model, const ExpFamilyHead& head, const Dataset& data, const Regularizer& reg,
                  std::size_t k, std::size_t folds, std::uint64_t seed, const RetrainConfig& cfg = {});

enum class FdTarget { kGrad, kJvp, kVjp, kHvp, kFisher };
FdTarget parse_fd_target(std::string_view name);
std::string to_string(FdTarget t);

struct FdReport {
  FdTarget target;
  double max_error = 0.0;  // relative, except fisher which is absolute
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

// Finite differences use central steps of 1e-4. Never throws on a mismatch.
FdReport fd_check(FdTarget target, const Model& model, const ExpFamilyHead& head, const Dataset& samples,
                  const ParamVector& theta, std::uint64_t seed = 0, std::optional<double> tolerance = std::nullopt);
std::vector<FdReport> fd_check_all(const Model& model, const ExpFamilyHead& head, const Dataset& samples,
                                   const ParamVector& theta, std::uint64_t seed = 0);

inline constexpr double kFdStep = 1e-4;

}  // namespace influence::oracle
