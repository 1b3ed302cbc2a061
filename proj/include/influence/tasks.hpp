#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "influence/influence.hpp"

namespace influence {

// Held-out index sets. With folds * k <= n the folds are disjoint slices of
// one seeded permutation (k = 1, folds = n is exact leave-one-out); otherwise
// each fold draws its own seeded subset without replacement. Each fold is
// sorted.
std::vector<std::vector<std::size_t>> sample_folds(std::size_t n, std::size_t k, std::size_t folds,
                                                   std::uint64_t seed);

// Mean loss over the given rows.
double heldout_loss(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                    std::span<const std::size_t> rows);

struct CvResult {
  double estimate = 0.0;
  std::vector<double> per_fold;
  std::vector<std::vector<std::size_t>> folds;
};

using ParamEstimator = std::function<ParamVector(const WeightVector&)>;

// Plug-in cross-validation: for each fold, theta_tilde of the leave-k-out
// weights, scored on the held-out rows; averaged over folds.
CvResult acv(InfluenceEngine& engine, std::size_t k, std::size_t folds, std::uint64_t seed);
CvResult acv(const InfluenceProblem& problem, std::size_t k, std::size_t folds, std::uint64_t seed,
             const ParamEstimator& estimator);

struct NoiseRequest {
  double epsilon = 1.0;
  double delta = 0.05;
  BoundConstants constants;
  std::uint64_t seed = 0;
};

struct UnlearnRequest {
  std::vector<std::size_t> removed;
  std::optional<NoiseRequest> noise;
};

struct UnlearnResult {
  ParamVector theta;            // released parameters
  ParamVector theta_noiseless;  // theta_tilde(w)
  double noise_variance = 0.0;  // c; zeta ~ N(0, c I)
};

UnlearnResult unlearn(InfluenceEngine& engine, const UnlearnRequest& request);

// Predicted change of l(z_test) when z_i is removed:
//   <grad l_test, theta_tilde(1^{n\i}) - theta_hat> = (1/n) grad l_test^T A^{-1} grad l_i
// where A is the engine's linearized curvature. One solve for all i.
Vector attribution_scores(InfluenceEngine& engine, const ConstVectorRef& x_test, double y_test);
// Same score for one i, solving A^{-1} grad l_i instead.
double attribution_score(InfluenceEngine& engine, const ConstVectorRef& x_test, double y_test, std::size_t i);

enum class FairnessMetric { kDemographicParity, kChiSquare };
FairnessMetric parse_fairness_metric(std::string_view name);
std::string to_string(FairnessMetric m);

struct FairnessSpec {
  FairnessMetric metric = FairnessMetric::kDemographicParity;
  int bins = 10;

  void validate() const;
};

struct MetricValue {
  double value = 0.0;
  bool degenerate = false;  // binning collapsed to one output bin
  std::optional<ParamVector> gradient;
};

// |mean(r | s = 0) - mean(r | s = 1)|; s must take values in {0, 1}.
double dp_from_outputs(const Vector& outputs, const Vector& sensitive);
// chi^2 of the (output bin, s bin) table against the product of its marginals.
double chi2_from_outputs(const Vector& outputs, const Vector& sensitive, int bins, bool* degenerate = nullptr);
// Quantile edges, deduplicated; value v goes to bin #{edges e : e < v}.
std::vector<double> quantile_edges(const Vector& values, int bins);

// head.reduce_output of every training row.
Vector reduced_outputs(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                       PassCounter* counter = nullptr);

MetricValue dp_metric(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                      bool with_gradient = false, PassCounter* counter = nullptr);
// The value is the hard-binned estimate. The gradient is that of a soft-binned
// relaxation with logistic memberships around the same edges.
MetricValue chi2_metric(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                        int bins = 10, bool with_gradient = false, PassCounter* counter = nullptr);
MetricValue fairness_metric(const FairnessSpec& spec, const Model& model, const ExpFamilyHead& head,
                            const Dataset& data, const ParamVector& theta, bool with_gradient = false,
                            PassCounter* counter = nullptr);

struct FairnessResult {
  // influence_i = -<grad T(theta_hat), theta_tilde(1^{n\i}) - theta_hat>: how
  // much the presence of z_i raises the metric.
  Vector influence;
  std::vector<std::size_t> selected;  // influence > 0
  ParamVector theta_after;
  double metric_before = 0.0;
  double metric_after = 0.0;
  double perf_before = 0.0;
  double perf_after = 0.0;
  bool degenerate = false;
};

FairnessResult fairness_pipeline(InfluenceEngine& engine, const FairnessSpec& spec);

}  // namespace influence
