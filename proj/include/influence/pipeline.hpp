#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "influence/influence.hpp"
#include "influence/tasks.hpp"

namespace influence {

struct CsvOptions {
  std::string label_column = "y";
  std::optional<std::string> sensitive_column;
  bool standardize = true;
};

// Header row required. Non-numeric feature columns are one-hot encoded;
// non-numeric label or sensitive columns become codes in sorted order. A column
// mixing numbers and text is a ParseError naming the row and column.
Dataset parse_csv(std::istream& in, const CsvOptions& opts);
Dataset load_csv(const std::string& path, const CsvOptions& opts);
void write_csv(std::ostream& out, const Dataset& data);
void write_csv(const std::string& path, const Dataset& data);

// Per-column mean 0, std 1 (population std); constant columns are only centered.
void standardize(Dataset& data);

// Two Gaussian blobs at +-sep/2 along the all-ones direction; labels 0/1.
Dataset make_blobs(std::size_t n, int dim, double sep, std::uint64_t seed);
// y = w^T x + noise * N(0, 1) with w_j = 1 / sqrt(dim).
Dataset make_linear_regression(std::size_t n, int dim, double noise, std::uint64_t seed);

// Biased groups. s ~ Bernoulli(1/2). The first dim-1 features u ~ N(0, I) are
// independent of s; the last is a proxy (2s - 1) + N(0, 1). The clean label is
// 1[w^T u + 0.5 N(0, 1) > 0] with w_j = 1 / sqrt(dim - 1); with probability
// `bias` it is replaced by s.
Dataset make_biased_groups(std::size_t n, int dim, double bias, std::uint64_t seed);
inline constexpr double kBiasedLabelNoise = 0.5;

// "synthetic:<blobs|linear|biased>[:key=value,...]" or a CSV path. Synthetic
// keys: n, d, sep, noise, bias, seed. The data seed defaults to `seed`.
Dataset load_dataset(const std::string& spec, const CsvOptions& opts, std::uint64_t seed);

struct TrainConfig {
  double learning_rate = 1e-4;
  int epochs = 100;
  std::size_t batch_size = 100;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Adam with decoupled weight decay: theta <- theta - lr wd theta, then the
// adaptive step.
class AdamW {
 public:
  AdamW(Eigen::Index dim, const TrainConfig& cfg);
  void step(ParamVector& theta, const ParamVector& grad);
  long steps() const { return t_; }

 private:
  TrainConfig cfg_;
  Vector m_;
  Vector v_;
  long t_ = 0;
};

struct TrainResult {
  ParamVector theta;
  std::vector<double> loss_curve;  // mean training loss, entry 0 before training
};

// Minibatch AdamW on the mean loss, reshuffling each epoch with the seed.
// Starts from `init` or model.init_params(seed). Throws TrainingDiverged on a
// non-finite loss.
TrainResult train(const Model& model, const ExpFamilyHead& head, const Dataset& data, const TrainConfig& cfg,
                  const std::optional<ParamVector>& init = std::nullopt);

enum class Task { kTrain, kCv, kUnlearn, kAttribute, kFairness };
Task parse_task(std::string_view name);
std::string to_string(Task t);

struct ExperimentConfig {
  Task task = Task::kTrain;
  std::vector<CurvatureKind> methods = {CurvatureKind::kFisher};
  Model model = Model::linear(1, 1);
  ExpFamilyHead head = ExpFamilyHead::gaussian();
  std::string data = "synthetic:biased";
  std::optional<std::string> sensitive_column;
  std::string label_column = "y";
  Regularizer reg;
  SolverConfig solver;
  TrainConfig train;
  // Refine theta_hat to a stationary point of the regularized objective.
  bool polish = false;
  std::uint64_t seed = 0;

  std::size_t cv_k = 0;  // 0: 20% of n
  std::size_t cv_folds = 5;
  std::vector<std::size_t> unlearn_indices;
  std::optional<NoiseRequest> noise;
  std::size_t test_index = 0;
  FairnessSpec fairness;

  // Method-specific fields only; replaying this snapshot reproduces the run.
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct ExperimentResult {
  std::string method;
  std::string task;
  std::map<std::string, double> metrics;
  PassCounts passes;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  nlohmann::json config;
  nlohmann::json details;
  // index,value[,g] rows for influences.csv
  std::vector<std::pair<std::size_t, double>> table;

  // Everything except the wall time, so identical runs serialize identically.
  nlohmann::json to_json() const;
};

struct FittedModel {
  ParamVector theta;
  std::vector<double> loss_curve;
};

FittedModel fit(const ExperimentConfig& cfg, const Dataset& data);

// Trains (or takes theta_hat), then runs the task once per method with a fresh
// pass counter. Methods run in the listed order with identical seeds.
std::vector<ExperimentResult> run_experiment(const ExperimentConfig& cfg, const Dataset& data,
                                             const std::optional<ParamVector>& theta_hat = std::nullopt);

std::string results_json(const std::vector<ExperimentResult>& results);
std::string timing_json(const std::vector<ExperimentResult>& results);
std::string influences_csv(const std::vector<ExperimentResult>& results);
std::string report_markdown(const std::vector<ExperimentResult>& results);

}  // namespace influence
