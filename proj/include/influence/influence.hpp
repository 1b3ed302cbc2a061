#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "influence/curvature.hpp"

namespace influence {

// Per-sample weights of the weighted objective
//   L(theta; w) = (1/n) sum_i w_i l(z_i, theta) + lambda pi(theta).
class WeightVector {
 public:
  explicit WeightVector(Vector values);

  static WeightVector all_ones(std::size_t n);
  static WeightVector leave_one_out(std::size_t n, std::size_t i);
  static WeightVector leave_k_out(std::size_t n, std::span<const std::size_t> removed);

  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }
  const Vector& values() const { return values_; }
  double operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }
  bool is_all_ones() const;

 private:
  Vector values_;
};

struct Regularizer {
  enum class Kind { kNone, kL2, kL1 };
  Kind kind = Kind::kNone;
  double lambda = 0.0;

  static Regularizer none() { return {}; }
  static Regularizer l2(double lambda);
  static Regularizer l1(double lambda);
  // "none", "l2:<lambda>", "l1:<lambda>"
  static Regularizer parse(std::string_view text);
  std::string to_string() const;

  bool active() const { return kind != Kind::kNone && lambda > 0.0; }
  bool smooth() const { return kind != Kind::kL1; }
  // pi(theta): ||theta||^2 for L2, ||theta||_1 for L1.
  double pi(const ParamVector& theta) const;
  // lambda * pi(theta)
  double value(const ParamVector& theta) const;
  // lambda * grad pi; for L1 the minimum-norm subgradient at zero coordinates.
  ParamVector gradient(const ParamVector& theta) const;
  // lambda * grad^2 pi = 2 lambda for L2, 0 otherwise.
  double curvature() const;
};

// Everything that defines theta_hat(1): the fitted model and its training set.
struct InfluenceProblem {
  Model model;
  ExpFamilyHead head;
  const Dataset* data = nullptr;
  ParamVector theta_hat;
  Regularizer reg;
  std::shared_ptr<PassCounter> counter = std::make_shared<PassCounter>();

  InfluenceProblem(Model model, ExpFamilyHead head, const Dataset& data, ParamVector theta_hat,
                   Regularizer reg = {}, std::shared_ptr<PassCounter> counter = nullptr);
  std::size_t n() const { return data->size(); }
  Eigen::Index d() const { return theta_hat.size(); }
};

// Where the curvature matrix is evaluated. Full is C(theta_hat, 1) over all n
// samples. Reweighted uses the retained weights, C(theta_hat, w); this is the
// exact Newton step of the reweighted objective and costs one operator per w.
enum class CurvatureScope { kFull, kReweighted };

struct SolverConfig {
  enum class Method { kAuto, kDense, kLissa };
  Method method = Method::kAuto;
  LissaConfig lissa;
  double damping = 0.0;
  // Retry a singular dense factorization with eps = 1e-3 trace(A) / d.
  bool auto_damping = true;
  CurvatureScope scope = CurvatureScope::kFull;
  std::size_t dense_cap = kDefaultDenseCap;

  static Method parse_method(std::string_view name);
};

std::string to_string(SolverConfig::Method m);

// (1/n) sum_i grad l(z_i, theta) (w_i - 1)
ParamVector b_vector(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                     const WeightVector& w, PassCounter* counter = nullptr);

// (1/n) sum_i w_i grad l(z_i, theta); all-ones weights when w is null.
ParamVector data_gradient(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                          const ParamVector& theta, const WeightVector* w = nullptr, PassCounter* counter = nullptr);

// Solves (A + shift I) v = x for one curvature operator, reusing the dense
// factorization across calls.
class CurvatureSolver {
 public:
  CurvatureSolver(const InfluenceProblem& problem, CurvatureKind kind, const SolverConfig& cfg,
                  const WeightVector* weights = nullptr, double shift = 0.0);

  Vector solve(const Vector& x);
  // A + damping I + shift I, materialized. Dense method only.
  const Matrix& dense_matrix();
  const CurvatureOperator& op() const { return op_; }
  bool dense() const { return dense_; }
  double damping() const { return op_.damping(); }
  double shift() const { return shift_; }
  int lissa_iterations() const { return lissa_iterations_; }

 private:
  void factorize();

  CurvatureOperator op_;
  SolverConfig cfg_;
  double shift_;
  bool dense_;
  std::optional<Matrix> matrix_;
  std::unique_ptr<DenseSolver> factor_;
  int lissa_iterations_ = 0;
};

// theta_hat - A^{-1} b, with A = F (kind fisher) or H(theta_hat, 1) plus
// lambda grad^2 pi when pi is smooth (kind hessian).
ParamVector second_order_estimate(CurvatureSolver& solver, const ParamVector& theta_hat, const ParamVector& b);

// argmin_theta (v - theta)^T D (v - theta) + 2 lambda pi(theta).
// D is symmetric PSD; a null D means the identity. Throws NumericalError on a
// nonpositive diagonal entry.
ParamVector prox(const Matrix* metric, const Regularizer& reg, const ParamVector& v);
// Same minimization by cyclic coordinate descent for both L1 and L2,
// stopping when the objective decrease falls below tol.
ParamVector prox_coordinate_descent(const Matrix& metric, const Regularizer& reg, const ParamVector& v,
                                    double tol = 1e-10, int max_sweeps = 100000);
// Componentwise sign(v) max(|v| - t, 0).
ParamVector soft_threshold(const ParamVector& v, double t);

// Approximate leave-out parameters theta_tilde(w) for one fitted problem.
//
// kind fisher: prox under F of the Fisher Newton step. The quadratic model
// uses the weighted data gradient at theta_hat as its linear term, so it is
// the raw AFIF theta_hat - F^{-1} b when reg is none.
// kind hessian: the infinitesimal jackknife theta_hat - H^{-1} b, with the
// same prox route when the regularizer is L1.
//
// With CurvatureScope::kFull the factorization is shared across calls.
class InfluenceEngine {
 public:
  InfluenceEngine(const InfluenceProblem& problem, CurvatureKind kind, SolverConfig cfg = {});

  ParamVector estimate(const WeightVector& w);
  // Raw Newton step without the prox, for diagnostics.
  ParamVector newton_step(const WeightVector& w);

  // Solve with the curvature matrix that maps -b to theta_tilde - theta_hat:
  // A + 2 lambda I for L2, A otherwise.
  Vector solve_linearized(const Vector& x);

  const InfluenceProblem& problem() const { return *problem_; }
  CurvatureKind kind() const { return kind_; }
  const SolverConfig& config() const { return cfg_; }
  const ParamVector& data_grad();
  CurvatureSolver& shared_solver();

 private:
  std::unique_ptr<CurvatureSolver> make_solver(const WeightVector* w) const;
  ParamVector estimate_with(CurvatureSolver& solver, const WeightVector& w, bool apply_prox);

  const InfluenceProblem* problem_;
  CurvatureKind kind_;
  SolverConfig cfg_;
  std::unique_ptr<CurvatureSolver> shared_;
  std::optional<ParamVector> data_grad_;
};

enum class EstimatorMode { kPlugin, kLinearized };
std::string to_string(EstimatorMode mode);

// plugin: T(theta_tilde). linearized: T(theta_hat) + <grad T(theta_hat), theta_tilde - theta_hat>.
double influence_estimate(EstimatorMode mode, const std::function<double(const ParamVector&)>& objective,
                          const ParamVector& theta_hat, const ParamVector& theta_tilde,
                          const ParamVector* grad_at_theta_hat = nullptr);
// Vector objectives; the linearized form takes the m x d Jacobian of T.
Vector influence_estimate(EstimatorMode mode, const std::function<Vector(const ParamVector&)>& objective,
                          const ParamVector& theta_hat, const ParamVector& theta_tilde,
                          const Matrix* jacobian_at_theta_hat = nullptr);

// Assumption constants. Unset entries make the bounds that need them throw.
struct BoundConstants {
  std::optional<double> mu;        // strong convexity
  std::optional<double> M;         // Hessian Lipschitz
  std::optional<double> C_f;       // feature Lipschitz
  std::optional<double> C_f_tilde; // feature-gradient Lipschitz
  double Q = 1.0;                  // f-Hessian operator norm bound
  std::optional<double> C_T1;
  std::optional<double> C_T2;
  std::optional<double> G;         // uniform gradient bound
  std::optional<double> L;
  std::optional<double> C;
  std::map<std::pair<int, int>, double> B;  // B_sr moments

  double require(const std::optional<double>& v, const char* name) const;
  double moment(int s, int r) const;

  nlohmann::json to_json() const;
  static BoundConstants from_json(const nlohmann::json& j);
};

enum class BoundKind { kLemma1, kThm1Plugin, kThm1Taylor, kCor1, kCor2, kCor3Plugin, kCor3Taylor, kCor4, kNoiseScale };
BoundKind parse_bound_kind(std::string_view name);

struct BoundInputs {
  std::size_t n = 0;
  double g_tilde = 0.0;  // ||grad l(z_i, theta_hat)||
  double ebar = 0.0;     // sum_j ||t(y_j) - E[t]||
  double c_ell = 0.0;    // max_i g_tilde_i
  double epsilon = 0.0;
  double delta = 0.0;
};

double lemma1_bound(const BoundConstants& c, std::size_t n, double g_tilde, double ebar);
double bound_evaluator(BoundKind which, const BoundConstants& c, const BoundInputs& in);

struct SolverStats {
  std::string solver;  // "dense" or "lissa"
  double damping = 0.0;
  int lissa_iterations = 0;
  PassCounts passes;
  double wall_time_s = 0.0;
};

struct InfluenceReport {
  std::string method;     // fisher | hessian
  std::string estimator;  // plugin | linearized
  std::vector<std::size_t> index;
  std::vector<double> influence;
  std::vector<double> g;  // g_tilde_i / n
  double ebar = 0.0;
  SolverStats stats;

  // Deterministic fields only; wall time is left out.
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

}  // namespace influence
