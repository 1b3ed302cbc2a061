#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>

#include "influence/data.hpp"
#include "influence/exp_family.hpp"
#include "influence/nn.hpp"

namespace influence {

enum class CurvatureKind { kFisher, kHessian };

std::string to_string(CurvatureKind kind);
CurvatureKind parse_curvature_kind(std::string_view name);

// Matrix-free symmetric operator
//
//   A v = (1/n) sum_i w_i A_i v + (reg + damping + shift) v
//
// with A_i = J_i^T (f-Hessian) J_i for the approximate Fisher and the full
// per-sample loss Hessian for the Hessian kind. Weights default to one.
// The Fisher kind never carries a regularizer term; the Hessian kind can
// carry lambda * grad^2 pi as a constant diagonal (regularizer_diagonal).
// The shift is a solver-level diagonal, e.g. the 2 lambda of a prox step.
//
// The operator references the dataset; it must outlive the operator.
class CurvatureOperator {
 public:
  CurvatureOperator(CurvatureKind kind, Model model, ExpFamilyHead head, const Dataset& data, ParamVector theta,
                    std::shared_ptr<PassCounter> counter = nullptr);

  CurvatureOperator& set_damping(double eps);
  CurvatureOperator& set_regularizer_diagonal(double diag);
  CurvatureOperator& set_weights(Vector weights);
  CurvatureOperator& set_shift(double shift);

  CurvatureKind kind() const { return kind_; }
  Eigen::Index dim() const { return theta_.size(); }
  std::size_t sample_count() const { return data_->size(); }
  double damping() const { return damping_; }
  double regularizer_diagonal() const { return reg_diag_; }
  double shift() const { return shift_; }
  double diagonal() const { return damping_ + reg_diag_ + shift_; }
  const Model& model() const { return model_; }
  const ExpFamilyHead& head() const { return head_; }
  const Dataset& data() const { return *data_; }
  const ParamVector& theta() const { return theta_; }
  const std::optional<Vector>& weights() const { return weights_; }
  PassCounter* counter() const { return counter_.get(); }
  std::shared_ptr<PassCounter> shared_counter() const { return counter_; }

  // Full-batch matvec; deterministic.
  Vector apply(const Vector& v) const;
  // Minibatch estimate (1/|B|) sum_{i in B} w_i A_i v + (diag terms) v.
  Vector apply_batch(const Vector& v, std::span<const std::size_t> batch) const;
  // A_i v for a single sample, without the diagonal terms.
  Vector apply_sample(std::size_t i, const Vector& v) const;
  // Dense A, one basis vector per column. Symmetrized.
  Matrix materialize() const;

 private:
  void check_direction(const Vector& v) const;

  CurvatureKind kind_;
  Model model_;
  ExpFamilyHead head_;
  const Dataset* data_;
  ParamVector theta_;
  std::shared_ptr<PassCounter> counter_;
  std::optional<Vector> weights_;
  double damping_ = 0.0;
  double reg_diag_ = 0.0;
  double shift_ = 0.0;
};

inline constexpr std::size_t kDefaultDenseCap = 2000;

// Factorizes a materialized curvature matrix once and solves repeatedly.
// Throws NumericalError with a reciprocal-condition report if the matrix
// is numerically singular.
class DenseSolver {
 public:
  explicit DenseSolver(const CurvatureOperator& op, std::size_t cap = kDefaultDenseCap);
  explicit DenseSolver(Matrix a);

  Vector solve(const Vector& rhs) const;
  const Matrix& matrix() const { return a_; }
  double rcond() const { return rcond_; }

 private:
  void factorize();
  Matrix a_;
  Eigen::LDLT<Matrix> ldlt_;
  double rcond_ = 0.0;
};

// (A + damping I)^{-1} x with the damping already set on the operator.
// Residual ||A v - x|| <= 1e-8 ||x|| after one refinement step.
Vector dense_solve(const CurvatureOperator& op, const Vector& x, std::size_t cap = kDefaultDenseCap);

struct LissaConfig {
  double scale = 1.0 / 500.0;  // sigma
  int depth = 2000;            // N
  int repetitions = 3;         // R
  std::size_t batch_size = 0;  // 0: full batch for n <= 4096, else 512
  std::uint64_t seed = 0;

  void validate() const;
};

std::size_t default_lissa_batch(std::size_t n);

struct LissaResult {
  Vector solution;
  int depth = 0;
  int repetitions = 0;
  bool full_batch = true;
  std::size_t batch_size = 0;
};

inline constexpr double kLissaDivergenceThreshold = 1e12;

// Truncated Neumann series: v_0 = x, v_j = x + (I - sigma A) v_{j-1},
// estimate sigma v_N, averaged over R recursions. Each stochastic step draws
// its own batch uniformly with replacement. The observer, if set, sees
// (j, sigma v_j) for the first repetition.
LissaResult lissa_solve(const CurvatureOperator& op, const Vector& x, const LissaConfig& cfg,
                        const std::function<void(int, const Vector&)>& observer = {});

// max |1 - sigma lambda| over the spectrum of a symmetric A; the recursion
// contracts iff this is < 1.
double lissa_contraction_factor(const Matrix& a, double scale);

}  // namespace influence
