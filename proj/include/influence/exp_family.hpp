#pragma once

#include <vector>

#include "influence/data.hpp"
#include "influence/nn.hpp"

namespace influence {

// P(y | f) in an exponential family whose natural parameters are the model
// outputs f. log P = f^T t(y) - A(f) + beta(y).
//
//   categorical(k): t(y) = e_y, A(f) = logsumexp(f)
//   gaussian:       t(y) = y, unit variance, k = 1 (MSE up to a constant)
//
// The f-Hessian of -log P does not depend on y and has operator norm <= 1.
class ExpFamilyHead {
 public:
  enum class Kind { kCategorical, kGaussian };

  static ExpFamilyHead categorical(int classes);
  static ExpFamilyHead gaussian();

  Kind kind() const { return kind_; }
  int dim() const { return kind_ == Kind::kGaussian ? 1 : classes_; }
  int classes() const { return classes_; }
  // Bound on ||d^2/df^2 (-log P)||_op.
  double curvature_bound() const { return 1.0; }

  void validate_label(double y) const;
  void validate_output(const Vector& f) const;

  // -log P(y|f); the Gaussian drops 1/2 y^2 + log sqrt(2 pi).
  double nll(const Vector& f, double y) const;
  Vector natural_statistic(double y) const;
  // E_{P(.|f)}[t(y)]: softmax probabilities, or f itself.
  Vector mean_statistic(const Vector& f) const;
  // grad_f log P(y|f) = t(y) - E[t]
  Vector score(const Vector& f, double y) const;
  // -grad_f^2 log P(y|f) = Cov_{P(.|f)}[t(y)]
  Matrix f_hessian(const Vector& f) const;
  Vector f_hessian_apply(const Vector& f, const Vector& u) const;

  // Scalar summary of the output used by fairness metrics: the positive-class
  // probability for a 2-class categorical head (last class for k > 2), the raw
  // output for the Gaussian head.
  double reduce_output(const Vector& f) const;
  Vector reduce_output_gradient(const Vector& f) const;

  bool operator==(const ExpFamilyHead&) const = default;

  nlohmann::json to_json() const;
  static ExpFamilyHead from_json(const nlohmann::json& j);

 private:
  ExpFamilyHead(Kind kind, int classes) : kind_(kind), classes_(classes) {}
  Kind kind_;
  int classes_;
};

Vector softmax(const Vector& f);
double logsumexp(const Vector& f);

// Adapts a head and label to the OutputLoss interface used by Model::loss_hvp.
class HeadLoss final : public OutputLoss {
 public:
  HeadLoss(const ExpFamilyHead& head, double y) : head_(head), y_(y) {}
  Vector gradient(const Vector& f) const override { return -head_.score(f, y_); }
  Vector hessian_apply(const Vector& f, const Vector& u) const override {
    return head_.f_hessian_apply(f, u);
  }

 private:
  const ExpFamilyHead& head_;
  double y_;
};

// grad_theta l(z, theta) = -J^T score(f, y); a single reverse pass.
ParamVector loss_grad(const Model& model, const ExpFamilyHead& head, const ConstVectorRef& x, double y,
                      const ParamVector& theta, PassCounter* counter = nullptr);

double sample_loss(const Model& model, const ExpFamilyHead& head, const ConstVectorRef& x, double y,
                   const ParamVector& theta, PassCounter* counter = nullptr);

// (1/n) sum_i l(z_i, theta)
double mean_loss(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                 const ParamVector& theta, PassCounter* counter = nullptr);

struct LossRecord {
  double nll = 0.0;
  double gradient_norm = 0.0;  // ||grad_theta l(z_i, theta)||
  double residual_norm = 0.0;  // ||t(y_i) - E[t | f(x_i)]||
};

std::vector<LossRecord> loss_records(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                                     const ParamVector& theta, PassCounter* counter = nullptr);

// sum_j ||t(y_j) - E[t | f(x_j; theta)]||; zero iff every sample is
// predicted perfectly.
double ebar_n(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
              PassCounter* counter = nullptr);

// Fraction of argmax hits for categorical heads, mean squared error for the
// Gaussian head.
double performance(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                   const ParamVector& theta);

}  // namespace influence
