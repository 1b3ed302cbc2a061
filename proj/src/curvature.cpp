#include "influence/curvature.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "influence/errors.hpp"

namespace influence {

std::string to_string(CurvatureKind kind) { return kind == CurvatureKind::kFisher ? "fisher" : "hessian"; }

CurvatureKind parse_curvature_kind(std::string_view name) {
  if (name == "fisher") return CurvatureKind::kFisher;
  if (name == "hessian") return CurvatureKind::kHessian;
  throw InvalidInput("unknown curvature kind '" + std::string(name) + "'");
}

CurvatureOperator::CurvatureOperator(CurvatureKind kind, Model model, ExpFamilyHead head, const Dataset& data,
                                     ParamVector theta, std::shared_ptr<PassCounter> counter)
    : kind_(kind),
      model_(std::move(model)),
      head_(head),
      data_(&data),
      theta_(std::move(theta)),
      counter_(counter ? std::move(counter) : std::make_shared<PassCounter>()) {
  if (theta_.size() != model_.num_params()) throw InvalidInput("theta does not match model parameter count");
  if (head_.dim() != model_.output_dim()) throw InvalidInput("model output does not match head dimension");
  if (data_->size() == 0) throw InvalidInput("curvature needs a nonempty dataset");
}

CurvatureOperator& CurvatureOperator::set_damping(double eps) {
  if (!(eps >= 0.0)) throw InvalidInput("damping must be nonnegative");
  damping_ = eps;
  return *this;
}

CurvatureOperator& CurvatureOperator::set_regularizer_diagonal(double diag) {
  if (kind_ == CurvatureKind::kFisher && diag != 0.0) {
    throw InvalidInput("the Fisher operator does not carry the regularizer");
  }
  if (!(diag >= 0.0)) throw InvalidInput("regularizer curvature must be nonnegative");
  reg_diag_ = diag;
  return *this;
}

CurvatureOperator& CurvatureOperator::set_weights(Vector weights) {
  if (static_cast<std::size_t>(weights.size()) != data_->size()) {
    throw InvalidInput("curvature weights must have one entry per sample");
  }
  if ((weights.array() < 0.0).any()) throw InvalidInput("curvature weights must be nonnegative");
  weights_ = std::move(weights);
  return *this;
}

CurvatureOperator& CurvatureOperator::set_shift(double shift) {
  if (!(shift >= 0.0)) throw InvalidInput("curvature shift must be nonnegative");
  shift_ = shift;
  return *this;
}

void CurvatureOperator::check_direction(const Vector& v) const {
  if (v.size() != dim()) {
    throw InvalidInput("curvature direction has length " + std::to_string(v.size()) + ", expected " +
                       std::to_string(dim()));
  }
}

Vector CurvatureOperator::apply_sample(std::size_t i, const Vector& v) const {
  const double y = data_->y(i);
  if (kind_ == CurvatureKind::kHessian) {
    HeadLoss loss(head_, y);
    return model_.loss_hvp(data_->x(i), theta_, v, loss, counter_.get());
  }
  return model_.gauss_newton_apply(
      data_->x(i), theta_, v, [this](const Vector& f, const Vector& u) { return head_.f_hessian_apply(f, u); },
      counter_.get());
}

Vector CurvatureOperator::apply(const Vector& v) const {
  check_direction(v);
  Vector out = Vector::Zero(dim());
  const std::size_t n = data_->size();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights_ ? (*weights_)[static_cast<Eigen::Index>(i)] : 1.0;
    if (w == 0.0) continue;
    out += w * apply_sample(i, v);
  }
  out /= static_cast<double>(n);
  out += diagonal() * v;
  return out;
}

Vector CurvatureOperator::apply_batch(const Vector& v, std::span<const std::size_t> batch) const {
  check_direction(v);
  if (batch.empty()) throw InvalidInput("empty curvature batch");
  Vector out = Vector::Zero(dim());
  for (std::size_t i : batch) {
    if (i >= data_->size()) throw InvalidInput("batch index out of range");
    const double w = weights_ ? (*weights_)[static_cast<Eigen::Index>(i)] : 1.0;
    if (w == 0.0) continue;
    out += w * apply_sample(i, v);
  }
  out /= static_cast<double>(batch.size());
  out += diagonal() * v;
  return out;
}

Matrix CurvatureOperator::materialize() const {
  const Eigen::Index d = dim();
  Matrix a(d, d);
  for (Eigen::Index j = 0; j < d; ++j) a.col(j) = apply(Vector::Unit(d, j));
  return 0.5 * (a + a.transpose());
}

DenseSolver::DenseSolver(const CurvatureOperator& op, std::size_t cap) {
  if (static_cast<std::size_t>(op.dim()) > cap) {
    throw InvalidInput("dense solve needs d <= " + std::to_string(cap) + ", got d = " + std::to_string(op.dim()));
  }
  a_ = op.materialize();
  factorize();
}

DenseSolver::DenseSolver(Matrix a) : a_(std::move(a)) {
  if (a_.rows() != a_.cols()) throw InvalidInput("dense solver needs a square matrix");
  factorize();
}

void DenseSolver::factorize() {
  ldlt_.compute(a_);
  rcond_ = ldlt_.info() == Eigen::Success ? ldlt_.rcond() : 0.0;
  if (ldlt_.info() != Eigen::Success || !(rcond_ > 1e-14)) {
    std::ostringstream msg;
    msg << "curvature matrix is numerically singular (d = " << a_.rows() << ", reciprocal condition estimate "
        << rcond_ << "); add damping";
    throw NumericalError(msg.str());
  }
}

Vector DenseSolver::solve(const Vector& rhs) const {
  if (rhs.size() != a_.rows()) throw InvalidInput("right-hand side has wrong length");
  Vector v = ldlt_.solve(rhs);
  // One step of iterative refinement.
  v += ldlt_.solve(rhs - a_ * v);
  return v;
}

Vector dense_solve(const CurvatureOperator& op, const Vector& x, std::size_t cap) {
  return DenseSolver(op, cap).solve(x);
}

void LissaConfig::validate() const {
  if (!(scale > 0.0)) throw InvalidInput("LiSSA scale must be positive");
  if (depth < 1) throw InvalidInput("LiSSA depth must be >= 1");
  if (repetitions < 1) throw InvalidInput("LiSSA repetitions must be >= 1");
}

std::size_t default_lissa_batch(std::size_t n) { return n <= 4096 ? n : 512; }

LissaResult lissa_solve(const CurvatureOperator& op, const Vector& x, const LissaConfig& cfg,
                        const std::function<void(int, const Vector&)>& observer) {
  cfg.validate();
  if (x.size() != op.dim()) throw InvalidInput("LiSSA right-hand side has wrong length");
  const std::size_t n = op.sample_count();
  const std::size_t batch = cfg.batch_size == 0 ? default_lissa_batch(n) : cfg.batch_size;

  LissaResult result;
  result.depth = cfg.depth;
  result.repetitions = cfg.repetitions;
  result.full_batch = batch >= n;
  result.batch_size = result.full_batch ? n : batch;

  auto run = [&](std::uint64_t rep) -> Vector {
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + rep + 1);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> idx(result.batch_size);
    Vector v = x;
    for (int j = 1; j <= cfg.depth; ++j) {
      Vector av;
      if (result.full_batch) {
        av = op.apply(v);
      } else {
        for (auto& i : idx) i = pick(rng);
        av = op.apply_batch(v, idx);
      }
      v = x + v - cfg.scale * av;
      const double norm = v.norm();
      if (!std::isfinite(norm) || norm > kLissaDivergenceThreshold) {
        std::ostringstream msg;
        msg << "LiSSA diverged at iteration " << j << " (|v| = " << norm << "); use a smaller scale than "
            << cfg.scale;
        throw DivergenceError(msg.str());
      }
      if (observer && rep == 0) observer(j, cfg.scale * v);
    }
    return cfg.scale * v;
  };

  if (result.full_batch) {
    // Every repetition would be identical.
    result.solution = run(0);
    return result;
  }
  Vector total = Vector::Zero(x.size());
  for (int r = 0; r < cfg.repetitions; ++r) total += run(static_cast<std::uint64_t>(r));
  result.solution = total / static_cast<double>(cfg.repetitions);
  return result;
}

double lissa_contraction_factor(const Matrix& a, double scale) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  return std::max(std::abs(1.0 - scale * ev.minCoeff()), std::abs(1.0 - scale * ev.maxCoeff()));
}

}  // namespace influence
