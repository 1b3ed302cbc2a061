#include "influence/oracle.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "influence/curvature.hpp"
#include "influence/errors.hpp"

namespace influence::oracle {

namespace {

struct ValueGrad {
  double value = 0.0;
  ParamVector grad;
};

// Smooth part: weighted data loss plus lambda ||theta||^2 for L2.
ValueGrad smooth_objective(const Model& model, const ExpFamilyHead& head, const Dataset& data, const WeightVector& w,
                           const Regularizer& reg, const ParamVector& theta) {
  ValueGrad out{0.0, ParamVector::Zero(theta.size())};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double wi = w[i];
    if (wi == 0.0) continue;
    const double y = data.y(i);
    auto vg = model.value_and_vjp(data.x(i), theta, [&](const Vector& f) -> Vector { return -head.score(f, y); });
    out.value += wi * head.nll(vg.value, y);
    out.grad += wi * vg.gradient;
  }
  const auto n = static_cast<double>(data.size());
  out.value /= n;
  out.grad /= n;
  if (reg.kind == Regularizer::Kind::kL2) {
    out.value += reg.lambda * theta.squaredNorm();
    out.grad += 2.0 * reg.lambda * theta;
  }
  return out;
}

double l1_term(const Regularizer& reg, const ParamVector& theta) {
  return reg.kind == Regularizer::Kind::kL1 ? reg.lambda * theta.lpNorm<1>() : 0.0;
}

ParamVector shrink(const ParamVector& v, double t) { return v.array().sign() * (v.array().abs() - t).max(0.0); }

std::optional<RetrainResult> closed_form(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                                         const WeightVector& w, const Regularizer& reg) {
  if (!model.is_linear_in_params() || head.kind() != ExpFamilyHead::Kind::kGaussian || !reg.smooth()) {
    return std::nullopt;
  }
  const bool bias = model.layers().front().bias;
  const Eigen::Index p = data.dim();
  const Eigen::Index d = p + (bias ? 1 : 0);
  Matrix x(static_cast<Eigen::Index>(data.size()), d);
  x.leftCols(p) = data.features;
  if (bias) x.col(p).setOnes();
  const Vector& wv = w.values();
  Matrix a = x.transpose() * wv.asDiagonal() * x;
  a.diagonal().array() += 2.0 * static_cast<double>(data.size()) * (reg.kind == Regularizer::Kind::kL2 ? reg.lambda : 0.0);
  const Vector rhs = x.transpose() * wv.cwiseProduct(data.labels);
  Eigen::LDLT<Matrix> ldlt(a);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all() || !(ldlt.rcond() > 1e-13)) {
    return std::nullopt;
  }
  Vector theta = ldlt.solve(rhs);
  theta += ldlt.solve(rhs - a * theta);
  RetrainResult r;
  r.theta = theta;
  r.closed_form = true;
  r.gradient_norm = smooth_objective(model, head, data, w, reg, theta).grad.norm();
  return r;
}

// Full Newton step on the smooth objective, for small parameter counts.
// Empty when the Hessian is not positive definite.
std::optional<ParamVector> newton_direction(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                                            const WeightVector& w, const Regularizer& reg, const ParamVector& theta,
                                            const ParamVector& grad) {
  CurvatureOperator op(CurvatureKind::kHessian, model, head, data, theta);
  op.set_weights(w.values());
  if (reg.kind == Regularizer::Kind::kL2) op.set_regularizer_diagonal(2.0 * reg.lambda);
  Eigen::LDLT<Matrix> ldlt(op.materialize());
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) return std::nullopt;
  ParamVector d = -ldlt.solve(grad);
  if (!d.allFinite()) return std::nullopt;
  return d;
}

constexpr Eigen::Index kNewtonCap = 256;

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(3) << v;
  return os.str();
}

}  // namespace

double weighted_objective(const Model& model, const ExpFamilyHead& head, const Dataset& data, const WeightVector& w,
                          const Regularizer& reg, const ParamVector& theta) {
  if (w.size() != data.size()) throw InvalidInput("weight vector length does not match dataset");
  return smooth_objective(model, head, data, w, reg, theta).value + l1_term(reg, theta);
}

RetrainResult retrain_detailed(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                               const WeightVector& w, const Regularizer& reg, const RetrainConfig& cfg) {
  if (w.size() != data.size()) throw InvalidInput("weight vector length does not match dataset");
  if (!(cfg.tolerance > 0.0)) throw InvalidInput("retrain tolerance must be positive");
  if (cfg.allow_closed_form) {
    if (auto r = closed_form(model, head, data, w, reg)) return *r;
  }

  const bool l1 = reg.kind == Regularizer::Kind::kL1 && reg.lambda > 0.0;
  ParamVector theta;
  if (cfg.warm_start) {
    if (cfg.warm_start->size() != model.num_params()) throw InvalidInput("warm start has wrong length");
    theta = *cfg.warm_start;
  } else {
    theta = model.is_linear_in_params() ? ParamVector::Zero(model.num_params()) : model.init_params(0);
  }

  ValueGrad cur = smooth_objective(model, head, data, w, reg, theta);
  double step = 1.0;
  int newton_skip = 0;
  RetrainResult result;
  // Stationarity measure: gradient norm, or the prox-gradient mapping for L1.
  auto stationarity = [&](const ParamVector& th, const ParamVector& g, double t) {
    if (!l1) return g.norm();
    return ((th - shrink(th - t * g, t * reg.lambda)) / t).norm();
  };

  for (int it = 0; it < cfg.max_iterations; ++it) {
    const double measure = stationarity(theta, cur.grad, std::min(step, 1.0));
    if (!std::isfinite(measure)) throw ConvergenceError("retrain produced a non-finite gradient", measure);
    if (measure <= cfg.tolerance) {
      result.theta = theta;
      result.gradient_norm = measure;
      result.iterations = it;
      return result;
    }
    ParamVector next;
    ValueGrad nv;
    // Near the optimum objective differences drown in round-off; Newton with a
    // gradient-norm test finishes the job.
    if (!l1 && theta.size() <= kNewtonCap && measure <= 1e-4 && newton_skip == 0) {
      if (auto dir = newton_direction(model, head, data, w, reg, theta, cur.grad)) {
        next = theta + *dir;
        nv = smooth_objective(model, head, data, w, reg, next);
        if (nv.grad.norm() < 0.5 * measure) {
          theta = std::move(next);
          cur = std::move(nv);
          continue;
        }
      }
      newton_skip = 20;
    }
    if (newton_skip > 0) --newton_skip;
    double t = step;
    bool accepted = false;
    for (int bt = 0; bt < 80; ++bt) {
      if (l1) {
        next = shrink(theta - t * cur.grad, t * reg.lambda);
        nv = smooth_objective(model, head, data, w, reg, next);
        const ParamVector dlt = next - theta;
        if (nv.value <= cur.value + cur.grad.dot(dlt) + dlt.squaredNorm() / (2.0 * t) + 1e-15 * std::abs(cur.value)) {
          accepted = true;
          break;
        }
      } else {
        next = theta - t * cur.grad;
        nv = smooth_objective(model, head, data, w, reg, next);
        if (nv.value <= cur.value - 1e-4 * t * cur.grad.squaredNorm() ||
            (nv.value <= cur.value && nv.grad.norm() < cur.grad.norm())) {
          accepted = true;
          break;
        }
      }
      t *= 0.5;
    }
    if (!accepted) {
      // Round-off floor: no representable decrease left.
      result.theta = theta;
      result.gradient_norm = measure;
      result.iterations = it;
      if (measure <= 1e3 * cfg.tolerance) return result;
      throw ConvergenceError("retrain line search stalled at gradient norm " + sci(measure), measure);
    }
    const ParamVector s = next - theta;
    const ParamVector yv = nv.grad - cur.grad;
    const double sy = s.dot(yv);
    step = sy > 0.0 ? s.squaredNorm() / sy : 2.0 * t;
    step = std::clamp(step, 1e-12, 1e12);
    theta = std::move(next);
    cur = std::move(nv);
  }
  const double measure = stationarity(theta, cur.grad, std::min(step, 1.0));
  throw ConvergenceError("retrain did not converge; gradient norm " + sci(measure), measure);
}

ParamVector retrain(const Model& model, const ExpFamilyHead& head, const Dataset& data, const WeightVector& w,
                    const Regularizer& reg, const RetrainConfig& cfg) {
  return retrain_detailed(model, head, data, w, reg, cfg).theta;
}

CvResult exact_cv(const Model& model, const ExpFamilyHead& head, const Dataset& data, const Regularizer& reg,
                  std::size_t k, std::size_t folds, std::uint64_t seed, const RetrainConfig& cfg) {
  CvResult out;
  out.folds = sample_folds(data.size(), k, folds, seed);
  double total = 0.0;
  for (const auto& fold : out.folds) {
    const ParamVector theta = retrain(model, head, data, WeightVector::leave_k_out(data.size(), fold), reg, cfg);
    const double v = heldout_loss(model, head, data, theta, fold);
    out.per_fold.push_back(v);
    total += v;
  }
  out.estimate = total / static_cast<double>(folds);
  return out;
}

FdTarget parse_fd_target(std::string_view name) {
  if (name == "grad") return FdTarget::kGrad;
  if (name == "jvp") return FdTarget::kJvp;
  if (name == "vjp") return FdTarget::kVjp;
  if (name == "hvp") return FdTarget::kHvp;
  if (name == "fisher") return FdTarget::kFisher;
  throw ParseError("unknown check '" + std::string(name) + "'");
}

std::string to_string(FdTarget t) {
  switch (t) {
    case FdTarget::kGrad: return "grad";
    case FdTarget::kJvp: return "jvp";
    case FdTarget::kVjp: return "vjp";
    case FdTarget::kHvp: return "hvp";
    case FdTarget::kFisher: return "fisher";
  }
  return "?";
}

namespace {

Vector random_vector(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

FdReport fd_check(FdTarget target, const Model& model, const ExpFamilyHead& head, const Dataset& samples,
                  const ParamVector& theta, std::uint64_t seed, std::optional<double> tolerance) {
  FdReport rep;
  rep.target = target;
  switch (target) {
    case FdTarget::kVjp: rep.tolerance = 1e-8; break;
    case FdTarget::kFisher: rep.tolerance = 1e-8; break;
    default: rep.tolerance = 1e-5; break;
  }
  if (tolerance) rep.tolerance = *tolerance;
  std::mt19937_64 rng(seed);
  const double h = kFdStep;
  const std::size_t m = std::min<std::size_t>(samples.size(), 5);
  try {
    switch (target) {
      case FdTarget::kGrad:
        for (std::size_t i = 0; i < m; ++i) {
          const ParamVector g = loss_grad(model, head, samples.x(i), samples.y(i), theta);
          ParamVector fd(theta.size());
          for (Eigen::Index j = 0; j < theta.size(); ++j) {
            ParamVector tp = theta, tm = theta;
            tp[j] += h;
            tm[j] -= h;
            fd[j] = (sample_loss(model, head, samples.x(i), samples.y(i), tp) -
                     sample_loss(model, head, samples.x(i), samples.y(i), tm)) /
                    (2 * h);
          }
          rep.max_error = std::max(rep.max_error, (g - fd).norm() / (1.0 + fd.norm()));
        }
        break;
      case FdTarget::kJvp:
        for (std::size_t i = 0; i < m; ++i) {
          const Vector a = random_vector(theta.size(), rng);
          const Vector jv = model.jvp(samples.x(i), theta, a);
          const Vector fd = (model.forward(samples.x(i), theta + h * a) - model.forward(samples.x(i), theta - h * a)) /
                            (2 * h);
          rep.max_error = std::max(rep.max_error, (jv - fd).norm() / (1.0 + jv.norm()));
        }
        break;
      case FdTarget::kVjp:
        for (std::size_t i = 0; i < m; ++i) {
          const Vector a = random_vector(theta.size(), rng);
          const Vector u = random_vector(model.output_dim(), rng);
          const double lhs = u.dot(model.jvp(samples.x(i), theta, a));
          const double rhs = model.vjp(samples.x(i), theta, u).dot(a);
          rep.max_error = std::max(rep.max_error, std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}));
        }
        break;
      case FdTarget::kHvp:
        for (std::size_t i = 0; i < m; ++i) {
          const Vector v = random_vector(theta.size(), rng);
          const Vector u = random_vector(theta.size(), rng);
          HeadLoss loss(head, samples.y(i));
          const Vector hv = model.loss_hvp(samples.x(i), theta, v, loss);
          const Vector hu = model.loss_hvp(samples.x(i), theta, u, loss);
          const Vector fd = (loss_grad(model, head, samples.x(i), samples.y(i), theta + h * v) -
                             loss_grad(model, head, samples.x(i), samples.y(i), theta - h * v)) /
                            (2 * h);
          rep.max_error = std::max(rep.max_error, (hv - fd).norm() / (1.0 + fd.norm()));
          const double sym = std::abs(u.dot(hv) - v.dot(hu)) / std::max({std::abs(u.dot(hv)), 1e-12});
          if (sym > 1e-8) {
            rep.detail = "hvp asymmetry " + std::to_string(sym);
            rep.max_error = std::max(rep.max_error, sym);
          }
        }
        break;
      case FdTarget::kFisher: {
        const Vector v = random_vector(theta.size(), rng);
        Vector dense = Vector::Zero(theta.size());
        for (std::size_t i = 0; i < samples.size(); ++i) {
          const Matrix j = model.jacobian(samples.x(i), theta);
          const Vector f = model.forward(samples.x(i), theta);
          dense += j.transpose() * (head.f_hessian(f) * (j * v));
        }
        dense /= static_cast<double>(samples.size());
        CurvatureOperator op(CurvatureKind::kFisher, model, head, samples, theta);
        rep.max_error = (op.apply(v) - dense).lpNorm<Eigen::Infinity>();
        break;
      }
    }
  } catch (const std::exception& e) {
    rep.passed = false;
    rep.max_error = std::numeric_limits<double>::infinity();
    rep.detail = e.what();
    return rep;
  }
  rep.passed = std::isfinite(rep.max_error) && rep.max_error <= rep.tolerance;
  if (!rep.passed && rep.detail.empty()) rep.detail = "max error " + sci(rep.max_error) + " above tolerance " + sci(rep.tolerance);
  return rep;
}

std::vector<FdReport> fd_check_all(const Model& model, const ExpFamilyHead& head, const Dataset& samples,
                                   const ParamVector& theta, std::uint64_t seed) {
  std::vector<FdReport> out;
  for (auto t : {FdTarget::kGrad, FdTarget::kJvp, FdTarget::kVjp, FdTarget::kHvp, FdTarget::kFisher}) {
    out.push_back(fd_check(t, model, head, samples, theta, seed));
  }
  return out;
}

}  // namespace influence::oracle
