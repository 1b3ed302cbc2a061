#include "influence/influence.hpp"

#include <charconv>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "influence/errors.hpp"

namespace influence {

WeightVector::WeightVector(Vector values) : values_(std::move(values)) {
  for (Eigen::Index i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i]) || values_[i] < 0.0) {
      throw InvalidInput("weight " + std::to_string(i) + " must be finite and nonnegative");
    }
  }
}

WeightVector WeightVector::all_ones(std::size_t n) { return WeightVector(Vector::Ones(static_cast<Eigen::Index>(n))); }

WeightVector WeightVector::leave_one_out(std::size_t n, std::size_t i) {
  const std::size_t idx[] = {i};
  return leave_k_out(n, idx);
}

WeightVector WeightVector::leave_k_out(std::size_t n, std::span<const std::size_t> removed) {
  Vector w = Vector::Ones(static_cast<Eigen::Index>(n));
  for (std::size_t i : removed) {
    if (i >= n) throw InvalidInput("removed index " + std::to_string(i) + " out of range");
    if (w[static_cast<Eigen::Index>(i)] == 0.0) throw InvalidInput("removed index " + std::to_string(i) + " repeated");
    w[static_cast<Eigen::Index>(i)] = 0.0;
  }
  return WeightVector(std::move(w));
}

bool WeightVector::is_all_ones() const { return (values_.array() == 1.0).all(); }

Regularizer Regularizer::l2(double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidInput("regularization strength must be >= 0");
  return {Kind::kL2, lambda};
}

Regularizer Regularizer::l1(double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidInput("regularization strength must be >= 0");
  return {Kind::kL1, lambda};
}

Regularizer Regularizer::parse(std::string_view text) {
  if (text == "none") return none();
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw ParseError("regularizer must be none, l2:<lambda> or l1:<lambda>");
  const auto name = text.substr(0, colon);
  const std::string num(text.substr(colon + 1));
  double lambda = 0.0;
  try {
    std::size_t used = 0;
    lambda = std::stod(num, &used);
    if (used != num.size()) throw std::invalid_argument(num);
  } catch (const std::exception&) {
    throw ParseError("bad regularization strength '" + num + "'");
  }
  if (name == "l2") return l2(lambda);
  if (name == "l1") return l1(lambda);
  throw ParseError("unknown regularizer '" + std::string(name) + "'");
}

std::string Regularizer::to_string() const {
  if (kind == Kind::kNone) return "none";
  std::ostringstream out;
  out << (kind == Kind::kL2 ? "l2:" : "l1:") << std::setprecision(17) << lambda;
  return out.str();
}

double Regularizer::pi(const ParamVector& theta) const {
  switch (kind) {
    case Kind::kNone: return 0.0;
    case Kind::kL2: return theta.squaredNorm();
    case Kind::kL1: return theta.lpNorm<1>();
  }
  return 0.0;
}

double Regularizer::value(const ParamVector& theta) const { return kind == Kind::kNone ? 0.0 : lambda * pi(theta); }

ParamVector Regularizer::gradient(const ParamVector& theta) const {
  switch (kind) {
    case Kind::kNone: return ParamVector::Zero(theta.size());
    case Kind::kL2: return 2.0 * lambda * theta;
    case Kind::kL1: return lambda * theta.array().sign().matrix();
  }
  return ParamVector::Zero(theta.size());
}

double Regularizer::curvature() const { return kind == Kind::kL2 ? 2.0 * lambda : 0.0; }

InfluenceProblem::InfluenceProblem(Model model_, ExpFamilyHead head_, const Dataset& data_, ParamVector theta_hat_,
                                   Regularizer reg_, std::shared_ptr<PassCounter> counter_)
    : model(std::move(model_)),
      head(head_),
      data(&data_),
      theta_hat(std::move(theta_hat_)),
      reg(reg_),
      counter(counter_ ? std::move(counter_) : std::make_shared<PassCounter>()) {
  if (theta_hat.size() != model.num_params()) throw InvalidInput("theta_hat does not match model parameter count");
  if (head.dim() != model.output_dim()) throw InvalidInput("model output does not match head dimension");
  if (data->size() == 0) throw InvalidInput("empty training set");
  if (data->dim() != model.input_dim()) throw InvalidInput("dataset features do not match model input");
}

SolverConfig::Method SolverConfig::parse_method(std::string_view name) {
  if (name == "auto") return Method::kAuto;
  if (name == "dense") return Method::kDense;
  if (name == "lissa") return Method::kLissa;
  throw ParseError("solver must be auto, dense or lissa");
}

std::string to_string(SolverConfig::Method m) {
  switch (m) {
    case SolverConfig::Method::kAuto: return "auto";
    case SolverConfig::Method::kDense: return "dense";
    case SolverConfig::Method::kLissa: return "lissa";
  }
  return "auto";
}

ParamVector b_vector(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                     const WeightVector& w, PassCounter* counter) {
  if (w.size() != data.size()) throw InvalidInput("weight vector length does not match dataset");
  ParamVector b = ParamVector::Zero(theta.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double dw = w[i] - 1.0;
    if (dw == 0.0) continue;
    b += dw * loss_grad(model, head, data.x(i), data.y(i), theta, counter);
  }
  return b / static_cast<double>(data.size());
}

ParamVector data_gradient(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                          const ParamVector& theta, const WeightVector* w, PassCounter* counter) {
  if (w && w->size() != data.size()) throw InvalidInput("weight vector length does not match dataset");
  ParamVector g = ParamVector::Zero(theta.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double wi = w ? (*w)[i] : 1.0;
    if (wi == 0.0) continue;
    g += wi * loss_grad(model, head, data.x(i), data.y(i), theta, counter);
  }
  return g / static_cast<double>(data.size());
}

CurvatureSolver::CurvatureSolver(const InfluenceProblem& problem, CurvatureKind kind, const SolverConfig& cfg,
                                 const WeightVector* weights, double shift)
    : op_(kind, problem.model, problem.head, *problem.data, problem.theta_hat, problem.counter),
      cfg_(cfg),
      shift_(shift) {
  if (kind == CurvatureKind::kHessian && problem.reg.kind == Regularizer::Kind::kL2) {
    op_.set_regularizer_diagonal(problem.reg.curvature());
  }
  op_.set_damping(cfg.damping);
  op_.set_shift(shift);
  if (weights) op_.set_weights(weights->values());
  const auto d = static_cast<std::size_t>(op_.dim());
  switch (cfg.method) {
    case SolverConfig::Method::kDense:
      if (d > cfg.dense_cap) {
        throw InvalidInput("dense solver needs d <= " + std::to_string(cfg.dense_cap) + ", got " + std::to_string(d));
      }
      dense_ = true;
      break;
    case SolverConfig::Method::kLissa: dense_ = false; break;
    case SolverConfig::Method::kAuto: dense_ = d <= cfg.dense_cap; break;
  }
}

void CurvatureSolver::factorize() {
  if (factor_) return;
  matrix_ = op_.materialize();
  try {
    factor_ = std::make_unique<DenseSolver>(*matrix_);
  } catch (const NumericalError&) {
    if (!cfg_.auto_damping) throw;
    const double d = static_cast<double>(matrix_->rows());
    double eps = 1e-3 * matrix_->trace() / d;
    if (!(eps > 0.0)) eps = 1e-3;
    op_.set_damping(op_.damping() + eps);
    matrix_->diagonal().array() += eps;
    factor_ = std::make_unique<DenseSolver>(*matrix_);
  }
}

const Matrix& CurvatureSolver::dense_matrix() {
  if (!dense_) throw InvalidInput("dense curvature requested from a LiSSA solver");
  factorize();
  return *matrix_;
}

Vector CurvatureSolver::solve(const Vector& x) {
  if (x.size() != op_.dim()) throw InvalidInput("right-hand side has wrong length");
  if (dense_) {
    factorize();
    return factor_->solve(x);
  }
  const LissaResult r = lissa_solve(op_, x, cfg_.lissa);
  lissa_iterations_ += r.depth * (r.full_batch ? 1 : r.repetitions);
  return r.solution;
}

ParamVector second_order_estimate(CurvatureSolver& solver, const ParamVector& theta_hat, const ParamVector& b) {
  if (b.size() != theta_hat.size()) throw InvalidInput("b has wrong length");
  if (b.isZero(0.0)) return theta_hat;
  return theta_hat - solver.solve(b);
}

ParamVector soft_threshold(const ParamVector& v, double t) {
  return v.array().sign() * (v.array().abs() - t).max(0.0);
}

namespace {

void check_metric(const Matrix& metric, Eigen::Index d) {
  if (metric.rows() != d || metric.cols() != d) throw InvalidInput("prox metric has wrong shape");
  for (Eigen::Index j = 0; j < d; ++j) {
    if (!(metric(j, j) > 0.0)) {
      throw NumericalError("prox metric has nonpositive diagonal entry " + std::to_string(metric(j, j)) +
                           " at " + std::to_string(j) + "; add damping");
    }
  }
}

bool is_scaled_identity(const Matrix& m) {
  const double c = m(0, 0);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (m(i, j) != (i == j ? c : 0.0)) return false;
  return true;
}

}  // namespace

ParamVector prox(const Matrix* metric, const Regularizer& reg, const ParamVector& v) {
  if (!reg.active()) return v;
  if (metric) check_metric(*metric, v.size());
  if (reg.kind == Regularizer::Kind::kL2) {
    if (!metric) return v / (1.0 + 2.0 * reg.lambda);
    Matrix p = *metric;
    p.diagonal().array() += 2.0 * reg.lambda;
    Eigen::LDLT<Matrix> ldlt(p);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) {
      throw NumericalError("prox metric is not positive definite; add damping");
    }
    const Vector rhs = *metric * v;
    Vector theta = ldlt.solve(rhs);
    theta += ldlt.solve(rhs - p * theta);
    return theta;
  }
  if (!metric) return soft_threshold(v, reg.lambda);
  if (is_scaled_identity(*metric)) return soft_threshold(v, reg.lambda / (*metric)(0, 0));
  return prox_coordinate_descent(*metric, reg, v);
}

ParamVector prox_coordinate_descent(const Matrix& metric, const Regularizer& reg, const ParamVector& v, double tol,
                                    int max_sweeps) {
  const Eigen::Index d = v.size();
  check_metric(metric, d);
  if (!reg.active()) return v;
  // (v - t)^T D (v - t) + 2 lambda pi(t) = 2 [ 1/2 t^T P t - c^T t + lambda |t|_1 ] + const
  Matrix p = metric;
  const bool l1 = reg.kind == Regularizer::Kind::kL1;
  if (!l1) p.diagonal().array() += 2.0 * reg.lambda;
  const Vector c = metric * v;
  auto objective = [&](const Vector& t) {
    return 0.5 * t.dot(p * t) - c.dot(t) + (l1 ? reg.lambda * t.lpNorm<1>() : 0.0);
  };

  Vector theta = v;
  Vector r = p * theta;
  double prev = objective(theta);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double max_step = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double z = c[j] - (r[j] - p(j, j) * theta[j]);
      const double next = l1 ? std::copysign(std::max(std::abs(z) - reg.lambda, 0.0), z) / p(j, j) : z / p(j, j);
      const double step = next - theta[j];
      if (step != 0.0) {
        r += step * p.col(j);
        theta[j] = next;
        max_step = std::max(max_step, std::abs(step));
      }
    }
    const double obj = objective(theta);
    if (!std::isfinite(obj)) throw NumericalError("prox objective is unbounded; the metric is not PSD");
    if (obj > prev + 1e-12 * (1.0 + std::abs(prev))) {
      throw NumericalError("prox objective increased; the metric is not PSD, add damping");
    }
    const bool flat = prev - obj <= tol;
    prev = obj;
    // Refresh the running product against drift.
    if (sweep % 64 == 63) r = p * theta;
    if (flat && max_step <= 1e-13 * (1.0 + theta.lpNorm<Eigen::Infinity>())) return theta;
  }
  throw NumericalError("prox coordinate descent did not converge in " + std::to_string(max_sweeps) + " sweeps");
}

namespace {

// Matrix-free prox under an operator metric by accelerated proximal gradient.
ParamVector prox_operator(const CurvatureOperator& op, const Regularizer& reg, const ParamVector& u) {
  // Largest eigenvalue by power iteration.
  Vector q = Vector::Ones(u.size()).normalized();
  double lmax = 0.0;
  for (int it = 0; it < 100; ++it) {
    Vector aq = op.apply(q);
    const double next = aq.norm();
    if (next == 0.0) break;
    q = aq / next;
    if (std::abs(next - lmax) <= 1e-6 * next) {
      lmax = next;
      break;
    }
    lmax = next;
  }
  if (!(lmax > 0.0)) throw NumericalError("prox metric is zero; add damping");
  const double step = 1.0 / (1.05 * lmax);
  Vector theta = u;
  Vector y = theta;
  double t = 1.0;
  for (int it = 0; it < 20000; ++it) {
    const Vector grad = op.apply(y - u);
    const Vector next = soft_threshold(y - step * grad, step * reg.lambda);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / tn) * (next - theta);
    const double change = (next - theta).norm();
    theta = next;
    t = tn;
    if (change <= 1e-10 * (1.0 + theta.norm())) return theta;
  }
  return theta;
}

}  // namespace

InfluenceEngine::InfluenceEngine(const InfluenceProblem& problem, CurvatureKind kind, SolverConfig cfg)
    : problem_(&problem), kind_(kind), cfg_(std::move(cfg)) {}

std::unique_ptr<CurvatureSolver> InfluenceEngine::make_solver(const WeightVector* w) const {
  const auto& reg = problem_->reg;
  const double shift = kind_ == CurvatureKind::kFisher && reg.kind == Regularizer::Kind::kL2 ? reg.curvature() : 0.0;
  return std::make_unique<CurvatureSolver>(*problem_, kind_, cfg_, w, shift);
}

CurvatureSolver& InfluenceEngine::shared_solver() {
  if (!shared_) shared_ = make_solver(nullptr);
  return *shared_;
}

const ParamVector& InfluenceEngine::data_grad() {
  if (!data_grad_) {
    data_grad_ = data_gradient(problem_->model, problem_->head, *problem_->data, problem_->theta_hat, nullptr,
                               problem_->counter.get());
  }
  return *data_grad_;
}

ParamVector InfluenceEngine::estimate_with(CurvatureSolver& solver, const WeightVector& w, bool apply_prox) {
  const auto& p = *problem_;
  const ParamVector b = b_vector(p.model, p.head, *p.data, p.theta_hat, w, p.counter.get());
  const auto& reg = p.reg;
  if (!reg.active() || (kind_ == CurvatureKind::kHessian && reg.kind == Regularizer::Kind::kL2)) {
    return second_order_estimate(solver, p.theta_hat, b);
  }
  // Quadratic model of the weighted smooth part around theta_hat; its linear
  // term is the weighted data gradient b + grad_s.
  const ParamVector linear = b + data_grad();
  if (reg.kind == Regularizer::Kind::kL2) {
    return p.theta_hat - solver.solve(linear + reg.gradient(p.theta_hat));
  }
  const ParamVector u = p.theta_hat - solver.solve(linear);
  if (!apply_prox) return u;
  if (solver.dense()) {
    const Matrix& metric = solver.dense_matrix();
    return prox(&metric, reg, u);
  }
  return prox_operator(solver.op(), reg, u);
}

ParamVector InfluenceEngine::estimate(const WeightVector& w) {
  if (w.size() != problem_->n()) throw InvalidInput("weight vector length does not match dataset");
  if (w.is_all_ones()) return problem_->theta_hat;
  if (cfg_.scope == CurvatureScope::kReweighted) {
    auto solver = make_solver(&w);
    return estimate_with(*solver, w, true);
  }
  return estimate_with(shared_solver(), w, true);
}

ParamVector InfluenceEngine::newton_step(const WeightVector& w) {
  if (w.size() != problem_->n()) throw InvalidInput("weight vector length does not match dataset");
  if (cfg_.scope == CurvatureScope::kReweighted) {
    auto solver = make_solver(&w);
    return estimate_with(*solver, w, false);
  }
  return estimate_with(shared_solver(), w, false);
}

Vector InfluenceEngine::solve_linearized(const Vector& x) { return shared_solver().solve(x); }

std::string to_string(EstimatorMode mode) { return mode == EstimatorMode::kPlugin ? "plugin" : "linearized"; }

double influence_estimate(EstimatorMode mode, const std::function<double(const ParamVector&)>& objective,
                          const ParamVector& theta_hat, const ParamVector& theta_tilde,
                          const ParamVector* grad_at_theta_hat) {
  if (theta_hat.size() != theta_tilde.size()) throw InvalidInput("parameter vectors differ in length");
  if (mode == EstimatorMode::kPlugin) return objective(theta_tilde);
  if (!grad_at_theta_hat) throw InvalidInput("linearized estimate needs the objective gradient at theta_hat");
  if (grad_at_theta_hat->size() != theta_hat.size()) throw InvalidInput("objective gradient has wrong length");
  return objective(theta_hat) + grad_at_theta_hat->dot(theta_tilde - theta_hat);
}

Vector influence_estimate(EstimatorMode mode, const std::function<Vector(const ParamVector&)>& objective,
                          const ParamVector& theta_hat, const ParamVector& theta_tilde,
                          const Matrix* jacobian_at_theta_hat) {
  if (theta_hat.size() != theta_tilde.size()) throw InvalidInput("parameter vectors differ in length");
  if (mode == EstimatorMode::kPlugin) return objective(theta_tilde);
  if (!jacobian_at_theta_hat) throw InvalidInput("linearized estimate needs the objective Jacobian at theta_hat");
  if (jacobian_at_theta_hat->cols() != theta_hat.size()) throw InvalidInput("objective Jacobian has wrong shape");
  return objective(theta_hat) + *jacobian_at_theta_hat * (theta_tilde - theta_hat);
}

double BoundConstants::require(const std::optional<double>& v, const char* name) const {
  if (!v) throw InvalidInput(std::string("bound constant ") + name + " is not set");
  if (!(*v >= 0.0) || !std::isfinite(*v)) throw InvalidInput(std::string("bound constant ") + name + " must be >= 0");
  return *v;
}

double BoundConstants::moment(int s, int r) const {
  const auto it = B.find({s, r});
  if (it == B.end()) {
    throw InvalidInput("moment B_" + std::to_string(s) + std::to_string(r) + " is not set");
  }
  return it->second;
}

nlohmann::json BoundConstants::to_json() const {
  nlohmann::json j;
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) j[k] = *v;
  };
  put("mu", mu);
  put("M", M);
  put("C_f", C_f);
  put("C_f_tilde", C_f_tilde);
  j["Q"] = Q;
  put("C_T1", C_T1);
  put("C_T2", C_T2);
  put("G", G);
  put("L", L);
  put("C", C);
  for (const auto& [sr, v] : B) j["B"][std::to_string(sr.first) + std::to_string(sr.second)] = v;
  return j;
}

BoundConstants BoundConstants::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("bound constants must be a JSON object");
  BoundConstants c;
  auto get = [&](const char* k, std::optional<double>& v) {
    if (j.contains(k)) v = j.at(k).get<double>();
  };
  get("mu", c.mu);
  get("M", c.M);
  get("C_f", c.C_f);
  get("C_f_tilde", c.C_f_tilde);
  c.Q = j.value("Q", 1.0);
  get("C_T1", c.C_T1);
  get("C_T2", c.C_T2);
  get("G", c.G);
  get("L", c.L);
  get("C", c.C);
  if (j.contains("B")) {
    for (const auto& [key, v] : j.at("B").items()) {
      if (key.size() != 2 || !std::isdigit(key[0]) || !std::isdigit(key[1])) {
        throw ParseError("moment keys are two digits sr, got '" + key + "'");
      }
      c.B[{key[0] - '0', key[1] - '0'}] = v.get<double>();
    }
  }
  return c;
}

BoundKind parse_bound_kind(std::string_view name) {
  if (name == "lemma1") return BoundKind::kLemma1;
  if (name == "thm1") return BoundKind::kThm1Plugin;
  if (name == "thm1_taylor") return BoundKind::kThm1Taylor;
  if (name == "cor1") return BoundKind::kCor1;
  if (name == "cor2") return BoundKind::kCor2;
  if (name == "cor3") return BoundKind::kCor3Plugin;
  if (name == "cor3_taylor") return BoundKind::kCor3Taylor;
  if (name == "cor4") return BoundKind::kCor4;
  if (name == "noise_scale") return BoundKind::kNoiseScale;
  throw ParseError("unknown bound '" + std::string(name) + "'");
}

namespace {

double positive_mu(const BoundConstants& c) {
  const double mu = c.require(c.mu, "mu");
  if (!(mu > 0.0)) throw InvalidInput("bounds need mu > 0");
  return mu;
}

double count(std::size_t n) {
  if (n < 1) throw InvalidInput("bounds need n >= 1");
  return static_cast<double>(n);
}

}  // namespace

double lemma1_bound(const BoundConstants& c, std::size_t n_, double g, double ebar) {
  const double mu = positive_mu(c);
  const double n = count(n_);
  const double cf = c.require(c.C_f, "C_f");
  const double m = c.require(c.M, "M");
  if (g < 0.0 || ebar < 0.0) throw InvalidInput("gradient norm and Ebar must be >= 0");
  double out = 2.0 * c.Q * cf * cf * g / (n * n * mu * mu) + m * g * g / (n * n * mu * mu * mu);
  if (ebar > 0.0 && g > 0.0) out += 2.0 * g * c.require(c.C_f_tilde, "C_f_tilde") * ebar / (n * mu * mu);
  return out;
}

double bound_evaluator(BoundKind which, const BoundConstants& c, const BoundInputs& in) {
  const double mu = positive_mu(c);
  const double n = count(in.n);
  switch (which) {
    case BoundKind::kLemma1: return lemma1_bound(c, in.n, in.g_tilde, in.ebar);
    case BoundKind::kThm1Plugin: {
      const double l = lemma1_bound(c, in.n, in.g_tilde, in.ebar);
      return c.require(c.C_T1, "C_T1") * l + 0.5 * c.require(c.C_T2, "C_T2") * l * l;
    }
    case BoundKind::kThm1Taylor: {
      const double l = lemma1_bound(c, in.n, in.g_tilde, in.ebar);
      return c.require(c.C_T1, "C_T1") * l +
             2.0 * c.require(c.C_T2, "C_T2") * in.g_tilde * in.g_tilde / (n * n * mu * mu);
    }
    case BoundKind::kCor1: {
      const double cf = c.require(c.C_f, "C_f");
      const double b02 = c.moment(0, 2);
      double out = c.require(c.M, "M") * c.moment(0, 3) / (mu * mu * mu * n * n) + cf * cf * b02 / (mu * mu * n * n);
      if (in.ebar > 0.0) out += c.require(c.C_f_tilde, "C_f_tilde") * in.ebar * b02 / (mu * mu * n);
      return out;
    }
    case BoundKind::kCor2: return lemma1_bound(c, in.n, c.require(c.G, "G"), in.ebar);
    case BoundKind::kNoiseScale: {
      if (!(in.epsilon > 0.0)) throw InvalidInput("noise scale needs epsilon > 0");
      if (!(in.delta > 0.0 && in.delta < 1.0)) throw InvalidInput("noise scale needs delta in (0, 1)");
      const double bound = lemma1_bound(c, in.n, c.require(c.G, "G"), in.ebar);
      return bound * std::sqrt(2.0 * std::log(5.0 / (4.0 * in.delta))) / in.epsilon;
    }
    case BoundKind::kCor3Plugin:
    case BoundKind::kCor3Taylor: {
      const double cf = c.require(c.C_f, "C_f");
      const double ct1 = c.require(c.C_T1, "C_T1");
      const double cl = in.c_ell;
      double out = cf * cf * ct1 * cl / (n * n * mu * mu) + c.require(c.M, "M") * ct1 * cl * cl / (n * n * mu * mu * mu);
      if (in.ebar > 0.0) out += ct1 * c.require(c.C_f_tilde, "C_f_tilde") * in.ebar * cl / (n * mu * mu);
      if (which == BoundKind::kCor3Taylor) out += c.require(c.C_T2, "C_T2") * cl * cl / (n * n * mu * mu);
      return out;
    }
    case BoundKind::kCor4: {
      const double cf = c.require(c.C_f, "C_f");
      const double cl = in.c_ell;
      double out = cf * cf * cf * cl / (n * n * mu * mu) + c.require(c.M, "M") * cf * cl * cl / (n * n * mu * mu * mu);
      if (in.ebar > 0.0) out += cf * c.require(c.C_f_tilde, "C_f_tilde") * cl * in.ebar / (n * mu * mu);
      return out;
    }
  }
  throw InvalidInput("unknown bound");
}

nlohmann::json InfluenceReport::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["estimator"] = estimator;
  j["ebar"] = ebar;
  j["solver"] = {{"kind", stats.solver},
                 {"damping", stats.damping},
                 {"lissa_iterations", stats.lissa_iterations},
                 {"passes",
                  {{"fwd", stats.passes.forward_mode},
                   {"rev", stats.passes.reverse_mode},
                   {"eval", stats.passes.evaluations}}}};
  j["index"] = index;
  j["influence"] = influence;
  j["g"] = g;
  return j;
}

std::string InfluenceReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17) << "index,influence,g\n";
  for (std::size_t r = 0; r < index.size(); ++r) {
    out << index[r] << ',' << influence[r] << ',' << (r < g.size() ? g[r] : 0.0) << '\n';
  }
  return out.str();
}

}  // namespace influence
