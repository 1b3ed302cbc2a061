#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "influence/errors.hpp"

using namespace influence;
using testing::random_vector;

namespace {

struct Ridge {
  Dataset data = testing::regression_data(40, 4, 21);
  Model model = Model::linear(4, 1);
  ExpFamilyHead head = ExpFamilyHead::gaussian();
  Regularizer reg = Regularizer::l2(0.05);
  ParamVector theta = testing::fit_exact(model, head, data, reg);
  InfluenceProblem problem{model, head, data, theta, reg};
};

ParamVector retrain(const Ridge& r, const WeightVector& w) {
  oracle::RetrainConfig cfg;
  cfg.tolerance = 1e-12;
  return oracle::retrain(r.model, r.head, r.data, w, r.reg, cfg);
}

}  // namespace

TEST_CASE("weight vectors") {
  const auto loo = WeightVector::leave_one_out(5, 2);
  CHECK(loo.values().sum() == 4.0);
  CHECK(loo[2] == 0.0);
  CHECK(WeightVector::all_ones(3).is_all_ones());
  const std::vector<std::size_t> k = {0, 4};
  CHECK(WeightVector::leave_k_out(5, k).values().sum() == 3.0);
  CHECK_THROWS_AS(WeightVector::leave_one_out(3, 3), InvalidInput);
  const std::vector<std::size_t> dup = {1, 1};
  CHECK_THROWS_AS(WeightVector::leave_k_out(3, dup), InvalidInput);
  CHECK_THROWS_AS(WeightVector(Vector::Constant(2, -1.0)), InvalidInput);
}

TEST_CASE("regularizer parsing") {
  CHECK(Regularizer::parse("none").kind == Regularizer::Kind::kNone);
  const auto l2 = Regularizer::parse("l2:0.5");
  CHECK(l2.kind == Regularizer::Kind::kL2);
  CHECK(l2.lambda == 0.5);
  CHECK(Regularizer::parse("l1:1e-3").lambda == 1e-3);
  CHECK_THROWS_AS(Regularizer::parse("l3:1"), ParseError);
  CHECK_THROWS_AS(Regularizer::parse("l2:-1"), InvalidInput);
  CHECK(Regularizer::parse(l2.to_string()).lambda == 0.5);
}

TEST_CASE("b vector") {
  Ridge r;
  const std::size_t n = r.data.size();
  CHECK(b_vector(r.model, r.head, r.data, r.theta, WeightVector::all_ones(n)).norm() == 0.0);
  const Vector b3 = b_vector(r.model, r.head, r.data, r.theta, WeightVector::leave_one_out(n, 3));
  const Vector g3 = loss_grad(r.model, r.head, r.data.x(3), r.data.y(3), r.theta);
  CHECK((b3 + g3 / static_cast<double>(n)).norm() <= 1e-15);
  const Vector b5 = b_vector(r.model, r.head, r.data, r.theta, WeightVector::leave_one_out(n, 5));
  const std::vector<std::size_t> both = {3, 5};
  const Vector b35 = b_vector(r.model, r.head, r.data, r.theta, WeightVector::leave_k_out(n, both));
  CHECK((b35 - b3 - b5).norm() <= 1e-15);
  Vector w = Vector::Ones(static_cast<Eigen::Index>(n));
  w[0] = 0.5;
  w[1] = 1.5;
  Vector w2 = Vector::Ones(static_cast<Eigen::Index>(n)) + 2.0 * (w - Vector::Ones(static_cast<Eigen::Index>(n)));
  CHECK((b_vector(r.model, r.head, r.data, r.theta, WeightVector(w2)) -
         2.0 * b_vector(r.model, r.head, r.data, r.theta, WeightVector(w)))
            .norm() <= 1e-14);
  CHECK_THROWS_AS(b_vector(r.model, r.head, r.data, r.theta, WeightVector::all_ones(n + 1)), InvalidInput);
}

TEST_CASE("second-order estimate with zero b returns theta hat") {
  Ridge r;
  CurvatureSolver solver(r.problem, CurvatureKind::kHessian, testing::dense_config());
  CHECK((second_order_estimate(solver, r.theta, Vector::Zero(r.theta.size())) - r.theta).norm() == 0.0);
}

TEST_CASE("ridge leave-one-out is exact for both curvature kinds") {
  Ridge r;
  InfluenceEngine hess(r.problem, CurvatureKind::kHessian, testing::dense_config());
  InfluenceEngine fish(r.problem, CurvatureKind::kFisher, testing::dense_config());
  for (std::size_t i : {0u, 7u, 39u}) {
    const auto w = WeightVector::leave_one_out(r.data.size(), i);
    const ParamVector truth = retrain(r, w);
    CHECK((hess.estimate(w) - truth).norm() <= 1e-8);
    CHECK((fish.estimate(w) - truth).norm() <= 1e-8);
  }
}

TEST_CASE("Fisher and Hessian estimates coincide for linear models without regularization") {
  const Dataset d = testing::classification_data(50, 3, 2);
  Model m = Model::linear(3, 2);
  const auto head = ExpFamilyHead::categorical(2);
  const ParamVector theta = testing::fit_exact(m, head, d, Regularizer::l2(1e-3));
  InfluenceProblem p(m, head, d, theta);
  SolverConfig damped = testing::dense_config();
  // softmax overparameterization leaves a null direction; damp both equally
  damped.damping = 1e-6;
  InfluenceEngine fd(p, CurvatureKind::kFisher, damped);
  InfluenceEngine hd(p, CurvatureKind::kHessian, damped);
  const auto w = WeightVector::leave_one_out(d.size(), 4);
  CHECK((fd.estimate(w) - hd.estimate(w)).norm() <= 1e-10 * (1.0 + theta.norm()));
}

TEST_CASE("estimate with all-ones weights returns theta hat") {
  Ridge r;
  InfluenceEngine e(r.problem, CurvatureKind::kFisher, testing::dense_config());
  CHECK((e.estimate(WeightVector::all_ones(r.data.size())) - r.theta).norm() == 0.0);
}

TEST_CASE("prox closed forms") {
  Vector v(2);
  v << 2, -2;
  CHECK((prox(nullptr, Regularizer::l2(0.5), v) - Vector(Eigen::Vector2d(1, -1))).norm() <= 1e-15);
  Vector w(2);
  w << 3, -0.5;
  CHECK((prox(nullptr, Regularizer::l1(1.0), w) - Vector(Eigen::Vector2d(2, 0))).norm() == 0.0);
  CHECK((prox(nullptr, Regularizer::l1(0.0), w) - w).norm() == 0.0);
  CHECK((prox(nullptr, Regularizer::none(), w) - w).norm() == 0.0);
  const Matrix eye = Matrix::Identity(2, 2);
  CHECK((prox(&eye, Regularizer::l1(1.0), w) - soft_threshold(w, 1.0)).norm() <= 1e-12);
}

TEST_CASE("L2 prox closed form matches coordinate descent under a dense metric") {
  Matrix b = Matrix::Random(5, 5);
  const Matrix D = b * b.transpose() + 0.5 * Matrix::Identity(5, 5);
  const Vector v = random_vector(5, 3);
  const auto reg = Regularizer::l2(0.3);
  CHECK((prox(&D, reg, v) - prox_coordinate_descent(D, reg, v)).norm() <= 1e-8);
}

TEST_CASE("L1 prox under a dense metric satisfies the optimality conditions") {
  Matrix b = Matrix::Random(6, 6);
  const Matrix D = b * b.transpose() + 0.2 * Matrix::Identity(6, 6);
  const Vector v = random_vector(6, 4, 2.0);
  const double lambda = 0.7;
  const Vector t = prox(&D, Regularizer::l1(lambda), v);
  // subgradient of 0.5 (v-t)^T D (v-t) + lambda |t|_1
  const Vector g = D * (t - v);
  for (Eigen::Index j = 0; j < 6; ++j) {
    if (t[j] != 0.0) {
      CHECK(std::abs(g[j] + lambda * (t[j] > 0 ? 1.0 : -1.0)) <= 1e-6);
    } else {
      CHECK(std::abs(g[j]) <= lambda + 1e-6);
    }
  }
  CHECK_THROWS_AS(prox_coordinate_descent(-D, Regularizer::l1(1.0), v), NumericalError);
}

TEST_CASE("L1 prox does not hurt on a linear-Gaussian toy") {
  const Dataset d = testing::regression_data(20, 5, 8);
  Model m = Model::linear(5, 1);
  const auto head = ExpFamilyHead::gaussian();
  const auto reg = Regularizer::l1(0.05);
  const ParamVector theta = testing::fit_exact(m, head, d, reg);
  InfluenceProblem p(m, head, d, theta, reg);
  InfluenceEngine e(p, CurvatureKind::kFisher, testing::dense_config());
  int better = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto w = WeightVector::leave_one_out(d.size(), i);
    oracle::RetrainConfig cfg;
    cfg.tolerance = 1e-12;
    const ParamVector truth = oracle::retrain(m, head, d, w, reg, cfg);
    const double with = (e.estimate(w) - truth).norm();
    const double without = (e.newton_step(w) - truth).norm();
    if (with <= without + 1e-12) ++better;
  }
  CHECK(better == static_cast<int>(d.size()));
}

TEST_CASE("influence estimators") {
  const ParamVector th = random_vector(3, 1);
  const ParamVector tt = random_vector(3, 2);
  auto identity = [](const ParamVector& t) -> Vector { return t; };
  CHECK((influence_estimate(EstimatorMode::kPlugin, identity, th, tt) - tt).norm() == 0.0);

  auto quad = [](const ParamVector& t) { return 0.5 * t.squaredNorm() + t.sum(); };
  const ParamVector grad = th + Vector::Ones(3);
  CHECK(influence_estimate(EstimatorMode::kLinearized, quad, th, th, &grad) == quad(th));
  CHECK_THROWS_AS(influence_estimate(EstimatorMode::kLinearized, quad, th, tt), InvalidInput);

  // C_T2 = 1 for this quadratic
  const ParamVector small = th + 1e-2 * random_vector(3, 5);
  const double gap = std::abs(influence_estimate(EstimatorMode::kPlugin, quad, th, small) -
                              influence_estimate(EstimatorMode::kLinearized, quad, th, small, &grad));
  CHECK(gap <= 0.5 * (small - th).squaredNorm() + 1e-15);
}

TEST_CASE("bound arithmetic") {
  BoundConstants c;
  c.mu = 1.0;
  c.M = 1.0;
  c.C_f = 1.0;
  c.C_f_tilde = 1.0;
  CHECK(lemma1_bound(c, 10, 1.0, 1.0) == doctest::Approx(0.23).epsilon(1e-14));

  BoundConstants q;
  q.mu = 2.0;
  q.M = 0.0;
  q.C_f = 3.0;
  q.C_f_tilde = 5.0;
  CHECK(lemma1_bound(q, 7, 0.4, 0.0) == doctest::Approx(2.0 * 9.0 * 0.4 / (49.0 * 4.0)).epsilon(1e-14));

  BoundConstants g = c;
  g.G = 1.0;
  BoundInputs in;
  in.n = 10;
  in.ebar = 1.0;
  in.epsilon = 1.0;
  in.delta = 0.05;
  CHECK(bound_evaluator(BoundKind::kNoiseScale, g, in) ==
        doctest::Approx(0.23 * std::sqrt(2.0 * std::log(25.0))).epsilon(1e-14));
  in.delta = 1.0;
  CHECK_THROWS_AS(bound_evaluator(BoundKind::kNoiseScale, g, in), InvalidInput);
  BoundConstants bad = c;
  bad.mu = 0.0;
  CHECK_THROWS_AS(lemma1_bound(bad, 10, 1.0, 1.0), InvalidInput);
  BoundConstants missing;
  missing.mu = 1.0;
  CHECK_THROWS_AS(lemma1_bound(missing, 10, 1.0, 1.0), InvalidInput);
}

TEST_CASE("corollary bounds") {
  BoundConstants c;
  c.mu = 2.0;
  c.M = 0.5;
  c.C_f = 1.5;
  c.C_f_tilde = 0.7;
  c.C_T1 = 1.1;
  c.C_T2 = 0.3;
  c.L = 0.2;
  c.B[{0, 2}] = 4.0;
  c.B[{0, 3}] = 8.0;
  BoundInputs in;
  in.n = 20;
  in.ebar = 3.0;
  in.c_ell = 0.9;
  const double n = 20, mu = 2, M = 0.5, cf = 1.5, ct = 0.7, t1 = 1.1, t2 = 0.3, e = 3, cl = 0.9;
  CHECK(bound_evaluator(BoundKind::kCor1, c, in) ==
        doctest::Approx(M * 8 / (mu * mu * mu * n * n) + cf * cf * 4 / (mu * mu * n * n) + ct * e * 4 / (mu * mu * n)));
  const double cor3 = cf * cf * t1 * cl / (n * n * mu * mu) + M * t1 * cl * cl / (n * n * mu * mu * mu) +
                      t1 * ct * e * cl / (n * mu * mu);
  CHECK(bound_evaluator(BoundKind::kCor3Plugin, c, in) == doctest::Approx(cor3));
  CHECK(bound_evaluator(BoundKind::kCor3Taylor, c, in) ==
        doctest::Approx(cor3 + t2 * cl * cl / (n * n * mu * mu)));
  CHECK(bound_evaluator(BoundKind::kCor4, c, in) ==
        doctest::Approx(cf * cf * cf * cl / (n * n * mu * mu) + M * cf * cl * cl / (n * n * mu * mu * mu) +
                        cf * ct * cl * e / (n * mu * mu)));
  in.g_tilde = 0.6;
  const double g = 0.6;
  const double l = 2 * cf * cf * g / (n * n * mu * mu) + M * g * g / (n * n * mu * mu * mu) + 2 * g * ct * e / (n * mu * mu);
  CHECK(bound_evaluator(BoundKind::kLemma1, c, in) == doctest::Approx(l));
  CHECK(bound_evaluator(BoundKind::kThm1Plugin, c, in) == doctest::Approx(t1 * l + 0.5 * t2 * l * l));
  CHECK(bound_evaluator(BoundKind::kThm1Taylor, c, in) ==
        doctest::Approx(t1 * l + 2 * t2 * g * g / (n * n * mu * mu)));
  CHECK(parse_bound_kind("cor2") == BoundKind::kCor2);
  CHECK_THROWS_AS(parse_bound_kind("cor9"), ParseError);
}

TEST_CASE("bound constants JSON round trip") {
  BoundConstants c;
  c.mu = 0.5;
  c.G = 2.0;
  c.B[{0, 2}] = 1.5;
  const auto back = BoundConstants::from_json(c.to_json());
  CHECK(*back.mu == 0.5);
  CHECK(*back.G == 2.0);
  CHECK(back.moment(0, 2) == 1.5);
  CHECK(!back.M);
}

TEST_CASE("auto damping rescues a singular curvature") {
  const Dataset d = testing::regression_data(3, 6, 2);
  Model m = Model::linear(6, 1);
  InfluenceProblem p(m, ExpFamilyHead::gaussian(), d, ParamVector::Zero(7));
  SolverConfig cfg;
  cfg.method = SolverConfig::Method::kDense;
  CurvatureSolver s(p, CurvatureKind::kFisher, cfg);
  const Vector x = s.solve(Vector::Ones(7));
  CHECK(x.allFinite());
  CHECK(s.damping() > 0.0);
  cfg.auto_damping = false;
  CurvatureSolver strict(p, CurvatureKind::kFisher, cfg);
  CHECK_THROWS_AS(strict.solve(Vector::Ones(7)), NumericalError);
}

TEST_CASE("report serialization") {
  InfluenceReport r;
  r.method = "fisher";
  r.estimator = "plugin";
  r.index = {0, 1};
  r.influence = {0.5, -0.25};
  r.g = {1.0, 2.0};
  CHECK(r.to_csv() == "index,influence,g\n0,0.5,1\n1,-0.25,2\n");
  CHECK(r.to_json()["method"] == "fisher");
}
