#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "influence/errors.hpp"

using namespace influence;
using testing::random_vector;

namespace {

struct Ridge {
  Dataset data;
  Model model;
  ExpFamilyHead head = ExpFamilyHead::gaussian();
  Regularizer reg = Regularizer::l2(0.05);
  ParamVector theta;
  std::unique_ptr<InfluenceProblem> problem;

  Ridge(std::size_t n, int d, std::uint64_t seed)
      : data(testing::regression_data(n, d, seed)), model(Model::linear(d, 1)) {
    theta = testing::fit_exact(model, head, data, reg);
    problem = std::make_unique<InfluenceProblem>(model, head, data, theta, reg);
  }
};

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// Logistic data with a binary sensitive attribute.
struct Fair {
  Dataset data = make_biased_groups(600, 5, 0.3, 3);
  Model model = Model::linear(5, 2);
  ExpFamilyHead head = ExpFamilyHead::categorical(2);
  Regularizer reg = Regularizer::l2(1e-2);
  ParamVector theta = testing::fit_exact(model, head, data, reg);
  InfluenceProblem problem{model, head, data, theta, reg};
};

}  // namespace

TEST_CASE("fold sampling") {
  const auto folds = sample_folds(20, 4, 5, 9);
  CHECK(folds.size() == 5);
  std::set<std::size_t> all;
  for (const auto& f : folds) {
    CHECK(f.size() == 4);
    CHECK(std::is_sorted(f.begin(), f.end()));
    all.insert(f.begin(), f.end());
  }
  CHECK(all.size() == 20);  // disjoint when folds * k <= n
  CHECK(sample_folds(20, 4, 5, 9) == folds);
  CHECK(sample_folds(10, 6, 3, 1).size() == 3);
  CHECK_THROWS_AS(sample_folds(5, 5, 1, 0), InvalidInput);
  CHECK_THROWS_AS(sample_folds(5, 0, 1, 0), InvalidInput);
}

TEST_CASE("ridge LOOCV approximation is exact") {
  Ridge r(30, 3, 4);
  InfluenceEngine e(*r.problem, CurvatureKind::kFisher, testing::dense_config());
  const auto approx = acv(e, 1, 30, 0);
  oracle::RetrainConfig cfg;
  cfg.tolerance = 1e-12;
  const auto exact = oracle::exact_cv(r.model, r.head, r.data, r.reg, 1, 30, 0, cfg);
  CHECK(approx.folds == exact.folds);
  CHECK(std::abs(approx.estimate - exact.estimate) <= 1e-8);
}

TEST_CASE("zero-update estimator scores held-out loss at theta hat") {
  Ridge r(25, 3, 5);
  const auto res = acv(*r.problem, 5, 3, 1, [&](const WeightVector&) { return r.theta; });
  double expect = 0.0;
  for (const auto& f : res.folds) expect += heldout_loss(r.model, r.head, r.data, r.theta, f);
  CHECK(res.estimate == doctest::Approx(expect / 3.0).epsilon(1e-14));
  InfluenceEngine e(*r.problem, CurvatureKind::kFisher, testing::dense_config());
  CHECK_THROWS_AS(acv(e, 25, 1, 0), InvalidInput);
}

TEST_CASE("unlearning") {
  Ridge r(30, 3, 6);
  InfluenceEngine e(*r.problem, CurvatureKind::kHessian, testing::dense_config());
  CHECK((unlearn(e, {}).theta - r.theta).norm() == 0.0);

  UnlearnRequest one;
  one.removed = {11};
  oracle::RetrainConfig cfg;
  cfg.tolerance = 1e-12;
  const ParamVector truth =
      oracle::retrain(r.model, r.head, r.data, WeightVector::leave_one_out(30, 11), r.reg, cfg);
  CHECK((unlearn(e, one).theta - truth).norm() <= 1e-8);

  NoiseRequest nr;
  nr.epsilon = 0.5;
  nr.delta = 0.01;
  nr.seed = 42;
  nr.constants.mu = 0.1;
  nr.constants.M = 0.0;
  nr.constants.C_f = 2.0;
  nr.constants.C_f_tilde = 0.0;
  nr.constants.G = 3.0;
  one.noise = nr;
  const auto noisy = unlearn(e, one);
  const double lemma = 2.0 * 4.0 * 3.0 / (900.0 * 0.01);
  const double c = lemma * std::sqrt(2.0 * std::log(5.0 / 0.04)) / 0.5;
  CHECK(noisy.noise_variance == doctest::Approx(c).epsilon(1e-13));
  std::mt19937_64 rng(42);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector zeta(noisy.theta.size());
  for (Eigen::Index j = 0; j < zeta.size(); ++j) zeta[j] = normal(rng);
  CHECK((noisy.theta - noisy.theta_noiseless - std::sqrt(c) * zeta).norm() <= 1e-12);
  CHECK((noisy.theta_noiseless - truth).norm() <= 1e-8);
}

TEST_CASE("attribution scores") {
  const Dataset d = testing::classification_data(40, 3, 7);
  Model m = Model::linear(3, 2);
  const auto head = ExpFamilyHead::categorical(2);
  const auto reg = Regularizer::l2(0.01);
  const ParamVector theta = testing::fit_exact(m, head, d, reg);
  InfluenceProblem p(m, head, d, theta, reg);
  InfluenceEngine e(p, CurvatureKind::kFisher, testing::dense_config());
  for (std::size_t i : {0u, 5u, 17u}) {
    CHECK(attribution_score(e, d.x(i), d.y(i), i) >= 0.0);
  }
  const Vector batch = attribution_scores(e, d.x(3), d.y(3));
  CHECK(batch.size() == 40);
  for (std::size_t i : {0u, 9u, 33u}) {
    CHECK(std::abs(batch[static_cast<Eigen::Index>(i)] - attribution_score(e, d.x(3), d.y(3), i)) <= 1e-12);
  }
}

TEST_CASE("attribution is zero for A-orthogonal gradients") {
  // Identity curvature: orthogonal features give orthogonal gradients.
  RowMatrix x(2, 2);
  x << std::sqrt(2.0), 0, 0, std::sqrt(2.0);
  const Dataset d = testing::tiny_dataset(x, vec({1.0, 1.0}));
  Model m = Model::linear(2, 1, false);
  InfluenceProblem p(m, ExpFamilyHead::gaussian(), d, ParamVector::Zero(2));
  InfluenceEngine e(p, CurvatureKind::kFisher, testing::dense_config());
  CHECK(attribution_score(e, d.x(0), d.y(0), 1) == 0.0);
  CHECK(attribution_score(e, d.x(0), d.y(0), 0) > 0.0);
}

TEST_CASE("demographic parity from outputs") {
  CHECK(dp_from_outputs(vec({1, 3, 2}), vec({0, 0, 1})) == 0.0);
  CHECK(dp_from_outputs(vec({0, 1, 1, 1}), vec({0, 0, 1, 1})) == 0.5);
  CHECK(dp_from_outputs(vec({4, 4, 4}), vec({0, 1, 1})) == 0.0);
  CHECK_THROWS_AS(dp_from_outputs(vec({1, 2}), vec({0, 2})), InvalidInput);
  CHECK_THROWS_AS(dp_from_outputs(vec({1, 2}), vec({0, 0})), InvalidInput);
}

TEST_CASE("chi-square from outputs") {
  Vector s(100), f(100);
  for (int i = 0; i < 100; ++i) {
    s[i] = i % 2;
    f[i] = i % 2;
  }
  CHECK(chi2_from_outputs(f, s, 2) == doctest::Approx(1.0).epsilon(1e-14));
  bool degenerate = false;
  CHECK(chi2_from_outputs(Vector::Constant(100, 0.3), s, 10, &degenerate) == 0.0);
  CHECK(degenerate);

  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.5);
  Vector fr(10000), sr(10000);
  for (int i = 0; i < 10000; ++i) {
    fr[i] = normal(rng);
    sr[i] = coin(rng) ? 1.0 : 0.0;
  }
  CHECK(chi2_from_outputs(fr, sr, 10) <= 0.02);
}

TEST_CASE("quantile edges") {
  const auto e = quantile_edges(vec({1, 2, 3, 4}), 2);
  REQUIRE(e.size() == 1);
  CHECK(e[0] == 2.0);
  CHECK(quantile_edges(vec({5, 5, 5}), 4).empty());
}

TEST_CASE("fairness metrics on a model") {
  Fair f;
  const auto dp = dp_metric(f.model, f.head, f.data, f.theta, true);
  CHECK(dp.value > 0.0);
  REQUIRE(dp.gradient);
  // gradient agrees with finite differences of the smooth DP
  const Vector v = random_vector(f.theta.size(), 3);
  const double h = 1e-6;
  const double fd = (dp_metric(f.model, f.head, f.data, f.theta + h * v).value -
                     dp_metric(f.model, f.head, f.data, f.theta - h * v).value) /
                    (2 * h);
  CHECK(std::abs(dp.gradient->dot(v) - fd) <= 1e-6);

  const auto chi = chi2_metric(f.model, f.head, f.data, f.theta, 10, true);
  CHECK(chi.value > 0.0);
  CHECK(chi.gradient->allFinite());

  Dataset nos = f.data;
  nos.sensitive.reset();
  CHECK_THROWS_AS(dp_metric(f.model, f.head, nos, f.theta), InvalidInput);
}

TEST_CASE("constant model output gives zero DP") {
  Fair f;
  ParamVector theta = ParamVector::Zero(f.theta.size());
  theta[theta.size() - 1] = 0.7;  // bias only
  CHECK(dp_metric(f.model, f.head, f.data, theta).value <= 1e-15);
}

TEST_CASE("fairness pipeline with nothing to remove leaves theta unchanged") {
  RowMatrix x = RowMatrix::Zero(6, 2);
  Dataset d = testing::tiny_dataset(x, vec({0, 1, 0, 1, 1, 0}));
  d.sensitive = vec({0, 0, 0, 1, 1, 1});
  Model m = Model::linear(2, 2);
  const auto head = ExpFamilyHead::categorical(2);
  const auto reg = Regularizer::l2(0.1);
  const ParamVector theta = testing::fit_exact(m, head, d, reg);
  InfluenceProblem p(m, head, d, theta, reg);
  InfluenceEngine e(p, CurvatureKind::kFisher, testing::dense_config());
  const auto r = fairness_pipeline(e, {});
  CHECK(r.selected.empty());
  CHECK((r.theta_after - theta).norm() == 0.0);
  CHECK(r.metric_after == r.metric_before);
  CHECK(r.perf_after == r.perf_before);
}

TEST_CASE("fairness pipeline improves DP on biased groups and both methods agree") {
  Fair f;
  // One step with the shared curvature at the full-data fit; the selected set
  // is large, so the exact reweighted retrain is a different object.
  InfluenceEngine fe(f.problem, CurvatureKind::kFisher, testing::dense_config(CurvatureScope::kFull));
  InfluenceEngine he(f.problem, CurvatureKind::kHessian, testing::dense_config(CurvatureScope::kFull));
  const auto rf = fairness_pipeline(fe, {});
  const auto rh = fairness_pipeline(he, {});
  CHECK(rf.metric_after <= rf.metric_before);
  CHECK(rh.metric_after <= rh.metric_before);
  std::vector<std::size_t> inter;
  std::set_intersection(rf.selected.begin(), rf.selected.end(), rh.selected.begin(), rh.selected.end(),
                        std::back_inserter(inter));
  const double uni = static_cast<double>(rf.selected.size() + rh.selected.size() - inter.size());
  CHECK(static_cast<double>(inter.size()) / uni >= 0.7);
  // removal effect sign: selected points have positive upweighting influence
  for (auto i : rf.selected) CHECK(rf.influence[static_cast<Eigen::Index>(i)] > 0.0);
}

TEST_CASE("fairness spec validation") {
  FairnessSpec s;
  s.bins = 1;
  CHECK_THROWS_AS(s.validate(), InvalidInput);
  CHECK(parse_fairness_metric("chi2") == FairnessMetric::kChiSquare);
  CHECK_THROWS_AS(parse_fairness_metric("eo"), ParseError);
}
