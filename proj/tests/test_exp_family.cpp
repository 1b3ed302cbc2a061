#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "influence/errors.hpp"

using namespace influence;
using testing::random_vector;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST_CASE("negative log-likelihood values") {
  const auto cat = ExpFamilyHead::categorical(2);
  CHECK(cat.nll(vec({0, 0}), 0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(cat.nll(vec({std::log(3.0), 0}), 0) == doctest::Approx(-std::log(0.75)).epsilon(1e-14));
  CHECK(ExpFamilyHead::gaussian().nll(vec({1.7}), 1.7) == 0.0);
}

TEST_CASE("logsumexp survives large logits") {
  CHECK(std::isfinite(logsumexp(vec({1000, 999}))));
  CHECK(softmax(vec({1000, 1000}))[0] == doctest::Approx(0.5));
}

TEST_CASE("scores") {
  const auto cat = ExpFamilyHead::categorical(2);
  CHECK((cat.score(vec({0, 0}), 0) - vec({0.5, -0.5})).norm() <= 1e-15);
  CHECK(cat.score(vec({800, -800}), 0).norm() <= 1e-15);
  CHECK(ExpFamilyHead::gaussian().score(vec({1.5}), 2.0)[0] == doctest::Approx(0.5));
}

TEST_CASE("f-Hessians") {
  CHECK(ExpFamilyHead::gaussian().f_hessian(vec({3.0}))(0, 0) == 1.0);
  Matrix expect(2, 2);
  expect << 0.25, -0.25, -0.25, 0.25;
  CHECK((ExpFamilyHead::categorical(2).f_hessian(vec({0, 0})) - expect).norm() <= 1e-15);
  const auto cat4 = ExpFamilyHead::categorical(4);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix h = cat4.f_hessian(random_vector(4, s, 2.0));
    CHECK(h.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("f-Hessian is the covariance of the natural statistic") {
  for (int k = 2; k <= 4; ++k) {
    const auto head = ExpFamilyHead::categorical(k);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Vector f = random_vector(k, 31 * s + k, 1.5);
      const Vector p = softmax(f);
      Vector mean = Vector::Zero(k);
      Vector mean_score = Vector::Zero(k);
      for (int y = 0; y < k; ++y) {
        mean += p[y] * head.natural_statistic(y);
        mean_score += p[y] * head.score(f, y);
      }
      Matrix cov = Matrix::Zero(k, k);
      for (int y = 0; y < k; ++y) {
        const Vector c = head.natural_statistic(y) - mean;
        cov += p[y] * c * c.transpose();
      }
      CHECK((cov - head.f_hessian(f)).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK(mean_score.cwiseAbs().maxCoeff() <= 1e-12);
      CHECK((head.mean_statistic(f) - mean).norm() <= 1e-14);
    }
  }
}

TEST_CASE("f-Hessian operator norm is at most one") {
  for (int k = 2; k <= 5; ++k) {
    const auto head = ExpFamilyHead::categorical(k);
    for (std::uint64_t s = 0; s < 20; ++s) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(head.f_hessian(random_vector(k, s, 3.0)));
      CHECK(es.eigenvalues().maxCoeff() <= head.curvature_bound() + 1e-12);
      CHECK(es.eigenvalues().minCoeff() >= -1e-12);
    }
  }
}

TEST_CASE("f_hessian_apply agrees with the dense matrix") {
  const auto head = ExpFamilyHead::categorical(3);
  const Vector f = random_vector(3, 1);
  const Vector u = random_vector(3, 2);
  CHECK((head.f_hessian_apply(f, u) - head.f_hessian(f) * u).norm() <= 1e-14);
}

TEST_CASE("label and output validation") {
  const auto cat = ExpFamilyHead::categorical(3);
  CHECK_THROWS_AS(cat.nll(vec({0, 0, 0}), 3), InvalidInput);
  CHECK_THROWS_AS(cat.nll(vec({0, 0, 0}), 0.5), InvalidInput);
  CHECK_THROWS_AS(cat.nll(vec({0, 0}), 0), InvalidInput);
  CHECK_THROWS_AS(ExpFamilyHead::categorical(1), InvalidInput);
}

TEST_CASE("linear Gaussian gradient is the residual times x") {
  Model m = Model::linear(3, 1, false);
  const ParamVector w = random_vector(3, 4);
  const Vector x = random_vector(3, 5);
  const double y = 0.7;
  const Vector g = loss_grad(m, ExpFamilyHead::gaussian(), x, y, w);
  CHECK((g - (-(y - w.dot(x)) * x)).norm() <= 1e-14);
}

TEST_CASE("loss gradient vanishes on an interpolated sample") {
  Model m = Model::linear(2, 2, false);
  std::vector<LayerParams> p(1);
  p[0].weight = Matrix::Zero(2, 2);
  p[0].weight(1, 0) = 2000.0;
  p[0].bias = Vector();
  const ParamVector theta = m.flatten(p);
  Vector x(2);
  x << 1.0, 0.0;
  const auto head = ExpFamilyHead::categorical(2);
  CHECK(head.nll(m.forward(x, theta), 1) == 0.0);
  CHECK(loss_grad(m, head, x, 1, theta).norm() == 0.0);
}

TEST_CASE("loss gradient matches finite differences on an MLP") {
  Model m = Model::mlp(3, {5}, 3, Activation::kSelu);
  const auto head = ExpFamilyHead::categorical(3);
  const ParamVector theta = m.init_params(3);
  const Vector x = random_vector(3, 9);
  const Vector g = loss_grad(m, head, x, 2, theta);
  Vector fd(theta.size());
  const double h = 1e-5;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    ParamVector tp = theta, tm = theta;
    tp[j] += h;
    tm[j] -= h;
    fd[j] = (sample_loss(m, head, x, 2, tp) - sample_loss(m, head, x, 2, tm)) / (2 * h);
  }
  CHECK((g - fd).norm() <= 1e-5 * (1.0 + g.norm()));
}

TEST_CASE("ebar_n") {
  Model m = Model::linear(1, 1, false);
  RowMatrix x(3, 1);
  x << 1, 1, 1;
  Vector y(3);
  y << 1.5, 0.75, 1.0;
  const Dataset d = testing::tiny_dataset(x, y);
  const ParamVector theta = Vector::Constant(1, 1.0);
  CHECK(ebar_n(m, ExpFamilyHead::gaussian(), d, theta) == doctest::Approx(0.75).epsilon(1e-14));

  y << 1.0, 1.0, 1.0;
  const Dataset exact = testing::tiny_dataset(x, y);
  CHECK(ebar_n(m, ExpFamilyHead::gaussian(), exact, theta) == 0.0);
}

TEST_CASE("ebar_n is zero on an interpolating classifier") {
  Model m = Model::linear(2, 2, false);
  std::vector<LayerParams> p(1);
  p[0].weight = Matrix::Zero(2, 2);
  p[0].weight(0, 0) = 2000.0;
  p[0].weight(1, 1) = 2000.0;
  p[0].bias = Vector();
  RowMatrix x(4, 2);
  x << 1, 0, 0, 1, 2, 0, 0, 3;
  Vector y(4);
  y << 0, 1, 0, 1;
  const Dataset d = testing::tiny_dataset(x, y);
  CHECK(ebar_n(m, ExpFamilyHead::categorical(2), d, m.flatten(p)) == 0.0);
}

TEST_CASE("summed gradient is bounded by C_f / n times ebar on linear models") {
  const Dataset d = testing::classification_data(60, 3, 4);
  Model m = Model::linear(3, 2, false);
  const auto head = ExpFamilyHead::categorical(2);
  const ParamVector theta = m.init_params(1);
  double cf = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) cf = std::max(cf, d.x(i).norm());
  const ParamVector g = data_gradient(m, head, d, theta);
  CHECK(g.norm() <= cf / static_cast<double>(d.size()) * ebar_n(m, head, d, theta) + 1e-12);
}

TEST_CASE("head JSON round trip") {
  const auto cat = ExpFamilyHead::categorical(4);
  CHECK(ExpFamilyHead::from_json(cat.to_json()) == cat);
  CHECK(ExpFamilyHead::from_json(nlohmann::json{{"head", "gaussian"}}) == ExpFamilyHead::gaussian());
  CHECK_THROWS_AS(ExpFamilyHead::from_json(nlohmann::json{{"head", "poisson"}}), ParseError);
}

TEST_CASE("fairness output reduction") {
  const auto cat = ExpFamilyHead::categorical(2);
  const Vector f = vec({0.3, -0.4});
  CHECK(cat.reduce_output(f) == doctest::Approx(softmax(f)[1]));
  const double h = 1e-6;
  Vector fd(2);
  for (int j = 0; j < 2; ++j) {
    Vector fp = f, fm = f;
    fp[j] += h;
    fm[j] -= h;
    fd[j] = (cat.reduce_output(fp) - cat.reduce_output(fm)) / (2 * h);
  }
  CHECK((cat.reduce_output_gradient(f) - fd).norm() <= 1e-8);
  CHECK(ExpFamilyHead::gaussian().reduce_output(vec({2.5})) == 2.5);
}
