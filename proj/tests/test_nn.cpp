#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "influence/errors.hpp"

using namespace influence;
using testing::random_vector;

namespace {

Model identity_linear() {
  Model m = Model::linear(2, 2);
  return m;
}

double selu_ref(double z) { return z > 0 ? kSeluScale * z : kSeluScale * kSeluAlpha * (std::exp(z) - 1.0); }

}  // namespace

TEST_CASE("linear forward with identity weights returns the input") {
  Model m = identity_linear();
  std::vector<LayerParams> p(1);
  p[0].weight = Matrix::Identity(2, 2);
  p[0].bias = Vector::Zero(2);
  const ParamVector theta = m.flatten(p);
  Vector x(2);
  x << 2, 3;
  CHECK((m.forward(x, theta) - x).norm() == 0.0);
}

TEST_CASE("one-hidden relu composition on the positive branch") {
  Model m = Model::mlp(1, {1}, 1, Activation::kRelu);
  std::vector<LayerParams> p(2);
  p[0].weight = Matrix::Constant(1, 1, 1.0);
  p[0].bias = Vector::Zero(1);
  p[1].weight = Matrix::Constant(1, 1, 2.0);
  p[1].bias = Vector::Zero(1);
  Vector x = Vector::Constant(1, 1.0);
  CHECK(m.forward(x, m.flatten(p))[0] == doctest::Approx(2.0));
}

TEST_CASE("selu forward matches a straight-line re-evaluation") {
  Model m = Model::mlp(3, {4, 5}, 2, Activation::kSelu);
  const ParamVector theta = random_vector(m.num_params(), 7);
  const auto p = m.unflatten(theta);
  Vector x(3);
  x << 0.3, -1.2, 0.8;
  Vector a = x;
  for (std::size_t l = 0; l < p.size(); ++l) {
    Vector z(p[l].weight.rows());
    for (Eigen::Index r = 0; r < z.size(); ++r) {
      double s = p[l].bias[r];
      for (Eigen::Index c = 0; c < a.size(); ++c) s += p[l].weight(r, c) * a[c];
      z[r] = l + 1 < p.size() ? selu_ref(s) : s;
    }
    a = z;
  }
  CHECK((m.forward(x, theta) - a).norm() <= 1e-14);
}

TEST_CASE("parameter counts") {
  CHECK(Model::linear(3, 2).num_params() == 8);
  CHECK(Model::mlp(14, {1000}, 2, Activation::kRelu).num_params() == 14 * 1000 + 1000 + 1000 * 2 + 2);
}

TEST_CASE("flatten and unflatten round trip") {
  Model m = Model::mlp(3, {4}, 2, Activation::kSelu);
  const ParamVector v = random_vector(m.num_params(), 1);
  CHECK((m.flatten(m.unflatten(v)) - v).norm() == 0.0);
  CHECK_THROWS_AS(m.unflatten(Vector::Zero(3)), InvalidInput);
}

TEST_CASE("vjp and jvp on a bias-free linear map") {
  Model m = Model::linear(2, 2, false);
  const ParamVector theta = random_vector(4, 3);
  Vector x(2);
  x << 1, 2;
  Vector u(2);
  u << 1, 0;
  Vector expect(4);
  expect << 1, 2, 0, 0;
  CHECK((m.vjp(x, theta, u) - expect).norm() == 0.0);
  CHECK(m.vjp(x, theta, Vector::Zero(2)).norm() == 0.0);

  Vector a = Vector::Zero(4);
  a[0] = 1.0;
  Vector df(2);
  df << 1, 0;
  CHECK((m.jvp(x, theta, a) - df).norm() == 0.0);
  CHECK(m.jvp(x, theta, Vector::Zero(4)).norm() == 0.0);
}

TEST_CASE("vjp and jvp are adjoint on MLPs") {
  for (Activation act : {Activation::kRelu, Activation::kSelu}) {
    Model m = Model::mlp(4, {6, 5}, 3, act);
    const ParamVector theta = m.init_params(11);
    const Vector x = random_vector(4, 12);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Vector u = random_vector(3, 100 + s);
      const Vector a = random_vector(m.num_params(), 200 + s);
      const double lhs = m.vjp(x, theta, u).dot(a);
      const double rhs = u.dot(m.jvp(x, theta, a));
      CHECK(std::abs(lhs - rhs) <= 1e-8 * (1.0 + std::abs(lhs)));
    }
  }
}

TEST_CASE("jvp matches central differences") {
  Model m = Model::mlp(4, {7}, 2, Activation::kSelu);
  const ParamVector theta = m.init_params(5);
  const Vector x = random_vector(4, 6);
  const Vector a = random_vector(m.num_params(), 7);
  const double eps = 1e-4;
  const Vector fd = (m.forward(x, theta + eps * a) - m.forward(x, theta - eps * a)) / (2 * eps);
  const Vector j = m.jvp(x, theta, a);
  CHECK((j - fd).norm() <= 1e-5 * (1.0 + j.norm()));
}

TEST_CASE("jacobian rows agree with vjp and columns with jvp") {
  Model m = Model::mlp(3, {4}, 2, Activation::kRelu);
  const ParamVector theta = m.init_params(2);
  const Vector x = random_vector(3, 3);
  const Matrix J = m.jacobian(x, theta);
  const Vector a = random_vector(m.num_params(), 4);
  CHECK((J * a - m.jvp(x, theta, a)).norm() <= 1e-12);
}

TEST_CASE("pass counter records one pass per primitive") {
  Model m = Model::mlp(3, {4}, 2, Activation::kRelu);
  const ParamVector theta = m.init_params(0);
  const Vector x = random_vector(3, 1);
  PassCounter c;
  m.jvp(x, theta, random_vector(m.num_params(), 2), &c);
  CHECK(c.snapshot().forward_mode == 1);
  CHECK(c.snapshot().reverse_mode == 0);
  m.vjp(x, theta, random_vector(2, 3), &c);
  CHECK(c.snapshot().reverse_mode == 1);
}

TEST_CASE("dimension mismatches are rejected") {
  Model m = Model::linear(3, 2);
  CHECK_THROWS_AS(m.forward(Vector::Zero(2), Vector::Zero(8)), InvalidInput);
  CHECK_THROWS_AS(m.forward(Vector::Zero(3), Vector::Zero(7)), InvalidInput);
  CHECK_THROWS_AS(Model::mlp(0, {2}, 1, Activation::kRelu), InvalidInput);
}

TEST_CASE("model JSON round trip") {
  Model m = Model::mlp(3, {4, 2}, 2, Activation::kSelu);
  CHECK(Model::from_json(m.to_json()) == m);
  CHECK_THROWS_AS(Model::from_json(nlohmann::json::object()), ParseError);
}
