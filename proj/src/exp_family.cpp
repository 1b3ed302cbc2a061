#include "influence/exp_family.hpp"

#include <cmath>

#include "influence/errors.hpp"

namespace influence {

double logsumexp(const Vector& f) {
  const double m = f.maxCoeff();
  return m + std::log((f.array() - m).exp().sum());
}

Vector softmax(const Vector& f) {
  Vector p = (f.array() - f.maxCoeff()).exp();
  return p / p.sum();
}

ExpFamilyHead ExpFamilyHead::categorical(int classes) {
  if (classes < 2) throw InvalidInput("categorical head needs at least 2 classes");
  return ExpFamilyHead(Kind::kCategorical, classes);
}

ExpFamilyHead ExpFamilyHead::gaussian() { return ExpFamilyHead(Kind::kGaussian, 1); }

void ExpFamilyHead::validate_label(double y) const {
  if (!std::isfinite(y)) throw InvalidInput("label is not finite");
  if (kind_ == Kind::kCategorical) {
    if (y != std::floor(y) || y < 0 || y >= classes_) {
      throw InvalidInput("label " + std::to_string(y) + " outside [0, " + std::to_string(classes_) + ")");
    }
  }
}

void ExpFamilyHead::validate_output(const Vector& f) const {
  if (f.size() != dim()) {
    throw InvalidInput("head expects " + std::to_string(dim()) + " natural parameters, got " +
                       std::to_string(f.size()));
  }
}

double ExpFamilyHead::nll(const Vector& f, double y) const {
  validate_output(f);
  validate_label(y);
  if (kind_ == Kind::kGaussian) {
    const double r = y - f[0];
    return 0.5 * r * r;
  }
  return logsumexp(f) - f[static_cast<Eigen::Index>(y)];
}

Vector ExpFamilyHead::natural_statistic(double y) const {
  validate_label(y);
  if (kind_ == Kind::kGaussian) return Vector::Constant(1, y);
  return Vector::Unit(classes_, static_cast<Eigen::Index>(y));
}

Vector ExpFamilyHead::mean_statistic(const Vector& f) const {
  validate_output(f);
  if (kind_ == Kind::kGaussian) return f;
  return softmax(f);
}

Vector ExpFamilyHead::score(const Vector& f, double y) const {
  return natural_statistic(y) - mean_statistic(f);
}

Matrix ExpFamilyHead::f_hessian(const Vector& f) const {
  validate_output(f);
  if (kind_ == Kind::kGaussian) return Matrix::Identity(1, 1);
  const Vector p = softmax(f);
  Matrix h = -p * p.transpose();
  h.diagonal() += p;
  return h;
}

Vector ExpFamilyHead::f_hessian_apply(const Vector& f, const Vector& u) const {
  validate_output(f);
  if (u.size() != dim()) throw InvalidInput("f-Hessian direction has wrong length");
  if (kind_ == Kind::kGaussian) return u;
  const Vector p = softmax(f);
  return p.cwiseProduct(u) - p * p.dot(u);
}

double ExpFamilyHead::reduce_output(const Vector& f) const {
  validate_output(f);
  if (kind_ == Kind::kGaussian) return f[0];
  return softmax(f)[classes_ - 1];
}

Vector ExpFamilyHead::reduce_output_gradient(const Vector& f) const {
  validate_output(f);
  if (kind_ == Kind::kGaussian) return Vector::Ones(1);
  const Vector p = softmax(f);
  const double pk = p[classes_ - 1];
  Vector g = -pk * p;
  g[classes_ - 1] += pk;
  return g;
}

nlohmann::json ExpFamilyHead::to_json() const {
  if (kind_ == Kind::kGaussian) return {{"head", "gaussian"}};
  return {{"head", "categorical"}, {"classes", classes_}};
}

ExpFamilyHead ExpFamilyHead::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("head")) throw ParseError("head descriptor needs a \"head\" field");
  const auto name = j["head"].get<std::string>();
  if (name == "gaussian") return gaussian();
  if (name == "categorical") return categorical(j.value("classes", 2));
  throw ParseError("unknown head '" + name + "'");
}

ParamVector loss_grad(const Model& model, const ExpFamilyHead& head, const ConstVectorRef& x, double y,
                      const ParamVector& theta, PassCounter* counter) {
  head.validate_label(y);
  if (head.dim() != model.output_dim()) throw InvalidInput("model output does not match head dimension");
  return model.value_and_vjp(x, theta, [&](const Vector& f) -> Vector { return -head.score(f, y); }, counter)
      .gradient;
}

double sample_loss(const Model& model, const ExpFamilyHead& head, const ConstVectorRef& x, double y,
                   const ParamVector& theta, PassCounter* counter) {
  return head.nll(model.forward(x, theta, counter), y);
}

double mean_loss(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                 PassCounter* counter) {
  if (data.size() == 0) throw InvalidInput("empty dataset");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) total += sample_loss(model, head, data.x(i), data.y(i), theta, counter);
  return total / static_cast<double>(data.size());
}

std::vector<LossRecord> loss_records(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                                     const ParamVector& theta, PassCounter* counter) {
  std::vector<LossRecord> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double y = data.y(i);
    head.validate_label(y);
    Vector score;
    auto vg = model.value_and_vjp(
        data.x(i), theta,
        [&](const Vector& f) -> Vector {
          score = head.score(f, y);
          return -score;
        },
        counter);
    out[i].nll = head.nll(vg.value, y);
    out[i].gradient_norm = vg.gradient.norm();
    out[i].residual_norm = score.norm();
  }
  return out;
}

double ebar_n(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
              PassCounter* counter) {
  if (data.size() == 0) throw InvalidInput("empty dataset");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    total += head.score(model.forward(data.x(i), theta, counter), data.y(i)).norm();
  }
  return total;
}

double performance(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta) {
  if (data.size() == 0) throw InvalidInput("empty dataset");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector f = model.forward(data.x(i), theta);
    if (head.kind() == ExpFamilyHead::Kind::kGaussian) {
      const double r = data.y(i) - f[0];
      total += r * r;
    } else {
      Eigen::Index arg = 0;
      f.maxCoeff(&arg);
      total += static_cast<double>(arg) == data.y(i) ? 1.0 : 0.0;
    }
  }
  return total / static_cast<double>(data.size());
}

}  // namespace influence
