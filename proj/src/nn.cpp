#include "influence/nn.hpp"

#include <cmath>
#include <random>

#include "influence/errors.hpp"

namespace influence {
namespace {

using ConstRowMap = Eigen::Map<const RowMatrix>;

double act_value(Activation act, double z) {
  switch (act) {
    case Activation::kIdentity:
      return z;
    case Activation::kRelu:
      return z > 0.0 ? z : 0.0;
    case Activation::kSelu:
      return z > 0.0 ? kSeluScale * z : kSeluScale * kSeluAlpha * std::expm1(z);
  }
  return z;
}

// relu'(0) := 0
double act_first(Activation act, double z) {
  switch (act) {
    case Activation::kIdentity:
      return 1.0;
    case Activation::kRelu:
      return z > 0.0 ? 1.0 : 0.0;
    case Activation::kSelu:
      return z > 0.0 ? kSeluScale : kSeluScale * kSeluAlpha * std::exp(z);
  }
  return 1.0;
}

double act_second(Activation act, double z) {
  if (act == Activation::kSelu && z <= 0.0) return kSeluScale * kSeluAlpha * std::exp(z);
  return 0.0;
}

Vector apply_act(Activation act, const Vector& z) {
  Vector out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) out[i] = act_value(act, z[i]);
  return out;
}

Vector first_derivative(Activation act, const Vector& z) {
  Vector out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) out[i] = act_first(act, z[i]);
  return out;
}

Vector second_derivative(Activation act, const Vector& z) {
  Vector out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) out[i] = act_second(act, z[i]);
  return out;
}

}  // namespace

std::string to_string(Activation act) {
  switch (act) {
    case Activation::kIdentity:
      return "identity";
    case Activation::kRelu:
      return "relu";
    case Activation::kSelu:
      return "selu";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity" || name == "linear" || name == "none") return Activation::kIdentity;
  if (name == "relu") return Activation::kRelu;
  if (name == "selu") return Activation::kSelu;
  throw InvalidInput("unknown activation '" + std::string(name) + "'");
}

Model::Model(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw InvalidInput("model needs at least one layer");
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    if (spec.in <= 0 || spec.out <= 0) throw InvalidInput("layer widths must be positive");
    if (l > 0 && layers_[l - 1].out != spec.in) {
      throw InvalidInput("layer " + std::to_string(l) + " input width " + std::to_string(spec.in) +
                         " does not match previous output width " +
                         std::to_string(layers_[l - 1].out));
    }
    offsets_.push_back(offset);
    offset += static_cast<Eigen::Index>(spec.in) * spec.out + (spec.bias ? spec.out : 0);
  }
  num_params_ = offset;
}

Model Model::linear(int in, int out, bool bias) {
  return Model({LayerSpec{in, out, Activation::kIdentity, bias}});
}

Model Model::mlp(int in, const std::vector<int>& hidden, int out, Activation act) {
  std::vector<LayerSpec> layers;
  int prev = in;
  for (int h : hidden) {
    layers.push_back({prev, h, act, true});
    prev = h;
  }
  layers.push_back({prev, out, Activation::kIdentity, true});
  return Model(std::move(layers));
}

bool Model::is_linear_in_params() const {
  return layers_.size() == 1 && layers_[0].act == Activation::kIdentity;
}

bool Model::operator==(const Model& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& a = layers_[l];
    const auto& b = other.layers_[l];
    if (a.in != b.in || a.out != b.out || a.act != b.act || a.bias != b.bias) return false;
  }
  return true;
}

ParamVector Model::flatten(const std::vector<LayerParams>& params) const {
  if (params.size() != layers_.size()) throw InvalidInput("layer count mismatch in flatten");
  ParamVector theta(num_params_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    const auto& p = params[l];
    if (p.weight.rows() != spec.out || p.weight.cols() != spec.in) {
      throw InvalidInput("weight shape mismatch at layer " + std::to_string(l));
    }
    if (p.bias.size() != (spec.bias ? spec.out : 0)) {
      throw InvalidInput("bias shape mismatch at layer " + std::to_string(l));
    }
    Eigen::Map<RowMatrix>(theta.data() + offsets_[l], spec.out, spec.in) = p.weight;
    if (spec.bias) {
      theta.segment(offsets_[l] + static_cast<Eigen::Index>(spec.in) * spec.out, spec.out) = p.bias;
    }
  }
  return theta;
}

std::vector<LayerParams> Model::unflatten(const ParamVector& theta) const {
  if (theta.size() != num_params_) {
    throw InvalidInput("parameter vector has length " + std::to_string(theta.size()) +
                       ", model expects " + std::to_string(num_params_));
  }
  std::vector<LayerParams> out;
  out.reserve(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    LayerParams p;
    p.weight = ConstRowMap(theta.data() + offsets_[l], spec.out, spec.in);
    if (spec.bias) {
      p.bias = theta.segment(offsets_[l] + static_cast<Eigen::Index>(spec.in) * spec.out, spec.out);
    }
    out.push_back(std::move(p));
  }
  return out;
}

ParamVector Model::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamVector theta = ParamVector::Zero(num_params_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.in));
    const Eigen::Index count = static_cast<Eigen::Index>(spec.in) * spec.out;
    for (Eigen::Index i = 0; i < count; ++i) theta[offsets_[l] + i] = scale * normal(rng);
  }
  return theta;
}

void Model::check_input(const ConstVectorRef& x, const ParamVector& theta) const {
  if (x.size() != input_dim()) {
    throw InvalidInput("covariate has dimension " + std::to_string(x.size()) + ", model expects " +
                       std::to_string(input_dim()));
  }
  if (theta.size() != num_params_) {
    throw InvalidInput("parameter vector has length " + std::to_string(theta.size()) +
                       ", model expects " + std::to_string(num_params_));
  }
}

Model::Tape Model::run_forward(const ConstVectorRef& x, const ParamVector& theta) const {
  Tape tape;
  tape.pre.reserve(layers_.size());
  tape.post.reserve(layers_.size() + 1);
  tape.post.emplace_back(x);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    ConstRowMap w(theta.data() + offsets_[l], spec.out, spec.in);
    Vector z = w * tape.post.back();
    if (spec.bias) z += theta.segment(offsets_[l] + static_cast<Eigen::Index>(spec.in) * spec.out, spec.out);
    tape.post.push_back(apply_act(spec.act, z));
    tape.pre.push_back(std::move(z));
  }
  return tape;
}

Vector Model::forward(const ConstVectorRef& x, const ParamVector& theta, PassCounter* counter) const {
  check_input(x, theta);
  if (counter) counter->add_evaluation();
  return run_forward(x, theta).post.back();
}

ParamVector Model::vjp(const ConstVectorRef& x, const ParamVector& theta, const Vector& u,
                       PassCounter* counter) const {
  if (u.size() != output_dim()) {
    throw InvalidInput("vjp direction has length " + std::to_string(u.size()) + ", expected " +
                       std::to_string(output_dim()));
  }
  return value_and_vjp(x, theta, [&](const Vector&) { return u; }, counter).gradient;
}

Model::ValueAndGradient Model::value_and_vjp(const ConstVectorRef& x, const ParamVector& theta,
                                             const std::function<Vector(const Vector&)>& seed,
                                             PassCounter* counter) const {
  check_input(x, theta);
  Tape tape = run_forward(x, theta);
  ValueAndGradient out;
  out.value = tape.post.back();
  out.gradient = ParamVector::Zero(num_params_);
  Vector adj = seed(out.value);
  if (adj.size() != output_dim()) throw InvalidInput("vjp seed has wrong length");
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& spec = layers_[li];
    Vector zbar = first_derivative(spec.act, tape.pre[li]).cwiseProduct(adj);
    Eigen::Map<RowMatrix>(out.gradient.data() + offsets_[li], spec.out, spec.in) =
        zbar * tape.post[li].transpose();
    if (spec.bias) {
      out.gradient.segment(offsets_[li] + static_cast<Eigen::Index>(spec.in) * spec.out, spec.out) = zbar;
    }
    if (li > 0) adj = ConstRowMap(theta.data() + offsets_[li], spec.out, spec.in).transpose() * zbar;
  }
  if (counter) counter->add_reverse_mode();
  return out;
}

Model::Linearization Model::value_and_jvp(const ConstVectorRef& x, const ParamVector& theta,
                                          const ParamVector& a, PassCounter* counter) const {
  check_input(x, theta);
  if (a.size() != num_params_) {
    throw InvalidInput("jvp direction has length " + std::to_string(a.size()) + ", expected " +
                       std::to_string(num_params_));
  }
  Vector act = x;
  Vector tangent = Vector::Zero(x.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    ConstRowMap w(theta.data() + offsets_[l], spec.out, spec.in);
    ConstRowMap dw(a.data() + offsets_[l], spec.out, spec.in);
    Vector z = w * act;
    Vector dz = dw * act + w * tangent;
    if (spec.bias) {
      const Eigen::Index boff = offsets_[l] + static_cast<Eigen::Index>(spec.in) * spec.out;
      z += theta.segment(boff, spec.out);
      dz += a.segment(boff, spec.out);
    }
    tangent = first_derivative(spec.act, z).cwiseProduct(dz);
    act = apply_act(spec.act, z);
  }
  if (counter) counter->add_forward_mode();
  return {std::move(act), std::move(tangent)};
}

Vector Model::jvp(const ConstVectorRef& x, const ParamVector& theta, const ParamVector& a,
                  PassCounter* counter) const {
  return value_and_jvp(x, theta, a, counter).tangent;
}

ParamVector Model::gauss_newton_apply(
    const ConstVectorRef& x, const ParamVector& theta, const ParamVector& v,
    const std::function<Vector(const Vector& f, const Vector& u)>& output_curvature,
    PassCounter* counter) const {
  check_input(x, theta);
  if (v.size() != num_params_) throw InvalidInput("curvature direction has wrong length");
  // Forward mode: primal and tangent together, keeping the tape for the
  // reverse sweep.
  Tape tape;
  tape.post.emplace_back(x);
  Vector tangent = Vector::Zero(x.size());
  std::vector<Vector> slopes;
  slopes.reserve(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& spec = layers_[l];
    ConstRowMap w(theta.data() + offsets_[l], spec.out, spec.in);
    ConstRowMap dw(v.data() + offsets_[l], spec.out, spec.in);
    Vector z = w * tape.post.back();
    Vector dz = dw * tape.post.back() + w * tangent;
    if (spec.bias) {
      const Eigen::Index boff = offsets_[l] + static_cast<Eigen::Index>(spec.in) * spec.out;
      z += theta.segment(boff, spec.out);
      dz += v.segment(boff, spec.out);
    }
    slopes.push_back(first_derivative(spec.act, z));
    tangent = slopes.back().cwiseProduct(dz);
    tape.post.push_back(apply_act(spec.act, z));
    tape.pre.push_back(std::move(z));
  }
  if (counter) counter->add_forward_mode();

  Vector adj = output_curvature(tape.post.back(), tangent);
  ParamVector out = ParamVector::Zero(num_params_);
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& spec = layers_[li];
    Vector zbar = slopes[li].cwiseProduct(adj);
    Eigen::Map<RowMatrix>(out.data() + offsets_[li], spec.out, spec.in) = zbar * tape.post[li].transpose();
    if (spec.bias) out.segment(offsets_[li] + static_cast<Eigen::Index>(spec.in) * spec.out, spec.out) = zbar;
    if (li > 0) adj = ConstRowMap(theta.data() + offsets_[li], spec.out, spec.in).transpose() * zbar;
  }
  if (counter) counter->add_reverse_mode();
  return out;
}

ParamVector Model::loss_hvp(const ConstVectorRef& x, const ParamVector& theta, const ParamVector& v,
                            const OutputLoss& loss, PassCounter* counter) const {
  check_input(x, theta);
  if (v.size() != num_params_) throw InvalidInput("hvp direction has wrong length");
  const std::size_t depth = layers_.size();
  Tape tape = run_forward(x, theta);

  // First reverse pass: the loss gradient. Keep the output adjoints
  // abar_l (post-activation, l = 1..L) and zbar_l (pre-activation).
  std::vector<Vector> abar(depth + 1);
  std::vector<Vector> zbar(depth);
  std::vector<Vector> slope(depth);
  std::vector<Vector> curve(depth);
  const Vector& f = tape.post.back();
  abar[depth] = loss.gradient(f);
  for (std::size_t li = depth; li-- > 0;) {
    const auto& spec = layers_[li];
    slope[li] = first_derivative(spec.act, tape.pre[li]);
    curve[li] = second_derivative(spec.act, tape.pre[li]);
    zbar[li] = slope[li].cwiseProduct(abar[li + 1]);
    if (li > 0) abar[li] = ConstRowMap(theta.data() + offsets_[li], spec.out, spec.in).transpose() * zbar[li];
  }
  if (counter) counter->add_reverse_mode();

  // Second reverse pass: differentiate s(theta) = <grad(theta), v>. It walks
  // the first pass backwards (input to output), then the forward graph
  // backwards (output to input).
  ParamVector out = ParamVector::Zero(num_params_);
  std::vector<Vector> zhat(depth);  // adjoints of z_l w.r.t. s
  Vector abar_hat;                  // adjoint of abar_{l} carried upward
  for (std::size_t li = 0; li < depth; ++li) {
    const auto& spec = layers_[li];
    const Eigen::Index woff = offsets_[li];
    const Eigen::Index boff = woff + static_cast<Eigen::Index>(spec.in) * spec.out;
    ConstRowMap vw(v.data() + woff, spec.out, spec.in);
    // s depends on zbar_l through <Vw_l, zbar_l a_{l-1}^T> + <vb_l, zbar_l>.
    Vector zbar_hat = vw * tape.post[li];
    if (spec.bias) zbar_hat += v.segment(boff, spec.out);
    if (li > 0) {
      // abar_{l-1} = W_l^T zbar_l
      ConstRowMap w(theta.data() + woff, spec.out, spec.in);
      zbar_hat += w * abar_hat;
      Eigen::Map<RowMatrix>(out.data() + woff, spec.out, spec.in) += zbar[li] * abar_hat.transpose();
    }
    // zbar_l = act'(z_l) * abar_l
    abar_hat = slope[li].cwiseProduct(zbar_hat);
    zhat[li] = curve[li].cwiseProduct(abar[li + 1]).cwiseProduct(zbar_hat);
  }
  // abar_L = dloss/df(f)
  Vector ahat = loss.hessian_apply(f, abar_hat);
  for (std::size_t li = depth; li-- > 0;) {
    const auto& spec = layers_[li];
    const Eigen::Index woff = offsets_[li];
    zhat[li] += slope[li].cwiseProduct(ahat);
    Eigen::Map<RowMatrix>(out.data() + woff, spec.out, spec.in) += zhat[li] * tape.post[li].transpose();
    if (spec.bias) out.segment(woff + static_cast<Eigen::Index>(spec.in) * spec.out, spec.out) += zhat[li];
    if (li > 0) {
      ConstRowMap w(theta.data() + woff, spec.out, spec.in);
      ConstRowMap vw(v.data() + woff, spec.out, spec.in);
      ahat = w.transpose() * zhat[li] + vw.transpose() * zbar[li];
    }
  }
  if (counter) counter->add_reverse_mode();
  return out;
}

Matrix Model::jacobian(const ConstVectorRef& x, const ParamVector& theta, PassCounter* counter) const {
  const int k = output_dim();
  Matrix jac(k, num_params_);
  for (int r = 0; r < k; ++r) {
    Vector e = Vector::Unit(k, r);
    jac.row(r) = vjp(x, theta, e, counter).transpose();
  }
  return jac;
}

nlohmann::json Model::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& spec : layers_) {
    nlohmann::json l = {{"in", spec.in}, {"out", spec.out}, {"act", to_string(spec.act)}};
    if (!spec.bias) l["bias"] = false;
    layers.push_back(std::move(l));
  }
  return {{"layers", layers}};
}

Model Model::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("layers") || !j["layers"].is_array()) {
    throw ParseError("model descriptor needs a \"layers\" array");
  }
  std::vector<LayerSpec> layers;
  for (const auto& l : j["layers"]) {
    if (!l.contains("in") || !l.contains("out")) throw ParseError("layer needs \"in\" and \"out\"");
    LayerSpec spec;
    spec.in = l["in"].get<int>();
    spec.out = l["out"].get<int>();
    spec.act = parse_activation(l.value("act", std::string("identity")));
    spec.bias = l.value("bias", true);
    layers.push_back(spec);
  }
  return Model(std::move(layers));
}

}  // namespace influence
