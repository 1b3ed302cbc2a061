#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace influence {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstVectorRef = Eigen::Ref<const Eigen::VectorXd>;

// Flat parameter vector theta; every curvature operation works in this basis.
using ParamVector = Eigen::VectorXd;

enum class Activation { kIdentity, kRelu, kSelu };

// Standard self-normalizing constants.
inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kSeluScale = 1.0507009873554804934193349852946;

std::string to_string(Activation act);
Activation parse_activation(std::string_view name);

struct LayerSpec {
  int in = 0;
  int out = 0;
  Activation act = Activation::kIdentity;
  bool bias = true;
};

struct LayerParams {
  Matrix weight;  // out x in
  Vector bias;    // out, empty when the layer has no bias
};

struct PassCounts {
  std::uint64_t forward_mode = 0;
  std::uint64_t reverse_mode = 0;
  std::uint64_t evaluations = 0;

  PassCounts operator-(const PassCounts& o) const {
    return {forward_mode - o.forward_mode, reverse_mode - o.reverse_mode,
            evaluations - o.evaluations};
  }
  bool operator==(const PassCounts&) const = default;
};

// Monotone differentiation-pass counters. Safe to share across threads.
class PassCounter {
 public:
  void add_forward_mode(std::uint64_t k = 1) { forward_mode_.fetch_add(k, std::memory_order_relaxed); }
  void add_reverse_mode(std::uint64_t k = 1) { reverse_mode_.fetch_add(k, std::memory_order_relaxed); }
  void add_evaluation(std::uint64_t k = 1) { evaluations_.fetch_add(k, std::memory_order_relaxed); }

  PassCounts snapshot() const {
    return {forward_mode_.load(std::memory_order_relaxed),
            reverse_mode_.load(std::memory_order_relaxed),
            evaluations_.load(std::memory_order_relaxed)};
  }
  void reset() {
    forward_mode_ = 0;
    reverse_mode_ = 0;
    evaluations_ = 0;
  }
  void merge(const PassCounts& c) {
    add_forward_mode(c.forward_mode);
    add_reverse_mode(c.reverse_mode);
    add_evaluation(c.evaluations);
  }

 private:
  std::atomic<std::uint64_t> forward_mode_{0};
  std::atomic<std::uint64_t> reverse_mode_{0};
  std::atomic<std::uint64_t> evaluations_{0};
};

// A scalar loss of the model output f, used by the second-order pass.
class OutputLoss {
 public:
  virtual ~OutputLoss() = default;
  // d loss / d f
  virtual Vector gradient(const Vector& f) const = 0;
  // (d^2 loss / d f^2) u
  virtual Vector hessian_apply(const Vector& f, const Vector& u) const = 0;
};

// Feed-forward feature map f(x; theta): a chain of dense layers, each
// followed by an elementwise activation. Differentiation rules are written
// out per layer; there is no tape.
//
// Parameter layout, layer by layer: W (out x in, row-major) then b (out).
class Model {
 public:
  explicit Model(std::vector<LayerSpec> layers);

  static Model linear(int in, int out, bool bias = true);
  static Model mlp(int in, const std::vector<int>& hidden, int out, Activation act);

  int input_dim() const { return layers_.front().in; }
  int output_dim() const { return layers_.back().out; }
  Eigen::Index num_params() const { return num_params_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  // True for a single identity layer: f is linear in theta.
  bool is_linear_in_params() const;

  ParamVector flatten(const std::vector<LayerParams>& params) const;
  std::vector<LayerParams> unflatten(const ParamVector& theta) const;

  // LeCun-normal weights, zero biases.
  ParamVector init_params(std::uint64_t seed) const;

  Vector forward(const ConstVectorRef& x, const ParamVector& theta,
                 PassCounter* counter = nullptr) const;

  // J^T u, J = df/dtheta. One reverse-mode pass.
  ParamVector vjp(const ConstVectorRef& x, const ParamVector& theta, const Vector& u,
                  PassCounter* counter = nullptr) const;

  // J a. One forward-mode pass.
  Vector jvp(const ConstVectorRef& x, const ParamVector& theta, const ParamVector& a,
             PassCounter* counter = nullptr) const;

  struct Linearization {
    Vector value;
    Vector tangent;
  };
  Linearization value_and_jvp(const ConstVectorRef& x, const ParamVector& theta,
                              const ParamVector& a, PassCounter* counter = nullptr) const;

  struct ValueAndGradient {
    Vector value;
    ParamVector gradient;
  };
  // Forward, then J^T seed(f). The seed is computed from the output, so a
  // loss gradient costs a single reverse pass.
  ValueAndGradient value_and_vjp(const ConstVectorRef& x, const ParamVector& theta,
                                 const std::function<Vector(const Vector&)>& seed,
                                 PassCounter* counter = nullptr) const;

  // J^T G J v for a k x k operator G given as hessian_apply(f, .). One
  // forward-mode and one reverse-mode pass.
  ParamVector gauss_newton_apply(const ConstVectorRef& x, const ParamVector& theta,
                                 const ParamVector& v,
                                 const std::function<Vector(const Vector& f, const Vector& u)>& output_curvature,
                                 PassCounter* counter = nullptr) const;

  // Hessian of loss(f(x; theta)) w.r.t. theta, applied to v. Reverse over
  // reverse: two reverse-mode passes.
  ParamVector loss_hvp(const ConstVectorRef& x, const ParamVector& theta, const ParamVector& v,
                       const OutputLoss& loss, PassCounter* counter = nullptr) const;

  // Full k x d Jacobian, one reverse pass per output row.
  Matrix jacobian(const ConstVectorRef& x, const ParamVector& theta,
                  PassCounter* counter = nullptr) const;

  nlohmann::json to_json() const;
  static Model from_json(const nlohmann::json& j);

  bool operator==(const Model& other) const;

 private:
  struct Tape {
    std::vector<Vector> pre;   // z_l, l = 1..L (stored at l-1)
    std::vector<Vector> post;  // a_l, l = 0..L (a_0 = x)
  };
  Tape run_forward(const ConstVectorRef& x, const ParamVector& theta) const;
  void check_input(const ConstVectorRef& x, const ParamVector& theta) const;

  std::vector<LayerSpec> layers_;
  std::vector<Eigen::Index> offsets_;
  Eigen::Index num_params_ = 0;
};

}  // namespace influence
