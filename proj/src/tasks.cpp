#include "influence/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "influence/errors.hpp"

namespace influence {

std::vector<std::vector<std::size_t>> sample_folds(std::size_t n, std::size_t k, std::size_t folds,
                                                   std::uint64_t seed) {
  if (k < 1 || k >= n) throw InvalidInput("held-out size k must satisfy 1 <= k < n");
  if (folds < 1) throw InvalidInput("need at least one fold");
  std::vector<std::size_t> perm(n);
  std::vector<std::vector<std::size_t>> out(folds);
  if (folds * k <= n) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t f = 0; f < folds; ++f) {
      out[f].assign(perm.begin() + static_cast<std::ptrdiff_t>(f * k),
                    perm.begin() + static_cast<std::ptrdiff_t>((f + 1) * k));
      std::sort(out[f].begin(), out[f].end());
    }
    return out;
  }
  for (std::size_t f = 0; f < folds; ++f) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (f + 1)));
    std::shuffle(perm.begin(), perm.end(), rng);
    out[f].assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out[f].begin(), out[f].end());
  }
  return out;
}

double heldout_loss(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                    std::span<const std::size_t> rows) {
  if (rows.empty()) throw InvalidInput("no held-out rows");
  double total = 0.0;
  for (std::size_t i : rows) {
    if (i >= data.size()) throw InvalidInput("held-out row out of range");
    total += sample_loss(model, head, data.x(i), data.y(i), theta);
  }
  return total / static_cast<double>(rows.size());
}

CvResult acv(const InfluenceProblem& problem, std::size_t k, std::size_t folds, std::uint64_t seed,
             const ParamEstimator& estimator) {
  CvResult out;
  out.folds = sample_folds(problem.n(), k, folds, seed);
  double total = 0.0;
  for (const auto& fold : out.folds) {
    const ParamVector theta = estimator(WeightVector::leave_k_out(problem.n(), fold));
    const double v = heldout_loss(problem.model, problem.head, *problem.data, theta, fold);
    out.per_fold.push_back(v);
    total += v;
  }
  out.estimate = total / static_cast<double>(folds);
  return out;
}

CvResult acv(InfluenceEngine& engine, std::size_t k, std::size_t folds, std::uint64_t seed) {
  return acv(engine.problem(), k, folds, seed, [&](const WeightVector& w) { return engine.estimate(w); });
}

UnlearnResult unlearn(InfluenceEngine& engine, const UnlearnRequest& request) {
  const auto& p = engine.problem();
  UnlearnResult out;
  if (request.removed.empty()) {
    out.theta_noiseless = p.theta_hat;
  } else {
    out.theta_noiseless = engine.estimate(WeightVector::leave_k_out(p.n(), request.removed));
  }
  out.theta = out.theta_noiseless;
  if (request.noise) {
    const auto& nr = *request.noise;
    BoundInputs in;
    in.n = p.n();
    in.ebar = ebar_n(p.model, p.head, *p.data, p.theta_hat);
    in.epsilon = nr.epsilon;
    in.delta = nr.delta;
    out.noise_variance = bound_evaluator(BoundKind::kNoiseScale, nr.constants, in);
    std::mt19937_64 rng(nr.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double scale = std::sqrt(out.noise_variance);
    for (Eigen::Index j = 0; j < out.theta.size(); ++j) out.theta[j] += scale * normal(rng);
  }
  return out;
}

Vector attribution_scores(InfluenceEngine& engine, const ConstVectorRef& x_test, double y_test) {
  const auto& p = engine.problem();
  const ParamVector g_test = loss_grad(p.model, p.head, x_test, y_test, p.theta_hat, p.counter.get());
  const Vector u = engine.solve_linearized(g_test);
  Vector out(static_cast<Eigen::Index>(p.n()));
  for (std::size_t i = 0; i < p.n(); ++i) {
    out[static_cast<Eigen::Index>(i)] =
        loss_grad(p.model, p.head, p.data->x(i), p.data->y(i), p.theta_hat, p.counter.get()).dot(u);
  }
  return out / static_cast<double>(p.n());
}

double attribution_score(InfluenceEngine& engine, const ConstVectorRef& x_test, double y_test, std::size_t i) {
  const auto& p = engine.problem();
  if (i >= p.n()) throw InvalidInput("training index out of range");
  const ParamVector g_test = loss_grad(p.model, p.head, x_test, y_test, p.theta_hat, p.counter.get());
  const ParamVector g_i = loss_grad(p.model, p.head, p.data->x(i), p.data->y(i), p.theta_hat, p.counter.get());
  return g_test.dot(engine.solve_linearized(g_i)) / static_cast<double>(p.n());
}

FairnessMetric parse_fairness_metric(std::string_view name) {
  if (name == "dp") return FairnessMetric::kDemographicParity;
  if (name == "chi2") return FairnessMetric::kChiSquare;
  throw ParseError("fairness metric must be dp or chi2");
}

std::string to_string(FairnessMetric m) { return m == FairnessMetric::kDemographicParity ? "dp" : "chi2"; }

void FairnessSpec::validate() const {
  if (bins < 2) throw InvalidInput("chi2 needs at least 2 bins");
}

namespace {

struct Groups {
  std::vector<std::size_t> zero;
  std::vector<std::size_t> one;
};

Groups binary_groups(const Vector& s) {
  Groups g;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] == 0.0) {
      g.zero.push_back(static_cast<std::size_t>(i));
    } else if (s[i] == 1.0) {
      g.one.push_back(static_cast<std::size_t>(i));
    } else {
      throw InvalidInput("demographic parity needs a binary sensitive attribute in {0, 1}");
    }
  }
  if (g.zero.empty() || g.one.empty()) throw InvalidInput("demographic parity needs both groups nonempty");
  return g;
}

const Vector& require_sensitive(const Dataset& data) {
  if (!data.sensitive) throw InvalidInput("dataset has no sensitive attribute");
  return *data.sensitive;
}

int bin_of(double v, const std::vector<double>& edges) {
  return static_cast<int>(std::lower_bound(edges.begin(), edges.end(), v) - edges.begin());
}

// Codes 0..m-1 for s: its distinct values when there are at most `bins`,
// quantile bins otherwise.
std::vector<int> sensitive_codes(const Vector& s, int bins, int* count) {
  std::map<double, int> distinct;
  for (Eigen::Index i = 0; i < s.size(); ++i) distinct.emplace(s[i], 0);
  std::vector<int> codes(static_cast<std::size_t>(s.size()));
  if (static_cast<int>(distinct.size()) <= bins) {
    int c = 0;
    for (auto& [v, code] : distinct) code = c++;
    for (Eigen::Index i = 0; i < s.size(); ++i) codes[static_cast<std::size_t>(i)] = distinct[s[i]];
    *count = c;
    return codes;
  }
  const auto edges = quantile_edges(s, bins);
  for (Eigen::Index i = 0; i < s.size(); ++i) codes[static_cast<std::size_t>(i)] = bin_of(s[i], edges);
  *count = static_cast<int>(edges.size()) + 1;
  return codes;
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Sum over rows of coeff_i * J_i^T grad_f r(f_i).
ParamVector pull_back(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                      const Vector& coeff, PassCounter* counter) {
  ParamVector g = ParamVector::Zero(theta.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double c = coeff[static_cast<Eigen::Index>(i)];
    if (c == 0.0) continue;
    g += model
             .value_and_vjp(
                 data.x(i), theta, [&](const Vector& f) -> Vector { return c * head.reduce_output_gradient(f); },
                 counter)
             .gradient;
  }
  return g;
}

}  // namespace

std::vector<double> quantile_edges(const Vector& values, int bins) {
  if (bins < 2) throw InvalidInput("need at least 2 bins");
  if (values.size() == 0) throw InvalidInput("no values to bin");
  std::vector<double> sorted(values.data(), values.data() + values.size());
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  std::vector<double> edges;
  for (int j = 1; j < bins; ++j) {
    const auto pos = static_cast<std::size_t>(std::ceil(static_cast<double>(j) * static_cast<double>(n) / bins));
    edges.push_back(sorted[std::max<std::size_t>(pos, 1) - 1]);
  }
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  // An edge at the maximum leaves its upper bin empty.
  while (!edges.empty() && edges.back() >= sorted.back()) edges.pop_back();
  return edges;
}

double dp_from_outputs(const Vector& outputs, const Vector& sensitive) {
  if (outputs.size() != sensitive.size()) throw InvalidInput("outputs and sensitive attribute differ in length");
  const Groups g = binary_groups(sensitive);
  double m0 = 0.0, m1 = 0.0;
  for (auto i : g.zero) m0 += outputs[static_cast<Eigen::Index>(i)];
  for (auto i : g.one) m1 += outputs[static_cast<Eigen::Index>(i)];
  return std::abs(m0 / static_cast<double>(g.zero.size()) - m1 / static_cast<double>(g.one.size()));
}

double chi2_from_outputs(const Vector& outputs, const Vector& sensitive, int bins, bool* degenerate) {
  if (outputs.size() != sensitive.size()) throw InvalidInput("outputs and sensitive attribute differ in length");
  if (bins < 2) throw InvalidInput("chi2 needs at least 2 bins");
  const auto edges = quantile_edges(outputs, bins);
  if (degenerate) *degenerate = edges.empty();
  if (edges.empty()) return 0.0;
  int ns = 0;
  const auto scode = sensitive_codes(sensitive, bins, &ns);
  const int nb = static_cast<int>(edges.size()) + 1;
  Matrix joint = Matrix::Zero(nb, ns);
  for (Eigen::Index i = 0; i < outputs.size(); ++i) {
    joint(bin_of(outputs[i], edges), scode[static_cast<std::size_t>(i)]) += 1.0;
  }
  joint /= static_cast<double>(outputs.size());
  const Vector pb = joint.rowwise().sum();
  const Vector ps = joint.colwise().sum().transpose();
  double chi2 = 0.0;
  for (int b = 0; b < nb; ++b) {
    for (int s = 0; s < ns; ++s) {
      const double q = pb[b] * ps[s];
      if (q > 0.0) chi2 += (joint(b, s) - q) * (joint(b, s) - q) / q;
    }
  }
  return chi2;
}

Vector reduced_outputs(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                       PassCounter* counter) {
  Vector r(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    r[static_cast<Eigen::Index>(i)] = head.reduce_output(model.forward(data.x(i), theta, counter));
  }
  return r;
}

MetricValue dp_metric(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                      bool with_gradient, PassCounter* counter) {
  const Vector& s = require_sensitive(data);
  const Vector r = reduced_outputs(model, head, data, theta, counter);
  MetricValue out;
  out.value = dp_from_outputs(r, s);
  if (!with_gradient) return out;
  const Groups g = binary_groups(s);
  double m0 = 0.0, m1 = 0.0;
  for (auto i : g.zero) m0 += r[static_cast<Eigen::Index>(i)];
  for (auto i : g.one) m1 += r[static_cast<Eigen::Index>(i)];
  m0 /= static_cast<double>(g.zero.size());
  m1 /= static_cast<double>(g.one.size());
  const double sign = m0 > m1 ? 1.0 : (m0 < m1 ? -1.0 : 0.0);
  Vector coeff = Vector::Zero(r.size());
  for (auto i : g.zero) coeff[static_cast<Eigen::Index>(i)] = sign / static_cast<double>(g.zero.size());
  for (auto i : g.one) coeff[static_cast<Eigen::Index>(i)] = -sign / static_cast<double>(g.one.size());
  out.gradient = pull_back(model, head, data, theta, coeff, counter);
  return out;
}

MetricValue chi2_metric(const Model& model, const ExpFamilyHead& head, const Dataset& data, const ParamVector& theta,
                        int bins, bool with_gradient, PassCounter* counter) {
  const Vector& s = require_sensitive(data);
  const Vector r = reduced_outputs(model, head, data, theta, counter);
  MetricValue out;
  out.value = chi2_from_outputs(r, s, bins, &out.degenerate);
  if (!with_gradient) return out;
  const auto edges = quantile_edges(r, bins);
  if (edges.empty()) {
    out.gradient = ParamVector::Zero(theta.size());
    return out;
  }
  // Temperature: a quarter of the median bin width.
  std::vector<double> widths;
  for (std::size_t j = 1; j < edges.size(); ++j) widths.push_back(edges[j] - edges[j - 1]);
  double width;
  if (widths.empty()) {
    width = (r.maxCoeff() - r.minCoeff()) / bins;
  } else {
    std::nth_element(widths.begin(), widths.begin() + static_cast<std::ptrdiff_t>(widths.size() / 2), widths.end());
    width = widths[widths.size() / 2];
  }
  const double tau = std::max(0.25 * width, 1e-12);

  int ns = 0;
  const auto scode = sensitive_codes(s, bins, &ns);
  const int nb = static_cast<int>(edges.size()) + 1;
  const auto n = static_cast<double>(r.size());
  auto lower = [&](int b, double v) { return b == 0 ? 1.0 : sigmoid((v - edges[b - 1]) / tau); };
  auto upper = [&](int b, double v) { return b == nb - 1 ? 0.0 : sigmoid((v - edges[b]) / tau); };
  auto dsig = [](double p) { return p * (1.0 - p); };

  Matrix joint = Matrix::Zero(nb, ns);
  Vector ps = Vector::Zero(ns);
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const int sc = scode[static_cast<std::size_t>(i)];
    ps[sc] += 1.0 / n;
    for (int b = 0; b < nb; ++b) joint(b, sc) += (lower(b, r[i]) - upper(b, r[i])) / n;
  }
  const Vector pb = joint.rowwise().sum();
  // dS/dm_{i,b} for a row in sensitive group s.
  Matrix dS = Matrix::Zero(nb, ns);
  for (int b = 0; b < nb; ++b) {
    if (!(pb[b] > 1e-300)) continue;
    double through_pb = 0.0;
    for (int t = 0; t < ns; ++t) {
      if (ps[t] > 0.0) through_pb += joint(b, t) * joint(b, t) / (pb[b] * pb[b] * ps[t]);
    }
    for (int t = 0; t < ns; ++t) {
      if (ps[t] > 0.0) dS(b, t) = (2.0 * joint(b, t) / (pb[b] * ps[t]) - through_pb) / n;
    }
  }
  Vector coeff = Vector::Zero(r.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const int sc = scode[static_cast<std::size_t>(i)];
    double c = 0.0;
    for (int b = 0; b < nb; ++b) {
      const double dl = b == 0 ? 0.0 : dsig(lower(b, r[i]));
      const double du = b == nb - 1 ? 0.0 : dsig(upper(b, r[i]));
      c += dS(b, sc) * (dl - du) / tau;
    }
    coeff[i] = c;
  }
  out.gradient = pull_back(model, head, data, theta, coeff, counter);
  return out;
}

MetricValue fairness_metric(const FairnessSpec& spec, const Model& model, const ExpFamilyHead& head,
                            const Dataset& data, const ParamVector& theta, bool with_gradient, PassCounter* counter) {
  spec.validate();
  if (spec.metric == FairnessMetric::kDemographicParity) {
    return dp_metric(model, head, data, theta, with_gradient, counter);
  }
  return chi2_metric(model, head, data, theta, spec.bins, with_gradient, counter);
}

FairnessResult fairness_pipeline(InfluenceEngine& engine, const FairnessSpec& spec) {
  const auto& p = engine.problem();
  FairnessResult out;
  const MetricValue before = fairness_metric(spec, p.model, p.head, *p.data, p.theta_hat, true, p.counter.get());
  out.metric_before = before.value;
  out.degenerate = before.degenerate;
  out.perf_before = performance(p.model, p.head, *p.data, p.theta_hat);

  // theta_tilde(1^{n\i}) - theta_hat = (1/n) A^{-1} grad l_i, so the removal
  // effect on T is (1/n) grad l_i^T A^{-1} grad T.
  const Vector u = engine.solve_linearized(*before.gradient);
  out.influence.resize(static_cast<Eigen::Index>(p.n()));
  for (std::size_t i = 0; i < p.n(); ++i) {
    const double removal =
        loss_grad(p.model, p.head, p.data->x(i), p.data->y(i), p.theta_hat, p.counter.get()).dot(u) /
        static_cast<double>(p.n());
    out.influence[static_cast<Eigen::Index>(i)] = -removal;
    if (-removal > 0.0) out.selected.push_back(i);
  }
  out.theta_after =
      out.selected.empty() ? p.theta_hat : engine.estimate(WeightVector::leave_k_out(p.n(), out.selected));
  out.metric_after = fairness_metric(spec, p.model, p.head, *p.data, out.theta_after, false).value;
  out.perf_after = performance(p.model, p.head, *p.data, out.theta_after);
  return out;
}

}  // namespace influence
