#pragma once

#include <random>

#include "influence/oracle.hpp"
#include "influence/pipeline.hpp"

namespace testing {

using namespace influence;

inline Vector random_vector(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

inline double rel_err(const Vector& a, const Vector& b) { return (a - b).norm() / (1.0 + b.norm()); }

inline Dataset tiny_dataset(const RowMatrix& x, const Vector& y) {
  Dataset d;
  d.features = x;
  d.labels = y;
  return d;
}

// Linear-Gaussian regression data (unstandardized, well conditioned).
inline Dataset regression_data(std::size_t n, int dim, std::uint64_t seed, double noise = 0.5) {
  return make_linear_regression(n, dim, noise, seed);
}

// Overlapping blobs so logistic regression stays bounded without L2.
inline Dataset classification_data(std::size_t n, int dim, std::uint64_t seed, double sep = 1.0) {
  return make_blobs(n, dim, sep, seed);
}

inline ParamVector fit_exact(const Model& model, const ExpFamilyHead& head, const Dataset& data,
                             const Regularizer& reg) {
  oracle::RetrainConfig cfg;
  cfg.tolerance = 1e-12;
  return oracle::retrain(model, head, data, WeightVector::all_ones(data.size()), reg, cfg);
}

// Reweighted scope: the Newton step uses the curvature of the reweighted
// objective, which makes it exact on quadratics.
inline SolverConfig dense_config(CurvatureScope scope = CurvatureScope::kReweighted) {
  SolverConfig s;
  s.method = SolverConfig::Method::kDense;
  s.auto_damping = false;
  s.scope = scope;
  return s;
}

// Spearman rank correlation without tie handling beyond average ranks.
inline double spearman(const Vector& a, const Vector& b) {
  auto ranks = [](const Vector& v) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    std::sort(idx.begin(), idx.end(), [&](auto l, auto r) { return v[l] < v[r]; });
    Vector r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j);
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  Vector ra = ranks(a), rb = ranks(b);
  ra.array() -= ra.mean();
  rb.array() -= rb.mean();
  return ra.dot(rb) / (ra.norm() * rb.norm());
}

}  // namespace testing
