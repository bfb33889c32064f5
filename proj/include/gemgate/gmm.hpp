#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gemgate/csv.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/linalg.hpp"
#include "gemgate/rng.hpp"

namespace gemgate::gmm {

inline constexpr double kDefaultEpsCov = 1e-4;

// Mixture parameters: k means and k symmetric positive-definite covariances
// over d-dimensional features. Mixing weights are uniform; the update rule
// carries no prior term.
struct GmmParams {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<Vec> means;        // k x d
  std::vector<Mat> covariances;  // k x (d x d)

  void validate() const {
    if (k < 1 || dim < 1) throw ConfigError("gmm params: k and dim must be >= 1");
    if (means.size() != k || covariances.size() != k)
      throw DimensionError("gmm params: component count mismatch");
    for (std::size_t i = 0; i < k; ++i) {
      if (means[i].size() != dim || covariances[i].rows() != dim || covariances[i].cols() != dim)
        throw DimensionError("gmm params: component " + std::to_string(i) + " has wrong shape");
      if (!all_finite(means[i]) || !covariances[i].all_finite())
        throw NumericError("gmm params: non-finite entries in component " + std::to_string(i));
    }
  }
};

enum class InitStrategy { kRandomSubset, kKmeansLike };

struct FitConfig {
  std::size_t max_iters = 50;  // T
  double tol = 1e-6;           // convergence threshold on mean displacement
  double eps_cov = kDefaultEpsCov;
  std::uint64_t seed = 1;
  InitStrategy init = InitStrategy::kRandomSubset;

  void validate() const {
    if (max_iters < 1) throw ConfigError("fit config: max_iters must be >= 1");
    if (!(tol > 0.0)) throw ConfigError("fit config: tol must be positive");
    if (!(eps_cov > 0.0)) throw ConfigError("fit config: eps_cov must be positive");
  }
};

// Cached Cholesky factors for every component covariance. Factoring once per
// parameter set keeps the per-feature Mahalanobis work quadratic. Also the
// shared machinery for the energy scoring in ood.hpp.
class ComponentSolver {
 public:
  explicit ComponentSolver(const GmmParams& params) : params_(&params) {
    params.validate();
    factors_.reserve(params.k);
    log_dets_.reserve(params.k);
    for (std::size_t i = 0; i < params.k; ++i) {
      try {
        factors_.push_back(cholesky(params.covariances[i]));
      } catch (const NumericError&) {
        throw NumericError("gmm component " + std::to_string(i) +
                           ": covariance not positive definite");
      }
      log_dets_.push_back(log_det_from_cholesky(factors_.back()));
    }
  }

  const GmmParams& params() const { return *params_; }

  // (l - mu_i)^T Lambda_i^{-1} (l - mu_i)
  double squared_mahalanobis(std::size_t i, std::span<const double> l) const {
    const Vec r = sub(l, params_->means[i]);
    const Vec z = chol_solve(factors_[i], r);
    return dot(r, z);
  }

  // Lambda_i^{-1} (l - mu_i)
  Vec solve_residual(std::size_t i, std::span<const double> l) const {
    const Vec r = sub(l, params_->means[i]);
    return chol_solve(factors_[i], r);
  }

  double log_det(std::size_t i) const { return log_dets_[i]; }

 private:
  const GmmParams* params_;
  std::vector<Mat> factors_;
  std::vector<double> log_dets_;
};

// Posterior-style weights of one feature over the k components: softmax of
// -1/2 squared Mahalanobis distances, evaluated in log space.
inline Vec responsibilities(std::span<const double> feature, const ComponentSolver& solver) {
  const GmmParams& p = solver.params();
  if (feature.size() != p.dim) throw DimensionError("responsibilities: feature dim mismatch");
  Vec energies(p.k);
  for (std::size_t i = 0; i < p.k; ++i)
    energies[i] = -0.5 * solver.squared_mahalanobis(i, feature);
  return softmax(energies);
}

inline Vec responsibilities(std::span<const double> feature, const GmmParams& params) {
  return responsibilities(feature, ComponentSolver(params));
}

// Average per-feature log-density under the uniform-weight mixture. This is
// the quantity the monotonicity property tracks across iterations.
inline double avg_log_density(const std::vector<Vec>& features, const GmmParams& params) {
  if (features.empty()) throw DimensionError("avg_log_density: no features");
  const ComponentSolver solver(params);
  const double d = static_cast<double>(params.dim);
  const double log_norm = -std::log(static_cast<double>(params.k)) -
                          0.5 * d * std::log(2.0 * std::numbers::pi);
  double total = 0.0;
  Vec comp_logs(params.k);
  for (const Vec& l : features) {
    for (std::size_t i = 0; i < params.k; ++i)
      comp_logs[i] = log_norm - 0.5 * (solver.squared_mahalanobis(i, l) + solver.log_det(i));
    total += logsumexp(comp_logs);
  }
  return total / static_cast<double>(features.size());
}

struct EmStepResult {
  GmmParams params;
  // Components whose total responsibility collapsed below 1e-12 and were
  // reseeded from a random feature.
  std::vector<std::size_t> reinitialized;
};

namespace detail {
inline Mat global_covariance_with_ridge(const std::vector<Vec>& features, std::size_t dim,
                                        double eps_cov) {
  Mat cov = features.size() > 1 ? covariance_matrix(features) : Mat(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) cov(i, i) += eps_cov;
  return cov;
}

inline void check_features(const std::vector<Vec>& features, std::size_t dim) {
  if (features.empty()) throw DimensionError("em: no features");
  for (const Vec& f : features) {
    if (f.size() != dim) throw DimensionError("em: feature dim mismatch");
    if (!all_finite(f)) throw NumericError("em: non-finite feature");
  }
}
}  // namespace detail

// One fixed-point application: responsibility-weighted means, then
// responsibility-weighted covariances around the new means, plus the
// eps_cov ridge. rng seeds the reseed of collapsed components; pass the
// fitting loop's generator for reproducible runs.
inline EmStepResult em_step(const std::vector<Vec>& features, const GmmParams& params,
                            double eps_cov, Rng& rng) {
  detail::check_features(features, params.dim);
  if (!(eps_cov > 0.0)) throw ConfigError("em_step: eps_cov must be positive");
  const ComponentSolver solver(params);
  const std::size_t n = features.size(), k = params.k, d = params.dim;

  std::vector<Vec> resp(n);
  for (std::size_t t = 0; t < n; ++t) resp[t] = responsibilities(features[t], solver);

  EmStepResult result;
  result.params.k = k;
  result.params.dim = d;
  result.params.means.assign(k, Vec(d, 0.0));
  result.params.covariances.assign(k, Mat(d, d));

  Vec totals(k, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < k; ++i) totals[i] += resp[t][i];

  for (std::size_t i = 0; i < k; ++i) {
    if (totals[i] < 1e-12) {
      const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(n));
      result.params.means[i] = features[pick];
      result.params.covariances[i] = detail::global_covariance_with_ridge(features, d, eps_cov);
      result.reinitialized.push_back(i);
      continue;
    }
    Vec& mu = result.params.means[i];
    for (std::size_t t = 0; t < n; ++t) axpy(resp[t][i], features[t], mu);
    for (double& v : mu) v /= totals[i];

    Mat& cov = result.params.covariances[i];
    for (std::size_t t = 0; t < n; ++t) {
      const double w = resp[t][i];
      const Vec r = sub(features[t], mu);
      for (std::size_t a = 0; a < d; ++a) {
        const double wra = w * r[a];
        for (std::size_t b = 0; b < d; ++b) cov(a, b) += wra * r[b];
      }
    }
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) cov(a, b) /= totals[i];
      cov(a, a) += eps_cov;
    }
  }
  result.params.validate();
  return result;
}

inline EmStepResult em_step(const std::vector<Vec>& features, const GmmParams& params,
                            double eps_cov = kDefaultEpsCov) {
  Rng rng(0x5EED);
  return em_step(features, params, eps_cov, rng);
}

struct FitResult {
  GmmParams params;  // mu*, Lambda*
  std::size_t iterations_run = 0;
  bool converged = false;
  double final_displacement = std::numeric_limits<double>::infinity();
  // avg_log_density of the fitted features at the initial params and after
  // every accepted iterate; length iterations_run + 1.
  std::vector<double> density_trace;
  std::size_t reinit_events = 0;
};

// Runs the EM map as a fixed-point iteration: stop when the largest mean
// displacement drops below tol or after max_iters applications. The loop is
// forward-only; gradients never see the trajectory.
inline FitResult fit_fixed_point(const std::vector<Vec>& features, const GmmParams& init,
                                 const FitConfig& config) {
  config.validate();
  detail::check_features(features, init.dim);
  FitResult result;
  result.params = init;
  result.density_trace.push_back(avg_log_density(features, init));
  Rng rng(derive_seed(config.seed, 0xE11));

  for (std::size_t iter = 1; iter <= config.max_iters; ++iter) {
    EmStepResult step = em_step(features, result.params, config.eps_cov, rng);
    result.reinit_events += step.reinitialized.size();

    double displacement = 0.0;
    for (std::size_t i = 0; i < init.k; ++i) {
      const Vec delta = sub(step.params.means[i], result.params.means[i]);
      displacement = std::max(displacement, norm2(delta));
    }
    if (!std::isfinite(displacement))
      throw NumericError("fit_fixed_point: non-finite iterate at iteration " +
                         std::to_string(iter));

    result.params = std::move(step.params);
    result.iterations_run = iter;
    result.final_displacement = displacement;
    result.density_trace.push_back(avg_log_density(features, result.params));
    if (displacement < config.tol) {
      result.converged = true;
      break;
    }
  }
  return result;
}

// Seeding for the fixed-point iteration. random-subset picks k distinct
// features as means and starts every covariance at the global feature
// covariance plus the ridge. kmeans-like picks seeds greedily with
// squared-distance weighting and starts from an isotropic covariance at the
// within-cluster scale (mean squared distance to the nearest seed), which
// keeps the first responsibilities sharp enough for the update to settle on
// one component per cluster.
inline GmmParams init_params(const std::vector<Vec>& features, std::size_t k, std::uint64_t seed,
                             InitStrategy strategy = InitStrategy::kRandomSubset,
                             double eps_cov = kDefaultEpsCov) {
  if (features.empty()) throw DimensionError("init_params: no features");
  if (k < 1) throw ConfigError("init_params: k must be >= 1");
  if (k > features.size())
    throw ConfigError("init_params: k exceeds feature count (" + std::to_string(k) + " > " +
                      std::to_string(features.size()) + ")");
  const std::size_t d = features[0].size();
  detail::check_features(features, d);

  Rng rng(seed);
  std::vector<std::size_t> chosen;
  if (strategy == InitStrategy::kRandomSubset) {
    chosen = rng.sample_without_replacement(features.size(), k);
  } else {
    // Greedy farthest-point traversal from a random start: on separated
    // clusters this lands one seed per cluster. Ties break on the lowest
    // index.
    chosen.push_back(static_cast<std::size_t>(rng.uniform_int(features.size())));
    while (chosen.size() < k) {
      double best_dist = -1.0;
      std::size_t pick = 0;
      for (std::size_t t = 0; t < features.size(); ++t) {
        double nearest = std::numeric_limits<double>::infinity();
        for (std::size_t c : chosen) {
          const Vec r = sub(features[t], features[c]);
          nearest = std::min(nearest, dot(r, r));
        }
        if (nearest > best_dist) {
          best_dist = nearest;
          pick = t;
        }
      }
      chosen.push_back(pick);
    }
  }

  GmmParams params;
  params.k = k;
  params.dim = d;
  Mat cov;
  if (strategy == InitStrategy::kRandomSubset) {
    cov = detail::global_covariance_with_ridge(features, d, eps_cov);
  } else {
    double scatter = 0.0;
    for (const Vec& f : features) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c : chosen) {
        const Vec r = sub(f, features[c]);
        best = std::min(best, dot(r, r));
      }
      scatter += best;
    }
    const double s2 =
        scatter / (static_cast<double>(features.size()) * static_cast<double>(d));
    cov = Mat::identity(d, s2 + eps_cov);
  }
  for (std::size_t i = 0; i < k; ++i) {
    params.means.push_back(features[chosen[i]]);
    params.covariances.push_back(cov);
  }
  params.validate();
  return params;
}

// Replaces every component covariance with their average; the
// shared-covariance variant of the energy score.
inline GmmParams with_shared_covariance(const GmmParams& params) {
  params.validate();
  GmmParams out = params;
  Mat shared(params.dim, params.dim);
  for (const Mat& c : params.covariances)
    for (std::size_t a = 0; a < params.dim; ++a)
      for (std::size_t b = 0; b < params.dim; ++b) shared(a, b) += c(a, b);
  for (std::size_t a = 0; a < params.dim; ++a)
    for (std::size_t b = 0; b < params.dim; ++b) shared(a, b) /= static_cast<double>(params.k);
  for (Mat& c : out.covariances) c = shared;
  return out;
}

// --- flat text persistence --------------------------------------------------
// line 1: "k d"; k mean rows; then k blocks of d rows of d covariance
// entries. 17 significant digits round-trip doubles exactly.

inline void save_params(const GmmParams& params, const std::string& path) {
  params.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << params.k << ' ' << params.dim << '\n';
  const auto row = [&out](const double* v, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) out << ' ';
      out << format_double(v[j]);
    }
    out << '\n';
  };
  for (const Vec& m : params.means) row(m.data(), m.size());
  for (const Mat& c : params.covariances)
    for (std::size_t i = 0; i < c.rows(); ++i) row(c.data() + i * c.cols(), c.cols());
  if (!out) throw IoError("write failed: " + path);
}

inline GmmParams load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  GmmParams params;
  if (!(in >> params.k >> params.dim)) throw IoError("params file: bad header: " + path);
  params.means.assign(params.k, Vec(params.dim));
  params.covariances.assign(params.k, Mat(params.dim, params.dim));
  for (Vec& m : params.means)
    for (double& v : m)
      if (!(in >> v)) throw IoError("params file: truncated means: " + path);
  for (Mat& c : params.covariances)
    for (std::size_t i = 0; i < params.dim; ++i)
      for (std::size_t j = 0; j < params.dim; ++j)
        if (!(in >> c(i, j))) throw IoError("params file: truncated covariances: " + path);
  params.validate();
  return params;
}

}  // namespace gemgate::gmm
