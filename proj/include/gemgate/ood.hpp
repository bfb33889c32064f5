#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gemgate/csv.hpp"
#include "gemgate/diff.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/gmm.hpp"
#include "gemgate/linalg.hpp"

namespace gemgate::ood {

// Per-feature scoring outcome. indicator == true exactly when
// score >= threshold; the boundary is inclusive.
struct OodDecision {
  double score = 0.0;
  bool indicator = false;
  double threshold = 0.0;
};

// Backward surrogate for the hard gate. relu keeps the hard indicator in the
// forward pass and differentiates relu(s - lambda1); sigmoid replaces the
// gate factor by sigmoid((s - lambda1)/temperature) in both directions,
// which makes the whole loss smooth.
enum class GateSurrogate { kRelu, kSigmoid };

struct OodLayerConfig {
  double threshold = 0.0;  // lambda1
  GateSurrogate surrogate = GateSurrogate::kRelu;
  double temperature = 1.0;

  void validate() const {
    if (surrogate == GateSurrogate::kSigmoid && !(temperature > 0.0))
      throw ConfigError("ood config: sigmoid temperature must be positive");
    if (!std::isfinite(threshold)) throw ConfigError("ood config: threshold must be finite");
  }
};

// Energy score of a feature against the fitted mixture:
//   s = logsumexp_i( -1/2 (l - mu_i)^T Lambda_i^{-1} (l - mu_i) )
// evaluated with shift-by-max. mu*, Lambda* enter as constants.
inline double gem_score(std::span<const double> l, const gmm::ComponentSolver& solver) {
  const gmm::GmmParams& p = solver.params();
  if (l.size() != p.dim) throw DimensionError("gem_score: feature dim mismatch");
  Vec energies(p.k);
  for (std::size_t i = 0; i < p.k; ++i) energies[i] = -0.5 * solver.squared_mahalanobis(i, l);
  return logsumexp(energies);
}

inline double gem_score(std::span<const double> l, const gmm::GmmParams& params) {
  return gem_score(l, gmm::ComponentSolver(params));
}

// Hard threshold test, inclusive at the boundary.
inline bool detect(double score, double lambda1) {
  if (!std::isfinite(score)) throw DomainError("detect: score must be finite");
  return score >= lambda1;
}

// Score plus its analytic gradients. d_l is ds/dl; d_mu[i] is ds/dmu_i
// (filled only when want_mu). With p = softmax of the component energies:
//   ds/dl = -sum_i p_i Lambda_i^{-1} (l - mu_i),  ds/dmu_i = +p_i Lambda_i^{-1} (l - mu_i).
struct ScoreGradient {
  double score = 0.0;
  Vec d_l;
  std::vector<Vec> d_mu;
};

inline ScoreGradient score_with_gradient(std::span<const double> l,
                                         const gmm::ComponentSolver& solver,
                                         bool want_mu = false) {
  const gmm::GmmParams& p = solver.params();
  if (l.size() != p.dim) throw DimensionError("score gradient: feature dim mismatch");
  Vec energies(p.k);
  std::vector<Vec> solved(p.k);
  for (std::size_t i = 0; i < p.k; ++i) {
    solved[i] = solver.solve_residual(i, l);
    const Vec r = sub(l, p.means[i]);
    energies[i] = -0.5 * dot(r, solved[i]);
  }
  ScoreGradient out;
  out.score = logsumexp(energies);
  const Vec weights = softmax(energies);
  out.d_l.assign(p.dim, 0.0);
  for (std::size_t i = 0; i < p.k; ++i) axpy(-weights[i], solved[i], out.d_l);
  if (want_mu) {
    out.d_mu.resize(p.k);
    for (std::size_t i = 0; i < p.k; ++i) {
      out.d_mu[i] = solved[i];
      for (double& v : out.d_mu[i]) v *= weights[i];
    }
  }
  return out;
}

namespace detail {
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Multiplier turning ds/dl into d(surrogate)/dl. For relu the derivative at
// the kink is taken from the right, matching the inclusive gate.
inline double surrogate_slope(double score, const OodLayerConfig& cfg) {
  if (cfg.surrogate == GateSurrogate::kRelu) return score >= cfg.threshold ? 1.0 : 0.0;
  const double s = sigmoid((score - cfg.threshold) / cfg.temperature);
  return s * (1.0 - s) / cfg.temperature;
}
}  // namespace detail

// Forward value of the gate surrogate: relu(s - lambda1) or
// sigmoid((s - lambda1)/temperature).
inline double gate_surrogate(std::span<const double> l, const gmm::ComponentSolver& solver,
                             const OodLayerConfig& cfg) {
  cfg.validate();
  const double s = gem_score(l, solver);
  if (cfg.surrogate == GateSurrogate::kRelu) return std::max(s - cfg.threshold, 0.0);
  return detail::sigmoid((s - cfg.threshold) / cfg.temperature);
}

// upstream * d/dl [surrogate(s(l) - lambda1)], with mu*, Lambda* frozen.
inline Vec gate_backward(std::span<const double> l, const gmm::ComponentSolver& solver,
                         const OodLayerConfig& cfg, double upstream = 1.0) {
  cfg.validate();
  ScoreGradient g = score_with_gradient(l, solver);
  const double slope = upstream * detail::surrogate_slope(g.score, cfg);
  for (double& v : g.d_l) v *= slope;
  return g.d_l;
}

inline Vec gate_backward(std::span<const double> l, const gmm::GmmParams& params, double lambda1,
                         double upstream = 1.0,
                         GateSurrogate surrogate = GateSurrogate::kRelu,
                         double temperature = 1.0) {
  return gate_backward(l, gmm::ComponentSolver(params),
                       OodLayerConfig{lambda1, surrogate, temperature}, upstream);
}

// Elementwise scoring; order preserved, empty in -> empty out.
inline std::vector<OodDecision> score_batch(const std::vector<Vec>& features,
                                            const gmm::GmmParams& params,
                                            const OodLayerConfig& cfg) {
  cfg.validate();
  std::vector<OodDecision> out;
  if (features.empty()) return out;
  const gmm::ComponentSolver solver(params);
  out.reserve(features.size());
  for (const Vec& l : features) {
    const double s = gem_score(l, solver);
    out.push_back(OodDecision{s, detect(s, cfg.threshold), cfg.threshold});
  }
  return out;
}

// lambda1 as a quantile of the scores the mixture was fitted on (linear
// interpolation between order statistics). Default is the 5th percentile.
inline double calibrate_threshold(std::vector<double> scores, double percentile = 0.05) {
  if (scores.empty()) throw DimensionError("calibrate_threshold: no scores");
  if (!(percentile >= 0.0 && percentile <= 1.0))
    throw ConfigError("calibrate_threshold: percentile must be in [0,1]");
  std::sort(scores.begin(), scores.end());
  const double pos = percentile * static_cast<double>(scores.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, scores.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return scores[lo] * (1.0 - frac) + scores[hi] * frac;
}

// ---------------------------------------------------------------------------
// Tape integration. The converged mixture enters as a constant; only the
// analytic d(score)/dl (and optionally d(score)/dmu) is registered, never
// the fixed-point trajectory.

inline diff::Var score_var(diff::Tape& tape, std::span<const diff::Var> l,
                           const gmm::ComponentSolver& solver) {
  Vec lv(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) lv[i] = l[i].value();
  const ScoreGradient g = score_with_gradient(lv, solver);
  return tape.make_node(g.score, l, g.d_l);
}

// Interaction-mode variant: mu_vars are the k*d trainable mean parameters
// (flattened row-major). The score is evaluated at the solver's converged
// means while the mean gradient is attributed to mu_vars, so the fixed-point
// loop stays out of the gradient path.
inline diff::Var score_var(diff::Tape& tape, std::span<const diff::Var> l,
                           std::span<const diff::Var> mu_vars,
                           const gmm::ComponentSolver& solver) {
  const gmm::GmmParams& p = solver.params();
  if (mu_vars.size() != p.k * p.dim) throw DimensionError("score_var: mu_vars size mismatch");
  Vec lv(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) lv[i] = l[i].value();
  const ScoreGradient g = score_with_gradient(lv, solver, /*want_mu=*/true);
  std::vector<diff::Var> parents(l.begin(), l.end());
  parents.insert(parents.end(), mu_vars.begin(), mu_vars.end());
  Vec partials = g.d_l;
  for (std::size_t i = 0; i < p.k; ++i)
    partials.insert(partials.end(), g.d_mu[i].begin(), g.d_mu[i].end());
  return tape.make_node(g.score, parents, partials);
}

// Gate factor for loss terms. relu mode: forward is the hard indicator,
// backward is the relu surrogate (straight-through). sigmoid mode: forward
// and backward are both the smooth gate.
inline diff::Var gate_var(diff::Tape& tape, std::span<const diff::Var> l,
                          const gmm::ComponentSolver& solver, const OodLayerConfig& cfg) {
  cfg.validate();
  Vec lv(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) lv[i] = l[i].value();
  ScoreGradient g = score_with_gradient(lv, solver);
  const double slope = detail::surrogate_slope(g.score, cfg);
  for (double& v : g.d_l) v *= slope;
  const double value = cfg.surrogate == GateSurrogate::kRelu
                           ? (detect(g.score, cfg.threshold) ? 1.0 : 0.0)
                           : detail::sigmoid((g.score - cfg.threshold) / cfg.temperature);
  return tape.make_node(value, l, g.d_l);
}

// Interaction-mode gate: like gate_var, with the mean gradient routed into
// the trainable mu parameters as well.
inline diff::Var gate_var(diff::Tape& tape, std::span<const diff::Var> l,
                          std::span<const diff::Var> mu_vars,
                          const gmm::ComponentSolver& solver, const OodLayerConfig& cfg) {
  cfg.validate();
  const gmm::GmmParams& p = solver.params();
  if (mu_vars.size() != p.k * p.dim) throw DimensionError("gate_var: mu_vars size mismatch");
  Vec lv(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) lv[i] = l[i].value();
  const ScoreGradient g = score_with_gradient(lv, solver, /*want_mu=*/true);
  const double slope = detail::surrogate_slope(g.score, cfg);
  std::vector<diff::Var> parents(l.begin(), l.end());
  parents.insert(parents.end(), mu_vars.begin(), mu_vars.end());
  Vec partials = g.d_l;
  for (std::size_t i = 0; i < p.k; ++i)
    partials.insert(partials.end(), g.d_mu[i].begin(), g.d_mu[i].end());
  for (double& v : partials) v *= slope;
  const double value = cfg.surrogate == GateSurrogate::kRelu
                           ? (detect(g.score, cfg.threshold) ? 1.0 : 0.0)
                           : detail::sigmoid((g.score - cfg.threshold) / cfg.temperature);
  return tape.make_node(value, parents, partials);
}

// ---------------------------------------------------------------------------

inline void write_decisions_csv(const std::vector<OodDecision>& decisions, std::ostream& out) {
  out << "index,score,indicator\n";
  for (std::size_t i = 0; i < decisions.size(); ++i)
    out << i << ',' << format_double(decisions[i].score) << ',' << (decisions[i].indicator ? 1 : 0)
        << '\n';
}

}  // namespace gemgate::ood
