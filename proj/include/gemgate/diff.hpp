#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "gemgate/errors.hpp"

namespace gemgate::diff {

class Tape;

// Handle to one scalar node on a tape. Trivially copyable; vectors are
// std::vector<Var>.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  double value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode Wengert list. Nodes are scalars; each records its parents and
// the local partial derivatives evaluated at forward time. The tape is
// rebuilt per training step (define-by-run) and is single-owner while
// recording.
class Tape {
 public:
  Var input(double v) {
    if (!std::isfinite(v)) throw DomainError("tape input must be finite");
    return make_node(v, {}, {});
  }

  // Same storage as input; named for intent at call sites.
  Var constant(double v) { return input(v); }

  double value_of(Var v) const { return values_[check(v)]; }
  double adjoint(Var v) const { return adjoints_[check(v)]; }
  std::size_t size() const { return values_.size(); }

  // Propagates d(root)/d(node) into every node's adjoint slot. root is a
  // scalar by construction. Adjoints from a previous backward are discarded.
  void backward(Var root) {
    const std::size_t r = check(root);
    adjoints_.assign(values_.size(), 0.0);
    adjoints_[r] = 1.0;
    for (std::size_t i = r + 1; i-- > 0;) {
      const double a = adjoints_[i];
      if (a == 0.0) continue;
      const std::uint32_t begin = edge_start_[i];
      const std::uint32_t end = edge_start_[i] + edge_count_[i];
      for (std::uint32_t e = begin; e < end; ++e) adjoints_[parents_[e]] += a * partials_[e];
    }
  }

  // Drops all nodes but keeps allocated capacity for the next step.
  void reset() {
    values_.clear();
    adjoints_.clear();
    edge_start_.clear();
    edge_count_.clear();
    parents_.clear();
    partials_.clear();
  }

  // Records a node with explicit parents and local partials. This is also
  // the hook for externally differentiated operators (fixed-point layers
  // register their analytic gradients through it).
  Var make_node(double value, std::span<const Var> parents, std::span<const double> partials) {
    if (parents.size() != partials.size())
      throw DimensionError("tape node: parents/partials size mismatch");
    const std::uint32_t start = static_cast<std::uint32_t>(parents_.size());
    for (const Var& p : parents) {
      if (p.tape != this) throw DomainError("tape node: parent from another tape");
      parents_.push_back(static_cast<std::uint32_t>(check(p)));
    }
    partials_.insert(partials_.end(), partials.begin(), partials.end());
    values_.push_back(value);
    adjoints_.push_back(0.0);
    edge_start_.push_back(start);
    edge_count_.push_back(static_cast<std::uint32_t>(parents.size()));
    return Var{this, static_cast<std::int32_t>(values_.size() - 1)};
  }

 private:
  std::size_t check(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= values_.size())
      throw DomainError("var does not belong to this tape");
    return static_cast<std::size_t>(v.id);
  }

  std::vector<double> values_;
  std::vector<double> adjoints_;
  std::vector<std::uint32_t> edge_start_;
  std::vector<std::uint32_t> edge_count_;
  std::vector<std::uint32_t> parents_;
  std::vector<double> partials_;
};

inline double Var::value() const { return tape->value_of(*this); }

namespace detail {
inline Tape& tape_of(Var a) {
  if (!a.valid()) throw DomainError("operation on invalid var");
  return *a.tape;
}
inline Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw DomainError("operands recorded on different tapes");
  return t;
}
inline double phi(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }
inline double phi_density(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}
}  // namespace detail

// a*x + b as one node; covers scalar multiplication and constant shifts.
inline Var affine(double a, Var x, double b) {
  Var parents[1] = {x};
  double partials[1] = {a};
  return detail::tape_of(x).make_node(a * x.value() + b, parents, partials);
}

inline Var operator+(Var a, Var b) {
  Var parents[2] = {a, b};
  double partials[2] = {1.0, 1.0};
  return detail::tape_of(a, b).make_node(a.value() + b.value(), parents, partials);
}
inline Var operator-(Var a, Var b) {
  Var parents[2] = {a, b};
  double partials[2] = {1.0, -1.0};
  return detail::tape_of(a, b).make_node(a.value() - b.value(), parents, partials);
}
inline Var operator*(Var a, Var b) {
  Var parents[2] = {a, b};
  double partials[2] = {b.value(), a.value()};
  return detail::tape_of(a, b).make_node(a.value() * b.value(), parents, partials);
}
inline Var operator*(double k, Var x) { return affine(k, x, 0.0); }
inline Var operator*(Var x, double k) { return affine(k, x, 0.0); }
inline Var operator/(Var x, double k) { return affine(1.0 / k, x, 0.0); }
inline Var operator+(Var x, double c) { return affine(1.0, x, c); }
inline Var operator+(double c, Var x) { return affine(1.0, x, c); }
inline Var operator-(Var x, double c) { return affine(1.0, x, -c); }
inline Var operator-(double c, Var x) { return affine(-1.0, x, c); }
inline Var operator-(Var x) { return affine(-1.0, x, 0.0); }

inline Var exp(Var x) {
  const double v = std::exp(x.value());
  Var parents[1] = {x};
  double partials[1] = {v};
  return detail::tape_of(x).make_node(v, parents, partials);
}

inline Var log(Var x) {
  const double xv = x.value();
  if (!(xv > 0.0)) throw DomainError("log: argument must be positive");
  Var parents[1] = {x};
  double partials[1] = {1.0 / xv};
  return detail::tape_of(x).make_node(std::log(xv), parents, partials);
}

inline Var relu(Var x) {
  const double xv = x.value();
  Var parents[1] = {x};
  double partials[1] = {xv > 0.0 ? 1.0 : 0.0};
  return detail::tape_of(x).make_node(xv > 0.0 ? xv : 0.0, parents, partials);
}

// x * P(N(0,1) <= x), exact normal-CDF form.
inline Var gelu(Var x) {
  const double xv = x.value();
  const double cdf = detail::phi(xv);
  Var parents[1] = {x};
  double partials[1] = {cdf + xv * detail::phi_density(xv)};
  return detail::tape_of(x).make_node(xv * cdf, parents, partials);
}

inline Var sum(std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("sum: empty input");
  double v = 0.0;
  std::vector<double> partials(xs.size(), 1.0);
  for (const Var& x : xs) v += x.value();
  return detail::tape_of(xs[0]).make_node(v, xs, partials);
}

inline Var mean(std::span<const Var> xs) {
  return affine(1.0 / static_cast<double>(xs.size()), sum(xs), 0.0);
}

inline Var dot(std::span<const Var> u, std::span<const Var> v) {
  if (u.empty() || u.size() != v.size()) throw DimensionError("dot: size mismatch or empty");
  std::vector<Var> parents;
  parents.reserve(2 * u.size());
  parents.insert(parents.end(), u.begin(), u.end());
  parents.insert(parents.end(), v.begin(), v.end());
  std::vector<double> partials(2 * u.size());
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double uv = u[i].value(), vv = v[i].value();
    s += uv * vv;
    partials[i] = vv;
    partials[u.size() + i] = uv;
  }
  return detail::tape_of(u[0], v[0]).make_node(s, parents, partials);
}

// Euclidean norm. The subgradient at the origin is taken as zero.
inline Var l2norm(std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("l2norm: empty input");
  double sq = 0.0;
  for (const Var& x : xs) sq += x.value() * x.value();
  const double n = std::sqrt(sq);
  std::vector<double> partials(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) partials[i] = n > 0.0 ? xs[i].value() / n : 0.0;
  return detail::tape_of(xs[0]).make_node(n, xs, partials);
}

// Row-major m (rows x cols) times v; each output coordinate is a dot node
// over the row and v, so gradients reach both the matrix and the vector.
inline std::vector<Var> matvec(std::span<const Var> m, std::size_t rows, std::size_t cols,
                               std::span<const Var> v) {
  if (m.size() != rows * cols || v.size() != cols) throw DimensionError("matvec: shape mismatch");
  std::vector<Var> out;
  out.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i) out.push_back(dot(m.subspan(i * cols, cols), v));
  return out;
}

// Shift-by-max log-sum-exp; local partials are the softmax weights.
inline Var logsumexp(std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("logsumexp: empty input");
  double m = xs[0].value();
  for (const Var& x : xs) m = std::max(m, x.value());
  double s = 0.0;
  for (const Var& x : xs) s += std::exp(x.value() - m);
  const double v = m + std::log(s);
  std::vector<double> partials(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) partials[i] = std::exp(xs[i].value() - v);
  return detail::tape_of(xs[0]).make_node(v, xs, partials);
}

// softmax_i = exp(x_i - logsumexp(x)); the composition gives exact gradients
// without an n^2 partial block.
inline std::vector<Var> softmax(std::span<const Var> xs) {
  const Var lse = logsumexp(xs);
  std::vector<Var> out;
  out.reserve(xs.size());
  for (const Var& x : xs) out.push_back(exp(x - lse));
  return out;
}

// Binary cross-entropy against a fixed 0/1 label. p is clamped into
// [1e-7, 1-1e-7] before the logs; the clamp region contributes zero
// gradient.
inline Var bce(Var p, double y) {
  if (y != 0.0 && y != 1.0) throw DomainError("bce: label must be 0 or 1");
  const double raw = p.value();
  if (!(raw >= 0.0 && raw <= 1.0)) throw DomainError("bce: probability outside [0,1]");
  constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;
  const double pc = raw < kLo ? kLo : (raw > kHi ? kHi : raw);
  const double v = -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
  const bool interior = raw > kLo && raw < kHi;
  Var parents[1] = {p};
  double partials[1] = {interior ? (pc - y) / (pc * (1.0 - pc)) : 0.0};
  return detail::tape_of(p).make_node(v, parents, partials);
}

// x / y for y > 0, composed as x * exp(-log y) to stay inside the primitive
// set.
inline Var div_positive(Var x, Var y) {
  if (!(y.value() > 0.0)) throw DomainError("div_positive: denominator must be positive");
  return x * exp(-log(y));
}

// ----------------------------------------------------------------------------
// Finite-difference gradient checker (test oracle).

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  bool passed = false;
};

// f builds a scalar root from leaf vars on the given tape. Compares the
// tape's gradient at x against central differences coordinate by
// coordinate; relative error is measured against max(1, |analytic|). Any
// non-finite evaluation fails the check.
inline GradCheck finite_diff_check(
    const std::function<Var(Tape&, std::span<const Var>)>& f, std::span<const double> x, double h,
    double tol) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_check: h must be positive");
  GradCheck result;

  Tape tape;
  std::vector<Var> vars;
  vars.reserve(x.size());
  for (double xi : x) vars.push_back(tape.input(xi));
  const Var root = f(tape, vars);
  if (!std::isfinite(root.value())) {
    result.max_rel_error = std::numeric_limits<double>::infinity();
    return result;
  }
  tape.backward(root);
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) grad[i] = tape.adjoint(vars[i]);

  std::vector<double> xp(x.begin(), x.end());
  const auto eval = [&](std::span<const double> point) {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(point.size());
    for (double p : point) vs.push_back(t.input(p));
    return f(t, vs).value();
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = xp[i];
    xp[i] = xi + h;
    const double fp = eval(xp);
    xp[i] = xi - h;
    const double fm = eval(xp);
    xp[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      result.max_rel_error = std::numeric_limits<double>::infinity();
      result.worst_coordinate = i;
      return result;
    }
    const double central = (fp - fm) / (2.0 * h);
    const double rel = std::abs(central - grad[i]) / std::max(1.0, std::abs(grad[i]));
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_coordinate = i;
    }
  }
  result.passed = result.max_rel_error <= tol;
  return result;
}

}  // namespace gemgate::diff
