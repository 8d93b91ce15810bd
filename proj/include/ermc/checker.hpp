#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ermc/erlang.hpp"
#include "ermc/errors.hpp"
#include "ermc/fit.hpp"
#include "ermc/model.hpp"
#include "ermc/moments.hpp"

namespace ermc {

enum class Direction { at_most, at_least, interval };

// Pr(X <= r) >= alpha, Pr(X >= r) >= alpha, or Pr(lo <= X <= hi) >= alpha.
struct ChanceConstraint {
  Direction direction = Direction::at_most;
  double threshold = 0.0;  // r*, or the lower end of an interval
  double upper = 0.0;      // interval only
  double alpha = 0.5;

  static ChanceConstraint at_most(double r, double alpha) { return {Direction::at_most, r, 0.0, alpha}; }
  static ChanceConstraint at_least(double r, double alpha) { return {Direction::at_least, r, 0.0, alpha}; }
  static ChanceConstraint between(double lo, double hi, double alpha) { return {Direction::interval, lo, hi, alpha}; }

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw PreconditionError("alpha must lie in (0, 1)");
    if (!(threshold >= 0.0) || !std::isfinite(threshold)) throw PreconditionError("threshold must be nonnegative");
    if (direction == Direction::interval && !(upper >= threshold && std::isfinite(upper)))
      throw PreconditionError("interval bounds must be ordered");
  }

  std::string to_string() const;
};

enum class Decision { holds, fails, undetermined_by_bound };
enum class Method { degenerate, cantelli, fitted_cdf };

inline std::string to_string(Decision d) {
  switch (d) {
    case Decision::holds: return "holds";
    case Decision::fails: return "fails";
    case Decision::undetermined_by_bound: return "undetermined_by_bound";
  }
  return "?";
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::degenerate: return "degenerate";
    case Method::cantelli: return "cantelli";
    case Method::fitted_cdf: return "fitted_cdf";
  }
  return "?";
}

inline std::string format_number(double v) {
  char buf[64];
  auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
  return std::string(buf, end);
}

inline std::string ChanceConstraint::to_string() const {
  switch (direction) {
    case Direction::at_most: return "P[X <= " + format_number(threshold) + "] >= " + format_number(alpha);
    case Direction::at_least: return "P[X >= " + format_number(threshold) + "] >= " + format_number(alpha);
    case Direction::interval:
      return "P[" + format_number(threshold) + " <= X <= " + format_number(upper) + "] >= " + format_number(alpha);
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Generalized Cantelli bound
// ---------------------------------------------------------------------------

struct CantelliBound {
  double bound = 1.0;  // upper bound on Pr(X - mu >= a)
  double b = 0.0;      // minimizing shift
  std::size_t order = 2;
};

// E[(X + shift)^n] = sum_j C(n, j) shift^(n-j) E[X^j]
inline double shifted_power_moment(std::span<const double> raw, double shift, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j <= n; ++j) {
    const double mj = j == 0 ? 1.0 : raw[j - 1];
    s += binomial(n, j) * std::pow(shift, static_cast<double>(n - j)) * mj;
  }
  return s;
}

namespace detail {

// Bound on Pr(Y >= a) for Y = s(X - mu), s = +1 or -1, given the raw moments
// of X.
inline CantelliBound cantelli_tail(const MomentVector& m, double a, std::size_t n, double sign) {
  if (!(a > 0.0) || !std::isfinite(a)) throw PreconditionError("Cantelli deviation must be positive");
  if (n < 2) throw PreconditionError("Cantelli order must be at least 2");
  if (n > m.order()) throw PreconditionError("Cantelli order exceeds the available moments");

  CantelliBound out;
  out.order = n;
  const double var = m.variance;
  if (n == 2) {
    out.b = var / a;
    out.bound = var / (var + a * a);
    return out;
  }

  const double mu = m.mean();
  // E[(Y + b)^n] with Y = sign (X - mu): expand in X with shift (b/sign - mu),
  // times sign^n.
  auto numerator = [&](double b) {
    const double shift = sign > 0 ? b - mu : -b - mu;
    const double sn = (sign < 0 && n % 2 == 1) ? -1.0 : 1.0;
    return sn * shifted_power_moment(m.raw, shift, n);
  };
  auto ratio = [&](double b) { return numerator(b) / std::pow(a + b, static_cast<double>(n)); };

  // Markov on (Y + b)^n needs Y + b >= 0 whenever n is odd; X >= 0 gives
  // Y >= -mu for the upper tail. Odd orders are unusable for the lower tail.
  double b_min = 0.0;
  if (n % 2 == 1) {
    if (sign < 0) {
      out.bound = 1.0;
      return out;
    }
    b_min = mu;
  }

  const double scale = std::max({a, m.sigma, mu, 1e-300});
  double best_b = b_min;
  double best = ratio(b_min);
  int best_j = -1;
  constexpr int steps = 240;
  std::vector<double> grid;
  grid.push_back(b_min);
  for (int j = 0; j < steps; ++j) {
    // Logarithmic sweep from 1e-6 to 1e6 times the natural scale above b_min.
    const double b = b_min + scale * std::pow(10.0, -6.0 + 12.0 * j / (steps - 1));
    grid.push_back(b);
    const double v = ratio(b);
    if (std::isfinite(v) && v < best) {
      best = v;
      best_b = b;
      best_j = j + 1;
    }
  }
  if (best_j >= 0) {
    double lo = grid[static_cast<std::size_t>(best_j - 1)];
    double hi = grid[std::min(grid.size() - 1, static_cast<std::size_t>(best_j + 1))];
    constexpr double inv_phi = 0.6180339887498949;
    double x1 = hi - inv_phi * (hi - lo);
    double x2 = lo + inv_phi * (hi - lo);
    double f1 = ratio(x1);
    double f2 = ratio(x2);
    while (hi - lo > 1e-8 * std::max(1.0, std::abs(hi))) {
      if (f1 <= f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - inv_phi * (hi - lo);
        f1 = ratio(x1);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + inv_phi * (hi - lo);
        f2 = ratio(x2);
      }
    }
    const double b = f1 <= f2 ? x1 : x2;
    const double v = std::min(f1, f2);
    if (v < best) {
      best = v;
      best_b = b;
    }
  }
  out.b = best_b;
  out.bound = std::clamp(best, 0.0, 1.0);
  return out;
}

}  // namespace detail

// Upper bound on Pr(X - mu >= a) from the first n raw moments.
inline CantelliBound cantelli_bound(const MomentVector& m, double a, std::size_t n) {
  return detail::cantelli_tail(m, a, n, 1.0);
}

// Upper bound on Pr(mu - X >= a).
inline CantelliBound cantelli_lower_bound(const MomentVector& m, double a, std::size_t n) {
  return detail::cantelli_tail(m, a, n, -1.0);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct CheckOptions {
  FitConfig fit;
  std::vector<std::size_t> orders{2, 3};  // Cantelli orders, tried ascending
  double marginal_margin = 0.02;
  bool fallback = true;  // run the fit when the bound is inconclusive
  SolverOptions solver;
};

struct Verdict {
  Decision decision = Decision::undetermined_by_bound;
  Method method = Method::fitted_cdf;
  std::size_t cantelli_order = 0;  // set when method == cantelli
  double cantelli_b = 0.0;
  double probability_low = 0.0;  // estimate interval for the constrained probability
  double probability_high = 1.0;
  bool bound_undetermined = false;  // bounds were tried and proved nothing
  bool marginal = false;
  std::size_t moments_used = 0;
  MomentVector moments;
  std::optional<FitResult> fit;
  std::vector<CantelliBound> bounds_tried;
  double t_moments = 0.0;
  double t_opt = 0.0;
  std::vector<std::string> warnings;

  double probability_estimate() const { return 0.5 * (probability_low + probability_high); }
};

namespace detail {

inline bool point_mass_satisfies(const ChanceConstraint& c, double x) {
  const double tol = 1e-9 * std::max(1.0, std::abs(x));
  switch (c.direction) {
    case Direction::at_most: return x <= c.threshold + tol;
    case Direction::at_least: return x >= c.threshold - tol;
    case Direction::interval: return x >= c.threshold - tol && x <= c.upper + tol;
  }
  return false;
}

inline double fitted_probability(const ChanceConstraint& c, const ErlangMixture& m) {
  switch (c.direction) {
    case Direction::at_most: return mixture_cdf(m, c.threshold);
    case Direction::at_least: return mixture_sf(m, c.threshold);
    case Direction::interval: return std::max(0.0, mixture_cdf(m, c.upper) - mixture_cdf(m, c.threshold));
  }
  return 0.0;
}

}  // namespace detail

// Decides c against precomputed moments.
inline Verdict check_moments(const MomentVector& moments, const ChanceConstraint& c, const CheckOptions& opt) {
  c.validate();
  Verdict v;
  v.moments = moments;
  v.moments_used = moments.order();
  const double mu = moments.mean();

  if (!(moments.variance > 1e-12 * std::max(1.0, mu * mu))) {
    const bool ok = detail::point_mass_satisfies(c, mu);
    v.method = Method::degenerate;
    v.decision = ok ? Decision::holds : Decision::fails;
    v.probability_low = v.probability_high = ok ? 1.0 : 0.0;
    return v;
  }

  std::vector<std::size_t> orders = opt.orders;
  std::sort(orders.begin(), orders.end());
  orders.erase(std::unique(orders.begin(), orders.end()), orders.end());
  bool tried = false;
  for (std::size_t n : orders) {
    if (n < 2 || n > moments.order()) continue;
    // Probability mass certified to satisfy the constraint.
    double certified = 0.0;
    CantelliBound used;
    bool applicable = false;
    switch (c.direction) {
      case Direction::at_most:
        if (c.threshold > mu) {
          used = cantelli_bound(moments, c.threshold - mu, n);
          certified = 1.0 - used.bound;
          applicable = true;
        }
        break;
      case Direction::at_least:
        if (c.threshold < mu) {
          used = cantelli_lower_bound(moments, mu - c.threshold, n);
          certified = 1.0 - used.bound;
          applicable = true;
        }
        break;
      case Direction::interval:
        if (c.threshold < mu && c.upper > mu) {
          auto hi = cantelli_bound(moments, c.upper - mu, n);
          auto lo = cantelli_lower_bound(moments, mu - c.threshold, n);
          used = hi;
          certified = 1.0 - hi.bound - lo.bound;
          applicable = true;
        }
        break;
    }
    if (!applicable) continue;
    tried = true;
    v.bounds_tried.push_back(used);
    if (certified >= c.alpha) {
      v.decision = Decision::holds;
      v.method = Method::cantelli;
      v.cantelli_order = n;
      v.cantelli_b = used.b;
      v.probability_low = std::clamp(certified, 0.0, 1.0);
      v.probability_high = 1.0;
      return v;
    }
  }
  v.bound_undetermined = tried;

  if (!opt.fallback) {
    v.decision = Decision::undetermined_by_bound;
    v.method = Method::cantelli;
    v.probability_low = 0.0;
    v.probability_high = 1.0;
    return v;
  }

  FitConfig cfg = opt.fit;
  cfg.moments = std::min(cfg.moments, moments.order());
  auto t0 = std::chrono::steady_clock::now();
  FitResult fit = fit_mixture(moments, cfg);
  v.t_opt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double p = std::clamp(detail::fitted_probability(c, fit.mixture), 0.0, 1.0);
  v.method = Method::fitted_cdf;
  v.decision = p >= c.alpha ? Decision::holds : Decision::fails;
  v.probability_low = v.probability_high = p;
  v.marginal = std::abs(p - c.alpha) < opt.marginal_margin;
  v.warnings = fit.warnings;
  v.fit = std::move(fit);
  return v;
}

// Full pipeline: moments, degenerate check, Cantelli fast path, fitted CDF.
inline Verdict check_chance_constraint(const Dtmc& d, const ChanceConstraint& c, const CheckOptions& opt = {}) {
  c.validate();
  std::size_t order = opt.fit.moments;
  for (std::size_t n : opt.orders) order = std::max(order, n);
  order = std::max<std::size_t>(order, 2);
  auto t0 = std::chrono::steady_clock::now();
  auto rm = reward_moments(d, order, opt.fit.standardization, opt.solver);
  const double t_moments = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Verdict v = check_moments(rm.moments, c, opt);
  v.t_moments = t_moments;
  return v;
}

}  // namespace ermc
