#pragma once

// Erlang densities and distribution functions, common-rate Erlang mixtures
// with a location shift, and the grid construction that approximates an
// arbitrary CDF on [0, inf) by Erlang(j, 1/beta) components.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ermc/errors.hpp"
#include "ermc/quadrature.hpp"

namespace ermc {

using Shape = std::int64_t;

namespace detail {

inline void check_erlang(Shape shape, double rate) {
  if (shape < 1) throw PreconditionError("Erlang shape must be a positive integer");
  if (!(rate > 0.0) || !std::isfinite(rate)) throw PreconditionError("Erlang rate must be positive");
}

// log Gamma(a) - ((a - 1/2) log a - a + log(2 pi) / 2), for a >= 10
inline double stirling_correction(double a) {
  const double r = 1.0 / (a * a);
  return (1.0 / 12.0 - r * (1.0 / 360.0 - r * (1.0 / 1260.0 - r * (1.0 / 1680.0)))) / a;
}

// log(1 + u) - u for small |u|
inline double log1pmx(double u) {
  double term = u;
  double sum = 0.0;
  for (int k = 2; k < 60; ++k) {
    term *= -u;
    const double add = term / k;
    sum += add;
    if (std::abs(add) <= 1e-17 * std::abs(sum)) break;
  }
  return sum;
}

// log of x^a e^{-x} / Gamma(a)
inline double gamma_log_prefactor(double a, double x) {
  if (a < 10.0) return a * std::log(x) - x - std::lgamma(a);
  constexpr double half_log_two_pi = 0.91893853320467274178;
  const double u = (x - a) / a;
  const double core = std::abs(u) > 0.1 ? std::log(x / a) - u : log1pmx(u);
  return a * core + 0.5 * std::log(a) - half_log_two_pi - stirling_correction(a);
}

// Lower regularized incomplete gamma P(a, x) by its power series; x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 1000000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum * std::exp(gamma_log_prefactor(a, x));
}

// Upper regularized incomplete gamma Q(a, x) by the modified Lentz continued
// fraction; x >= a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 1000000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(gamma_log_prefactor(a, x)) * h;
}

}  // namespace detail

inline double erlang_log_pdf(double x, Shape shape, double rate) {
  detail::check_erlang(shape, rate);
  if (x < 0.0) return -std::numeric_limits<double>::infinity();
  const double a = static_cast<double>(shape);
  if (x == 0.0) return shape == 1 ? std::log(rate) : -std::numeric_limits<double>::infinity();
  if (a < 10.0) return a * std::log(rate) + (a - 1.0) * std::log(x) - rate * x - std::lgamma(a);
  return std::log(rate) - std::log(rate * x) + detail::gamma_log_prefactor(a, rate * x);
}

inline double erlang_pdf(double x, Shape shape, double rate) {
  return std::exp(erlang_log_pdf(x, shape, rate));
}

// 1 - sum_{j<a} (rate x)^j e^{-rate x} / j!, evaluated through whichever of
// the lower series or upper continued fraction avoids cancellation.
inline double erlang_cdf(double x, Shape shape, double rate) {
  detail::check_erlang(shape, rate);
  if (x <= 0.0) return 0.0;
  const double a = static_cast<double>(shape);
  const double z = rate * x;
  if (!std::isfinite(z)) return 1.0;
  if (z < a + 1.0) return std::min(1.0, detail::gamma_p_series(a, z));
  return std::max(0.0, 1.0 - detail::gamma_q_fraction(a, z));
}

// Survival function 1 - F, accurate in the upper tail.
inline double erlang_sf(double x, Shape shape, double rate) {
  detail::check_erlang(shape, rate);
  if (x <= 0.0) return 1.0;
  const double a = static_cast<double>(shape);
  const double z = rate * x;
  if (!std::isfinite(z)) return 0.0;
  if (z < a + 1.0) return std::max(0.0, 1.0 - detail::gamma_p_series(a, z));
  return std::min(1.0, detail::gamma_q_fraction(a, z));
}

// ---------------------------------------------------------------------------
// Mixtures
// ---------------------------------------------------------------------------

// Law of location + Y where Y has density sum_i w_i Erlang(y; a_i, rate).
struct ErlangMixture {
  std::vector<double> weights;
  std::vector<Shape> shapes;
  double rate = 1.0;
  double location = 0.0;

  std::size_t size() const noexcept { return weights.size(); }

  void validate() const {
    if (weights.empty()) throw PreconditionError("mixture needs at least one component");
    if (weights.size() != shapes.size())
      throw PreconditionError("mixture weights and shapes differ in length");
    double sum = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw PreconditionError("mixture weight must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw PreconditionError("mixture weights must sum to one");
    for (Shape a : shapes)
      if (a < 1) throw PreconditionError("mixture shape must be a positive integer");
    if (!(rate > 0.0) || !std::isfinite(rate)) throw PreconditionError("mixture rate must be positive");
    if (!(location >= 0.0) || !std::isfinite(location))
      throw PreconditionError("mixture location must be nonnegative");
  }

  friend bool operator==(const ErlangMixture&, const ErlangMixture&) = default;
};

inline ErlangMixture single_erlang(Shape shape, double rate, double location = 0.0) {
  return ErlangMixture{{1.0}, {shape}, rate, location};
}

// log f at x for the unshifted mixture, by log-sum-exp over components.
inline double mixture_log_pdf_unshifted(const ErlangMixture& m, double y) {
  double best = -std::numeric_limits<double>::infinity();
  thread_local std::vector<double> logs;
  logs.clear();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.weights[i] <= 0.0) continue;
    double l = std::log(m.weights[i]) + erlang_log_pdf(y, m.shapes[i], m.rate);
    logs.push_back(l);
    best = std::max(best, l);
  }
  if (!std::isfinite(best)) return best;
  double s = 0.0;
  for (double l : logs) s += std::exp(l - best);
  return best + std::log(s);
}

inline double mixture_pdf(const ErlangMixture& m, double x) {
  const double y = x - m.location;
  if (y < 0.0) return 0.0;
  double f = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.weights[i] > 0.0) f += m.weights[i] * erlang_pdf(y, m.shapes[i], m.rate);
  return f;
}

inline double mixture_cdf(const ErlangMixture& m, double x) {
  const double y = x - m.location;
  if (y <= 0.0) return 0.0;
  double F = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.weights[i] > 0.0) F += m.weights[i] * erlang_cdf(y, m.shapes[i], m.rate);
  return std::clamp(F, 0.0, 1.0);
}

inline double mixture_sf(const ErlangMixture& m, double x) {
  const double y = x - m.location;
  if (y <= 0.0) return 1.0;
  double S = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.weights[i] > 0.0) S += m.weights[i] * erlang_sf(y, m.shapes[i], m.rate);
  return std::clamp(S, 0.0, 1.0);
}

struct MixtureMoments {
  std::vector<double> unshifted;  // E[Y^k], k = 1..K
  std::vector<double> shifted;    // E[(location + Y)^k]
};

// Rising factorial a (a+1) ... (a+k-1) = (a+k-1)!/(a-1)! in log space.
inline double log_rising_factorial(Shape a, std::size_t k) {
  const double ad = static_cast<double>(a);
  return std::lgamma(ad + static_cast<double>(k)) - std::lgamma(ad);
}

inline MixtureMoments mixture_moments(const ErlangMixture& m, std::size_t order) {
  if (order == 0) throw PreconditionError("moment order must be at least 1");
  m.validate();
  MixtureMoments out;
  out.unshifted.assign(order, 0.0);
  const double log_rate = std::log(m.rate);
  for (std::size_t k = 1; k <= order; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m.weights[i] <= 0.0) continue;
      s += std::exp(std::log(m.weights[i]) + log_rising_factorial(m.shapes[i], k) -
                    static_cast<double>(k) * log_rate);
    }
    out.unshifted[k - 1] = s;
  }
  out.shifted.assign(order, 0.0);
  for (std::size_t k = 1; k <= order; ++k) {
    double s = 0.0;
    double binom = 1.0;  // C(k, j)
    for (std::size_t j = 0; j <= k; ++j) {
      const double mj = j == 0 ? 1.0 : out.unshifted[j - 1];
      s += binom * std::pow(m.location, static_cast<double>(k - j)) * mj;
      binom = binom * static_cast<double>(k - j) / static_cast<double>(j + 1);
    }
    out.shifted[k - 1] = s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quantiles
// ---------------------------------------------------------------------------

namespace detail {

// Smallest power-of-two multiple of a scale where the survival function drops
// below the requested tail.
template <class Sf>
double upper_bracket(Sf&& sf, double scale, double tail) {
  double hi = std::max(scale, 1e-300);
  for (int i = 0; i < 2000 && sf(hi) > tail; ++i) hi *= 2.0;
  return hi;
}

}  // namespace detail

// Quantile of the unshifted mixture by bisection; tolerance is on the CDF
// (or on the survival function in the upper half, where it is accurate).
inline double mixture_quantile_unshifted(const ErlangMixture& m, double p) {
  if (!(p > 0.0 && p < 1.0)) throw PreconditionError("quantile level must lie in (0, 1)");
  ErlangMixture y = m;
  y.location = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y.weights[i] > 0.0) scale = std::max(scale, static_cast<double>(y.shapes[i]) / y.rate);

  const bool upper = p > 0.5;
  const double tail = 1.0 - p;
  const double tol = std::min(1e-12, 1e-6 * std::min(p, tail));
  auto sf = [&](double x) { return mixture_sf(y, x); };
  double lo = 0.0;
  double hi = detail::upper_bracket(sf, scale, tail);
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (!(mid > lo && mid < hi)) break;
    // gap > 0 means mid lies below the quantile
    const double gap = upper ? sf(mid) - tail : p - mixture_cdf(y, mid);
    if (std::abs(gap) <= tol) return mid;
    if (gap > 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

inline double mixture_quantile(const ErlangMixture& m, double p) {
  m.validate();
  return m.location + mixture_quantile_unshifted(m, p);
}

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

inline constexpr double kEntropyTailMass = 1e-10;
inline constexpr double kEntropyTolerance = 1e-8;

struct EntropyResult {
  double value = 0.0;        // nats
  double error = 0.0;        // achieved absolute error estimate
  double upper_limit = 0.0;  // integration domain is [0, upper_limit] before shifting
  bool converged = false;
};

namespace detail {

// Panel boundaries around each component's bulk so narrow peaks are seen
// by the first pass of the adaptive rule.
inline std::vector<double> component_breakpoints(const ErlangMixture& m, double upper,
                                                 bool include_zero_weight) {
  std::vector<double> pts{0.0, upper};
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!include_zero_weight && m.weights[i] <= 0.0) continue;
    const double a = static_cast<double>(m.shapes[i]);
    const double mean = a / m.rate;
    const double sd = std::sqrt(a) / m.rate;
    for (double j : {-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0, 16.0}) {
      const double x = mean + j * sd;
      if (x > 0.0 && x < upper) pts.push_back(x);
    }
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

}  // namespace detail

// Differential entropy -int f log f over [location, location + q], q the
// 1 - 1e-10 quantile of the unshifted mixture. Shift invariant.
inline EntropyResult mixture_entropy(const ErlangMixture& m, double abs_tol = kEntropyTolerance) {
  m.validate();
  EntropyResult out;
  out.upper_limit = mixture_quantile_unshifted(m, 1.0 - kEntropyTailMass);
  auto pts = detail::component_breakpoints(m, out.upper_limit, false);
  auto integrand = [&](double y) {
    const double lf = mixture_log_pdf_unshifted(m, y);
    if (!std::isfinite(lf)) return 0.0;
    return -std::exp(lf) * lf;
  };
  auto r = quadrature::integrate(integrand, std::span<const double>(pts), abs_tol);
  out.value = r.value;
  out.error = r.error;
  out.converged = r.converged;
  return out;
}

// ---------------------------------------------------------------------------
// Grid construction: weights F(j beta) - F((j-1) beta) on Erlang(j, 1/beta)
// ---------------------------------------------------------------------------

struct GridApproximation {
  ErlangMixture mixture;
  double captured_mass = 0.0;   // sum of the raw weights
  double truncated_mass = 0.0;  // 1 - captured_mass
  bool renormalized = false;
};

template <class Cdf>
GridApproximation grid_erlang_approximation(Cdf&& cdf, double beta, std::size_t j_max,
                                            double max_truncated_mass = 1e-3) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw PreconditionError("grid step must be positive");
  if (j_max == 0) throw PreconditionError("grid needs at least one component");
  GridApproximation out;
  out.mixture.rate = 1.0 / beta;
  out.mixture.location = 0.0;
  double previous = cdf(0.0);
  double captured = 0.0;
  for (std::size_t j = 1; j <= j_max; ++j) {
    const double current = cdf(static_cast<double>(j) * beta);
    const double w = std::max(0.0, current - previous);
    out.mixture.weights.push_back(w);
    out.mixture.shapes.push_back(static_cast<Shape>(j));
    captured += w;
    previous = current;
  }
  out.captured_mass = captured;
  out.truncated_mass = 1.0 - captured;
  if (out.truncated_mass > max_truncated_mass)
    throw PreconditionError("grid too short: truncated mass " + std::to_string(out.truncated_mass));
  if (captured <= 0.0) throw PreconditionError("grid captured no probability mass");
  if (out.truncated_mass != 0.0) {
    for (double& w : out.mixture.weights) w /= captured;
    out.renormalized = true;
  }
  return out;
}

}  // namespace ermc
