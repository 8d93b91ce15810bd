#pragma once

// Moment matching with maximum-entropy regularization: fit a common-rate
// Erlang mixture on a fixed shape grid to the first K moments of a target by
// minimizing
//
//   L(w, rate) = sum_k (mu_k - muhat_k)^2 - gamma * H(f_approx)
//
// over the simplex of weights and a bounded rate.
//
// The optimizer exploits two facts. For a fixed rate the moments are linear
// in the weights, so the residual term is an exact quadratic in w. And since
// every component shares the rate, the mixture at rate r is the rate-one
// mixture scaled by 1/r, which makes H(w, r) = H(w, 1) - log r exact in r.
// Each outer iteration expands H to second order in w only, then minimizes
// the resulting model by solving the simplex QP in w (active set) inside a
// global search over log r, inside a trust box on w. Steps are accepted only
// if the true loss does not increase.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "ermc/erlang.hpp"
#include "ermc/errors.hpp"
#include "ermc/moments.hpp"
#include "ermc/quadrature.hpp"
#include "ermc/random.hpp"

namespace ermc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ShapeRule {
  enum class Kind { dense, linear, exponential };
  Kind kind = Kind::exponential;
  Shape factor = 3;

  static ShapeRule dense() { return {Kind::dense, 1}; }
  static ShapeRule linear(Shape c) { return {Kind::linear, c}; }
  static ShapeRule exponential(Shape c) { return {Kind::exponential, c}; }

  // a_i for i = 1..n: i, c*i, or c^i.
  std::vector<Shape> shapes(std::size_t n) const {
    if (factor < 1) throw PreconditionError("shape rule factor must be positive");
    std::vector<Shape> out;
    Shape power = 1;
    for (std::size_t i = 1; i <= n; ++i) {
      switch (kind) {
        case Kind::dense: out.push_back(static_cast<Shape>(i)); break;
        case Kind::linear: out.push_back(factor * static_cast<Shape>(i)); break;
        case Kind::exponential:
          if (power > std::numeric_limits<Shape>::max() / factor)
            throw PreconditionError("shape grid overflows");
          power *= factor;
          out.push_back(power);
          break;
      }
    }
    return out;
  }

  std::string name() const {
    switch (kind) {
      case Kind::dense: return "dense";
      case Kind::linear: return "linear(" + std::to_string(factor) + ")";
      case Kind::exponential: return "exponential(" + std::to_string(factor) + ")";
    }
    return "?";
  }
};

enum class LocationRule {
  mean_minus_sigma,  // max(0, mu - sigma)
  zero,
  fixed,  // FitConfig::fixed_location
};

struct FitConfig {
  std::size_t moments = 3;     // K
  std::size_t components = 3;  // n
  ShapeRule shape_rule = ShapeRule::exponential(3);
  double gamma = 1.0;
  double epsilon = 1e-8;  // stop when |L_prev - L| < epsilon
  double rate_min = 0.01;
  double rate_max = 50.0;
  std::size_t max_outer_iterations = 500;
  bool standardize_residuals = true;
  StandardizationRule standardization = StandardizationRule::paper_literal;
  LocationRule location_rule = LocationRule::mean_minus_sigma;
  double fixed_location = 0.0;
  std::size_t restarts = 5;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (moments < 1) throw PreconditionError("at least one moment must be matched");
    if (components < 1) throw PreconditionError("at least one component is required");
    if (!(gamma >= 0.0)) throw PreconditionError("entropy weight must be nonnegative");
    if (!(epsilon > 0.0)) throw PreconditionError("convergence threshold must be positive");
    if (!(rate_min > 0.0) || !(rate_max > rate_min))
      throw PreconditionError("rate bounds must satisfy 0 < min < max");
    if (restarts < 1) throw PreconditionError("at least one restart is required");
    if (location_rule == LocationRule::fixed && !(fixed_location >= 0.0))
      throw PreconditionError("fixed location must be nonnegative");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    if (components < moments / 2 + 1)
      out.push_back("mixture has fewer than floor(K/2)+1 components; moments may not be matchable");
    return out;
  }
};

struct FitResult {
  ErlangMixture mixture;
  double loss = 0.0;
  // |mu_k - muhat_k| between the target and the fitted (shifted) mixture.
  std::vector<double> moment_residuals;
  // Residuals in the scaled units the loss is computed in.
  std::vector<double> scaled_residuals;
  double entropy = 0.0;
  std::size_t iterations = 0;        // outer iterations of the selected restart
  std::size_t total_iterations = 0;  // over all restarts
  bool converged = false;
  double wall_time = 0.0;  // seconds
  std::size_t restart = 0;
  std::vector<double> restart_losses;
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Target preparation
// ---------------------------------------------------------------------------

// Raw moments of X - location from raw moments of X (binomial re-centering).
inline std::vector<double> shift_target_moments(std::span<const double> raw, double location) {
  std::vector<double> out(raw.size(), 0.0);
  for (std::size_t k = 1; k <= raw.size(); ++k) {
    double s = 0.0;
    double binom = 1.0;  // C(k, j)
    for (std::size_t j = 0; j <= k; ++j) {
      const double mj = j == 0 ? 1.0 : raw[j - 1];
      s += binom * std::pow(-location, static_cast<double>(k - j)) * mj;
      binom = binom * static_cast<double>(k - j) / static_cast<double>(j + 1);
    }
    out[k - 1] = s;
  }
  return out;
}

inline std::vector<double> shift_target_moments(const MomentVector& m, double location) {
  return shift_target_moments(std::span<const double>(m.raw), location);
}

inline double fit_location(const MomentVector& m, const FitConfig& cfg) {
  switch (cfg.location_rule) {
    case LocationRule::mean_minus_sigma: return std::max(0.0, m.mean() - m.sigma);
    case LocationRule::zero: return 0.0;
    case LocationRule::fixed: return cfg.fixed_location;
  }
  return 0.0;
}

// Divisors s_k applied to both target and mixture moments in the loss.
inline std::vector<double> residual_scales(std::span<const double> shifted_targets, bool standardize,
                                           StandardizationRule rule) {
  const std::size_t order = shifted_targets.size();
  std::vector<double> s(order, 1.0);
  if (!standardize) return s;
  double c = order >= 2 ? std::sqrt(std::max(0.0, shifted_targets[1])) : std::abs(shifted_targets[0]);
  if (!(c > 0.0)) return s;
  for (std::size_t k = 1; k <= order; ++k) {
    if (rule == StandardizationRule::per_order)
      s[k - 1] = std::pow(c, static_cast<double>(k));
    else if (k >= 3)
      s[k - 1] = c;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

class MomentObjective {
public:
  MomentObjective(std::vector<Shape> shapes, std::vector<double> shifted_targets, std::vector<double> scales,
                  double gamma)
      : shapes_(std::move(shapes)), targets_(std::move(shifted_targets)), scales_(std::move(scales)), gamma_(gamma) {
    const std::size_t order = targets_.size();
    log_rising_.resize(static_cast<Eigen::Index>(order), static_cast<Eigen::Index>(shapes_.size()));
    for (std::size_t k = 1; k <= order; ++k)
      for (std::size_t i = 0; i < shapes_.size(); ++i)
        log_rising_(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(i)) =
            log_rising_factorial(shapes_[i], k);
    scaled_targets_.resize(static_cast<Eigen::Index>(order));
    for (std::size_t k = 0; k < order; ++k) scaled_targets_[static_cast<Eigen::Index>(k)] = targets_[k] / scales_[k];
  }

  std::size_t order() const noexcept { return targets_.size(); }
  std::size_t size() const noexcept { return shapes_.size(); }
  const std::vector<Shape>& shapes() const noexcept { return shapes_; }
  double gamma() const noexcept { return gamma_; }
  const Eigen::VectorXd& scaled_targets() const noexcept { return scaled_targets_; }

  // A(k, i) = rising(a_i, k) / rate^k / s_k, so scaled muhat = A w.
  Eigen::MatrixXd design(double log_rate) const {
    Eigen::MatrixXd a(log_rising_.rows(), log_rising_.cols());
    for (Eigen::Index k = 0; k < a.rows(); ++k)
      for (Eigen::Index i = 0; i < a.cols(); ++i)
        a(k, i) = std::exp(log_rising_(k, i) - static_cast<double>(k + 1) * log_rate) /
                  scales_[static_cast<std::size_t>(k)];
    return a;
  }

  Eigen::VectorXd scaled_residuals(const Eigen::VectorXd& w, double log_rate) const {
    return design(log_rate) * w - scaled_targets_;
  }

  double residual_loss(const Eigen::VectorXd& w, double log_rate) const {
    return scaled_residuals(w, log_rate).squaredNorm();
  }

  ErlangMixture mixture(const Eigen::VectorXd& w, double log_rate, double location = 0.0) const {
    ErlangMixture m;
    m.weights.assign(w.data(), w.data() + w.size());
    m.shapes = shapes_;
    m.rate = std::exp(log_rate);
    m.location = location;
    return m;
  }

  struct Evaluation {
    double loss;
    double residual;
    double entropy;
  };

  Evaluation evaluate(const Eigen::VectorXd& w, double log_rate) const {
    Evaluation e{0.0, residual_loss(w, log_rate), 0.0};
    if (gamma_ > 0.0) e.entropy = mixture_entropy(mixture(w, log_rate)).value;
    e.loss = e.residual - gamma_ * e.entropy;
    if (!std::isfinite(e.loss)) throw NumericError("objective evaluated to a non-finite value");
    return e;
  }

private:
  std::vector<Shape> shapes_;
  std::vector<double> targets_;
  std::vector<double> scales_;
  double gamma_;
  Eigen::MatrixXd log_rising_;
  Eigen::VectorXd scaled_targets_;
};

// L = sum_k ((mu_k - muhat_k)/s_k)^2 - gamma H for an unshifted mixture
// against shifted targets.
inline double objective_loss(const ErlangMixture& m, std::span<const double> shifted_targets, double gamma,
                             bool standardize = true,
                             StandardizationRule rule = StandardizationRule::paper_literal) {
  m.validate();
  std::vector<double> t(shifted_targets.begin(), shifted_targets.end());
  MomentObjective obj(m.shapes, t, residual_scales(t, standardize, rule), gamma);
  Eigen::Map<const Eigen::VectorXd> w(m.weights.data(), static_cast<Eigen::Index>(m.size()));
  return obj.evaluate(w, std::log(m.rate)).loss;
}

namespace detail {

// Exact projection onto {w >= 0, sum w = 1}.
inline Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  Eigen::VectorXd w = (v.array() - theta).max(0.0).matrix();
  const double s = w.sum();
  if (s > 0.0) w /= s;
  return w;
}

// min 1/2 x'Bx + c'x  s.t.  a'x = 1, lo <= x <= hi, by a primal active-set
// method started at the feasible point x. B must be positive definite. When
// a factor F with B = F'F and c = -F't is supplied, steps are least-squares
// solves on F instead of solves with B.
inline Eigen::VectorXd box_simplex_qp(const Eigen::MatrixXd& b, const Eigen::VectorXd& c, const Eigen::VectorXd& a,
                                      const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, Eigen::VectorXd x,
                                      const Eigen::MatrixXd* factor = nullptr, const Eigen::VectorXd* target = nullptr) {
  enum Status { free_var, at_lower, at_upper };
  const Eigen::Index n = x.size();
  std::vector<Status> status(static_cast<std::size_t>(n), free_var);
  auto st = [&](Eigen::Index i) -> Status& { return status[static_cast<std::size_t>(i)]; };
  auto gradient = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    if (factor) return factor->transpose() * (*factor * v - *target);
    return b * v + c;
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    if (x[i] <= lo[i]) {
      x[i] = lo[i];
      st(i) = at_lower;
    } else if (x[i] >= hi[i]) {
      x[i] = hi[i];
      st(i) = at_upper;
    }
  }

  Eigen::Index last_freed = -1;
  for (int iter = 0; iter < 100 * static_cast<int>(n) + 50; ++iter) {
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < n; ++i)
      if (st(i) == free_var) free.push_back(i);
    const auto nf = static_cast<Eigen::Index>(free.size());
    if (nf == 0) {
      // Every variable sits on a bound; open one that is not pinned.
      Eigen::Index pick = -1;
      for (Eigen::Index i = 0; i < n && pick < 0; ++i)
        if (st(i) == at_upper && hi[i] > lo[i]) pick = i;
      for (Eigen::Index i = 0; i < n && pick < 0; ++i)
        if (hi[i] > lo[i]) pick = i;
      if (pick < 0) return x;
      st(pick) = free_var;
      continue;
    }

    // Step p on the face, with a_F'p_F = 0. A lone free variable is pinned by
    // the equality.
    Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
    if (nf > 1 && factor) {
      Eigen::Index pivot = free[0];
      for (Eigen::Index i : free)
        if (std::abs(a[i]) > std::abs(a[pivot])) pivot = i;
      Eigen::MatrixXd reduced(factor->rows(), nf - 1);
      std::vector<Eigen::Index> others;
      for (Eigen::Index i : free) {
        if (i == pivot) continue;
        reduced.col(static_cast<Eigen::Index>(others.size())) = factor->col(i) - factor->col(pivot) * (a[i] / a[pivot]);
        others.push_back(i);
      }
      const Eigen::VectorXd rhs = *target - *factor * x;
      const Eigen::VectorXd z = reduced.completeOrthogonalDecomposition().solve(rhs);
      double along = 0.0;
      for (std::size_t r = 0; r < others.size(); ++r) {
        p[others[r]] = z[static_cast<Eigen::Index>(r)];
        along += a[others[r]] * z[static_cast<Eigen::Index>(r)];
      }
      p[pivot] = -along / a[pivot];
    } else if (nf > 1) {
      const Eigen::VectorXd grad = gradient(x);
      Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(nf + 1, nf + 1);
      Eigen::VectorXd rhs(nf + 1);
      for (Eigen::Index r = 0; r < nf; ++r) {
        for (Eigen::Index s = 0; s < nf; ++s) kkt(r, s) = b(free[r], free[s]);
        kkt(r, nf) = -a[free[r]];
        kkt(nf, r) = a[free[r]];
        rhs[r] = -grad[free[r]];
      }
      rhs[nf] = 0.0;
      const Eigen::VectorXd sol = kkt.fullPivLu().solve(rhs);
      for (Eigen::Index r = 0; r < nf; ++r) p[free[r]] = sol[r];
    }

    double step = 1.0;
    Eigen::Index blocking = -1;
    Status blocking_status = free_var;
    for (Eigen::Index i : free) {
      if (p[i] < 0.0) {
        const double t = (lo[i] - x[i]) / p[i];
        if (t < step) {
          step = t;
          blocking = i;
          blocking_status = at_lower;
        }
      } else if (p[i] > 0.0) {
        const double t = (hi[i] - x[i]) / p[i];
        if (t < step) {
          step = t;
          blocking = i;
          blocking_status = at_upper;
        }
      }
    }
    step = std::max(step, 0.0);
    if (blocking >= 0 && blocking == last_freed && step <= 0.0) return x;
    last_freed = -1;
    x += step * p;
    if (blocking >= 0) {
      x[blocking] = blocking_status == at_lower ? lo[blocking] : hi[blocking];
      st(blocking) = blocking_status;
    }
    for (Eigen::Index i = 0; i < n; ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
    if (blocking >= 0) continue;

    // Full step: x minimizes over the current face. Check the multipliers of
    // the bound constraints.
    const Eigen::VectorXd g = gradient(x);
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index i : free) {
      num += a[i] * g[i];
      den += a[i] * a[i];
    }
    const double nu = num / den;
    Eigen::Index worst = -1;
    double worst_violation = 1e-12 * (1.0 + g.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mu = g[i] - nu * a[i];
      double violation = 0.0;
      if (st(i) == at_lower) violation = -mu;
      if (st(i) == at_upper) violation = mu;
      if (violation > worst_violation) {
        worst_violation = violation;
        worst = i;
      }
    }
    if (worst < 0) return x;
    st(worst) = free_var;
    last_freed = worst;
  }
  return x;
}

struct EntropyModel {
  Eigen::VectorXd gradient;   // dH/dw_i = -int f_i (log f + 1)
  Eigen::MatrixXd curvature;  // -d2H/dw_i dw_j = int f_i f_j / f
};

// Second-order expansion of H in the weights. Both terms are independent of
// the rate. The ratios f_i / f are capped so the curvature of components far
// outside the current support stays finite.
inline EntropyModel entropy_weight_model(const ErlangMixture& m) {
  constexpr double ratio_cap = 1e4;
  const std::size_t n = m.size();
  const auto ni = static_cast<Eigen::Index>(n);
  double upper = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ErlangMixture single = single_erlang(m.shapes[i], m.rate);
    upper = std::max(upper, mixture_quantile_unshifted(single, 1.0 - kEntropyTailMass));
  }
  upper = std::max(upper, mixture_quantile_unshifted(m, 1.0 - kEntropyTailMass));
  auto pts = component_breakpoints(m, upper, true);

  std::vector<double> log_norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = static_cast<double>(m.shapes[i]);
    log_norm[i] = a * std::log(m.rate) - std::lgamma(a);
  }
  auto integrand = [&](double y) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(ni + ni * ni);
    const double lf = mixture_log_pdf_unshifted(m, y);
    if (!std::isfinite(lf) || y <= 0.0) return out;
    const double ly = std::log(y);
    const double f = std::exp(lf);
    Eigen::VectorXd q(ni);
    for (Eigen::Index i = 0; i < ni; ++i) {
      const double a = static_cast<double>(m.shapes[static_cast<std::size_t>(i)]);
      const double lfi = log_norm[static_cast<std::size_t>(i)] + (a - 1.0) * ly - m.rate * y;
      out[i] = -std::exp(lfi) * (lf + 1.0);
      q[i] = std::exp(std::min(lfi - lf, std::log(ratio_cap)));
    }
    for (Eigen::Index i = 0; i < ni; ++i)
      for (Eigen::Index j = 0; j < ni; ++j) out[ni + i * ni + j] = q[i] * q[j] * f;
    return out;
  };
  auto r = quadrature::integrate(integrand, std::span<const double>(pts), 1e-9, 1e-9);
  EntropyModel model;
  model.gradient = r.value.head(ni);
  model.curvature = Eigen::Map<const Eigen::MatrixXd>(r.value.data() + ni, ni, ni);
  model.curvature = 0.5 * (model.curvature + model.curvature.transpose()).eval();
  return model;
}

struct SurrogatePoint {
  Eigen::VectorXd weights;
  double log_rate;
  double value;
};

// Weights may move by radius * max(w_i, kTrustFloor) per step: the entropy is
// far from quadratic in weights near zero.
inline constexpr double kTrustFloor = 1e-6;

// Quadratic model of -H around w0, trusted inside the box above.
struct LocalModel {
  Eigen::VectorXd w0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd curvature;
  double radius = 1.0;
};

// Minimizes
//   |A(u) w - t|^2 + gamma (u - g'(w - w0) + 1/2 (w - w0)' M (w - w0))
// over w in the simplex intersected with the trust box, and over
// u = log rate in [log rate_min, log rate_max].
class SurrogateSolver {
public:
  SurrogateSolver(const MomentObjective& obj, double log_lo, double log_hi)
      : obj_(obj), log_lo_(log_lo), log_hi_(log_hi) {}

  SurrogatePoint minimize(const LocalModel& model, double u0) const {
    constexpr int grid = 121;
    std::vector<double> us(grid);
    std::vector<SurrogatePoint> pts;
    pts.reserve(grid);
    for (int j = 0; j < grid; ++j) {
      us[static_cast<std::size_t>(j)] = log_lo_ + (log_hi_ - log_lo_) * j / (grid - 1);
      pts.push_back(at(us[static_cast<std::size_t>(j)], model));
    }
    SurrogatePoint best = at(u0, model);

    // Refine the three lowest local minima of the grid.
    std::vector<int> minima;
    for (int j = 0; j < grid; ++j) {
      const double v = pts[static_cast<std::size_t>(j)].value;
      const bool left = j == 0 || v <= pts[static_cast<std::size_t>(j - 1)].value;
      const bool right = j == grid - 1 || v <= pts[static_cast<std::size_t>(j + 1)].value;
      if (left && right) minima.push_back(j);
    }
    std::sort(minima.begin(), minima.end(), [&](int x, int y) {
      return pts[static_cast<std::size_t>(x)].value < pts[static_cast<std::size_t>(y)].value;
    });
    if (minima.size() > 3) minima.resize(3);
    for (int j : minima) {
      const double lo = us[static_cast<std::size_t>(std::max(0, j - 1))];
      const double hi = us[static_cast<std::size_t>(std::min(grid - 1, j + 1))];
      auto refined = golden(lo, hi, model);
      if (pts[static_cast<std::size_t>(j)].value < refined.value) refined = pts[static_cast<std::size_t>(j)];
      if (refined.value < best.value) best = refined;
    }
    const double step = (log_hi_ - log_lo_) / (grid - 1);
    auto local = golden(std::max(log_lo_, u0 - step), std::min(log_hi_, u0 + step), model);
    if (local.value < best.value) best = local;
    return best;
  }

  SurrogatePoint at(double u, const LocalModel& model) const {
    const Eigen::MatrixXd a = obj_.design(u);
    const Eigen::VectorXd& t = obj_.scaled_targets();
    const double gamma = obj_.gamma();
    const Eigen::Index n = a.cols();
    const Eigen::VectorXd& w0 = model.w0;

    Eigen::MatrixXd b = 2.0 * a.transpose() * a;
    Eigen::VectorXd c = -2.0 * a.transpose() * t;
    if (gamma > 0.0) {
      b += gamma * model.curvature;
      c -= gamma * (model.gradient + model.curvature * w0);
    }

    // Diagonal scaling y = D w keeps wildly different moment magnitudes
    // across components from ruining the KKT solves.
    Eigen::VectorXd d(n);
    for (Eigen::Index i = 0; i < n; ++i) d[i] = b(i, i) > 0.0 ? std::sqrt(b(i, i)) : 1.0;
    Eigen::MatrixXd by = d.cwiseInverse().asDiagonal() * b * d.cwiseInverse().asDiagonal();
    by.diagonal().array() += 1e-12;
    Eigen::VectorXd lo(n);
    Eigen::VectorXd hi(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double reach = model.radius * std::max(w0[i], kTrustFloor);
      lo[i] = std::max(0.0, w0[i] - reach) * d[i];
      hi[i] = std::min(1.0, w0[i] + reach) * d[i];
    }
    Eigen::VectorXd y;
    if (gamma > 0.0) {
      y = box_simplex_qp(by, c.cwiseQuotient(d), d.cwiseInverse(), lo, hi, w0.cwiseProduct(d));
    } else {
      const Eigen::MatrixXd f = std::sqrt(2.0) * a * d.cwiseInverse().asDiagonal();
      const Eigen::VectorXd ft = std::sqrt(2.0) * t;
      y = box_simplex_qp(by, c.cwiseQuotient(d), d.cwiseInverse(), lo, hi, w0.cwiseProduct(d), &f, &ft);
    }
    Eigen::VectorXd w = project_simplex(y.cwiseQuotient(d));
    return {w, u, value(u, w, model)};
  }

  double value(double u, const Eigen::VectorXd& w, const LocalModel& model) const {
    const Eigen::VectorXd dw = w - model.w0;
    double v = obj_.residual_loss(w, u);
    const double gamma = obj_.gamma();
    if (gamma > 0.0) v += gamma * (u - model.gradient.dot(dw) + 0.5 * dw.dot(model.curvature * dw));
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  }

private:
  SurrogatePoint golden(double lo, double hi, const LocalModel& model) const {
    constexpr double inv_phi = 0.6180339887498949;
    double x1 = hi - inv_phi * (hi - lo);
    double x2 = lo + inv_phi * (hi - lo);
    SurrogatePoint p1 = at(x1, model);
    SurrogatePoint p2 = at(x2, model);
    for (int it = 0; it < 100 && hi - lo > 1e-13 * (1.0 + std::abs(lo)); ++it) {
      if (p1.value <= p2.value) {
        hi = x2;
        x2 = x1;
        p2 = std::move(p1);
        x1 = hi - inv_phi * (hi - lo);
        p1 = at(x1, model);
      } else {
        lo = x1;
        x1 = x2;
        p1 = std::move(p2);
        x2 = lo + inv_phi * (hi - lo);
        p2 = at(x2, model);
      }
    }
    return p1.value <= p2.value ? p1 : p2;
  }

  const MomentObjective& obj_;
  double log_lo_;
  double log_hi_;
};

inline bool on_boundary(const Eigen::VectorXd& w, const Eigen::VectorXd& w0, double radius, double fraction) {
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (std::abs(w[i] - w0[i]) > fraction * radius * std::max(w0[i], kTrustFloor)) return true;
  return false;
}

struct RestartOutcome {
  Eigen::VectorXd weights;
  double log_rate = 0.0;
  MomentObjective::Evaluation eval{};
  std::size_t iterations = 0;
  bool converged = false;
};

inline RestartOutcome run_restart(const MomentObjective& obj, const FitConfig& cfg, Eigen::VectorXd w,
                                  double shifted_mean) {
  const double log_lo = std::log(cfg.rate_min);
  const double log_hi = std::log(cfg.rate_max);
  const Eigen::Index n = w.size();

  double mean_shape = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    mean_shape += w[i] * static_cast<double>(obj.shapes()[static_cast<std::size_t>(i)]);
  const double rate0 = shifted_mean > 0.0 ? mean_shape / shifted_mean : 1.0;
  double u = std::clamp(std::log(rate0), log_lo, log_hi);

  SurrogateSolver solver(obj, log_lo, log_hi);
  RestartOutcome out;
  auto current = obj.evaluate(w, u);

  const bool exact_model = obj.gamma() == 0.0;
  double radius = exact_model ? 1e6 : 0.5;
  constexpr double min_radius = 1e-9;
  std::size_t it = 0;
  for (; it < cfg.max_outer_iterations; ++it) {
    LocalModel model;
    model.w0 = w;
    model.gradient = Eigen::VectorXd::Zero(n);
    model.curvature = Eigen::MatrixXd::Zero(n, n);
    if (!exact_model) {
      auto em = entropy_weight_model(obj.mixture(w, u));
      model.gradient = std::move(em.gradient);
      model.curvature = std::move(em.curvature);
    }
    const double model_here = solver.value(u, w, model);

    bool accepted = false;
    SurrogatePoint candidate;
    MomentObjective::Evaluation next{};
    while (radius >= min_radius) {
      model.radius = radius;
      candidate = solver.minimize(model, u);
      next = obj.evaluate(candidate.weights, candidate.log_rate);
      const double actual = current.loss - next.loss;
      const double predicted = model_here - candidate.value;
      if (actual >= -1e-14 * std::abs(current.loss)) {
        accepted = true;
        if (!exact_model) {
          const double ratio = predicted > 0.0 ? actual / predicted : 1.0;
          if (ratio > 0.75 && on_boundary(candidate.weights, w, radius, 0.5))
            radius = std::min(1e3, 2.0 * radius);
          else if (ratio < 0.25)
            radius *= 0.25;
        }
        break;
      }
      if (exact_model) break;
      radius *= 0.25;
    }
    if (!accepted) {
      out.converged = true;
      break;
    }
    const double decrease = current.loss - next.loss;
    const bool boxed = !exact_model && on_boundary(candidate.weights, w, model.radius, 0.99);
    w = std::move(candidate.weights);
    u = candidate.log_rate;
    current = next;
    if (decrease < cfg.epsilon && !boxed) {
      out.converged = true;
      ++it;
      break;
    }
  }
  out.weights = std::move(w);
  out.log_rate = u;
  out.eval = current;
  out.iterations = it;
  return out;
}

inline Eigen::VectorXd initial_weights(std::size_t n, std::size_t restart, std::uint64_t seed) {
  Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n));
  if (restart == 0) return w;
  StreamRng rng(seed, restart);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // Dirichlet(1): normalized unit exponentials.
    const double e = -std::log(1.0 - rng.uniform());
    w[static_cast<Eigen::Index>(i)] = e;
    sum += e;
  }
  return w / sum;
}

}  // namespace detail

// Fits the mixture to raw target moments. Restarts are independent and may run
// on several threads; the winner is the lowest loss, ties going to the lowest
// rate and then the lowest restart index.
inline FitResult fit_mixture(const MomentVector& target, const FitConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  if (target.order() < cfg.moments)
    throw PreconditionError("target provides " + std::to_string(target.order()) + " moments, " +
                            std::to_string(cfg.moments) + " requested");
  MomentVector m = target;
  m.raw.resize(cfg.moments);
  if (m.raw.size() < 2) {
    // Variance needs the second moment; fall back to the supplied one.
    m.variance = target.variance;
    m.sigma = target.sigma;
  } else {
    m = derived_stats(std::move(m), cfg.standardization);
  }
  if (!(m.variance > 1e-12 * std::max(1.0, m.mean() * m.mean())))
    throw PreconditionError("target has zero variance; a point mass cannot be fitted");

  FitResult result;
  result.warnings = cfg.warnings();

  const double location = fit_location(m, cfg);
  auto shifted = shift_target_moments(m, location);
  if (!(shifted[0] > 0.0)) result.warnings.push_back("location exceeds the target mean");
  auto scales = residual_scales(shifted, cfg.standardize_residuals, cfg.standardization);
  auto shapes = cfg.shape_rule.shapes(cfg.components);
  MomentObjective obj(shapes, shifted, scales, cfg.gamma);

  std::vector<detail::RestartOutcome> outcomes(cfg.restarts);
  auto run = [&](std::size_t r) {
    outcomes[r] = detail::run_restart(obj, cfg, detail::initial_weights(cfg.components, r, cfg.seed), shifted[0]);
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, cfg.restarts));
  if (threads == 1) {
    for (std::size_t r = 0; r < cfg.restarts; ++r) run(r);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          for (std::size_t r = t; r < cfg.restarts; r += threads) run(r);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    pool.clear();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  std::size_t best = 0;
  for (std::size_t r = 1; r < outcomes.size(); ++r) {
    const auto& a = outcomes[r];
    const auto& b = outcomes[best];
    if (a.eval.loss < b.eval.loss || (a.eval.loss == b.eval.loss && a.log_rate < b.log_rate)) best = r;
  }
  for (const auto& o : outcomes) {
    result.restart_losses.push_back(o.eval.loss);
    result.total_iterations += o.iterations;
  }

  const auto& win = outcomes[best];
  Eigen::VectorXd w = detail::project_simplex(win.weights);
  const double log_lo = std::log(cfg.rate_min);
  const double log_hi = std::log(cfg.rate_max);
  const double u = std::clamp(win.log_rate, log_lo, log_hi);
  result.mixture = obj.mixture(w, u, location);
  auto final_eval = obj.evaluate(w, u);
  result.loss = final_eval.loss;
  result.entropy = cfg.gamma > 0.0 ? final_eval.entropy : mixture_entropy(result.mixture).value;
  result.iterations = win.iterations;
  result.converged = win.converged;
  result.restart = best;

  Eigen::VectorXd scaled = obj.scaled_residuals(w, u);
  result.scaled_residuals.assign(scaled.size(), 0.0);
  for (Eigen::Index k = 0; k < scaled.size(); ++k) result.scaled_residuals[static_cast<std::size_t>(k)] = std::abs(scaled[k]);
  auto fitted = mixture_moments(result.mixture, cfg.moments);
  result.moment_residuals.resize(cfg.moments);
  for (std::size_t k = 0; k < cfg.moments; ++k)
    result.moment_residuals[k] = std::abs(m.raw[k] - fitted.shifted[k]);

  const bool at_bound = std::abs(u - log_lo) < 1e-9 || std::abs(u - log_hi) < 1e-9;
  if (at_bound && scaled.norm() > 1e-3) result.warnings.push_back("rate bound active with large moment residuals");
  if (!result.converged) result.warnings.push_back("outer loop hit the iteration limit");

  result.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace ermc
