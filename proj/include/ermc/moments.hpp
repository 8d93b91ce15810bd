#pragma once

// Exact raw moments of the cumulative reward collected until absorption.
//
// With u_k(x) = E_x[R^k], first-step analysis over the transient states C
// gives, for k >= 1,
//
//   (I - P_CC) u_k = r^k + sum_{i=1}^{k-1} C(k,i) r^{k-i} * (P_CC u_i)
//
// (elementwise products; u_0 = 1 and u_i = 0 on absorbing states). All K
// systems share the matrix, so it is factorized once.

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>

#include "ermc/errors.hpp"
#include "ermc/model.hpp"

namespace ermc {

enum class StandardizationRule {
  per_order,      // mu_k / c^k with c = sqrt(mu_2)
  paper_literal,  // mu_k / c for k >= 3, raw below
};

struct MomentVector {
  std::vector<double> raw;  // raw[k-1] = E[X^k]
  double variance = 0.0;
  double sigma = 0.0;
  // Same length as raw. Entries follow the rule used by derived_stats.
  std::vector<double> standardized;
  StandardizationRule rule = StandardizationRule::per_order;

  std::size_t order() const noexcept { return raw.size(); }
  double mean() const { return raw.empty() ? 0.0 : raw[0]; }
  double operator[](std::size_t k) const { return raw.at(k - 1); }  // 1-based
};

// Fills variance, sigma, and the standardized moments.
inline MomentVector derived_stats(MomentVector m,
                                  StandardizationRule rule = StandardizationRule::per_order) {
  for (double v : m.raw)
    if (!std::isfinite(v)) throw NumericError("non-finite moment");
  m.rule = rule;
  if (m.raw.size() < 2) {
    m.variance = 0.0;
    m.sigma = 0.0;
    m.standardized = m.raw;
    return m;
  }
  const double mu1 = m.raw[0];
  const double mu2 = m.raw[1];
  double var = mu2 - mu1 * mu1;
  if (var < -1e-9 * std::max(1.0, mu2))
    throw NumericError("inconsistent moments: second moment below squared mean");
  m.variance = std::max(0.0, var);
  m.sigma = std::sqrt(m.variance);

  m.standardized = m.raw;
  const double c = std::sqrt(std::max(0.0, mu2));
  if (c > 0.0) {
    for (std::size_t k = 1; k <= m.raw.size(); ++k) {
      if (rule == StandardizationRule::per_order)
        m.standardized[k - 1] = m.raw[k - 1] / std::pow(c, static_cast<double>(k));
      else if (k >= 3)
        m.standardized[k - 1] = m.raw[k - 1] / c;
    }
  }
  return m;
}

inline MomentVector make_moments(std::vector<double> raw,
                                 StandardizationRule rule = StandardizationRule::per_order) {
  MomentVector m;
  m.raw = std::move(raw);
  return derived_stats(std::move(m), rule);
}

struct SolverOptions {
  // Dense LU below this many transient states, preconditioned BiCGSTAB above.
  std::size_t dense_limit = 2000;
  double iterative_tolerance = 1e-12;
  int max_iterations = 10000;
};

// The transient part of a chain restricted to states reachable from the
// initial state, with its factorized (I - P_CC).
class MomentSystem {
public:
  explicit MomentSystem(const Dtmc& model, const SolverOptions& options = {}) {
    const Dtmc* d = &model;
    std::optional<Dtmc> normalized;
    if (model.has_transition_rewards()) {
      normalized = normalize_transition_rewards(model);
      d = &*normalized;
    }
    if (d->initial >= d->size()) throw ModelError("initial state out of range");

    auto reachable = reachable_from_initial(*d);
    auto absorbing_reach = reaches_absorption(*d);
    dense_index_.assign(d->size(), -1);
    for (StateIndex s = 0; s < d->size(); ++s) {
      if (!reachable[s] || d->states[s].absorbing) continue;
      if (!absorbing_reach[s])
        throw ModelError("non-absorbing recurrent class reachable from the initial state at '" +
                         d->states[s].name + "'");
      if (d->states[s].reward < 0.0 || !std::isfinite(d->states[s].reward))
        throw ModelError("invalid reward at state '" + d->states[s].name + "'");
      dense_index_[s] = static_cast<std::ptrdiff_t>(transient_.size());
      transient_.push_back(s);
    }
    state_count_ = d->size();

    const auto n = static_cast<Eigen::Index>(transient_.size());
    reward_.resize(n);
    std::vector<Eigen::Triplet<double>> entries;
    for (Eigen::Index i = 0; i < n; ++i) {
      StateIndex s = transient_[static_cast<std::size_t>(i)];
      reward_[i] = d->states[s].reward;
      for (const auto& e : d->rows[s]) {
        auto j = dense_index_[e.to];
        if (j >= 0 && e.probability != 0.0) entries.emplace_back(i, j, e.probability);
      }
    }
    p_cc_.resize(n, n);
    p_cc_.setFromTriplets(entries.begin(), entries.end());
    if (n == 0) return;

    if (transient_.size() < options.dense_limit) {
      Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd(p_cc_);
      dense_ = std::make_unique<Eigen::PartialPivLU<Eigen::MatrixXd>>(a);
      if (!(dense_->rcond() > 1e-15))
        throw NumericError("singular absorption system (non-absorbing recurrent class)");
    } else {
      Eigen::SparseMatrix<double> identity(n, n);
      identity.setIdentity();
      system_ = std::make_unique<Eigen::SparseMatrix<double>>(identity - Eigen::SparseMatrix<double>(p_cc_));
      iterative_ = std::make_unique<Iterative>();
      iterative_->setTolerance(options.iterative_tolerance);
      iterative_->setMaxIterations(options.max_iterations);
      iterative_->compute(*system_);
      if (iterative_->info() != Eigen::Success)
        throw NumericError("preconditioner setup failed for absorption system");
    }
  }

  std::size_t transient_count() const noexcept { return transient_.size(); }
  const std::vector<StateIndex>& transient_states() const noexcept { return transient_; }
  std::ptrdiff_t dense_index(StateIndex s) const { return dense_index_.at(s); }
  const Eigen::SparseMatrix<double, Eigen::RowMajor>& transitions() const noexcept { return p_cc_; }
  const Eigen::VectorXd& rewards() const noexcept { return reward_; }
  std::size_t state_count() const noexcept { return state_count_; }

  // Solves (I - P_CC) x = rhs.
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const {
    if (rhs.size() == 0) return rhs;
    Eigen::VectorXd x;
    if (dense_) {
      x = dense_->solve(rhs);
    } else {
      x = iterative_->solve(rhs);
      if (iterative_->info() != Eigen::Success)
        throw NumericError("iterative solver did not converge on absorption system");
    }
    if (!x.allFinite()) throw NumericError("singular absorption system");
    return x;
  }

private:
  using Iterative = Eigen::BiCGSTAB<Eigen::SparseMatrix<double>, Eigen::IncompleteLUT<double>>;

  std::vector<StateIndex> transient_;
  std::vector<std::ptrdiff_t> dense_index_;
  std::size_t state_count_ = 0;
  Eigen::SparseMatrix<double, Eigen::RowMajor> p_cc_;
  Eigen::VectorXd reward_;
  std::unique_ptr<Eigen::PartialPivLU<Eigen::MatrixXd>> dense_;
  std::unique_ptr<Eigen::SparseMatrix<double>> system_;
  std::unique_ptr<Iterative> iterative_;
};

struct RewardMoments {
  MomentVector moments;  // at the initial state
  // per_state[k-1][s] = E_s[R^k] over the original state indices (0 for
  // absorbing and unreachable states).
  std::vector<std::vector<double>> per_state;
};

inline double binomial(std::size_t n, std::size_t k) {
  double c = 1.0;
  for (std::size_t i = 1; i <= k; ++i) c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
  return c;
}

inline RewardMoments reward_moments(const MomentSystem& sys, StateIndex initial, std::size_t order,
                                    StandardizationRule rule = StandardizationRule::per_order) {
  if (order == 0) throw PreconditionError("moment order must be at least 1");
  const auto n = static_cast<Eigen::Index>(sys.transient_count());
  const Eigen::VectorXd& r = sys.rewards();

  std::vector<Eigen::VectorXd> u;         // u[k-1]
  std::vector<Eigen::VectorXd> pu;        // P_CC u_k
  std::vector<Eigen::VectorXd> r_pow{Eigen::VectorXd::Ones(n)};  // r^j
  for (std::size_t j = 1; j <= order; ++j) r_pow.push_back(r_pow.back().cwiseProduct(r));

  for (std::size_t k = 1; k <= order; ++k) {
    Eigen::VectorXd rhs = r_pow[k];
    for (std::size_t i = 1; i < k; ++i)
      rhs += binomial(k, i) * r_pow[k - i].cwiseProduct(pu[i - 1]);
    Eigen::VectorXd uk = sys.solve(rhs);
    pu.push_back(sys.transitions() * uk);
    u.push_back(std::move(uk));
  }

  RewardMoments out;
  out.per_state.assign(order, std::vector<double>(sys.state_count(), 0.0));
  for (std::size_t k = 0; k < order; ++k)
    for (Eigen::Index i = 0; i < n; ++i)
      out.per_state[k][sys.transient_states()[static_cast<std::size_t>(i)]] = u[k][i];

  std::vector<double> raw(order, 0.0);
  auto idx = sys.dense_index(initial);
  if (idx >= 0)
    for (std::size_t k = 0; k < order; ++k) raw[k] = u[k][idx];
  out.moments = make_moments(std::move(raw), rule);
  return out;
}

inline RewardMoments reward_moments(const Dtmc& d, std::size_t order,
                                    StandardizationRule rule = StandardizationRule::per_order,
                                    const SolverOptions& options = {}) {
  if (order == 0) throw PreconditionError("moment order must be at least 1");
  MomentSystem sys(d, options);
  return reward_moments(sys, d.initial, order, rule);
}

// Expected number of transient steps before absorption, E[T], from the
// initial state.
inline double expected_steps(const Dtmc& d, const SolverOptions& options = {}) {
  MomentSystem sys(d, options);
  auto idx = sys.dense_index(d.initial);
  if (idx < 0) return 0.0;
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(sys.transient_count()));
  return sys.solve(ones)[idx];
}

}  // namespace ermc
