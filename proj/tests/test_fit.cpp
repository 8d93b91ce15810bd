#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "ermc/errors.hpp"
#include "ermc/fit.hpp"
#include "ermc/sim.hpp"
#include "support.hpp"

using namespace ermc;

namespace {

std::vector<double> raw_moments_of(const ErlangMixture& m, std::size_t order) {
  return mixture_moments(m, order).shifted;
}

ErlangMixture random_grid_mixture(std::mt19937_64& g, std::size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ErlangMixture m;
  m.shapes = ShapeRule::exponential(3).shapes(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    m.weights.push_back(0.05 + u(g));
    sum += m.weights.back();
  }
  for (double& w : m.weights) w /= sum;
  m.rate = std::exp(std::log(0.2) + u(g) * std::log(25.0));
  return m;
}

FitConfig exact_config(std::size_t k, std::size_t n) {
  FitConfig c;
  c.moments = k;
  c.components = n;
  c.gamma = 0.0;
  c.location_rule = LocationRule::zero;
  return c;
}

double max_of(const std::vector<double>& v) { return *std::max_element(v.begin(), v.end()); }

}  // namespace

TEST(ShapeRule, Sequences) {
  EXPECT_EQ(ShapeRule::dense().shapes(4), (std::vector<Shape>{1, 2, 3, 4}));
  EXPECT_EQ(ShapeRule::linear(2).shapes(3), (std::vector<Shape>{2, 4, 6}));
  EXPECT_EQ(ShapeRule::exponential(3).shapes(4), (std::vector<Shape>{3, 9, 27, 81}));
  EXPECT_THROW(ShapeRule::exponential(10).shapes(40), PreconditionError);
}

TEST(ShiftTargets, Examples) {
  const std::vector<double> mu{2.0, 6.0};
  EXPECT_EQ(shift_target_moments(mu, 0.0), mu);
  auto s = shift_target_moments(mu, 1.0);
  EXPECT_NEAR(s[0], 1.0, 1e-14);
  EXPECT_NEAR(s[1], 3.0, 1e-14);
  auto point = shift_target_moments(std::vector<double>{3.0, 9.0, 27.0, 81.0}, 3.0);
  for (double v : point) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(ShiftTargets, MatchesShiftedMixture) {
  ErlangMixture m{{0.3, 0.7}, {2, 9}, 1.7, 0.0};
  auto raw = raw_moments_of(m, 5);
  ErlangMixture shifted = m;
  shifted.location = 1.25;
  auto direct = mixture_moments(shifted, 5).shifted;
  auto back = shift_target_moments(direct, 1.25);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(back[k], raw[k], 1e-10 * raw[k]);
}

TEST(ObjectiveLoss, Examples) {
  auto exp1 = single_erlang(1, 1.0);
  EXPECT_NEAR(objective_loss(exp1, std::vector<double>{1.0, 2.0}, 0.0), 0.0, 1e-24);

  ErlangMixture m{{0.25, 0.5, 0.25}, {3, 9, 27}, 2.0, 0.0};
  auto own = raw_moments_of(m, 4);
  EXPECT_NEAR(objective_loss(m, own, 0.0), 0.0, 1e-20);

  const std::vector<double> targets{4.0, 30.0, 300.0};
  const double l0 = objective_loss(m, targets, 0.0);
  const double l1 = objective_loss(m, targets, 1.0);
  EXPECT_NEAR(l1, l0 - mixture_entropy(m).value, 1e-7);
}

TEST(ObjectiveLoss, StandardizationRules) {
  auto m = single_erlang(2, 1.0);  // moments 2, 6, 24
  const std::vector<double> targets{3.0, 6.0, 30.0};
  // shifted mu2 = 6, so c = sqrt(6)
  const double c = std::sqrt(6.0);
  EXPECT_NEAR(objective_loss(m, targets, 0.0, false), 1.0 + 36.0, 1e-10);
  EXPECT_NEAR(objective_loss(m, targets, 0.0, true, StandardizationRule::per_order),
              1.0 / 6.0 + 36.0 / (c * c * c * c * c * c), 1e-10);
  EXPECT_NEAR(objective_loss(m, targets, 0.0, true, StandardizationRule::paper_literal), 1.0 + 36.0 / 6.0, 1e-10);
}

TEST(FitConfig, Validation) {
  FitConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.moments, 3u);
  EXPECT_EQ(c.components, 3u);
  EXPECT_EQ(c.gamma, 1.0);
  EXPECT_EQ(c.epsilon, 1e-8);
  EXPECT_EQ(c.rate_min, 0.01);
  EXPECT_EQ(c.rate_max, 50.0);
  EXPECT_EQ(c.max_outer_iterations, 500u);
  EXPECT_EQ(c.shape_rule.shapes(3), (std::vector<Shape>{3, 9, 27}));
  auto bad = c;
  bad.moments = 0;
  EXPECT_THROW(bad.validate(), PreconditionError);
  bad = c;
  bad.gamma = -1;
  EXPECT_THROW(bad.validate(), PreconditionError);
  bad = c;
  bad.rate_max = 0.001;
  EXPECT_THROW(bad.validate(), PreconditionError);
  bad = c;
  bad.moments = 5;
  bad.components = 2;
  EXPECT_FALSE(bad.warnings().empty());
  EXPECT_TRUE(c.warnings().empty());
}

TEST(Fit, RecoversSingleErlang) {
  auto target = make_moments(raw_moments_of(single_erlang(3, 2.0), 3));
  auto f = fit_mixture(target, exact_config(3, 1));
  EXPECT_EQ(f.mixture.shapes, (std::vector<Shape>{3}));
  EXPECT_NEAR(f.mixture.weights[0], 1.0, 1e-12);
  EXPECT_NEAR(f.mixture.rate, 2.0, 1e-6);
  // Three moments do not pin down three weights and a rate; only the moments must match.
  f = fit_mixture(target, exact_config(3, 3));
  EXPECT_EQ(f.mixture.shapes, (std::vector<Shape>{3, 9, 27}));
  EXPECT_LT(max_of(f.moment_residuals), 1e-6);
  EXPECT_TRUE(f.converged);
}

TEST(Fit, SelfConsistencyOnGrid) {
  for (int s = 0; s < 20; ++s) {
    std::mt19937_64 g(1000 + s);
    const std::size_t n = 2 + g() % 3;
    auto gen = random_grid_mixture(g, n);
    const std::size_t k = std::min<std::size_t>(5, 2 * n - 1);
    for (auto rule : {StandardizationRule::paper_literal, StandardizationRule::per_order}) {
      auto cfg = exact_config(k, n);
      cfg.standardization = rule;
      auto f = fit_mixture(make_moments(raw_moments_of(gen, k), rule), cfg);
      EXPECT_LT(max_of(f.scaled_residuals), 1e-5) << "seed " << s;
      auto sample = sample_mixture(gen, 20000, 5);
      EXPECT_LT(ks_statistic(sample, f.mixture), 0.02) << "seed " << s;
    }
  }
}

TEST(Fit, ReturnsValidMixture) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto d = fixtures::random_model(seed, 8);
    auto m = reward_moments(d, 4).moments;
    FitConfig c;
    c.moments = 4;
    c.components = 4;
    auto f = fit_mixture(m, c);
    EXPECT_NO_THROW(f.mixture.validate());
    EXPECT_NEAR(std::accumulate(f.mixture.weights.begin(), f.mixture.weights.end(), 0.0), 1.0, 1e-12);
    EXPECT_GE(f.mixture.rate, c.rate_min);
    EXPECT_LE(f.mixture.rate, c.rate_max);
    EXPECT_NEAR(f.mixture.location, std::max(0.0, m.mean() - m.sigma), 1e-12);
    for (double r : f.moment_residuals) EXPECT_TRUE(std::isfinite(r));
    EXPECT_EQ(f.restart_losses.size(), c.restarts);
    EXPECT_EQ(f.loss, *std::min_element(f.restart_losses.begin(), f.restart_losses.end()));
  }
}

TEST(Fit, ZeroVarianceRejected) {
  auto point = make_moments({3.0, 9.0, 27.0});
  EXPECT_THROW(fit_mixture(point, FitConfig{}), PreconditionError);
}

TEST(Fit, TooFewTargetMoments) {
  auto m = make_moments({1.0, 2.0});
  EXPECT_THROW(fit_mixture(m, FitConfig{}), PreconditionError);
}

TEST(Fit, LossNonIncreasingAcrossIterations) {
  auto d = fixtures::bundled("investor.dtmc");
  auto m = reward_moments(d, 4, StandardizationRule::paper_literal).moments;
  FitConfig c;
  c.moments = 4;
  c.components = 5;
  const double loc = fit_location(m, c);
  auto shifted = shift_target_moments(m, loc);
  MomentObjective obj(c.shape_rule.shapes(c.components), shifted,
                      residual_scales(shifted, true, c.standardization), c.gamma);
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= 12; ++it) {
    auto cfg = c;
    cfg.max_outer_iterations = it;
    auto out = detail::run_restart(obj, cfg, detail::initial_weights(c.components, 0, 0), shifted[0]);
    EXPECT_LE(out.eval.loss, previous + 1e-12) << "iteration " << it;
    previous = out.eval.loss;
  }
}

TEST(Fit, BimodalResidualsSmall) {
  auto d = fixtures::bundled("investor.dtmc");
  auto m = reward_moments(d, 5, StandardizationRule::paper_literal).moments;
  for (std::size_t k : {3u, 5u})
    for (std::size_t n = k; n <= 7; ++n) {
      if (n == 3) continue;  // three shapes {3, 9, 27} cannot reach the third moment here
      FitConfig c;
      c.gamma = 0.0;
      c.moments = k;
      c.components = n;
      auto f = fit_mixture(m, c);
      EXPECT_LT(max_of(f.scaled_residuals), 1e-4) << k << " " << n;
      EXPECT_LT(f.wall_time, 10.0);
    }
}

TEST(Fit, MoreComponentsNeverHurt) {
  auto d = fixtures::bundled("investor.dtmc");
  auto m = reward_moments(d, 5, StandardizationRule::paper_literal).moments;
  for (std::size_t k : {3u, 4u}) {
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t n = 3; n <= 7; ++n) {
      FitConfig c;
      c.moments = k;
      c.components = n;
      const double loss = fit_mixture(m, c).loss;
      EXPECT_LE(loss, previous + 1e-6) << "K=" << k << " n=" << n;
      previous = std::min(previous, loss);
    }
  }
}

TEST(Fit, DeterministicAcrossThreads) {
  auto d = fixtures::bundled("investor.dtmc");
  auto m = reward_moments(d, 4, StandardizationRule::paper_literal).moments;
  FitConfig c;
  c.moments = 4;
  c.components = 4;
  c.seed = 99;
  auto a = fit_mixture(m, c);
  c.threads = 5;
  auto b = fit_mixture(m, c);
  EXPECT_EQ(a.mixture, b.mixture);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.restart_losses, b.restart_losses);
  c.threads = 1;
  c.seed = 100;
  auto other = fit_mixture(m, c);
  EXPECT_EQ(other.restart_losses[0], a.restart_losses[0]);  // uniform start does not use the seed
}

TEST(Fit, GammaTradesResidualForEntropy) {
  auto d = fixtures::bundled("heavy_tail.dtmc");
  auto m = reward_moments(d, 3, StandardizationRule::paper_literal).moments;
  FitConfig exact;
  exact.gamma = 0.0;
  FitConfig smooth;
  auto a = fit_mixture(m, exact);
  auto b = fit_mixture(m, smooth);
  double ra = 0.0;
  double rb = 0.0;
  for (double r : a.scaled_residuals) ra += r * r;
  for (double r : b.scaled_residuals) rb += r * r;
  EXPECT_LE(ra, rb + 1e-9);
  EXPECT_GE(b.entropy, a.entropy - 1e-6);
}
