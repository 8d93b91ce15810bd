#include <gtest/gtest.h>

#include <sstream>

#include "ermc/errors.hpp"
#include "ermc/moments.hpp"
#include "ermc/sim.hpp"
#include "support.hpp"

using namespace ermc;

TEST(Simulate, DeterministicChain) {
  auto e = simulate_rewards(fixtures::bundled("deterministic.dtmc"), 1000, 3);
  ASSERT_EQ(e.size(), 1000u);
  for (double x : e.samples) EXPECT_DOUBLE_EQ(x, 3.0);
  EXPECT_EQ(e.run_count, 1000u);
  EXPECT_EQ(e.truncated_runs, 0u);
}

TEST(Simulate, GeometricMean) {
  Dtmc d = fixtures::bundled("geometric.dtmc");
  auto m = reward_moments(d, 2).moments;
  for (std::uint64_t seed : {1u, 2u}) {
    auto e = simulate_rewards(d, 1000000, seed);
    EXPECT_NEAR(e.mean(), 2.0, 4.0 * m.sigma / 1000.0);
  }
}

TEST(Simulate, GeometricLawMatchesPathProbabilities) {
  auto e = simulate_rewards(fixtures::bundled("geometric.dtmc"), 400000, 11);
  for (int k = 1; k <= 6; ++k) {
    const double p = std::ldexp(1.0, -k);
    const double se = std::sqrt(p * (1 - p) / 400000.0);
    const double freq = empirical_cdf(e, k + 0.5) - empirical_cdf(e, k - 0.5);
    EXPECT_NEAR(freq, p, 4.5 * se) << k;
  }
}

TEST(Simulate, SameSeedSameSamples) {
  Dtmc d = fixtures::bundled("investor.dtmc");
  auto a = simulate_rewards(d, 20000, 42);
  auto b = simulate_rewards(d, 20000, 42);
  EXPECT_EQ(a.samples, b.samples);
  auto c = simulate_rewards(d, 20000, 43);
  EXPECT_NE(a.samples, c.samples);
}

TEST(Simulate, ThreadCountDoesNotChangeSamples) {
  Dtmc d = fixtures::bundled("uav.dtmc");
  auto one = simulate_rewards(d, 30000, 5, 1000000, 1);
  auto eight = simulate_rewards(d, 30000, 5, 1000000, 8);
  EXPECT_EQ(one.samples, eight.samples);
}

TEST(Simulate, TruncationIsCountedAndWarned) {
  Dtmc d = fixtures::bundled("heavy_tail.dtmc");
  auto e = simulate_rewards(d, 20000, 1, 5);
  EXPECT_GT(e.truncated_runs, 0u);
  EXPECT_EQ(e.run_count, e.size() + e.truncated_runs);
  EXPECT_FALSE(simulation_warnings(e).empty());
  auto full = simulate_rewards(d, 20000, 1);
  EXPECT_TRUE(simulation_warnings(full).empty());
}

TEST(Simulate, TransitionRewardsCount) {
  Dtmc raw = parse_model(
      "dtmc v1\nstate a reward=1\nstate b absorbing\ntrans a a p=0.5 reward=2\ntrans a b p=0.5\ninitial a\n");
  auto e = simulate_rewards(raw, 200000, 9);
  // v = 1 + 0.5 (2 + v)
  EXPECT_NEAR(e.mean(), 4.0, 0.05);
}

TEST(Simulate, ShardsAgreeWithSingleRun) {
  Dtmc d = fixtures::bundled("investor.dtmc");
  auto single = simulate_rewards(d, 80000, 100);
  std::vector<EmpiricalDistribution> shards;
  for (std::uint64_t s = 0; s < 8; ++s) shards.push_back(simulate_rewards(d, 10000, derive_seed(100, s)));
  auto merged = merge(shards);
  EXPECT_EQ(merged.size(), 80000u);
  EXPECT_TRUE(std::is_sorted(merged.samples.begin(), merged.samples.end()));
  const double se = std::hypot(single.moment_standard_error(1), merged.moment_standard_error(1));
  EXPECT_NEAR(single.mean(), merged.mean(), 4.0 * se);
}

TEST(EmpiricalCdf, Counting) {
  auto e = from_samples({3.0, 1.0, 2.0});
  EXPECT_EQ(empirical_cdf(e, 0.5), 0.0);
  EXPECT_EQ(empirical_cdf(e, 5.0), 1.0);
  EXPECT_NEAR(empirical_cdf(e, 2.0), 2.0 / 3.0, 1e-15);
  EXPECT_THROW(empirical_cdf(EmpiricalDistribution{}, 1.0), PreconditionError);
}

TEST(KsStatistic, AllZeroSamplesVersusExponential) {
  auto e = from_samples(std::vector<double>(100, 0.0));
  EXPECT_DOUBLE_EQ(ks_statistic(e, single_erlang(1, 1.0)), 1.0);
}

TEST(KsStatistic, MatchesDenseScan) {
  std::mt19937_64 g(4);
  std::exponential_distribution<double> ex(0.7);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> xs(300);
    for (double& x : xs) x = ex(g);
    auto e = from_samples(xs);
    ErlangMixture m{{0.6, 0.4}, {1, 3}, 1.1, 0.0};
    // sup over left and right limits at every sample point
    double oracle = 0.0;
    for (double x : e.samples) {
      const double f = mixture_cdf(m, x);
      const double right = empirical_cdf(e, x);
      const double left = empirical_cdf(e, std::nextafter(x, -1.0));
      oracle = std::max({oracle, std::abs(right - f), std::abs(left - f)});
    }
    EXPECT_NEAR(ks_statistic(e, m), oracle, 1e-15);
    EXPECT_GE(ks_statistic(e, m), 0.0);
    EXPECT_LE(ks_statistic(e, m), 1.0);
  }
}

TEST(KsStatistic, DkwBoundForOwnSamples) {
  ErlangMixture m{{0.3, 0.5, 0.2}, {3, 9, 27}, 0.8, 1.5};
  const std::size_t n = 20000;
  const double dkw = std::sqrt(std::log(2.0 / 0.001) / (2.0 * n));
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_LE(ks_statistic(sample_mixture(m, n, seed), m), dkw);
}

TEST(KsTwoSample, IdenticalAndDisjoint) {
  auto a = from_samples({1.0, 2.0, 3.0});
  EXPECT_EQ(ks_two_sample(a, a), 0.0);
  EXPECT_EQ(ks_two_sample(a, from_samples({10.0, 11.0})), 1.0);
}

TEST(SamplesCsv, RoundTripIsExact) {
  auto e = simulate_rewards(fixtures::bundled("fractional.dtmc"), 500, 2);
  std::stringstream ss;
  write_samples_csv(ss, e);
  auto back = read_samples_csv(ss);
  EXPECT_EQ(back.samples, e.samples);
}

TEST(SamplesCsv, Errors) {
  std::stringstream bad("reward\n1.0\nabc\n");
  try {
    read_samples_csv(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::stringstream empty("reward\n");
  EXPECT_THROW(read_samples_csv(empty), PreconditionError);
  std::stringstream headerless("2\n1\n");
  EXPECT_EQ(read_samples_csv(headerless).samples, (std::vector<double>{1.0, 2.0}));
}

TEST(EcdfGrid, CoversRange) {
  auto e = from_samples({1.0, 2.0, 4.0});
  auto grid = ecdf_grid(e, 3);
  ASSERT_EQ(grid.size(), 4u);
  EXPECT_EQ(grid.front().first, 1.0);
  EXPECT_EQ(grid.back().first, 4.0);
  EXPECT_EQ(grid.back().second, 1.0);
  std::stringstream ss;
  write_ecdf_csv(ss, e, 3);
  EXPECT_EQ(ss.str().substr(0, 4), "x,F\n");
}
