// Acceptance run: one line per criterion, nonzero exit if any fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "ermc/ermc.hpp"
#include "support.hpp"

using namespace ermc;

namespace {

// Tolerances
constexpr double kMomentTolerance = 1e-10;
constexpr double kMomentSigmas = 4.0;
constexpr double kMomentSeconds = 1.0;
constexpr std::size_t kMomentRuns = 1000000;
constexpr double kCdfTolerance = 1e-12;
constexpr double kQuadratureRelTolerance = 1e-6;
constexpr double kEntropyTolerance = 1e-6;
constexpr std::size_t kSoundnessRuns = 1000000;
constexpr double kSoundnessSigmas = 3.0;
constexpr double kSelfResidual = 1e-5;
constexpr double kSelfKs = 0.01;
constexpr std::size_t kSelfSamples = 100000;
constexpr double kTrendGain = 0.03;
constexpr double kTrendBase = 0.17;
constexpr double kTrendBest = 0.07;
constexpr double kTrendMagnitude = 0.05;
constexpr double kGridSeconds = 300.0;
constexpr double kFitSeconds = 10.0;
constexpr std::size_t kTrendRuns = 1000000;
constexpr double kDiscretizationSlack = 1e-9;
constexpr std::size_t kDiscretizationRuns = 1000000;
constexpr double kGridKs = 0.05;

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Line {
  bool pass;
  std::string detail;
};

std::vector<std::string> bundled_names() {
  return {"geometric.dtmc", "deterministic.dtmc", "heavy_tail.dtmc", "uav.dtmc", "fractional.dtmc", "investor.dtmc"};
}

Dtmc random_acceptance_model(std::uint64_t i) {
  return fixtures::random_model(5000 + i, 5 + (i * 7) % 16, 0.2);
}

// 1. Moment exactness
Line moments_exact() {
  auto geo = reward_moments(fixtures::bundled("geometric.dtmc"), 2).moments;
  bool ok = std::abs(geo[1] - 2.0) <= kMomentTolerance && std::abs(geo[2] - 6.0) <= kMomentTolerance;
  double worst_z = 0.0;
  double slowest = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    auto d = random_acceptance_model(i);
    auto t0 = std::chrono::steady_clock::now();
    auto m = reward_moments(d, 3).moments;
    slowest = std::max(slowest, seconds_since(t0));
    auto e = simulate_rewards(d, kMomentRuns, 100 + i);
    for (std::size_t k = 1; k <= 3; ++k) {
      const double z = std::abs(e.moment(k) - m[k]) / e.moment_standard_error(k);
      worst_z = std::max(worst_z, z);
    }
  }
  ok = ok && worst_z <= kMomentSigmas && slowest < kMomentSeconds;
  return {ok, fmt("geometric mu1=%.12g mu2=%.12g; 20 random models: max |z| %.2f (limit %.0f), slowest %.4f s",
                  geo[1], geo[2], worst_z, kMomentSigmas, slowest)};
}

// 2. Erlang oracles
Line erlang_oracles() {
  const double cdf_err = std::abs(erlang_cdf(2.0, 2, 1.0) - (1.0 - 3.0 * std::exp(-2.0)));
  double worst_rel = 0.0;
  std::mt19937_64 g(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<Shape> shapes{1, 2, 3, 5, 9, 27, 81};
  for (int trial = 0; trial < 12; ++trial) {
    ErlangMixture m;
    const std::size_t n = 1 + trial % 3;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      m.shapes.push_back(shapes[(trial + 3 * i) % shapes.size()]);
      m.weights.push_back(0.1 + u(g));
      sum += m.weights.back();
    }
    for (double& w : m.weights) w /= sum;
    m.rate = 0.3 + 3.0 * u(g);
    m.location = trial % 2 ? 0.0 : 1.5 * u(g);
    auto exact = mixture_moments(m, 5).shifted;
    for (std::size_t k = 1; k <= 5; ++k) {
      // Quadrature of x^k f(x) over component-aware breakpoints.
      std::vector<double> pts{m.location};
      double top = m.location;
      for (Shape a : m.shapes) {
        const double mean = static_cast<double>(a) / m.rate;
        const double sd = std::sqrt(static_cast<double>(a)) / m.rate;
        for (double j : {-4.0, -2.0, 0.0, 2.0, 4.0})
          if (mean + j * sd > 0.0) pts.push_back(m.location + mean + j * sd);
        top = std::max(top, m.location + mean + 80.0 * sd + 80.0 / m.rate);
      }
      pts.push_back(top);
      std::sort(pts.begin(), pts.end());
      pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
      auto r = quadrature::integrate(
          [&](double x) {
            Eigen::VectorXd v(1);
            v[0] = std::pow(x, static_cast<double>(k)) * mixture_pdf(m, x);
            return v;
          },
          std::span<const double>(pts), 0.0, 1e-12);
      worst_rel = std::max(worst_rel, std::abs(r.value[0] - exact[k - 1]) / exact[k - 1]);
    }
  }
  double entropy_err = 0.0;
  for (double lambda : {0.05, 0.5, 1.0, 3.0, 20.0})
    entropy_err = std::max(entropy_err, std::abs(mixture_entropy(single_erlang(1, lambda)).value - (1.0 - std::log(lambda))));
  const bool ok = cdf_err <= kCdfTolerance && worst_rel <= kQuadratureRelTolerance && entropy_err <= kEntropyTolerance;
  return {ok, fmt("cdf error %.2e; moment vs quadrature max rel %.2e (k<=5, shapes<=81); exponential entropy error %.2e",
                  cdf_err, worst_rel, entropy_err)};
}

// 3. Cantelli soundness
Line cantelli_soundness() {
  std::vector<std::pair<std::string, Dtmc>> models;
  for (const auto& name : bundled_names()) models.emplace_back(name, fixtures::bundled(name));
  for (std::uint64_t i = 0; i < 20; ++i) models.emplace_back("random" + std::to_string(i), random_acceptance_model(i));
  std::size_t verdicts = 0;
  std::size_t violations = 0;
  double tightest = 1e9;
  CheckOptions opt;
  opt.orders = {2, 3, 4};
  opt.fallback = false;
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    const auto& d = models[mi].second;
    auto m = reward_moments(d, 4).moments;
    if (m.sigma <= 0.0) continue;
    auto e = simulate_rewards(d, kSoundnessRuns, 900 + mi);
    for (double k : {1.0, 2.0, 4.0}) {
      const double r = m.mean() + k * m.sigma;
      const double p = empirical_cdf(e, r);
      const double se = std::sqrt(std::max(p * (1.0 - p), 1e-12) / static_cast<double>(e.size()));
      // The strongest alpha any bound certifies, plus a ladder below it.
      auto strongest = check_moments(m, ChanceConstraint::at_most(r, 0.5), opt);
      std::vector<double> alphas{0.5, 0.75, 0.9, 0.95, 0.99};
      if (strongest.decision == Decision::holds) {
        double best = 0.0;
        for (const auto& b : strongest.bounds_tried) best = std::max(best, 1.0 - b.bound);
        if (best > 0.0 && best < 1.0) alphas.push_back(best);
      }
      for (double alpha : alphas) {
        auto v = check_moments(m, ChanceConstraint::at_most(r, alpha), opt);
        if (v.decision != Decision::holds || v.method != Method::cantelli) continue;
        ++verdicts;
        tightest = std::min(tightest, (p - (alpha - kSoundnessSigmas * se)) / se);
        if (p < alpha - kSoundnessSigmas * se) ++violations;
      }
    }
  }
  return {violations == 0 && verdicts > 0,
          fmt("%zu holds-by-bound verdicts on %zu models, %zu violations; smallest margin %.1f SE", verdicts,
              models.size(), violations, tightest)};
}

// 4. Fit self-consistency
Line fit_self_consistency() {
  double worst_residual = 0.0;
  double worst_ks = 0.0;
  std::mt19937_64 g(4242);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + t % 3;
    ErlangMixture gen;
    gen.shapes = ShapeRule::exponential(3).shapes(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      gen.weights.push_back(0.05 + u(g));
      sum += gen.weights.back();
    }
    for (double& w : gen.weights) w /= sum;
    gen.rate = std::exp(std::log(0.2) + u(g) * std::log(25.0));
    const std::size_t k = std::min<std::size_t>(5, 2 * n - 1);
    FitConfig cfg;
    cfg.moments = k;
    cfg.components = n;
    cfg.gamma = 0.0;
    cfg.location_rule = LocationRule::zero;
    auto f = fit_mixture(make_moments(mixture_moments(gen, k).shifted, cfg.standardization), cfg);
    for (double r : f.scaled_residuals) worst_residual = std::max(worst_residual, r);
    auto sample = sample_mixture(gen, kSelfSamples, 300 + t);
    worst_ks = std::max(worst_ks, ks_statistic(sample, f.mixture));
  }
  return {worst_residual < kSelfResidual && worst_ks < kSelfKs,
          fmt("20 in-grid targets: max scaled residual %.2e (limit %.0e), max D_KS %.4f (limit %.2f)", worst_residual,
              kSelfResidual, worst_ks, kSelfKs)};
}

struct GridOutcome {
  double base = 1.0;
  double best = 1.0;
  std::size_t best_k = 0;
  std::size_t best_n = 0;
  double slowest = 0.0;
  double total = 0.0;
};

// 5. Grid trend on the bimodal model
Line grid_trend(const Dtmc& d, const EmpiricalDistribution& e) {
  GridOutcome g;
  auto t0 = std::chrono::steady_clock::now();
  auto m = reward_moments(d, 5, FitConfig{}.standardization).moments;
  for (std::size_t k = 3; k <= 5; ++k)
    for (std::size_t n = 3; n <= 9; ++n) {
      FitConfig cfg;
      cfg.moments = k;
      cfg.components = n;
      auto f = fit_mixture(m, cfg);
      g.slowest = std::max(g.slowest, f.wall_time);
      const double ks = ks_statistic(e, f.mixture);
      if (k == 3 && n == 3) g.base = ks;
      if (ks < g.best) {
        g.best = ks;
        g.best_k = k;
        g.best_n = n;
      }
    }
  g.total = seconds_since(t0);
  const bool direction = g.best <= g.base - kTrendGain;
  const bool magnitudes =
      std::abs(g.base - kTrendBase) <= kTrendMagnitude && std::abs(g.best - kTrendBest) <= kTrendMagnitude;
  const bool timing = g.total < kGridSeconds && g.slowest < kFitSeconds;
  return {direction && magnitudes && timing,
          fmt("D_KS(3,3) %.4f -> best %.4f at (K=%zu, n=%zu); gain %.4f (need >= %.2f); grid %.1f s, slowest fit %.2f s",
              g.base, g.best, g.best_k, g.best_n, g.base - g.best, kTrendGain, g.total, g.slowest)};
}

// 6. Shape heuristic
Line shape_trend(const Dtmc& d, const EmpiricalDistribution& e) {
  auto m = reward_moments(d, 5, FitConfig{}.standardization).moments;
  FitConfig cfg;
  cfg.moments = 5;
  cfg.components = 6;
  const double exp_ks = ks_statistic(e, fit_mixture(m, cfg).mixture);
  cfg.shape_rule = ShapeRule::dense();
  const double dense_ks = ks_statistic(e, fit_mixture(m, cfg).mixture);
  return {exp_ks <= dense_ks, fmt("K=5, n=6: exponential(3) D_KS %.4f vs dense D_KS %.4f", exp_ks, dense_ks)};
}

// 7. Discretization
Line discretization() {
  auto d = fixtures::bundled("fractional.dtmc");
  const double mu = reward_moments(d, 1).moments.mean();
  const double steps = expected_steps(d);
  auto original = simulate_rewards(d, kDiscretizationRuns, 71);
  std::vector<double> ks;
  bool bracket = true;
  std::ostringstream detail;
  for (double delta : {1.0, 0.1, 0.01}) {
    auto dd = discretize_rewards(d, delta);
    const double shift = reward_moments(dd, 1).moments.mean() - mu;
    bracket = bracket && shift >= -kDiscretizationSlack && shift <= delta * steps + kDiscretizationSlack;
    ks.push_back(ks_two_sample(original, simulate_rewards(dd, kDiscretizationRuns, 71)));
    detail << fmt("delta %g: D_KS %.4f, mean shift %.5f in [0, %.5f]; ", delta, ks.back(), shift, delta * steps);
  }
  const bool monotone = ks[0] > ks[1] && ks[1] > ks[2];
  return {monotone && bracket, detail.str()};
}

// 8. Grid construction for Exp(1)
Line grid_construction() {
  auto exp_cdf = [](double x) { return x <= 0.0 ? 0.0 : -std::expm1(-x); };
  std::vector<double> ks;
  std::ostringstream detail;
  for (double beta : {1.0, 0.5, 0.1}) {
    auto approx = grid_erlang_approximation(exp_cdf, beta, static_cast<std::size_t>(std::ceil(40.0 / beta)));
    double sup = 0.0;
    for (int i = 0; i <= 40000; ++i) {
      const double x = i * 1e-3;
      sup = std::max(sup, std::abs(mixture_cdf(approx.mixture, x) - exp_cdf(x)));
    }
    ks.push_back(sup);
    detail << fmt("beta %g: D_KS %.4f; ", beta, sup);
  }
  return {ks[0] > ks[1] && ks[1] > ks[2] && ks[2] < kGridKs, detail.str()};
}

// 9. Reproducibility
Line reproducibility() {
  auto run = [](std::vector<std::string> args) {
    args.insert(args.begin(), "ermc");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out;
    std::ostringstream err;
    run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    Json j = Json::parse(out.str());
    j.erase("timing");
    return j.dump();
  };
  std::size_t cases = 0;
  std::size_t mismatches = 0;
  for (const auto& [model, property] : std::vector<std::pair<std::string, std::string>>{
           {"investor.dtmc", "P[X <= 30] >= 0.6"},
           {"heavy_tail.dtmc", "P[X <= 3] >= 0.7"},
           {"geometric.dtmc", "P[X <= 5] >= 0.5"}}) {
    const std::vector<std::string> base{"check", fixtures::model_path(model), "--property", property, "--seed", "11"};
    auto eight = base;
    eight.insert(eight.begin(), {"--threads", "8"});
    const std::string a = run(base);
    const std::string b = run(base);
    const std::string c = run(eight);
    ++cases;
    if (a != b || a != c) ++mismatches;
  }
  return {mismatches == 0, fmt("%zu check reports, 2 runs + 8 workers each: %zu mismatches", cases, mismatches)};
}

}  // namespace

int main() {
  auto investor = fixtures::bundled("investor.dtmc");
  auto investor_samples = simulate_rewards(investor, kTrendRuns, 2024);

  const std::vector<std::pair<std::string, std::function<Line()>>> criteria{
      {"moment exactness", moments_exact},
      {"Erlang oracles", erlang_oracles},
      {"Cantelli soundness", cantelli_soundness},
      {"fit self-consistency", fit_self_consistency},
      {"grid trend", [&] { return grid_trend(investor, investor_samples); }},
      {"shape heuristic", [&] { return shape_trend(investor, investor_samples); }},
      {"discretization", discretization},
      {"grid construction", grid_construction},
      {"reproducibility", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Line line{false, ""};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      line = criteria[i].second();
    } catch (const std::exception& e) {
      line = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %zu (%s): %s | %s| %.1f s\n", i + 1, criteria[i].first.c_str(), line.pass ? "PASS" : "FAIL",
                line.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
    if (!line.pass) ++failed;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
