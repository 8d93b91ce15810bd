#pragma once

// Monte Carlo simulation of cumulative reward to absorption, empirical CDFs,
// and Kolmogorov-Smirnov distances.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ermc/erlang.hpp"
#include "ermc/errors.hpp"
#include "ermc/model.hpp"
#include "ermc/random.hpp"

namespace ermc {

struct EmpiricalDistribution {
  std::vector<double> samples;  // sorted ascending
  std::size_t run_count = 0;
  std::uint64_t seed = 0;
  std::size_t truncated_runs = 0;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  double moment(std::size_t k) const {
    if (samples.empty()) throw PreconditionError("empty sample set");
    double s = 0.0;
    for (double x : samples) s += std::pow(x, static_cast<double>(k));
    return s / static_cast<double>(samples.size());
  }
  double mean() const { return moment(1); }

  // Standard error of the k-th sample moment.
  double moment_standard_error(std::size_t k) const {
    const double mk = moment(k);
    const double m2k = moment(2 * k);
    return std::sqrt(std::max(0.0, m2k - mk * mk) / static_cast<double>(samples.size()));
  }
};

struct SimulationOptions {
  std::size_t runs = 1000000;
  std::uint64_t seed = 0;
  std::size_t max_steps = 1000000;
  std::size_t threads = 1;
};

namespace detail {

struct Walker {
  explicit Walker(const Dtmc& d) {
    const std::size_t n = d.size();
    rewards.resize(n);
    absorbing.resize(n);
    offsets.assign(n + 1, 0);
    for (StateIndex s = 0; s < n; ++s) {
      rewards[s] = d.states[s].reward;
      absorbing[s] = d.states[s].absorbing;
      offsets[s + 1] = offsets[s] + d.rows[s].size();
    }
    targets.reserve(offsets[n]);
    cumulative.reserve(offsets[n]);
    for (StateIndex s = 0; s < n; ++s) {
      double c = 0.0;
      for (const auto& e : d.rows[s]) {
        c += e.probability;
        targets.push_back(e.to);
        cumulative.push_back(c);
      }
    }
    initial = d.initial;
  }

  // Cumulative reward of one run, or NaN if it hits the step cap. Rows with a
  // single successor consume no randomness.
  double run(StreamRng& rng, std::size_t max_steps) const {
    StateIndex s = initial;
    double total = 0.0;
    for (std::size_t step = 0; step < max_steps; ++step) {
      if (absorbing[s]) return total;
      total += rewards[s];
      const std::size_t begin = offsets[s];
      const std::size_t end = offsets[s + 1];
      if (end - begin == 1) {
        s = targets[begin];
        continue;
      }
      const double u = rng.uniform() * cumulative[end - 1];
      std::size_t j = begin;
      while (j + 1 < end && cumulative[j] <= u) ++j;
      s = targets[j];
    }
    return absorbing[s] ? total : std::numeric_limits<double>::quiet_NaN();
  }

  std::vector<double> rewards;
  std::vector<bool> absorbing;
  std::vector<std::size_t> offsets;
  std::vector<StateIndex> targets;
  std::vector<double> cumulative;
  StateIndex initial = 0;
};

// Runs body(begin, end) over [0, count) split into contiguous blocks.
template <class Body>
void parallel_blocks(std::size_t count, std::size_t threads, Body&& body) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    body(std::size_t{0}, count);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t begin = count * t / threads;
      const std::size_t end = count * (t + 1) / threads;
      pool.emplace_back([&, t, begin, end] {
        try {
          body(begin, end);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

// Run i draws from StreamRng(seed, i), so the sample set does not depend on
// the thread count.
inline EmpiricalDistribution simulate_rewards(const Dtmc& model, const SimulationOptions& opt) {
  if (opt.runs == 0) throw PreconditionError("at least one run is required");
  if (opt.max_steps == 0) throw PreconditionError("max_steps must be positive");
  const Dtmc d = model.has_transition_rewards() ? normalize_transition_rewards(model) : model;
  require_valid(d);
  const detail::Walker walker(d);

  std::vector<double> values(opt.runs);
  detail::parallel_blocks(opt.runs, opt.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      StreamRng rng(opt.seed, i);
      values[i] = walker.run(rng, opt.max_steps);
    }
  });

  EmpiricalDistribution e;
  e.run_count = opt.runs;
  e.seed = opt.seed;
  e.samples.reserve(opt.runs);
  for (double v : values) {
    if (std::isnan(v))
      ++e.truncated_runs;
    else
      e.samples.push_back(v);
  }
  std::sort(e.samples.begin(), e.samples.end());
  return e;
}

inline EmpiricalDistribution simulate_rewards(const Dtmc& d, std::size_t runs, std::uint64_t seed,
                                              std::size_t max_steps = 1000000, std::size_t threads = 1) {
  return simulate_rewards(d, SimulationOptions{runs, seed, max_steps, threads});
}

inline std::vector<std::string> simulation_warnings(const EmpiricalDistribution& e) {
  std::vector<std::string> out;
  if (e.truncated_runs * 1000 > e.run_count)
    out.push_back(std::to_string(e.truncated_runs) + " of " + std::to_string(e.run_count) +
                  " runs hit the step cap; raise max_steps");
  return out;
}

// Concatenates shards. The merged seed is the first shard's.
inline EmpiricalDistribution merge(std::span<const EmpiricalDistribution> shards) {
  EmpiricalDistribution out;
  if (!shards.empty()) out.seed = shards.front().seed;
  for (const auto& s : shards) {
    out.samples.insert(out.samples.end(), s.samples.begin(), s.samples.end());
    out.run_count += s.run_count;
    out.truncated_runs += s.truncated_runs;
  }
  std::sort(out.samples.begin(), out.samples.end());
  return out;
}

inline EmpiricalDistribution from_samples(std::vector<double> samples, std::uint64_t seed = 0) {
  EmpiricalDistribution e;
  for (double x : samples)
    if (!std::isfinite(x)) throw PreconditionError("non-finite sample");
  std::sort(samples.begin(), samples.end());
  e.run_count = samples.size();
  e.samples = std::move(samples);
  e.seed = seed;
  return e;
}

// Independent draws from a mixture; draw i uses StreamRng(seed, i).
inline EmpiricalDistribution sample_mixture(const ErlangMixture& m, std::size_t count, std::uint64_t seed,
                                            std::size_t threads = 1) {
  m.validate();
  std::vector<double> cumulative;
  double c = 0.0;
  for (double w : m.weights) cumulative.push_back(c += w);
  std::vector<double> values(count);
  detail::parallel_blocks(count, threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      StreamRng rng(seed, i);
      const double u = rng.uniform() * c;
      std::size_t j = 0;
      while (j + 1 < cumulative.size() && cumulative[j] <= u) ++j;
      std::gamma_distribution<double> gamma(static_cast<double>(m.shapes[j]), 1.0 / m.rate);
      values[i] = m.location + gamma(rng);
    }
  });
  return from_samples(std::move(values), seed);
}

// Fraction of samples <= x.
inline double empirical_cdf(const EmpiricalDistribution& e, double x) {
  if (e.samples.empty()) throw PreconditionError("empty sample set");
  const auto it = std::upper_bound(e.samples.begin(), e.samples.end(), x);
  return static_cast<double>(it - e.samples.begin()) / static_cast<double>(e.samples.size());
}

// sup_x |F_emp(x) - F(x)| for a continuous F, exact over the step function.
template <class Cdf>
double ks_statistic_cdf(const EmpiricalDistribution& e, Cdf&& cdf) {
  if (e.samples.empty()) throw PreconditionError("empty sample set");
  const double n = static_cast<double>(e.samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < e.samples.size(); ++i) {
    const double f = cdf(e.samples[i]);
    d = std::max({d, std::abs(static_cast<double>(i + 1) / n - f), std::abs(static_cast<double>(i) / n - f)});
  }
  return std::clamp(d, 0.0, 1.0);
}

inline double ks_statistic(const EmpiricalDistribution& e, const ErlangMixture& m) {
  m.validate();
  return ks_statistic_cdf(e, [&](double x) { return mixture_cdf(m, x); });
}

// sup_x |F_a(x) - F_b(x)| between two empirical distributions.
inline double ks_two_sample(const EmpiricalDistribution& a, const EmpiricalDistribution& b) {
  if (a.samples.empty() || b.samples.empty()) throw PreconditionError("empty sample set");
  const double na = static_cast<double>(a.samples.size());
  const double nb = static_cast<double>(b.samples.size());
  std::size_t i = 0;
  std::size_t j = 0;
  double d = 0.0;
  while (i < a.samples.size() || j < b.samples.size()) {
    double x;
    if (j == b.samples.size() || (i < a.samples.size() && a.samples[i] <= b.samples[j]))
      x = a.samples[i];
    else
      x = b.samples[j];
    while (i < a.samples.size() && a.samples[i] == x) ++i;
    while (j < b.samples.size() && b.samples[j] == x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

// sup_x |F(x) - G(x)| for two continuous CDFs on [lo, hi], by a dense scan
// refined with golden-section search around the largest gaps.
template <class F, class G>
double ks_distance(F&& f, G&& g, double lo, double hi, std::size_t points = 20000) {
  if (!(hi > lo)) throw PreconditionError("empty interval");
  auto gap = [&](double x) { return std::abs(f(x) - g(x)); };
  std::vector<double> xs(points + 1);
  std::vector<double> vs(points + 1);
  for (std::size_t i = 0; i <= points; ++i) {
    xs[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points);
    vs[i] = gap(xs[i]);
  }
  double best = *std::max_element(vs.begin(), vs.end());
  std::vector<std::size_t> order(points + 1);
  for (std::size_t i = 0; i <= points; ++i) order[i] = i;
  const std::size_t top = std::min<std::size_t>(8, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                    [&](std::size_t x, std::size_t y) { return vs[x] > vs[y]; });
  for (std::size_t r = 0; r < top; ++r) {
    const std::size_t i = order[r];
    double a = xs[i == 0 ? 0 : i - 1];
    double b = xs[std::min(points, i + 1)];
    constexpr double inv_phi = 0.6180339887498949;
    double x1 = b - inv_phi * (b - a);
    double x2 = a + inv_phi * (b - a);
    double f1 = gap(x1);
    double f2 = gap(x2);
    for (int it = 0; it < 80; ++it) {
      if (f1 >= f2) {
        b = x2;
        x2 = x1;
        f2 = f1;
        x1 = b - inv_phi * (b - a);
        f1 = gap(x1);
      } else {
        a = x1;
        x1 = x2;
        f1 = f2;
        x2 = a + inv_phi * (b - a);
        f2 = gap(x2);
      }
    }
    best = std::max({best, f1, f2});
  }
  return best;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline std::string shortest(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_samples_csv(std::ostream& out, const EmpiricalDistribution& e) {
  out << "reward\n";
  for (double x : e.samples) out << shortest(x) << '\n';
}

// Reads a single-column CSV, with or without a header line.
inline EmpiricalDistribution read_samples_csv(std::istream& in) {
  std::vector<double> values;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    std::string_view cell(line.data() + first, last - first + 1);
    double v = 0.0;
    auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size()) {
      if (line_no == 1 && values.empty()) continue;  // header
      throw ParseError("invalid sample '" + std::string(cell) + "'", line_no, first + 1);
    }
    values.push_back(v);
  }
  if (values.empty()) throw PreconditionError("sample file contains no samples");
  return from_samples(std::move(values));
}

// (x, F_emp(x)) at points + 1 evenly spaced x covering the sample range.
inline std::vector<std::pair<double, double>> ecdf_grid(const EmpiricalDistribution& e, std::size_t points) {
  if (e.samples.empty()) throw PreconditionError("empty sample set");
  if (points == 0) throw PreconditionError("grid needs at least one interval");
  const double lo = e.samples.front();
  const double hi = e.samples.back();
  std::vector<std::pair<double, double>> out;
  for (std::size_t i = 0; i <= points; ++i) {
    const double x = hi > lo ? lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points) : lo;
    out.emplace_back(x, empirical_cdf(e, x));
  }
  return out;
}

inline void write_ecdf_csv(std::ostream& out, const EmpiricalDistribution& e, std::size_t points) {
  out << "x,F\n";
  for (auto [x, f] : ecdf_grid(e, points)) out << shortest(x) << ',' << shortest(f) << '\n';
}

}  // namespace ermc
