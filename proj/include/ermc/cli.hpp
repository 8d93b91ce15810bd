#pragma once

// Command-line front end. run_cli() is the whole program; tools/ermc.cpp only
// forwards argv and the standard streams.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ermc/checker.hpp"
#include "ermc/erlang.hpp"
#include "ermc/errors.hpp"
#include "ermc/fit.hpp"
#include "ermc/model.hpp"
#include "ermc/moments.hpp"
#include "ermc/sim.hpp"

namespace ermc {

inline constexpr std::string_view kToolName = "ermc";
inline constexpr std::string_view kToolVersion = "1.0.0";

namespace exit_code {
inline constexpr int holds = 0;
inline constexpr int fails = 1;
inline constexpr int undetermined = 2;
inline constexpr int usage = 64;
inline constexpr int internal = 70;
}  // namespace exit_code

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Property grammar
// ---------------------------------------------------------------------------

namespace detail {

inline double parse_property_number(std::string_view text, std::size_t column) {
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc{} || res.ptr != text.data() + text.size() || !std::isfinite(v))
    throw ParseError("expected a number, found '" + std::string(text) + "'", 1, column);
  return v;
}

}  // namespace detail

// P[X <= r] >= a | P[X >= r] >= a | P[r1 <= X <= r2] >= a, whitespace-free
// after normalization.
inline ChanceConstraint parse_property(std::string_view input) {
  std::string s;
  std::vector<std::size_t> col;  // original 1-based column of each kept char
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (std::isspace(static_cast<unsigned char>(input[i]))) continue;
    s.push_back(input[i]);
    col.push_back(i + 1);
  }
  auto column_at = [&](std::size_t i) { return i < col.size() ? col[i] : input.size() + 1; };
  if (s.size() < 2 || (s[0] != 'P' && s[0] != 'p') || s[1] != '[')
    throw ParseError("property must start with 'P['", 1, column_at(0));
  const auto close = s.find(']');
  if (close == std::string::npos) throw ParseError("missing ']'", 1, input.size() + 1);
  const std::string body = s.substr(2, close - 2);
  const std::string tail = s.substr(close + 1);
  if (tail.rfind(">=", 0) != 0) throw ParseError("expected '>=' after ']'", 1, column_at(close + 1));
  const double alpha = detail::parse_property_number(std::string_view(tail).substr(2), column_at(close + 3));

  ChanceConstraint c;
  c.alpha = alpha;
  const std::size_t base = 2;
  if (body.rfind("X<=", 0) == 0) {
    c.direction = Direction::at_most;
    c.threshold = detail::parse_property_number(std::string_view(body).substr(3), column_at(base + 3));
  } else if (body.rfind("X>=", 0) == 0) {
    c.direction = Direction::at_least;
    c.threshold = detail::parse_property_number(std::string_view(body).substr(3), column_at(base + 3));
  } else {
    const auto first = body.find("<=X<=");
    if (first == std::string::npos)
      throw ParseError("expected 'X<=r', 'X>=r' or 'r1<=X<=r2' inside brackets", 1, column_at(base));
    c.direction = Direction::interval;
    c.threshold = detail::parse_property_number(std::string_view(body).substr(0, first), column_at(base));
    c.upper = detail::parse_property_number(std::string_view(body).substr(first + 5), column_at(base + first + 5));
  }
  try {
    c.validate();
  } catch (const PreconditionError& e) {
    throw ParseError(e.what(), 1, 1);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline Json to_json(const ErlangMixture& m) {
  return Json{{"weights", m.weights}, {"shapes", m.shapes}, {"rate", m.rate}, {"location", m.location}};
}

inline ErlangMixture mixture_from_json(const Json& j) {
  ErlangMixture m;
  try {
    m.weights = j.at("weights").get<std::vector<double>>();
    m.shapes = j.at("shapes").get<std::vector<Shape>>();
    m.rate = j.at("rate").get<double>();
    m.location = j.contains("location") ? j.at("location").get<double>() : 0.0;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("invalid mixture record: ") + e.what(), 0, 0);
  }
  try {
    m.validate();
  } catch (const PreconditionError& e) {
    throw ParseError(std::string("invalid mixture record: ") + e.what(), 0, 0);
  }
  return m;
}

inline std::string to_string(StandardizationRule r) {
  return r == StandardizationRule::per_order ? "per-order" : "paper-literal";
}

inline Json to_json(const MomentVector& m) {
  return Json{{"K", m.order()},
              {"raw", m.raw},
              {"variance", m.variance},
              {"sigma", m.sigma},
              {"standardized", m.standardized},
              {"standardization", to_string(m.rule)}};
}

inline std::string location_rule_name(const FitConfig& c) {
  switch (c.location_rule) {
    case LocationRule::mean_minus_sigma: return "mean-minus-sigma";
    case LocationRule::zero: return "zero";
    case LocationRule::fixed: return "fixed";
  }
  return "?";
}

inline Json to_json(const FitConfig& c) {
  Json j{{"K", c.moments},
         {"n", c.components},
         {"shapes", c.shape_rule.name()},
         {"gamma", c.gamma},
         {"epsilon", c.epsilon},
         {"rate_bounds", {c.rate_min, c.rate_max}},
         {"max_outer_iterations", c.max_outer_iterations},
         {"standardize_residuals", c.standardize_residuals},
         {"standardization", to_string(c.standardization)},
         {"location_rule", location_rule_name(c)},
         {"restarts", c.restarts},
         {"seed", c.seed}};
  if (c.location_rule == LocationRule::fixed) j["location"] = c.fixed_location;
  return j;
}

// Wall time is reported under the report's timing block, not here.
inline Json to_json(const FitResult& f) {
  return Json{{"mixture", to_json(f.mixture)},
              {"loss", f.loss},
              {"moment_residuals", f.moment_residuals},
              {"scaled_residuals", f.scaled_residuals},
              {"entropy", f.entropy},
              {"entropy_domain", {{"tail_mass", kEntropyTailMass}, {"tolerance", kEntropyTolerance}}},
              {"iterations", f.iterations},
              {"total_iterations", f.total_iterations},
              {"converged", f.converged},
              {"restart", f.restart},
              {"restart_losses", f.restart_losses}};
}

inline Json to_json(const Verdict& v) {
  Json j{{"decision", to_string(v.decision)},
         {"method", to_string(v.method)},
         {"probability", {v.probability_low, v.probability_high}},
         {"bound_undetermined", v.bound_undetermined},
         {"marginal", v.marginal},
         {"moments_used", v.moments_used},
         {"moments", v.moments.raw}};
  if (v.method == Method::cantelli && v.cantelli_order > 0) {
    j["cantelli_order"] = v.cantelli_order;
    j["cantelli_b"] = v.cantelli_b;
  }
  Json bounds = Json::array();
  for (const auto& b : v.bounds_tried) bounds.push_back({{"order", b.order}, {"bound", b.bound}, {"b", b.b}});
  j["bounds_tried"] = bounds;
  if (v.fit) j["fit"] = to_json(*v.fit);
  return j;
}

inline Json to_json(const ValidationReport& r, const Dtmc& d) {
  Json violations = Json::array();
  for (const auto& v : r.violations) {
    Json e{{"kind", std::string(to_string(v.kind))}, {"message", v.message}};
    if (v.state && *v.state < d.size()) e["state"] = d.states[*v.state].name;
    violations.push_back(e);
  }
  return Json{{"ok", r.ok()}, {"states", d.size()}, {"transitions", d.transition_count()}, {"violations", violations}};
}

inline std::string fnv1a_digest(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CLI::ValidationError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::uint64_t default_seed() {
  if (const char* env = std::getenv("ERMC_SEED")) {
    std::uint64_t v = 0;
    std::string_view s(env);
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec == std::errc{} && res.ptr == s.data() + s.size()) return v;
    throw CLI::ValidationError("ERMC_SEED must be a nonnegative integer");
  }
  return 0;
}

inline std::pair<std::size_t, std::size_t> parse_range(const std::string& text, const std::string& what) {
  auto colon = text.find(':');
  auto parse = [&](std::string_view s) {
    std::size_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size())
      throw CLI::ValidationError(what + " must look like 'lo:hi' or 'k'");
    return v;
  };
  if (colon == std::string::npos) {
    auto v = parse(text);
    return {v, v};
  }
  auto lo = parse(std::string_view(text).substr(0, colon));
  auto hi = parse(std::string_view(text).substr(colon + 1));
  if (lo > hi || lo == 0) throw CLI::ValidationError(what + " must be an ordered positive range");
  return {lo, hi};
}

inline ShapeRule parse_shape_rule(const std::string& text) {
  if (text == "dense") return ShapeRule::dense();
  auto colon = text.find(':');
  if (colon != std::string::npos) {
    const std::string kind = text.substr(0, colon);
    Shape c = 0;
    std::string_view v(text);
    v.remove_prefix(colon + 1);
    auto res = std::from_chars(v.data(), v.data() + v.size(), c);
    if (res.ec == std::errc{} && res.ptr == v.data() + v.size() && c >= 1) {
      if (kind == "exp" || kind == "exponential") return ShapeRule::exponential(c);
      if (kind == "linear") return ShapeRule::linear(c);
    }
  }
  throw CLI::ValidationError("--shapes must be 'dense', 'linear:c' or 'exp:c'");
}

struct FitFlags {
  std::size_t k = 3;
  std::size_t n = 3;
  std::string shapes = "exp:3";
  double gamma = 1.0;
  double epsilon = 1e-8;
  double rate_min = 0.01;
  double rate_max = 50.0;
  std::size_t max_iterations = 500;
  bool raw_residuals = false;
  std::string standardization = "paper-literal";
  std::string location = "mean-minus-sigma";
  std::size_t restarts = 5;

  void add(CLI::App* app, bool with_kn = true) {
    if (with_kn) {
      app->add_option("--k", k, "number of moments to match")->check(CLI::PositiveNumber);
      app->add_option("--n", n, "number of mixture components")->check(CLI::PositiveNumber);
    }
    app->add_option("--shapes", shapes, "shape grid: dense | linear:c | exp:c");
    app->add_option("--gamma", gamma, "entropy weight")->check(CLI::NonNegativeNumber);
    app->add_option("--epsilon", epsilon, "convergence threshold on the loss")->check(CLI::PositiveNumber);
    app->add_option("--rate-min", rate_min, "lower rate bound")->check(CLI::PositiveNumber);
    app->add_option("--rate-max", rate_max, "upper rate bound")->check(CLI::PositiveNumber);
    app->add_option("--max-iterations", max_iterations, "outer iteration cap")->check(CLI::PositiveNumber);
    app->add_flag("--raw-residuals", raw_residuals, "match raw instead of standardized moments");
    app->add_option("--standardization", standardization, "per-order | paper-literal")
        ->check(CLI::IsMember({"per-order", "paper-literal"}));
    app->add_option("--location", location, "mean-minus-sigma | zero | <number>");
    app->add_option("--restarts", restarts, "optimizer restarts")->check(CLI::PositiveNumber);
  }

  FitConfig config(std::uint64_t seed, std::size_t threads) const {
    FitConfig c;
    c.moments = k;
    c.components = n;
    c.shape_rule = parse_shape_rule(shapes);
    c.gamma = gamma;
    c.epsilon = epsilon;
    c.rate_min = rate_min;
    c.rate_max = rate_max;
    c.max_outer_iterations = max_iterations;
    c.standardize_residuals = !raw_residuals;
    c.standardization =
        standardization == "paper-literal" ? StandardizationRule::paper_literal : StandardizationRule::per_order;
    if (location == "mean-minus-sigma") {
      c.location_rule = LocationRule::mean_minus_sigma;
    } else if (location == "zero") {
      c.location_rule = LocationRule::zero;
    } else {
      double v = 0.0;
      auto res = std::from_chars(location.data(), location.data() + location.size(), v);
      if (res.ec != std::errc{} || res.ptr != location.data() + location.size() || !(v >= 0.0))
        throw CLI::ValidationError("--location must be mean-minus-sigma, zero, or a nonnegative number");
      c.location_rule = LocationRule::fixed;
      c.fixed_location = v;
    }
    c.restarts = restarts;
    c.seed = seed;
    c.threads = threads;
    c.validate();
    return c;
  }
};

struct ReachFlags {
  std::string label;
  std::string mode = "probability";

  void add(CLI::App* app) {
    app->add_option("--reach", label, "reduce reaching states labelled LABEL to absorption");
    app->add_option("--reach-mode", mode, "probability | reward")->check(CLI::IsMember({"probability", "reward"}));
  }
};

struct Loaded {
  Dtmc model;
  std::string digest;
};

inline Loaded load_model_file(const std::string& path, const ReachFlags& reach) {
  const std::string text = read_file(path);
  Loaded out{load_model(text), fnv1a_digest(text)};
  if (!reach.label.empty())
    out.model = reach_to_absorption(std::move(out.model), has_label(reach.label),
                                    reach.mode == "reward" ? ReachMode::reward : ReachMode::probability);
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void append(Json& warnings, const std::vector<std::string>& items) {
  for (const auto& w : items) warnings.push_back(w);
}

}  // namespace detail

// Runs one command. The report goes to `out`, a short human summary and all
// diagnostics to `err`. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  using detail::seconds_since;
  const auto t_start = std::chrono::steady_clock::now();

  CLI::App app{"Distributional model checker for discrete-time Markov reward chains", "ermc"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  std::size_t threads = 1;
  app.add_option("--threads", threads, "worker threads for restarts and simulation")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  std::string model_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  auto add_model = [&](CLI::App* sub) { sub->add_option("model", model_path, "model file")->required(); };
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "random seed (default: $ERMC_SEED or 0)")->each([&](const std::string&) {
      seed_given = true;
    });
  };

  auto* validate_cmd = app.add_subcommand("validate", "check a model file against the model invariants");
  add_model(validate_cmd);

  detail::ReachFlags reach;
  std::size_t moments_k = 3;
  std::string moments_rule = "per-order";
  auto* moments_cmd = app.add_subcommand("moments", "exact raw moments of the cumulative reward");
  add_model(moments_cmd);
  moments_cmd->add_option("--k", moments_k, "number of moments")->check(CLI::PositiveNumber);
  moments_cmd->add_option("--standardization", moments_rule, "per-order | paper-literal")
      ->check(CLI::IsMember({"per-order", "paper-literal"}));
  reach.add(moments_cmd);

  detail::FitFlags fit_flags;
  std::string mixture_out;
  auto* fit_cmd = app.add_subcommand("fit", "fit an Erlang mixture to the reward moments");
  add_model(fit_cmd);
  fit_flags.add(fit_cmd);
  add_seed(fit_cmd);
  reach.add(fit_cmd);
  fit_cmd->add_option("-o,--output", mixture_out, "also write the mixture record to this file");

  std::string property;
  std::string orders_text = "2,3";
  double margin = 0.02;
  bool no_fallback = false;
  auto* check_cmd = app.add_subcommand("check", "decide a chance constraint");
  add_model(check_cmd);
  check_cmd->add_option("--property", property, "e.g. 'P[X <= 10] >= 0.9'")->required();
  check_cmd->add_option("--orders", orders_text, "Cantelli orders to try, comma separated");
  check_cmd->add_option("--margin", margin, "marginal band around alpha for fitted decisions")
      ->check(CLI::NonNegativeNumber);
  check_cmd->add_flag("--no-fallback", no_fallback, "stop after the bounds");
  fit_flags.add(check_cmd);
  add_seed(check_cmd);
  reach.add(check_cmd);

  std::size_t runs = 1000000;
  std::size_t max_steps = 1000000;
  std::string samples_out;
  std::string ecdf_out;
  std::size_t ecdf_points = 200;
  auto* sim_cmd = app.add_subcommand("simulate", "Monte Carlo samples of the cumulative reward");
  add_model(sim_cmd);
  sim_cmd->add_option("--runs", runs, "number of runs")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--max-steps", max_steps, "step cap per run")->check(CLI::PositiveNumber);
  sim_cmd->add_option("-o,--output", samples_out, "write samples as single-column CSV");
  sim_cmd->add_option("--ecdf", ecdf_out, "write the empirical CDF on a uniform grid as CSV");
  sim_cmd->add_option("--ecdf-points", ecdf_points, "grid intervals for --ecdf")->check(CLI::PositiveNumber);
  add_seed(sim_cmd);
  reach.add(sim_cmd);

  std::string samples_in;
  std::string mixture_in;
  auto* compare_cmd = app.add_subcommand("compare", "Kolmogorov-Smirnov distance between a mixture and samples");
  compare_cmd->add_option("model", model_path, "model to fit when no --mixture is given");
  compare_cmd->add_option("--samples", samples_in, "sample CSV")->required();
  compare_cmd->add_option("--mixture", mixture_in, "mixture record (JSON)");
  fit_flags.add(compare_cmd);
  add_seed(compare_cmd);
  reach.add(compare_cmd);

  std::string k_range = "3:5";
  std::string n_range = "3:9";
  std::size_t grid_runs = 0;
  auto* grid_cmd = app.add_subcommand("grid", "sweep (K, n) and tabulate runtime, iterations, and KS (also: fit --grid)");
  add_model(grid_cmd);
  grid_cmd->add_option("--k-range", k_range, "moments, lo:hi");
  grid_cmd->add_option("--n-range", n_range, "components, lo:hi");
  grid_cmd->add_option("--samples", samples_in, "sample CSV for the KS column");
  grid_cmd->add_option("--runs", grid_runs, "simulate this many runs for the KS column");
  fit_flags.add(grid_cmd, false);
  add_seed(grid_cmd);
  reach.add(grid_cmd);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    // `fit --grid ...` is spelled `grid ...` internally
    auto sub = std::find(args.begin(), args.end(), "fit");
    if (sub != args.end()) {
      auto flag = std::find(sub, args.end(), "--grid");
      if (flag != args.end()) {
        *sub = "grid";
        args.erase(flag);
      }
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolName << ' ' << kToolVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  Json report;
  report["tool"] = kToolName;
  report["version"] = kToolVersion;
  Json echo{{"name", command}};
  Json timing{{"T_moments", 0.0}, {"T_opt", 0.0}, {"T_total", 0.0}};
  Json warnings = Json::array();
  int code = 0;

  auto finish = [&](Json payload) {
    timing["T_total"] = seconds_since(t_start);
    report["command"] = echo;
    report["timing"] = timing;
    report["payload"] = std::move(payload);
    report["warnings"] = warnings;
    out << report.dump(2) << '\n';
  };

  try {
    if (!seed_given) seed = detail::default_seed();
    if (!reach.label.empty()) echo["reach"] = {{"label", reach.label}, {"mode", reach.mode}};

    if (command == "validate") {
      const std::string text = detail::read_file(model_path);
      report["model_digest"] = fnv1a_digest(text);
      echo["model"] = model_path;
      ParseOptions po;
      po.require_stochastic = false;
      Dtmc d = parse_model(text, po);
      auto r = validate(d);
      finish(to_json(r, d));
      err << (r.ok() ? "model is valid" : "model has " + std::to_string(r.violations.size()) + " violation(s)")
          << '\n';
      for (const auto& v : r.violations) err << "  " << to_string(v.kind) << ": " << v.message << '\n';
      return r.ok() ? 0 : exit_code::fails;
    }

    if (command == "moments") {
      auto loaded = detail::load_model_file(model_path, reach);
      report["model_digest"] = loaded.digest;
      echo["model"] = model_path;
      echo["k"] = moments_k;
      echo["standardization"] = moments_rule;
      const auto rule =
          moments_rule == "paper-literal" ? StandardizationRule::paper_literal : StandardizationRule::per_order;
      auto t0 = std::chrono::steady_clock::now();
      auto rm = reward_moments(loaded.model, moments_k, rule);
      timing["T_moments"] = seconds_since(t0);
      Json payload = to_json(rm.moments);
      payload["expected_steps"] = expected_steps(loaded.model);
      finish(payload);
      err << "mean " << rm.moments.mean() << ", sigma " << rm.moments.sigma << '\n';
      return 0;
    }

    if (command == "fit" || command == "check" || command == "grid" ||
        (command == "compare" && mixture_in.empty())) {
      if (model_path.empty()) throw CLI::ValidationError("compare needs a model or --mixture");
    }

    if (command == "fit") {
      auto loaded = detail::load_model_file(model_path, reach);
      report["model_digest"] = loaded.digest;
      FitConfig cfg = fit_flags.config(seed, threads);
      echo["model"] = model_path;
      echo["config"] = to_json(cfg);
      auto t0 = std::chrono::steady_clock::now();
      auto rm = reward_moments(loaded.model, cfg.moments, cfg.standardization);
      timing["T_moments"] = seconds_since(t0);
      auto fit = fit_mixture(rm.moments, cfg);
      timing["T_opt"] = fit.wall_time;
      detail::append(warnings, fit.warnings);
      Json payload = to_json(fit);
      payload["target_moments"] = rm.moments.raw;
      if (!mixture_out.empty()) {
        std::ofstream f(mixture_out);
        if (!f) throw CLI::ValidationError("cannot write '" + mixture_out + "'");
        f << to_json(fit.mixture).dump(2) << '\n';
      }
      finish(payload);
      err << "fitted " << cfg.components << " components, loss " << fit.loss << ", rate " << fit.mixture.rate
          << '\n';
      return 0;
    }

    if (command == "check") {
      auto loaded = detail::load_model_file(model_path, reach);
      report["model_digest"] = loaded.digest;
      ChanceConstraint c = parse_property(property);
      CheckOptions opt;
      opt.fit = fit_flags.config(seed, threads);
      opt.marginal_margin = margin;
      opt.fallback = !no_fallback;
      opt.orders.clear();
      std::stringstream ss(orders_text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        std::size_t v = 0;
        auto res = std::from_chars(item.data(), item.data() + item.size(), v);
        if (item.empty() || res.ec != std::errc{} || res.ptr != item.data() + item.size() || v < 2)
          throw CLI::ValidationError("--orders must list integers >= 2");
        opt.orders.push_back(v);
      }
      echo["model"] = model_path;
      echo["property"] = c.to_string();
      echo["orders"] = opt.orders;
      echo["margin"] = margin;
      echo["fallback"] = opt.fallback;
      echo["config"] = to_json(opt.fit);
      Verdict v = check_chance_constraint(loaded.model, c, opt);
      timing["T_moments"] = v.t_moments;
      timing["T_opt"] = v.t_opt;
      detail::append(warnings, v.warnings);
      Json payload = to_json(v);
      payload["property"] = c.to_string();
      finish(payload);
      err << c.to_string() << ": " << to_string(v.decision) << " (" << to_string(v.method);
      if (v.method == Method::cantelli && v.cantelli_order) err << " n=" << v.cantelli_order;
      err << ")" << (v.marginal ? ", marginal" : "") << '\n';
      if (v.decision == Decision::fails) return exit_code::fails;
      if (v.decision == Decision::undetermined_by_bound || v.marginal) return exit_code::undetermined;
      return exit_code::holds;
    }

    if (command == "simulate") {
      auto loaded = detail::load_model_file(model_path, reach);
      report["model_digest"] = loaded.digest;
      echo["model"] = model_path;
      echo["runs"] = runs;
      echo["seed"] = seed;
      echo["max_steps"] = max_steps;
      auto e = simulate_rewards(loaded.model, SimulationOptions{runs, seed, max_steps, threads});
      detail::append(warnings, simulation_warnings(e));
      Json payload{{"runs", e.run_count}, {"samples", e.size()}, {"truncated_runs", e.truncated_runs},
                   {"seed", e.seed}};
      if (!e.empty()) {
        payload["mean"] = e.mean();
        payload["moments"] = {e.moment(1), e.moment(2), e.moment(3)};
        payload["min"] = e.samples.front();
        payload["max"] = e.samples.back();
      }
      if (!samples_out.empty()) {
        std::ofstream f(samples_out);
        if (!f) throw CLI::ValidationError("cannot write '" + samples_out + "'");
        write_samples_csv(f, e);
        payload["output"] = samples_out;
      }
      if (!ecdf_out.empty() && !e.empty()) {
        std::ofstream f(ecdf_out);
        if (!f) throw CLI::ValidationError("cannot write '" + ecdf_out + "'");
        write_ecdf_csv(f, e, ecdf_points);
        payload["ecdf"] = ecdf_out;
      }
      finish(payload);
      err << e.size() << " samples, " << e.truncated_runs << " truncated\n";
      return 0;
    }

    if (command == "compare") {
      std::ifstream in(samples_in);
      if (!in) throw CLI::ValidationError("cannot open '" + samples_in + "'");
      EmpiricalDistribution e = read_samples_csv(in);
      echo["samples"] = samples_in;
      ErlangMixture m;
      Json payload;
      if (!mixture_in.empty()) {
        echo["mixture"] = mixture_in;
        Json j;
        try {
          j = Json::parse(detail::read_file(mixture_in));
        } catch (const Json::parse_error& ex) {
          throw ParseError(std::string("mixture file: ") + ex.what(), 0, 0);
        }
        m = mixture_from_json(j);
      } else {
        auto loaded = detail::load_model_file(model_path, reach);
        report["model_digest"] = loaded.digest;
        FitConfig cfg = fit_flags.config(seed, threads);
        echo["model"] = model_path;
        echo["config"] = to_json(cfg);
        auto t0 = std::chrono::steady_clock::now();
        auto rm = reward_moments(loaded.model, cfg.moments, cfg.standardization);
        timing["T_moments"] = seconds_since(t0);
        auto fit = fit_mixture(rm.moments, cfg);
        timing["T_opt"] = fit.wall_time;
        detail::append(warnings, fit.warnings);
        m = fit.mixture;
        payload["fit"] = to_json(fit);
      }
      const double ks = ks_statistic(e, m);
      const double n = static_cast<double>(e.size());
      payload["ks"] = ks;
      payload["samples"] = e.size();
      payload["dkw_bound_0.001"] = std::sqrt(std::log(2.0 / 0.001) / (2.0 * n));
      payload["mixture"] = to_json(m);
      finish(payload);
      err << "D_KS = " << ks << " over " << e.size() << " samples\n";
      return 0;
    }

    if (command == "grid") {
      auto loaded = detail::load_model_file(model_path, reach);
      report["model_digest"] = loaded.digest;
      auto [k_lo, k_hi] = detail::parse_range(k_range, "--k-range");
      auto [n_lo, n_hi] = detail::parse_range(n_range, "--n-range");
      FitConfig base = fit_flags.config(seed, threads);
      echo["model"] = model_path;
      echo["k_range"] = {k_lo, k_hi};
      echo["n_range"] = {n_lo, n_hi};
      echo["config"] = to_json(base);
      std::optional<EmpiricalDistribution> samples;
      if (!samples_in.empty()) {
        std::ifstream in(samples_in);
        if (!in) throw CLI::ValidationError("cannot open '" + samples_in + "'");
        samples = read_samples_csv(in);
        echo["samples"] = samples_in;
      } else if (grid_runs > 0) {
        samples = simulate_rewards(loaded.model, SimulationOptions{grid_runs, seed, 1000000, threads});
        detail::append(warnings, simulation_warnings(*samples));
        echo["runs"] = grid_runs;
      }
      auto t0 = std::chrono::steady_clock::now();
      auto rm = reward_moments(loaded.model, k_hi, base.standardization);
      const double t_moments = seconds_since(t0);
      timing["T_moments"] = t_moments;
      Json rows = Json::array();
      Json times = Json::array();
      double t_opt = 0.0;
      std::optional<Json> best;
      for (std::size_t k = k_lo; k <= k_hi; ++k) {
        for (std::size_t n = n_lo; n <= n_hi; ++n) {
          FitConfig cfg = base;
          cfg.moments = k;
          cfg.components = n;
          auto fit = fit_mixture(rm.moments, cfg);
          t_opt += fit.wall_time;
          Json row{{"K", k}, {"n", n}, {"iterations", fit.iterations}, {"loss", fit.loss},
                   {"converged", fit.converged}, {"mixture", to_json(fit.mixture)}};
          if (samples) row["ks"] = ks_statistic(*samples, fit.mixture);
          for (const auto& w : fit.warnings) warnings.push_back("K=" + std::to_string(k) + " n=" + std::to_string(n) + ": " + w);
          if (samples && (!best || row["ks"].get<double>() < (*best)["ks"].get<double>()))
            best = Json{{"K", k}, {"n", n}, {"ks", row["ks"]}};
          times.push_back({{"K", k}, {"n", n}, {"T_opt", fit.wall_time}, {"T_total", fit.wall_time + t_moments}});
          rows.push_back(std::move(row));
        }
      }
      timing["T_opt"] = t_opt;
      timing["cells"] = times;
      Json payload{{"rows", rows}};
      if (best) payload["best"] = *best;
      finish(payload);
      err << rows.size() << " grid cells";
      if (best) err << ", best KS " << (*best)["ks"].get<double>() << " at K=" << (*best)["K"].get<std::size_t>()
                    << " n=" << (*best)["n"].get<std::size_t>();
      err << '\n';
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const ModelError& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const PreconditionError& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return exit_code::internal;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return exit_code::internal;
  }
  err << "error: unknown command\n";
  return exit_code::usage;
}

}  // namespace ermc
