#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "ermc/model.hpp"

namespace ermc::fixtures {

inline std::string model_path(const std::string& name) { return std::string(ERMC_MODELS_DIR) + "/" + name; }

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline Dtmc bundled(const std::string& name) { return load_model(read_text(model_path(name))); }

// Random absorbing chain: every transient state has 1-3 successors, one of
// which is strictly "later" in a hidden order or absorbing, so absorption is
// reachable from everywhere.
inline Dtmc random_model(std::uint64_t seed, std::size_t transient, double exit_bias = 0.25) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Dtmc d;
  for (std::size_t i = 0; i < transient; ++i) {
    State s;
    s.name = "s" + std::to_string(i);
    s.reward = std::round(u(g) * 400.0) / 100.0;
    if (i % 3 == 0) s.labels.insert("odd");
    d.states.push_back(s);
  }
  State goal;
  goal.name = "goal";
  goal.absorbing = true;
  goal.labels.insert("goal");
  d.states.push_back(goal);
  const std::size_t absorbing = transient;
  d.rows.resize(transient + 1);
  d.rows[absorbing] = {Edge{absorbing, 1.0, std::nullopt}};
  for (std::size_t i = 0; i < transient; ++i) {
    std::map<std::size_t, double> w;
    const std::size_t forward = i + 1 < transient && u(g) > exit_bias ? i + 1 + g() % (transient - i - 1) : absorbing;
    w[forward] += 0.2 + u(g);
    const std::size_t extra = 1 + g() % 2;
    for (std::size_t e = 0; e < extra; ++e) w[g() % (transient + 1)] += 0.1 + u(g);
    double total = 0.0;
    for (auto& [to, p] : w) total += p;
    double acc = 0.0;
    std::size_t k = 0;
    for (auto& [to, p] : w) {
      double q = ++k == w.size() ? 1.0 - acc : p / total;
      acc += q;
      d.rows[i].push_back(Edge{to, q, std::nullopt});
    }
  }
  d.initial = 0;
  return d;
}

}  // namespace ermc::fixtures
