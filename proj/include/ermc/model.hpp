#pragma once

// Discrete-time Markov chains with state rewards, the model file reader,
// structural validation, and the transformations that reduce reachability
// and reward queries to cumulative reward until absorption.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ermc/errors.hpp"

namespace ermc {

using StateIndex = std::size_t;

inline constexpr double kStochasticTolerance = 1e-9;

struct Edge {
  StateIndex to = 0;
  double probability = 0.0;
  // Reward earned when the transition is taken. Eliminated by
  // normalize_transition_rewards before any numerical analysis.
  std::optional<double> reward;

  friend bool operator==(const Edge&, const Edge&) = default;
};

struct State {
  std::string name;
  double reward = 0.0;
  bool absorbing = false;
  std::set<std::string> labels;

  friend bool operator==(const State&, const State&) = default;
};

struct Dtmc {
  std::vector<State> states;
  // rows[i] holds the outgoing edges of states[i] in declaration order.
  std::vector<std::vector<Edge>> rows;
  StateIndex initial = 0;

  std::size_t size() const noexcept { return states.size(); }

  std::size_t transition_count() const noexcept {
    std::size_t n = 0;
    for (const auto& row : rows) n += row.size();
    return n;
  }

  std::optional<StateIndex> find(std::string_view name) const {
    for (StateIndex i = 0; i < states.size(); ++i)
      if (states[i].name == name) return i;
    return std::nullopt;
  }

  bool has_transition_rewards() const {
    for (const auto& row : rows)
      for (const auto& e : row)
        if (e.reward) return true;
    return false;
  }

  std::vector<StateIndex> absorbing_states() const {
    std::vector<StateIndex> out;
    for (StateIndex i = 0; i < states.size(); ++i)
      if (states[i].absorbing) out.push_back(i);
    return out;
  }

  friend bool operator==(const Dtmc&, const Dtmc&) = default;
};

// ---------------------------------------------------------------------------
// Graph helpers
// ---------------------------------------------------------------------------

// States from which some absorbing state is reachable along positive edges.
inline std::vector<bool> reaches_absorption(const Dtmc& d) {
  const std::size_t n = d.size();
  std::vector<std::vector<StateIndex>> reverse(n);
  for (StateIndex s = 0; s < n; ++s)
    for (const auto& e : d.rows[s])
      if (e.probability > 0.0 && e.to < n) reverse[e.to].push_back(s);

  std::vector<bool> seen(n, false);
  std::deque<StateIndex> queue;
  for (StateIndex s = 0; s < n; ++s)
    if (d.states[s].absorbing) {
      seen[s] = true;
      queue.push_back(s);
    }
  while (!queue.empty()) {
    StateIndex s = queue.front();
    queue.pop_front();
    for (StateIndex p : reverse[s])
      if (!seen[p]) {
        seen[p] = true;
        queue.push_back(p);
      }
  }
  return seen;
}

inline std::vector<bool> reachable_from_initial(const Dtmc& d) {
  const std::size_t n = d.size();
  std::vector<bool> seen(n, false);
  if (d.initial >= n) return seen;
  std::deque<StateIndex> queue{d.initial};
  seen[d.initial] = true;
  while (!queue.empty()) {
    StateIndex s = queue.front();
    queue.pop_front();
    if (d.states[s].absorbing) continue;
    for (const auto& e : d.rows[s])
      if (e.probability > 0.0 && e.to < n && !seen[e.to]) {
        seen[e.to] = true;
        queue.push_back(e.to);
      }
  }
  return seen;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

enum class ViolationKind {
  empty_model,
  initial_out_of_range,
  target_out_of_range,
  invalid_probability,
  duplicate_transition,
  row_not_stochastic,
  negative_reward,
  non_finite_reward,
  absorbing_without_self_loop,
  no_absorbing_state,
  non_absorbing_recurrent_class,
};

inline std::string_view to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::empty_model: return "empty model";
    case ViolationKind::initial_out_of_range: return "initial state out of range";
    case ViolationKind::target_out_of_range: return "transition target out of range";
    case ViolationKind::invalid_probability: return "invalid probability";
    case ViolationKind::duplicate_transition: return "duplicate transition";
    case ViolationKind::row_not_stochastic: return "row not stochastic";
    case ViolationKind::negative_reward: return "negative reward";
    case ViolationKind::non_finite_reward: return "non-finite reward";
    case ViolationKind::absorbing_without_self_loop: return "absorbing state without single self-loop";
    case ViolationKind::no_absorbing_state: return "no absorbing state";
    case ViolationKind::non_absorbing_recurrent_class: return "non-absorbing recurrent class";
  }
  return "unknown";
}

struct Violation {
  ViolationKind kind;
  std::optional<StateIndex> state;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
  bool has(ViolationKind k) const {
    return std::any_of(violations.begin(), violations.end(),
                       [k](const Violation& v) { return v.kind == k; });
  }
};

inline ValidationReport validate(const Dtmc& d) {
  ValidationReport report;
  auto add = [&](ViolationKind kind, std::optional<StateIndex> s, std::string detail) {
    std::string msg(to_string(kind));
    if (s) msg += " at state '" + d.states[*s].name + "'";
    if (!detail.empty()) msg += ": " + detail;
    report.violations.push_back({kind, s, std::move(msg)});
  };

  const std::size_t n = d.size();
  if (n == 0) {
    add(ViolationKind::empty_model, std::nullopt, "");
    return report;
  }
  if (d.rows.size() != n) {
    add(ViolationKind::empty_model, std::nullopt, "row table does not match state count");
    return report;
  }
  if (d.initial >= n) add(ViolationKind::initial_out_of_range, std::nullopt, "");

  bool any_absorbing = false;
  for (StateIndex s = 0; s < n; ++s) {
    const State& st = d.states[s];
    if (!std::isfinite(st.reward))
      add(ViolationKind::non_finite_reward, s, "");
    else if (st.reward < 0.0)
      add(ViolationKind::negative_reward, s, std::to_string(st.reward));

    double sum = 0.0;
    std::set<StateIndex> targets;
    for (const auto& e : d.rows[s]) {
      if (e.to >= n) {
        add(ViolationKind::target_out_of_range, s, std::to_string(e.to));
        continue;
      }
      if (!std::isfinite(e.probability) || e.probability < 0.0 || e.probability > 1.0)
        add(ViolationKind::invalid_probability, s, "to '" + d.states[e.to].name + "'");
      if (!targets.insert(e.to).second)
        add(ViolationKind::duplicate_transition, s, "to '" + d.states[e.to].name + "'");
      if (e.reward && (!std::isfinite(*e.reward) || *e.reward < 0.0))
        add(ViolationKind::negative_reward, s, "transition to '" + d.states[e.to].name + "'");
      sum += e.probability;
    }
    if (std::abs(sum - 1.0) > kStochasticTolerance) {
      std::ostringstream os;
      os.precision(17);
      os << "sums to " << sum;
      add(ViolationKind::row_not_stochastic, s, os.str());
    }
    if (st.absorbing) {
      any_absorbing = true;
      const auto& row = d.rows[s];
      bool single_loop = row.size() == 1 && row[0].to == s &&
                         std::abs(row[0].probability - 1.0) <= kStochasticTolerance;
      if (!single_loop) add(ViolationKind::absorbing_without_self_loop, s, "");
    }
  }
  if (!any_absorbing) {
    add(ViolationKind::no_absorbing_state, std::nullopt, "");
    return report;
  }

  auto reaches = reaches_absorption(d);
  for (StateIndex s = 0; s < n; ++s)
    if (!reaches[s])
      add(ViolationKind::non_absorbing_recurrent_class, s, "no absorbing state is reachable");
  return report;
}

// Throws ModelError listing every violation.
inline void require_valid(const Dtmc& d) {
  auto report = validate(d);
  if (report.ok()) return;
  std::string msg = "invalid model:";
  for (const auto& v : report.violations) msg += "\n  " + v.message;
  throw ModelError(msg);
}

// ---------------------------------------------------------------------------
// Model file reader
// ---------------------------------------------------------------------------

struct ParseOptions {
  // Reject rows whose probabilities do not sum to one. Turned off by callers
  // that want to report such problems through validate() instead.
  bool require_stochastic = true;
};

namespace detail {

struct Token {
  std::string_view text;
  std::size_t column;  // 1-based
};

inline std::vector<Token> tokenize(std::string_view line) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    if (i >= line.size()) break;
    std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    out.push_back({line.substr(start, i - start), start + 1});
  }
  return out;
}

inline double parse_double(std::string_view text, std::size_t line, std::size_t column) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || first == last)
    throw ParseError("malformed number '" + std::string(text) + "'", line, column);
  if (!std::isfinite(value))
    throw ParseError("non-finite number '" + std::string(text) + "'", line, column);
  return value;
}

inline bool valid_name(std::string_view name) {
  if (name.empty()) return false;
  return std::none_of(name.begin(), name.end(), [](char c) { return c == '=' || c == ','; });
}

}  // namespace detail

// Reads the line-oriented `dtmc v1` format:
//
//   dtmc v1
//   state <name> reward=<float> [absorbing] [labels=a,b]
//   trans <from> <to> p=<float> [reward=<float>]
//   initial <name>
//
// '#' starts a comment. References may appear before the state declaration.
// Absorbing states declared without outgoing transitions receive a self-loop;
// a state whose only transition is a probability-one self-loop is absorbing.
inline Dtmc parse_model(std::string_view text, const ParseOptions& options = {}) {
  struct PendingTrans {
    std::string from, to;
    double p;
    std::optional<double> reward;
    std::size_t line, from_col, to_col;
  };

  Dtmc d;
  std::unordered_map<std::string, StateIndex> index;
  std::vector<std::size_t> decl_line;
  std::vector<PendingTrans> pending;
  std::optional<std::pair<std::string, std::pair<std::size_t, std::size_t>>> initial;
  bool header_seen = false;

  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto tokens = detail::tokenize(line);
    if (tokens.empty()) {
      if (end == text.size()) break;
      continue;
    }

    const auto& kw = tokens[0];
    if (!header_seen) {
      if (kw.text != "dtmc")
        throw ParseError("expected header 'dtmc v1'", line_no, kw.column);
      if (tokens.size() != 2 || tokens[1].text != "v1")
        throw ParseError("unsupported model format version", line_no,
                         tokens.size() > 1 ? tokens[1].column : kw.column);
      header_seen = true;
      continue;
    }

    if (kw.text == "state") {
      if (tokens.size() < 2) throw ParseError("state name expected", line_no, kw.column + 5);
      State st;
      st.name = std::string(tokens[1].text);
      if (!detail::valid_name(st.name))
        throw ParseError("invalid state name '" + st.name + "'", line_no, tokens[1].column);
      if (index.count(st.name))
        throw ParseError("duplicate state '" + st.name + "'", line_no, tokens[1].column);
      for (std::size_t t = 2; t < tokens.size(); ++t) {
        auto tok = tokens[t].text;
        if (tok == "absorbing") {
          st.absorbing = true;
        } else if (tok.starts_with("reward=")) {
          st.reward = detail::parse_double(tok.substr(7), line_no, tokens[t].column + 7);
          if (st.reward < 0.0)
            throw ParseError("negative reward", line_no, tokens[t].column + 7);
        } else if (tok.starts_with("labels=")) {
          auto list = tok.substr(7);
          std::size_t p = 0;
          while (p <= list.size()) {
            auto comma = list.find(',', p);
            if (comma == std::string_view::npos) comma = list.size();
            if (comma > p) st.labels.emplace(list.substr(p, comma - p));
            p = comma + 1;
          }
        } else {
          throw ParseError("unknown state attribute '" + std::string(tok) + "'", line_no,
                           tokens[t].column);
        }
      }
      index.emplace(st.name, d.states.size());
      d.states.push_back(std::move(st));
      d.rows.emplace_back();
      decl_line.push_back(line_no);
    } else if (kw.text == "trans") {
      if (tokens.size() < 4)
        throw ParseError("expected 'trans <from> <to> p=<float>'", line_no, kw.column);
      PendingTrans tr{std::string(tokens[1].text), std::string(tokens[2].text), -1.0,
                      std::nullopt, line_no, tokens[1].column, tokens[2].column};
      for (std::size_t t = 3; t < tokens.size(); ++t) {
        auto tok = tokens[t].text;
        if (tok.starts_with("p=")) {
          tr.p = detail::parse_double(tok.substr(2), line_no, tokens[t].column + 2);
          if (tr.p < 0.0) throw ParseError("negative probability", line_no, tokens[t].column + 2);
          if (tr.p > 1.0)
            throw ParseError("probability greater than one", line_no, tokens[t].column + 2);
        } else if (tok.starts_with("reward=")) {
          tr.reward = detail::parse_double(tok.substr(7), line_no, tokens[t].column + 7);
          if (*tr.reward < 0.0)
            throw ParseError("negative reward", line_no, tokens[t].column + 7);
        } else {
          throw ParseError("unknown transition attribute '" + std::string(tok) + "'", line_no,
                           tokens[t].column);
        }
      }
      if (tr.p < 0.0) throw ParseError("missing probability 'p='", line_no, kw.column);
      pending.push_back(std::move(tr));
    } else if (kw.text == "initial") {
      if (tokens.size() != 2) throw ParseError("expected 'initial <name>'", line_no, kw.column);
      if (initial) throw ParseError("initial state declared twice", line_no, kw.column);
      initial = {std::string(tokens[1].text), {line_no, tokens[1].column}};
    } else {
      throw ParseError("unknown keyword '" + std::string(kw.text) + "'", line_no, kw.column);
    }
    if (end == text.size()) break;
  }

  if (!header_seen) throw ParseError("expected header 'dtmc v1'", 1, 1);
  if (d.states.empty()) throw ParseError("model declares no states", 0, 0);

  auto lookup = [&](const std::string& name, std::size_t line, std::size_t col) {
    auto it = index.find(name);
    if (it == index.end()) throw ParseError("unknown state '" + name + "'", line, col);
    return it->second;
  };

  for (const auto& tr : pending) {
    StateIndex from = lookup(tr.from, tr.line, tr.from_col);
    StateIndex to = lookup(tr.to, tr.line, tr.to_col);
    for (const auto& e : d.rows[from])
      if (e.to == to)
        throw ParseError("duplicate transition '" + tr.from + "' -> '" + tr.to + "'", tr.line,
                         tr.from_col);
    d.rows[from].push_back({to, tr.p, tr.reward});
  }

  if (!initial) throw ParseError("missing 'initial <name>' declaration", 0, 0);
  d.initial = lookup(initial->first, initial->second.first, initial->second.second);

  for (StateIndex s = 0; s < d.size(); ++s) {
    auto& row = d.rows[s];
    if (d.states[s].absorbing && row.empty()) row.push_back({s, 1.0, std::nullopt});
    if (!d.states[s].absorbing && row.size() == 1 && row[0].to == s && row[0].probability == 1.0)
      d.states[s].absorbing = true;
  }

  if (options.require_stochastic) {
    for (StateIndex s = 0; s < d.size(); ++s) {
      double sum = 0.0;
      for (const auto& e : d.rows[s]) sum += e.probability;
      if (std::abs(sum - 1.0) > kStochasticTolerance) {
        std::ostringstream os;
        os.precision(17);
        os << "row not stochastic: state '" << d.states[s].name << "' sums to " << sum;
        throw ParseError(os.str(), decl_line[s], 1);
      }
    }
  }
  return d;
}

// Serializes a model back to the file format. Numbers are written with
// round-trip precision.
inline std::string write_model(const Dtmc& d) {
  std::ostringstream os;
  os.precision(17);
  os << "dtmc v1\n";
  for (const auto& st : d.states) {
    os << "state " << st.name << " reward=" << st.reward;
    if (st.absorbing) os << " absorbing";
    if (!st.labels.empty()) {
      os << " labels=";
      bool first = true;
      for (const auto& l : st.labels) {
        if (!first) os << ',';
        os << l;
        first = false;
      }
    }
    os << '\n';
  }
  for (StateIndex s = 0; s < d.size(); ++s)
    for (const auto& e : d.rows[s]) {
      os << "trans " << d.states[s].name << ' ' << d.states[e.to].name << " p=" << e.probability;
      if (e.reward) os << " reward=" << *e.reward;
      os << '\n';
    }
  os << "initial " << d.states[d.initial].name << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Transformations
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fresh_name(const Dtmc& d, std::string base) {
  if (!d.find(base)) return base;
  for (int i = 1;; ++i) {
    std::string candidate = base + "_" + std::to_string(i);
    if (!d.find(candidate)) return candidate;
  }
}

inline StateIndex add_state(Dtmc& d, State st) {
  d.states.push_back(std::move(st));
  d.rows.emplace_back();
  return d.states.size() - 1;
}

}  // namespace detail

// Replaces every rewarded transition (s, p/r, s') by (s, p, q), (q, 1, s')
// with a fresh state q carrying state reward r. Zero-reward annotations are
// dropped, as are annotations on absorbing self-loops (never taken before
// absorption).
inline Dtmc normalize_transition_rewards(Dtmc d) {
  const std::size_t original = d.size();
  for (StateIndex s = 0; s < original; ++s) {
    for (std::size_t k = 0; k < d.rows[s].size(); ++k) {
      Edge e = d.rows[s][k];
      if (!e.reward) continue;
      if (d.states[s].absorbing || *e.reward == 0.0) {
        d.rows[s][k].reward.reset();
        continue;
      }
      State q;
      q.name = detail::fresh_name(d, d.states[s].name + "~" + d.states[e.to].name);
      q.reward = *e.reward;
      StateIndex qi = detail::add_state(d, std::move(q));
      d.rows[qi].push_back({e.to, 1.0, std::nullopt});
      d.rows[s][k] = {qi, e.probability, std::nullopt};
    }
  }
  return d;
}

enum class ReachMode { probability, reward };

using LabelPredicate = std::function<bool(const std::set<std::string>&)>;

inline LabelPredicate has_label(std::string label) {
  return [label = std::move(label)](const std::set<std::string>& labels) {
    return labels.count(label) > 0;
  };
}

// Makes every phi-state absorbing. In probability mode rewards are rewritten
// so the cumulative reward is the indicator of ever entering a phi-state:
// each phi-state reachable by a transition gets a fresh transient gate state
// with reward 1 on the way in, and a phi initial state is preceded by a fresh
// rewarded entry state.
inline Dtmc reach_to_absorption(Dtmc d, const LabelPredicate& phi, ReachMode mode) {
  if (d.has_transition_rewards() && mode == ReachMode::reward)
    d = normalize_transition_rewards(std::move(d));

  const std::size_t original = d.size();
  std::vector<bool> target(original, false);
  bool any = false;
  for (StateIndex s = 0; s < original; ++s) {
    target[s] = phi(d.states[s].labels);
    any = any || target[s];
  }
  if (!any) throw PreconditionError("no state satisfies the target predicate");

  for (StateIndex s = 0; s < original; ++s) {
    if (!target[s]) continue;
    const auto& row = d.rows[s];
    bool already = d.states[s].absorbing && row.size() == 1 && row[0].to == s && !row[0].reward;
    if (already) continue;
    d.states[s].absorbing = true;
    d.rows[s] = {Edge{s, 1.0, std::nullopt}};
  }
  if (mode == ReachMode::reward) return d;

  for (auto& st : d.states) st.reward = 0.0;
  for (auto& row : d.rows)
    for (auto& e : row) e.reward.reset();

  std::vector<std::optional<StateIndex>> gate(original);
  for (StateIndex s = 0; s < original; ++s) {
    if (target[s] || d.states[s].absorbing) continue;
    for (auto& e : d.rows[s]) {
      if (e.to >= original || !target[e.to]) continue;
      if (!gate[e.to]) {
        State g;
        g.name = detail::fresh_name(d, "enter~" + d.states[e.to].name);
        g.reward = 1.0;
        StateIndex gi = detail::add_state(d, std::move(g));
        d.rows[gi].push_back({e.to, 1.0, std::nullopt});
        gate[e.to] = gi;
      }
      e.to = *gate[e.to];
    }
  }
  if (d.initial < original && target[d.initial]) {
    State entry;
    entry.name = detail::fresh_name(d, "entry~" + d.states[d.initial].name);
    entry.reward = 1.0;
    StateIndex ei = detail::add_state(d, std::move(entry));
    d.rows[ei].push_back({d.initial, 1.0, std::nullopt});
    d.initial = ei;
  }
  return d;
}

// Number of unit steps representing reward r at resolution delta:
// ceil(r / delta), snapping quotients within 1e-9 (relative) of an integer
// so exact multiples of delta stay exact.
inline std::size_t discretization_steps(double reward, double delta) {
  if (reward <= 0.0) return 1;
  double q = reward / delta;
  double nearest = std::round(q);
  if (std::abs(q - nearest) <= 1e-9 * std::max(1.0, q))
    return static_cast<std::size_t>(std::max(1.0, nearest));
  return static_cast<std::size_t>(std::ceil(q));
}

// Rewrites rewards onto the grid delta * N. A transient state with reward r
// becomes a chain of k = ceil(r/delta) states each earning delta; the last
// state of the chain carries the original outgoing transitions. Zero-reward
// states stay single states with reward 0. Original states keep their
// indices; chain states are appended.
inline Dtmc discretize_rewards(const Dtmc& input, double delta) {
  if (!(delta > 0.0) || !std::isfinite(delta))
    throw PreconditionError("discretization step must be positive");
  Dtmc d = input.has_transition_rewards() ? normalize_transition_rewards(input) : input;

  const std::size_t original = d.size();
  for (StateIndex s = 0; s < original; ++s) {
    if (d.states[s].absorbing) {
      d.states[s].reward = 0.0;
      continue;
    }
    double r = d.states[s].reward;
    if (r <= 0.0) {
      d.states[s].reward = 0.0;
      continue;
    }
    std::size_t k = discretization_steps(r, delta);
    d.states[s].reward = delta;
    if (k == 1) continue;

    std::vector<Edge> outgoing = std::move(d.rows[s]);
    StateIndex prev = s;
    for (std::size_t j = 1; j < k; ++j) {
      State link;
      link.name = detail::fresh_name(d, d.states[s].name + "#" + std::to_string(j));
      link.reward = delta;
      StateIndex li = detail::add_state(d, std::move(link));
      d.rows[prev] = {Edge{li, 1.0, std::nullopt}};
      prev = li;
    }
    d.rows[prev] = std::move(outgoing);
  }
  return d;
}

// Reads a model and eliminates transition rewards unless asked not to.
inline Dtmc load_model(std::string_view text, bool keep_transition_rewards = false,
                       const ParseOptions& options = {}) {
  Dtmc d = parse_model(text, options);
  if (!keep_transition_rewards && d.has_transition_rewards())
    d = normalize_transition_rewards(std::move(d));
  return d;
}

}  // namespace ermc
