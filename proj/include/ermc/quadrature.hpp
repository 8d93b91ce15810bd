#pragma once

// Globally adaptive Gauss-Kronrod (7/15) quadrature for scalar or
// Eigen-vector valued integrands.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <queue>
#include <span>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

namespace ermc::quadrature {

inline double magnitude(double v) { return std::abs(v); }
inline double magnitude(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

template <class T>
struct Result {
  T value;
  double error = 0.0;
  std::size_t evaluations = 0;
  bool converged = false;
};

namespace detail {

inline constexpr std::array<double, 8> kronrod_nodes{
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
inline constexpr std::array<double, 8> kronrod_weights{
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
// Gauss weights for the odd-indexed Kronrod nodes 1, 3, 5, 7.
inline constexpr std::array<double, 4> gauss_weights{
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

template <class T>
struct Panel {
  double a, b;
  T value;
  double error;
  bool operator<(const Panel& o) const { return error < o.error; }
};

template <class T, class F>
Panel<T> gk15(F& f, double a, double b) {
  const double center = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  T fc = f(center);
  T kronrod = fc * kronrod_weights[7];
  T gauss = fc * gauss_weights[3];
  for (std::size_t j = 0; j < 7; ++j) {
    const double dx = half * kronrod_nodes[j];
    T f1 = f(center - dx);
    T f2 = f(center + dx);
    T sum = f1 + f2;
    kronrod = kronrod + sum * kronrod_weights[j];
    if (j % 2 == 1) gauss = gauss + sum * gauss_weights[j / 2];
  }
  T value = kronrod * half;
  double error = magnitude(T((kronrod - gauss) * half));
  return {a, b, value, error};
}

}  // namespace detail

// Integrates f over [breakpoints.front(), breakpoints.back()], starting from
// one panel per breakpoint interval and bisecting the worst panel until the
// summed error estimate is below max(abs_tol, rel_tol * |I|).
template <class F>
auto integrate(F&& f, std::span<const double> breakpoints, double abs_tol, double rel_tol = 0.0,
               std::size_t max_panels = 4000) {
  using T = std::decay_t<std::invoke_result_t<F&, double>>;
  std::priority_queue<detail::Panel<T>> panels;
  std::size_t evaluations = 0;
  for (std::size_t i = 0; i + 1 < breakpoints.size(); ++i) {
    if (!(breakpoints[i + 1] > breakpoints[i])) continue;
    panels.push(detail::gk15<T>(f, breakpoints[i], breakpoints[i + 1]));
    evaluations += 15;
  }

  auto totals = [&]() {
    auto copy = panels;
    T value = copy.top().value;
    double error = copy.top().error;
    copy.pop();
    while (!copy.empty()) {
      value = value + copy.top().value;
      error += copy.top().error;
      copy.pop();
    }
    return std::pair<T, double>{value, error};
  };

  Result<T> result{};
  if (panels.empty()) {
    result.value = T(f(breakpoints.empty() ? 0.0 : breakpoints.front()) * 0.0);
    result.converged = true;
    return result;
  }

  double error = 0.0;
  T value{};
  {
    auto [v, e] = totals();
    value = v;
    error = e;
  }
  while (error > std::max(abs_tol, rel_tol * magnitude(value)) && panels.size() < max_panels) {
    auto worst = panels.top();
    const double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) break;  // panel no longer divisible
    panels.pop();
    auto left = detail::gk15<T>(f, worst.a, mid);
    auto right = detail::gk15<T>(f, mid, worst.b);
    evaluations += 30;
    value = value - worst.value + left.value + right.value;
    error += left.error + right.error - worst.error;
    panels.push(std::move(left));
    panels.push(std::move(right));
    if (panels.size() % 64 == 0) {
      auto [v, e] = totals();  // resync accumulated sums
      value = v;
      error = e;
    }
  }
  auto [v, e] = totals();
  result.value = v;
  result.error = e;
  result.evaluations = evaluations;
  result.converged = e <= std::max(abs_tol, rel_tol * magnitude(v));
  return result;
}

template <class F>
auto integrate(F&& f, double a, double b, double abs_tol, double rel_tol = 0.0,
               std::size_t max_panels = 4000) {
  std::array<double, 2> pts{a, b};
  return integrate(std::forward<F>(f), std::span<const double>(pts), abs_tol, rel_tol, max_panels);
}

}  // namespace ermc::quadrature
