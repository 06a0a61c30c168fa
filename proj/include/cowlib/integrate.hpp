#pragma once

// Globally adaptive Gauss-Kronrod (7/15) quadrature for scalar and
// vector-valued integrands on a finite interval.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <queue>
#include <span>
#include <vector>

#include "cowlib/core.hpp"

namespace cowlib {

class IntegrationError : public Error {
 public:
  IntegrationError(const std::string& what, std::vector<double> best, double err)
      : Error(what), best_(std::move(best)), error_(err) {}
  /// Estimate reached before giving up (one entry per integrand component).
  const std::vector<double>& best_estimate() const noexcept { return best_; }
  double error_estimate() const noexcept { return error_; }

 private:
  std::vector<double> best_;
  double error_;
};

struct QuadratureOptions {
  double tol = 1e-9;            // absolute, summed over subintervals
  std::size_t max_subdivisions = std::size_t{1} << 15;
};

namespace detail {

inline constexpr std::array<double, 8> kronrod_nodes = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};

inline constexpr std::array<double, 8> kronrod_weights = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};

// Gauss weights for the nodes kronrod_nodes[1], [3], [5], [7].
inline constexpr std::array<double, 4> gauss_weights = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

struct Segment {
  double a, b;
  std::vector<double> value;
  double error;
  bool operator<(const Segment& o) const { return error < o.error; }
};

// One 15-point rule application; the integrand writes dim values per abscissa.
template <class F>
Segment gk15(F& f, std::size_t dim, double a, double b, std::vector<double>& fbuf) {
  constexpr double epmach = std::numeric_limits<double>::epsilon();
  const double centre = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  // fbuf layout: 15 rows of dim values; row 0 is the centre.
  fbuf.resize(15 * dim);
  f(centre, std::span<double>(fbuf.data(), dim));
  for (int j = 0; j < 7; ++j) {
    const double dx = half * kronrod_nodes[j];
    f(centre - dx, std::span<double>(fbuf.data() + (1 + 2 * j) * dim, dim));
    f(centre + dx, std::span<double>(fbuf.data() + (2 + 2 * j) * dim, dim));
  }
  Segment seg{a, b, std::vector<double>(dim), 0.0};
  for (std::size_t c = 0; c < dim; ++c) {
    const double fc = fbuf[c];
    double resk = kronrod_weights[7] * fc;
    double resg = gauss_weights[3] * fc;
    double resabs = std::abs(resk);
    for (int j = 0; j < 7; ++j) {
      const double f1 = fbuf[(1 + 2 * j) * dim + c];
      const double f2 = fbuf[(2 + 2 * j) * dim + c];
      resk += kronrod_weights[j] * (f1 + f2);
      resabs += kronrod_weights[j] * (std::abs(f1) + std::abs(f2));
      if (j % 2 == 1) resg += gauss_weights[j / 2] * (f1 + f2);
    }
    const double reskh = 0.5 * resk;
    double resasc = kronrod_weights[7] * std::abs(fc - reskh);
    for (int j = 0; j < 7; ++j) {
      resasc += kronrod_weights[j] * (std::abs(fbuf[(1 + 2 * j) * dim + c] - reskh) +
                                      std::abs(fbuf[(2 + 2 * j) * dim + c] - reskh));
    }
    double err = std::abs((resk - resg) * half);
    resasc *= std::abs(half);
    resabs *= std::abs(half);
    if (resasc != 0.0 && err != 0.0) err = resasc * std::min(1.0, std::pow(200.0 * err / resasc, 1.5));
    if (resabs > std::numeric_limits<double>::min() / (50.0 * epmach))
      err = std::max(50.0 * epmach * resabs, err);
    seg.value[c] = resk * half;
    seg.error = std::max(seg.error, err);
  }
  return seg;
}

}  // namespace detail

/// Integrates a vector-valued function f(x, out) over iv. Each component meets
/// the absolute tolerance. Breakpoints inside iv (e.g. known discontinuities)
/// seed the initial partition.
template <class F>
std::vector<double> integrate_vector(F&& f, std::size_t dim, const Interval& iv,
                                     const QuadratureOptions& opt = {},
                                     std::span<const double> breakpoints = {}) {
  if (!(opt.tol > 0.0)) throw InvalidArgument("quadrature tolerance must be positive");
  std::vector<double> cuts{iv.lo};
  for (double b : breakpoints)
    if (b > iv.lo && b < iv.hi) cuts.push_back(b);
  cuts.push_back(iv.hi);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  std::vector<double> fbuf;
  std::priority_queue<detail::Segment> queue;
  std::vector<double> total(dim, 0.0);
  double total_error = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    auto seg = detail::gk15(f, dim, cuts[i], cuts[i + 1], fbuf);
    for (std::size_t c = 0; c < dim; ++c) total[c] += seg.value[c];
    total_error += seg.error;
    queue.push(std::move(seg));
  }
  for (double v : total)
    if (!std::isfinite(v)) throw NonFiniteError("integrand is not finite on the interval");

  std::size_t n_segments = queue.size();
  while (total_error > opt.tol) {
    if (n_segments >= opt.max_subdivisions) {
      // Re-sum from the queue for the best available estimate.
      std::vector<double> best(dim, 0.0);
      auto q = queue;
      while (!q.empty()) {
        for (std::size_t c = 0; c < dim; ++c) best[c] += q.top().value[c];
        q.pop();
      }
      throw IntegrationError(
          detail::concat("quadrature did not reach tolerance ", opt.tol, " after ", n_segments,
                         " subdivisions (error estimate ", total_error, ")"),
          std::move(best), total_error);
    }
    detail::Segment worst = queue.top();
    queue.pop();
    const double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) {
      // Cannot split further; accept the segment as is.
      total_error -= worst.error;
      worst.error = 0.0;
      queue.push(std::move(worst));
      continue;
    }
    auto left = detail::gk15(f, dim, worst.a, mid, fbuf);
    auto right = detail::gk15(f, dim, mid, worst.b, fbuf);
    for (std::size_t c = 0; c < dim; ++c)
      total[c] += left.value[c] + right.value[c] - worst.value[c];
    total_error += left.error + right.error - worst.error;
    queue.push(std::move(left));
    queue.push(std::move(right));
    ++n_segments;
  }
  // Final sum from segments to avoid drift from incremental updates.
  std::vector<double> result(dim, 0.0);
  std::vector<NeumaierSum> sums(dim);
  while (!queue.empty()) {
    for (std::size_t c = 0; c < dim; ++c) sums[c] += queue.top().value[c];
    queue.pop();
  }
  for (std::size_t c = 0; c < dim; ++c) result[c] = sums[c].value();
  return result;
}

/// Adaptive quadrature of a scalar function with absolute error <= tol.
template <class F>
double integrate(F&& f, const Interval& iv, double tol = 1e-9,
                 std::span<const double> breakpoints = {}) {
  auto wrapped = [&f](double x, std::span<double> out) { out[0] = f(x); };
  QuadratureOptions opt;
  opt.tol = tol;
  return integrate_vector(wrapped, 1, iv, opt, breakpoints)[0];
}

}  // namespace cowlib
