#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "cowlib/core.hpp"

namespace cowlib {

struct IndependenceReport {
  double tau = 0.0;
  std::size_t n = 0;
  double approx_sigma = 0.0;  // standard deviation of tau under independence
};

namespace detail {

// Stable merge sort of v counting the exchanges needed (inversions).
inline std::uint64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += mid - i;
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

template <class Eq>
std::uint64_t tied_pairs(std::size_t n, Eq&& same_as_previous) {
  std::uint64_t total = 0, run = 1;
  for (std::size_t i = 1; i < n; ++i) {
    if (same_as_previous(i)) {
      ++run;
    } else {
      total += run * (run - 1) / 2;
      run = 1;
    }
  }
  return total + run * (run - 1) / 2;
}

}  // namespace detail

/// Kendall's tau-b with tie correction, O(n log n).
inline IndependenceReport kendall_tau(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("x and y differ in length");
  const std::size_t n = x.size();
  if (n < 2) throw InvalidArgument("Kendall tau needs at least two pairs");
  for (std::size_t i = 0; i < n; ++i)
    if (std::isnan(x[i]) || std::isnan(y[i])) throw InvalidArgument(detail::concat("NaN in pair ", i));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[order[i]];
    ys[i] = y[order[i]];
  }
  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t ties_x = detail::tied_pairs(n, [&](std::size_t i) { return xs[i] == xs[i - 1]; });
  const std::uint64_t ties_xy =
      detail::tied_pairs(n, [&](std::size_t i) { return xs[i] == xs[i - 1] && ys[i] == ys[i - 1]; });
  std::vector<double> buf(n);
  const std::uint64_t swaps = detail::merge_count(ys, buf, 0, n);
  const std::uint64_t ties_y = detail::tied_pairs(n, [&](std::size_t i) { return ys[i] == ys[i - 1]; });

  const double denom = std::sqrt(static_cast<double>(n0 - ties_x) * static_cast<double>(n0 - ties_y));
  if (!(denom > 0.0)) throw InvalidArgument("Kendall tau is undefined when one variable is constant");
  const double numer = static_cast<double>(n0) - static_cast<double>(ties_x) - static_cast<double>(ties_y) +
                       static_cast<double>(ties_xy) - 2.0 * static_cast<double>(swaps);
  IndependenceReport r;
  r.tau = std::clamp(numer / denom, -1.0, 1.0);
  r.n = n;
  const double nn = static_cast<double>(n);
  r.approx_sigma = std::sqrt(2.0 * (2.0 * nn + 5.0) / (9.0 * nn * (nn - 1.0)));
  return r;
}

inline double pull(double estimate, double truth, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument(detail::concat("pull needs sigma > 0, got ", sigma));
  return (estimate - truth) / sigma;
}

/// Mean, standard deviation and their standard errors of a sample.
struct SampleSummary {
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double mean_error = 0.0;
  double stddev_error = 0.0;
};

inline SampleSummary summarize(std::span<const double> v) {
  SampleSummary s;
  s.n = v.size();
  if (v.empty()) return s;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  s.mean = mean;
  if (v.size() > 1) {
    const double nn = static_cast<double>(v.size());
    s.stddev = std::sqrt(ss / (nn - 1.0));
    s.mean_error = s.stddev / std::sqrt(nn);
    s.stddev_error = s.stddev / std::sqrt(2.0 * (nn - 1.0));
  }
  return s;
}

}  // namespace cowlib
