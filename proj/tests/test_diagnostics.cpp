#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cowlib/diagnostics.hpp"
#include "cowlib/rng.hpp"

using namespace cowlib;

namespace {

// O(n^2) tau-b straight from the pair counts
double brute_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  double conc = 0, disc = 0, tx = 0, ty = 0;
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0 && dy == 0) continue;
      if (dx == 0) {
        ++tx;
      } else if (dy == 0) {
        ++ty;
      } else if ((dx > 0) == (dy > 0)) {
        ++conc;
      } else {
        ++disc;
      }
    }
  return (conc - disc) / std::sqrt((conc + disc + tx) * (conc + disc + ty));
}

std::vector<double> uniform_sample(SplitMix64& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform();
  return v;
}

}  // namespace

TEST(KendallTau, PerfectConcordanceAndDiscordance) {
  const std::vector<double> a{1, 2, 3}, b{3, 2, 1};
  EXPECT_DOUBLE_EQ(kendall_tau(a, a).tau, 1.0);
  EXPECT_DOUBLE_EQ(kendall_tau(a, b).tau, -1.0);
  const auto r = kendall_tau(a, b);
  EXPECT_EQ(r.n, 3u);
  EXPECT_NEAR(r.approx_sigma, std::sqrt(2.0 * 11 / (9.0 * 3 * 2)), 1e-15);
}

TEST(KendallTau, MatchesPairCountingWithTies) {
  SplitMix64 rng(1);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 200);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::floor(rng.uniform() * 7);
      y[i] = std::floor(rng.uniform() * 5) + 0.3 * x[i];
    }
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) continue;
    if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) continue;
    EXPECT_NEAR(kendall_tau(x, y).tau, brute_tau_b(x, y), 1e-12) << "n=" << n;
  }
}

TEST(KendallTau, MatchesPairCountingContinuous) {
  SplitMix64 rng(2);
  auto x = uniform_sample(rng, 500);
  auto y = uniform_sample(rng, 500);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += 0.5 * x[i];
  EXPECT_NEAR(kendall_tau(x, y).tau, brute_tau_b(x, y), 1e-12);
}

TEST(KendallTau, InvariantUnderMonotoneTransforms) {
  SplitMix64 rng(3);
  auto x = uniform_sample(rng, 300);
  auto y = uniform_sample(rng, 300);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + x[i] * x[i];
  const double tau = kendall_tau(x, y).tau;
  std::vector<double> fx(x.size()), gy(y.size()), ry(y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    fx[i] = std::exp(3 * x[i]);
    gy[i] = std::atan(y[i]) + y[i];
    ry[i] = -y[i];
  }
  EXPECT_DOUBLE_EQ(kendall_tau(fx, gy).tau, tau);
  EXPECT_DOUBLE_EQ(kendall_tau(x, ry).tau, -tau);
  EXPECT_DOUBLE_EQ(kendall_tau(y, x).tau, tau);
  EXPECT_LE(std::abs(tau), 1.0);
}

TEST(KendallTau, NullFalsePositiveRate) {
  SplitMix64 rng(4);
  int outside = 0;
  const int seeds = 200;
  for (int s = 0; s < seeds; ++s) {
    const auto x = uniform_sample(rng, 10000);
    const auto y = uniform_sample(rng, 10000);
    const auto r = kendall_tau(x, y);
    if (std::abs(r.tau) >= 3 * r.approx_sigma) ++outside;
  }
  EXPECT_LE(outside, seeds / 100);
}

TEST(KendallTau, Errors) {
  const std::vector<double> one{1.0}, two{1.0, 2.0}, three{1, 2, 3}, flat{4, 4, 4};
  EXPECT_THROW(kendall_tau(one, one), InvalidArgument);
  EXPECT_THROW(kendall_tau(two, three), InvalidArgument);
  EXPECT_THROW(kendall_tau(flat, three), InvalidArgument);
  EXPECT_THROW(kendall_tau(three, flat), InvalidArgument);
}

TEST(Pull, Values) {
  EXPECT_DOUBLE_EQ(pull(2.0, 2.0, 0.1), 0.0);
  EXPECT_NEAR(pull(2.1, 2.0, 0.1), 1.0, 1e-12);
  EXPECT_THROW(pull(1.0, 1.0, 0.0), InvalidArgument);
  EXPECT_THROW(pull(1.0, 1.0, NAN), InvalidArgument);
}

TEST(Pull, CalibratedEstimatorEnsemble) {
  SplitMix64 rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> pulls;
  for (int i = 0; i < 2000; ++i) {
    // sample mean of 25 unit normals around 3 with its known error
    double m = 0;
    for (int k = 0; k < 25; ++k) m += (3.0 + gauss(rng)) / 25;
    pulls.push_back(pull(m, 3.0, 0.2));
  }
  const auto s = summarize(pulls);
  EXPECT_NEAR(s.mean, 0.0, 3 * s.mean_error);
  EXPECT_NEAR(s.stddev, 1.0, 3 * s.stddev_error);
}

TEST(Summarize, SmallSamples) {
  EXPECT_EQ(summarize(std::vector<double>{}).n, 0u);
  const auto one = summarize(std::vector<double>{4.0});
  EXPECT_DOUBLE_EQ(one.mean, 4.0);
  EXPECT_DOUBLE_EQ(one.stddev, 0.0);
  const auto s = summarize(std::vector<double>{1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.stddev, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_NEAR(s.mean_error, std::sqrt(5.0 / 3.0) / 2.0, 1e-15);
}
