#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cowlib/density.hpp"
#include "cowlib/integrate.hpp"
#include "cowlib/rng.hpp"

using namespace cowlib;

namespace {

double total_mass(const Density1D& d, double tol = 1e-10) {
  const auto bp = d.breakpoints();
  return integrate([&](double x) { return d(x); }, d.support(), tol, bp);
}

}  // namespace

TEST(Integrate, Constant) { EXPECT_NEAR(integrate([](double) { return 1.0; }, Interval(0, 1), 1e-10), 1.0, 1e-12); }

TEST(Integrate, LinearDensity) {
  EXPECT_NEAR(integrate([](double x) { return 2.0 * x; }, Interval(0, 1), 1e-10), 1.0, 1e-12);
}

TEST(Integrate, PiecewiseUniformRatio) {
  // g_s = 2 on [0, 1/2), g_b = 1, g = (g_s + g_b)/2; g_s^2/g = 8/3 on the left half.
  auto f = [](double m) {
    const double gs = m < 0.5 ? 2.0 : 0.0;
    const double g = 0.5 * gs + 0.5;
    return gs * gs / g;
  };
  const double bp[] = {0.5};
  EXPECT_NEAR(integrate(f, Interval(0, 1), 1e-12, bp), 4.0 / 3.0, 1e-12);
}

TEST(Integrate, OscillatoryAgainstClosedForm) {
  const double v = integrate([](double x) { return std::sin(50.0 * x) * std::exp(-x); }, Interval(0, 3), 1e-11);
  // Im of the integral of exp((-1 + 50i) x) over [0, 3]
  const double a = -1.0, b = 50.0;
  const double e = std::exp(3 * a);
  const double re = e * std::cos(3 * b), im = e * std::sin(3 * b);
  const double oracle = (a * im - b * re + b) / (a * a + b * b);
  EXPECT_NEAR(v, oracle, 1e-10);
}

TEST(Integrate, FailureCarriesBestEstimate) {
  QuadratureOptions opt;
  opt.tol = 1e-14;
  opt.max_subdivisions = 4;
  auto f = [](double x, std::span<double> out) { out[0] = 1.0 / std::sqrt(x); };
  try {
    integrate_vector(f, 1, Interval(0, 1), opt);
    FAIL() << "expected IntegrationError";
  } catch (const IntegrationError& e) {
    ASSERT_EQ(e.best_estimate().size(), 1u);
    EXPECT_GT(e.best_estimate()[0], 1.0);
    EXPECT_LT(e.best_estimate()[0], 2.0);
    EXPECT_GT(e.error_estimate(), 0.0);
  }
}

TEST(Integrate, Deterministic) {
  auto f = [](double x) { return std::exp(std::sin(7 * x)); };
  EXPECT_EQ(integrate(f, Interval(-1, 2), 1e-9), integrate(f, Interval(-1, 2), 1e-9));
}

TEST(Integrate, RejectsBadTolerance) {
  EXPECT_THROW(integrate([](double) { return 1.0; }, Interval(0, 1), 0.0), InvalidArgument);
}

TEST(Interval, Invariants) {
  EXPECT_THROW(Interval(1, 1), InvalidArgument);
  EXPECT_THROW(Interval(2, 1), InvalidArgument);
  EXPECT_THROW(Interval(0, INFINITY), InvalidArgument);
  EXPECT_DOUBLE_EQ(Interval(2, 5).width(), 3.0);
}

TEST(MakeDensity, UniformIsOne) {
  const auto d = make_density(DensityKind::uniform, {}, Interval(0, 1));
  for (double x : {0.0, 0.3, 1.0}) EXPECT_DOUBLE_EQ(d(x), 1.0);
  EXPECT_EQ(d(1.5), 0.0);
}

TEST(MakeDensity, WideNormalApproachesUniform) {
  const std::vector<double> p{0.5, 1e4};
  const auto d = make_density(DensityKind::normal, p, Interval(0, 1));
  for (double x : {0.0, 0.25, 0.5, 1.0}) EXPECT_NEAR(d(x), 1.0, 1e-8);
}

TEST(MakeDensity, TruncatedExponential) {
  const double lam = 1.7;
  const std::vector<double> p{lam};
  const auto d = make_density(DensityKind::exponential, p, Interval(0, 1));
  for (double m : {0.0, 0.2, 0.9})
    EXPECT_NEAR(d(m), lam * std::exp(-lam * m) / (1 - std::exp(-lam)), 1e-14);
}

TEST(MakeDensity, InvalidParams) {
  const std::vector<double> bad_sigma{0.5, 0.0};
  EXPECT_THROW(make_density(DensityKind::normal, bad_sigma, Interval(0, 1)), InvalidArgument);
  const std::vector<double> one{1.0};
  EXPECT_THROW(make_density(DensityKind::normal, one, Interval(0, 1)), InvalidArgument);
  const std::vector<double> neg{-1.0};
  EXPECT_THROW(make_density(DensityKind::monomial, neg, Interval(0, 1)), InvalidArgument);
  EXPECT_THROW(density_kind_from_string("lorentzian"), InvalidArgument);
}

TEST(MonomialBasis, Elements) {
  const auto b1 = monomial_basis(1);
  ASSERT_EQ(b1.size(), 1u);
  EXPECT_DOUBLE_EQ(b1[0](0.3), 1.0);
  EXPECT_DOUBLE_EQ(monomial_basis(2)[1](0.5), 1.0);
  EXPECT_NEAR(total_mass(monomial_basis(3)[2]), 1.0, 1e-12);
  EXPECT_THROW(monomial_basis(0), InvalidArgument);
}

TEST(MonomialBasis, AffineRemap) {
  const auto b = monomial_basis(4, Interval(2, 4));
  for (int k = 1; k <= 4; ++k) {
    const double x = 3.5, u = 0.75;
    EXPECT_NEAR(b[k - 1](x), k * std::pow(u, k - 1) / 2.0, 1e-14);
    EXPECT_NEAR(total_mass(b[k - 1]), 1.0, 1e-11);
    EXPECT_GE(b[k - 1](2.0), 0.0);
  }
}

TEST(BernsteinBasis, PartitionOfUnity) {
  const int n = 5;
  const auto b = bernstein_basis(n, Interval(-1, 3));
  ASSERT_EQ(b.size(), 6u);
  for (double x : {-1.0, 0.1, 1.7, 3.0}) {
    double s = 0.0;
    for (const auto& e : b) s += e(x) / (n + 1);
    EXPECT_NEAR(s, 0.25, 1e-13);
  }
  for (const auto& e : b) EXPECT_NEAR(total_mass(e), 1.0, 1e-11);
  EXPECT_THROW(Density1D::bernstein(3, 2, Interval(0, 1)), InvalidArgument);
}

TEST(DensityProperties, RandomDensitiesNormalized) {
  SplitMix64 rng(42);
  for (int rep = 0; rep < 40; ++rep) {
    const double lo = -2 + 4 * rng.uniform();
    const Interval iv(lo, lo + 0.5 + 3 * rng.uniform());
    std::vector<Density1D> ds{
        Density1D::normal(iv.lo + iv.width() * rng.uniform(), 0.05 + rng.uniform(), iv),
        Density1D::exponential(-5 + 10 * rng.uniform(), iv),
        Density1D::uniform(iv),
        Density1D::monomial(1 + 5 * rng.uniform(), iv),
        Density1D::bernstein(rep % 4, 3, iv),
        Density1D::table({iv.lo, iv.lo + 0.3 * iv.width(), iv.hi}, {rng.uniform(), 1 + rng.uniform(), rng.uniform()}),
        Density1D::histogram({iv.lo, iv.lo + 0.5 * iv.width(), iv.hi}, {rng.uniform(), rng.uniform() + 0.1})};
    ds.push_back(Density1D::mixture({0.3, 0.7}, {ds[0], ds[1]}));
    for (const auto& d : ds) {
      EXPECT_NEAR(total_mass(d, 1e-10), 1.0, 1e-9) << to_string(d.kind());
      for (int i = 0; i <= 20; ++i) EXPECT_GE(d(iv.lo + iv.width() * i / 20.0), 0.0);
      for (double p : {0.1, 0.5, 0.93}) EXPECT_NEAR(d.cdf(d.quantile(p)), p, 1e-9) << to_string(d.kind());
    }
  }
}

TEST(DensityProperties, AnalyticLogGradientMatchesDifferences) {
  const Interval iv(0, 3);
  for (const auto& d : {Density1D::normal(1.2, 0.4, iv), Density1D::exponential(1.3, iv)}) {
    std::vector<double> g(d.n_params());
    for (double x : {0.1, 1.0, 2.7}) {
      d.log_gradient(x, g);
      for (std::size_t j = 0; j < d.n_params(); ++j) {
        std::vector<double> p(d.params().begin(), d.params().end());
        const double h = 1e-6 * std::max(1.0, std::abs(p[j]));
        p[j] += h;
        const double up = std::log(d.with_params(p)(x));
        p[j] -= 2 * h;
        const double dn = std::log(d.with_params(p)(x));
        EXPECT_NEAR(g[j], (up - dn) / (2 * h), 1e-6);
      }
    }
  }
}

TEST(Histogram1D, WeightedFill) {
  auto h = Histogram1D::uniform(4, Interval(0, 1));
  EXPECT_TRUE(h.fill(0.1, 2.0));
  EXPECT_TRUE(h.fill(0.15, -1.0));
  EXPECT_TRUE(h.fill(1.0, 3.0));
  EXPECT_FALSE(h.fill(1.5));
  EXPECT_DOUBLE_EQ(h.contents[0], 1.0);
  EXPECT_DOUBLE_EQ(h.sumw2[0], 5.0);
  EXPECT_DOUBLE_EQ(h.contents[3], 3.0);
  EXPECT_THROW(Histogram1D(std::vector<double>{0.0, 0.0}), InvalidArgument);
}

TEST(HistogramDensity, SingleBinIsUniform) {
  SplitMix64 rng(3);
  std::vector<double> x(1000);
  for (auto& v : x) v = 2 + 3 * rng.uniform();
  const auto hd = histogram_density(x, {}, 1, Interval(2, 5));
  for (double m : {2.0, 3.3, 5.0}) EXPECT_NEAR(hd.density(m), 1.0 / 3.0, 1e-14);
}

TEST(HistogramDensity, OneOccupiedBinAndFloor) {
  std::vector<double> x(50, 0.05);
  const auto hd = histogram_density(x, {}, 10, Interval(0, 1));
  // occupied bin 10/width before renormalization; the other nine at 1e-3 of it
  const double norm = 1.0 + 9 * 1e-3;
  EXPECT_NEAR(hd.density(0.05), 10.0 / norm, 1e-12);
  EXPECT_NEAR(hd.density(0.55), 1e-2 / norm, 1e-14);
  EXPECT_NEAR(total_mass(hd.density), 1.0, 1e-12);
}

TEST(HistogramDensity, DropsOutOfRangeAndRejectsZeroWeight) {
  std::vector<double> x{0.1, 0.2, 1.5, -0.1};
  const auto hd = histogram_density(x, {}, 2, Interval(0, 1));
  EXPECT_EQ(hd.dropped, 2u);
  std::vector<double> w{0.0, 0.0, 1.0, 1.0};
  EXPECT_THROW(histogram_density(x, w, 2, Interval(0, 1)), InvalidArgument);
}

TEST(HistogramDensity, WeightScaleInvariance) {
  SplitMix64 rng(11);
  std::vector<double> x(500), w(500), w3(500);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.uniform();
    w[i] = 0.5 + rng.uniform();
    w3[i] = 3.7 * w[i];
  }
  const auto a = histogram_density(x, w, 20, Interval(0, 1));
  const auto b = histogram_density(x, w3, 20, Interval(0, 1));
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(a.density(0.025 + 0.05 * i), b.density(0.025 + 0.05 * i), 1e-12);
}

TEST(EfficiencyMap, Kinds) {
  const auto c = EfficiencyMap::constant(0.5);
  EXPECT_DOUBLE_EQ(c(0.3, 7.0), 0.5);
  EXPECT_TRUE(EfficiencyMap().is_unity());
  EXPECT_THROW(EfficiencyMap::constant(0.0), InvalidArgument);
  EXPECT_THROW(EfficiencyMap::constant(1.5), InvalidArgument);

  const auto b = EfficiencyMap::bilinear(0.2, 0.3, 0.35, -0.25, Interval(0, 1), Interval(0, 2));
  EXPECT_NEAR(b(1, 2), 0.7, 1e-15);
  EXPECT_NEAR(b(0.5, 1), 0.2 + 0.15 + 0.35 - 0.125, 1e-15);
  EXPECT_THROW(EfficiencyMap::bilinear(0.0, 0.3, 0.35, -0.25, Interval(0, 1), Interval(0, 2)), InvalidArgument);

  const auto g = EfficiencyMap::grid({0, 0.5, 1}, {0, 1, 2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  EXPECT_DOUBLE_EQ(g(0.2, 2.5), 0.3);
  EXPECT_DOUBLE_EQ(g(0.7, 0.5), 0.4);
  EXPECT_THROW(EfficiencyMap::grid({0, 1}, {0, 1}, {0.0}), InvalidArgument);
}
