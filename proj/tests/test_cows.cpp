#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cowlib/cows.hpp"
#include "cowlib/integrate.hpp"
#include "cowlib/mlfit.hpp"
#include "cowlib/rng.hpp"
#include "cowlib/sweights.hpp"
#include "cowlib/toygen.hpp"

using namespace cowlib;

namespace {

const Interval unit(0, 1);

CowSpec two_component_spec(double z) {
  const SimpleTruth t;
  CowSpec s;
  s.basis = {t.gs(), t.gb()};
  s.support = t.m_range;
  s.variance = VarianceFunction::mixture({z, 1 - z}, {t.gs(), t.gb()});
  return s;
}

Dataset simple_toy(std::uint64_t seed, std::size_t n) {
  ToySpec s;
  s.seed = seed;
  s.n_events = n;
  return generate_simple(s);
}

Dataset nonfact_toy(std::uint64_t seed, std::size_t n, double coupling = 1.0) {
  ToySpec s;
  s.study = Study::nonfactorising;
  s.seed = seed;
  s.n_events = n;
  s.nonfactorising.coupling = coupling;
  return generate_nonfactorising(s);
}

std::vector<Density1D> signal_plus_polynomial(int order) {
  std::vector<Density1D> b{NonfactorisingTruth{}.gs()};
  for (auto& d : monomial_basis(order + 1)) b.push_back(d);
  return b;
}

double overlap(const CowSet& cow, std::size_t k, const Density1D& g) {
  std::vector<double> bp = cow.spec().variance.breakpoints();
  for (const auto& d : cow.effective_basis())
    for (double b : d.breakpoints()) bp.push_back(b);
  return integrate([&](double m) { return cow(k, m) * g(m); }, cow.spec().support, 1e-12, bp);
}

double sample_variance(const std::vector<double>& x) {
  double mean = 0, v = 0;
  for (double e : x) mean += e / x.size();
  for (double e : x) v += (e - mean) * (e - mean) / (x.size() - 1);
  return v;
}

}  // namespace

TEST(BuildCow, MixtureVarianceReproducesSweights) {
  const SimpleTruth t;
  for (double z : {0.2, 0.6}) {
    const auto cow = build_cow(two_component_spec(z), 1e-12);
    const auto wfs = weight_functions(compute_W_variant_A(t.gs(), t.gb(), z, t.m_range, 1e-12), t.gs(), t.gb());
    for (int i = 0; i <= 100; ++i) {
      const double m = i / 100.0;
      EXPECT_NEAR(cow(0, m), wfs(0, m), 1e-10) << m;
      EXPECT_NEAR(cow(1, m), wfs(1, m), 1e-10) << m;
    }
  }
}

TEST(BuildCow, InverseAndOrthonormality) {
  const auto cow = build_cow(two_component_spec(0.3));
  EXPECT_TRUE((cow.A() * cow.W()).isApprox(Matrix::Identity(2, 2), 1e-10));
  const SimpleTruth t;
  EXPECT_NEAR(overlap(cow, 0, t.gs()), 1.0, 1e-6);
  EXPECT_NEAR(overlap(cow, 0, t.gb()), 0.0, 1e-6);
  EXPECT_NEAR(overlap(cow, 1, t.gs()), 0.0, 1e-6);
  EXPECT_NEAR(overlap(cow, 1, t.gb()), 1.0, 1e-6);
}

TEST(BuildCow, MonomialBasisWithUnitVariance) {
  CowSpec s;
  s.basis = monomial_basis(3);
  s.support = unit;
  const auto cow = build_cow(s);
  // W_kl = int k m^(k-1) l m^(l-1) dm = k l / (k + l - 1)
  for (int k = 1; k <= 3; ++k)
    for (int l = 1; l <= 3; ++l) EXPECT_NEAR(cow.W()(k - 1, l - 1), k * l / double(k + l - 1), 1e-12);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(overlap(cow, k, s.basis[l]), k == l ? 1.0 : 0.0, 1e-9);
  // I = 1 is the first basis element, so the weights sum to one
  for (int i = 0; i <= 20; ++i) {
    double sum = 0;
    for (std::size_t k = 0; k < 3; ++k) sum += cow(k, i / 20.0);
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  // the weight functions span the same quadratic space: the third one is
  // orthogonal to 1 and 2m, hence proportional to the shifted Legendre P2
  const double r = cow(2, 0.0) / (6.0 * 0.0 * 0.0 - 6.0 * 0.0 + 1.0);
  for (double m : {0.1, 0.37, 0.9}) EXPECT_NEAR(cow(2, m), r * (6 * m * m - 6 * m + 1), 1e-9);
}

TEST(BuildCow, DuplicateBasisIsIllConditioned) {
  CowSpec s;
  s.basis = {Density1D::exponential(1.0, unit), Density1D::exponential(1.0, unit)};
  s.support = unit;
  EXPECT_THROW(build_cow(s), IllConditionedError);
  CowSpec high;
  high.basis = monomial_basis(14);
  high.support = unit;
  try {
    build_cow(high);
    FAIL();
  } catch (const IllConditionedError& e) {
    EXPECT_NE(std::string(e.what()).find("fewer"), std::string::npos);
  }
}

TEST(BuildCow, BernsteinBasisIsBetterConditioned) {
  CowSpec s;
  s.basis = bernstein_basis(9);
  s.support = unit;
  const auto cow = build_cow(s);
  for (std::size_t k = 0; k < s.basis.size(); ++k) EXPECT_NEAR(overlap(cow, k, s.basis[k]), 1.0, 1e-6);
}

TEST(BuildCow, RejectsBadSpec) {
  CowSpec s;
  s.support = unit;
  EXPECT_THROW(build_cow(s), InvalidArgument);
  s.basis = monomial_basis(2);
  s.n_signal = 3;
  EXPECT_THROW(build_cow(s), InvalidArgument);
  s.n_signal = 1;
  const auto cow = build_cow(s);
  EXPECT_THROW(cow(0, 1.5), OutOfRangeError);
}

TEST(VarianceFunctionQm, SingleBinUnitEfficiencyIsUnity) {
  const auto d = simple_toy(1, 3000);
  const auto h = variance_fn_qm(d.m, d.t, EfficiencyMap::constant(1.0), 1, unit);
  EXPECT_NEAR(h.contents[0], 1.0, 1e-12);
  CowSpec a = two_component_spec(0.2);
  a.variance = VarianceFunction::unity();
  CowSpec b = a;
  b.variance = VarianceFunction::histogram(h);
  const auto ca = build_cow(a), cb = build_cow(b);
  for (double m : {0.05, 0.5, 0.93}) {
    EXPECT_NEAR(ca(0, m), cb(0, m), 1e-10);
    EXPECT_NEAR(ca(1, m), cb(1, m), 1e-10);
  }
}

TEST(VarianceFunctionQm, ConstantEfficiencyScaleCancels) {
  const auto d = nonfact_toy(2, 3000);
  const auto one = variance_fn_qm(d.m, d.t, EfficiencyMap::constant(1.0), 20, unit);
  const auto half = variance_fn_qm(d.m, d.t, EfficiencyMap::constant(0.5), 20, unit);
  for (std::size_t b = 0; b < 20; ++b) EXPECT_NEAR(one.contents[b], half.contents[b], 1e-12 * (1 + one.contents[b]));
  double area = 0;
  for (std::size_t b = 0; b < 20; ++b) area += one.contents[b] * one.width(b);
  EXPECT_NEAR(area, 1.0, 1e-12);
}

TEST(VarianceFunctionQm, Errors) {
  const std::vector<double> m{0.2}, t{0.5}, t2{0.5, 0.6};
  EXPECT_THROW(variance_fn_qm(m, t, EfficiencyMap::constant(1.0), 0, unit), InvalidArgument);
  EXPECT_THROW(variance_fn_qm(m, t2, EfficiencyMap::constant(1.0), 5, unit), InvalidArgument);
  EXPECT_THROW(variance_fn_qm(m, t, EfficiencyMap::constant(0.0), 5, unit), InvalidArgument);
}

// q(m) is proportional to int dt f(m,t)/eps(m,t) for the generator density f
TEST(VarianceFunctionQm, MatchesGeneratorQuadrature) {
  const NonfactorisingTruth tr;
  const auto d = nonfact_toy(3, 40000);
  const auto eff = tr.efficiency();
  const std::size_t bins = 50;
  const auto h = variance_fn_qm(d.m, d.t, eff, bins, tr.m_range);
  const double bnorm = tr.background_norm();
  const auto gs = tr.gs(), hs = tr.hs();
  auto integrand = [&](double m) {
    return integrate(
        [&](double t) { return (0.5 * gs(m) * hs(t) + 0.5 * tr.background_shape(m, t) / bnorm) / eff(m, t); },
        tr.t_range, 1e-10);
  };
  std::vector<double> q(bins);
  double total = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    q[b] = integrate(integrand, Interval(h.edges[b], h.edges[b + 1]), 1e-9);
    total += q[b];
  }
  double chi2 = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double expect = q[b] / total / h.width(b);
    const double pull = (h.contents[b] - expect) / std::sqrt(h.sumw2[b]);
    EXPECT_LT(std::abs(pull), 4.5) << "bin " << b;
    chi2 += pull * pull;
  }
  EXPECT_LT(chi2 / bins, 1.6);
}

TEST(MlVariance, MatchesExtendedMlFraction) {
  const SimpleTruth t;
  for (std::uint64_t seed : {4u, 5u}) {
    const auto d = simple_toy(seed, 3000);
    MixtureModel model;
    model.support = t.m_range;
    model.components.push_back({"s", t.gs(), 600, {}});
    model.components.push_back({"b", t.gb(), 2400, {}});
    const auto fit = fit_extended_ml(d.m, model);
    ASSERT_TRUE(fit.converged);
    const double z_ml = fit.params[0] / (fit.params[0] + fit.params[1]);
    const auto r = variance_fn_ml_iterative({t.gs(), t.gb()}, t.m_range, d.m, d.t, std::nullopt, 200, 1e-12);
    EXPECT_NEAR(r.z[0], z_ml, 1e-6);
    EXPECT_FALSE(r.clipped);
    EXPECT_NEAR(r.z[0] + r.z[1], 1.0, 1e-12);
  }
}

TEST(MlVariance, PureFirstComponent) {
  const auto g0 = Density1D::exponential(3.0, unit);
  SplitMix64 rng(6);
  std::vector<double> m(4000);
  for (auto& x : m) x = g0.quantile(rng.uniform());
  const auto r = variance_fn_ml_iterative({g0, Density1D::uniform(unit)}, unit, m, {}, std::nullopt, 200, 1e-9);
  EXPECT_GT(r.z[0], 0.97);
}

TEST(MlVariance, FewIterationsFromFlatStart) {
  const SimpleTruth t;
  const auto d = simple_toy(7, 2500);
  const auto full = variance_fn_ml_iterative({t.gs(), t.gb()}, t.m_range, d.m, d.t, std::nullopt, 200, 1e-12);
  // after n + 2 steps the fraction is already within a small fraction of its error
  ASSERT_GT(full.trace.size(), 4u);
  const double sigma = std::sqrt(full.z[0] / d.size());
  EXPECT_LT(std::abs(full.trace[4][0] - full.z[0]), 0.1 * sigma);
  EXPECT_EQ(full.trace.front()[0], 0.5);
}

TEST(MlVariance, NonConvergenceCarriesTrace) {
  const SimpleTruth t;
  const auto d = simple_toy(8, 1000);
  try {
    variance_fn_ml_iterative({t.gs(), t.gb()}, t.m_range, d.m, d.t, std::nullopt, 1, 1e-15);
    FAIL();
  } catch (const NotConvergedError& e) {
    EXPECT_NE(std::string(e.what()).find("trace"), std::string::npos);
  }
  EXPECT_THROW(variance_fn_ml_iterative({t.gs(), t.gb()}, t.m_range, d.m, d.t, std::nullopt, 0), InvalidArgument);
}

TEST(EstimateFractions, SingleComponent) {
  CowSpec s;
  s.basis = {Density1D::exponential(2.0, unit)};
  s.support = unit;
  const auto cow = build_cow(s);
  const auto d = simple_toy(9, 500);
  const auto est = estimate_fractions(cow, d.m, d.t);
  ASSERT_EQ(est.z.size(), 1u);
  // the single weight function is g/I / int g^2/I, whose data average is not 1 in general;
  // with I = g it is exactly 1
  s.variance = VarianceFunction::mixture({1.0}, s.basis);
  const auto est2 = estimate_fractions(build_cow(s), d.m, d.t);
  EXPECT_NEAR(est2.z[0], 1.0, 1e-9);
  EXPECT_EQ(est2.D, 1.0);
}

TEST(EstimateFractions, ConsistencyAtMlSolution) {
  const SimpleTruth t;
  const auto d = simple_toy(10, 2500);
  const auto r = variance_fn_ml_iterative({t.gs(), t.gb()}, t.m_range, d.m, d.t, std::nullopt, 200, 1e-13);
  const auto est = estimate_fractions(r.cow, d.m, d.t);
  EXPECT_NEAR(est.z[0], r.z[0], 1e-10);
  EXPECT_NEAR(est.z[1], r.z[1], 1e-10);
}

TEST(EstimateFractions, HarmonicMeanEfficiency) {
  const auto cow = build_cow(two_component_spec(0.2));
  const std::vector<double> m{0.3, 0.5, 0.7}, t{0.1, 0.2, 0.3};
  const auto eff = EfficiencyMap::bilinear(0.5, 0.2, 0.0, 0.0, unit, Interval(0, 1));
  const auto est = estimate_fractions(cow, m, t, eff);
  const double inv = (1 / eff(0.3, 0.1) + 1 / eff(0.5, 0.2) + 1 / eff(0.7, 0.3)) / 3;
  EXPECT_NEAR(est.D, 1 / inv, 1e-14);
  EXPECT_THROW(estimate_fractions(cow, std::vector<double>{}, {}), InvalidArgument);
}

TEST(EstimateFractions, UnbiasedSignalFractionWithEfficiency) {
  const NonfactorisingTruth tr;
  const auto eff = tr.efficiency();
  std::vector<double> zs;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto d = nonfact_toy(1000 + seed, 2000, 0.0);
    CowSpec s;
    s.basis = {tr.gs(), tr.factorised_equivalent().gb()};
    s.support = tr.m_range;
    const auto cow = build_cow(s);
    const auto est = estimate_fractions(cow, d.m, d.t, eff);
    zs.push_back(est.z[0]);
  }
  double mean = 0;
  for (double z : zs) mean += z / zs.size();
  const double se = std::sqrt(sample_variance(zs) / zs.size());
  EXPECT_NEAR(mean, 0.5, 3 * se);
}

TEST(EfficiencyWeights, UnitAndHalf) {
  const auto cow = build_cow(two_component_spec(0.2));
  const auto d = simple_toy(11, 200);
  const auto plain = efficiency_corrected_weights(cow, std::nullopt, d.m, d.t);
  const auto one = efficiency_corrected_weights(cow, EfficiencyMap::constant(1.0), d.m, d.t);
  const auto half = efficiency_corrected_weights(cow, EfficiencyMap::constant(0.5), d.m, d.t);
  for (Eigen::Index i = 0; i < plain.rows(); ++i) {
    EXPECT_DOUBLE_EQ(plain(i, 0), cow(0, d.m[i]));
    EXPECT_DOUBLE_EQ(one(i, 0), plain(i, 0));
    EXPECT_DOUBLE_EQ(half(i, 1), 2 * plain(i, 1));
  }
  EXPECT_THROW(efficiency_corrected_weights(cow, EfficiencyMap::constant(1e-7), d.m, d.t), InvalidArgument);
}

TEST(EfficiencyWeights, BlockSums) {
  CowSpec s;
  s.basis = signal_plus_polynomial(2);
  s.support = unit;
  const auto cow = build_cow(s);
  const std::vector<double> m{0.1, 0.5, 0.8};
  const auto w = efficiency_corrected_weights(cow, std::nullopt, m, {});
  const auto b = block_weights(w, 1);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(b.signal[i], w(i, 0));
    EXPECT_NEAR(b.background[i], w(i, 1) + w(i, 2) + w(i, 3), 1e-14);
  }
}

// binned t expectation of the corrected signal weights is (N/D) z_0 int_bin h_0
TEST(EfficiencyWeights, BinnedControlExpectation) {
  const NonfactorisingTruth tr;
  const auto eff = tr.efficiency();
  const auto gb = tr.factorised_equivalent().gb();
  const auto hb = tr.factorised_equivalent().hb();
  const auto d = nonfact_toy(12, 60000, 0.0);
  CowSpec s;
  s.basis = {tr.gs(), gb};
  s.support = tr.m_range;
  const auto cow = build_cow(s);
  const auto w = efficiency_corrected_weights(cow, eff, d.m, d.t);
  const auto gs = tr.gs(), hs = tr.hs();
  const double D = integrate(
      [&](double m) {
        return integrate([&](double t) { return eff(m, t) * (0.5 * gs(m) * hs(t) + 0.5 * gb(m) * hb(t)); },
                         tr.t_range, 1e-10);
      },
      tr.m_range, 1e-9);
  const int bins = 8;
  std::vector<double> sum(bins, 0.0), sum2(bins, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int b = std::min(bins - 1, static_cast<int>(d.t[i] / tr.t_range.width() * bins));
    sum[b] += w(static_cast<Eigen::Index>(i), 0);
    sum2[b] += w(static_cast<Eigen::Index>(i), 0) * w(static_cast<Eigen::Index>(i), 0);
  }
  const double n = static_cast<double>(d.size());
  for (int b = 0; b < bins; ++b) {
    const double lo = tr.t_range.width() * b / bins, hi = tr.t_range.width() * (b + 1) / bins;
    const double expect = n / D * 0.5 * (hs.cdf(hi) - hs.cdf(lo));
    EXPECT_NEAR(sum[b], expect, 4 * std::sqrt(sum2[b])) << "bin " << b;
  }
}

TEST(SignalProxy, ObservedDensityChangesOnlyNormalization) {
  const SimpleTruth t;
  const auto d = simple_toy(13, 20000);
  CowSpec base;
  base.basis = {t.gs(), t.gb()};
  base.support = t.m_range;
  CowSpec proxied = base;
  proxied.signal_proxy = histogram_density(d.m, {}, 100, t.m_range).density;
  const auto c0 = build_cow(base), c1 = build_cow(proxied);
  const int bins = 6;
  std::vector<double> a(bins, 0.0), b(bins, 0.0), a2(bins, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int k = std::min(bins - 1, static_cast<int>(d.t[i] / t.t_range.width() * bins));
    const double w0 = c0(0, d.m[i]);
    a[k] += w0;
    a2[k] += w0 * w0;
    b[k] += c1(0, d.m[i]);
  }
  double sa = 0, sb = 0;
  for (int k = 0; k < bins; ++k) {
    sa += a[k];
    sb += b[k];
  }
  for (int k = 0; k < bins; ++k) EXPECT_NEAR(a[k] / sa, b[k] / sb, 3 * std::sqrt(a2[k]) / sa) << "bin " << k;
  // with p = rho the signal weights count every event once on average
  EXPECT_NEAR(sb, static_cast<double>(d.size()), 1e-3 * d.size());
  EXPECT_NEAR(sa, 0.2 * d.size(), 5 * std::sqrt(0.2 * d.size()));
}

TEST(VarianceFunctionQm, NoWorseThanUnityVariance) {
  const NonfactorisingTruth tr;
  const auto eff = tr.efficiency();
  std::vector<double> zq, z1;
  for (std::uint64_t seed = 0; seed < 120; ++seed) {
    const auto d = nonfact_toy(3000 + seed, 2000, 0.0);
    CowSpec s;
    s.basis = signal_plus_polynomial(2);
    s.support = tr.m_range;
    z1.push_back(estimate_fractions(build_cow(s), d.m, d.t, eff).z[0]);
    s.variance = VarianceFunction::histogram(variance_fn_qm(d.m, d.t, eff, 50, tr.m_range));
    zq.push_back(estimate_fractions(build_cow(s), d.m, d.t, eff).z[0]);
  }
  const double vq = sample_variance(zq), v1 = sample_variance(z1);
  EXPECT_LT(vq, v1 * (1 + 2 * std::sqrt(2.0 / (zq.size() - 1))));
}
