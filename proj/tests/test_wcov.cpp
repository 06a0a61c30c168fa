#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cowlib/integrate.hpp"
#include "cowlib/mlfit.hpp"
#include "cowlib/rng.hpp"
#include "cowlib/sweights.hpp"
#include "cowlib/toygen.hpp"
#include "cowlib/wcov.hpp"

using namespace cowlib;

namespace {

Dataset simple_toy(std::uint64_t seed, std::size_t n, bool poisson = false) {
  ToySpec s;
  s.seed = seed;
  s.n_events = n;
  s.poisson = poisson;
  return generate_simple(s);
}

// Known mass shapes: yields-only fit, signal weights, weighted slope fit.
struct ShapesKnownFit {
  Dataset data;
  double ns = 0, nb = 0;
  SWeightTerms terms;
  FitResult weighted;
  Density1D hs;
};

ShapesKnownFit shapes_known_fit(std::uint64_t seed, std::size_t n) {
  const SimpleTruth tr;
  ShapesKnownFit f;
  f.data = simple_toy(seed, n);
  MixtureModel model;
  model.support = tr.m_range;
  model.components.push_back({"s", tr.gs(), 0.2 * n, {}});
  model.components.push_back({"b", tr.gb(), 0.8 * n, {}});
  const auto fit = fit_extended_ml(f.data.m, model);
  f.ns = fit.params[0];
  f.nb = fit.params[1];
  f.terms = sweight_terms(f.data.m, tr.gs(), tr.gb(), f.ns, f.nb);
  f.weighted = fit_weighted_ml(f.data.t, f.terms.w, tr.hs());
  f.hs = tr.hs().with_params(f.weighted.params);
  return f;
}

bool is_psd(const Matrix& m, double tol) {
  const Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  return es.eigenvalues().minCoeff() >= -tol * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
}

}  // namespace

TEST(WeightSums, VarianceAndEquivalentEvents) {
  const std::vector<double> ones{1, 1, 1};
  EXPECT_DOUBLE_EQ(variance_sum_weights(ones), 3.0);
  EXPECT_DOUBLE_EQ(equivalent_events(ones), 3.0);
  const std::vector<double> equal(17, 0.3);
  EXPECT_NEAR(equivalent_events(equal), 17.0, 1e-12);
  const std::vector<double> two{2, 0};
  EXPECT_DOUBLE_EQ(equivalent_events(two), 1.0);
  EXPECT_THROW(equivalent_events(std::vector<double>{0, 0}), InvalidArgument);
  EXPECT_THROW(variance_sum_weights(std::vector<double>{1, NAN}), InvalidArgument);
  EXPECT_DOUBLE_EQ(variance_sum_weights(std::vector<double>{}), 0.0);
}

TEST(WeightSums, EquivalentEventsBoundedBySampleSize) {
  SplitMix64 rng(1);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> w(20);
    for (auto& x : w) x = rng.uniform() * 3 - 0.5;
    if (std::abs(accurate_sum(w)) < 1e-3) continue;
    EXPECT_LE(equivalent_events(w), 20.0 + 1e-9);
    EXPECT_GE(equivalent_events(w), 0.0);
  }
}

// Var(sum w) over Poisson replicas equals the expected sum of squares
TEST(WeightSums, PoissonReplicaVariance) {
  const SimpleTruth tr;
  const auto wfs = weight_functions(compute_W_variant_A(tr.gs(), tr.gb(), 0.2, tr.m_range), tr.gs(), tr.gb());
  std::vector<double> sums, sq;
  for (std::uint64_t rep = 0; rep < 10000; ++rep) {
    const auto d = simple_toy(rep, 200, true);
    std::vector<double> w(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) w[i] = wfs(0, d.m[i]);
    sums.push_back(accurate_sum(w));
    sq.push_back(variance_sum_weights(w));
  }
  double mean = 0, var = 0, msq = 0;
  for (double s : sums) mean += s / sums.size();
  for (double s : sums) var += (s - mean) * (s - mean) / (sums.size() - 1);
  for (double s : sq) msq += s / sq.size();
  EXPECT_NEAR(var / msq, 1.0, 0.05);
}

TEST(SWeightDerivative, MatchesFiniteDifferences) {
  SplitMix64 rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const double gs = 0.1 + 3 * rng.uniform(), gb = 0.1 + 2 * rng.uniform();
    double W[3] = {2 + rng.uniform(), 0.3 * rng.uniform(), 1 + rng.uniform()};
    const auto d = sweight_derivative(gs, gb, W[0], W[1], W[2]);
    EXPECT_NEAR(d.w, (W[2] * gs - W[1] * gb) / ((W[2] - W[1]) * gs + (W[0] - W[1]) * gb), 1e-14);
    for (int j = 0; j < 3; ++j) {
      const double h = 1e-6;
      double up[3] = {W[0], W[1], W[2]}, dn[3] = {W[0], W[1], W[2]};
      up[j] += h;
      dn[j] -= h;
      const double fd = (sweight_derivative(gs, gb, up[0], up[1], up[2]).w -
                         sweight_derivative(gs, gb, dn[0], dn[1], dn[2]).w) / (2 * h);
      EXPECT_NEAR(d.dw[j], fd, 1e-7 * (1 + std::abs(fd)));
    }
  }
  EXPECT_THROW(sweight_derivative(1, 1, 1, 1, 1), NonFiniteError);
}

TEST(SWeightTerms, WeightsMatchVariantB) {
  const SimpleTruth tr;
  const auto d = simple_toy(3, 2000);
  const double ns = 410, nb = 1590;
  const auto terms = sweight_terms(d.m, tr.gs(), tr.gb(), ns, nb);
  const double z[] = {ns / 2000, nb / 2000};
  const Density1D g[] = {tr.gs(), tr.gb()};
  const auto wm = compute_W_variant_B(g, z, d.m);
  const auto w = apply_weights(weight_functions(wm, tr.gs(), tr.gb()), d.m);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(terms.w[i], w(static_cast<Eigen::Index>(i), 0), 1e-10);
  // W' uses yields in the mixture, so it is W^B / N
  EXPECT_NEAR(terms.W(0, 1), wm.W(0, 1) / 2000.0, 1e-12 * wm.W(0, 1));
  EXPECT_EQ(terms.dw.rows(), static_cast<Eigen::Index>(d.size()));
}

TEST(FixedShapes, NoWeightDependenceIsPlainSandwich) {
  const auto f = shapes_known_fit(4, 2500);
  const auto plain = corrected_covariance_fixed_shapes(f.data.t, f.terms.w, Matrix(), Matrix(), f.hs);
  EXPECT_TRUE(plain.reduction_term.isZero(0.0));
  EXPECT_TRUE(plain.theta_block.isApprox(plain.first_term, 0.0));
  // independent evaluation of H^-1 H' H^-1 for an exponential: d ln h / d lam = 1/lam - t - c(lam)
  const double lam = f.hs.params()[0], T = 3.0;
  const double c = -T / std::expm1(lam * T);  // derivative of -ln normalization: 1/lam + c - t
  double H = 0, Hp = 0;
  const double d2 = -1.0 / (lam * lam) + T * T * std::exp(lam * T) / (std::expm1(lam * T) * std::expm1(lam * T));
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    const double s = 1.0 / lam + c - f.data.t[i];
    H += f.terms.w[i] * d2;
    Hp += f.terms.w[i] * f.terms.w[i] * s * s;
  }
  EXPECT_NEAR(plain.first_term(0, 0), Hp / (H * H), 1e-6 * Hp / (H * H));
  EXPECT_NEAR(plain.naive(0, 0), -1.0 / H, 1e-6 / std::abs(H));
}

TEST(FixedShapes, ReductionTermIsPsdAndShrinksCovariance) {
  for (std::uint64_t seed : {5u, 6u, 7u, 8u}) {
    const auto f = shapes_known_fit(seed, 2500);
    const auto cc = corrected_covariance_fixed_shapes(f.data.t, f.terms.w, f.terms.dw, f.terms.u, f.hs);
    EXPECT_TRUE(is_psd(cc.reduction_term, 1e-12));
    EXPECT_TRUE(cc.theta_block.isApprox(cc.theta_block.transpose(), 0.0));
    EXPECT_TRUE((cc.theta_block - (cc.first_term - cc.reduction_term)).isZero(1e-15));
    EXPECT_LE(cc.theta_block(0, 0), cc.first_term(0, 0));
  }
}

TEST(FixedShapes, Errors) {
  const auto f = shapes_known_fit(9, 500);
  const std::vector<double> short_w(10, 1.0);
  EXPECT_THROW(corrected_covariance_fixed_shapes(f.data.t, short_w, Matrix(), Matrix(), f.hs), InvalidArgument);
  const Matrix bad = Matrix::Zero(3, 3);
  EXPECT_THROW(corrected_covariance_fixed_shapes(f.data.t, f.terms.w, bad, f.terms.u, f.hs), InvalidArgument);
  const std::vector<double> zero(f.data.size(), 0.0);
  EXPECT_THROW(corrected_covariance_fixed_shapes(f.data.t, zero, Matrix(), Matrix(), f.hs), SingularMatrixError);
}

TEST(Sandwich, RowScalingInvariance) {
  SplitMix64 rng(10);
  for (int rep = 0; rep < 10; ++rep) {
    Matrix J = Matrix::Random(5, 5) + 4 * Matrix::Identity(5, 5);
    Matrix B = Matrix::Random(5, 5);
    const Matrix C = B * B.transpose() + Matrix::Identity(5, 5);
    Vector d(5);
    for (int i = 0; i < 5; ++i) d[i] = (rng.uniform() < 0.5 ? -1 : 1) * (0.1 + 10 * rng.uniform());
    const Matrix a = sandwich(J, C);
    const Matrix b = sandwich(d.asDiagonal() * J, d.asDiagonal() * C * d.asDiagonal());
    EXPECT_TRUE(a.isApprox(b, 1e-10));
  }
  EXPECT_THROW(sandwich(Matrix::Zero(2, 2), Matrix::Identity(2, 2)), SingularMatrixError);
}

TEST(FullSandwich, UnitWeightsGiveOrdinaryCovariance) {
  const SimpleTruth tr;
  const auto d = simple_toy(11, 5000);
  // every t drawn from h_s, so the unweighted fit is an ordinary ML fit
  const std::vector<double>& m = d.m;
  std::vector<double> t(d.size());
  SplitMix64 rng(111);
  for (auto& x : t) x = tr.hs().quantile(rng.uniform());
  QuasiScoreModel q{tr.gs(), tr.gb(), {}, {}, tr.hs(), true};
  MixtureModel model;
  model.support = tr.m_range;
  model.components.push_back({"s", tr.gs(), 1000, {}});
  model.components.push_back({"b", tr.gb(), 4000, {}});
  const auto fit = fit_extended_ml(m, model);
  const std::vector<double> ones(t.size(), 1.0);
  const auto wf = fit_weighted_ml(t, ones, tr.hs());
  const auto lambda = stack_parameters(m, q, fit.params[0], fit.params[1], wf.params);
  const auto cc = corrected_covariance_full(m, t, q, lambda);
  EXPECT_EQ(cc.full.rows(), 6);
  // the theta block is the robust ML covariance H^-1 H' H^-1 ...
  EXPECT_NEAR(cc.theta_block(0, 0), cc.first_term(0, 0), 1e-6 * cc.first_term(0, 0));
  // ... and the inverse Hessian up to sampling fluctuations of H'
  EXPECT_NEAR(cc.theta_block(0, 0), wf.covariance(0, 0), 0.1 * wf.covariance(0, 0));
  EXPECT_NEAR(cc.naive(0, 0), wf.covariance(0, 0), 1e-4 * wf.covariance(0, 0));
}

TEST(FullSandwich, AgreesWithFixedShapePath) {
  const SimpleTruth tr;
  for (std::size_t n : {2500u, 40000u}) {
    const auto f = shapes_known_fit(12, n);
    const auto fixed = corrected_covariance_fixed_shapes(f.data.t, f.terms.w, f.terms.dw, f.terms.u, f.hs);
    QuasiScoreModel q{tr.gs(), tr.gb(), {}, {}, tr.hs(), false};
    const auto lambda = stack_parameters(f.data.m, q, f.ns, f.nb, f.weighted.params);
    const auto full = corrected_covariance_full(f.data.m, f.data.t, q, lambda);
    EXPECT_NEAR(full.theta_block(0, 0), fixed.theta_block(0, 0), 1e-3 * fixed.theta_block(0, 0)) << "N=" << n;
    EXPECT_NEAR(full.first_term(0, 0), fixed.first_term(0, 0), 1e-9 * fixed.first_term(0, 0));
    EXPECT_TRUE(full.full.isApprox(full.full.transpose(), 1e-12));
  }
}

TEST(FullSandwich, RejectsNonRoot) {
  const SimpleTruth tr;
  const auto f = shapes_known_fit(13, 1000);
  QuasiScoreModel q{tr.gs(), tr.gb(), {}, {}, tr.hs(), false};
  auto lambda = stack_parameters(f.data.m, q, f.ns, f.nb, f.weighted.params);
  lambda[0] *= 1.5;
  try {
    corrected_covariance_full(f.data.m, f.data.t, q, lambda);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("max |S_j|"), std::string::npos);
  }
  EXPECT_THROW(quasi_score(f.data.m, f.data.t, q, std::vector<double>{1, 2}), InvalidArgument);
}

TEST(FullSandwich, FreeShapesDimension) {
  const SimpleTruth tr;
  QuasiScoreModel q{tr.gs(), tr.gb(), {true, true}, {true}, tr.hs(), false};
  EXPECT_EQ(q.n_phi(), 3u);
  EXPECT_EQ(q.dimension(), 2u + 3u + 3u + 1u);
}

// Score covariance estimate against the Monte Carlo covariance of S over
// Poisson resamples of a small model at the true parameters.
TEST(ScoreCovariance, MatchesMonteCarlo) {
  const SimpleTruth tr;
  const double n_mean = 100, ns = 20, nb = 80;
  const auto gs = tr.gs(), gb = tr.gb();
  auto wint = [&](int x, int y) {
    return integrate(
        [&](double m) {
          const double g[2] = {gs(m), gb(m)};
          return g[x] * g[y] / (ns * g[0] + nb * g[1]);
        },
        tr.m_range, 1e-12, std::vector<double>{0.5});
  };
  QuasiScoreModel q{gs, gb, {}, {}, tr.hs(), false};
  const std::vector<double> lambda{ns, nb, wint(0, 0), wint(0, 1), wint(1, 1), tr.signal_rate};
  const int reps = 10000;
  const Eigen::Index dim = 6;
  Matrix mean_cs = Matrix::Zero(dim, dim), sum_ss = Matrix::Zero(dim, dim);
  Vector sum_s = Vector::Zero(dim);
  for (int r = 0; r < reps; ++r) {
    const auto d = simple_toy(50000 + r, static_cast<std::size_t>(n_mean), true);
    const Vector S = quasi_score(d.m, d.t, q, lambda);
    sum_s += S;
    sum_ss += S * S.transpose();
    mean_cs += score_covariance(d.m, d.t, q, lambda) / reps;
  }
  const Vector mean_s = sum_s / reps;
  const Matrix mc = (sum_ss - reps * mean_s * mean_s.transpose()) / (reps - 1);
  for (Eigen::Index i = 0; i < dim; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double scale = std::sqrt(mc(i, i) * mc(j, j));
      EXPECT_NEAR(mean_cs(i, j), mc(i, j), 0.05 * scale) << i << "," << j;
    }
}
