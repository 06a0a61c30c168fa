#pragma once

// Custom orthogonal weight functions (COWs) for an arbitrary basis of
// component densities and a positive variance function I(m).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cowlib/core.hpp"
#include "cowlib/density.hpp"
#include "cowlib/integrate.hpp"
#include "cowlib/optimize.hpp"

namespace cowlib {

/// The variance function I(m): unity, a piecewise-constant histogram, or a
/// linear combination sum_k z_k g_k(m) of densities.
class VarianceFunction {
 public:
  enum class Kind { unity, histogram, mixture };

  static VarianceFunction unity() { return VarianceFunction(); }

  /// Histogram contents are read as densities; empty bins are floored at
  /// 1e-3 of the smallest positive bin and the result renormalized.
  static VarianceFunction histogram(const Histogram1D& h) {
    if (h.bins() < 1) throw InvalidArgument("variance histogram has no bins");
    double smallest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < h.bins(); ++i)
      if (h.contents[i] > 0.0) smallest = std::min(smallest, h.contents[i]);
    if (!std::isfinite(smallest)) throw InvalidArgument("variance histogram has no positive bin");
    std::vector<double> heights(h.bins());
    for (std::size_t i = 0; i < h.bins(); ++i)
      heights[i] = h.contents[i] > 0.0 ? h.contents[i] : 1e-3 * smallest;
    VarianceFunction v;
    v.kind_ = Kind::histogram;
    v.hist_ = h;
    v.terms_.push_back(Density1D::histogram(h.edges, std::move(heights)));
    v.z_ = {1.0};
    return v;
  }

  /// I(m) = sum_k z_k g_k(m). Rejected when not strictly positive on the support.
  static VarianceFunction mixture(std::vector<double> z, std::vector<Density1D> g) {
    if (z.empty() || z.size() != g.size()) throw InvalidArgument("one coefficient per density is required");
    VarianceFunction v;
    v.kind_ = Kind::mixture;
    v.z_ = std::move(z);
    v.terms_ = std::move(g);
    Interval sup = v.terms_.front().support();
    for (const auto& d : v.terms_)
      sup = Interval(std::min(sup.lo, d.support().lo), std::max(sup.hi, d.support().hi));
    constexpr int probes = 10000;
    for (int i = 0; i <= probes; ++i) {
      const double m = sup.lo + sup.width() * i / probes;
      if (!(v(m) > 0.0))
        throw InvalidArgument(detail::concat("variance function is not positive at m=", m,
                                             " (negative or zero mixture coefficient?)"));
    }
    return v;
  }

  Kind kind() const noexcept { return kind_; }
  std::span<const double> coefficients() const noexcept { return z_; }
  const std::optional<Histogram1D>& source_histogram() const noexcept { return hist_; }

  double operator()(double m) const {
    if (kind_ == Kind::unity) return 1.0;
    double v = 0.0;
    for (std::size_t k = 0; k < terms_.size(); ++k) v += z_[k] * terms_[k](m);
    return v;
  }

  std::vector<double> breakpoints() const {
    std::vector<double> bp;
    for (const auto& t : terms_) {
      auto b = t.breakpoints();
      bp.insert(bp.end(), b.begin(), b.end());
      bp.push_back(t.support().lo);
      bp.push_back(t.support().hi);
    }
    return bp;
  }

 private:
  Kind kind_ = Kind::unity;
  std::vector<double> z_;
  std::vector<Density1D> terms_;
  std::optional<Histogram1D> hist_;
};

struct CowSpec {
  std::vector<Density1D> basis;  // signal block first
  std::size_t n_signal = 1;
  std::optional<Density1D> signal_proxy;  // replaces basis[0] in the construction
  VarianceFunction variance = VarianceFunction::unity();
  Interval support;
  std::optional<EfficiencyMap> efficiency;
};

/// Gram matrix W_kl = int g_k g_l / I, its inverse A, and the weight
/// functions w_k(m) = sum_l A_kl g_l(m) / I(m).
class CowSet {
 public:
  CowSet(CowSpec spec, Matrix W, Matrix A)
      : spec_(std::move(spec)), W_(std::move(W)), A_(std::move(A)) {
    g_ = spec_.basis;
    if (spec_.signal_proxy) g_[0] = *spec_.signal_proxy;
  }

  const CowSpec& spec() const noexcept { return spec_; }
  const Matrix& W() const noexcept { return W_; }
  const Matrix& A() const noexcept { return A_; }
  std::size_t size() const noexcept { return g_.size(); }
  std::size_t n_signal() const noexcept { return spec_.n_signal; }
  /// The basis used in the construction (signal proxy substituted).
  std::span<const Density1D> effective_basis() const noexcept { return g_; }
  double variance(double m) const { return spec_.variance(m); }

  void evaluate(double m, std::span<double> out) const {
    if (!spec_.support.contains(m))
      throw OutOfRangeError(detail::concat("m=", m, " lies outside the weight-function range [",
                                           spec_.support.lo, ", ", spec_.support.hi, "]"));
    const std::size_t n = g_.size();
    double gv[32];
    std::vector<double> big;
    double* gp = gv;
    if (n > 32) {
      big.resize(n);
      gp = big.data();
    }
    const double inv_i = 1.0 / spec_.variance(m);
    for (std::size_t l = 0; l < n; ++l) gp[l] = g_[l](m);
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t l = 0; l < n; ++l)
        s += A_(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) * gp[l];
      out[k] = s * inv_i;
    }
  }

  double operator()(std::size_t k, double m) const {
    std::vector<double> out(size());
    evaluate(m, out);
    return out[k];
  }

  /// Sum of the signal-block weight functions.
  double signal_weight(double m) const {
    std::vector<double> out(size());
    evaluate(m, out);
    double s = 0.0;
    for (std::size_t k = 0; k < spec_.n_signal; ++k) s += out[k];
    return s;
  }

 private:
  CowSpec spec_;
  Matrix W_;
  Matrix A_;
  std::vector<Density1D> g_;
};

inline constexpr double cow_condition_limit = 1e12;

inline CowSet build_cow(CowSpec spec, double tol = 1e-10) {
  const std::size_t n = spec.basis.size();
  if (n < 1) throw InvalidArgument("COW basis is empty");
  if (spec.n_signal < 1 || spec.n_signal > n) throw InvalidArgument("signal block size must lie in [1, n]");
  std::vector<Density1D> g = spec.basis;
  if (spec.signal_proxy) g[0] = *spec.signal_proxy;

  std::vector<double> bp = spec.variance.breakpoints();
  for (const auto& d : g) {
    auto b = d.breakpoints();
    bp.insert(bp.end(), b.begin(), b.end());
    bp.push_back(d.support().lo);
    bp.push_back(d.support().hi);
  }
  std::vector<double> vals(n);
  auto f = [&](double m, std::span<double> out) {
    const double iv = spec.variance(m);
    if (!(iv > 0.0)) throw InvalidArgument(detail::concat("variance function is not positive at m=", m));
    for (std::size_t k = 0; k < n; ++k) vals[k] = g[k](m);
    std::size_t idx = 0;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = k; l < n; ++l) out[idx++] = vals[k] * vals[l] / iv;
  };
  QuadratureOptions qo;
  qo.tol = tol;
  const auto r = integrate_vector(f, n * (n + 1) / 2, spec.support, qo, bp);
  Matrix W(n, n);
  std::size_t idx = 0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = k; l < n; ++l) {
      W(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) = r[idx];
      W(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = r[idx];
      ++idx;
    }

  const Eigen::SelfAdjointEigenSolver<Matrix> es(W, Eigen::EigenvaluesOnly);
  const double lmax = es.eigenvalues().maxCoeff();
  const double lmin = es.eigenvalues().minCoeff();
  const double cond = lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();
  if (cond > cow_condition_limit)
    throw IllConditionedError(
        detail::concat("COW basis is ill-conditioned (condition number ", cond,
                       "); use fewer polynomial terms or a better-conditioned basis"),
        cond);

  Matrix A;
  const Eigen::LLT<Matrix> llt(W);
  if (llt.info() == Eigen::Success) {
    A = llt.solve(Matrix::Identity(W.rows(), W.cols()));
  } else {
    A = Eigen::PartialPivLU<Matrix>(W).inverse();
  }
  A = 0.5 * (A + A.transpose()).eval();
  return CowSet(std::move(spec), std::move(W), std::move(A));
}

/// Histogram of m filled with weights 1/eps^2 and normalized to unit area
/// (contents are densities). sumw2 is scaled consistently.
inline Histogram1D variance_fn_qm(std::span<const double> m, std::span<const double> t,
                                  const EfficiencyMap& eff, std::size_t bins, const Interval& support) {
  if (bins < 1) throw InvalidArgument("q(m) histogram needs at least one bin");
  if (m.size() != t.size()) throw InvalidArgument("m and t differ in length");
  Histogram1D h = Histogram1D::uniform(bins, support);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double e = eff(m[i], t[i]);
    if (!(e > 0.0)) throw InvalidArgument(detail::concat("efficiency is not positive at event ", i));
    h.fill(m[i], 1.0 / (e * e));
  }
  double area = 0.0;
  for (std::size_t b = 0; b < h.bins(); ++b) area += h.contents[b];
  if (!(area > 0.0)) throw InvalidArgument("q(m) histogram is empty");
  for (std::size_t b = 0; b < h.bins(); ++b) {
    const double s = 1.0 / (area * h.width(b));
    h.contents[b] *= s;
    h.sumw2[b] *= s * s;
  }
  return h;
}

struct FractionEstimate {
  std::vector<double> z;
  double D = 1.0;  // harmonic mean of the efficiencies
};

namespace detail {

inline double efficiency_at(const std::optional<EfficiencyMap>& eff, std::span<const double> t, std::size_t i,
                            double m) {
  if (!eff) return 1.0;
  if (t.empty()) throw InvalidArgument("an efficiency map needs the control variable t");
  return (*eff)(m, t[i]);
}

}  // namespace detail

/// z_k = (D/N) sum_i w_k(m_i)/eps_i with 1/D the sample mean of 1/eps.
inline FractionEstimate estimate_fractions(const CowSet& cow, std::span<const double> m,
                                           std::span<const double> t,
                                           const std::optional<EfficiencyMap>& eff = std::nullopt) {
  if (m.empty()) throw InvalidArgument("cannot estimate fractions from an empty dataset");
  if (eff && t.size() != m.size()) throw InvalidArgument("m and t differ in length");
  const std::size_t n = cow.size();
  std::vector<NeumaierSum> sums(n);
  NeumaierSum inv_eff;
  std::vector<double> w(n);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double e = detail::efficiency_at(eff, t, i, m[i]);
    if (!(e > 0.0)) throw InvalidArgument(detail::concat("efficiency is not positive at event ", i));
    cow.evaluate(m[i], w);
    for (std::size_t k = 0; k < n; ++k) sums[k] += w[k] / e;
    inv_eff += 1.0 / e;
  }
  FractionEstimate out;
  const double nn = static_cast<double>(m.size());
  out.D = eff ? nn / inv_eff.value() : 1.0;
  out.z.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.z[k] = out.D * sums[k].value() / nn;
  return out;
}

inline constexpr double min_efficiency = 1e-6;

/// Entry (i, k) = w_k(m_i) / eps(m_i, t_i).
inline Matrix efficiency_corrected_weights(const CowSet& cow, const std::optional<EfficiencyMap>& eff,
                                           std::span<const double> m, std::span<const double> t) {
  if (eff && t.size() != m.size()) throw InvalidArgument("m and t differ in length");
  const auto n = static_cast<Eigen::Index>(cow.size());
  Matrix out(static_cast<Eigen::Index>(m.size()), n);
  std::vector<double> w(cow.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double e = detail::efficiency_at(eff, t, i, m[i]);
    if (!(e >= min_efficiency))
      throw InvalidArgument(detail::concat("efficiency ", e, " at event ", i, " is below ", min_efficiency));
    cow.evaluate(m[i], w);
    for (Eigen::Index k = 0; k < n; ++k) out(static_cast<Eigen::Index>(i), k) = w[static_cast<std::size_t>(k)] / e;
  }
  return out;
}

/// Row sums over the signal block [0, n_signal) and the background block.
struct BlockWeights {
  std::vector<double> signal;
  std::vector<double> background;
};

inline BlockWeights block_weights(const Matrix& per_event, std::size_t n_signal) {
  BlockWeights b;
  const auto ns = static_cast<Eigen::Index>(n_signal);
  b.signal.resize(static_cast<std::size_t>(per_event.rows()));
  b.background.resize(static_cast<std::size_t>(per_event.rows()));
  for (Eigen::Index i = 0; i < per_event.rows(); ++i) {
    b.signal[static_cast<std::size_t>(i)] = per_event.row(i).head(ns).sum();
    b.background[static_cast<std::size_t>(i)] = per_event.row(i).tail(per_event.cols() - ns).sum();
  }
  return b;
}

struct MlVarianceResult {
  std::vector<double> z;
  CowSet cow;
  int iterations = 0;
  bool clipped = false;
  std::vector<std::vector<double>> trace;
};

/// Iterates I(m) = sum_k z_k g_k with z updated from the sample averages of
/// w_k/eps, starting from z_k = 1/n, until max |dz| < tol.
inline MlVarianceResult variance_fn_ml_iterative(const std::vector<Density1D>& basis, const Interval& support,
                                                 std::span<const double> m, std::span<const double> t,
                                                 const std::optional<EfficiencyMap>& eff, int max_iter = 50,
                                                 double tol = 1e-8, std::size_t n_signal = 1) {
  if (max_iter < 1) throw InvalidArgument("max_iter must be at least 1");
  if (basis.empty()) throw InvalidArgument("COW basis is empty");
  const std::size_t n = basis.size();
  std::vector<double> z(n, 1.0 / static_cast<double>(n));
  bool clipped = false;
  std::vector<std::vector<double>> trace{z};
  for (int it = 1; it <= max_iter; ++it) {
    CowSpec spec;
    spec.basis = basis;
    spec.n_signal = n_signal;
    spec.support = support;
    spec.variance = VarianceFunction::mixture(z, basis);
    spec.efficiency = eff;
    CowSet cow = build_cow(spec);
    auto est = estimate_fractions(cow, m, t, eff);
    std::vector<double> next = est.z;
    for (auto& v : next) {
      if (v < 0.0 || v > 1.0) {
        clipped = true;
        v = std::clamp(v, 0.0, 1.0);
      }
    }
    const double total = std::accumulate(next.begin(), next.end(), 0.0);
    if (total > 0.0)
      for (auto& v : next) v /= total;
    double delta = 0.0;
    for (std::size_t k = 0; k < n; ++k) delta = std::max(delta, std::abs(next[k] - z[k]));
    z = next;
    trace.push_back(z);
    if (delta < tol) {
      spec.variance = VarianceFunction::mixture(z, basis);
      return MlVarianceResult{z, build_cow(spec), it, clipped, std::move(trace)};
    }
  }
  std::ostringstream os;
  os.precision(10);
  os << "variance-function iteration did not converge in " << max_iter << " steps; trace:";
  for (const auto& row : trace) {
    os << " (";
    for (std::size_t k = 0; k < row.size(); ++k) os << (k ? ", " : "") << row[k];
    os << ")";
  }
  throw NotConvergedError(os.str());
}

}  // namespace cowlib
