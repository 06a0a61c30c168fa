#pragma once

// Classic sWeights: the W matrix from quadrature (A), from the sample (B) or
// from the fit covariance (Ci, Cii), and the weight functions built from it.

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cowlib/core.hpp"
#include "cowlib/density.hpp"
#include "cowlib/integrate.hpp"
#include "cowlib/mlfit.hpp"
#include "cowlib/optimize.hpp"

namespace cowlib {

enum class Variant { A, B, Ci, Cii, custom };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::A: return "A";
    case Variant::B: return "B";
    case Variant::Ci: return "Ci";
    case Variant::Cii: return "Cii";
    case Variant::custom: return "custom";
  }
  return "custom";
}

inline Variant variant_from_string(std::string_view s) {
  if (s == "A") return Variant::A;
  if (s == "B") return Variant::B;
  if (s == "Ci" || s == "C") return Variant::Ci;
  if (s == "Cii" || s == "D") return Variant::Cii;
  if (s == "custom" || s == "custom-I") return Variant::custom;
  throw InvalidArgument(detail::concat("unknown sWeights variant '", s, "'"));
}

struct WeightMatrix {
  Matrix W;
  Matrix A;
  Variant variant = Variant::A;
  std::vector<double> z_hat;
  std::string provenance;  // "quadrature", "data" or "fit"
};

namespace detail {

inline void check_fractions(std::span<const double> z, std::size_t n) {
  if (z.size() != n) throw InvalidArgument("one fraction per component is required");
  double s = 0.0;
  for (double v : z) s += v;
  if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument(detail::concat("fractions sum to ", s, ", expected 1"));
}

// Rejects a rank-deficient W; for two components det(W) <= 1e-14 ||W||^2.
inline void check_not_singular(const Matrix& W) {
  if (W.rows() == 2) {
    const double det = W(0, 0) * W(1, 1) - W(0, 1) * W(1, 0);
    if (!(det > 1e-14 * W.squaredNorm()))
      throw SingularMatrixError(
          "W matrix is singular: the component shapes are linearly dependent");
    return;
  }
  const Eigen::SelfAdjointEigenSolver<Matrix> es(W);
  if (!(es.eigenvalues().minCoeff() > 1e-14 * es.eigenvalues().maxCoeff()))
    throw SingularMatrixError("W matrix is singular: the component shapes are linearly dependent");
}

inline Matrix invert_weight_matrix(const Matrix& W) {
  if (W.rows() == 2) {
    const double det = W(0, 0) * W(1, 1) - W(0, 1) * W(1, 0);
    Matrix A(2, 2);
    A << W(1, 1) / det, -W(0, 1) / det, -W(1, 0) / det, W(0, 0) / det;
    return A;
  }
  return symmetric_inverse(W);
}

inline WeightMatrix finish(Matrix W, Variant v, std::vector<double> z, std::string prov) {
  W = 0.5 * (W + W.transpose()).eval();
  check_not_singular(W);
  WeightMatrix wm;
  wm.A = invert_weight_matrix(W);
  wm.W = std::move(W);
  wm.variant = v;
  wm.z_hat = std::move(z);
  wm.provenance = std::move(prov);
  return wm;
}

}  // namespace detail

/// W_kl = integral of g_k g_l / (sum_j z_j g_j) over the interval.
inline WeightMatrix compute_W_variant_A(std::span<const Density1D> g, std::span<const double> z,
                                        const Interval& iv, double tol = 1e-9) {
  const std::size_t n = g.size();
  if (n < 2) throw InvalidArgument("at least two components are required");
  detail::check_fractions(z, n);
  std::vector<double> bp;
  for (const auto& d : g) {
    auto b = d.breakpoints();
    bp.insert(bp.end(), b.begin(), b.end());
    if (d.support().lo > iv.lo) bp.push_back(d.support().lo);
    if (d.support().hi < iv.hi) bp.push_back(d.support().hi);
  }
  std::vector<double> vals(n);
  auto f = [&](double m, std::span<double> out) {
    double mix = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      vals[k] = g[k](m);
      mix += z[k] * vals[k];
    }
    std::size_t idx = 0;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = k; l < n; ++l) out[idx++] = mix > 0.0 ? vals[k] * vals[l] / mix : 0.0;
  };
  QuadratureOptions qo;
  qo.tol = tol;
  const auto r = integrate_vector(f, n * (n + 1) / 2, iv, qo, bp);
  Matrix W(n, n);
  std::size_t idx = 0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = k; l < n; ++l) {
      W(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) = r[idx];
      W(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = r[idx];
      ++idx;
    }
  return detail::finish(std::move(W), Variant::A, std::vector<double>(z.begin(), z.end()), "quadrature");
}

inline WeightMatrix compute_W_variant_A(const Density1D& gs, const Density1D& gb, double z,
                                        const Interval& iv, double tol = 1e-9) {
  if (!(z > 0.0 && z < 1.0)) throw InvalidArgument(detail::concat("signal fraction must lie in (0, 1), got ", z));
  const Density1D g[] = {gs, gb};
  const double zz[] = {z, 1.0 - z};
  return compute_W_variant_A(g, zz, iv, tol);
}

/// W_kl = (1/N) sum_i g_k(m_i) g_l(m_i) / (sum_j z_j g_j(m_i))^2.
inline WeightMatrix compute_W_variant_B(std::span<const Density1D> g, std::span<const double> z,
                                        std::span<const double> data) {
  const std::size_t n = g.size();
  if (n < 2) throw InvalidArgument("at least two components are required");
  detail::check_fractions(z, n);
  if (data.empty()) throw InvalidArgument("variant B needs a non-empty dataset");
  std::vector<NeumaierSum> sums(n * n);
  std::vector<double> vals(n);
  for (std::size_t i = 0; i < data.size(); ++i) {
    double mix = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      vals[k] = g[k](data[i]);
      mix += z[k] * vals[k];
    }
    if (mix == 0.0 || !std::isfinite(mix))
      throw InvalidArgument(detail::concat("mixture density vanishes at observation ", i, " (m=", data[i], ")"));
    const double inv = 1.0 / (mix * mix);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = k; l < n; ++l) sums[k * n + l] += vals[k] * vals[l] * inv;
  }
  Matrix W(n, n);
  const double norm = 1.0 / static_cast<double>(data.size());
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = k; l < n; ++l) {
      const double v = sums[k * n + l].value() * norm;
      W(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) = v;
      W(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = v;
    }
  return detail::finish(std::move(W), Variant::B, std::vector<double>(z.begin(), z.end()), "data");
}

inline WeightMatrix compute_W_variant_B(const Density1D& gs, const Density1D& gb, double z,
                                        std::span<const double> data) {
  if (!(z > 0.0 && z < 1.0)) throw InvalidArgument(detail::concat("signal fraction must lie in (0, 1), got ", z));
  const Density1D g[] = {gs, gb};
  const double zz[] = {z, 1.0 - z};
  return compute_W_variant_B(g, zz, data);
}

enum class CovarianceMode { invert_full, yields_only };

/// W from a converged fit whose leading n_components parameters are yields.
/// invert_full: invert the full covariance first, then take the yield block
/// times N. yields_only: the yield block of the covariance divided by N is A.
inline WeightMatrix compute_W_variant_C(const FitResult& fit, std::size_t n_events, CovarianceMode mode,
                                        std::size_t n_components = 2) {
  if (!fit.converged) throw InvalidArgument("variant C needs a converged fit");
  if (!fit.has_covariance()) throw SingularMatrixError("fit covariance is not available");
  if (n_events == 0) throw InvalidArgument("variant C needs N > 0");
  const auto k = static_cast<Eigen::Index>(n_components);
  if (fit.covariance.rows() < k) throw InvalidArgument("fit has fewer parameters than components");
  const double n = static_cast<double>(n_events);
  std::vector<double> z(fit.params.begin(), fit.params.begin() + k);
  const double total = accurate_sum(z);
  for (auto& v : z) v /= total;
  if (mode == CovarianceMode::invert_full) {
    Matrix inv;
    try {
      inv = symmetric_inverse(fit.covariance);
    } catch (const SingularMatrixError&) {
      throw SingularMatrixError("fit covariance is not invertible");
    }
    Matrix W = n * inv.topLeftCorner(k, k);
    return detail::finish(std::move(W), Variant::Ci, std::move(z), "fit");
  }
  Matrix A = fit.covariance.topLeftCorner(k, k) / n;
  A = 0.5 * (A + A.transpose()).eval();
  Matrix W;
  try {
    W = symmetric_inverse(A);
  } catch (const SingularMatrixError&) {
    throw SingularMatrixError("yield covariance is not invertible");
  }
  detail::check_not_singular(W);
  WeightMatrix wm;
  wm.W = std::move(W);
  wm.A = std::move(A);
  wm.variant = Variant::Cii;
  wm.z_hat = std::move(z);
  wm.provenance = "fit";
  return wm;
}

/// Weight functions w_k(m) = sum_l A_kl g_l(m) / sum_l a_l g_l(m) with a = A 1.
/// For two components this is the classic sWeights closed form; the k
/// weights sum to one at every m.
class WeightFunctionSet {
 public:
  WeightFunctionSet(WeightMatrix wm, std::vector<Density1D> g, bool strict = true)
      : wm_(std::move(wm)), g_(std::move(g)), strict_(strict) {
    const auto n = static_cast<Eigen::Index>(g_.size());
    if (n < 2 || wm_.A.rows() != n) throw InvalidArgument("weight matrix does not match the densities");
    alpha_ = wm_.A * Vector::Ones(n);
    support_ = g_.front().support();
    for (const auto& d : g_)
      support_ = Interval(std::min(support_.lo, d.support().lo), std::max(support_.hi, d.support().hi));
    constexpr int probes = 10000;
    int bad = 0;
    for (int i = 0; i < probes; ++i) {
      const double m = support_.lo + support_.width() * (i + 0.5) / probes;
      if (!(denominator(m) > 0.0)) ++bad;
    }
    if (bad > 0)
      warning_ = detail::concat("weight-function denominator is not positive at ", bad, " of ", probes,
                                " probe points");
  }

  std::size_t size() const noexcept { return g_.size(); }
  const WeightMatrix& matrix() const noexcept { return wm_; }
  std::span<const Density1D> densities() const noexcept { return g_; }
  const std::string& warning() const noexcept { return warning_; }
  bool strict() const noexcept { return strict_; }
  const Interval& support() const noexcept { return support_; }

  /// Implied variance function sum_l a_l g_l(m).
  double denominator(double m) const {
    double d = 0.0;
    for (std::size_t l = 0; l < g_.size(); ++l) d += alpha_[static_cast<Eigen::Index>(l)] * value(l, m);
    return d;
  }

  void evaluate(double m, std::span<double> out) const {
    if (strict_ && !support_.contains(m))
      throw OutOfRangeError(detail::concat("m=", m, " lies outside the weight-function range [",
                                           support_.lo, ", ", support_.hi, "]"));
    const std::size_t n = g_.size();
    double gv[16];
    std::vector<double> big;
    double* gp = gv;
    if (n > 16) {
      big.resize(n);
      gp = big.data();
    }
    double den = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      gp[l] = value(l, m);
      den += alpha_[static_cast<Eigen::Index>(l)] * gp[l];
    }
    if (den == 0.0) throw NonFiniteError(detail::concat("weight-function denominator is zero at m=", m));
    for (std::size_t k = 0; k < n; ++k) {
      double num = 0.0;
      for (std::size_t l = 0; l < n; ++l)
        num += wm_.A(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) * gp[l];
      out[k] = num / den;
    }
  }

  double operator()(std::size_t k, double m) const {
    std::vector<double> out(g_.size());
    evaluate(m, out);
    return out[k];
  }

 private:
  double value(std::size_t l, double m) const { return strict_ ? g_[l](m) : g_[l].extrapolate(m); }

  WeightMatrix wm_;
  std::vector<Density1D> g_;
  bool strict_;
  Vector alpha_;
  Interval support_;
  std::string warning_;
};

inline WeightFunctionSet weight_functions(const WeightMatrix& wm, std::vector<Density1D> g, bool strict = true) {
  return WeightFunctionSet(wm, std::move(g), strict);
}

inline WeightFunctionSet weight_functions(const WeightMatrix& wm, const Density1D& gs, const Density1D& gb,
                                          bool strict = true) {
  return WeightFunctionSet(wm, {gs, gb}, strict);
}

/// Per-event weights, one row per observation and one column per component.
inline Matrix apply_weights(const WeightFunctionSet& wfs, std::span<const double> data) {
  const auto n = static_cast<Eigen::Index>(wfs.size());
  Matrix out(static_cast<Eigen::Index>(data.size()), n);
  std::vector<double> row(wfs.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    wfs.evaluate(data[i], row);
    for (Eigen::Index k = 0; k < n; ++k) out(static_cast<Eigen::Index>(i), k) = row[static_cast<std::size_t>(k)];
  }
  return out;
}

}  // namespace cowlib
