#pragma once

// One-dimensional probability densities truncated to a finite interval,
// weighted histograms, and efficiency maps over (m, t).

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/binomial.hpp>
#include <boost/math/special_functions/erf.hpp>

#include "cowlib/core.hpp"
#include "cowlib/integrate.hpp"

namespace cowlib {

enum class DensityKind { normal, exponential, uniform, monomial, bernstein, histogram, mixture, table };

inline std::string_view to_string(DensityKind k) {
  switch (k) {
    case DensityKind::normal: return "normal";
    case DensityKind::exponential: return "exponential";
    case DensityKind::uniform: return "uniform";
    case DensityKind::monomial: return "monomial";
    case DensityKind::bernstein: return "bernstein";
    case DensityKind::histogram: return "histogram";
    case DensityKind::mixture: return "mixture";
    case DensityKind::table: return "table";
  }
  return "unknown";
}

inline DensityKind density_kind_from_string(std::string_view s) {
  if (s == "normal" || s == "gauss" || s == "gaussian") return DensityKind::normal;
  if (s == "exponential" || s == "exp") return DensityKind::exponential;
  if (s == "uniform") return DensityKind::uniform;
  if (s == "monomial" || s == "monomial-basis-element") return DensityKind::monomial;
  if (s == "bernstein") return DensityKind::bernstein;
  if (s == "histogram") return DensityKind::histogram;
  if (s == "mixture") return DensityKind::mixture;
  if (s == "table" || s == "custom-table") return DensityKind::table;
  throw InvalidArgument(detail::concat("unknown density kind '", s, "'"));
}

namespace detail {

inline constexpr double inv_sqrt2 = 0.70710678118654752440;
inline constexpr double inv_sqrt2pi = 0.39894228040143267794;

inline double std_normal_pdf(double x) { return inv_sqrt2pi * std::exp(-0.5 * x * x); }

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * inv_sqrt2); }

// P(a < X < b) for a standard normal, accurate in both tails and near zero.
inline double std_normal_mass(double a, double b) {
  if (a >= 0.0) return 0.5 * (std::erfc(a * inv_sqrt2) - std::erfc(b * inv_sqrt2));
  if (b <= 0.0) return 0.5 * (std::erfc(-b * inv_sqrt2) - std::erfc(-a * inv_sqrt2));
  return 0.5 * (std::erf(b * inv_sqrt2) - std::erf(a * inv_sqrt2));
}

inline double std_normal_quantile(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

}  // namespace detail

/// A normalized probability density on a finite support. Values are immutable
/// after construction; copies are cheap apart from histogram/table payloads.
class Density1D {
 public:
  Density1D() : Density1D(uniform(Interval(0.0, 1.0))) {}

  static Density1D normal(double mu, double sigma, Interval support) {
    if (!std::isfinite(mu) || !(sigma > 0.0) || !std::isfinite(sigma))
      throw InvalidArgument(detail::concat("normal density needs finite mu and sigma > 0, got mu=", mu,
                                           " sigma=", sigma));
    Density1D d(DensityKind::normal, {mu, sigma}, support);
    d.prepare();
    return d;
  }

  /// Density proportional to exp(-slope * (x - lo)); slope may be zero or negative.
  static Density1D exponential(double slope, Interval support) {
    if (!std::isfinite(slope)) throw InvalidArgument("exponential slope must be finite");
    Density1D d(DensityKind::exponential, {slope}, support);
    d.prepare();
    return d;
  }

  static Density1D uniform(Interval support) {
    Density1D d(DensityKind::uniform, {}, support);
    d.prepare();
    return d;
  }

  /// k * u^(k-1) / width with u the position mapped affinely onto [0, 1].
  static Density1D monomial(double k, Interval support) {
    if (!(k > 0.0) || !std::isfinite(k))
      throw InvalidArgument(detail::concat("monomial order must be positive, got ", k));
    Density1D d(DensityKind::monomial, {k}, support);
    d.prepare();
    return d;
  }

  /// Bernstein polynomial b_{i,n}(u) scaled to unit integral: (n+1) b_{i,n}(u) / width.
  static Density1D bernstein(int i, int n, Interval support) {
    if (n < 0 || i < 0 || i > n)
      throw InvalidArgument(detail::concat("bernstein element needs 0 <= i <= n, got i=", i, ", n=", n));
    Density1D d(DensityKind::bernstein, {static_cast<double>(i), static_cast<double>(n)}, support);
    d.prepare();
    return d;
  }

  /// Piecewise-constant density; heights are renormalized to unit integral.
  static Density1D histogram(std::vector<double> edges, std::vector<double> heights) {
    if (edges.size() < 2 || heights.size() + 1 != edges.size())
      throw InvalidArgument("histogram density needs len(heights) == len(edges) - 1 >= 1");
    for (std::size_t i = 0; i + 1 < edges.size(); ++i)
      if (!(edges[i] < edges[i + 1])) throw InvalidArgument("histogram edges must increase strictly");
    Density1D d(DensityKind::histogram, std::move(heights), Interval(edges.front(), edges.back()));
    d.grid_ = std::move(edges);
    d.prepare();
    return d;
  }

  /// Linear interpolation through (x, y) nodes spanning the support; renormalized.
  static Density1D table(std::vector<double> x, std::vector<double> y) {
    if (x.size() < 2 || x.size() != y.size())
      throw InvalidArgument("table density needs at least two nodes and matching sizes");
    for (std::size_t i = 0; i + 1 < x.size(); ++i)
      if (!(x[i] < x[i + 1])) throw InvalidArgument("table nodes must increase strictly");
    Density1D d(DensityKind::table, std::move(y), Interval(x.front(), x.back()));
    d.grid_ = std::move(x);
    d.prepare();
    return d;
  }

  /// Convex combination of densities; fractions must sum to one within 1e-12.
  static Density1D mixture(std::vector<double> fractions, std::vector<Density1D> components) {
    if (fractions.empty() || fractions.size() != components.size())
      throw InvalidArgument("mixture needs one fraction per component");
    double sum = 0.0;
    for (double f : fractions) {
      if (!(f >= 0.0)) throw InvalidArgument("mixture fractions must be non-negative");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw InvalidArgument(detail::concat("mixture fractions sum to ", sum, ", expected 1"));
    Interval sup(components.front().support().lo, components.front().support().hi);
    for (const auto& c : components) {
      sup = Interval(std::min(sup.lo, c.support().lo), std::max(sup.hi, c.support().hi));
    }
    Density1D d(DensityKind::mixture, std::move(fractions), sup);
    d.components_ = std::make_shared<const std::vector<Density1D>>(std::move(components));
    d.prepare();
    return d;
  }

  DensityKind kind() const noexcept { return kind_; }
  std::span<const double> params() const noexcept { return params_; }
  std::size_t n_params() const noexcept { return params_.size(); }
  const Interval& support() const noexcept { return support_; }
  /// Bin edges (histogram) or interpolation nodes (table); empty otherwise.
  std::span<const double> grid() const noexcept { return grid_; }
  std::span<const Density1D> components() const noexcept {
    if (!components_) return {};
    return *components_;
  }

  /// Density value; zero outside the support.
  double operator()(double x) const {
    if (x < support_.lo || x > support_.hi) return 0.0;
    return raw(x);
  }

  /// The defining formula continued beyond the support (histogram and table
  /// kinds hold their edge values).
  double extrapolate(double x) const { return raw(x); }

  Density1D with_params(std::span<const double> p) const {
    if (p.size() != params_.size())
      throw InvalidArgument(detail::concat("expected ", params_.size(), " parameters, got ", p.size()));
    switch (kind_) {
      case DensityKind::normal: return normal(p[0], p[1], support_);
      case DensityKind::exponential: return exponential(p[0], support_);
      case DensityKind::uniform: return *this;
      case DensityKind::monomial: return monomial(p[0], support_);
      case DensityKind::bernstein:
        return bernstein(static_cast<int>(std::lround(p[0])), static_cast<int>(std::lround(p[1])), support_);
      case DensityKind::histogram:
        return histogram(grid_, std::vector<double>(p.begin(), p.end()));
      case DensityKind::table: return table(grid_, std::vector<double>(p.begin(), p.end()));
      case DensityKind::mixture:
        return mixture(std::vector<double>(p.begin(), p.end()), *components_);
    }
    return *this;
  }

  bool has_analytic_gradient() const noexcept {
    return kind_ == DensityKind::normal || kind_ == DensityKind::exponential ||
           kind_ == DensityKind::uniform;
  }

  /// d ln g(x) / d params. Analytic for normal and exponential; central
  /// differences of the renormalized density otherwise.
  void log_gradient(double x, std::span<double> out) const {
    switch (kind_) {
      case DensityKind::normal: {
        const double mu = params_[0], sigma = params_[1];
        const double u = (x - mu) / sigma;
        const double pa = detail::std_normal_pdf(alpha_), pb = detail::std_normal_pdf(beta_);
        // Z = Phi(beta) - Phi(alpha); dZ/dmu and dZ/dsigma.
        const double dz_dmu = -(pb - pa) / sigma;
        const double dz_dsigma = -(beta_ * pb - alpha_ * pa) / sigma;
        out[0] = u / sigma - dz_dmu / mass_;
        out[1] = (u * u - 1.0) / sigma - dz_dsigma / mass_;
        return;
      }
      case DensityKind::exponential: {
        const double lam = params_[0];
        const double len = support_.width();
        const double xl = lam * len;
        double dlognorm;
        if (std::abs(xl) < 1e-4)
          dlognorm = len * (-0.5 + xl / 12.0 - xl * xl * xl / 720.0);
        else
          dlognorm = len / std::expm1(xl) - 1.0 / lam;
        out[0] = -(x - support_.lo) - dlognorm;
        return;
      }
      case DensityKind::uniform: return;
      default: break;
    }
    for (std::size_t j = 0; j < params_.size(); ++j) {
      std::vector<double> p(params_);
      const double h = 1e-6 * std::max(std::abs(p[j]), 1.0);
      p[j] = params_[j] + h;
      const double up = std::log(with_params(p).extrapolate(x));
      p[j] = params_[j] - h;
      const double dn = std::log(with_params(p).extrapolate(x));
      out[j] = (up - dn) / (2.0 * h);
    }
  }

  /// d g(x) / d params.
  void gradient(double x, std::span<double> out) const {
    log_gradient(x, out);
    const double v = extrapolate(x);
    for (auto& o : out) o *= v;
  }

  /// Interior points where the density is not smooth.
  std::vector<double> breakpoints() const {
    std::vector<double> bp;
    if (kind_ == DensityKind::histogram || kind_ == DensityKind::table) {
      bp.assign(grid_.begin() + 1, grid_.end() - 1);
    } else if (kind_ == DensityKind::mixture) {
      for (const auto& c : *components_) {
        auto cb = c.breakpoints();
        bp.insert(bp.end(), cb.begin(), cb.end());
        if (c.support().lo > support_.lo) bp.push_back(c.support().lo);
        if (c.support().hi < support_.hi) bp.push_back(c.support().hi);
      }
      std::sort(bp.begin(), bp.end());
      bp.erase(std::unique(bp.begin(), bp.end()), bp.end());
    }
    return bp;
  }

  double cdf(double x) const {
    if (x <= support_.lo) return 0.0;
    if (x >= support_.hi) return 1.0;
    switch (kind_) {
      case DensityKind::normal: {
        const double u = (x - params_[0]) / params_[1];
        return detail::std_normal_mass(alpha_, u) / mass_;
      }
      case DensityKind::exponential: {
        const double lam = params_[0];
        const double d = x - support_.lo;
        if (std::abs(lam * support_.width()) < 1e-12) return d / support_.width();
        return std::expm1(-lam * d) / std::expm1(-lam * support_.width());
      }
      case DensityKind::uniform: return (x - support_.lo) / support_.width();
      case DensityKind::monomial: return std::pow((x - support_.lo) / support_.width(), params_[0]);
      case DensityKind::bernstein:
        return boost::math::ibeta(params_[0] + 1.0, params_[1] - params_[0] + 1.0,
                                  std::clamp((x - support_.lo) / support_.width(), 0.0, 1.0));
      case DensityKind::histogram: {
        const auto it = std::upper_bound(grid_.begin(), grid_.end(), x);
        const std::size_t bin = static_cast<std::size_t>(it - grid_.begin()) - 1;
        return cumulative_[bin] + heights_[bin] * (x - grid_[bin]);
      }
      case DensityKind::mixture: {
        double c = 0.0;
        for (std::size_t k = 0; k < params_.size(); ++k) c += params_[k] * (*components_)[k].cdf(x);
        return c;
      }
      case DensityKind::table:
        return integrate([this](double y) { return raw(y); }, Interval(support_.lo, x), 1e-12,
                         grid_);
    }
    return 0.0;
  }

  /// Inverse CDF for kinds with a closed form (and histograms); bisection otherwise.
  double quantile(double p) const {
    p = std::clamp(p, 0.0, 1.0);
    switch (kind_) {
      case DensityKind::normal: {
        const double mu = params_[0], sigma = params_[1];
        const double pa = detail::std_normal_cdf(alpha_);
        const double x = mu + sigma * detail::std_normal_quantile(pa + p * mass_);
        return std::clamp(x, support_.lo, support_.hi);
      }
      case DensityKind::exponential: {
        const double lam = params_[0];
        const double len = support_.width();
        if (std::abs(lam * len) < 1e-12) return support_.lo + p * len;
        return std::clamp(support_.lo - std::log1p(p * std::expm1(-lam * len)) / lam, support_.lo,
                          support_.hi);
      }
      case DensityKind::uniform: return support_.lo + p * support_.width();
      case DensityKind::monomial:
        return support_.lo + support_.width() * std::pow(p, 1.0 / params_[0]);
      case DensityKind::bernstein:
        return support_.lo +
               support_.width() * boost::math::ibeta_inv(params_[0] + 1.0, params_[1] - params_[0] + 1.0, p);
      case DensityKind::histogram: {
        const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), p);
        std::size_t bin = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - cumulative_.begin() - 1, 0));
        bin = std::min(bin, heights_.size() - 1);
        return std::min(grid_[bin] + (p - cumulative_[bin]) / heights_[bin], grid_[bin + 1]);
      }
      default: break;
    }
    double lo = support_.lo, hi = support_.hi;
    for (int i = 0; i < 200 && hi - lo > 1e-15 * std::max(1.0, std::abs(hi)); ++i) {
      const double mid = 0.5 * (lo + hi);
      (cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }

 private:
  Density1D(DensityKind kind, std::vector<double> params, Interval support)
      : kind_(kind), params_(std::move(params)), support_(support) {}

  double raw(double x) const {
    switch (kind_) {
      case DensityKind::normal: {
        const double u = (x - params_[0]) / params_[1];
        return scale_ * std::exp(-0.5 * u * u);
      }
      case DensityKind::exponential: return scale_ * std::exp(-params_[0] * (x - support_.lo));
      case DensityKind::uniform: return scale_;
      case DensityKind::monomial: {
        const double u = (x - support_.lo) / support_.width();
        if (params_[0] == 1.0) return scale_;
        if (u <= 0.0) return params_[0] < 1.0 ? std::numeric_limits<double>::infinity() : 0.0;
        return scale_ * params_[0] * std::pow(u, params_[0] - 1.0);
      }
      case DensityKind::bernstein: {
        const double u = (x - support_.lo) / support_.width();
        const int i = static_cast<int>(params_[0]), n = static_cast<int>(params_[1]);
        return scale_ * std::pow(u, i) * std::pow(1.0 - u, n - i);
      }
      case DensityKind::histogram: {
        if (x <= grid_.front()) return heights_.front();
        if (x >= grid_.back()) return heights_.back();
        const auto it = std::upper_bound(grid_.begin(), grid_.end(), x);
        return heights_[static_cast<std::size_t>(it - grid_.begin()) - 1];
      }
      case DensityKind::table: {
        if (x <= grid_.front()) return heights_.front();
        if (x >= grid_.back()) return heights_.back();
        const auto it = std::upper_bound(grid_.begin(), grid_.end(), x);
        const std::size_t i = static_cast<std::size_t>(it - grid_.begin()) - 1;
        const double f = (x - grid_[i]) / (grid_[i + 1] - grid_[i]);
        return heights_[i] + f * (heights_[i + 1] - heights_[i]);
      }
      case DensityKind::mixture: {
        double v = 0.0;
        for (std::size_t k = 0; k < params_.size(); ++k)
          if (params_[k] != 0.0) v += params_[k] * (*components_)[k].extrapolate(x);
        return v;
      }
    }
    return 0.0;
  }

  void prepare() {
    switch (kind_) {
      case DensityKind::normal: {
        const double mu = params_[0], sigma = params_[1];
        alpha_ = (support_.lo - mu) / sigma;
        beta_ = (support_.hi - mu) / sigma;
        mass_ = detail::std_normal_mass(alpha_, beta_);
        if (!(mass_ > 0.0))
          throw InvalidArgument(detail::concat("normal(", mu, ", ", sigma,
                                               ") has no probability mass on the support"));
        scale_ = detail::inv_sqrt2pi / (sigma * mass_);
        break;
      }
      case DensityKind::exponential: {
        const double xl = params_[0] * support_.width();
        const double norm =
            std::abs(xl) < 1e-12 ? support_.width() : -std::expm1(-xl) / params_[0];
        if (!(norm > 0.0) || !std::isfinite(norm))
          throw InvalidArgument("exponential slope too large for the support");
        scale_ = 1.0 / norm;
        break;
      }
      case DensityKind::uniform: scale_ = 1.0 / support_.width(); break;
      case DensityKind::monomial: scale_ = 1.0 / support_.width(); break;
      case DensityKind::bernstein: {
        const int i = static_cast<int>(params_[0]), n = static_cast<int>(params_[1]);
        scale_ = (n + 1) * boost::math::binomial_coefficient<double>(static_cast<unsigned>(n), static_cast<unsigned>(i)) /
                 support_.width();
        break;
      }
      case DensityKind::histogram: {
        double total = 0.0;
        for (std::size_t i = 0; i < params_.size(); ++i) {
          if (!(params_[i] >= 0.0) || !std::isfinite(params_[i]))
            throw InvalidArgument("histogram heights must be finite and non-negative");
          total += params_[i] * (grid_[i + 1] - grid_[i]);
        }
        if (!(total > 0.0)) throw InvalidArgument("histogram density has zero total content");
        heights_.resize(params_.size());
        cumulative_.assign(params_.size() + 1, 0.0);
        for (std::size_t i = 0; i < params_.size(); ++i) {
          heights_[i] = params_[i] / total;
          params_[i] = heights_[i];
          cumulative_[i + 1] = cumulative_[i] + heights_[i] * (grid_[i + 1] - grid_[i]);
        }
        break;
      }
      case DensityKind::table: {
        double total = 0.0;
        for (std::size_t i = 0; i < params_.size(); ++i) {
          if (!(params_[i] >= 0.0) || !std::isfinite(params_[i]))
            throw InvalidArgument("table values must be finite and non-negative");
          if (i + 1 < params_.size())
            total += 0.5 * (params_[i] + params_[i + 1]) * (grid_[i + 1] - grid_[i]);
        }
        if (!(total > 0.0)) throw InvalidArgument("table density has zero integral");
        for (auto& v : params_) v /= total;
        heights_ = params_;
        break;
      }
      case DensityKind::mixture: break;
    }
  }

  DensityKind kind_ = DensityKind::uniform;
  std::vector<double> params_;
  Interval support_;
  std::vector<double> grid_;
  std::vector<double> heights_;
  std::vector<double> cumulative_;
  std::shared_ptr<const std::vector<Density1D>> components_;
  double scale_ = 1.0;
  double alpha_ = 0.0, beta_ = 0.0, mass_ = 1.0;
};

/// Builds a density from a kind tag and its parameter vector.
///   normal: {mu, sigma}; exponential: {slope}; uniform: {}; monomial: {k}.
inline Density1D make_density(DensityKind kind, std::span<const double> params, Interval support) {
  auto need = [&](std::size_t n) {
    if (params.size() != n)
      throw InvalidArgument(detail::concat(to_string(kind), " density expects ", n, " parameters, got ",
                                           params.size()));
  };
  switch (kind) {
    case DensityKind::normal: need(2); return Density1D::normal(params[0], params[1], support);
    case DensityKind::exponential: need(1); return Density1D::exponential(params[0], support);
    case DensityKind::uniform: need(0); return Density1D::uniform(support);
    case DensityKind::monomial: need(1); return Density1D::monomial(params[0], support);
    case DensityKind::bernstein:
      need(2);
      return Density1D::bernstein(static_cast<int>(std::lround(params[0])), static_cast<int>(std::lround(params[1])),
                                  support);
    case DensityKind::histogram: {
      // Uniform binning over the support with the given heights.
      if (params.empty()) throw InvalidArgument("histogram density needs at least one bin");
      std::vector<double> edges(params.size() + 1);
      for (std::size_t i = 0; i <= params.size(); ++i)
        edges[i] = support.lo + support.width() * static_cast<double>(i) / static_cast<double>(params.size());
      edges.back() = support.hi;
      return Density1D::histogram(std::move(edges), std::vector<double>(params.begin(), params.end()));
    }
    case DensityKind::table: {
      if (params.size() < 2) throw InvalidArgument("table density needs at least two values");
      std::vector<double> x(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        x[i] = support.lo + support.width() * static_cast<double>(i) / static_cast<double>(params.size() - 1);
      x.back() = support.hi;
      return Density1D::table(std::move(x), std::vector<double>(params.begin(), params.end()));
    }
    case DensityKind::mixture:
      throw InvalidArgument("mixture densities are built from components, not a flat parameter list");
  }
  throw InvalidArgument("unknown density kind");
}

/// Elements k * u^(k-1), k = 1..n, on the support (u mapped onto [0, 1]).
inline std::vector<Density1D> monomial_basis(int n, Interval support = Interval(0.0, 1.0)) {
  if (n < 1) throw InvalidArgument("monomial basis needs n >= 1");
  std::vector<Density1D> basis;
  basis.reserve(static_cast<std::size_t>(n));
  for (int k = 1; k <= n; ++k) basis.push_back(Density1D::monomial(k, support));
  return basis;
}

/// Bernstein elements b_{i,n}, i = 0..n, each scaled to unit integral. They
/// span the same polynomials as monomial_basis(n + 1) with better conditioning.
inline std::vector<Density1D> bernstein_basis(int n, Interval support = Interval(0.0, 1.0)) {
  if (n < 0) throw InvalidArgument("bernstein basis needs degree n >= 0");
  std::vector<Density1D> basis;
  for (int i = 0; i <= n; ++i) basis.push_back(Density1D::bernstein(i, n, support));
  return basis;
}

/// Weighted 1-D histogram carrying per-bin sums of weights and of squared weights.
struct Histogram1D {
  std::vector<double> edges;
  std::vector<double> contents;
  std::vector<double> sumw2;

  Histogram1D() = default;
  explicit Histogram1D(std::vector<double> e) : edges(std::move(e)) {
    if (edges.size() < 2) throw InvalidArgument("histogram needs at least one bin");
    for (std::size_t i = 0; i + 1 < edges.size(); ++i)
      if (!(edges[i] < edges[i + 1])) throw InvalidArgument("histogram edges must increase strictly");
    contents.assign(edges.size() - 1, 0.0);
    sumw2.assign(edges.size() - 1, 0.0);
  }

  static Histogram1D uniform(std::size_t bins, Interval range) {
    if (bins < 1) throw InvalidArgument("histogram needs at least one bin");
    std::vector<double> e(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i)
      e[i] = range.lo + range.width() * static_cast<double>(i) / static_cast<double>(bins);
    e.back() = range.hi;
    return Histogram1D(std::move(e));
  }

  std::size_t bins() const noexcept { return contents.size(); }
  double width(std::size_t i) const { return edges[i + 1] - edges[i]; }

  /// Bin index of x, or nullopt when outside [edges.front(), edges.back()].
  std::optional<std::size_t> find_bin(double x) const {
    if (!(x >= edges.front() && x <= edges.back())) return std::nullopt;
    if (x == edges.back()) return bins() - 1;
    const auto it = std::upper_bound(edges.begin(), edges.end(), x);
    return static_cast<std::size_t>(it - edges.begin()) - 1;
  }

  bool fill(double x, double w = 1.0) {
    const auto bin = find_bin(x);
    if (!bin) return false;
    contents[*bin] += w;
    sumw2[*bin] += w * w;
    return true;
  }

  double total() const { return accurate_sum(contents); }
};

struct HistogramDensity {
  Density1D density;
  Histogram1D histogram;     // raw weighted fill, before flooring
  std::size_t dropped = 0;   // samples outside the support
};

/// Piecewise-constant density estimate from weighted samples. Empty (or
/// non-positive) bins are floored at 1e-3 times the smallest positive bin so
/// the result is strictly positive on the support.
inline HistogramDensity histogram_density(std::span<const double> samples,
                                          std::span<const double> weights, std::size_t bins,
                                          Interval support) {
  if (!weights.empty() && weights.size() != samples.size())
    throw InvalidArgument("weights must be empty or match the samples");
  HistogramDensity out{Density1D(), Histogram1D::uniform(bins, support), 0};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    if (!std::isfinite(w)) throw InvalidArgument(detail::concat("non-finite weight at sample ", i));
    if (!out.histogram.fill(samples[i], w)) ++out.dropped;
  }
  const auto& h = out.histogram;
  double smallest = std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (std::size_t i = 0; i < h.bins(); ++i) {
    if (h.contents[i] > 0.0) {
      smallest = std::min(smallest, h.contents[i] / h.width(i));
      total += h.contents[i];
    }
  }
  if (!(total > 0.0)) throw InvalidArgument("histogram density has zero total weight");
  std::vector<double> heights(h.bins());
  for (std::size_t i = 0; i < h.bins(); ++i)
    heights[i] = h.contents[i] > 0.0 ? h.contents[i] / h.width(i) : 1e-3 * smallest;
  out.density = Density1D::histogram(h.edges, std::move(heights));
  return out;
}

/// Frequency weight eps(m, t) in (0, 1]. Either a constant, a bilinear
/// polynomial c0 + cm*m + ct*t + cmt*m*t over a rectangle, or a grid of
/// values on (m, t) rectangles.
class EfficiencyMap {
 public:
  enum class Kind { constant, bilinear, grid };

  EfficiencyMap() = default;

  static EfficiencyMap constant(double value) {
    if (!(value > 0.0 && value <= 1.0))
      throw InvalidArgument(detail::concat("constant efficiency must lie in (0, 1], got ", value));
    EfficiencyMap e;
    e.kind_ = Kind::constant;
    e.params_ = {value};
    return e;
  }

  static EfficiencyMap bilinear(double c0, double cm, double ct, double cmt, Interval m_range,
                                Interval t_range) {
    EfficiencyMap e;
    e.kind_ = Kind::bilinear;
    e.params_ = {c0, cm, ct, cmt};
    e.m_range_ = m_range;
    e.t_range_ = t_range;
    // A bilinear function attains its extremes at the corners.
    for (double m : {m_range.lo, m_range.hi})
      for (double t : {t_range.lo, t_range.hi}) {
        const double v = e(m, t);
        if (!(v > 0.0 && v <= 1.0))
          throw InvalidArgument(
              detail::concat("bilinear efficiency leaves (0, 1] at (", m, ", ", t, "): ", v));
      }
    return e;
  }

  /// values are row-major: values[i * (t_edges.size() - 1) + j] for m bin i, t bin j.
  static EfficiencyMap grid(std::vector<double> m_edges, std::vector<double> t_edges,
                            std::vector<double> values) {
    const Histogram1D mh(m_edges), th(t_edges);  // validates edges
    if (values.size() != mh.bins() * th.bins())
      throw InvalidArgument("efficiency grid has the wrong number of values");
    for (double v : values)
      if (!(v > 0.0 && v <= 1.0)) throw InvalidArgument("efficiency grid values must lie in (0, 1]");
    EfficiencyMap e;
    e.kind_ = Kind::grid;
    e.m_range_ = Interval(m_edges.front(), m_edges.back());
    e.t_range_ = Interval(t_edges.front(), t_edges.back());
    e.m_edges_ = std::move(m_edges);
    e.t_edges_ = std::move(t_edges);
    e.params_ = std::move(values);
    return e;
  }

  Kind kind() const noexcept { return kind_; }
  std::span<const double> params() const noexcept { return params_; }
  std::span<const double> m_edges() const noexcept { return m_edges_; }
  std::span<const double> t_edges() const noexcept { return t_edges_; }
  const Interval& m_range() const noexcept { return m_range_; }
  const Interval& t_range() const noexcept { return t_range_; }
  bool is_unity() const noexcept { return kind_ == Kind::constant && params_[0] == 1.0; }

  double operator()(double m, double t) const {
    switch (kind_) {
      case Kind::constant: return params_[0];
      case Kind::bilinear:
        return params_[0] + params_[1] * m + params_[2] * t + params_[3] * m * t;
      case Kind::grid: {
        const auto locate = [](const std::vector<double>& e, double x) {
          if (x <= e.front()) return std::size_t{0};
          if (x >= e.back()) return e.size() - 2;
          return static_cast<std::size_t>(std::upper_bound(e.begin(), e.end(), x) - e.begin()) - 1;
        };
        return params_[locate(m_edges_, m) * (t_edges_.size() - 1) + locate(t_edges_, t)];
      }
    }
    return 1.0;
  }

 private:
  Kind kind_ = Kind::constant;
  std::vector<double> params_{1.0};
  Interval m_range_;
  Interval t_range_;
  std::vector<double> m_edges_, t_edges_;
};

}  // namespace cowlib
