#pragma once

// Extended unbinned maximum-likelihood fits of mixtures in m, and weighted
// maximum-likelihood fits of a single density in t.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cowlib/core.hpp"
#include "cowlib/density.hpp"
#include "cowlib/optimize.hpp"

namespace cowlib {

struct Component {
  std::string label;
  Density1D density;
  double yield = 0.0;
  std::vector<bool> free;  // per density parameter; empty means all fixed
};

/// Ordered mixture components with yields, plus an optional efficiency map.
struct MixtureModel {
  Interval support;
  std::vector<Component> components;
  std::optional<EfficiencyMap> efficiency;

  std::size_t size() const noexcept { return components.size(); }

  std::vector<Density1D> densities() const {
    std::vector<Density1D> d;
    d.reserve(components.size());
    for (const auto& c : components) d.push_back(c.density);
    return d;
  }

  std::vector<double> yields() const {
    std::vector<double> y;
    for (const auto& c : components) y.push_back(c.yield);
    return y;
  }

  std::vector<double> fractions() const {
    auto y = yields();
    const double total = accurate_sum(y);
    if (!(total > 0.0)) throw InvalidArgument("mixture has non-positive total yield");
    for (auto& v : y) v /= total;
    return y;
  }

  bool is_free(std::size_t k, std::size_t j) const {
    const auto& f = components[k].free;
    return j < f.size() && f[j];
  }

  std::size_t n_free_shape() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < size(); ++k)
      for (std::size_t j = 0; j < components[k].density.n_params(); ++j) n += is_free(k, j);
    return n;
  }

  /// Yields followed by the free shape parameters in component order.
  std::vector<double> parameters() const {
    std::vector<double> p = yields();
    for (std::size_t k = 0; k < size(); ++k) {
      const auto dp = components[k].density.params();
      for (std::size_t j = 0; j < dp.size(); ++j)
        if (is_free(k, j)) p.push_back(dp[j]);
    }
    return p;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& c : components) names.push_back("yield_" + c.label);
    for (std::size_t k = 0; k < size(); ++k)
      for (std::size_t j = 0; j < components[k].density.n_params(); ++j)
        if (is_free(k, j)) names.push_back(detail::concat(components[k].label, "_p", j));
    return names;
  }

  MixtureModel with_parameters(std::span<const double> p) const {
    if (p.size() != size() + n_free_shape())
      throw InvalidArgument(detail::concat("expected ", size() + n_free_shape(), " parameters, got ",
                                           p.size()));
    MixtureModel out = *this;
    std::size_t idx = size();
    for (std::size_t k = 0; k < size(); ++k) {
      out.components[k].yield = p[k];
      if (n_free_in(k) == 0) continue;
      std::vector<double> dp(components[k].density.params().begin(),
                             components[k].density.params().end());
      for (std::size_t j = 0; j < dp.size(); ++j)
        if (is_free(k, j)) dp[j] = p[idx++];
      out.components[k].density = components[k].density.with_params(dp);
    }
    return out;
  }

  MixtureModel with_fixed_shapes() const {
    MixtureModel out = *this;
    for (auto& c : out.components) c.free.clear();
    return out;
  }

  std::size_t n_free_in(std::size_t k) const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < components[k].density.n_params(); ++j) n += is_free(k, j);
    return n;
  }
};

struct FitResult {
  std::vector<double> params;
  std::vector<std::string> names;
  Matrix covariance;  // empty when not available
  Matrix hessian;     // of the log-likelihood (negative definite at a maximum)
  double nll = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  long n_calls = 0;
  std::string message;

  bool has_covariance() const noexcept { return covariance.size() > 0; }
  double error(std::size_t i) const {
    if (!has_covariance()) throw InvalidArgument("fit has no covariance");
    const auto k = static_cast<Eigen::Index>(i);
    return std::sqrt(covariance(k, k));
  }
};

struct FitOptions {
  OptimizeOptions optimizer{};
  double hessian_rel_step = 1e-5;
  bool compute_covariance = true;
};

namespace detail {

inline void default_shape_bounds(const Density1D& d, std::size_t j, double& lo, double& hi) {
  const double w = d.support().width();
  lo = -std::numeric_limits<double>::infinity();
  hi = std::numeric_limits<double>::infinity();
  switch (d.kind()) {
    case DensityKind::normal:
      if (j == 0) {
        lo = d.support().lo - w;
        hi = d.support().hi + w;
      } else {
        lo = 1e-4 * w;
        hi = 10.0 * w;
      }
      break;
    case DensityKind::exponential:
      lo = -300.0 / w;
      hi = 300.0 / w;
      break;
    case DensityKind::monomial:
      lo = 1e-3;
      hi = 100.0;
      break;
    default:
      lo = 0.0;
      break;
  }
}

// Fills covariance and Hessian from the Hessian of a negative log-likelihood.
template <class F, class G>
void attach_covariance(FitResult& r, F&& nll, G&& grad, double rel_step) {
  Matrix h;
  try {
    if (!std::isfinite(nll(r.params))) throw NonFiniteError("objective is not finite at the optimum");
    h = numerical_hessian_from_gradient(grad, r.params, rel_step);
  } catch (const InvalidArgument& e) {
    r.message += std::string("; Hessian unavailable: ") + e.what();
    return;
  } catch (const NonFiniteError& e) {
    r.message += std::string("; Hessian unavailable: ") + e.what();
    return;
  }
  r.hessian = -h;
  const Vector d = h.diagonal();
  if ((d.array() <= 0.0).any()) {
    r.message += "; Hessian is not positive definite";
    return;
  }
  const Vector s = d.cwiseSqrt().cwiseInverse();
  const Matrix corr = s.asDiagonal() * h * s.asDiagonal();
  const Eigen::SelfAdjointEigenSolver<Matrix> es(corr);
  if (es.eigenvalues().minCoeff() <= 1e-10 * es.eigenvalues().maxCoeff()) {
    r.message += "; Hessian is singular";
    return;
  }
  const Matrix inv = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
                     es.eigenvectors().transpose();
  r.covariance = s.asDiagonal() * inv * s.asDiagonal();
  r.covariance = 0.5 * (r.covariance + r.covariance.transpose()).eval();
}

}  // namespace detail

/// Negative extended log-likelihood  sum_k N_k - sum_i ln(sum_k N_k g_k(m_i))
/// as a function of (yields, free shape parameters).
class ExtendedNll {
 public:
  ExtendedNll(const MixtureModel& model, std::span<const double> data)
      : model_(model), data_(data.begin(), data.end()), shapes_free_(model.n_free_shape() > 0) {
    if (model.size() < 1) throw InvalidArgument("mixture model has no components");
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!model.support.contains(data_[i]))
        throw InvalidArgument(detail::concat("observation ", i, " (", data_[i], ") lies outside [",
                                             model.support.lo, ", ", model.support.hi, "]"));
    if (!shapes_free_) {
      const std::size_t k = model.size();
      cache_.resize(k * data_.size());
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < data_.size(); ++i)
          cache_[i * k + c] = model.components[c].density(data_[i]);
    }
  }

  std::size_t n_params() const { return model_.size() + model_.n_free_shape(); }
  const MixtureModel& model() const noexcept { return model_; }

  double operator()(std::span<const double> p) const {
    const std::size_t k = model_.size();
    NeumaierSum s;
    for (std::size_t c = 0; c < k; ++c) s += p[c];
    if (shapes_free_) {
      std::vector<Density1D> dens;
      try {
        dens = model_.with_parameters(p).densities();
      } catch (const InvalidArgument&) {
        return std::numeric_limits<double>::infinity();
      }
      for (double m : data_) {
        double mu = 0.0;
        for (std::size_t c = 0; c < k; ++c) mu += p[c] * dens[c](m);
        if (!(mu > 0.0)) return std::numeric_limits<double>::infinity();
        s += -std::log(mu);
      }
    } else {
      for (std::size_t i = 0; i < data_.size(); ++i) {
        double mu = 0.0;
        for (std::size_t c = 0; c < k; ++c) mu += p[c] * cache_[i * k + c];
        if (!(mu > 0.0)) return std::numeric_limits<double>::infinity();
        s += -std::log(mu);
      }
    }
    return s.value();
  }

  void gradient(std::span<const double> p, std::span<double> out) const {
    const std::size_t k = model_.size();
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t c = 0; c < k; ++c) out[c] = 1.0;
    if (!shapes_free_) {
      for (std::size_t i = 0; i < data_.size(); ++i) {
        double mu = 0.0;
        for (std::size_t c = 0; c < k; ++c) mu += p[c] * cache_[i * k + c];
        for (std::size_t c = 0; c < k; ++c) out[c] -= cache_[i * k + c] / mu;
      }
      return;
    }
    const MixtureModel cur = model_.with_parameters(p);
    std::vector<double> g(k);
    std::vector<std::vector<double>> lg(k);
    std::vector<std::size_t> offset(k);
    std::size_t idx = k;
    for (std::size_t c = 0; c < k; ++c) {
      lg[c].resize(cur.components[c].density.n_params());
      offset[c] = idx;
      idx += model_.n_free_in(c);
    }
    for (double m : data_) {
      double mu = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        g[c] = cur.components[c].density(m);
        mu += p[c] * g[c];
      }
      const double inv = 1.0 / mu;
      for (std::size_t c = 0; c < k; ++c) {
        out[c] -= g[c] * inv;
        if (offset[c] == (c + 1 < k ? offset[c + 1] : idx)) continue;
        cur.components[c].density.log_gradient(m, lg[c]);
        std::size_t o = offset[c];
        for (std::size_t j = 0; j < lg[c].size(); ++j)
          if (model_.is_free(c, j)) out[o++] -= p[c] * g[c] * lg[c][j] * inv;
      }
    }
  }

  Bounds bounds() const {
    Bounds b = Bounds::unbounded(n_params());
    for (std::size_t c = 0; c < model_.size(); ++c) b.lower[c] = 0.0;
    std::size_t idx = model_.size();
    for (std::size_t c = 0; c < model_.size(); ++c) {
      const auto& d = model_.components[c].density;
      for (std::size_t j = 0; j < d.n_params(); ++j)
        if (model_.is_free(c, j)) {
          detail::default_shape_bounds(d, j, b.lower[idx], b.upper[idx]);
          ++idx;
        }
    }
    return b;
  }

 private:
  MixtureModel model_;
  std::vector<double> data_;
  bool shapes_free_;
  std::vector<double> cache_;  // event-major density values when shapes are fixed
};

/// Maximizes the extended likelihood over yields and the model's free shape
/// parameters. init, when non-empty, overrides the model's current values.
inline FitResult fit_extended_ml(std::span<const double> data, const MixtureModel& model,
                                 std::span<const double> init = {}, const FitOptions& opt = {}) {
  if (data.empty()) throw InvalidArgument("cannot fit an empty dataset");
  ExtendedNll nll(model, data);
  std::vector<double> x0 = init.empty() ? model.parameters()
                                        : std::vector<double>(init.begin(), init.end());
  if (x0.size() != nll.n_params())
    throw InvalidArgument(detail::concat("expected ", nll.n_params(), " initial values, got ", x0.size()));
  const double n = static_cast<double>(data.size());
  double ysum = 0.0;
  for (std::size_t c = 0; c < model.size(); ++c) ysum += x0[c];
  if (!(ysum > 0.0))
    for (std::size_t c = 0; c < model.size(); ++c) x0[c] = n / static_cast<double>(model.size());

  const Bounds b = nll.bounds();
  for (std::size_t i = 0; i < x0.size(); ++i)
    if (x0[i] < b.lower[i] || x0[i] > b.upper[i])
      throw InvalidArgument(detail::concat("initial value ", x0[i], " of parameter ", i, " is out of bounds"));

  auto f = [&nll](std::span<const double> p) { return nll(p); };
  auto g = [&nll](std::span<const double> p, std::span<double> out) { nll.gradient(p, out); };
  const auto res = minimize(f, g, x0, b, opt.optimizer);

  FitResult r;
  r.params = res.x;
  r.names = model.parameter_names();
  r.nll = res.f;
  r.converged = res.converged;
  r.n_calls = res.n_calls;
  r.message = res.message;
  if (r.converged && opt.compute_covariance) detail::attach_covariance(r, f, g, opt.hessian_rel_step);
  return r;
}

/// Refit with every shape parameter fixed; only the yields float.
inline FitResult yields_only_refit(std::span<const double> data, const MixtureModel& model,
                                   std::span<const double> init_yields = {},
                                   const FitOptions& opt = {}) {
  return fit_extended_ml(data, model.with_fixed_shapes(), init_yields, opt);
}

/// Maximizes sum_i w_i ln h(t_i; theta) over all parameters of h. The
/// covariance attached is the inverse of the weighted Hessian, which is not
/// the correct covariance for weighted data (see wcov.hpp).
inline FitResult fit_weighted_ml(std::span<const double> data, std::span<const double> weights,
                                 const Density1D& density, std::span<const double> init = {},
                                 const FitOptions& opt = {}) {
  if (data.size() != weights.size()) throw InvalidArgument("data and weights differ in length");
  NeumaierSum wsum;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(weights[i])) throw InvalidArgument(detail::concat("weight ", i, " is not finite"));
    wsum += weights[i];
  }
  if (!(wsum.value() > 0.0)) throw InvalidArgument("sum of weights must be positive");
  std::vector<double> x0 = init.empty()
                               ? std::vector<double>(density.params().begin(), density.params().end())
                               : std::vector<double>(init.begin(), init.end());
  const Density1D start = density.with_params(x0);
  for (std::size_t i = 0; i < data.size(); ++i)
    if (weights[i] != 0.0 && !(start(data[i]) > 0.0))
      throw InvalidArgument(detail::concat("density is not positive at observation ", i, " (", data[i], ")"));

  Bounds b = Bounds::unbounded(x0.size());
  for (std::size_t j = 0; j < x0.size(); ++j) detail::default_shape_bounds(density, j, b.lower[j], b.upper[j]);

  auto f = [&](std::span<const double> p) {
    Density1D d;
    try {
      d = density.with_params(p);
    } catch (const InvalidArgument&) {
      return std::numeric_limits<double>::infinity();
    }
    NeumaierSum s;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (weights[i] == 0.0) continue;
      const double v = d(data[i]);
      if (!(v > 0.0)) return std::numeric_limits<double>::infinity();
      s += -weights[i] * std::log(v);
    }
    return s.value();
  };
  auto g = [&](std::span<const double> p, std::span<double> out) {
    const Density1D d = density.with_params(p);
    std::fill(out.begin(), out.end(), 0.0);
    std::vector<double> lg(p.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (weights[i] == 0.0) continue;
      d.log_gradient(data[i], lg);
      for (std::size_t j = 0; j < p.size(); ++j) out[j] -= weights[i] * lg[j];
    }
  };
  const auto res = minimize(f, g, x0, b, opt.optimizer);
  FitResult r;
  r.params = res.x;
  for (std::size_t j = 0; j < x0.size(); ++j) r.names.push_back(detail::concat("p", j));
  r.nll = res.f;
  r.converged = res.converged;
  r.n_calls = res.n_calls;
  r.message = res.message;
  if (r.converged && opt.compute_covariance) detail::attach_covariance(r, f, g, opt.hessian_rel_step);
  return r;
}

}  // namespace cowlib
