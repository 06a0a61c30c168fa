#pragma once

// Bound-constrained minimization and finite-difference derivatives.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cowlib/core.hpp"

namespace cowlib {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline Vector to_eigen(std::span<const double> v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

/// Box constraints; infinite entries mean unbounded.
struct Bounds {
  std::vector<double> lower;
  std::vector<double> upper;

  static Bounds unbounded(std::size_t n) {
    return {std::vector<double>(n, -std::numeric_limits<double>::infinity()),
            std::vector<double>(n, std::numeric_limits<double>::infinity())};
  }
  std::size_t size() const noexcept { return lower.size(); }
};

struct OptimizeOptions {
  double gtol = 1e-6;  // projected-gradient infinity norm
  double xtol = 1e-9;  // relative step size
  int max_iter = 200;
  double hessian_step = 1e-6;
  int polish_steps = 2;  // undamped Newton steps after convergence, kept while the gradient shrinks
};

struct OptimizeResult {
  std::vector<double> x;
  double f = std::numeric_limits<double>::quiet_NaN();
  double projected_gradient = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
  long n_calls = 0;
  std::string message;
};

/// Central-difference gradient with per-coordinate step rel_step * max(|x_i|, 1).
template <class F>
Vector numeric_gradient(F&& f, const Vector& x, double rel_step = 1e-6) {
  Vector g(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = rel_step * std::max(std::abs(x[i]), 1.0);
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double dn = f(probe);
    probe[i] = x[i];
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

/// Hessian of a scalar function from central second differences, symmetrized.
/// Step for coordinate i is rel_step * max(|p_i|, 1).
template <class F>
Matrix numerical_hessian(F&& f, std::span<const double> params, double rel_step = 1e-5) {
  const auto n = static_cast<Eigen::Index>(params.size());
  Vector x = to_eigen(params);
  Vector h(n);
  for (Eigen::Index i = 0; i < n; ++i) h[i] = rel_step * std::max(std::abs(x[i]), 1.0);
  auto eval = [&](const Vector& p) {
    const double v = f(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os.precision(17);
      os << "objective is not finite at probe point (";
      for (Eigen::Index i = 0; i < p.size(); ++i) os << (i ? ", " : "") << p[i];
      os << ")";
      throw NonFiniteError(os.str());
    }
    return v;
  };
  const double f0 = eval(x);
  Matrix H(n, n);
  Vector p = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    p[i] = x[i] + h[i];
    const double fp = eval(p);
    p[i] = x[i] - h[i];
    const double fm = eval(p);
    p[i] = x[i];
    H(i, i) = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    for (Eigen::Index j = 0; j < i; ++j) {
      p[i] = x[i] + h[i];
      p[j] = x[j] + h[j];
      const double fpp = eval(p);
      p[j] = x[j] - h[j];
      const double fpm = eval(p);
      p[i] = x[i] - h[i];
      const double fmm = eval(p);
      p[j] = x[j] + h[j];
      const double fmp = eval(p);
      p[i] = x[i];
      p[j] = x[j];
      H(i, j) = H(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
    }
  }
  return 0.5 * (H + H.transpose());
}

/// Hessian from central differences of an analytic gradient, symmetrized.
/// g(params, out) fills out with the gradient.
template <class G>
Matrix numerical_hessian_from_gradient(G&& g, std::span<const double> params, double rel_step = 1e-5) {
  const auto n = static_cast<Eigen::Index>(params.size());
  Vector p = to_eigen(params);
  Vector up(n), dn(n);
  auto eval = [&](Vector& out) {
    g(std::span<const double>(p.data(), static_cast<std::size_t>(n)),
      std::span<double>(out.data(), static_cast<std::size_t>(n)));
    if (!out.allFinite()) {
      std::ostringstream os;
      os.precision(17);
      os << "gradient is not finite at probe point (";
      for (Eigen::Index i = 0; i < n; ++i) os << (i ? ", " : "") << p[i];
      os << ")";
      throw NonFiniteError(os.str());
    }
  };
  Matrix H(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = p[i];
    const double h = rel_step * std::max(std::abs(x), 1.0);
    p[i] = x + h;
    eval(up);
    p[i] = x - h;
    eval(dn);
    p[i] = x;
    H.col(i) = (up - dn) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

/// Inverse of a symmetric matrix via LDLT with a rank check.
inline Matrix symmetric_inverse(const Matrix& m, double rcond_limit = 1e-14) {
  const Eigen::LDLT<Matrix> ldlt(m);
  if (ldlt.info() != Eigen::Success || ldlt.rcond() < rcond_limit) {
    const Eigen::FullPivLU<Matrix> lu(m);
    if (!lu.isInvertible() || lu.rcond() < rcond_limit)
      throw SingularMatrixError("matrix is singular to working precision");
    return lu.inverse();
  }
  Matrix inv = ldlt.solve(Matrix::Identity(m.rows(), m.cols()));
  return 0.5 * (inv + inv.transpose());
}

/// Minimizes f subject to box bounds with a projected, damped Newton method.
/// The Hessian is taken from differences of the gradient; free coordinates are
/// those not held at a bound by the sign of the gradient.
template <class F, class G>
OptimizeResult minimize(F&& f, G&& grad, std::span<const double> x0, const Bounds& bounds,
                        const OptimizeOptions& opt = {}) {
  const auto n = static_cast<Eigen::Index>(x0.size());
  if (bounds.size() != x0.size()) throw InvalidArgument("bounds do not match the parameter count");
  OptimizeResult res;
  Vector lo = to_eigen(bounds.lower), hi = to_eigen(bounds.upper);
  auto project = [&](Vector v) {
    for (Eigen::Index i = 0; i < n; ++i) v[i] = std::clamp(v[i], lo[i], hi[i]);
    return v;
  };
  auto fval = [&](const Vector& v) {
    ++res.n_calls;
    const double r = f(std::span<const double>(v.data(), static_cast<std::size_t>(n)));
    return std::isnan(r) ? std::numeric_limits<double>::infinity() : r;
  };
  auto gval = [&](const Vector& v) {
    ++res.n_calls;
    Vector g(n);
    grad(std::span<const double>(v.data(), static_cast<std::size_t>(n)),
         std::span<double>(g.data(), static_cast<std::size_t>(n)));
    return g;
  };

  auto free_set = [&](const Vector& v, const Vector& g, double& pg) {
    std::vector<Eigen::Index> free;
    pg = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool held = (v[i] <= lo[i] && g[i] > 0.0) || (v[i] >= hi[i] && g[i] < 0.0);
      if (!held) {
        free.push_back(i);
        pg = std::max(pg, std::abs(g[i]));
      }
    }
    return free;
  };
  // Hessian on the free coordinates from gradient differences.
  auto free_hessian = [&](const Vector& v, const std::vector<Eigen::Index>& free) {
    const auto nf = static_cast<Eigen::Index>(free.size());
    Matrix H(nf, nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      const Eigen::Index i = free[static_cast<std::size_t>(a)];
      const double h = opt.hessian_step * std::max(std::abs(v[i]), 1.0);
      Vector xp = v, xm = v;
      xp[i] += h;
      xm[i] -= h;
      const Vector d = (gval(xp) - gval(xm)) / (2.0 * h);
      for (Eigen::Index b = 0; b < nf; ++b) H(b, a) = d[free[static_cast<std::size_t>(b)]];
    }
    return Matrix(0.5 * (H + H.transpose()));
  };
  auto polish = [&](Vector& v, double& fv, Vector g, std::vector<Eigen::Index> free, double pg) {
    for (int k = 0; k < opt.polish_steps && pg > 0.0 && !free.empty(); ++k) {
      const auto nf = static_cast<Eigen::Index>(free.size());
      const Matrix H = free_hessian(v, free);
      Vector gf(nf);
      for (Eigen::Index a = 0; a < nf; ++a) gf[a] = g[free[static_cast<std::size_t>(a)]];
      const Eigen::LLT<Matrix> llt(H);
      if (llt.info() != Eigen::Success) return;
      const Vector p = -llt.solve(gf);
      Vector vn = v;
      for (Eigen::Index a = 0; a < nf; ++a) vn[free[static_cast<std::size_t>(a)]] += p[a];
      vn = project(vn);
      const double fn = fval(vn);
      if (!std::isfinite(fn)) return;
      const Vector gn = gval(vn);
      double pgn = 0.0;
      auto fn_free = free_set(vn, gn, pgn);
      if (!(pgn < pg)) return;
      v = vn;
      fv = fn;
      g = gn;
      free = std::move(fn_free);
      pg = pgn;
      res.projected_gradient = pg;
    }
  };

  Vector x = project(to_eigen(x0));
  double fx = fval(x);
  if (!std::isfinite(fx)) {
    res.x = to_std(x);
    res.message = "objective is not finite at the starting point";
    return res;
  }
  double damping = 0.0;
  for (int it = 0; it < opt.max_iter; ++it) {
    res.iterations = it + 1;
    const Vector g = gval(x);
    double pg = 0.0;
    const auto free = free_set(x, g, pg);
    res.projected_gradient = pg;
    if (!std::isfinite(pg)) {
      res.message = "gradient is not finite";
      break;
    }
    if (pg <= opt.gtol) {
      res.converged = true;
      res.message = "projected gradient below tolerance";
      polish(x, fx, g, free, pg);
      break;
    }
    const auto nf = static_cast<Eigen::Index>(free.size());
    const Matrix H = free_hessian(x, free);
    Vector gf(nf);
    for (Eigen::Index a = 0; a < nf; ++a) gf[a] = g[free[static_cast<std::size_t>(a)]];
    const double scale = std::max(H.diagonal().cwiseAbs().maxCoeff(), 1e-300);

    bool stepped = false;
    for (int attempt = 0; attempt < 12 && !stepped; ++attempt) {
      Matrix Hd = H;
      Hd.diagonal().array() += damping * scale;
      Eigen::LLT<Matrix> llt(Hd);
      Vector p;
      if (llt.info() == Eigen::Success && H.allFinite()) {
        p = -llt.solve(gf);
      } else {
        damping = damping == 0.0 ? 1e-6 : damping * 10.0;
        if (damping > 1e6) p = -gf / scale;
        else continue;
      }
      Vector step = Vector::Zero(n);
      for (Eigen::Index a = 0; a < nf; ++a) step[free[static_cast<std::size_t>(a)]] = p[a];
      double t = 1.0;
      for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
        const Vector xn = project(x + t * step);
        const Vector dx = xn - x;
        const double fn = fval(xn);
        const double decrease = g.dot(dx);
        if (std::isfinite(fn) && fn <= fx + 1e-4 * decrease) {
          const double rel = (dx.array().abs() / (x.array().abs().max(1.0))).maxCoeff();
          x = xn;
          const double df = fx - fn;
          fx = fn;
          stepped = true;
          damping = ls == 0 ? damping * 0.1 : damping;
          if (damping < 1e-12) damping = 0.0;
          if (rel < opt.xtol && df <= 1e-15 * std::max(std::abs(fx), 1.0)) {
            res.converged = pg <= std::max(opt.gtol, 1e3 * opt.gtol);
            res.message = res.converged ? "step below tolerance" : "step below tolerance with large gradient";
            if (res.converged) {
              const Vector gx = gval(x);
              double pgx = 0.0;
              const auto fx_free = free_set(x, gx, pgx);
              res.projected_gradient = pgx;
              polish(x, fx, gx, fx_free, pgx);
            }
            res.x = to_std(x);
            res.f = fx;
            return res;
          }
          break;
        }
        if (dx.lpNorm<Eigen::Infinity>() <= 1e-16 * std::max(x.lpNorm<Eigen::Infinity>(), 1.0)) break;
      }
      if (!stepped) damping = damping == 0.0 ? 1e-4 : damping * 100.0;
    }
    if (!stepped) {
      // No decrease is available within rounding; accept when nearly stationary.
      res.converged = pg <= std::max(opt.gtol, 1e3 * opt.gtol);
      res.message = res.converged ? "no further decrease at rounding level"
                                  : "line search failed to decrease the objective";
      if (res.converged) polish(x, fx, g, free, pg);
      break;
    }
  }
  if (res.message.empty()) res.message = "iteration limit reached";
  res.x = to_std(x);
  res.f = fx;
  return res;
}

/// Overload using central-difference gradients.
template <class F>
OptimizeResult minimize(F&& f, std::span<const double> x0, const Bounds& bounds,
                        const OptimizeOptions& opt = {}) {
  auto grad = [&f](std::span<const double> x, std::span<double> out) {
    const Vector g = numeric_gradient(
        [&f](const Vector& v) {
          return f(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
        },
        to_eigen(x));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = g[static_cast<Eigen::Index>(i)];
  };
  return minimize(f, grad, x0, bounds, opt);
}

}  // namespace cowlib
