#pragma once

// Covariance of parameters fitted to weighted data. The full path solves the
// stacked estimating equations of the mass fit, the W matrix and the weighted
// fit and applies the sandwich formula; the fixed-shape path uses the
// closed-form correction valid when the mass shapes are known.

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "cowlib/core.hpp"
#include "cowlib/density.hpp"
#include "cowlib/optimize.hpp"

namespace cowlib {

/// Estimated variance of a sum of weights over a Poisson-distributed sample.
inline double variance_sum_weights(std::span<const double> w) {
  NeumaierSum s;
  for (double x : w) {
    if (!std::isfinite(x)) throw InvalidArgument("weights must be finite");
    s += x * x;
  }
  return s.value();
}

/// (sum w)^2 / sum w^2.
inline double equivalent_events(std::span<const double> w) {
  NeumaierSum s, s2;
  for (double x : w) {
    s += x;
    s2 += x * x;
  }
  if (!(s2.value() > 0.0)) throw InvalidArgument("sum of squared weights is zero");
  return s.value() * s.value() / s2.value();
}

struct CorrectedCovariance {
  Matrix full;            // all stacked parameters (full path only)
  Matrix theta_block;     // corrected covariance of the weighted-fit parameters
  Matrix naive;           // inverse of the weighted Hessian
  Matrix first_term;      // H^-1 H' H^-T
  Matrix reduction_term;  // subtracted term; PSD on the fixed-shape path
};

/// Signal weight w_s(m) from the two-component closed form and its
/// derivatives with respect to (W_ss, W_sb, W_bb).
struct SWeightDerivative {
  double w = 0.0;
  std::array<double, 3> dw{};
};

inline SWeightDerivative sweight_derivative(double gs, double gb, double wss, double wsb, double wbb) {
  const double num = wbb * gs - wsb * gb;
  const double den = (wbb - wsb) * gs + (wss - wsb) * gb;
  if (den == 0.0) throw NonFiniteError("sWeight denominator is zero");
  const double d2 = den * den;
  SWeightDerivative r;
  r.w = num / den;
  r.dw[0] = -num * gb / d2;
  r.dw[1] = (-gb * den + num * (gs + gb)) / d2;
  r.dw[2] = gs * (den - num) / d2;
  return r;
}

/// Per-event inputs of the fixed-shape correction for classic sWeights,
/// evaluated at fitted yields with W'_xy = sum_i g_x g_y / mu_i^2.
struct SWeightTerms {
  std::vector<double> w;  // signal weights
  Matrix dw;              // N x 3, d w_s / d W'_(ss, sb, bb)
  Matrix u;               // N x 3, g_x g_y / mu^2 for (ss, sb, bb)
  Matrix W;               // 2 x 2 W' at the fitted yields
};

inline SWeightTerms sweight_terms(std::span<const double> m, const Density1D& gs, const Density1D& gb,
                                  double n_s, double n_b) {
  const auto n = static_cast<Eigen::Index>(m.size());
  SWeightTerms r;
  r.u.resize(n, 3);
  std::vector<double> vs(m.size()), vb(m.size());
  NeumaierSum ss, sb, bb;
  for (std::size_t i = 0; i < m.size(); ++i) {
    vs[i] = gs(m[i]);
    vb[i] = gb(m[i]);
    const double mu = n_s * vs[i] + n_b * vb[i];
    if (!(mu > 0.0)) throw InvalidArgument(detail::concat("mixture density is not positive at event ", i));
    const double inv = 1.0 / (mu * mu);
    const auto ii = static_cast<Eigen::Index>(i);
    r.u(ii, 0) = vs[i] * vs[i] * inv;
    r.u(ii, 1) = vs[i] * vb[i] * inv;
    r.u(ii, 2) = vb[i] * vb[i] * inv;
    ss += r.u(ii, 0);
    sb += r.u(ii, 1);
    bb += r.u(ii, 2);
  }
  r.W.resize(2, 2);
  r.W << ss.value(), sb.value(), sb.value(), bb.value();
  r.w.resize(m.size());
  r.dw.resize(n, 3);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto d = sweight_derivative(vs[i], vb[i], r.W(0, 0), r.W(0, 1), r.W(1, 1));
    r.w[i] = d.w;
    for (int j = 0; j < 3; ++j) r.dw(static_cast<Eigen::Index>(i), j) = d.dw[static_cast<std::size_t>(j)];
  }
  return r;
}

namespace detail {

// First and second derivatives of ln h(t; theta) for every event. Second
// derivatives come from central differences of the analytic first derivative.
struct LogDensityDerivatives {
  Matrix first;                 // N x p
  std::vector<Matrix> second;   // N entries of p x p
};

inline LogDensityDerivatives log_density_derivatives(std::span<const double> t, const Density1D& h,
                                                     double rel_step = 1e-5) {
  const std::size_t p = h.n_params();
  const auto n = static_cast<Eigen::Index>(t.size());
  LogDensityDerivatives d;
  d.first.resize(n, static_cast<Eigen::Index>(p));
  d.second.assign(t.size(), Matrix::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p)));
  std::vector<double> lg(p), lgp(p), lgm(p);
  std::vector<Density1D> hp, hm;
  std::vector<double> steps(p);
  for (std::size_t j = 0; j < p; ++j) {
    std::vector<double> q(h.params().begin(), h.params().end());
    steps[j] = rel_step * std::max(std::abs(q[j]), 1.0);
    q[j] += steps[j];
    hp.push_back(h.with_params(q));
    q[j] -= 2.0 * steps[j];
    hm.push_back(h.with_params(q));
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    h.log_gradient(t[i], lg);
    for (std::size_t a = 0; a < p; ++a) d.first(ii, static_cast<Eigen::Index>(a)) = lg[a];
    for (std::size_t j = 0; j < p; ++j) {
      hp[j].log_gradient(t[i], lgp);
      hm[j].log_gradient(t[i], lgm);
      for (std::size_t a = 0; a < p; ++a)
        d.second[i](static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j)) =
            (lgp[a] - lgm[a]) / (2.0 * steps[j]);
    }
    d.second[i] = 0.5 * (d.second[i] + d.second[i].transpose()).eval();
  }
  return d;
}

// Rows and columns are scaled to unit max-norm first, so the rank test does
// not depend on the units of the parameters.
inline Matrix invert_checked(const Matrix& m, const char* what) {
  Vector r = m.cwiseAbs().rowwise().maxCoeff();
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    if (!(r[i] > 0.0) || !std::isfinite(r[i])) throw SingularMatrixError(detail::concat(what, " is singular"));
    r[i] = 1.0 / r[i];
  }
  const Matrix rm = r.asDiagonal() * m;
  Vector c = rm.cwiseAbs().colwise().maxCoeff().transpose();
  for (Eigen::Index j = 0; j < c.size(); ++j) {
    if (!(c[j] > 0.0)) throw SingularMatrixError(detail::concat(what, " is singular"));
    c[j] = 1.0 / c[j];
  }
  const Eigen::FullPivLU<Matrix> lu(rm * c.asDiagonal());
  if (!lu.isInvertible() || lu.rcond() < 1e-14) throw SingularMatrixError(detail::concat(what, " is singular"));
  return c.asDiagonal() * lu.inverse() * r.asDiagonal();
}

}  // namespace detail

/// Closed-form covariance for known mass shapes:
///   C = H^-1 H' H^-T - H^-1 E C' E^T H^-T
/// with H = sum w d2 ln h, H' = sum w^2 (d ln h)(d ln h)^T,
/// E_k(xy) = sum dw/dW_xy d_k ln h and C' = sum u u^T.
/// Empty dw (or u) drops the second term, leaving the plain sandwich.
inline CorrectedCovariance corrected_covariance_fixed_shapes(std::span<const double> t,
                                                             std::span<const double> w, const Matrix& dw,
                                                             const Matrix& u, const Density1D& hs) {
  if (t.size() != w.size()) throw InvalidArgument("t and weights differ in length");
  const bool with_e = dw.size() > 0 && u.size() > 0;
  const auto n = static_cast<Eigen::Index>(t.size());
  if (with_e && (dw.rows() != n || u.rows() != n || dw.cols() != u.cols()))
    throw InvalidArgument("weight-derivative inputs do not match the data");
  const auto p = static_cast<Eigen::Index>(hs.n_params());
  const auto d = detail::log_density_derivatives(t, hs);

  Matrix H = Matrix::Zero(p, p), Hp = Matrix::Zero(p, p);
  const Eigen::Index q = with_e ? dw.cols() : 0;
  Matrix E = Matrix::Zero(p, q), Cp = Matrix::Zero(q, q);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double wi = w[static_cast<std::size_t>(i)];
    const Vector g = d.first.row(i).transpose();
    H += wi * d.second[static_cast<std::size_t>(i)];
    Hp += wi * wi * g * g.transpose();
    if (with_e) {
      E += g * dw.row(i);
      Cp += u.row(i).transpose() * u.row(i);
    }
  }
  const Matrix Hi = detail::invert_checked(H, "weighted Hessian");
  CorrectedCovariance r;
  r.naive = detail::invert_checked(-H, "weighted Hessian");
  r.first_term = Hi * Hp * Hi.transpose();
  r.reduction_term = with_e ? Matrix(Hi * E * Cp * E.transpose() * Hi.transpose()) : Matrix::Zero(p, p);
  r.first_term = 0.5 * (r.first_term + r.first_term.transpose()).eval();
  r.reduction_term = 0.5 * (r.reduction_term + r.reduction_term.transpose()).eval();
  r.theta_block = r.first_term - r.reduction_term;
  return r;
}

/// Sandwich J^-1 C J^-T.
inline Matrix sandwich(const Matrix& J, const Matrix& C) {
  const Matrix Ji = detail::invert_checked(J, "score Jacobian");
  Matrix out = Ji * C * Ji.transpose();
  return 0.5 * (out + out.transpose());
}

/// Two-component sWeights setup for the stacked estimating equations.
/// lambda = (N_s, N_b, phi..., W_ss, W_sb, W_bb, theta...), where phi are the
/// free parameters of gs then gb, theta all parameters of hs, and W is the
/// root of its estimating equation, W_xy = sum_i g_x g_y / mu_i^2.
struct QuasiScoreModel {
  Density1D gs;
  Density1D gb;
  std::vector<bool> free_s;
  std::vector<bool> free_b;
  Density1D hs;
  bool unit_weights = false;  // w_s = 1 with no dependence on W

  std::size_t n_phi() const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < gs.n_params(); ++j) n += j < free_s.size() && free_s[j];
    for (std::size_t j = 0; j < gb.n_params(); ++j) n += j < free_b.size() && free_b[j];
    return n;
  }
  std::size_t n_theta() const { return hs.n_params(); }
  std::size_t dimension() const { return 2 + n_phi() + 3 + n_theta(); }
};

namespace detail {

struct QuasiScoreState {
  Density1D gs, gb, hs;
  std::vector<std::size_t> phi_s, phi_b;  // indices of free parameters
  double ns = 0, nb = 0;
  double wss = 0, wsb = 0, wbb = 0;
};

inline QuasiScoreState unpack(const QuasiScoreModel& model, std::span<const double> lambda) {
  if (lambda.size() != model.dimension())
    throw InvalidArgument(detail::concat("expected ", model.dimension(), " stacked parameters, got ", lambda.size()));
  QuasiScoreState s;
  s.ns = lambda[0];
  s.nb = lambda[1];
  std::size_t idx = 2;
  std::vector<double> ps(model.gs.params().begin(), model.gs.params().end());
  for (std::size_t j = 0; j < ps.size(); ++j)
    if (j < model.free_s.size() && model.free_s[j]) {
      ps[j] = lambda[idx++];
      s.phi_s.push_back(j);
    }
  std::vector<double> pb(model.gb.params().begin(), model.gb.params().end());
  for (std::size_t j = 0; j < pb.size(); ++j)
    if (j < model.free_b.size() && model.free_b[j]) {
      pb[j] = lambda[idx++];
      s.phi_b.push_back(j);
    }
  s.gs = model.gs.with_params(ps);
  s.gb = model.gb.with_params(pb);
  s.wss = lambda[idx++];
  s.wsb = lambda[idx++];
  s.wbb = lambda[idx++];
  s.hs = model.hs.with_params(lambda.subspan(idx));
  return s;
}

// Per-event contributions v_i to the quasi-score; S = sum_i v_i - offset.
template <class Sink>
void for_each_score_term(std::span<const double> m, std::span<const double> t, const QuasiScoreModel& model,
                         const QuasiScoreState& s, Sink&& sink) {
  const std::size_t nphi = s.phi_s.size() + s.phi_b.size();
  const std::size_t p = model.n_theta();
  const std::size_t dim = 2 + nphi + 3 + p;
  Vector v(static_cast<Eigen::Index>(dim));
  std::vector<double> lgs(s.gs.n_params()), lgb(s.gb.n_params()), lgh(p);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double gs = s.gs(m[i]), gb = s.gb(m[i]);
    const double mu = s.ns * gs + s.nb * gb;
    if (!(mu > 0.0)) throw InvalidArgument(detail::concat("mixture density is not positive at event ", i));
    const double inv = 1.0 / mu;
    Eigen::Index k = 0;
    v[k++] = gs * inv;
    v[k++] = gb * inv;
    if (!s.phi_s.empty()) {
      s.gs.log_gradient(m[i], lgs);
      for (std::size_t j : s.phi_s) v[k++] = s.ns * gs * lgs[j] * inv;
    }
    if (!s.phi_b.empty()) {
      s.gb.log_gradient(m[i], lgb);
      for (std::size_t j : s.phi_b) v[k++] = s.nb * gb * lgb[j] * inv;
    }
    v[k++] = gs * gs * inv * inv;
    v[k++] = gs * gb * inv * inv;
    v[k++] = gb * gb * inv * inv;
    const double w = model.unit_weights ? 1.0 : sweight_derivative(gs, gb, s.wss, s.wsb, s.wbb).w;
    s.hs.log_gradient(t[i], lgh);
    for (std::size_t j = 0; j < p; ++j) v[k++] = w * lgh[j];
    sink(v);
  }
}

}  // namespace detail

/// The stacked estimating equations S(lambda).
inline Vector quasi_score(std::span<const double> m, std::span<const double> t, const QuasiScoreModel& model,
                          std::span<const double> lambda) {
  if (m.size() != t.size()) throw InvalidArgument("m and t differ in length");
  const auto s = detail::unpack(model, lambda);
  const auto dim = static_cast<Eigen::Index>(model.dimension());
  Vector S = Vector::Zero(dim);
  detail::for_each_score_term(m, t, model, s, [&](const Vector& v) { S += v; });
  S[0] -= 1.0;
  S[1] -= 1.0;
  const auto w0 = static_cast<Eigen::Index>(2 + model.n_phi());
  S[w0] -= s.wss;
  S[w0 + 1] -= s.wsb;
  S[w0 + 2] -= s.wbb;
  return S;
}

/// Sample estimate of E[S S^T]: the sum over events of v_i v_i^T.
inline Matrix score_covariance(std::span<const double> m, std::span<const double> t, const QuasiScoreModel& model,
                               std::span<const double> lambda) {
  if (m.size() != t.size()) throw InvalidArgument("m and t differ in length");
  const auto s = detail::unpack(model, lambda);
  const auto dim = static_cast<Eigen::Index>(model.dimension());
  Matrix C = Matrix::Zero(dim, dim);
  detail::for_each_score_term(m, t, model, s, [&](const Vector& v) { C.selfadjointView<Eigen::Lower>().rankUpdate(v); });
  return C.selfadjointView<Eigen::Lower>();
}

/// dS/dlambda^T by central differences with relative step rel_step.
inline Matrix quasi_score_jacobian(std::span<const double> m, std::span<const double> t,
                                   const QuasiScoreModel& model, std::span<const double> lambda,
                                   double rel_step = 1e-6) {
  const auto dim = static_cast<Eigen::Index>(model.dimension());
  Matrix J(dim, dim);
  std::vector<double> probe(lambda.begin(), lambda.end());
  for (Eigen::Index j = 0; j < dim; ++j) {
    const auto jj = static_cast<std::size_t>(j);
    const double h = rel_step * (lambda[jj] != 0.0 ? std::abs(lambda[jj]) : 1.0);
    probe[jj] = lambda[jj] + h;
    const Vector up = quasi_score(m, t, model, probe);
    probe[jj] = lambda[jj] - h;
    const Vector dn = quasi_score(m, t, model, probe);
    probe[jj] = lambda[jj];
    J.col(j) = (up - dn) / (2.0 * h);
  }
  return J;
}

/// Stacks fitted yields, free mass-shape parameters and weighted-fit
/// parameters into lambda, with W at the root of its estimating equation.
inline std::vector<double> stack_parameters(std::span<const double> m, const QuasiScoreModel& model, double n_s,
                                            double n_b, std::span<const double> theta) {
  const auto terms = sweight_terms(m, model.gs, model.gb, n_s, n_b);
  std::vector<double> lambda{n_s, n_b};
  for (std::size_t j = 0; j < model.gs.n_params(); ++j)
    if (j < model.free_s.size() && model.free_s[j]) lambda.push_back(model.gs.params()[j]);
  for (std::size_t j = 0; j < model.gb.n_params(); ++j)
    if (j < model.free_b.size() && model.free_b[j]) lambda.push_back(model.gb.params()[j]);
  lambda.push_back(terms.W(0, 0));
  lambda.push_back(terms.W(0, 1));
  lambda.push_back(terms.W(1, 1));
  lambda.insert(lambda.end(), theta.begin(), theta.end());
  return lambda;
}

/// Full sandwich covariance of all stacked parameters at a root lambda_hat.
inline CorrectedCovariance corrected_covariance_full(std::span<const double> m, std::span<const double> t,
                                                     const QuasiScoreModel& model,
                                                     std::span<const double> lambda_hat) {
  const Vector S = quasi_score(m, t, model, lambda_hat);
  const double limit = 1e-4 * static_cast<double>(m.size());
  const double worst = S.cwiseAbs().maxCoeff();
  if (!(worst < limit))
    throw InvalidArgument(detail::concat("stacked parameters are not a root of the estimating equations: max |S_j| = ",
                                         worst, " (limit ", limit, ")"));
  const Matrix J = quasi_score_jacobian(m, t, model, lambda_hat);
  const Matrix C = score_covariance(m, t, model, lambda_hat);
  CorrectedCovariance r;
  r.full = sandwich(J, C);
  const auto p = static_cast<Eigen::Index>(model.n_theta());
  r.theta_block = r.full.bottomRightCorner(p, p);

  // Reference terms from the weighted fit alone.
  const auto st = detail::unpack(model, lambda_hat);
  std::vector<double> w(m.size(), 1.0);
  if (!model.unit_weights)
    for (std::size_t i = 0; i < m.size(); ++i)
      w[i] = sweight_derivative(st.gs(m[i]), st.gb(m[i]), st.wss, st.wsb, st.wbb).w;
  const auto plain = corrected_covariance_fixed_shapes(t, w, Matrix(), Matrix(), st.hs);
  r.naive = plain.naive;
  r.first_term = plain.first_term;
  r.reduction_term = r.first_term - r.theta_block;
  return r;
}

}  // namespace cowlib
