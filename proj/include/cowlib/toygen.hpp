#pragma once

// Seeded pseudo-experiment generators and the ensemble runner.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "cowlib/core.hpp"
#include "cowlib/cows.hpp"
#include "cowlib/density.hpp"
#include "cowlib/diagnostics.hpp"
#include "cowlib/integrate.hpp"
#include "cowlib/mlfit.hpp"
#include "cowlib/rng.hpp"
#include "cowlib/sweights.hpp"
#include "cowlib/wcov.hpp"

namespace cowlib {

enum class Study { simple, multicomponent, nonfactorising };

inline std::string_view to_string(Study s) {
  switch (s) {
    case Study::simple: return "simple";
    case Study::multicomponent: return "multicomponent";
    case Study::nonfactorising: return "nonfactorising";
  }
  return "simple";
}

inline Study study_from_string(std::string_view s) {
  if (s == "simple") return Study::simple;
  if (s == "multicomponent") return Study::multicomponent;
  if (s == "nonfactorising" || s == "nonfactorizing") return Study::nonfactorising;
  throw InvalidArgument(detail::concat("unknown study '", s, "'"));
}

/// Factorising two-component truth: signal normal in m and exponential in t,
/// background exponential in m and normal in t.
struct SimpleTruth {
  Interval m_range{0.0, 1.0};
  Interval t_range{0.0, 3.0};
  double signal_mean = 0.5;
  double signal_width = 0.05;
  double background_slope = 1.0;
  double signal_rate = 2.0;
  double background_t_mean = 1.0;
  double background_t_width = 0.5;

  Density1D gs() const { return Density1D::normal(signal_mean, signal_width, m_range); }
  Density1D gb() const { return Density1D::exponential(background_slope, m_range); }
  Density1D hs() const { return Density1D::exponential(signal_rate, t_range); }
  Density1D hb() const { return Density1D::normal(background_t_mean, background_t_width, t_range); }
};

/// Three components overlapping in m. The control variables u and v are flat
/// except for a narrow band in u for component 0 and in v for component 1.
struct MulticomponentTruth {
  Interval m_range{0.0, 1.0};
  Interval uv_range{0.0, 1.0};
  double signal_mean = 0.5, signal_width = 0.05;
  double peaking_mean = 0.58, peaking_width = 0.08;
  double combinatorial_slope = 2.0;
  double band_u = 0.3, band_v = 0.7, band_width = 0.03;

  std::vector<Density1D> mass_densities() const {
    return {Density1D::normal(signal_mean, signal_width, m_range),
            Density1D::normal(peaking_mean, peaking_width, m_range),
            Density1D::exponential(combinatorial_slope, m_range)};
  }
};

/// Signal N(m) x Exp(t); background whose m-slope depends on t and whose
/// t-mean and t-width depend on m; bilinear efficiency with a cross term.
/// coupling scales every m-t dependence; zero gives a factorised model.
struct NonfactorisingTruth {
  Interval m_range{0.0, 1.0};
  Interval t_range{0.0, 2.0};
  double signal_mean = 0.5, signal_width = 0.05, signal_rate = 2.0;
  double slope0 = 1.5, slope_t = 1.5;                 // slope(t) = slope0 + coupling*slope_t*(t - 1)
  double t_mean0 = 0.8, t_mean_m = 0.6;               // mean(m) = t_mean0 + coupling*t_mean_m*(m - 0.5)
  double t_width0 = 0.4, t_width_m = 0.2;             // width(m) = t_width0 + coupling*t_width_m*(m - 0.5)
  double eff_c0 = 0.2, eff_cm = 0.3, eff_ct = 0.35, eff_cmt = -0.25;
  double coupling = 1.0;

  Density1D gs() const { return Density1D::normal(signal_mean, signal_width, m_range); }
  Density1D hs() const { return Density1D::exponential(signal_rate, t_range); }
  EfficiencyMap efficiency() const {
    return EfficiencyMap::bilinear(eff_c0, eff_cm, eff_ct, eff_cmt, m_range, t_range);
  }

  /// Unnormalized background density in (m, t).
  double background_shape(double m, double t) const {
    const double slope = slope0 + coupling * slope_t * (t - 1.0);
    const double mean = t_mean0 + coupling * t_mean_m * (m - 0.5);
    const double width = t_width0 + coupling * t_width_m * (m - 0.5);
    const double z = (t - mean) / width;
    return std::exp(-slope * (m - m_range.lo)) * std::exp(-0.5 * z * z) / width;
  }

  /// Normalization of background_shape over the rectangle.
  double background_norm() const {
    return integrate(
        [this](double m) {
          return integrate([this, m](double t) { return background_shape(m, t); }, t_range, 1e-12);
        },
        m_range, 1e-11);
  }

  SimpleTruth factorised_equivalent() const {
    SimpleTruth s;
    s.m_range = m_range;
    s.t_range = t_range;
    s.signal_mean = signal_mean;
    s.signal_width = signal_width;
    s.background_slope = slope0;
    s.signal_rate = signal_rate;
    s.background_t_mean = t_mean0;
    s.background_t_width = t_width0;
    return s;
  }
};

struct ToySpec {
  Study study = Study::simple;
  std::size_t n_events = 2500;
  std::vector<double> fractions;  // empty: study default
  bool poisson = false;           // draw the event count from Poisson(n_events)
  bool efficiency = true;         // nonfactorising: apply the efficiency
  std::uint64_t seed = 0;
  SimpleTruth simple{};
  MulticomponentTruth multicomponent{};
  NonfactorisingTruth nonfactorising{};

  std::vector<double> resolved_fractions() const {
    std::vector<double> f = fractions;
    if (f.empty()) {
      switch (study) {
        case Study::simple: f = {0.2, 0.8}; break;
        case Study::multicomponent: f = {0.3, 0.2, 0.5}; break;
        case Study::nonfactorising: f = {0.5, 0.5}; break;
      }
    }
    const std::size_t need = study == Study::multicomponent ? 3 : 2;
    if (f.size() != need) throw InvalidArgument(detail::concat(to_string(study), " study needs ", need, " fractions"));
    double s = 0.0;
    for (double v : f) {
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("fractions must lie in [0, 1]");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw InvalidArgument(detail::concat("fractions sum to ", s, ", expected 1"));
    return f;
  }

  void validate() const {
    if (n_events < 1) throw InvalidArgument("n_events must be at least 1");
    (void)resolved_fractions();
  }
};

/// Generated events. label is the true component index.
struct Dataset {
  std::vector<double> m, t, u, v;
  std::vector<int> label;
  std::optional<EfficiencyMap> efficiency;

  std::size_t size() const noexcept { return m.size(); }
};

namespace detail {

inline std::size_t draw_count(const ToySpec& spec, SplitMix64& rng) {
  if (!spec.poisson) return spec.n_events;
  std::poisson_distribution<long long> pois(static_cast<double>(spec.n_events));
  return static_cast<std::size_t>(pois(rng));
}

inline std::size_t pick_component(std::span<const double> f, double u) {
  double c = 0.0;
  for (std::size_t k = 0; k + 1 < f.size(); ++k) {
    c += f[k];
    if (u < c) return k;
  }
  return f.size() - 1;
}

// Maximum of f over a rectangle: dense grid, then alternating golden-section
// refinement around the best node.
template <class F>
double rectangle_maximum(F&& f, const Interval& xr, const Interval& yr, int grid = 201) {
  double best = -std::numeric_limits<double>::infinity();
  double bx = xr.lo, by = yr.lo;
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      const double x = xr.lo + xr.width() * i / (grid - 1);
      const double y = yr.lo + yr.width() * j / (grid - 1);
      const double v = f(x, y);
      if (v > best) {
        best = v;
        bx = x;
        by = y;
      }
    }
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  auto golden = [&](auto&& g, double a, double b) {
    double c = b - phi * (b - a), d = a + phi * (b - a);
    for (int it = 0; it < 80; ++it) {
      if (g(c) > g(d)) b = d;
      else a = c;
      c = b - phi * (b - a);
      d = a + phi * (b - a);
    }
    return 0.5 * (a + b);
  };
  const double hx = xr.width() / (grid - 1), hy = yr.width() / (grid - 1);
  for (int round = 0; round < 4; ++round) {
    bx = golden([&](double x) { return f(x, by); }, std::max(xr.lo, bx - hx), std::min(xr.hi, bx + hx));
    by = golden([&](double y) { return f(bx, y); }, std::max(yr.lo, by - hy), std::min(yr.hi, by + hy));
  }
  return std::max(best, f(bx, by));
}

}  // namespace detail

inline Dataset generate_simple(const ToySpec& spec) {
  spec.validate();
  const auto f = spec.resolved_fractions();
  SplitMix64 rng(spec.seed);
  const std::size_t n = detail::draw_count(spec, rng);
  const SimpleTruth& tr = spec.simple;
  const Density1D gs = tr.gs(), gb = tr.gb(), hs = tr.hs(), hb = tr.hb();
  Dataset d;
  d.m.reserve(n);
  d.t.reserve(n);
  d.label.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = detail::pick_component(f, rng.uniform());
    const double um = rng.uniform(), ut = rng.uniform();
    d.m.push_back(k == 0 ? gs.quantile(um) : gb.quantile(um));
    d.t.push_back(k == 0 ? hs.quantile(ut) : hb.quantile(ut));
    d.label.push_back(static_cast<int>(k));
  }
  return d;
}

/// Events carry m, the control variables u and v, and the true label.
inline Dataset generate_multicomponent(const ToySpec& spec) {
  spec.validate();
  const auto f = spec.resolved_fractions();
  SplitMix64 rng(spec.seed);
  const std::size_t n = detail::draw_count(spec, rng);
  const MulticomponentTruth& tr = spec.multicomponent;
  const auto g = tr.mass_densities();
  const Density1D band_u = Density1D::normal(tr.band_u, tr.band_width, tr.uv_range);
  const Density1D band_v = Density1D::normal(tr.band_v, tr.band_width, tr.uv_range);
  const Density1D flat = Density1D::uniform(tr.uv_range);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = detail::pick_component(f, rng.uniform());
    d.m.push_back(g[k].quantile(rng.uniform()));
    d.u.push_back((k == 0 ? band_u : flat).quantile(rng.uniform()));
    d.v.push_back((k == 1 ? band_v : flat).quantile(rng.uniform()));
    d.label.push_back(static_cast<int>(k));
  }
  return d;
}

/// Samples from eps(m,t) f(m,t) / D: a component is drawn with the generation
/// fractions, an (m, t) pair from that component, and the pair is kept with
/// probability eps. The background pair uses accept-reject against 1.2 times
/// its maximum. Returns the efficiency map used.
inline Dataset generate_nonfactorising(const ToySpec& spec) {
  spec.validate();
  const auto f = spec.resolved_fractions();
  SplitMix64 rng(spec.seed);
  const std::size_t n = detail::draw_count(spec, rng);
  const NonfactorisingTruth& tr = spec.nonfactorising;
  const Density1D gs = tr.gs(), hs = tr.hs();
  const EfficiencyMap eff = spec.efficiency ? tr.efficiency() : EfficiencyMap::constant(1.0);
  auto shape = [&tr](double m, double t) { return tr.background_shape(m, t); };
  const double envelope = 1.2 * detail::rectangle_maximum(shape, tr.m_range, tr.t_range);
  Dataset d;
  d.efficiency = eff;
  d.m.reserve(n);
  d.t.reserve(n);
  while (d.m.size() < n) {
    const std::size_t k = detail::pick_component(f, rng.uniform());
    double m, t;
    if (k == 0) {
      m = gs.quantile(rng.uniform());
      t = hs.quantile(rng.uniform());
    } else {
      for (;;) {
        m = tr.m_range.lo + tr.m_range.width() * rng.uniform();
        t = tr.t_range.lo + tr.t_range.width() * rng.uniform();
        const double v = shape(m, t);
        if (v > envelope) throw Error(detail::concat("accept-reject envelope violated at (", m, ", ", t, ")"));
        if (rng.uniform() * envelope < v) break;
      }
    }
    if (spec.efficiency && !(rng.uniform() < eff(m, t))) continue;
    d.m.push_back(m);
    d.t.push_back(t);
    d.label.push_back(static_cast<int>(k));
  }
  return d;
}

inline Dataset generate(const ToySpec& spec) {
  switch (spec.study) {
    case Study::simple: return generate_simple(spec);
    case Study::multicomponent: return generate_multicomponent(spec);
    case Study::nonfactorising: return generate_nonfactorising(spec);
  }
  throw InvalidArgument("unknown study");
}

// ---------------------------------------------------------------------------
// Ensembles

enum class VarianceChoice { unity, qm, mixture, ml };

inline std::string_view to_string(VarianceChoice v) {
  switch (v) {
    case VarianceChoice::unity: return "unity";
    case VarianceChoice::qm: return "qm";
    case VarianceChoice::mixture: return "mixture";
    case VarianceChoice::ml: return "ml";
  }
  return "unity";
}

inline VarianceChoice variance_choice_from_string(std::string_view s) {
  if (s == "unity") return VarianceChoice::unity;
  if (s == "qm") return VarianceChoice::qm;
  if (s == "mixture") return VarianceChoice::mixture;
  if (s == "ml") return VarianceChoice::ml;
  throw InvalidArgument(detail::concat("unknown variance function '", s, "'"));
}

struct MethodSpec {
  enum class Kind { sweights, cow };
  std::string name;
  Kind kind = Kind::sweights;
  Variant variant = Variant::B;
  int poly_order = 3;  // cow background: polynomial terms of degree 0..poly_order
  VarianceChoice variance = VarianceChoice::qm;
  std::size_t qm_bins = 50;
  bool efficiency_correct = true;  // divide weights by eps when the toy has one

  static MethodSpec sweights(Variant v) {
    MethodSpec m;
    m.kind = Kind::sweights;
    m.variant = v;
    m.name = detail::concat("sweights-", to_string(v));
    return m;
  }
  static MethodSpec cow(int order, VarianceChoice var, std::size_t bins = 50) {
    MethodSpec m;
    m.kind = Kind::cow;
    m.poly_order = order;
    m.variance = var;
    m.qm_bins = bins;
    m.name = var == VarianceChoice::qm ? detail::concat("cow-qm", bins, "-p", order)
                                       : detail::concat("cow-", to_string(var), "-p", order);
    return m;
  }
};

struct EnsembleConfig {
  ToySpec toy;
  std::vector<MethodSpec> methods{MethodSpec::sweights(Variant::B)};
  std::size_t n_toys = 1;
  std::uint64_t base_seed = 0;
  unsigned jobs = 1;
  bool free_shapes = true;       // float the mass shapes in the first fit
  bool full_correction = false;  // also run the full sandwich for variant B
};

struct ToyRecord {
  std::size_t toy = 0;
  std::uint64_t seed = 0;
  std::string method;
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double sigma_corrected = std::numeric_limits<double>::quiet_NaN();
  double sigma_naive = std::numeric_limits<double>::quiet_NaN();
  double sigma_full = std::numeric_limits<double>::quiet_NaN();
  double truth = std::numeric_limits<double>::quiet_NaN();
  double sum_w = 0.0, sum_w2 = 0.0, n_eq = 0.0;
  double fitted_yield = std::numeric_limits<double>::quiet_NaN();         // yields-only refit
  double sigma_yield_yields_only = std::numeric_limits<double>::quiet_NaN();
  double sigma_yield_free = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_events = 0;
  std::size_t n_signal_true = 0;
};

struct ToyFailure {
  std::size_t toy = 0;
  std::uint64_t seed = 0;
  std::string method;
  std::string error;
};

struct MethodSummary {
  std::string method;
  std::size_t n = 0;
  SampleSummary estimate, pull_corrected, pull_naive, pull_full;
  double bias = 0.0;
  double coverage68 = 0.0;
  double mean_n_eq = 0.0;
  double mean_sigma_ratio = 0.0;   // sqrt(sum w^2) / sigma(N_s, yields only)
  double mean_yield_diff = 0.0;    // (sum w - N_s) / N_s
};

struct EnsembleReport {
  EnsembleConfig config;
  std::vector<ToyRecord> records;
  std::vector<ToyFailure> failures;
  std::vector<MethodSummary> summaries;
  std::size_t failed_toys = 0;
  bool valid = true;
};

namespace detail {

inline MixtureModel study_mass_model(const ToySpec& spec, std::size_t n, bool free_shapes) {
  const auto f = spec.resolved_fractions();
  MixtureModel model;
  const double nn = static_cast<double>(n);
  auto start = [&](double frac) { return std::max(nn * frac, 1.0); };
  switch (spec.study) {
    case Study::simple: {
      const auto& tr = spec.simple;
      model.support = tr.m_range;
      model.components.push_back({"signal", tr.gs(), start(f[0]), {free_shapes, free_shapes}});
      model.components.push_back({"background", tr.gb(), start(f[1]), {free_shapes}});
      break;
    }
    case Study::nonfactorising: {
      const auto& tr = spec.nonfactorising;
      model.support = tr.m_range;
      model.components.push_back({"signal", tr.gs(), start(f[0]), {free_shapes, free_shapes}});
      model.components.push_back(
          {"background", Density1D::exponential(tr.slope0, tr.m_range), start(f[1]), {free_shapes}});
      break;
    }
    case Study::multicomponent: {
      const auto& tr = spec.multicomponent;
      model.support = tr.m_range;
      const auto g = tr.mass_densities();
      const char* names[] = {"signal", "peaking", "combinatorial"};
      for (std::size_t k = 0; k < 3; ++k) model.components.push_back({names[k], g[k], start(f[k]), {}});
      break;
    }
  }
  return model;
}

inline Density1D study_control_density(const ToySpec& spec) {
  return spec.study == Study::nonfactorising ? spec.nonfactorising.hs() : spec.simple.hs();
}

inline double study_truth(const ToySpec& spec) {
  return spec.study == Study::nonfactorising ? spec.nonfactorising.signal_rate : spec.simple.signal_rate;
}

struct ToyOutcome {
  std::vector<ToyRecord> records;
  std::vector<ToyFailure> failures;
  bool failed = false;
};

inline ToyOutcome run_one_toy(const EnsembleConfig& cfg, std::size_t index) {
  ToyOutcome out;
  ToySpec spec = cfg.toy;
  spec.seed = toy_seed(cfg.base_seed, index);
  auto fail_all = [&](const std::string& what) {
    out.failed = true;
    for (const auto& mth : cfg.methods) out.failures.push_back({index, spec.seed, mth.name, what});
  };
  Dataset data;
  FitResult free_fit, yo_fit;
  MixtureModel fitted;
  try {
    data = generate(spec);
    if (data.size() < 2) throw InvalidArgument("toy has fewer than two events");
    const MixtureModel model = study_mass_model(spec, data.size(), cfg.free_shapes);
    free_fit = fit_extended_ml(data.m, model);
    if (!free_fit.converged) throw NotConvergedError("mass fit did not converge: " + free_fit.message);
    fitted = model.with_parameters(free_fit.params);
    yo_fit = yields_only_refit(data.m, fitted);
    if (!yo_fit.converged || !yo_fit.has_covariance())
      throw NotConvergedError("yields-only refit failed: " + yo_fit.message);
    fitted = fitted.with_fixed_shapes().with_parameters(yo_fit.params);
  } catch (const std::exception& e) {
    fail_all(e.what());
    return out;
  }

  std::size_t n_sig = 0;
  for (int l : data.label) n_sig += l == 0;
  const std::size_t n = data.size();
  const bool has_eff = data.efficiency.has_value() && spec.efficiency;
  const auto dens = fitted.densities();
  const auto yields = fitted.yields();
  const double ntot = accurate_sum(yields);
  std::vector<double> z(yields.size());
  for (std::size_t k = 0; k < z.size(); ++k) z[k] = yields[k] / ntot;

  for (const auto& mth : cfg.methods) {
    ToyRecord rec;
    rec.toy = index;
    rec.seed = spec.seed;
    rec.method = mth.name;
    rec.n_events = n;
    rec.n_signal_true = n_sig;
    rec.fitted_yield = yo_fit.params[0];
    rec.sigma_yield_yields_only = yo_fit.error(0);
    if (free_fit.has_covariance()) rec.sigma_yield_free = free_fit.error(0);
    try {
      std::vector<double> w(n);
      std::vector<double> eps(n, 1.0);
      if (has_eff)
        for (std::size_t i = 0; i < n; ++i) eps[i] = (*data.efficiency)(data.m[i], data.t[i]);
      bool sweights_kind = mth.kind == MethodSpec::Kind::sweights;
      if (sweights_kind) {
        WeightMatrix wm;
        switch (mth.variant) {
          case Variant::A: wm = compute_W_variant_A(dens, z, fitted.support, 1e-10); break;
          case Variant::B: wm = compute_W_variant_B(dens, z, data.m); break;
          case Variant::Ci:
            if (!free_fit.has_covariance()) throw SingularMatrixError("free-fit covariance unavailable");
            wm = compute_W_variant_C(free_fit, n, CovarianceMode::invert_full, dens.size());
            break;
          case Variant::Cii: wm = compute_W_variant_C(yo_fit, n, CovarianceMode::yields_only, dens.size()); break;
          case Variant::custom: throw InvalidArgument("custom variant is not available in ensembles");
        }
        const WeightFunctionSet wfs(wm, dens);
        std::vector<double> row(dens.size());
        for (std::size_t i = 0; i < n; ++i) {
          wfs.evaluate(data.m[i], row);
          w[i] = row[0];
        }
      } else {
        CowSpec cs;
        cs.basis.push_back(dens[0]);
        for (const auto& b : monomial_basis(mth.poly_order + 1, fitted.support)) cs.basis.push_back(b);
        cs.n_signal = 1;
        cs.support = fitted.support;
        if (has_eff) cs.efficiency = data.efficiency;
        std::optional<EfficiencyMap> eff_opt;
        if (has_eff) eff_opt = data.efficiency;
        switch (mth.variance) {
          case VarianceChoice::unity: cs.variance = VarianceFunction::unity(); break;
          case VarianceChoice::qm:
            cs.variance = VarianceFunction::histogram(variance_fn_qm(
                data.m, data.t, has_eff ? *data.efficiency : EfficiencyMap::constant(1.0), mth.qm_bins, fitted.support));
            break;
          case VarianceChoice::mixture: cs.variance = VarianceFunction::mixture(z, dens); break;
          case VarianceChoice::ml: {
            auto r = variance_fn_ml_iterative(cs.basis, cs.support, data.m, data.t, eff_opt);
            cs.variance = r.cow.spec().variance;
            break;
          }
        }
        const CowSet cow = build_cow(cs);
        std::vector<double> row(cow.size());
        for (std::size_t i = 0; i < n; ++i) {
          cow.evaluate(data.m[i], row);
          w[i] = row[0];
        }
      }
      if (has_eff && mth.efficiency_correct)
        for (std::size_t i = 0; i < n; ++i) {
          if (!(eps[i] >= min_efficiency)) throw InvalidArgument("efficiency below the weight guard");
          w[i] /= eps[i];
        }
      NeumaierSum sw, sw2;
      for (double x : w) {
        sw += x;
        sw2 += x * x;
      }
      rec.sum_w = sw.value();
      rec.sum_w2 = sw2.value();
      rec.n_eq = equivalent_events(w);

      if (spec.study == Study::multicomponent) {
        rec.estimate = rec.sum_w;
        rec.truth = static_cast<double>(n_sig);
        rec.sigma_corrected = std::sqrt(rec.sum_w2);
        rec.sigma_naive = rec.sigma_corrected;
      } else {
        const Density1D h0 = study_control_density(spec);
        const auto wf = fit_weighted_ml(data.t, w, h0);
        if (!wf.converged) throw NotConvergedError("weighted fit did not converge: " + wf.message);
        const Density1D hhat = h0.with_params(wf.params);
        rec.estimate = wf.params[0];
        rec.truth = study_truth(spec);
        CorrectedCovariance cc;
        if (sweights_kind && dens.size() == 2) {
          auto terms = sweight_terms(data.m, dens[0], dens[1], yields[0], yields[1]);
          if (has_eff && mth.efficiency_correct)
            for (std::size_t i = 0; i < n; ++i) terms.dw.row(static_cast<Eigen::Index>(i)) /= eps[i];
          cc = corrected_covariance_fixed_shapes(data.t, w, terms.dw, terms.u, hhat);
        } else {
          cc = corrected_covariance_fixed_shapes(data.t, w, Matrix(), Matrix(), hhat);
        }
        rec.sigma_corrected = std::sqrt(cc.theta_block(0, 0));
        rec.sigma_naive = std::sqrt(cc.naive(0, 0));
        if (cfg.full_correction && sweights_kind && mth.variant == Variant::B && !has_eff &&
            spec.study == Study::simple) {
          QuasiScoreModel qm;
          qm.gs = dens[0];
          qm.gb = dens[1];
          qm.free_s = cfg.free_shapes ? std::vector<bool>{true, true} : std::vector<bool>{};
          qm.free_b = cfg.free_shapes ? std::vector<bool>{true} : std::vector<bool>{};
          qm.hs = hhat;
          const auto lambda = stack_parameters(data.m, qm, yields[0], yields[1], wf.params);
          const auto full = corrected_covariance_full(data.m, data.t, qm, lambda);
          rec.sigma_full = std::sqrt(full.theta_block(0, 0));
        }
      }
      if (!std::isfinite(rec.sigma_corrected) || !(rec.sigma_corrected > 0.0))
        throw NonFiniteError("corrected uncertainty is not positive");
      out.records.push_back(rec);
    } catch (const std::exception& e) {
      out.failed = true;
      out.failures.push_back({index, spec.seed, mth.name, e.what()});
    }
  }
  return out;
}

}  // namespace detail

/// Aggregates for one method from its records.
inline MethodSummary summarize_method(const std::string& method, const std::vector<ToyRecord>& records) {
  MethodSummary s;
  s.method = method;
  std::vector<double> est, pc, pn, pf;
  double neq = 0.0, ratio = 0.0, ydiff = 0.0, covered = 0.0;
  for (const auto& r : records) {
    if (r.method != method) continue;
    est.push_back(r.estimate);
    pc.push_back(pull(r.estimate, r.truth, r.sigma_corrected));
    pn.push_back(pull(r.estimate, r.truth, r.sigma_naive));
    if (std::isfinite(r.sigma_full) && r.sigma_full > 0.0) pf.push_back(pull(r.estimate, r.truth, r.sigma_full));
    covered += std::abs(pc.back()) < 1.0;
    neq += r.n_eq;
    ratio += std::sqrt(r.sum_w2) / r.sigma_yield_yields_only;
    ydiff += (r.sum_w - r.fitted_yield) / r.fitted_yield;
  }
  s.n = est.size();
  if (s.n == 0) return s;
  const double nn = static_cast<double>(s.n);
  s.estimate = summarize(est);
  s.pull_corrected = summarize(pc);
  s.pull_naive = summarize(pn);
  s.pull_full = summarize(pf);
  for (const auto& r : records)
    if (r.method == method) {
      s.bias = s.estimate.mean - r.truth;
      break;
    }
  s.coverage68 = covered / nn;
  s.mean_n_eq = neq / nn;
  s.mean_sigma_ratio = ratio / nn;
  s.mean_yield_diff = ydiff / nn;
  return s;
}

/// Runs n_toys pseudo-experiments; toy i uses seed base_seed + i. Results are
/// assembled in toy order regardless of the number of worker threads.
inline EnsembleReport run_ensemble(const EnsembleConfig& cfg) {
  if (cfg.n_toys < 1) throw InvalidArgument("n_toys must be at least 1");
  if (cfg.methods.empty()) throw InvalidArgument("at least one method is required");
  cfg.toy.validate();
  std::vector<detail::ToyOutcome> outcomes(cfg.n_toys);
  const unsigned jobs = std::max(1u, std::min<unsigned>(cfg.jobs, static_cast<unsigned>(cfg.n_toys)));
  if (jobs == 1) {
    for (std::size_t i = 0; i < cfg.n_toys; ++i) outcomes[i] = detail::run_one_toy(cfg, i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cfg.n_toys; i = next++) outcomes[i] = detail::run_one_toy(cfg, i);
      });
    for (auto& th : pool) th.join();
  }
  EnsembleReport rep;
  rep.config = cfg;
  for (auto& o : outcomes) {
    rep.failed_toys += o.failed;
    for (auto& r : o.records) rep.records.push_back(std::move(r));
    for (auto& f : o.failures) rep.failures.push_back(std::move(f));
  }
  for (const auto& m : cfg.methods) rep.summaries.push_back(summarize_method(m.name, rep.records));
  rep.valid = static_cast<double>(rep.failed_toys) <= 0.1 * static_cast<double>(cfg.n_toys);
  return rep;
}

}  // namespace cowlib
