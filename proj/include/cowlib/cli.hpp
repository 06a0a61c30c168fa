#pragma once

// The cowlib command-line tool. run_cli is the whole program minus main() so
// tests can drive it in-process.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cowlib/cows.hpp"
#include "cowlib/diagnostics.hpp"
#include "cowlib/io.hpp"
#include "cowlib/mlfit.hpp"
#include "cowlib/sweights.hpp"
#include "cowlib/toygen.hpp"
#include "cowlib/wcov.hpp"

namespace cowlib {

inline constexpr std::string_view tool_version = "0.1.0";

enum ExitCode : int { exit_ok = 0, exit_input = 1, exit_numerical = 2, exit_invalid_ensemble = 3 };

// ---------------------------------------------------------------------------
// Analysis configuration

struct AnalysisConfig {
  std::string data;
  Json model;  // model object, or a path to one
  std::string method = "sweights-B";
  std::string cow_basis = "monomial";
  int cow_order = 3;
  std::string cow_variance = "qm";
  std::size_t cow_bins = 50;
  Json signal_proxy;  // density, or null
  Json efficiency;    // efficiency map, a path to one, or null
  bool allow_efficiency_division = false;
  Json control;  // density fitted to t with the signal weights, or null
  std::string correction = "fixed";
  std::string out_weights = "weights.csv";
  std::string out_fit = "fit.json";
  std::string out_covariance = "covariance.json";
  std::string out_summary = "summary.json";
  std::uint64_t seed = 0;

  bool is_cow() const { return method == "cow"; }
  Variant variant() const { return variant_from_string(method.substr(std::string_view("sweights-").size())); }
};

inline Json to_json(const AnalysisConfig& c) {
  return Json{{"data", c.data},
              {"model", c.model},
              {"method", c.method},
              {"cow",
               {{"basis", c.cow_basis},
                {"order", c.cow_order},
                {"variance_fn", c.cow_variance},
                {"bins", c.cow_bins},
                {"signal_proxy", c.signal_proxy}}},
              {"efficiency", c.efficiency},
              {"allow_efficiency_division", c.allow_efficiency_division},
              {"control", c.control},
              {"correction", c.correction},
              {"outputs",
               {{"weights", c.out_weights},
                {"fit", c.out_fit},
                {"covariance", c.out_covariance},
                {"summary", c.out_summary}}},
              {"seed", c.seed}};
}

namespace detail {

inline void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> known, std::string_view where) {
  if (!j.is_object()) throw InvalidArgument(concat(where, " must be a JSON object"));
  for (const auto& [k, v] : j.items()) {
    bool ok = k == "cowlib_version" || k == "provenance";
    for (auto kk : known) ok = ok || k == kk;
    if (!ok) throw InvalidArgument(concat("unknown key '", k, "' in ", where));
  }
}

template <class T>
void read_key(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw InvalidArgument(concat("config key '", key, "' has the wrong type"));
  }
}

inline void read_json_key(const Json& j, const char* key, Json& out) {
  if (j.contains(key)) out = j.at(key);
}

}  // namespace detail

inline void validate(const AnalysisConfig& c) {
  const bool sweights = c.method.rfind("sweights-", 0) == 0;
  if (!sweights && c.method != "cow")
    throw InvalidArgument(detail::concat("unknown method '", c.method, "' (sweights-A|B|Ci|Cii or cow)"));
  if (sweights) {
    const Variant v = c.variant();
    if (v == Variant::custom) throw InvalidArgument("method sweights-custom is not available from the command line");
  }
  if (c.cow_basis != "monomial" && c.cow_basis != "bernstein")
    throw InvalidArgument(detail::concat("unknown cow basis '", c.cow_basis, "'"));
  if (c.cow_order < 0) throw InvalidArgument("cow order must be non-negative");
  (void)variance_choice_from_string(c.cow_variance);
  if (c.cow_bins < 1) throw InvalidArgument("cow bins must be at least 1");
  if (c.correction != "fixed" && c.correction != "full")
    throw InvalidArgument(detail::concat("unknown correction '", c.correction, "' (fixed|full)"));
  if (sweights && !c.efficiency.is_null() && !c.allow_efficiency_division)
    throw InvalidArgument(
        "an efficiency map with classic sWeights requires allow_efficiency_division; dividing sWeights by an "
        "m-dependent efficiency is biased, use method cow instead");
  if (c.correction == "full" && (c.method != "sweights-B" || !c.efficiency.is_null()))
    throw InvalidArgument("the full correction is implemented for sweights-B without an efficiency map");
}

inline AnalysisConfig analysis_config_from_json(const Json& j) {
  AnalysisConfig c;
  if (j.is_null()) return c;
  detail::reject_unknown_keys(j,
                              {"data", "model", "method", "cow", "efficiency", "allow_efficiency_division", "control",
                               "correction", "outputs", "seed"},
                              "analysis config");
  detail::read_key(j, "data", c.data);
  detail::read_json_key(j, "model", c.model);
  detail::read_key(j, "method", c.method);
  if (j.contains("cow")) {
    const Json& cj = j["cow"];
    detail::reject_unknown_keys(cj, {"basis", "order", "variance_fn", "bins", "signal_proxy"}, "cow options");
    detail::read_key(cj, "basis", c.cow_basis);
    detail::read_key(cj, "order", c.cow_order);
    detail::read_key(cj, "variance_fn", c.cow_variance);
    detail::read_key(cj, "bins", c.cow_bins);
    detail::read_json_key(cj, "signal_proxy", c.signal_proxy);
  }
  detail::read_json_key(j, "efficiency", c.efficiency);
  detail::read_key(j, "allow_efficiency_division", c.allow_efficiency_division);
  detail::read_json_key(j, "control", c.control);
  detail::read_key(j, "correction", c.correction);
  if (j.contains("outputs")) {
    const Json& oj = j["outputs"];
    detail::reject_unknown_keys(oj, {"weights", "fit", "covariance", "summary"}, "outputs");
    detail::read_key(oj, "weights", c.out_weights);
    detail::read_key(oj, "fit", c.out_fit);
    detail::read_key(oj, "covariance", c.out_covariance);
    detail::read_key(oj, "summary", c.out_summary);
  }
  detail::read_key(j, "seed", c.seed);
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Ensemble configuration

inline Json to_json(const MethodSpec& m) {
  Json j{{"name", m.name}, {"kind", m.kind == MethodSpec::Kind::sweights ? "sweights" : "cow"}};
  if (m.kind == MethodSpec::Kind::sweights) {
    j["variant"] = std::string(to_string(m.variant));
  } else {
    j["order"] = m.poly_order;
    j["variance_fn"] = std::string(to_string(m.variance));
    j["bins"] = m.qm_bins;
  }
  j["efficiency_correct"] = m.efficiency_correct;
  return j;
}

inline MethodSpec method_spec_from_json(const Json& j) {
  detail::reject_unknown_keys(j, {"name", "kind", "variant", "order", "variance_fn", "bins", "efficiency_correct"},
                              "method");
  std::string kind = "sweights";
  detail::read_key(j, "kind", kind);
  MethodSpec m;
  if (kind == "sweights") {
    std::string v = "B";
    detail::read_key(j, "variant", v);
    m = MethodSpec::sweights(variant_from_string(v));
  } else if (kind == "cow") {
    int order = 3;
    std::string var = "qm";
    std::size_t bins = 50;
    detail::read_key(j, "order", order);
    detail::read_key(j, "variance_fn", var);
    detail::read_key(j, "bins", bins);
    if (order < 0) throw InvalidArgument("cow order must be non-negative");
    if (bins < 1) throw InvalidArgument("cow bins must be at least 1");
    m = MethodSpec::cow(order, variance_choice_from_string(var), bins);
  } else {
    throw InvalidArgument(detail::concat("unknown method kind '", kind, "'"));
  }
  detail::read_key(j, "efficiency_correct", m.efficiency_correct);
  detail::read_key(j, "name", m.name);
  return m;
}

inline Json to_json(const ToySpec& s) {
  Json j{{"study", std::string(to_string(s.study))},
         {"n_events", s.n_events},
         {"fractions", s.resolved_fractions()},
         {"poisson", s.poisson},
         {"efficiency", s.efficiency},
         {"seed", s.seed}};
  if (s.study == Study::simple) {
    const auto& t = s.simple;
    j["truth"] = {{"m_range", to_json(t.m_range)},
                  {"t_range", to_json(t.t_range)},
                  {"signal_mean", t.signal_mean},
                  {"signal_width", t.signal_width},
                  {"background_slope", t.background_slope},
                  {"signal_rate", t.signal_rate},
                  {"background_t_mean", t.background_t_mean},
                  {"background_t_width", t.background_t_width}};
  } else if (s.study == Study::nonfactorising) {
    j["truth"] = {{"coupling", s.nonfactorising.coupling}, {"signal_rate", s.nonfactorising.signal_rate}};
  } else {
    j["truth"] = Json::object();
  }
  return j;
}

inline ToySpec toy_spec_from_json(const Json& j) {
  ToySpec s;
  if (j.is_null()) return s;
  detail::reject_unknown_keys(j, {"study", "n_events", "fractions", "poisson", "efficiency", "seed", "truth"},
                              "toy spec");
  std::string study = "simple";
  detail::read_key(j, "study", study);
  s.study = study_from_string(study);
  long long n = static_cast<long long>(s.n_events);
  detail::read_key(j, "n_events", n);
  if (n < 1) throw InvalidArgument("n_events must be at least 1");
  s.n_events = static_cast<std::size_t>(n);
  detail::read_key(j, "fractions", s.fractions);
  detail::read_key(j, "poisson", s.poisson);
  detail::read_key(j, "efficiency", s.efficiency);
  detail::read_key(j, "seed", s.seed);
  if (j.contains("truth")) {
    const Json& t = j["truth"];
    if (s.study == Study::simple) {
      detail::reject_unknown_keys(t,
                                  {"m_range", "t_range", "signal_mean", "signal_width", "background_slope",
                                   "signal_rate", "background_t_mean", "background_t_width"},
                                  "simple truth");
      auto& tr = s.simple;
      if (t.contains("m_range")) tr.m_range = interval_from_json(t["m_range"]);
      if (t.contains("t_range")) tr.t_range = interval_from_json(t["t_range"]);
      detail::read_key(t, "signal_mean", tr.signal_mean);
      detail::read_key(t, "signal_width", tr.signal_width);
      detail::read_key(t, "background_slope", tr.background_slope);
      detail::read_key(t, "signal_rate", tr.signal_rate);
      detail::read_key(t, "background_t_mean", tr.background_t_mean);
      detail::read_key(t, "background_t_width", tr.background_t_width);
    } else if (s.study == Study::nonfactorising) {
      detail::reject_unknown_keys(t, {"coupling", "signal_rate"}, "nonfactorising truth");
      detail::read_key(t, "coupling", s.nonfactorising.coupling);
      detail::read_key(t, "signal_rate", s.nonfactorising.signal_rate);
    } else {
      detail::reject_unknown_keys(t, {}, "multicomponent truth");
    }
  }
  s.validate();
  return s;
}

inline Json to_json(const EnsembleConfig& c) {
  Json methods = Json::array();
  for (const auto& m : c.methods) methods.push_back(to_json(m));
  return Json{{"toy", to_json(c.toy)},           {"methods", methods},
              {"n_toys", c.n_toys},              {"base_seed", c.base_seed},
              {"jobs", c.jobs},                  {"free_shapes", c.free_shapes},
              {"full_correction", c.full_correction}};
}

inline EnsembleConfig ensemble_config_from_json(const Json& j) {
  EnsembleConfig c;
  if (j.is_null()) return c;
  detail::reject_unknown_keys(j, {"toy", "methods", "n_toys", "base_seed", "jobs", "free_shapes", "full_correction"},
                              "ensemble config");
  if (j.contains("toy")) c.toy = toy_spec_from_json(j["toy"]);
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j["methods"]) c.methods.push_back(method_spec_from_json(m));
  }
  long long n = static_cast<long long>(c.n_toys);
  detail::read_key(j, "n_toys", n);
  if (n < 1) throw InvalidArgument("n_toys must be at least 1");
  c.n_toys = static_cast<std::size_t>(n);
  detail::read_key(j, "base_seed", c.base_seed);
  detail::read_key(j, "jobs", c.jobs);
  detail::read_key(j, "free_shapes", c.free_shapes);
  detail::read_key(j, "full_correction", c.full_correction);
  return c;
}

inline Json to_json(const ToyRecord& r) {
  return Json{{"toy", r.toy},
              {"seed", r.seed},
              {"method", r.method},
              {"estimate", r.estimate},
              {"truth", r.truth},
              {"sigma_corrected", r.sigma_corrected},
              {"sigma_naive", r.sigma_naive},
              {"sigma_full", std::isfinite(r.sigma_full) ? Json(r.sigma_full) : Json()},
              {"sum_w", r.sum_w},
              {"sum_w2", r.sum_w2},
              {"n_eq", r.n_eq},
              {"fitted_yield", r.fitted_yield},
              {"sigma_yield_yields_only", r.sigma_yield_yields_only},
              {"sigma_yield_free", std::isfinite(r.sigma_yield_free) ? Json(r.sigma_yield_free) : Json()},
              {"n_events", r.n_events},
              {"n_signal_true", r.n_signal_true}};
}

inline Json to_json(const SampleSummary& s) {
  return Json{{"n", s.n},
              {"mean", s.mean},
              {"stddev", s.stddev},
              {"mean_error", s.mean_error},
              {"stddev_error", s.stddev_error}};
}

inline Json to_json(const MethodSummary& s) {
  return Json{{"method", s.method},
              {"n", s.n},
              {"estimate", to_json(s.estimate)},
              {"pull", to_json(s.pull_corrected)},
              {"pull_naive", to_json(s.pull_naive)},
              {"pull_full", to_json(s.pull_full)},
              {"bias", s.bias},
              {"coverage68", s.coverage68},
              {"mean_n_eq", s.mean_n_eq},
              {"mean_sigma_ratio", s.mean_sigma_ratio},
              {"mean_yield_diff", s.mean_yield_diff}};
}

inline Json to_json(const EnsembleReport& r) {
  Json records = Json::array(), failures = Json::array(), summaries = Json::array();
  for (const auto& x : r.records) records.push_back(to_json(x));
  for (const auto& f : r.failures)
    failures.push_back({{"toy", f.toy}, {"seed", f.seed}, {"method", f.method}, {"error", f.error}});
  for (const auto& s : r.summaries) summaries.push_back(to_json(s));
  return Json{{"config", to_json(r.config)}, {"valid", r.valid},         {"failed_toys", r.failed_toys},
              {"failures", failures},        {"summaries", summaries},   {"records", records}};
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

struct Provenance {
  std::string hash;
  std::uint64_t seed = 0;

  Json json() const { return Json{{"tool", "cowlib"}, {"version", tool_version}, {"config_hash", hash}, {"seed", seed}}; }
  std::string comment() const { return concat("cowlib ", tool_version, " config_hash=", hash, " seed=", seed); }
};

inline Provenance provenance_of(const Json& config, std::uint64_t seed) {
  return {hash_string(config_hash(config)), seed};
}

inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("COWLIB_SEED");
  if (!s || !*s) return std::nullopt;
  std::uint64_t v = 0;
  const char* e = s + std::char_traits<char>::length(s);
  const auto r = std::from_chars(s, e, v);
  if (r.ec != std::errc() || r.ptr != e) throw InvalidArgument(concat("COWLIB_SEED='", s, "' is not an unsigned integer"));
  return v;
}

inline Json resolve_json(const Json& v, std::string_view what) {
  if (v.is_string()) return read_json(v.get<std::string>());
  if (v.is_null()) throw InvalidArgument(concat("no ", what, " given"));
  return v;
}

struct Events {
  std::vector<double> m, t;
  bool has_t = false;
};

inline Events load_events(const std::string& path) {
  const Table tab = read_csv(path);
  Events ev;
  const auto mi = tab.find("m");
  ev.m = tab.data[mi ? *mi : 0];
  if (const auto ti = tab.find("t")) {
    ev.t = tab.data[*ti];
    ev.has_t = true;
  } else if (!mi && tab.columns.size() >= 2) {
    ev.t = tab.data[1];
    ev.has_t = true;
  }
  if (ev.m.empty()) throw IoError(concat(path, ": no events"));
  return ev;
}

inline void check_in_support(std::span<const double> m, const Interval& iv, const char* what) {
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!iv.contains(m[i]))
      throw OutOfRangeError(concat(what, " value ", m[i], " of event ", i + 1, " lies outside [", iv.lo, ", ", iv.hi, "]"));
}

inline std::vector<std::string> weight_column_names(const MixtureModel& model) {
  std::vector<std::string> names;
  if (model.size() == 2) return {"w_s", "w_b"};
  for (const auto& c : model.components) names.push_back("w_" + c.label);
  return names;
}

inline std::vector<Density1D> background_basis(const std::string& kind, int order, const Interval& support) {
  return kind == "bernstein" ? bernstein_basis(order, support) : monomial_basis(order + 1, support);
}

struct FittedModel {
  FitResult free_fit, yields_fit;
  MixtureModel model;  // shapes from the free fit, yields from the refit
};

inline FittedModel fit_model(std::span<const double> m, const MixtureModel& model) {
  FittedModel out;
  out.free_fit = fit_extended_ml(m, model);
  if (!out.free_fit.converged) throw NotConvergedError("mass fit did not converge: " + out.free_fit.message);
  const MixtureModel shaped = model.with_parameters(out.free_fit.params);
  out.yields_fit = yields_only_refit(m, shaped);
  if (!out.yields_fit.converged) throw NotConvergedError("yields-only refit did not converge: " + out.yields_fit.message);
  MixtureModel fixed = shaped.with_fixed_shapes().with_parameters(out.yields_fit.params);
  for (std::size_t k = 0; k < fixed.size(); ++k) fixed.components[k].free = model.components[k].free;
  out.model = std::move(fixed);
  return out;
}

inline WeightMatrix sweight_matrix(Variant v, const FittedModel& fm, std::span<const double> m) {
  const auto dens = fm.model.densities();
  const auto z = fm.model.fractions();
  switch (v) {
    case Variant::A: return compute_W_variant_A(dens, z, fm.model.support, 1e-10);
    case Variant::B: return compute_W_variant_B(dens, z, m);
    case Variant::Ci:
      if (!fm.free_fit.has_covariance()) throw SingularMatrixError("free-fit covariance unavailable for variant Ci");
      return compute_W_variant_C(fm.free_fit, m.size(), CovarianceMode::invert_full, dens.size());
    case Variant::Cii:
      if (!fm.yields_fit.has_covariance()) throw SingularMatrixError("yields-only covariance unavailable for variant Cii");
      return compute_W_variant_C(fm.yields_fit, m.size(), CovarianceMode::yields_only, dens.size());
    case Variant::custom: break;
  }
  throw InvalidArgument("variant not available");
}

inline Json weight_stats(std::span<const double> w) {
  NeumaierSum s, s2;
  for (double x : w) {
    s += x;
    s2 += x * x;
  }
  return Json{{"sum_w", s.value()}, {"sum_w2", s2.value()}, {"n_eq", s2.value() > 0 ? equivalent_events(w) : 0.0}};
}

struct CowInputs {
  std::vector<Density1D> signal;
  std::vector<Density1D> background;
  std::optional<Density1D> proxy;
  std::string variance = "unity";
  std::size_t bins = 50;
  std::vector<double> mixture_z;
  std::optional<EfficiencyMap> efficiency;
  Interval support{0.0, 1.0};
};

inline CowSet build_cow_from(const CowInputs& in, std::span<const double> m, std::span<const double> t, Json& info) {
  CowSpec spec;
  spec.basis = in.signal;
  spec.basis.insert(spec.basis.end(), in.background.begin(), in.background.end());
  spec.n_signal = in.signal.size();
  spec.signal_proxy = in.proxy;
  spec.support = in.support;
  spec.efficiency = in.efficiency;
  const VarianceChoice choice = variance_choice_from_string(in.variance);
  switch (choice) {
    case VarianceChoice::unity: spec.variance = VarianceFunction::unity(); break;
    case VarianceChoice::qm: {
      if (in.efficiency && t.size() != m.size()) throw InvalidArgument("the qm variance function with an efficiency needs t");
      const EfficiencyMap eff = in.efficiency ? *in.efficiency : EfficiencyMap::constant(1.0);
      std::vector<double> tt(t.begin(), t.end());
      if (tt.size() != m.size()) tt.assign(m.size(), 0.0);
      spec.variance = VarianceFunction::histogram(variance_fn_qm(m, tt, eff, in.bins, in.support));
      break;
    }
    case VarianceChoice::mixture:
      if (in.mixture_z.size() != spec.basis.size())
        throw InvalidArgument("mixture variance function needs one coefficient per basis element");
      spec.variance = VarianceFunction::mixture(in.mixture_z, spec.basis);
      break;
    case VarianceChoice::ml: {
      auto r = variance_fn_ml_iterative(spec.basis, spec.support, m, t, in.efficiency, 50, 1e-8, spec.n_signal);
      info["ml_iterations"] = r.iterations;
      info["ml_clipped"] = r.clipped;
      spec.variance = r.cow.spec().variance;
      break;
    }
  }
  return build_cow(std::move(spec));
}

inline CorrectedCovariance correct_weighted_fit(std::span<const double> m, std::span<const double> t,
                                                std::span<const double> w, const Density1D& hhat,
                                                const MixtureModel* mass_model, bool sweights_e_term,
                                                std::optional<std::span<const double>> eps) {
  if (sweights_e_term && mass_model && mass_model->size() == 2) {
    const auto dens = mass_model->densities();
    const auto y = mass_model->yields();
    auto terms = sweight_terms(m, dens[0], dens[1], y[0], y[1]);
    if (eps)
      for (std::size_t i = 0; i < m.size(); ++i) terms.dw.row(static_cast<Eigen::Index>(i)) /= (*eps)[i];
    return corrected_covariance_fixed_shapes(t, w, terms.dw, terms.u, hhat);
  }
  return corrected_covariance_fixed_shapes(t, w, Matrix(), Matrix(), hhat);
}

inline QuasiScoreModel quasi_score_model(const MixtureModel& mm, const Density1D& hs) {
  if (mm.size() != 2) throw InvalidArgument("the full correction needs a two-component mass model");
  QuasiScoreModel q;
  q.gs = mm.components[0].density;
  q.gb = mm.components[1].density;
  q.free_s = mm.components[0].free;
  q.free_b = mm.components[1].free;
  q.hs = hs;
  return q;
}

inline Json weighted_fit_json(const FitResult& wf, const CorrectedCovariance& cc) {
  Json j = to_json(cc);
  j["params"] = wf.params;
  j["names"] = wf.names;
  std::vector<double> corrected, naive;
  for (Eigen::Index i = 0; i < cc.theta_block.rows(); ++i) {
    corrected.push_back(std::sqrt(cc.theta_block(i, i)));
    naive.push_back(std::sqrt(cc.naive(i, i)));
  }
  j["errors"] = corrected;
  j["naive_errors"] = naive;
  return j;
}

}  // namespace detail

/// Runs a full analysis described by cfg; returns the summary JSON.
inline Json run_pipeline(const AnalysisConfig& cfg, const detail::Provenance& prov) {
  validate(cfg);
  if (cfg.data.empty()) throw InvalidArgument("no data file given");
  const auto ev = detail::load_events(cfg.data);
  MixtureModel model = mixture_model_from_json(detail::resolve_json(cfg.model, "model"));
  detail::check_in_support(ev.m, model.support, "m");
  std::optional<EfficiencyMap> eff;
  if (!cfg.efficiency.is_null()) eff = efficiency_from_json(detail::resolve_json(cfg.efficiency, "efficiency"));
  else if (model.efficiency) eff = model.efficiency;
  if (eff && eff->is_unity()) eff.reset();
  if (eff && !ev.has_t) throw InvalidArgument("an efficiency map needs a t column in the data");
  if (eff && !cfg.is_cow() && !cfg.allow_efficiency_division)
    throw InvalidArgument("the model carries an efficiency map; classic sWeights need allow_efficiency_division");

  const auto fm = detail::fit_model(ev.m, model);
  Json summary;
  summary["provenance"] = prov.json();
  summary["n_events"] = ev.m.size();
  summary["fit"] = to_json(fm.free_fit);
  summary["yields_only_fit"] = to_json(fm.yields_fit);
  if (!cfg.out_fit.empty())
    write_json(cfg.out_fit, Json{{"free", to_json(fm.free_fit)},
                                 {"yields_only", to_json(fm.yields_fit)},
                                 {"model", to_json(fm.model)},
                                 {"provenance", prov.json()}});

  const std::size_t n = ev.m.size();
  std::vector<double> eps;
  if (eff) {
    eps.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      eps[i] = (*eff)(ev.m[i], ev.t[i]);
      if (!(eps[i] >= min_efficiency)) throw InvalidArgument(detail::concat("efficiency below 1e-6 at event ", i + 1));
    }
  }

  Table out;
  out.add("m", ev.m);
  if (ev.has_t) out.add("t", ev.t);
  std::vector<double> ws(n);
  if (!cfg.is_cow()) {
    const WeightMatrix wm = detail::sweight_matrix(cfg.variant(), fm, ev.m);
    const WeightFunctionSet wfs(wm, fm.model.densities());
    if (!wfs.warning().empty()) summary["warning"] = wfs.warning();
    const Matrix per = apply_weights(wfs, ev.m);
    const auto names = detail::weight_column_names(fm.model);
    for (Eigen::Index k = 0; k < per.cols(); ++k) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = per(static_cast<Eigen::Index>(i), k) / (eff ? eps[i] : 1.0);
      if (k == 0) ws = col;
      out.add(names[static_cast<std::size_t>(k)], std::move(col));
    }
    summary["weight_matrix"] = to_json(wm);
  } else {
    detail::CowInputs in;
    in.signal = {fm.model.components[0].density};
    in.background = detail::background_basis(cfg.cow_basis, cfg.cow_order, fm.model.support);
    if (!cfg.signal_proxy.is_null()) in.proxy = density_from_json(cfg.signal_proxy);
    in.variance = cfg.cow_variance;
    in.bins = cfg.cow_bins;
    in.efficiency = eff;
    in.support = fm.model.support;
    if (cfg.cow_variance == "mixture") {
      // fitted signal fraction on g_0; the background share spread over the basis
      const auto z = fm.model.fractions();
      in.mixture_z.assign(1 + in.background.size(), (1.0 - z[0]) / static_cast<double>(in.background.size()));
      in.mixture_z[0] = z[0];
    }
    Json info = Json::object();
    const CowSet cow = detail::build_cow_from(in, ev.m, ev.t, info);
    const Matrix per = efficiency_corrected_weights(cow, eff, ev.m, ev.t);
    for (Eigen::Index k = 0; k < per.cols(); ++k) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = per(static_cast<Eigen::Index>(i), k);
      out.add(detail::concat("w_", k), std::move(col));
    }
    const auto blocks = block_weights(per, cow.n_signal());
    ws = blocks.signal;
    out.add("w_s", ws);
    const auto fr = estimate_fractions(cow, ev.m, ev.t, eff);
    info["W"] = matrix_to_json(cow.W());
    info["z_hat"] = fr.z;
    info["D_hat"] = fr.D;
    summary["cow"] = info;
  }
  if (!cfg.out_weights.empty()) write_csv(cfg.out_weights, out, prov.comment());
  summary["signal_weights"] = detail::weight_stats(ws);
  summary["signal_yield"] = fm.yields_fit.params[0];
  if (fm.yields_fit.has_covariance()) summary["signal_yield_error"] = fm.yields_fit.error(0);
  if (ev.has_t) {
    const auto rep = kendall_tau(ev.m, ev.t);
    summary["independence"] = {{"tau", rep.tau}, {"n", rep.n}, {"approx_sigma", rep.approx_sigma}};
  }

  if (!cfg.control.is_null()) {
    if (!ev.has_t) throw InvalidArgument("a control density needs a t column in the data");
    Json cj = cfg.control;
    const Density1D h0 = density_from_json(cj);
    detail::check_in_support(ev.t, h0.support(), "t");
    const FitResult wf = fit_weighted_ml(ev.t, ws, h0);
    if (!wf.converged) throw NotConvergedError("weighted fit did not converge: " + wf.message);
    const Density1D hhat = h0.with_params(wf.params);
    CorrectedCovariance cc;
    if (cfg.correction == "full") {
      const auto q = detail::quasi_score_model(fm.model, hhat);
      const auto y = fm.model.yields();
      const auto lambda = stack_parameters(ev.m, q, y[0], y[1], wf.params);
      cc = corrected_covariance_full(ev.m, ev.t, q, lambda);
    } else {
      std::optional<std::span<const double>> eps_span;
      if (eff) eps_span = std::span<const double>(eps);
      cc = detail::correct_weighted_fit(ev.m, ev.t, ws, hhat, &fm.model, !cfg.is_cow(), eps_span);
    }
    Json cov = detail::weighted_fit_json(wf, cc);
    cov["mode"] = cfg.correction;
    cov["provenance"] = prov.json();
    if (!cfg.out_covariance.empty()) write_json(cfg.out_covariance, cov);
    summary["weighted_fit"] = cov;
  }
  if (!cfg.out_summary.empty()) write_json(cfg.out_summary, summary);
  return summary;
}

namespace detail {

inline int report_error(std::ostream& err, const std::exception& e, int code) {
  err << "cowlib: error: " << e.what() << '\n';
  return code;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Signal weights, COWs and weighted-fit covariance corrections", "cowlib"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tool_version));

  // fit
  auto* fit = app.add_subcommand("fit", "Extended maximum-likelihood fit of a mixture model in m");
  std::string data, model_path, out_path, variant = "B", spec_path, weights_path, column = "w_s", mode = "fixed",
                                          mass_model_path, config_path, kind = "analysis", xcol, ycol;
  bool yields_only = false, no_fit = false;
  unsigned jobs = 0;
  fit->add_option("--data", data, "CSV with an m column")->required();
  fit->add_option("--model", model_path, "mixture model JSON")->required();
  fit->add_option("--out", out_path, "output JSON")->default_val("fit.json");
  fit->add_flag("--yields-only", yields_only, "fix all shape parameters");

  auto* sw = app.add_subcommand("sweights", "Per-event sWeights");
  sw->add_option("--data", data)->required();
  sw->add_option("--model", model_path)->required();
  sw->add_option("--variant", variant, "A, B, Ci or Cii")->default_val("B");
  sw->add_option("--out", out_path)->default_val("weights.csv");
  sw->add_flag("--no-fit", no_fit, "use the model as given instead of fitting it first");

  auto* cw = app.add_subcommand("cow", "Custom orthogonal weight functions");
  cw->add_option("--data", data)->required();
  cw->add_option("--spec", spec_path, "COW specification JSON")->required();
  cw->add_option("--out", out_path)->default_val("weights.csv");

  auto* cr = app.add_subcommand("correct", "Corrected covariance of a weighted fit");
  cr->add_option("--data", data, "CSV with m and t columns")->required();
  cr->add_option("--weights", weights_path, "weights CSV");
  cr->add_option("--column", column, "weight column")->default_val("w_s");
  cr->add_option("--model", model_path, "density JSON for the t fit")->required();
  cr->add_option("--mode", mode, "fixed or full")->default_val("fixed");
  cr->add_option("--mass-model", mass_model_path, "fitted two-component mass model JSON (sWeights E term, full mode)");
  cr->add_option("--out", out_path)->default_val("covariance.json");

  auto* ci = app.add_subcommand("check-independence", "Kendall rank correlation between two columns");
  ci->add_option("--data", data)->required();
  ci->add_option("--x", xcol, "first column (default m)");
  ci->add_option("--y", ycol, "second column (default t)");
  ci->add_option("--out", out_path);

  auto* toys = app.add_subcommand("toys", "Run a pseudo-experiment ensemble");
  toys->add_option("--config", config_path)->required();
  toys->add_option("--out", out_path)->default_val("report.json");
  toys->add_option("--jobs", jobs, "worker threads");

  auto* gen = app.add_subcommand("generate", "Generate one toy dataset as CSV");
  gen->add_option("--config", config_path, "toy spec JSON");
  gen->add_option("--out", out_path)->default_val("data.csv");

  auto* pipe = app.add_subcommand("pipeline", "Fit, weights, weighted fit and covariance correction");
  pipe->add_option("--config", config_path)->required();

  auto* echo = app.add_subcommand("echo", "Print the version and the resolved configuration");
  echo->add_option("--config", config_path);
  echo->add_option("--kind", kind, "analysis or ensemble")->default_val("analysis");

  auto* ver = app.add_subcommand("version", "Print the version");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? exit_ok : exit_input;
    }

    if (ver->parsed()) {
      out << "cowlib " << tool_version << '\n';
      return exit_ok;
    }

    if (echo->parsed()) {
      Json raw = config_path.empty() ? Json() : read_json(config_path);
      Json resolved;
      if (kind == "analysis") {
        resolved = to_json(analysis_config_from_json(raw));
      } else if (kind == "ensemble") {
        resolved = to_json(ensemble_config_from_json(raw));
      } else {
        throw InvalidArgument(detail::concat("unknown config kind '", kind, "'"));
      }
      resolved["cowlib_version"] = std::string(tool_version);
      out << resolved.dump(2) << '\n';
      return exit_ok;
    }

    if (fit->parsed()) {
      const auto ev = detail::load_events(data);
      MixtureModel model = mixture_model_from_json(read_json(model_path));
      detail::check_in_support(ev.m, model.support, "m");
      const Json cfg{{"command", "fit"}, {"model", to_json(model)}, {"yields_only", yields_only}};
      const auto prov = detail::provenance_of(cfg, 0);
      const FitResult r = yields_only ? yields_only_refit(ev.m, model) : fit_extended_ml(ev.m, model);
      Json j = to_json(r);
      j["model"] = to_json(yields_only ? model.with_fixed_shapes().with_parameters(r.params)
                                       : model.with_parameters(r.params));
      j["provenance"] = prov.json();
      write_json(out_path, j);
      if (!r.converged) {
        err << "cowlib: fit did not converge: " << r.message << '\n';
        return exit_numerical;
      }
      out << "converged nll=" << detail::format_double(r.nll) << '\n';
      return exit_ok;
    }

    if (sw->parsed()) {
      const auto ev = detail::load_events(data);
      MixtureModel model = mixture_model_from_json(read_json(model_path));
      detail::check_in_support(ev.m, model.support, "m");
      if (model.efficiency && !model.efficiency->is_unity())
        throw InvalidArgument("classic sWeights do not take an efficiency map; use the cow command");
      const Variant v = variant_from_string(variant);
      const Json cfg{{"command", "sweights"}, {"model", to_json(model)}, {"variant", variant}, {"no_fit", no_fit}};
      const auto prov = detail::provenance_of(cfg, 0);
      detail::FittedModel fm;
      if (no_fit) {
        if (v == Variant::Ci || v == Variant::Cii) throw InvalidArgument("variant C needs a fit; drop --no-fit");
        fm.model = model;
      } else {
        fm = detail::fit_model(ev.m, model);
      }
      const WeightMatrix wm = detail::sweight_matrix(v, fm, ev.m);
      const WeightFunctionSet wfs(wm, fm.model.densities());
      if (!wfs.warning().empty()) err << "cowlib: warning: " << wfs.warning() << '\n';
      const Matrix per = apply_weights(wfs, ev.m);
      Table tab;
      tab.add("m", ev.m);
      const auto names = detail::weight_column_names(fm.model);
      for (Eigen::Index k = 0; k < per.cols(); ++k) {
        std::vector<double> col(per.rows());
        for (Eigen::Index i = 0; i < per.rows(); ++i) col[static_cast<std::size_t>(i)] = per(i, k);
        tab.add(names[static_cast<std::size_t>(k)], std::move(col));
      }
      write_csv(out_path, tab, prov.comment());
      Json summary = to_json(wm);
      summary["signal_weights"] = detail::weight_stats(tab.data[1]);
      summary["model"] = to_json(fm.model);
      out << summary.dump(2) << '\n';
      return exit_ok;
    }

    if (cw->parsed()) {
      const auto ev = detail::load_events(data);
      const Json spec = read_json(spec_path);
      detail::reject_unknown_keys(spec, {"support", "signal", "background", "signal_proxy", "variance_fn", "efficiency"},
                                  "cow spec");
      detail::CowInputs in;
      in.support = interval_from_json(spec.at("support"));
      detail::check_in_support(ev.m, in.support, "m");
      auto densities = [&](const Json& j) {
        std::vector<Density1D> v;
        const Json arr = j.is_array() ? j : Json::array({j});
        for (Json d : arr) {
          if (!d.contains("support")) d["support"] = to_json(in.support);
          v.push_back(density_from_json(d));
        }
        return v;
      };
      in.signal = densities(spec.at("signal"));
      const Json& bg = spec.at("background");
      if (bg.is_object() && bg.contains("order")) {
        in.background = detail::background_basis(bg.value("basis", std::string("monomial")), bg.at("order").get<int>(),
                                                 in.support);
      } else {
        in.background = densities(bg);
      }
      if (spec.contains("signal_proxy") && !spec["signal_proxy"].is_null())
        in.proxy = densities(spec["signal_proxy"]).front();
      const Json vf = spec.value("variance_fn", Json("unity"));
      if (vf.is_string()) {
        in.variance = vf.get<std::string>();
      } else if (vf.contains("qm")) {
        in.variance = "qm";
        in.bins = vf["qm"].value("bins", std::size_t{50});
      } else if (vf.contains("mixture")) {
        in.variance = "mixture";
        in.mixture_z = vf["mixture"].get<std::vector<double>>();
      } else {
        throw InvalidArgument("variance_fn must be \"unity\", \"ml\", {\"qm\": {\"bins\": n}} or {\"mixture\": [z...]}");
      }
      if (spec.contains("efficiency") && !spec["efficiency"].is_null()) {
        in.efficiency = efficiency_from_json(detail::resolve_json(spec["efficiency"], "efficiency"));
        if (!ev.has_t) throw InvalidArgument("an efficiency map needs a t column in the data");
      }
      const auto prov = detail::provenance_of(Json{{"command", "cow"}, {"spec", spec}}, 0);
      Json info = Json::object();
      const CowSet cow = detail::build_cow_from(in, ev.m, ev.t, info);
      const Matrix per = efficiency_corrected_weights(cow, in.efficiency, ev.m, ev.t);
      Table tab;
      tab.add("m", ev.m);
      if (ev.has_t) tab.add("t", ev.t);
      for (Eigen::Index k = 0; k < per.cols(); ++k) {
        std::vector<double> col(per.rows());
        for (Eigen::Index i = 0; i < per.rows(); ++i) col[static_cast<std::size_t>(i)] = per(i, k);
        tab.add(detail::concat("w_", k), std::move(col));
      }
      const auto blocks = block_weights(per, cow.n_signal());
      tab.add("w_s", blocks.signal);
      write_csv(out_path, tab, prov.comment());
      const auto fr = estimate_fractions(cow, ev.m, ev.t, in.efficiency);
      info["W"] = matrix_to_json(cow.W());
      info["A"] = matrix_to_json(cow.A());
      info["z_hat"] = fr.z;
      info["D_hat"] = fr.D;
      info["signal_weights"] = detail::weight_stats(blocks.signal);
      out << info.dump(2) << '\n';
      return exit_ok;
    }

    if (cr->parsed()) {
      const auto ev = detail::load_events(data);
      if (!ev.has_t) throw InvalidArgument("the data need a t column");
      const Density1D h0 = density_from_json(read_json(model_path));
      detail::check_in_support(ev.t, h0.support(), "t");
      std::optional<MixtureModel> mass;
      if (!mass_model_path.empty()) {
        Json mj = read_json(mass_model_path);
        if (mj.contains("model")) mj = mj["model"];
        mass = mixture_model_from_json(mj);
      }
      if (mode != "fixed" && mode != "full") throw InvalidArgument("--mode must be fixed or full");
      std::vector<double> w;
      if (mode == "full") {
        if (!mass) throw InvalidArgument("--mode full needs --mass-model");
        const auto wm = compute_W_variant_B(mass->densities(), mass->fractions(), ev.m);
        const WeightFunctionSet wfs(wm, mass->densities());
        const Matrix per = apply_weights(wfs, ev.m);
        w.resize(ev.m.size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = per(static_cast<Eigen::Index>(i), 0);
      } else {
        if (weights_path.empty()) throw InvalidArgument("--mode fixed needs --weights");
        const Table wt = read_csv(weights_path);
        w = wt.find(column) ? wt.column(column) : wt.data.back();
        if (w.size() != ev.m.size())
          throw InvalidArgument(detail::concat("weights file has ", w.size(), " rows, data has ", ev.m.size()));
      }
      const Json cfg{{"command", "correct"}, {"model", to_json(h0)}, {"mode", mode},
                     {"mass_model", mass ? to_json(*mass) : Json()}};
      const auto prov = detail::provenance_of(cfg, 0);
      const FitResult wf = fit_weighted_ml(ev.t, w, h0);
      if (!wf.converged) throw NotConvergedError("weighted fit did not converge: " + wf.message);
      const Density1D hhat = h0.with_params(wf.params);
      CorrectedCovariance cc;
      if (mode == "full") {
        const auto q = detail::quasi_score_model(*mass, hhat);
        const auto y = mass->yields();
        cc = corrected_covariance_full(ev.m, ev.t, q, stack_parameters(ev.m, q, y[0], y[1], wf.params));
      } else {
        cc = detail::correct_weighted_fit(ev.m, ev.t, w, hhat, mass ? &*mass : nullptr, mass.has_value(), std::nullopt);
      }
      Json j = detail::weighted_fit_json(wf, cc);
      j["mode"] = mode;
      j["provenance"] = prov.json();
      write_json(out_path, j);
      out << j.dump(2) << '\n';
      return exit_ok;
    }

    if (ci->parsed()) {
      const Table tab = read_csv(data);
      const std::string xn = xcol.empty() ? (tab.find("m") ? "m" : tab.columns.at(0)) : xcol;
      std::string yn = ycol;
      if (yn.empty()) {
        if (tab.find("t")) yn = "t";
        else if (tab.columns.size() >= 2) yn = tab.columns[1];
        else throw InvalidArgument("the data need two columns");
      }
      const auto rep = kendall_tau(tab.column(xn), tab.column(yn));
      const Json j{{"x", xn},
                   {"y", yn},
                   {"tau", rep.tau},
                   {"n", rep.n},
                   {"approx_sigma", rep.approx_sigma},
                   {"significance", rep.tau / rep.approx_sigma}};
      if (!out_path.empty()) write_json(out_path, j);
      out << j.dump(2) << '\n';
      return exit_ok;
    }

    if (toys->parsed()) {
      EnsembleConfig cfg = ensemble_config_from_json(read_json(config_path));
      if (const auto s = detail::env_seed()) cfg.base_seed = *s;
      if (jobs > 0) cfg.jobs = jobs;
      EnsembleConfig hashed = cfg;
      hashed.jobs = 1;  // the report does not depend on the thread count
      const auto prov = detail::provenance_of(to_json(hashed), cfg.base_seed);
      const EnsembleReport rep = run_ensemble(cfg);
      Json j = to_json(rep);
      j["config"]["jobs"] = 1;
      j["provenance"] = prov.json();
      write_json(out_path, j);
      for (const auto& s : rep.summaries)
        out << s.method << ": n=" << s.n << " pull mean=" << detail::format_double(s.pull_corrected.mean)
            << " width=" << detail::format_double(s.pull_corrected.stddev) << '\n';
      if (!rep.valid) {
        err << "cowlib: ensemble invalid: " << rep.failed_toys << " of " << cfg.n_toys << " toys failed\n";
        return exit_invalid_ensemble;
      }
      return exit_ok;
    }

    if (gen->parsed()) {
      ToySpec spec = config_path.empty() ? ToySpec{} : toy_spec_from_json(read_json(config_path));
      if (const auto s = detail::env_seed()) spec.seed = *s;
      const auto prov = detail::provenance_of(to_json(spec), spec.seed);
      const Dataset d = generate(spec);
      Table tab;
      tab.add("m", d.m);
      if (!d.t.empty()) tab.add("t", d.t);
      if (!d.u.empty()) tab.add("u", d.u);
      if (!d.v.empty()) tab.add("v", d.v);
      tab.add("label", std::vector<double>(d.label.begin(), d.label.end()));
      write_csv(out_path, tab, prov.comment());
      out << "wrote " << d.size() << " events to " << out_path << '\n';
      return exit_ok;
    }

    if (pipe->parsed()) {
      const Json raw = read_json(config_path);
      AnalysisConfig cfg = analysis_config_from_json(raw);
      if (const auto s = detail::env_seed()) cfg.seed = *s;
      const auto prov = detail::provenance_of(to_json(cfg), cfg.seed);
      const Json summary = run_pipeline(cfg, prov);
      out << summary["signal_weights"].dump() << '\n';
      return exit_ok;
    }
  } catch (const NotConvergedError& e) {
    return detail::report_error(err, e, exit_numerical);
  } catch (const SingularMatrixError& e) {
    return detail::report_error(err, e, exit_numerical);
  } catch (const IllConditionedError& e) {
    return detail::report_error(err, e, exit_numerical);
  } catch (const NonFiniteError& e) {
    return detail::report_error(err, e, exit_numerical);
  } catch (const IntegrationError& e) {
    return detail::report_error(err, e, exit_numerical);
  } catch (const std::exception& e) {
    return detail::report_error(err, e, exit_input);
  }
  return exit_input;
}

}  // namespace cowlib
