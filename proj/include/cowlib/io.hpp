#pragma once

// CSV tables and JSON conversions for the library types.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cowlib/core.hpp"
#include "cowlib/density.hpp"
#include "cowlib/mlfit.hpp"
#include "cowlib/sweights.hpp"
#include "cowlib/wcov.hpp"

namespace cowlib {

using Json = nlohmann::json;

class IoError : public Error {
 public:
  using Error::Error;
};

/// Column-oriented numeric table.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> data;  // data[c][row]

  std::size_t rows() const noexcept { return data.empty() ? 0 : data.front().size(); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t c = 0; c < columns.size(); ++c)
      if (columns[c] == name) return c;
    return std::nullopt;
  }

  const std::vector<double>& column(std::string_view name) const {
    const auto c = find(name);
    if (!c) throw IoError(detail::concat("no column named '", name, "'"));
    return data[*c];
  }

  void add(std::string name, std::vector<double> values) {
    if (!data.empty() && values.size() != rows())
      throw InvalidArgument(detail::concat("column '", name, "' has ", values.size(), " rows, expected ", rows()));
    columns.push_back(std::move(name));
    data.push_back(std::move(values));
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(trim(cur));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  const char* b = s.data();
  const char* e = b + s.size();
  if (*b == '+') ++b;
  const auto r = std::from_chars(b, e, v);
  return r.ec == std::errc() && r.ptr == e;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Reads comma-separated numeric data. Blank lines and lines starting with '#'
/// are skipped. The first data line is a header when any field is not a
/// number; without a header the columns are named m, t, x2, x3, ...
inline Table read_csv(std::istream& in, const std::string& source = "<stream>") {
  Table table;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto fields = detail::split_fields(t);
    std::vector<double> values(fields.size());
    bool numeric = true;
    for (std::size_t i = 0; i < fields.size(); ++i) numeric = numeric && detail::parse_double(fields[i], values[i]);
    if (first) {
      first = false;
      if (!numeric) {
        for (const auto& f : fields) {
          if (f.empty()) throw IoError(detail::concat(source, ":", lineno, ": empty column name"));
          table.columns.push_back(f);
        }
        table.data.assign(fields.size(), {});
        continue;
      }
      for (std::size_t i = 0; i < fields.size(); ++i)
        table.columns.push_back(i == 0 ? "m" : i == 1 ? "t" : detail::concat("x", i));
      table.data.assign(fields.size(), {});
    }
    if (fields.size() != table.columns.size())
      throw IoError(detail::concat(source, ":", lineno, ": expected ", table.columns.size(), " fields, found ",
                                   fields.size()));
    if (!numeric) {
      for (std::size_t i = 0; i < fields.size(); ++i)
        if (!detail::parse_double(fields[i], values[i]))
          throw IoError(detail::concat(source, ":", lineno, ": field ", i + 1, " ('", fields[i], "') is not a number"));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i]))
        throw IoError(detail::concat(source, ":", lineno, ": field ", i + 1, " is not finite"));
      table.data[i].push_back(values[i]);
    }
  }
  if (table.columns.empty()) throw IoError(detail::concat(source, ": no data"));
  return table;
}

inline Table read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(detail::concat("cannot open '", path, "'"));
  return read_csv(in, path);
}

/// Writes the table with an optional leading comment line and 17 significant digits.
inline void write_csv(std::ostream& out, const Table& table, const std::string& comment = {}) {
  if (!comment.empty()) out << "# " << comment << '\n';
  for (std::size_t c = 0; c < table.columns.size(); ++c) out << (c ? "," : "") << table.columns[c];
  out << '\n';
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (std::size_t c = 0; c < table.columns.size(); ++c) out << (c ? "," : "") << detail::format_double(table.data[c][r]);
    out << '\n';
  }
}

inline void write_csv(const std::string& path, const Table& table, const std::string& comment = {}) {
  std::ofstream out(path);
  if (!out) throw IoError(detail::concat("cannot write '", path, "'"));
  write_csv(out, table, comment);
  if (!out) throw IoError(detail::concat("error writing '", path, "'"));
}

inline Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(detail::concat("cannot open '", path, "'"));
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError(detail::concat(path, ": ", e.what()));
  }
}

inline void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw IoError(detail::concat("cannot write '", path, "'"));
  out << j.dump(2) << '\n';
  if (!out) throw IoError(detail::concat("error writing '", path, "'"));
}

/// FNV-1a 64-bit hash of the compact JSON dump (object keys are sorted).
inline std::uint64_t config_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_string(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// JSON conversions

inline Json matrix_to_json(const Matrix& m) {
  Json j = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    j.push_back(row);
  }
  return j;
}

inline Matrix matrix_from_json(const Json& j) {
  if (!j.is_array()) throw InvalidArgument("matrix must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Matrix();
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (!j[r].is_array() || static_cast<Eigen::Index>(j[r].size()) != cols)
      throw InvalidArgument("matrix rows differ in length");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline Json to_json(const Interval& iv) { return Json::array({iv.lo, iv.hi}); }

inline Interval interval_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 2) throw InvalidArgument("interval must be [lo, hi]");
  return Interval(j[0].get<double>(), j[1].get<double>());
}

inline Json to_json(const Density1D& d) {
  Json j;
  j["kind"] = std::string(to_string(d.kind()));
  j["params"] = std::vector<double>(d.params().begin(), d.params().end());
  j["support"] = to_json(d.support());
  if (d.kind() == DensityKind::histogram) j["edges"] = std::vector<double>(d.grid().begin(), d.grid().end());
  if (d.kind() == DensityKind::table) j["x"] = std::vector<double>(d.grid().begin(), d.grid().end());
  if (d.kind() == DensityKind::mixture) {
    Json comps = Json::array();
    for (const auto& c : d.components()) comps.push_back(to_json(c));
    j["components"] = comps;
  }
  return j;
}

inline Density1D density_from_json(const Json& j) {
  try {
    const DensityKind kind = density_kind_from_string(j.at("kind").get<std::string>());
    const auto params = j.value("params", std::vector<double>{});
    if (kind == DensityKind::histogram && j.contains("edges"))
      return Density1D::histogram(j["edges"].get<std::vector<double>>(), params);
    if (kind == DensityKind::table && j.contains("x"))
      return Density1D::table(j["x"].get<std::vector<double>>(), params);
    if (kind == DensityKind::mixture) {
      std::vector<Density1D> comps;
      for (const auto& c : j.at("components")) comps.push_back(density_from_json(c));
      return Density1D::mixture(params, std::move(comps));
    }
    return make_density(kind, params, interval_from_json(j.at("support")));
  } catch (const Json::exception& e) {
    throw InvalidArgument(detail::concat("bad density description: ", e.what()));
  }
}

inline Json to_json(const Histogram1D& h) {
  return Json{{"edges", h.edges}, {"contents", h.contents}, {"sumw2", h.sumw2}};
}

inline Histogram1D histogram_from_json(const Json& j) {
  Histogram1D h(j.at("edges").get<std::vector<double>>());
  h.contents = j.at("contents").get<std::vector<double>>();
  h.sumw2 = j.value("sumw2", h.contents);
  if (h.contents.size() != h.bins() || h.sumw2.size() != h.bins())
    throw InvalidArgument("histogram contents do not match its edges");
  return h;
}

inline Json to_json(const EfficiencyMap& e) {
  Json j;
  const auto p = e.params();
  switch (e.kind()) {
    case EfficiencyMap::Kind::constant: j = {{"kind", "constant"}, {"value", p[0]}}; break;
    case EfficiencyMap::Kind::bilinear:
      j = {{"kind", "bilinear"},
           {"c0", p[0]},
           {"cm", p[1]},
           {"ct", p[2]},
           {"cmt", p[3]},
           {"m_range", to_json(e.m_range())},
           {"t_range", to_json(e.t_range())}};
      break;
    case EfficiencyMap::Kind::grid:
      j = {{"kind", "grid"},
           {"m_edges", std::vector<double>(e.m_edges().begin(), e.m_edges().end())},
           {"t_edges", std::vector<double>(e.t_edges().begin(), e.t_edges().end())},
           {"values", std::vector<double>(p.begin(), p.end())}};
      break;
  }
  return j;
}

inline EfficiencyMap efficiency_from_json(const Json& j) {
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "constant") return EfficiencyMap::constant(j.at("value").get<double>());
    if (kind == "bilinear")
      return EfficiencyMap::bilinear(j.at("c0").get<double>(), j.at("cm").get<double>(), j.at("ct").get<double>(),
                                     j.at("cmt").get<double>(), interval_from_json(j.at("m_range")),
                                     interval_from_json(j.at("t_range")));
    if (kind == "grid")
      return EfficiencyMap::grid(j.at("m_edges").get<std::vector<double>>(), j.at("t_edges").get<std::vector<double>>(),
                                 j.at("values").get<std::vector<double>>());
    throw InvalidArgument(detail::concat("unknown efficiency kind '", kind, "'"));
  } catch (const Json::exception& e) {
    throw InvalidArgument(detail::concat("bad efficiency description: ", e.what()));
  }
}

inline Json to_json(const FitResult& f) {
  Json j;
  j["params"] = f.params;
  j["names"] = f.names;
  j["cov"] = matrix_to_json(f.covariance);
  j["hessian"] = matrix_to_json(f.hessian);
  j["nll"] = f.nll;
  j["converged"] = f.converged;
  j["n_calls"] = f.n_calls;
  j["message"] = f.message;
  return j;
}

inline FitResult fit_result_from_json(const Json& j) {
  FitResult f;
  f.params = j.at("params").get<std::vector<double>>();
  f.names = j.value("names", std::vector<std::string>{});
  if (j.contains("cov")) f.covariance = matrix_from_json(j["cov"]);
  if (j.contains("hessian")) f.hessian = matrix_from_json(j["hessian"]);
  f.nll = j.value("nll", std::numeric_limits<double>::quiet_NaN());
  f.converged = j.value("converged", false);
  f.n_calls = j.value("n_calls", 0L);
  f.message = j.value("message", std::string{});
  return f;
}

inline Json to_json(const WeightMatrix& w) {
  return Json{{"W", matrix_to_json(w.W)},
              {"A", matrix_to_json(w.A)},
              {"variant", std::string(to_string(w.variant))},
              {"z_hat", w.z_hat},
              {"provenance", w.provenance}};
}

inline WeightMatrix weight_matrix_from_json(const Json& j) {
  WeightMatrix w;
  w.W = matrix_from_json(j.at("W"));
  w.A = j.contains("A") ? matrix_from_json(j["A"]) : Matrix(w.W.inverse());
  w.variant = variant_from_string(j.value("variant", std::string("custom")));
  w.z_hat = j.value("z_hat", std::vector<double>{});
  w.provenance = j.value("provenance", std::string{});
  return w;
}

/// {"support": [lo, hi], "components": [{"label", "density", "yield", "free"}], "efficiency"}
/// "free" may be a boolean (all shape parameters) or a per-parameter list.
inline Json to_json(const MixtureModel& m) {
  Json comps = Json::array();
  for (const auto& c : m.components) {
    Json cj{{"label", c.label}, {"density", to_json(c.density)}, {"yield", c.yield}};
    Json fr = Json::array();
    for (bool b : c.free) fr.push_back(b);
    cj["free"] = fr;
    comps.push_back(cj);
  }
  Json j{{"support", to_json(m.support)}, {"components", comps}};
  if (m.efficiency) j["efficiency"] = to_json(*m.efficiency);
  return j;
}

inline MixtureModel mixture_model_from_json(const Json& j) {
  try {
    MixtureModel m;
    m.support = interval_from_json(j.at("support"));
    for (const auto& cj : j.at("components")) {
      Component c;
      c.label = cj.value("label", detail::concat("c", m.components.size()));
      Json dj = cj.at("density");
      if (!dj.contains("support")) dj["support"] = to_json(m.support);
      c.density = density_from_json(dj);
      c.yield = cj.value("yield", 0.0);
      if (cj.contains("free")) {
        if (cj["free"].is_boolean()) c.free.assign(c.density.n_params(), cj["free"].get<bool>());
        else c.free = cj["free"].get<std::vector<bool>>();
      }
      m.components.push_back(std::move(c));
    }
    if (m.components.size() < 2) throw InvalidArgument("mixture model needs at least two components");
    if (j.contains("efficiency") && !j["efficiency"].is_null()) m.efficiency = efficiency_from_json(j["efficiency"]);
    return m;
  } catch (const Json::exception& e) {
    throw InvalidArgument(detail::concat("bad model description: ", e.what()));
  }
}

inline Json to_json(const CorrectedCovariance& c) {
  Json j{{"theta", matrix_to_json(c.theta_block)},
         {"naive", matrix_to_json(c.naive)},
         {"first_term", matrix_to_json(c.first_term)},
         {"reduction_term", matrix_to_json(c.reduction_term)}};
  if (c.full.size() > 0) j["full"] = matrix_to_json(c.full);
  return j;
}

}  // namespace cowlib
