#pragma once

// On-disk formats: panel CSV, design and fit JSON, draws CSV. Numbers are
// written in shortest round-trip form so files are reproducible byte for
// byte and reload exactly.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "common.hpp"
#include "design.hpp"

namespace swedge {

using Json = nlohmann::ordered_json;

inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s == "nan" || s == "NaN" || s == "NA") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf" || s == "Inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf" || s == "-Inf") return -std::numeric_limits<double>::infinity();
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ValidationError("not a number: '" + std::string(s) + "'");
  return v;
}

inline int parse_int(std::string_view s) {
  const double v = parse_double(s);
  if (!(v == std::floor(v)) || std::abs(v) > 1e9) throw ValidationError("not an integer: '" + std::string(s) + "'");
  return static_cast<int>(v);
}

// JSON has no NaN or infinity: non-finite values are stored as null.
inline Json json_number(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }
inline double json_double(const Json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // write then rename so an interrupted run never leaves a truncated file
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << text;
    if (!out) throw ValidationError("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------
// Panel data: cluster,period,exposure,treated,y[,covariate_<name>...]
// Clusters are 1-based on disk.

inline std::string dataset_to_csv(const PanelDataset& ds) {
  std::string s = "cluster,period,exposure,treated,y";
  for (const auto& n : ds.covariate_names) s += ",covariate_" + n;
  s += '\n';
  for (const auto& o : ds.observations) {
    s += std::to_string(o.cluster + 1) + ',' + std::to_string(o.period) + ',' + std::to_string(o.exposure) + ',' + std::to_string(o.treated) + ',' +
         format_double(o.y);
    for (double c : o.covariates) s += ',' + format_double(c);
    s += '\n';
  }
  return s;
}

// The design is inferred from the rows; exposure is checked when present.
inline PanelDataset dataset_from_csv(const std::string& text, Family family = Family::gaussian) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("dataset csv: empty input");
  const auto header = split_csv_line(line);
  int c_cluster = -1, c_period = -1, c_exposure = -1, c_treated = -1, c_y = -1;
  std::vector<int> c_cov;
  PanelDataset ds;
  ds.family = family;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    const std::string& h = header[static_cast<std::size_t>(i)];
    if (h == "cluster") c_cluster = i;
    else if (h == "period") c_period = i;
    else if (h == "exposure") c_exposure = i;
    else if (h == "treated") c_treated = i;
    else if (h == "y") c_y = i;
    else if (h.rfind("covariate_", 0) == 0) {
      c_cov.push_back(i);
      ds.covariate_names.push_back(h.substr(10));
    } else {
      throw ValidationError("dataset csv: unexpected column '" + h + "'");
    }
  }
  if (c_cluster < 0 || c_period < 0 || c_treated < 0 || c_y < 0) throw ValidationError("dataset csv: need columns cluster, period, treated, y");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ValidationError("dataset csv: line " + std::to_string(line_no) + " has the wrong number of fields");
    auto cell = [&](int c) { return std::string_view(cells[static_cast<std::size_t>(c)]); };
    PanelObservation o;
    o.cluster = parse_int(cell(c_cluster)) - 1;
    o.period = parse_int(cell(c_period));
    o.treated = parse_int(cell(c_treated));
    if (o.treated != 0 && o.treated != 1) throw ValidationError("dataset csv: treated must be 0 or 1");
    o.y = parse_double(cell(c_y));
    if (!std::isfinite(o.y)) throw ValidationError("dataset csv: non-finite outcome on line " + std::to_string(line_no));
    o.exposure = c_exposure >= 0 ? parse_int(cell(c_exposure)) : -1;
    for (int c : c_cov) o.covariates.push_back(parse_double(cell(c)));
    ds.observations.push_back(std::move(o));
  }
  ds.design = infer_design(ds.observations);
  for (auto& o : ds.observations)
    if (o.exposure < 0) o.exposure = ds.design.exposure(o.cluster, o.period);
  ds.validate();
  return ds;
}

inline void write_dataset_csv(const std::filesystem::path& path, const PanelDataset& ds) { write_text_file(path, dataset_to_csv(ds)); }

inline PanelDataset read_dataset_csv(const std::filesystem::path& path, Family family = Family::gaussian) {
  return dataset_from_csv(read_text_file(path), family);
}

inline Json design_to_json(const TrialDesign& d) {
  return Json{{"n_clusters", d.n_clusters}, {"last_period", d.last_period}, {"start_period", d.start_period}, {"individuals_per_cell", d.individuals_per_cell}};
}

inline TrialDesign design_from_json(const Json& j) {
  TrialDesign d;
  d.n_clusters = j.at("n_clusters").get<int>();
  d.last_period = j.at("last_period").get<int>();
  d.start_period = j.at("start_period").get<std::vector<int>>();
  d.individuals_per_cell = j.value("individuals_per_cell", 0);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Draws: chain,draw,<parameter names>; one row per retained draw.

inline std::string draws_to_csv(const std::vector<std::string>& names, const std::vector<Eigen::MatrixXd>& chains) {
  std::string s = "chain,draw";
  for (const auto& n : names) s += ',' + n;
  s += '\n';
  for (std::size_t c = 0; c < chains.size(); ++c) {
    if (chains[c].cols() != static_cast<Eigen::Index>(names.size())) throw ValidationError("draws csv: column count != names");
    for (Eigen::Index d = 0; d < chains[c].rows(); ++d) {
      s += std::to_string(c + 1) + ',' + std::to_string(d + 1);
      for (Eigen::Index k = 0; k < chains[c].cols(); ++k) s += ',' + format_double(chains[c](d, k));
      s += '\n';
    }
  }
  return s;
}

struct DrawsTable {
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> chains;
};

inline DrawsTable draws_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("draws csv: empty input");
  auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "chain" || header[1] != "draw") throw ValidationError("draws csv: header must start with chain,draw");
  DrawsTable t;
  t.names.assign(header.begin() + 2, header.end());
  std::vector<std::vector<std::vector<double>>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw ValidationError("draws csv: ragged row");
    const int c = parse_int(cells[0]) - 1;
    if (c < 0) throw ValidationError("draws csv: chain ids start at 1");
    if (static_cast<int>(rows.size()) <= c) rows.resize(static_cast<std::size_t>(c + 1));
    std::vector<double> v;
    for (std::size_t k = 2; k < cells.size(); ++k) v.push_back(parse_double(cells[k]));
    rows[static_cast<std::size_t>(c)].push_back(std::move(v));
  }
  for (const auto& r : rows) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(t.names.size()));
    for (std::size_t d = 0; d < r.size(); ++d)
      for (std::size_t k = 0; k < r[d].size(); ++k) m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) = r[d][k];
    t.chains.push_back(std::move(m));
  }
  return t;
}

}  // namespace swedge
