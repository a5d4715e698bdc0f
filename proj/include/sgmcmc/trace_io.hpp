#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "sgmcmc/core.hpp"
#include "sgmcmc/data.hpp"
#include "sgmcmc/diagnostics.hpp"
#include "sgmcmc/samplers.hpp"

namespace sgmcmc {

using Json = nlohmann::json;

namespace detail {

// 17 significant digits: doubles survive the CSV round trip bit-exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// Writes content to `path` atomically (temp file + rename).
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("cannot write '" + tmp.string() + "'");
    out << content;
    if (!out.good()) throw ParseError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Trace schema: iter, theta_0..theta_{d-1}, grad_0..grad_{d-1}.
inline std::string trace_to_csv(const Trace& trace) {
  const Index d = trace.dim();
  std::string out = "iter";
  for (Index j = 0; j < d; ++j) out += ",theta_" + std::to_string(j);
  for (Index j = 0; j < d; ++j) out += ",grad_" + std::to_string(j);
  out += "\n";
  for (Index k = 0; k < trace.stored(); ++k) {
    out += std::to_string(trace.iterations[static_cast<std::size_t>(k)]);
    for (Index j = 0; j < d; ++j) out += "," + detail::format_double(trace.states(k, j));
    for (Index j = 0; j < d; ++j) out += "," + detail::format_double(trace.grads(k, j));
    out += "\n";
  }
  return out;
}

inline void write_trace_csv(const std::filesystem::path& path, const Trace& trace) {
  write_file_atomic(path, trace_to_csv(trace));
}

struct LoadedTrace {
  Trace trace;
  bool has_grads = false;
};

/// Reads a trace back. Gradient columns are optional (ESS-only work does
/// not need them); when present they must cover every theta column.
inline LoadedTrace read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty trace file '" + path.string() + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = detail::split_csv_line(line);
  if (header.empty() || detail::trim(header[0]) != "iter")
    throw ParseError("trace header must start with 'iter'", 0, 1);
  Index n_theta = 0, n_grad = 0;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const std::string name = detail::trim(header[c]);
    if (name.rfind("theta_", 0) == 0) {
      ++n_theta;
    } else if (name.rfind("grad_", 0) == 0) {
      ++n_grad;
    } else {
      throw ParseError("unexpected trace column '" + name + "'", 0, static_cast<Index>(c) + 1);
    }
  }
  if (n_theta < 1) throw ParseError("trace has no theta columns");
  if (n_grad != 0 && n_grad != n_theta)
    throw ParseError("trace has " + std::to_string(n_grad) + " grad columns for " +
                     std::to_string(n_theta) + " theta columns");

  std::vector<std::vector<double>> rows;
  std::vector<Index> iters;
  Index row_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row_no;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " columns",
                       row_no, static_cast<Index>(cells.size()));
    iters.push_back(static_cast<Index>(detail::parse_real(cells[0], row_no, 1)));
    std::vector<double> vals;
    for (std::size_t c = 1; c < cells.size(); ++c)
      vals.push_back(detail::parse_real(cells[c], row_no, static_cast<Index>(c) + 1));
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw ParseError("trace file '" + path.string() + "' has no rows");

  LoadedTrace out;
  out.has_grads = n_grad > 0;
  out.trace.states.resize(static_cast<Index>(rows.size()), n_theta);
  out.trace.grads.resize(static_cast<Index>(rows.size()), out.has_grads ? n_theta : 0);
  out.trace.iterations = std::move(iters);
  for (Index i = 0; i < out.trace.states.rows(); ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    for (Index j = 0; j < n_theta; ++j) out.trace.states(i, j) = row[static_cast<std::size_t>(j)];
    for (Index j = 0; j < n_grad; ++j)
      out.trace.grads(i, j) = row[static_cast<std::size_t>(n_theta + j)];
  }
  return out;
}

inline Json diagnostics_to_json(const DiagnosticsReport& report,
                                const PhaseTimings* phases = nullptr) {
  Json j;
  if (report.ksd) j["ksd"] = *report.ksd;
  j["ess_per_dim"] = std::vector<double>(report.ess_per_dim.begin(), report.ess_per_dim.end());
  j["min_ess"] = report.min_ess;
  if (report.ess_degenerate) j["ess_degenerate"] = true;
  if (report.log_loss) j["log_loss"] = *report.log_loss;
  if (report.rmse) j["rmse"] = *report.rmse;
  j["wall_clock_sec"] = report.wall_clock_sec;
  if (phases) {
    j["phase_sec"] = {{"optimization", phases->optimization_sec},
                      {"sampling", phases->sampling_sec},
                      {"diagnostics", phases->diagnostics_sec}};
  }
  return j;
}

/// CSV dump of a dataset in the ingestion schema (label column first).
inline std::string dataset_to_csv(const DataSet& data) {
  std::string out = data.label_name.empty() ? "y" : data.label_name;
  for (Index j = 0; j < data.feature_width(); ++j) {
    out += "," + (static_cast<std::size_t>(j) < data.feature_names.size()
                      ? data.feature_names[static_cast<std::size_t>(j)]
                      : "x" + std::to_string(j + 1));
  }
  out += "\n";
  for (Index i = 0; i < data.count(); ++i) {
    out += detail::format_double(data.labels[i]);
    for (Index j = 0; j < data.feature_width(); ++j)
      out += "," + detail::format_double(data.features(i, j));
    out += "\n";
  }
  return out;
}

}  // namespace sgmcmc
