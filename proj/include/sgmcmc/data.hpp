#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sgmcmc/core.hpp"
#include "sgmcmc/model.hpp"

namespace sgmcmc {

enum class LabelKind { real, binary, categorical };

/// N observations with a fixed real feature width and one label column.
/// Row order is the ingestion order; indexing is stable.
struct DataSet {
  Matrix features;           // N x feature_width
  Vector labels;             // length N
  LabelKind label_kind = LabelKind::real;
  std::vector<std::string> feature_names;
  std::string label_name;

  Index count() const { return features.rows(); }
  Index feature_width() const { return features.cols(); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto notspace = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
  s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
  return s;
}

inline double parse_real(const std::string& cell, Index row, Index col) {
  const std::string t = trim(cell);
  if (t.empty()) throw ParseError("empty cell", row, col);
  double value = 0.0;
  const auto* begin = t.data();
  const auto* end = t.data() + t.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end)
    throw ParseError("non-numeric value '" + t + "'", row, col);
  return value;
}

inline LabelKind classify_labels(const Vector& y) {
  bool binary = true;
  bool integral = true;
  for (Index i = 0; i < y.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) binary = false;
    if (y[i] != std::floor(y[i])) integral = false;
  }
  if (binary) return LabelKind::binary;
  if (integral) return LabelKind::categorical;
  return LabelKind::real;
}

}  // namespace detail

/// Reads a headered CSV (UTF-8, decimal-point reals). Every column except
/// the named label column is a feature. Row/column positions in errors are
/// 1-based, header excluded from the row count.
inline DataSet load_dataset(const std::string& path, const std::string& label_column) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file '" + path + "'");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const std::vector<std::string> header = detail::split_csv_line(line);
  Index label_col = -1;
  std::vector<std::string> feature_names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = detail::trim(header[c]);
    if (name == label_column) {
      label_col = static_cast<Index>(c);
    } else {
      feature_names.push_back(name);
    }
  }
  if (label_col < 0)
    throw ParseError("label column '" + label_column + "' not found in header");

  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  Index row_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row_no;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " columns, got " +
                           std::to_string(cells.size()),
                       row_no, static_cast<Index>(cells.size()));
    std::vector<double> feats;
    feats.reserve(cells.size() - 1);
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const double v = detail::parse_real(cells[c], row_no, static_cast<Index>(c) + 1);
      if (static_cast<Index>(c) == label_col) {
        labels.push_back(v);
      } else {
        feats.push_back(v);
      }
    }
    rows.push_back(std::move(feats));
  }
  if (rows.empty()) throw ParseError("empty dataset in '" + path + "'");

  DataSet data;
  data.features.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()));
  data.labels.resize(static_cast<Index>(labels.size()));
  for (Index i = 0; i < data.features.rows(); ++i) {
    for (Index j = 0; j < data.features.cols(); ++j) {
      data.features(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    data.labels[i] = labels[static_cast<std::size_t>(i)];
  }
  data.label_kind = detail::classify_labels(data.labels);
  data.feature_names = std::move(feature_names);
  data.label_name = label_column;
  return data;
}

/// Disjoint (train, test) partition; test size = round(test_fraction * N).
/// Reproducible given the stream; row order within each part is preserved.
inline std::pair<DataSet, DataSet> split_dataset(const DataSet& data, double test_fraction,
                                                 RngStream& rng) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ArgumentError("split_dataset: test_fraction must lie in (0,1)");
  const Index n = data.count();
  const Index n_test = static_cast<Index>(std::llround(test_fraction * static_cast<double>(n)));
  if (n_test < 1 || n_test >= n)
    throw ArgumentError("split_dataset: rounded test size degenerate for N=" + std::to_string(n));

  const MiniBatch test_idx = sample_minibatch(n, n_test, rng);
  std::vector<bool> in_test(static_cast<std::size_t>(n), false);
  for (const Index i : test_idx.indices) in_test[static_cast<std::size_t>(i)] = true;

  DataSet train, test;
  train.features.resize(n - n_test, data.feature_width());
  train.labels.resize(n - n_test);
  test.features.resize(n_test, data.feature_width());
  test.labels.resize(n_test);
  Index tr = 0, te = 0;
  for (Index i = 0; i < n; ++i) {
    if (in_test[static_cast<std::size_t>(i)]) {
      test.features.row(te) = data.features.row(i);
      test.labels[te++] = data.labels[i];
    } else {
      train.features.row(tr) = data.features.row(i);
      train.labels[tr++] = data.labels[i];
    }
  }
  train.label_kind = test.label_kind = data.label_kind;
  train.feature_names = test.feature_names = data.feature_names;
  train.label_name = test.label_name = data.label_name;
  return {std::move(train), std::move(test)};
}

}  // namespace sgmcmc
