// Copyright 2026 The l2mt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "l2mt/types.hpp"

namespace l2mt::harness {

/// Raw multiclass dataset as ingested from disk: columns of `features` are
/// points, `labels` holds integer class ids.
struct MulticlassDataset {
  Matrix features;  // d x n
  std::vector<int> labels;

  Eigen::Index dim() const { return features.rows(); }
  Eigen::Index size() const { return features.cols(); }

  std::vector<int> class_ids() const {
    std::set<int> ids(labels.begin(), labels.end());
    return {ids.begin(), ids.end()};
  }
};

enum class IngestFormat { Csv, Svmlight };

inline IngestFormat format_from_string(const std::string& s) {
  if (s == "csv") return IngestFormat::Csv;
  if (s == "svmlight") return IngestFormat::Svmlight;
  throw ValidationError("unknown dataset format: " + s);
}

namespace detail {

inline void report_bad_rows(const std::vector<std::size_t>& bad, const std::string& path) {
  if (bad.empty()) return;
  std::ostringstream msg;
  msg << path << ": " << bad.size() << " malformed row(s) at line(s)";
  for (std::size_t i = 0; i < bad.size() && i < 10; ++i) msg << ' ' << bad[i];
  if (bad.size() > 10) msg << " ...";
  throw ValidationError(msg.str());
}

inline bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size();
  } catch (...) {
    return false;
  }
}

inline bool parse_int(const std::string& s, int& out) {
  try {
    std::size_t used = 0;
    out = std::stoi(s, &used);
    return used == s.size();
  } catch (...) {
    return false;
  }
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  return out;
}

inline MulticlassDataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path + ": empty file");
  std::vector<std::string> header = split(line, ',');
  if (header.empty() || header.front() != "label")
    throw ValidationError(path + ": header must start with 'label'");
  const std::size_t d = header.size() - 1;
  if (d == 0) throw ValidationError(path + ": no feature columns");

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::vector<std::size_t> bad;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields = split(line, ',');
    int label = 0;
    if (fields.size() != d + 1 || !parse_int(fields[0], label)) {
      bad.push_back(line_no);
      continue;
    }
    std::vector<double> row(d);
    bool ok = true;
    for (std::size_t j = 0; j < d; ++j)
      if (!parse_double(fields[j + 1], row[j])) {
        ok = false;
        break;
      }
    if (!ok) {
      bad.push_back(line_no);
      continue;
    }
    rows.push_back(std::move(row));
    labels.push_back(label);
  }
  report_bad_rows(bad, path);
  if (rows.empty()) throw ValidationError(path + ": no data rows");

  MulticlassDataset out;
  out.features.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      out.features(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = rows[i][j];
  out.labels = std::move(labels);
  return out;
}

inline MulticlassDataset load_svmlight(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);

  struct Row {
    int label;
    std::vector<std::pair<int, double>> entries;  // 1-based indices
  };
  std::vector<Row> rows;
  std::vector<std::size_t> bad;
  int max_index = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tok;
    if (!(ls >> tok)) continue;
    Row row;
    if (!parse_int(tok, row.label)) {
      bad.push_back(line_no);
      continue;
    }
    bool ok = true;
    while (ls >> tok) {
      auto colon = tok.find(':');
      int idx = 0;
      double val = 0.0;
      if (colon == std::string::npos || !parse_int(tok.substr(0, colon), idx) ||
          !parse_double(tok.substr(colon + 1), val) || idx < 1) {
        ok = false;
        break;
      }
      row.entries.emplace_back(idx, val);
      max_index = std::max(max_index, idx);
    }
    if (!ok) {
      bad.push_back(line_no);
      continue;
    }
    rows.push_back(std::move(row));
  }
  report_bad_rows(bad, path);
  if (rows.empty()) throw ValidationError(path + ": no data rows");
  if (max_index == 0) throw ValidationError(path + ": no feature indices found");

  MulticlassDataset out;
  out.features = Matrix::Zero(max_index, static_cast<Eigen::Index>(rows.size()));
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const auto& [idx, val] : rows[i].entries)
      out.features(idx - 1, static_cast<Eigen::Index>(i)) = val;
    out.labels.push_back(rows[i].label);
  }
  return out;
}

}  // namespace detail

/// Standardizes every feature to zero mean, unit variance over the whole
/// dataset; constant features are mapped to zero.
inline void standardize_features(Matrix& features) {
  const double n = static_cast<double>(features.cols());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    double mean = features.row(i).sum() / n;
    features.row(i).array() -= mean;
    double var = features.row(i).squaredNorm() / n;
    if (var <= 1e-12)
      features.row(i).setZero();
    else
      features.row(i) /= std::sqrt(var);
  }
}

/// Loads a dense CSV (`label,f1,...,fd`) or sparse svmlight file and
/// standardizes features. Malformed rows are rejected with line numbers.
inline MulticlassDataset ingest(const std::string& path, IngestFormat format,
                                bool standardize = true) {
  MulticlassDataset out = format == IngestFormat::Csv ? detail::load_csv(path)
                                                      : detail::load_svmlight(path);
  if (out.class_ids().size() < 2)
    throw ValidationError(path + ": fewer than 2 classes");
  if (standardize) standardize_features(out.features);
  return out;
}

}  // namespace l2mt::harness
