#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "apsope/core_types.hpp"

namespace apsope {

enum class MissingPolicy { kError, kDropRow };

struct CsvSchema {
  std::string reward;
  std::string action;
  std::vector<std::string> features;  // continuous
  std::vector<std::string> discrete;
  std::vector<std::string> extra_rewards;
  /// Declared action set in baseline-first order. Empty means "infer".
  std::vector<std::string> action_labels;
  MissingPolicy missing = MissingPolicy::kError;
};

struct LoadReport {
  std::size_t dropped_rows = 0;
  std::vector<std::string> warnings;
};

namespace csv_detail {

inline std::vector<std::string> split_line(const std::string& line, std::size_t row) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur.push_back('"');
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (quoted) throw Error(ErrorCode::kParseError, "row " + std::to_string(row) + ": unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline bool is_missing(const std::string& s) {
  return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "NULL" || s == "null";
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace csv_detail

/// Reads a header-row CSV into a LogDataset.
///
/// Actions are relabeled to 1..m: declared labels keep their declared order,
/// otherwise labels are sorted (numerically when every label is numeric).
/// The external labels are kept in `action_labels` for reporting.
inline LogDataset load_csv(const std::string& path, const CsvSchema& schema,
                           LoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kParseError, "cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kEmptyDataset, "'" + path + "' is empty");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  std::vector<std::string> header = csv_detail::split_line(line, 1);
  for (auto& h : header) h = csv_detail::trim(h);

  std::unordered_map<std::string, std::size_t> col_of;
  for (std::size_t k = 0; k < header.size(); ++k) col_of.emplace(header[k], k);
  auto column = [&](const std::string& name) {
    auto it = col_of.find(name);
    if (it == col_of.end()) {
      throw Error(ErrorCode::kParseError, "row 1: column '" + name + "' not found in header");
    }
    return it->second;
  };

  const std::size_t reward_col = column(schema.reward);
  const std::size_t action_col = column(schema.action);
  std::vector<std::size_t> feat_cols, disc_cols, extra_cols;
  for (const auto& f : schema.features) feat_cols.push_back(column(f));
  for (const auto& f : schema.discrete) disc_cols.push_back(column(f));
  for (const auto& f : schema.extra_rewards) extra_cols.push_back(column(f));

  std::vector<double> rewards;
  std::vector<std::string> raw_actions;
  std::vector<double> feats;
  std::vector<int> discs;
  std::vector<std::vector<double>> extras(extra_cols.size());
  LoadReport local;

  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (csv_detail::trim(line).empty()) continue;
    const auto fields = csv_detail::split_line(line, row);
    if (fields.size() != header.size()) {
      throw Error(ErrorCode::kParseError, "row " + std::to_string(row) + ": expected " +
                                              std::to_string(header.size()) + " fields, got " +
                                              std::to_string(fields.size()));
    }
    auto where = [&](std::size_t col) {
      return "row " + std::to_string(row) + ", column '" + header[col] + "'";
    };
    bool missing = false;
    std::size_t missing_col = 0;
    auto numeric = [&](std::size_t col) -> double {
      const std::string s = csv_detail::trim(fields[col]);
      if (csv_detail::is_missing(s)) {
        if (!missing) missing_col = col;
        missing = true;
        return 0.0;
      }
      auto v = csv_detail::parse_double(s);
      if (!v) throw Error(ErrorCode::kParseError, where(col) + ": not a number: '" + s + "'");
      if (std::isnan(*v)) {
        if (!missing) missing_col = col;
        missing = true;
      }
      return *v;
    };

    const double y = numeric(reward_col);
    const std::string a = csv_detail::trim(fields[action_col]);
    if (csv_detail::is_missing(a) && !missing) {
      missing = true;
      missing_col = action_col;
    }
    std::vector<double> frow;
    for (auto c : feat_cols) frow.push_back(numeric(c));
    std::vector<int> drow;
    for (auto c : disc_cols) {
      const double v = numeric(c);
      if (!missing && (v != std::floor(v) || std::abs(v) > 2e9)) {
        throw Error(ErrorCode::kParseError, where(c) + ": discrete value must be an integer");
      }
      drow.push_back(static_cast<int>(v));
    }
    std::vector<double> erow;
    for (auto c : extra_cols) erow.push_back(numeric(c));

    if (missing) {
      if (schema.missing == MissingPolicy::kError) {
        throw Error(ErrorCode::kMissingValue, where(missing_col) + ": missing value");
      }
      ++local.dropped_rows;
      local.warnings.push_back("dropped " + where(missing_col) + ": missing value");
      continue;
    }
    rewards.push_back(y);
    raw_actions.push_back(a);
    feats.insert(feats.end(), frow.begin(), frow.end());
    discs.insert(discs.end(), drow.begin(), drow.end());
    for (std::size_t k = 0; k < erow.size(); ++k) extras[k].push_back(erow[k]);
  }

  if (rewards.empty()) throw Error(ErrorCode::kEmptyDataset, "'" + path + "' has no usable rows");

  std::vector<std::string> labels = schema.action_labels;
  if (labels.empty()) {
    labels = raw_actions;
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    const bool all_numeric = std::all_of(labels.begin(), labels.end(), [](const std::string& s) {
      return csv_detail::parse_double(s).has_value();
    });
    if (all_numeric) {
      std::stable_sort(labels.begin(), labels.end(), [](const std::string& x, const std::string& y) {
        return *csv_detail::parse_double(x) < *csv_detail::parse_double(y);
      });
    }
  }
  std::map<std::string, Action> index_of;
  for (std::size_t k = 0; k < labels.size(); ++k) index_of.emplace(labels[k], static_cast<Action>(k + 1));

  LogDataset ds;
  ds.m = static_cast<int>(labels.size());
  ds.action_labels = labels;
  ds.rewards = std::move(rewards);
  ds.actions.reserve(raw_actions.size());
  for (std::size_t i = 0; i < raw_actions.size(); ++i) {
    auto it = index_of.find(raw_actions[i]);
    if (it == index_of.end()) {
      throw Error(ErrorCode::kUnknownAction,
                  "record " + std::to_string(i) + ": action '" + raw_actions[i] + "' not declared");
    }
    ds.actions.push_back(it->second);
  }
  const auto n = static_cast<Eigen::Index>(ds.rewards.size());
  RowMatrix values = Eigen::Map<RowMatrix>(feats.data(), n, static_cast<Eigen::Index>(feat_cols.size()));
  IntRowMatrix disc = Eigen::Map<IntRowMatrix>(discs.data(), n, static_cast<Eigen::Index>(disc_cols.size()));
  ds.contexts = ContextMatrix(std::move(values), std::move(disc));
  for (std::size_t k = 0; k < extra_cols.size(); ++k) {
    ds.extra_rewards.emplace_back(schema.extra_rewards[k], std::move(extras[k]));
  }
  ds.validate();
  if (report) *report = std::move(local);
  return ds;
}

/// Writes raw (de-normalized) values with round-trip precision, using the
/// schema's column names and the dataset's external action labels.
inline void write_csv(const LogDataset& ds, const std::string& path, const CsvSchema& schema) {
  ds.validate();
  if (schema.features.size() != ds.contexts.continuous_cols() ||
      schema.discrete.size() != ds.contexts.discrete_cols() ||
      schema.extra_rewards.size() != ds.extra_rewards.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "schema does not match dataset shape");
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kParseError, "cannot write '" + path + "'");
  using csv_detail::quote_if_needed;
  out << quote_if_needed(schema.reward) << ',' << quote_if_needed(schema.action);
  for (const auto& f : schema.features) out << ',' << quote_if_needed(f);
  for (const auto& f : schema.discrete) out << ',' << quote_if_needed(f);
  for (const auto& f : schema.extra_rewards) out << ',' << quote_if_needed(f);
  out << '\n';
  const std::size_t pc = ds.contexts.continuous_cols();
  std::vector<double> row(ds.contexts.dim());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.contexts.raw_row(i, row);
    const auto a = static_cast<std::size_t>(ds.actions[i]);
    const std::string label =
        ds.action_labels.size() == static_cast<std::size_t>(ds.m) ? ds.action_labels[a - 1] : std::to_string(a);
    out << csv_detail::format_double(ds.rewards[i]) << ',' << quote_if_needed(label);
    for (std::size_t j = 0; j < pc; ++j) out << ',' << csv_detail::format_double(row[j]);
    for (std::size_t j = 0; j < ds.contexts.discrete_cols(); ++j) {
      out << ',' << ds.contexts.discrete(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    for (const auto& [name, col] : ds.extra_rewards) out << ',' << csv_detail::format_double(col[i]);
    out << '\n';
  }
}

}  // namespace apsope
