#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "apsope/error.hpp"

namespace apsope {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IntRowMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Action labels are 1-based throughout the library; action 1 is the baseline.
using Action = int;

/// Affine map between raw and normalized continuous coordinates:
/// raw = mean + std * normalized.
struct ContextScaling {
  std::vector<double> means;
  std::vector<double> stds;
  std::vector<std::size_t> zero_variance;
};

/// Continuous features (optionally z-scored) plus pass-through discrete columns.
///
/// When `normalized` is true, `values` holds z-scores and `col_means`/`col_stds`
/// recover raw units. Zero-variance columns are left untouched and carry
/// mean 0 / std 1 so the map stays the identity on them.
struct ContextMatrix {
  RowMatrix values;
  IntRowMatrix discrete;
  std::vector<double> col_means;
  std::vector<double> col_stds;
  std::vector<std::size_t> zero_variance;
  bool normalized = false;

  ContextMatrix() = default;
  explicit ContextMatrix(RowMatrix continuous) : values(std::move(continuous)) {
    discrete.resize(values.rows(), 0);
  }
  ContextMatrix(RowMatrix continuous, IntRowMatrix disc)
      : values(std::move(continuous)), discrete(std::move(disc)) {
    if (discrete.rows() != values.rows()) {
      throw Error(ErrorCode::kDimensionMismatch, "discrete and continuous row counts differ");
    }
  }

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t continuous_cols() const { return static_cast<std::size_t>(values.cols()); }
  std::size_t discrete_cols() const { return static_cast<std::size_t>(discrete.cols()); }
  /// Length of the feature vector policies see: continuous then discrete.
  std::size_t dim() const { return continuous_cols() + discrete_cols(); }

  /// Writes row i in raw units (continuous, then discrete) into `out`.
  void raw_row(std::size_t i, std::span<double> out) const {
    const std::size_t pc = continuous_cols();
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < pc; ++j) {
      const double v = values(r, static_cast<Eigen::Index>(j));
      out[j] = normalized ? col_means[j] + col_stds[j] * v : v;
    }
    for (std::size_t j = 0; j < discrete_cols(); ++j) {
      out[pc + j] = static_cast<double>(discrete(r, static_cast<Eigen::Index>(j)));
    }
  }

  std::vector<double> raw_row(std::size_t i) const {
    std::vector<double> out(dim());
    raw_row(i, out);
    return out;
  }
};

namespace detail {

inline bool is_zero_variance(double mean, double sd) {
  return !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
}

}  // namespace detail

/// Population (ddof = 0) column statistics of the continuous block.
inline ContextScaling column_stats(const RowMatrix& values) {
  const Eigen::Index n = values.rows();
  if (n == 0) throw Error(ErrorCode::kEmptyDataset, "no rows");
  ContextScaling s;
  s.means.resize(values.cols());
  s.stds.resize(values.cols());
  for (Eigen::Index j = 0; j < values.cols(); ++j) {
    const auto col = values.col(j);
    const double mean = col.mean();
    const double var = (col.array() - mean).square().sum() / static_cast<double>(n);
    s.means[j] = mean;
    s.stds[j] = std::sqrt(var);
  }
  return s;
}

/// Scaling that maps the ball's normalized coordinates to raw units for this
/// matrix. Already-normalized matrices report their stored state.
inline ContextScaling context_scaling(const ContextMatrix& ctx) {
  if (ctx.normalized) return {ctx.col_means, ctx.col_stds, ctx.zero_variance};
  ContextScaling s = column_stats(ctx.values);
  for (std::size_t j = 0; j < s.means.size(); ++j) {
    if (detail::is_zero_variance(s.means[j], s.stds[j])) {
      s.zero_variance.push_back(j);
      s.stds[j] = 1.0;
    }
  }
  return s;
}

/// Z-scores every continuous column using the sample itself.
///
/// Zero-variance columns are not divided: they are left as-is and listed in
/// `zero_variance`. Normalizing an already-normalized matrix composes the
/// maps, so the raw-unit view is preserved and the values are unchanged to
/// rounding.
inline ContextMatrix normalize_contexts(const ContextMatrix& raw) {
  const std::size_t n = raw.rows();
  if (n == 0) throw Error(ErrorCode::kEmptyDataset, "cannot normalize an empty context matrix");
  if (n < 2) throw Error(ErrorCode::kInvalidArgument, "normalization needs at least two rows");

  const ContextScaling stats = column_stats(raw.values);
  ContextMatrix out = raw;
  const std::size_t pc = raw.continuous_cols();
  out.col_means.assign(pc, 0.0);
  out.col_stds.assign(pc, 1.0);
  out.zero_variance.clear();
  for (std::size_t j = 0; j < pc; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    const double prev_mean = raw.normalized ? raw.col_means[j] : 0.0;
    const double prev_std = raw.normalized ? raw.col_stds[j] : 1.0;
    if (detail::is_zero_variance(stats.means[j], stats.stds[j])) {
      out.zero_variance.push_back(j);
      out.col_means[j] = prev_mean;
      out.col_stds[j] = prev_std;
      continue;
    }
    out.values.col(jj) = (raw.values.col(jj).array() - stats.means[j]) / stats.stds[j];
    out.col_means[j] = prev_mean + prev_std * stats.means[j];
    out.col_stds[j] = prev_std * stats.stds[j];
  }
  out.normalized = true;
  return out;
}

/// Logged bandit feedback {(Y_i, X_i, A_i)}.
struct LogDataset {
  ContextMatrix contexts;
  std::vector<Action> actions;
  std::vector<double> rewards;
  int m = 0;
  /// External label of internal action a lives at action_labels[a - 1].
  std::vector<std::string> action_labels;
  /// Additional outcome columns (name, values), aligned with `rewards`.
  std::vector<std::pair<std::string, std::vector<double>>> extra_rewards;

  std::size_t size() const { return rewards.size(); }

  void validate() const {
    const std::size_t n = rewards.size();
    if (n == 0) throw Error(ErrorCode::kEmptyDataset, "dataset has no records");
    if (actions.size() != n || contexts.rows() != n) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "rewards, actions and contexts must have identical length");
    }
    if (m < 1) throw Error(ErrorCode::kInvalidArgument, "action count must be positive");
    for (std::size_t i = 0; i < n; ++i) {
      if (actions[i] < 1 || actions[i] > m) {
        throw Error(ErrorCode::kUnknownAction,
                    "record " + std::to_string(i) + " has action " + std::to_string(actions[i]) +
                        " outside 1.." + std::to_string(m));
      }
    }
    for (const auto& [name, col] : extra_rewards) {
      if (col.size() != n) {
        throw Error(ErrorCode::kDimensionMismatch, "outcome column '" + name + "' has wrong length");
      }
    }
  }

  /// Copy with `rewards` replaced by the named extra outcome.
  LogDataset with_outcome(const std::string& name) const {
    for (const auto& [col_name, col] : extra_rewards) {
      if (col_name == name) {
        LogDataset copy = *this;
        copy.rewards = col;
        return copy;
      }
    }
    throw Error(ErrorCode::kInvalidArgument, "no outcome column named '" + name + "'");
  }
};

inline double mean_of(std::span<const double> xs) {
  // Neumaier-compensated so aggregates do not drift with ordering of large sums.
  double sum = 0.0;
  double comp = 0.0;
  for (double x : xs) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      comp += (sum - t) + x;
    } else {
      comp += (x - t) + sum;
    }
    sum = t;
  }
  return (sum + comp) / static_cast<double>(xs.size());
}

}  // namespace apsope
