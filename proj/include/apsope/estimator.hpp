#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "apsope/aps.hpp"
#include "apsope/core_types.hpp"
#include "apsope/ols.hpp"
#include "apsope/parallel.hpp"
#include "apsope/policy.hpp"

namespace apsope {

/// Coefficients of Y = alpha + beta * 1{A = a} + gamma * q on the pair
/// subsample. `baseline` is 1 for direct fits; chained estimates compose
/// fits along `path` (baseline first).
struct PairwiseFit {
  Action a = 2;
  Action baseline = 1;
  double alpha_hat = 0.0;
  double beta_hat = 0.0;
  double gamma_hat = 0.0;
  std::size_t n_sub = 0;
  double se_beta_robust = 0.0;
  bool collinearity_flag = false;
  bool chained = false;
  std::vector<Action> path;
};

struct ValueEstimate {
  double v_hat = 0.0;
  double mean_logged_reward = 0.0;
  /// shift_terms[a - 2] = mean_i (pi(a|X_i) - ML(a|X_i)).
  std::vector<double> shift_terms;
  std::vector<PairwiseFit> per_pair;
  /// Actions whose beta is unidentified but whose shift term is exactly zero,
  /// so they do not enter the estimate.
  std::vector<Action> unidentified_zero_shift;
};

/// Per-record action probabilities of `policy` at the logged contexts.
inline RowMatrix policy_matrix(const LogDataset& data, const Policy& policy, unsigned threads = 1) {
  data.validate();
  if (policy.dim() != data.contexts.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "policy dimension does not match the dataset");
  }
  const int m = policy.action_count();
  RowMatrix out(static_cast<Eigen::Index>(data.size()), m);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    std::vector<double> x = data.contexts.raw_row(i);
    policy.evaluate(x, std::span<double>(out.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(m)));
  });
  return out;
}

/// I(a; delta) for the pair (a, b): records with A_i in {a, b} whose share
/// p_a / (p_a + p_b) lies strictly inside (0, 1). Undefined shares are out.
inline std::vector<std::size_t> select_subsample(const LogDataset& data, const ApsTable& aps, Action a,
                                                 Action b = 1) {
  if (aps.rows() != data.size()) throw Error(ErrorCode::kDimensionMismatch, "APS table does not match dataset");
  if (a < 1 || a > aps.m || b < 1 || b > aps.m || a == b) {
    throw Error(ErrorCode::kInvalidArgument, "invalid action pair");
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Action ai = data.actions[i];
    if (ai != a && ai != b) continue;
    const double q = aps.share(i, a, b);
    if (q > 0.0 && q < 1.0) idx.push_back(i);
  }
  return idx;
}

struct PairwiseOptions {
  /// Reduced fit is used when the smallest singular value of the design is
  /// below this multiple of the largest.
  double collinearity_tol = 1e-10;
};

/// OLS of Y on (1, 1{A = a}, q) over I(a; delta) with HC0 standard errors.
/// If the design is collinear (q constant on the subsample) the intercept is
/// dropped and `collinearity_flag` is set.
inline PairwiseFit fit_pairwise(const LogDataset& data, const ApsTable& aps, Action a, Action b = 1,
                                const PairwiseOptions& options = {}) {
  const std::vector<std::size_t> idx = select_subsample(data, aps, a, b);
  PairwiseFit fit;
  fit.a = a;
  fit.baseline = b;
  fit.n_sub = idx.size();
  if (idx.size() < 3) {
    throw Error(ErrorCode::kSubsampleTooSmall, "pair (" + std::to_string(a) + ", " + std::to_string(b) + ") has " +
                                                   std::to_string(idx.size()) + " usable records");
  }
  const auto ns = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXd X(ns, 3);
  Eigen::VectorXd y(ns);
  std::size_t treated = 0;
  for (Eigen::Index r = 0; r < ns; ++r) {
    const std::size_t i = idx[static_cast<std::size_t>(r)];
    const bool is_a = data.actions[i] == a;
    treated += is_a ? 1 : 0;
    X(r, 0) = 1.0;
    X(r, 1) = is_a ? 1.0 : 0.0;
    X(r, 2) = aps.share(i, a, b);
    y(r) = data.rewards[i];
  }
  if (treated == 0 || treated == idx.size()) {
    throw Error(ErrorCode::kFullCollinearity, "pair (" + std::to_string(a) + ", " + std::to_string(b) +
                                                  ") subsample contains only one action");
  }

  OlsResult res;
  try {
    res = ols(X, y, true, options.collinearity_tol);
    fit.alpha_hat = res.coef(0);
    fit.beta_hat = res.coef(1);
    fit.gamma_hat = res.coef(2);
    fit.se_beta_robust = std::sqrt(std::max(0.0, res.cov_hc0(1, 1)));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kRankDeficient) throw;
    fit.collinearity_flag = true;
    try {
      res = ols(X.rightCols(2), y, true, options.collinearity_tol);
    } catch (const Error& inner) {
      if (inner.code() != ErrorCode::kRankDeficient) throw;
      throw Error(ErrorCode::kFullCollinearity, "pair (" + std::to_string(a) + ", " + std::to_string(b) +
                                                    ") design is singular even without intercept");
    }
    fit.alpha_hat = 0.0;
    fit.beta_hat = res.coef(0);
    fit.gamma_hat = res.coef(1);
    fit.se_beta_robust = std::sqrt(std::max(0.0, res.cov_hc0(0, 0)));
  }
  return fit;
}

struct BetaOptions {
  PairwiseOptions pairwise;
  /// Compose beta(a, 1) along overlapping pairs when the direct pair fails.
  bool allow_chaining = true;
};

struct BetaSet {
  /// One entry per identified action, ascending in a.
  std::vector<PairwiseFit> fits;
  std::vector<Action> unidentified;
  /// Human-readable record of failed direct fits and chaining attempts.
  std::vector<std::string> log;

  const PairwiseFit* find(Action a) const {
    for (const auto& f : fits) {
      if (f.a == a) return &f;
    }
    return nullptr;
  }
};

/// Direct pairwise fits against baseline 1, with optional chaining through
/// intermediate actions. Among several chains the shortest wins; ties take
/// the smallest-index predecessor at each step. A chained standard error is
/// sqrt(sum of squared link SEs), which ignores covariance between links.
inline BetaSet estimate_betas(const LogDataset& data, const ApsTable& aps, const BetaOptions& options = {}) {
  BetaSet out;
  const int m = aps.m;
  std::vector<std::optional<PairwiseFit>> direct(static_cast<std::size_t>(m + 1));
  bool any_failed = false;
  for (Action a = 2; a <= m; ++a) {
    try {
      direct[static_cast<std::size_t>(a)] = fit_pairwise(data, aps, a, 1, options.pairwise);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kSubsampleTooSmall && e.code() != ErrorCode::kFullCollinearity) throw;
      out.log.push_back("direct fit for action " + std::to_string(a) + " failed: " + e.what());
      any_failed = true;
    }
  }

  std::vector<std::vector<std::optional<PairwiseFit>>> edge(static_cast<std::size_t>(m + 1),
                                                            std::vector<std::optional<PairwiseFit>>(static_cast<std::size_t>(m + 1)));
  std::vector<int> dist(static_cast<std::size_t>(m + 1), -1);
  std::vector<Action> pred(static_cast<std::size_t>(m + 1), 0);
  if (any_failed && options.allow_chaining) {
    // edge[hi][lo] holds beta(hi, lo) for hi > lo.
    for (Action hi = 2; hi <= m; ++hi) {
      for (Action lo = 1; lo < hi; ++lo) {
        if (lo == 1) {
          edge[static_cast<std::size_t>(hi)][1] = direct[static_cast<std::size_t>(hi)];
          continue;
        }
        try {
          edge[static_cast<std::size_t>(hi)][static_cast<std::size_t>(lo)] =
              fit_pairwise(data, aps, hi, lo, options.pairwise);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kSubsampleTooSmall && e.code() != ErrorCode::kFullCollinearity) throw;
          out.log.push_back("link (" + std::to_string(hi) + ", " + std::to_string(lo) + ") unavailable: " + e.what());
        }
      }
    }
    auto linked = [&](Action x, Action y) {
      const Action hi = std::max(x, y), lo = std::min(x, y);
      return edge[static_cast<std::size_t>(hi)][static_cast<std::size_t>(lo)].has_value();
    };
    dist[1] = 0;
    std::vector<Action> frontier{1};
    while (!frontier.empty()) {
      std::vector<Action> next;
      for (Action v = 1; v <= m; ++v) {
        if (dist[static_cast<std::size_t>(v)] >= 0) continue;
        for (Action u : frontier) {  // frontier is ascending
          if (linked(u, v)) {
            dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
            pred[static_cast<std::size_t>(v)] = u;
            next.push_back(v);
            break;
          }
        }
      }
      frontier = std::move(next);
    }
  }

  for (Action a = 2; a <= m; ++a) {
    if (direct[static_cast<std::size_t>(a)]) {
      out.fits.push_back(*direct[static_cast<std::size_t>(a)]);
      continue;
    }
    if (!options.allow_chaining || dist[static_cast<std::size_t>(a)] < 0) {
      out.unidentified.push_back(a);
      out.log.push_back("beta(" + std::to_string(a) + ", 1) unidentified: no chain of overlapping pairs");
      continue;
    }
    std::vector<Action> path{a};
    while (path.back() != 1) path.push_back(pred[static_cast<std::size_t>(path.back())]);
    std::reverse(path.begin(), path.end());
    PairwiseFit chained;
    chained.a = a;
    chained.baseline = 1;
    chained.chained = true;
    chained.path = path;
    chained.alpha_hat = std::numeric_limits<double>::quiet_NaN();
    chained.gamma_hat = std::numeric_limits<double>::quiet_NaN();
    double var = 0.0;
    std::string trace = "beta(" + std::to_string(a) + ", 1) chained via";
    for (std::size_t l = 0; l + 1 < path.size(); ++l) {
      const Action from = path[l], to = path[l + 1];
      const Action hi = std::max(from, to), lo = std::min(from, to);
      const PairwiseFit& link = *edge[static_cast<std::size_t>(hi)][static_cast<std::size_t>(lo)];
      chained.beta_hat += (to > from) ? link.beta_hat : -link.beta_hat;
      var += link.se_beta_robust * link.se_beta_robust;
      chained.n_sub += link.n_sub;
      chained.collinearity_flag = chained.collinearity_flag || link.collinearity_flag;
      trace += " " + std::to_string(from);
    }
    chained.se_beta_robust = std::sqrt(var);
    out.log.push_back(trace + " " + std::to_string(a));
    out.fits.push_back(std::move(chained));
  }
  return out;
}

/// Plug-in value: mean(Y) + sum_a beta_a * mean_i (pi(a|X_i) - ML(a|X_i)).
/// Fails with MissingFit when an action with a nonzero shift has no beta.
inline ValueEstimate estimate_value(const LogDataset& data, const RowMatrix& ml_probs, const RowMatrix& pi_probs,
                                    std::span<const PairwiseFit> fits) {
  data.validate();
  const int m = data.m;
  if (ml_probs.rows() != static_cast<Eigen::Index>(data.size()) || ml_probs.cols() != m ||
      pi_probs.rows() != ml_probs.rows() || pi_probs.cols() != m) {
    throw Error(ErrorCode::kDimensionMismatch, "policy probability matrices do not match dataset");
  }
  ValueEstimate ve;
  ve.mean_logged_reward = mean_of(data.rewards);
  ve.v_hat = ve.mean_logged_reward;
  std::vector<double> diff(data.size());
  for (Action a = 2; a <= m; ++a) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      diff[i] = pi_probs(ii, a - 1) - ml_probs(ii, a - 1);
    }
    const bool all_zero = std::all_of(diff.begin(), diff.end(), [](double d) { return d == 0.0; });
    const double shift = all_zero ? 0.0 : mean_of(diff);
    ve.shift_terms.push_back(shift);
    const PairwiseFit* fit = nullptr;
    for (const auto& f : fits) {
      if (f.a == a) fit = &f;
    }
    if (!fit) {
      if (all_zero) {
        ve.unidentified_zero_shift.push_back(a);
        continue;
      }
      throw Error(ErrorCode::kMissingFit, "no estimate of beta(" + std::to_string(a) +
                                              ", 1) but the target policy shifts mass onto action " +
                                              std::to_string(a));
    }
    ve.per_pair.push_back(*fit);
    ve.v_hat += fit->beta_hat * shift;
  }
  return ve;
}

inline ValueEstimate estimate_value(const LogDataset& data, const Policy& ml, const Policy& pi,
                                    std::span<const PairwiseFit> fits, unsigned threads = 1) {
  return estimate_value(data, policy_matrix(data, ml, threads), policy_matrix(data, pi, threads), fits);
}

enum class Restriction { kAll, kFullSupport };

/// Records where the logging policy gives every action positive probability.
inline std::vector<std::size_t> full_support_records(const RowMatrix& ml_probs) {
  std::vector<std::size_t> idx;
  for (Eigen::Index i = 0; i < ml_probs.rows(); ++i) {
    if ((ml_probs.row(i).array() > 0.0).all()) idx.push_back(static_cast<std::size_t>(i));
  }
  return idx;
}

/// mean(Y | A = a) - mean(Y | A = 1) over the chosen restriction.
inline double baseline_mean_difference(const LogDataset& data, Action a, Restriction restrict,
                                       const RowMatrix* ml_probs = nullptr) {
  data.validate();
  std::vector<std::size_t> idx;
  if (restrict == Restriction::kFullSupport) {
    if (!ml_probs) throw Error(ErrorCode::kInvalidArgument, "full-support restriction needs logging probabilities");
    idx = full_support_records(*ml_probs);
  } else {
    idx.resize(data.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  std::vector<double> ya, y1;
  for (auto i : idx) {
    if (data.actions[i] == a) ya.push_back(data.rewards[i]);
    if (data.actions[i] == 1) y1.push_back(data.rewards[i]);
  }
  if (ya.empty() || y1.empty()) {
    throw Error(ErrorCode::kEmptyCell, "no records with action " + std::to_string(ya.empty() ? a : 1) +
                                           " in the restriction");
  }
  return mean_of(ya) - mean_of(y1);
}

/// Wraps a plain beta vector (index a - 2) as fits usable by estimate_value.
inline std::vector<PairwiseFit> betas_as_fits(std::span<const double> betas, std::size_t n_sub) {
  std::vector<PairwiseFit> fits;
  for (std::size_t k = 0; k < betas.size(); ++k) {
    PairwiseFit f;
    f.a = static_cast<Action>(k + 2);
    f.beta_hat = betas[k];
    f.n_sub = n_sub;
    f.se_beta_robust = std::numeric_limits<double>::quiet_NaN();
    fits.push_back(f);
  }
  return fits;
}

struct DirectMethodResult {
  double v_hat = 0.0;
  std::vector<double> betas;  // index a - 2
};

/// Direct method: OLS of Y on (1, action dummies for 2..m, continuous
/// features), then mu_i(a) = Y_i + beta_a - beta_{A_i} averaged under pi.
inline DirectMethodResult baseline_direct_method(const LogDataset& data, const RowMatrix& pi_probs) {
  data.validate();
  const std::size_t n = data.size();
  const int m = data.m;
  const std::size_t pc = data.contexts.continuous_cols();
  const auto cols = static_cast<Eigen::Index>(1 + (m - 1) + pc);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), cols);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  std::vector<double> row(data.contexts.dim());
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    data.contexts.raw_row(i, row);
    X(ii, 0) = 1.0;
    if (data.actions[i] >= 2) X(ii, data.actions[i] - 1) = 1.0;
    for (std::size_t j = 0; j < pc; ++j) X(ii, static_cast<Eigen::Index>(m + j)) = row[j];
    y(ii) = data.rewards[i];
  }
  const OlsResult fit = ols(X, y);
  DirectMethodResult out;
  std::vector<double> beta(static_cast<std::size_t>(m + 1), 0.0);
  for (Action a = 2; a <= m; ++a) {
    beta[static_cast<std::size_t>(a)] = fit.coef(a - 1);
    out.betas.push_back(fit.coef(a - 1));
  }
  std::vector<double> per_record(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double b_own = beta[static_cast<std::size_t>(data.actions[i])];
    double s = 0.0;
    for (Action a = 1; a <= m; ++a) {
      const double w = pi_probs(ii, a - 1);
      if (w != 0.0) s += (data.rewards[i] + (beta[static_cast<std::size_t>(a)] - b_own)) * w;
    }
    per_record[i] = s;
  }
  out.v_hat = mean_of(per_record);
  return out;
}

/// Ratio of two effects, e.g. revenue lift per unit of cost.
inline double effect_ratio(const PairwiseFit& num, const PairwiseFit& den, double epsilon = 1e-12) {
  if (!(std::abs(den.beta_hat) > epsilon)) {
    throw Error(ErrorCode::kDenominatorNearZero, "denominator effect is too close to zero");
  }
  return num.beta_hat / den.beta_hat;
}

inline nlohmann::json pairwise_fit_to_json(const PairwiseFit& f, const std::vector<std::string>& labels) {
  auto label = [&](Action a) -> nlohmann::json {
    if (labels.size() >= static_cast<std::size_t>(a)) return labels[static_cast<std::size_t>(a - 1)];
    return a;
  };
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  nlohmann::json path = nlohmann::json::array();
  for (Action p : f.path) path.push_back(label(p));
  return {{"a", label(f.a)},
          {"baseline", label(f.baseline)},
          {"alpha", num(f.alpha_hat)},
          {"beta", num(f.beta_hat)},
          {"gamma", num(f.gamma_hat)},
          {"se", num(f.se_beta_robust)},
          {"n_sub", f.n_sub},
          {"flags", {{"collinear", f.collinearity_flag}, {"chained", f.chained}}},
          {"path", path}};
}

/// JSON record of one estimate; together with delta, S and the seed it is
/// enough to regenerate a results-table row.
inline nlohmann::json value_estimate_to_json(const ValueEstimate& ve, const std::vector<std::string>& labels,
                                             double delta, std::size_t draws, std::uint64_t seed) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& f : ve.per_pair) pairs.push_back(pairwise_fit_to_json(f, labels));
  nlohmann::json shifts = nlohmann::json::object();
  for (std::size_t k = 0; k < ve.shift_terms.size(); ++k) {
    const std::size_t a = k + 2;
    const std::string key = labels.size() >= a ? labels[a - 1] : std::to_string(a);
    shifts[key] = ve.shift_terms[k];
  }
  return {{"schema_version", 1},
          {"v_hat", ve.v_hat},
          {"mean_logged_reward", ve.mean_logged_reward},
          {"delta", delta},
          {"draws", draws},
          {"seed", seed},
          {"pairs", pairs},
          {"shift_terms", shifts}};
}

}  // namespace apsope
