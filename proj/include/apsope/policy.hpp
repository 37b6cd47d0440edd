#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "apsope/core_types.hpp"
#include "apsope/ols.hpp"
#include "apsope/stats.hpp"

namespace apsope {

// Policy variants. Every variant reads the context only through a handful of
// linear features (rows of a feature map W), which lets the APS sampler work
// in the span of W instead of the full context space.

struct UniformPolicy {
  int m = 0;
};

/// Half-open box constraint lo <= x[feature] < hi.
struct FeatureBound {
  std::size_t feature = 0;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

struct TableRegion {
  std::vector<FeatureBound> bounds;
  std::vector<double> probs;
};

/// First matching region wins; `fallback` applies when none matches.
struct TableLookupPolicy {
  std::vector<TableRegion> regions;
  std::vector<double> fallback;
};

/// Deterministic argmax of b_a + c_a . x; ties go to the lowest action.
struct LinearGreedyPolicy {
  std::vector<double> intercepts;
  std::vector<std::vector<double>> coefficients;
};

struct PolicySpec;

/// `inside` applies where x[feature] >= threshold, `outside` elsewhere.
struct QuantileGatePolicy {
  std::size_t feature = 0;
  double threshold = 0.0;
  std::shared_ptr<const PolicySpec> inside;
  std::shared_ptr<const PolicySpec> outside;
};

/// Argmax over actions of Q(a, D1, D2) + c * sqrt(log(n_train) / N(a, D1, D2))
/// on a decile grid of two features. Bins are right-closed; values outside the
/// training range fall into the extreme bins. An empty cell has an infinite
/// bonus.
struct UcbTablePolicy {
  int m = 0;
  std::size_t feature1 = 0;
  std::size_t feature2 = 1;
  std::vector<double> cuts1;
  std::vector<double> cuts2;
  std::vector<double> q;       // [a][d1][d2], row-major
  std::vector<long> counts;    // same layout
  double c = 2.0;
  double n_train = 0.0;

  std::size_t bins1() const { return cuts1.size() + 1; }
  std::size_t bins2() const { return cuts2.size() + 1; }
  std::size_t cell(int a, std::size_t d1, std::size_t d2) const {
    return (static_cast<std::size_t>(a - 1) * bins1() + d1) * bins2() + d2;
  }
};

/// Binary policy: action 2 when intercept + coefficients . x >= threshold,
/// action 1 otherwise.
struct ScoreThresholdPolicy {
  double intercept = 0.0;
  std::vector<double> coefficients;
  double threshold = 0.0;
};

struct PolicySpec {
  std::variant<UniformPolicy, TableLookupPolicy, LinearGreedyPolicy, QuantileGatePolicy, UcbTablePolicy,
               ScoreThresholdPolicy>
      variant;
};

inline std::shared_ptr<const PolicySpec> make_spec(PolicySpec spec) {
  return std::make_shared<const PolicySpec>(std::move(spec));
}

/// Bin index in 0..cuts.size() with right-closed bins (x <= cut goes left).
inline std::size_t decile_bin(double x, const std::vector<double>& cuts) {
  return static_cast<std::size_t>(std::lower_bound(cuts.begin(), cuts.end(), x) - cuts.begin());
}

namespace policy_detail {

inline void check_distribution(const std::vector<double>& p, std::size_t m, const char* what) {
  if (p.size() != m) {
    throw Error(ErrorCode::kDimensionMismatch, std::string(what) + ": probability vector has wrong length");
  }
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::kInvalidArgument, std::string(what) + ": entry outside [0,1]");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-12) {
    throw Error(ErrorCode::kInvalidArgument, std::string(what) + ": probabilities do not sum to 1");
  }
}

inline void one_hot(double* out, int m, int best) {
  std::fill(out, out + m, 0.0);
  out[best] = 1.0;
}

// Compiled node: remembers where its features start in z and how table
// bounds map onto local feature slots.
struct Node {
  const PolicySpec* spec = nullptr;
  std::size_t offset = 0;
  std::size_t width = 0;
  int m = 0;
  std::vector<std::size_t> local_slot;  // TableLookup: flattened bound -> slot
  std::unique_ptr<Node> inside;
  std::unique_ptr<Node> outside;
};

}  // namespace policy_detail

/// An immutable, validated policy bound to a context dimension.
///
/// `evaluate(x)` is pure and reentrant. Internally x is first mapped to
/// z = W x (W = `feature_map()`), and the decision rule reads only z.
class Policy {
 public:
  Policy(PolicySpec spec, std::size_t dim)
      : spec_(std::make_shared<const PolicySpec>(std::move(spec))), dim_(dim) {
    std::vector<std::vector<double>> rows;
    root_ = std::shared_ptr<const policy_detail::Node>(compile(*spec_, rows));
    W_.setZero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim_));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t j = 0; j < dim_; ++j) W_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = rows[r][j];
    }
    deterministic_ = is_deterministic(*spec_);
  }

  const PolicySpec& spec() const { return *spec_; }
  std::size_t dim() const { return dim_; }
  int action_count() const { return root_->m; }
  bool deterministic() const { return deterministic_; }
  std::size_t feature_count() const { return static_cast<std::size_t>(W_.rows()); }
  const RowMatrix& feature_map() const { return W_; }

  /// Decision rule on precomputed features z = W x.
  void evaluate_features(const double* z, double* out) const { apply(*root_, z, out); }

  void evaluate(std::span<const double> x, std::span<double> out) const {
    if (x.size() != dim_) {
      throw Error(ErrorCode::kDimensionMismatch, "context has dimension " + std::to_string(x.size()) +
                                                     ", policy expects " + std::to_string(dim_));
    }
    if (out.size() != static_cast<std::size_t>(action_count())) {
      throw Error(ErrorCode::kDimensionMismatch, "output buffer has wrong length");
    }
    Eigen::VectorXd z = W_ * Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    apply(*root_, z.data(), out.data());
  }

  std::vector<double> evaluate(std::span<const double> x) const {
    std::vector<double> out(static_cast<std::size_t>(action_count()));
    evaluate(x, out);
    return out;
  }

 private:
  using Node = policy_detail::Node;

  static bool is_deterministic(const PolicySpec& s) {
    return std::visit(
        [](const auto& p) -> bool {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, UniformPolicy>) {
            return p.m == 1;
          } else if constexpr (std::is_same_v<T, TableLookupPolicy>) {
            auto hot = [](const std::vector<double>& v) {
              return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0 || x == 1.0; });
            };
            return hot(p.fallback) &&
                   std::all_of(p.regions.begin(), p.regions.end(), [&](const TableRegion& r) { return hot(r.probs); });
          } else if constexpr (std::is_same_v<T, QuantileGatePolicy>) {
            return is_deterministic(*p.inside) && is_deterministic(*p.outside);
          } else {
            return true;
          }
        },
        s.variant);
  }

  std::vector<double> unit_row(std::size_t j) const {
    if (j >= dim_) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "feature index " + std::to_string(j) + " out of range for dimension " + std::to_string(dim_));
    }
    std::vector<double> r(dim_, 0.0);
    r[j] = 1.0;
    return r;
  }

  std::vector<double> coef_row(const std::vector<double>& c) const {
    if (c.size() != dim_) {
      throw Error(ErrorCode::kDimensionMismatch, "coefficient vector has length " + std::to_string(c.size()) +
                                                     ", expected " + std::to_string(dim_));
    }
    return c;
  }

  Node* compile(const PolicySpec& s, std::vector<std::vector<double>>& rows) const {
    auto node = std::make_unique<Node>();
    node->spec = &s;
    node->offset = rows.size();
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, UniformPolicy>) {
            if (p.m < 1) throw Error(ErrorCode::kInvalidArgument, "uniform policy needs m >= 1");
            node->m = p.m;
          } else if constexpr (std::is_same_v<T, TableLookupPolicy>) {
            node->m = static_cast<int>(p.fallback.size());
            if (node->m < 1) throw Error(ErrorCode::kInvalidArgument, "table policy needs a fallback distribution");
            policy_detail::check_distribution(p.fallback, p.fallback.size(), "table fallback");
            std::vector<std::size_t> feats;
            for (const auto& r : p.regions) {
              policy_detail::check_distribution(r.probs, p.fallback.size(), "table region");
              for (const auto& b : r.bounds) feats.push_back(b.feature);
            }
            std::sort(feats.begin(), feats.end());
            feats.erase(std::unique(feats.begin(), feats.end()), feats.end());
            for (auto j : feats) rows.push_back(unit_row(j));
            for (const auto& r : p.regions) {
              for (const auto& b : r.bounds) {
                node->local_slot.push_back(static_cast<std::size_t>(
                    std::lower_bound(feats.begin(), feats.end(), b.feature) - feats.begin()));
              }
            }
          } else if constexpr (std::is_same_v<T, LinearGreedyPolicy>) {
            node->m = static_cast<int>(p.intercepts.size());
            if (node->m < 1 || p.coefficients.size() != p.intercepts.size()) {
              throw Error(ErrorCode::kDimensionMismatch, "linear policy needs one coefficient row per action");
            }
            for (const auto& c : p.coefficients) rows.push_back(coef_row(c));
          } else if constexpr (std::is_same_v<T, QuantileGatePolicy>) {
            if (!p.inside || !p.outside) throw Error(ErrorCode::kInvalidArgument, "gate policy needs both branches");
            rows.push_back(unit_row(p.feature));
            node->inside.reset(compile(*p.inside, rows));
            node->outside.reset(compile(*p.outside, rows));
            if (node->inside->m != node->outside->m) {
              throw Error(ErrorCode::kDimensionMismatch, "gate branches disagree on the action count");
            }
            node->m = node->inside->m;
          } else if constexpr (std::is_same_v<T, UcbTablePolicy>) {
            node->m = p.m;
            const std::size_t cells = static_cast<std::size_t>(p.m) * p.bins1() * p.bins2();
            if (p.m < 1 || p.q.size() != cells || p.counts.size() != cells) {
              throw Error(ErrorCode::kDimensionMismatch, "UCB table has wrong number of cells");
            }
            if (!std::is_sorted(p.cuts1.begin(), p.cuts1.end()) || !std::is_sorted(p.cuts2.begin(), p.cuts2.end())) {
              throw Error(ErrorCode::kInvalidArgument, "UCB cut points must be sorted");
            }
            rows.push_back(unit_row(p.feature1));
            rows.push_back(unit_row(p.feature2));
          } else if constexpr (std::is_same_v<T, ScoreThresholdPolicy>) {
            node->m = 2;
            rows.push_back(coef_row(p.coefficients));
          }
        },
        s.variant);
    node->width = rows.size() - node->offset;
    return node.release();
  }

  static void apply(const Node& node, const double* z, double* out) {
    const double* zz = z + node.offset;
    std::visit(
        [&](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, UniformPolicy>) {
            std::fill(out, out + p.m, 1.0 / static_cast<double>(p.m));
          } else if constexpr (std::is_same_v<T, TableLookupPolicy>) {
            std::size_t slot = 0;
            for (const auto& r : p.regions) {
              bool hit = true;
              for (const auto& b : r.bounds) {
                const double v = zz[node.local_slot[slot++]];
                hit = hit && (v >= b.lo && v < b.hi);
              }
              if (hit) {
                std::copy(r.probs.begin(), r.probs.end(), out);
                return;
              }
            }
            std::copy(p.fallback.begin(), p.fallback.end(), out);
          } else if constexpr (std::is_same_v<T, LinearGreedyPolicy>) {
            int best = 0;
            double best_score = p.intercepts[0] + zz[0];
            for (int a = 1; a < node.m; ++a) {
              const double s = p.intercepts[static_cast<std::size_t>(a)] + zz[a];
              if (s > best_score) {
                best_score = s;
                best = a;
              }
            }
            policy_detail::one_hot(out, node.m, best);
          } else if constexpr (std::is_same_v<T, QuantileGatePolicy>) {
            if (zz[0] >= p.threshold) {
              apply(*node.inside, z, out);
            } else {
              apply(*node.outside, z, out);
            }
          } else if constexpr (std::is_same_v<T, UcbTablePolicy>) {
            const std::size_t d1 = decile_bin(zz[0], p.cuts1);
            const std::size_t d2 = decile_bin(zz[1], p.cuts2);
            const double log_n = std::log(p.n_train);
            int best = 0;
            double best_score = -std::numeric_limits<double>::infinity();
            for (int a = 1; a <= p.m; ++a) {
              const std::size_t cell = p.cell(a, d1, d2);
              const long cnt = p.counts[cell];
              const double s = cnt == 0 ? std::numeric_limits<double>::infinity()
                                        : p.q[cell] + p.c * std::sqrt(log_n / static_cast<double>(cnt));
              if (s > best_score) {
                best_score = s;
                best = a - 1;
              }
            }
            policy_detail::one_hot(out, p.m, best);
          } else if constexpr (std::is_same_v<T, ScoreThresholdPolicy>) {
            const bool treat = p.intercept + zz[0] >= p.threshold;
            out[0] = treat ? 0.0 : 1.0;
            out[1] = treat ? 1.0 : 0.0;
          }
        },
        node.spec->variant);
  }

  std::shared_ptr<const PolicySpec> spec_;
  std::size_t dim_ = 0;
  std::shared_ptr<const policy_detail::Node> root_;
  RowMatrix W_;
  bool deterministic_ = false;
};

/// Per-action linear reward predictor tau(x, a) = b_a + c_a . x.
struct PredictionModel {
  std::vector<double> intercepts;
  std::vector<std::vector<double>> coefficients;  // m rows of length p_c
  bool rank_deficient = false;

  int action_count() const { return static_cast<int>(intercepts.size()); }

  double predict(std::span<const double> x, Action a) const {
    const auto k = static_cast<std::size_t>(a - 1);
    double s = intercepts[k];
    for (std::size_t j = 0; j < coefficients[k].size(); ++j) s += coefficients[k][j] * x[j];
    return s;
  }

  /// Greedy policy over a context of dimension `dim` (continuous features
  /// first; any trailing discrete columns get zero weight).
  LinearGreedyPolicy greedy(std::size_t dim) const {
    LinearGreedyPolicy g;
    g.intercepts = intercepts;
    for (const auto& c : coefficients) {
      std::vector<double> row(dim, 0.0);
      std::copy(c.begin(), c.end(), row.begin());
      g.coefficients.push_back(std::move(row));
    }
    return g;
  }
};

/// Least-squares fit of Y on an action-specific intercept and action-specific
/// slopes on the continuous features (the fully interacted regression, which
/// separates into one regression per action).
///
/// Every action must appear at least p_c + 1 times. A numerically singular
/// per-action design falls back to the minimum-norm solution and sets
/// `rank_deficient`.
inline PredictionModel fit_linear_reward_model(const LogDataset& train) {
  train.validate();
  const std::size_t pc = train.contexts.continuous_cols();
  const std::size_t n = train.size();
  PredictionModel model;
  for (Action a = 1; a <= train.m; ++a) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
      if (train.actions[i] == a) idx.push_back(i);
    }
    if (idx.size() < pc + 1) {
      throw Error(ErrorCode::kEmptyCell, "action " + std::to_string(a) + " observed " + std::to_string(idx.size()) +
                                             " times; need at least " + std::to_string(pc + 1));
    }
    Eigen::MatrixXd X(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(pc + 1));
    Eigen::VectorXd y(static_cast<Eigen::Index>(idx.size()));
    std::vector<double> row(train.contexts.dim());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      train.contexts.raw_row(idx[r], row);
      const auto rr = static_cast<Eigen::Index>(r);
      X(rr, 0) = 1.0;
      for (std::size_t j = 0; j < pc; ++j) X(rr, static_cast<Eigen::Index>(j + 1)) = row[j];
      y(rr) = train.rewards[idx[r]];
    }
    const OlsResult fit = ols(X, y, false, 1e-10, OnSingular::kPseudoInverse);
    model.rank_deficient = model.rank_deficient || fit.rank_deficient;
    model.intercepts.push_back(fit.coef(0));
    std::vector<double> c(pc);
    for (std::size_t j = 0; j < pc; ++j) c[j] = fit.coef(static_cast<Eigen::Index>(j + 1));
    model.coefficients.push_back(std::move(c));
  }
  return model;
}

/// Fits the decile-grid UCB table on two (raw) features of `train`.
inline UcbTablePolicy train_ucb(const LogDataset& train, double c, std::pair<std::size_t, std::size_t> features) {
  train.validate();
  const std::size_t n = train.size();
  const std::size_t dim = train.contexts.dim();
  if (features.first >= dim || features.second >= dim) {
    throw Error(ErrorCode::kDimensionMismatch, "UCB feature index out of range");
  }
  std::vector<double> f1(n), f2(n);
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < n; ++i) {
    train.contexts.raw_row(i, row);
    f1[i] = row[features.first];
    f2[i] = row[features.second];
  }
  auto cuts_for = [](const std::vector<double>& v, std::size_t j) {
    std::vector<double> s = v;
    std::sort(s.begin(), s.end());
    if (std::unique(s.begin(), s.end()) - s.begin() < 10) {
      throw Error(ErrorCode::kDegenerateDeciles, "feature " + std::to_string(j) + " has fewer than 10 distinct values");
    }
    std::vector<double> cuts;
    for (int k = 1; k <= 9; ++k) cuts.push_back(quantile(v, k / 10.0));
    return cuts;
  };

  UcbTablePolicy p;
  p.m = train.m;
  p.feature1 = features.first;
  p.feature2 = features.second;
  p.cuts1 = cuts_for(f1, features.first);
  p.cuts2 = cuts_for(f2, features.second);
  p.c = c;
  p.n_train = static_cast<double>(n);
  const std::size_t cells = static_cast<std::size_t>(p.m) * p.bins1() * p.bins2();
  std::vector<double> sums(cells, 0.0);
  p.counts.assign(cells, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cell = p.cell(train.actions[i], decile_bin(f1[i], p.cuts1), decile_bin(f2[i], p.cuts2));
    sums[cell] += train.rewards[i];
    ++p.counts[cell];
  }
  p.q.assign(cells, 0.0);
  for (std::size_t k = 0; k < cells; ++k) {
    if (p.counts[k] > 0) p.q[k] = sums[k] / static_cast<double>(p.counts[k]);
  }
  return p;
}

}  // namespace apsope
