#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "apsope/aps.hpp"
#include "apsope/core_types.hpp"
#include "apsope/csv_io.hpp"
#include "apsope/estimator.hpp"
#include "apsope/parallel.hpp"
#include "apsope/policy.hpp"
#include "apsope/rng.hpp"
#include "apsope/stats.hpp"

namespace apsope::sim {

enum class Experiment { kExp1, kExp2 };
enum class EffectMode { kConstant, kNonconstant };

inline std::string to_string(Experiment e) { return e == Experiment::kExp1 ? "exp1" : "exp2"; }
inline std::string to_string(EffectMode e) { return e == EffectMode::kConstant ? "constant" : "nonconstant"; }

/// Data-generating process for the two simulation experiments.
///
/// Exp1: the logging policy randomizes uniformly where x_1 is at or above its
/// sample 99th percentile and otherwise plays the greedy action of a linear
/// reward model fitted on an independent training sample. The target policy
/// does the same on x_2 with a second fit.
/// Exp2: the logging policy is a UCB table trained on deciles of (x_1, x_2);
/// the target policy is greedy on the second linear fit.
struct DgpSpec {
  Experiment experiment = Experiment::kExp1;
  EffectMode effect_mode = EffectMode::kConstant;
  std::size_t n = 10000;
  std::size_t p = 100;
  int m = 5;
  std::size_t train_n = 10000;
  double ucb_c = 2.0;
  std::size_t truth_draws = 1'000'000;
  std::uint64_t seed = 0;
};

/// Sigma = V V with V symmetric: unit diagonal plus Unif(-0.5, 0.5) entries
/// at rows {2..6} x columns {35, 66, 78} (1-based) and their mirror images.
struct Covariance {
  struct OffDiagonal {
    std::size_t i;
    std::size_t j;
    double value;
  };
  std::vector<OffDiagonal> off_diagonal;
  Eigen::MatrixXd V;
  Eigen::MatrixXd sigma;

  /// x = V z for z ~ N(0, I) has covariance Sigma.
  void apply_factor(std::span<const double> z, std::span<double> x) const {
    std::copy(z.begin(), z.end(), x.begin());
    for (const auto& e : off_diagonal) {
      x[e.i] += e.value * z[e.j];
      x[e.j] += e.value * z[e.i];
    }
  }
};

inline Covariance build_sigma(std::uint64_t seed, std::size_t p = 100) {
  if (p < 6) throw Error(ErrorCode::kInvalidArgument, "covariance layout needs p >= 6");
  Engine engine = RngPlan(seed).stream_for(0, "sigma");
  std::uniform_real_distribution<double> unif(-0.5, 0.5);
  Covariance c;
  c.V = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
  for (std::size_t i : {2, 3, 4, 5, 6}) {
    for (std::size_t j : {35, 66, 78}) {
      const double v = unif(engine);
      if (j > p) continue;
      c.off_diagonal.push_back({i - 1, j - 1, v});
      c.V(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(j - 1)) = v;
      c.V(static_cast<Eigen::Index>(j - 1), static_cast<Eigen::Index>(i - 1)) = v;
    }
  }
  c.sigma = c.V * c.V;
  return c;
}

/// Reward coefficients. `alpha0_raw`/`alpha_raw` keep the pre-normalization
/// draws; the normalized vectors satisfy alpha' Sigma alpha = 1.
struct Alphas {
  Eigen::VectorXd alpha0;
  Eigen::MatrixXd alpha;  // m x p
  Eigen::VectorXd alpha0_raw;
  Eigen::MatrixXd alpha_raw;
};

inline Alphas draw_alphas(std::uint64_t seed, const Covariance& cov, int m = 5) {
  const auto p = cov.sigma.rows();
  const Eigen::Index half = p / 2;
  Engine engine = RngPlan(seed).stream_for(0, "alphas");
  std::uniform_real_distribution<double> base(-100.0, 100.0);
  std::uniform_real_distribution<double> per_action(-150.0, 200.0);
  Alphas al;
  al.alpha0_raw = Eigen::VectorXd::Zero(p);
  al.alpha_raw = Eigen::MatrixXd::Zero(m, p);
  for (Eigen::Index j = half; j < p; ++j) al.alpha0_raw(j) = base(engine);
  for (int a = 0; a < m; ++a) {
    for (Eigen::Index j = 0; j < p; ++j) al.alpha_raw(a, j) = per_action(engine);
  }
  for (Eigen::Index j = 0; j < half; ++j) al.alpha0_raw(j) = al.alpha_raw.col(j).sum() / static_cast<double>(m);

  auto normalized = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
    return v / std::sqrt(v.dot(cov.sigma * v));
  };
  al.alpha0 = normalized(al.alpha0_raw);
  al.alpha.resize(m, p);
  for (int a = 0; a < m; ++a) al.alpha.row(a) = normalized(al.alpha_raw.row(a).transpose()).transpose();
  return al;
}

/// Training sample from a past uniform A/B test. `potential` holds every
/// action's reward so actions can be redrawn without new outcomes.
struct TrainingSample {
  LogDataset data;
  RowMatrix potential;  // n x m
};

inline TrainingSample generate_training_sample(const DgpSpec& spec, const Covariance& cov, const Alphas& al) {
  const std::size_t n = spec.train_n;
  const std::size_t p = static_cast<std::size_t>(cov.sigma.rows());
  const int m = spec.m;
  const RngPlan plan = RngPlan(spec.seed).child(0, "training");
  TrainingSample ts;
  RowMatrix X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  ts.potential.resize(static_cast<Eigen::Index>(n), m);
  ts.data.actions.resize(n);
  ts.data.rewards.resize(n);
  const auto tag = purpose_tag("record");
  for (std::size_t i = 0; i < n; ++i) {
    Engine e = plan.stream_for(i, tag);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> action(1, m);
    std::vector<double> z(p), x(p);
    for (auto& v : z) v = normal(e);
    cov.apply_factor(z, x);
    const double u = normal(e);
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < p; ++j) X(ii, static_cast<Eigen::Index>(j)) = x[j];
    for (int a = 0; a < m; ++a) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        s += x[k] * x[k] * (0.75 * al.alpha0(kk) + 0.5 * al.alpha(a, kk));
      }
      ts.potential(ii, a) = s + 0.25 * u + 0.5 * normal(e);
    }
    ts.data.actions[i] = action(e);
    ts.data.rewards[i] = ts.potential(ii, ts.data.actions[i] - 1);
  }
  ts.data.contexts = ContextMatrix(std::move(X));
  ts.data.m = m;
  ts.data.validate();
  return ts;
}

/// Same contexts and potential outcomes, freshly drawn uniform actions.
inline LogDataset redraw_training_actions(const TrainingSample& ts, std::uint64_t seed) {
  LogDataset d = ts.data;
  const RngPlan plan = RngPlan(seed).child(1, "training-redraw");
  for (std::size_t i = 0; i < d.size(); ++i) {
    Engine e = plan.stream_for(i, "action");
    std::uniform_int_distribution<int> action(1, d.m);
    d.actions[i] = action(e);
    d.rewards[i] = ts.potential(static_cast<Eigen::Index>(i), d.actions[i] - 1);
  }
  return d;
}

/// Cached draws for the true value of the target policy. For Exp1 the target
/// gate threshold changes per replication, so per-context contributions are
/// sorted by x_2 with prefix/suffix sums; the truth for any threshold is then
/// a binary search away.
struct TruthCache {
  std::vector<double> gate_values;   // sorted x_2
  std::vector<double> prefix_greedy; // sum over x_2 < g of greedy contribution
  std::vector<double> suffix_uniform;
  double constant_part = 0.0;
  std::size_t draws = 0;

  double value(double gate) const {
    const auto k = static_cast<std::size_t>(std::lower_bound(gate_values.begin(), gate_values.end(), gate) -
                                            gate_values.begin());
    return constant_part + (prefix_greedy[k] + suffix_uniform[k]) / static_cast<double>(draws);
  }
};

struct Study {
  DgpSpec spec;
  Covariance cov;
  Alphas alphas;
  TrainingSample train;
  PredictionModel tau_ml;
  PredictionModel tau_pi;
  std::optional<UcbTablePolicy> ucb;
  TruthCache truth;

  /// E[Y(a) | X = x].
  double conditional_mean(std::span<const double> x, Action a) const {
    const auto p = static_cast<Eigen::Index>(x.size());
    double s = 0.0;
    if (spec.effect_mode == EffectMode::kConstant) {
      for (Eigen::Index k = 0; k < p; ++k) s += x[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(k)] * alphas.alpha0(k);
      return 0.75 * s + static_cast<double>(a);
    }
    for (Eigen::Index k = 0; k < p; ++k) {
      const double xk = x[static_cast<std::size_t>(k)];
      s += xk * xk * (0.75 * alphas.alpha0(k) + alphas.alpha(a - 1, k));
    }
    return s;
  }

  /// E[0.75 sum_k alpha0_k X_k^2] under the generator covariance.
  double baseline_quadratic_mean() const { return 0.75 * alphas.alpha0.dot(cov.sigma.diagonal()); }
};

inline void sample_context(const Covariance& cov, Engine& e, std::span<double> z, std::span<double> x) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : z) v = normal(e);
  cov.apply_factor(z, x);
}

namespace detail {

inline int argmax_prediction(const PredictionModel& model, std::span<const double> x) {
  int best = 1;
  double best_s = model.predict(x, 1);
  for (Action a = 2; a <= model.action_count(); ++a) {
    const double s = model.predict(x, a);
    if (s > best_s) {
      best_s = s;
      best = a;
    }
  }
  return best;
}

inline TruthCache build_truth(const Study& st, unsigned threads) {
  const std::size_t N = st.spec.truth_draws;
  const std::size_t p = st.spec.p;
  const int m = st.spec.m;
  const bool constant = st.spec.effect_mode == EffectMode::kConstant;
  const RngPlan plan = RngPlan(st.spec.seed).child(0, "truth");
  std::vector<double> gate(N), greedy(N), uniform(N);
  const auto tag = purpose_tag("context");
  parallel_for(N, threads, [&](std::size_t i) {
    Engine e = plan.stream_for(i, tag);
    std::vector<double> z(p), x(p);
    sample_context(st.cov, e, z, x);
    gate[i] = x[1];
    const Action best = argmax_prediction(st.tau_pi, x);
    if (constant) {
      // X-dependent part is common to all actions; its mean is added analytically.
      greedy[i] = static_cast<double>(best);
      uniform[i] = (m + 1) / 2.0;
    } else {
      double u = 0.0;
      for (Action a = 1; a <= m; ++a) {
        const double mu = st.conditional_mean(x, a);
        u += mu;
        if (a == best) greedy[i] = mu;
      }
      uniform[i] = u / m;
    }
  });
  TruthCache tc;
  tc.draws = N;
  tc.constant_part = constant ? st.baseline_quadratic_mean() : 0.0;
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return gate[a] < gate[b] || (gate[a] == gate[b] && a < b);
  });
  tc.gate_values.resize(N);
  tc.prefix_greedy.assign(N + 1, 0.0);
  tc.suffix_uniform.assign(N + 1, 0.0);
  for (std::size_t k = 0; k < N; ++k) {
    tc.gate_values[k] = gate[order[k]];
    tc.prefix_greedy[k + 1] = tc.prefix_greedy[k] + greedy[order[k]];
  }
  for (std::size_t k = N; k-- > 0;) tc.suffix_uniform[k] = tc.suffix_uniform[k + 1] + uniform[order[k]];
  return tc;
}

}  // namespace detail

/// Builds everything that is fixed across replications: covariance,
/// coefficients, the training sample, both reward fits, the UCB table (Exp2)
/// and the truth cache.
inline Study prepare_study(const DgpSpec& spec, unsigned threads = 1) {
  if (spec.m < 2) throw Error(ErrorCode::kInvalidArgument, "need at least two actions");
  if (spec.p < 6) throw Error(ErrorCode::kInvalidArgument, "need at least six context variables");
  Study st;
  st.spec = spec;
  st.cov = build_sigma(spec.seed, spec.p);
  st.alphas = draw_alphas(spec.seed, st.cov, spec.m);
  st.train = generate_training_sample(spec, st.cov, st.alphas);
  st.tau_ml = fit_linear_reward_model(st.train.data);
  st.tau_pi = fit_linear_reward_model(redraw_training_actions(st.train, spec.seed));
  if (spec.experiment == Experiment::kExp2) st.ucb = train_ucb(st.train.data, spec.ucb_c, {0, 1});
  if (spec.truth_draws > 0) st.truth = detail::build_truth(st, threads);
  return st;
}

/// One logged sample with the policies that generated / target it.
struct Replication {
  LogDataset data;
  Policy ml;
  Policy pi;
  double true_value = 0.0;
  double gate_ml = std::numeric_limits<double>::quiet_NaN();
  double gate_pi = std::numeric_limits<double>::quiet_NaN();
};

inline PolicySpec exp1_policy(std::size_t gate_feature, double gate, const PredictionModel& model, std::size_t dim) {
  QuantileGatePolicy g;
  g.feature = gate_feature;
  g.threshold = gate;
  g.inside = make_spec(PolicySpec{UniformPolicy{model.action_count()}});
  g.outside = make_spec(PolicySpec{model.greedy(dim)});
  return PolicySpec{std::move(g)};
}

/// Draws replication `r` of the study. Contexts, noise and action draws come
/// from per-record substreams of a replication-specific plan.
inline Replication generate_replication(const Study& st, std::size_t r) {
  const std::size_t n = st.spec.n;
  const std::size_t p = st.spec.p;
  const int m = st.spec.m;
  const RngPlan plan = RngPlan(st.spec.seed).child(r, "replication");
  const bool constant = st.spec.effect_mode == EffectMode::kConstant;

  RowMatrix X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  RowMatrix potential(static_cast<Eigen::Index>(n), m);
  std::vector<double> pick(n);
  const auto tag = purpose_tag("record");
  for (std::size_t i = 0; i < n; ++i) {
    Engine e = plan.stream_for(i, tag);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> z(p), x(p);
    sample_context(st.cov, e, z, x);
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < p; ++j) X(ii, static_cast<Eigen::Index>(j)) = x[j];
    const double u = normal(e);
    if (constant) {
      const double base = st.conditional_mean(x, 0);  // 0.75 sum alpha0 x^2 (+0)
      for (Action a = 1; a <= m; ++a) potential(ii, a - 1) = base + 0.25 * u + (static_cast<double>(a) + normal(e));
    } else {
      for (Action a = 1; a <= m; ++a) potential(ii, a - 1) = st.conditional_mean(x, a) + 0.25 * u;
    }
    pick[i] = unif(e);
  }

  LogDataset data;
  data.m = m;
  double gate_ml = std::numeric_limits<double>::quiet_NaN();
  double gate_pi = std::numeric_limits<double>::quiet_NaN();
  std::optional<Policy> ml, pi;
  if (st.spec.experiment == Experiment::kExp1) {
    std::vector<double> c1(n), c2(n);
    for (std::size_t i = 0; i < n; ++i) {
      c1[i] = X(static_cast<Eigen::Index>(i), 0);
      c2[i] = X(static_cast<Eigen::Index>(i), 1);
    }
    gate_ml = quantile(c1, 0.99);
    gate_pi = quantile(c2, 0.99);
    ml.emplace(exp1_policy(0, gate_ml, st.tau_ml, p), p);
    pi.emplace(exp1_policy(1, gate_pi, st.tau_pi, p), p);
  } else {
    ml.emplace(PolicySpec{*st.ucb}, p);
    pi.emplace(PolicySpec{st.tau_pi.greedy(p)}, p);
  }

  data.actions.resize(n);
  data.rewards.resize(n);
  std::vector<double> probs(static_cast<std::size_t>(m));
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    ml->evaluate(std::span<const double>(X.row(ii).data(), p), probs);
    double acc = 0.0;
    Action chosen = m;
    for (Action a = 1; a <= m; ++a) {
      acc += probs[static_cast<std::size_t>(a - 1)];
      if (pick[i] < acc) {
        chosen = a;
        break;
      }
    }
    while (probs[static_cast<std::size_t>(chosen - 1)] == 0.0 && chosen > 1) --chosen;
    data.actions[i] = chosen;
    data.rewards[i] = potential(ii, chosen - 1);
  }
  data.contexts = ContextMatrix(std::move(X));
  data.validate();

  double truth = std::numeric_limits<double>::quiet_NaN();
  if (st.truth.draws > 0) {
    truth = st.spec.experiment == Experiment::kExp1 ? st.truth.value(gate_pi)
                                                    : st.truth.value(std::numeric_limits<double>::infinity());
  }
  return Replication{std::move(data), std::move(*ml), std::move(*pi), truth, gate_ml, gate_pi};
}

/// Monte-Carlo value of an arbitrary policy on `draws` fresh contexts.
inline double policy_value(const Study& st, const Policy& policy, std::size_t draws, std::uint64_t stream_seed,
                           unsigned threads = 1) {
  const std::size_t p = st.spec.p;
  const RngPlan plan(stream_seed);
  std::vector<double> contrib(draws);
  parallel_for(draws, threads, [&](std::size_t i) {
    Engine e = plan.stream_for(i, "context");
    std::vector<double> z(p), x(p);
    sample_context(st.cov, e, z, x);
    const std::vector<double> probs = policy.evaluate(x);
    double v = 0.0;
    for (Action a = 1; a <= policy.action_count(); ++a) {
      const double w = probs[static_cast<std::size_t>(a - 1)];
      if (w != 0.0) v += w * st.conditional_mean(x, a);
    }
    contrib[i] = v;
  });
  return mean_of(contrib);
}

enum class Estimator { kAps, kMeanDiffAB, kMeanDiffFull, kDirectMethod };

inline std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::kAps: return "aps";
    case Estimator::kMeanDiffAB: return "mean_diff_ab";
    case Estimator::kMeanDiffFull: return "mean_diff_full";
    case Estimator::kDirectMethod: return "direct_method";
  }
  return "?";
}

inline Estimator estimator_from_string(const std::string& s) {
  for (Estimator e : {Estimator::kAps, Estimator::kMeanDiffAB, Estimator::kMeanDiffFull, Estimator::kDirectMethod}) {
    if (to_string(e) == s) return e;
  }
  throw Error(ErrorCode::kConfig, "unknown estimator '" + s + "'");
}

/// Default comparison: APS plus both mean-difference baselines for Exp1, APS plus
/// the direct method for Exp2.
inline std::vector<Estimator> default_estimators(Experiment e) {
  if (e == Experiment::kExp1) return {Estimator::kAps, Estimator::kMeanDiffAB, Estimator::kMeanDiffFull};
  return {Estimator::kAps, Estimator::kDirectMethod};
}

struct RunOptions {
  std::vector<Estimator> estimators;
  std::vector<double> deltas{0.1, 0.5, 1.0, 2.5};
  std::size_t reps = 100;
  std::size_t draws = 100;
  unsigned threads = 1;
  /// Called after each replication finishes (from worker threads).
  std::function<void(std::size_t)> progress;
};

/// One estimator (at one delta, for APS) across replications.
struct EstimatorCell {
  Estimator estimator = Estimator::kAps;
  double delta = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::optional<double>> estimates;
  std::vector<double> subsample_n;
  std::vector<std::string> failures;
};

/// Summary row. bias/sd/rmse use population formulas over the successful
/// replications of the error V_hat - V, so rmse^2 = bias^2 + sd^2.
struct McRow {
  Estimator estimator = Estimator::kAps;
  double delta = std::numeric_limits<double>::quiet_NaN();
  double bias = 0.0;
  double sd = 0.0;
  double rmse = 0.0;
  double avg_subsample_n = 0.0;
  std::size_t ok = 0;
  std::size_t failed = 0;
};

struct McReport {
  DgpSpec spec;
  std::size_t reps = 0;
  std::size_t draws = 0;
  double true_value_mean = 0.0;
  std::vector<double> true_values;
  std::vector<McRow> rows;
  std::vector<EstimatorCell> cells;

  const McRow& row(Estimator e, double delta = std::numeric_limits<double>::quiet_NaN()) const {
    for (const auto& r : rows) {
      if (r.estimator == e && (e != Estimator::kAps || r.delta == delta)) return r;
    }
    throw Error(ErrorCode::kInvalidArgument, "no report row for " + to_string(e));
  }
};

struct ReplicationOutcome {
  double truth = 0.0;
  // One entry per (estimator, delta) cell in the fixed cell order.
  std::vector<std::optional<double>> estimates;
  std::vector<double> subsample_n;
  std::vector<std::string> failures;
};

inline std::vector<EstimatorCell> cell_layout(const RunOptions& opt) {
  std::vector<EstimatorCell> cells;
  for (Estimator e : opt.estimators) {
    if (e == Estimator::kAps) {
      for (double d : opt.deltas) {
        EstimatorCell c;
        c.estimator = e;
        c.delta = d;
        cells.push_back(c);
      }
    } else {
      EstimatorCell c;
      c.estimator = e;
      cells.push_back(c);
    }
  }
  return cells;
}

/// Records whose APS is strictly between 0 and 1 for at least one action.
inline std::size_t fractional_aps_records(const ApsTable& aps) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < aps.rows(); ++i) {
    for (Action a = 1; a <= aps.m; ++a) {
      const double p = aps.p(i, a);
      if (p > 0.0 && p < 1.0) {
        ++count;
        break;
      }
    }
  }
  return count;
}

inline ReplicationOutcome run_replication(const Study& st, std::size_t r, const RunOptions& opt) {
  const Replication rep = generate_replication(st, r);
  const LogDataset& ds = rep.data;
  const RowMatrix ml_probs = policy_matrix(ds, rep.ml);
  const RowMatrix pi_probs = policy_matrix(ds, rep.pi);
  const int m = ds.m;
  const RngPlan plan = RngPlan(st.spec.seed).child(r, "replication-aps");

  ReplicationOutcome out;
  out.truth = rep.true_value;
  for (const auto& cell : cell_layout(opt)) {
    std::optional<double> est;
    double sub_n = 0.0;
    std::string failure;
    try {
      switch (cell.estimator) {
        case Estimator::kAps: {
          const ApsTable aps = compute_aps(ds, rep.ml, cell.delta, opt.draws, plan);
          sub_n = static_cast<double>(fractional_aps_records(aps));
          const BetaSet betas = estimate_betas(ds, aps);
          est = estimate_value(ds, ml_probs, pi_probs, betas.fits).v_hat;
          break;
        }
        case Estimator::kMeanDiffAB:
        case Estimator::kMeanDiffFull: {
          const Restriction restrict =
              cell.estimator == Estimator::kMeanDiffAB ? Restriction::kFullSupport : Restriction::kAll;
          std::vector<double> betas;
          for (Action a = 2; a <= m; ++a) betas.push_back(baseline_mean_difference(ds, a, restrict, &ml_probs));
          sub_n = restrict == Restriction::kAll ? static_cast<double>(ds.size())
                                                : static_cast<double>(full_support_records(ml_probs).size());
          const auto fits = betas_as_fits(betas, static_cast<std::size_t>(sub_n));
          est = estimate_value(ds, ml_probs, pi_probs, fits).v_hat;
          break;
        }
        case Estimator::kDirectMethod: {
          est = baseline_direct_method(ds, pi_probs).v_hat;
          sub_n = static_cast<double>(ds.size());
          break;
        }
      }
    } catch (const Error& e) {
      failure = "replication " + std::to_string(r) + ": " + e.what();
    }
    out.estimates.push_back(est);
    out.subsample_n.push_back(sub_n);
    out.failures.push_back(std::move(failure));
  }
  return out;
}

inline McRow summarize(const EstimatorCell& cell, const std::vector<double>& truths) {
  McRow row;
  row.estimator = cell.estimator;
  row.delta = cell.delta;
  std::vector<double> err, sub;
  for (std::size_t r = 0; r < cell.estimates.size(); ++r) {
    if (cell.estimates[r]) {
      err.push_back(*cell.estimates[r] - truths[r]);
      sub.push_back(cell.subsample_n[r]);
    }
  }
  row.ok = err.size();
  row.failed = cell.estimates.size() - err.size();
  if (err.empty()) {
    row.bias = row.sd = row.rmse = std::numeric_limits<double>::quiet_NaN();
    return row;
  }
  row.bias = mean_of(err);
  std::vector<double> centered(err.size());
  for (std::size_t k = 0; k < err.size(); ++k) centered[k] = (err[k] - row.bias) * (err[k] - row.bias);
  row.sd = std::sqrt(mean_of(centered));
  row.rmse = std::sqrt(row.bias * row.bias + row.sd * row.sd);
  row.avg_subsample_n = mean_of(sub);
  return row;
}

/// Runs `reps` replications of the study (in parallel, one replication per
/// work item) and aggregates every estimator cell. Output is independent of
/// the thread count.
inline McReport run_experiment(const Study& st, const RunOptions& opt) {
  if (opt.reps < 2) throw Error(ErrorCode::kInvalidArgument, "need at least two replications");
  for (double d : opt.deltas) {
    if (!(d > 0.0)) throw Error(ErrorCode::kNonPositiveBandwidth, "every delta must be positive");
  }
  RunOptions options = opt;
  if (options.estimators.empty()) options.estimators = default_estimators(st.spec.experiment);

  std::vector<ReplicationOutcome> outcomes(options.reps);
  parallel_for(options.reps, options.threads, [&](std::size_t r) {
    outcomes[r] = run_replication(st, r, options);
    if (options.progress) options.progress(r);
  });

  McReport report;
  report.spec = st.spec;
  report.reps = options.reps;
  report.draws = options.draws;
  report.cells = cell_layout(options);
  for (const auto& o : outcomes) report.true_values.push_back(o.truth);
  report.true_value_mean = mean_of(report.true_values);
  for (std::size_t c = 0; c < report.cells.size(); ++c) {
    auto& cell = report.cells[c];
    for (const auto& o : outcomes) {
      cell.estimates.push_back(o.estimates[c]);
      cell.subsample_n.push_back(o.subsample_n[c]);
      if (!o.failures[c].empty()) cell.failures.push_back(o.failures[c]);
    }
    report.rows.push_back(summarize(cell, report.true_values));
  }
  return report;
}

inline McReport run_experiment(const DgpSpec& spec, const RunOptions& opt) {
  return run_experiment(prepare_study(spec, opt.threads), opt);
}

inline void write_report_csv(const McReport& rep, std::ostream& out) {
  using csv_detail::format_double;
  out << "experiment,effect_mode,estimator,delta,bias,sd,rmse,avg_n,ok,failed,reps,n,true_value_mean\n";
  for (const auto& r : rep.rows) {
    out << to_string(rep.spec.experiment) << ',' << to_string(rep.spec.effect_mode) << ',' << to_string(r.estimator)
        << ',' << (std::isnan(r.delta) ? std::string() : format_double(r.delta)) << ',' << format_double(r.bias)
        << ',' << format_double(r.sd) << ',' << format_double(r.rmse) << ',' << format_double(r.avg_subsample_n)
        << ',' << r.ok << ',' << r.failed << ',' << rep.reps << ',' << rep.spec.n << ','
        << format_double(rep.true_value_mean) << '\n';
  }
}

inline nlohmann::json report_to_json(const McReport& rep) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t k = 0; k < rep.rows.size(); ++k) {
    const auto& r = rep.rows[k];
    nlohmann::json failures = rep.cells[k].failures;
    rows.push_back({{"estimator", to_string(r.estimator)},
                    {"delta", num(r.delta)},
                    {"bias", num(r.bias)},
                    {"sd", num(r.sd)},
                    {"rmse", num(r.rmse)},
                    {"avg_n", num(r.avg_subsample_n)},
                    {"ok", r.ok},
                    {"failed", r.failed},
                    {"failures", failures}});
  }
  return {{"schema_version", 1},
          {"experiment", to_string(rep.spec.experiment)},
          {"effect_mode", to_string(rep.spec.effect_mode)},
          {"n", rep.spec.n},
          {"p", rep.spec.p},
          {"m", rep.spec.m},
          {"train_n", rep.spec.train_n},
          {"truth_draws", rep.spec.truth_draws},
          {"seed", rep.spec.seed},
          {"reps", rep.reps},
          {"draws", rep.draws},
          {"true_value_mean", num(rep.true_value_mean)},
          {"rows", rows}};
}

}  // namespace apsope::sim
