#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "apsope/apsope.hpp"

using namespace apsope;
using namespace apsope::sim;

namespace {

DgpSpec small_spec(Experiment e, EffectMode mode, std::uint64_t seed) {
  DgpSpec s;
  s.experiment = e;
  s.effect_mode = mode;
  s.n = 2000;
  s.train_n = 4000;
  s.truth_draws = 20000;
  s.seed = seed;
  return s;
}

struct Moments {
  double mean = 0.0;
  double se = 0.0;
};

Moments moments(const std::vector<double>& v) {
  double s = 0.0, s2 = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  for (double x : v) s2 += (x - mean) * (x - mean);
  const double var = s2 / static_cast<double>(v.size() - 1);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

TEST(Covariance, FactorLayoutAndPsd) {
  const Covariance c = build_sigma(11);
  ASSERT_EQ(c.V.rows(), 100);
  EXPECT_EQ(c.off_diagonal.size(), 15u);
  std::set<std::pair<std::size_t, std::size_t>> expected;
  for (std::size_t i : {1, 2, 3, 4, 5})
    for (std::size_t j : {34, 65, 77}) expected.insert({i, j});
  for (const auto& e : c.off_diagonal) {
    EXPECT_TRUE(expected.count({e.i, e.j}));
    EXPECT_GT(e.value, -0.5);
    EXPECT_LT(e.value, 0.5);
  }
  for (Eigen::Index k = 0; k < 100; ++k) EXPECT_EQ(c.V(k, k), 1.0);
  EXPECT_LT((c.V - c.V.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((c.sigma - c.sigma.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c.sigma);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
}

TEST(Covariance, FactorMatchesMatrix) {
  const Covariance c = build_sigma(5);
  Engine e = RngPlan(99).stream_for(0, "z");
  std::normal_distribution<double> normal;
  std::vector<double> z(100), x(100);
  for (auto& v : z) v = normal(e);
  c.apply_factor(z, x);
  const Eigen::VectorXd ref = c.V * Eigen::Map<const Eigen::VectorXd>(z.data(), 100);
  for (int j = 0; j < 100; ++j) EXPECT_NEAR(x[static_cast<std::size_t>(j)], ref(j), 1e-12);
}

TEST(Covariance, DeterministicPerSeed) {
  EXPECT_EQ(build_sigma(3).sigma, build_sigma(3).sigma);
  EXPECT_NE(build_sigma(3).sigma, build_sigma(4).sigma);
  EXPECT_THROW(build_sigma(1, 5), Error);
}

TEST(Alphas, NormalizedAndTied) {
  const Covariance c = build_sigma(8);
  const Alphas al = draw_alphas(8, c);
  EXPECT_NEAR(al.alpha0.dot(c.sigma * al.alpha0), 1.0, 1e-8);
  for (int a = 0; a < 5; ++a) {
    const Eigen::VectorXd v = al.alpha.row(a).transpose();
    EXPECT_NEAR(v.dot(c.sigma * v), 1.0, 1e-8);
    for (Eigen::Index j = 0; j < 100; ++j) {
      EXPECT_GE(al.alpha_raw(a, j), -150.0);
      EXPECT_LE(al.alpha_raw(a, j), 200.0);
    }
  }
  for (Eigen::Index j = 0; j < 50; ++j) {
    double mean = 0.0;
    for (int a = 0; a < 5; ++a) mean += al.alpha_raw(a, j);
    EXPECT_NEAR(al.alpha0_raw(j), mean / 5.0, 1e-12);
  }
  for (Eigen::Index j = 50; j < 100; ++j) {
    EXPECT_GE(al.alpha0_raw(j), -100.0);
    EXPECT_LE(al.alpha0_raw(j), 100.0);
  }
  const Alphas again = draw_alphas(8, c);
  EXPECT_EQ(al.alpha, again.alpha);
  EXPECT_EQ(al.alpha0, again.alpha0);
}

TEST(TrainingSample, MarginalsAndMeans) {
  DgpSpec spec = small_spec(Experiment::kExp1, EffectMode::kConstant, 21);
  spec.train_n = 20000;
  const Covariance c = build_sigma(spec.seed);
  const Alphas al = draw_alphas(spec.seed, c);
  const TrainingSample ts = generate_training_sample(spec, c, al);
  ASSERT_EQ(ts.data.size(), 20000u);

  std::vector<std::size_t> counts(5, 0);
  for (Action a : ts.data.actions) ++counts[static_cast<std::size_t>(a - 1)];
  for (auto k : counts) EXPECT_NEAR(static_cast<double>(k), 4000.0, 4.0 * std::sqrt(20000 * 0.2 * 0.8));

  const Eigen::VectorXd diag = c.sigma.diagonal();
  for (int a = 0; a < 5; ++a) {
    std::vector<double> col(20000);
    for (std::size_t i = 0; i < 20000; ++i) col[i] = ts.potential(static_cast<Eigen::Index>(i), a);
    const Moments mo = moments(col);
    const double analytic = 0.75 * al.alpha0.dot(diag) + 0.5 * al.alpha.row(a).dot(diag.transpose());
    EXPECT_NEAR(mo.mean, analytic, 4.0 * mo.se) << "action " << a + 1;
  }
  for (std::size_t i = 0; i < 20000; ++i) {
    EXPECT_EQ(ts.data.rewards[i], ts.potential(static_cast<Eigen::Index>(i), ts.data.actions[i] - 1));
  }

  const TrainingSample again = generate_training_sample(spec, c, al);
  EXPECT_EQ(again.data.rewards, ts.data.rewards);
  EXPECT_EQ(again.data.actions, ts.data.actions);
  EXPECT_EQ(again.potential, ts.potential);
}

TEST(TrainingSample, RedrawKeepsOutcomes) {
  DgpSpec spec = small_spec(Experiment::kExp1, EffectMode::kConstant, 2);
  const Covariance c = build_sigma(spec.seed);
  const Alphas al = draw_alphas(spec.seed, c);
  const TrainingSample ts = generate_training_sample(spec, c, al);
  const LogDataset r = redraw_training_actions(ts, spec.seed);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(r.rewards[i], ts.potential(static_cast<Eigen::Index>(i), r.actions[i] - 1));
    if (r.actions[i] != ts.data.actions[i]) ++changed;
  }
  EXPECT_NEAR(static_cast<double>(changed) / r.size(), 0.8, 0.05);
}

TEST(Study, ConstantModeEffects) {
  const Study st = prepare_study(small_spec(Experiment::kExp1, EffectMode::kConstant, 4));
  std::vector<double> x(100, 0.3);
  x[7] = -1.2;
  for (Action a = 2; a <= 5; ++a) {
    EXPECT_NEAR(st.conditional_mean(x, a) - st.conditional_mean(x, 1), static_cast<double>(a - 1), 1e-12);
  }
}

TEST(Study, TruthMatchesIndependentMonteCarlo) {
  for (EffectMode mode : {EffectMode::kConstant, EffectMode::kNonconstant}) {
    const Study st = prepare_study(small_spec(Experiment::kExp2, mode, 6));
    const double cached = st.truth.value(std::numeric_limits<double>::infinity());
    const Policy pi(PolicySpec{st.tau_pi.greedy(100)}, 100);
    const RngPlan plan(777);
    std::vector<double> contrib(20000);
    for (std::size_t i = 0; i < contrib.size(); ++i) {
      Engine e = plan.stream_for(i, "oracle");
      std::vector<double> z(100), x(100);
      sample_context(st.cov, e, z, x);
      const auto probs = pi.evaluate(x);
      double v = 0.0;
      for (Action a = 1; a <= 5; ++a) v += probs[static_cast<std::size_t>(a - 1)] * st.conditional_mean(x, a);
      contrib[i] = v;
    }
    const Moments mo = moments(contrib);
    // Cached truth carries its own MC error from 20000 draws; for the constant
    // mode only the action part is simulated, so the bound is conservative.
    EXPECT_NEAR(cached, mo.mean, 4.0 * std::sqrt(2.0) * mo.se) << to_string(mode);
  }
}

TEST(Study, GateTruthMatchesIndependentMonteCarlo) {
  const Study st = prepare_study(small_spec(Experiment::kExp1, EffectMode::kNonconstant, 9));
  const double gate = 0.8;
  const Policy pi(exp1_policy(1, gate, st.tau_pi, 100), 100);
  const RngPlan plan(31337);
  std::vector<double> contrib(20000);
  for (std::size_t i = 0; i < contrib.size(); ++i) {
    Engine e = plan.stream_for(i, "oracle");
    std::vector<double> z(100), x(100);
    sample_context(st.cov, e, z, x);
    const auto probs = pi.evaluate(x);
    double v = 0.0;
    for (Action a = 1; a <= 5; ++a) v += probs[static_cast<std::size_t>(a - 1)] * st.conditional_mean(x, a);
    contrib[i] = v;
  }
  const Moments mo = moments(contrib);
  EXPECT_NEAR(st.truth.value(gate), mo.mean, 4.0 * std::sqrt(2.0) * mo.se);
  EXPECT_NEAR(policy_value(st, pi, 20000, 31337), st.truth.value(gate), 4.0 * std::sqrt(2.0) * mo.se);
}

TEST(Replication, Exp1Structure) {
  const Study st = prepare_study(small_spec(Experiment::kExp1, EffectMode::kConstant, 12));
  const Replication rep = generate_replication(st, 3);
  ASSERT_EQ(rep.data.size(), 2000u);
  const RowMatrix ml = policy_matrix(rep.data, rep.ml);
  const auto ab = full_support_records(ml);
  EXPECT_GE(ab.size(), 19u);
  EXPECT_LE(ab.size(), 21u);
  for (std::size_t i = 0; i < rep.data.size(); ++i) {
    EXPECT_GT(ml(static_cast<Eigen::Index>(i), rep.data.actions[i] - 1), 0.0);
  }
  EXPECT_EQ(rep.true_value, st.truth.value(rep.gate_pi));

  std::vector<double> resid(rep.data.size());
  for (std::size_t i = 0; i < rep.data.size(); ++i) {
    const std::vector<double> x = rep.data.contexts.raw_row(i);
    resid[i] = rep.data.rewards[i] - st.conditional_mean(x, rep.data.actions[i]);
  }
  const Moments mo = moments(resid);
  EXPECT_NEAR(mo.mean, 0.0, 4.0 * mo.se);

  const Replication again = generate_replication(st, 3);
  EXPECT_EQ(rep.data.rewards, again.data.rewards);
  EXPECT_EQ(rep.data.actions, again.data.actions);
  EXPECT_NE(rep.data.rewards, generate_replication(st, 4).data.rewards);
}

TEST(Replication, Exp2UsesUcbLogging) {
  const Study st = prepare_study(small_spec(Experiment::kExp2, EffectMode::kConstant, 13));
  ASSERT_TRUE(st.ucb.has_value());
  const Replication rep = generate_replication(st, 0);
  EXPECT_TRUE(std::isnan(rep.gate_ml));
  EXPECT_TRUE(std::holds_alternative<UcbTablePolicy>(rep.ml.spec().variant));
  EXPECT_TRUE(std::isfinite(rep.true_value));
}

TEST(Experiment, ReportIdentitiesAndThreadIndependence) {
  const Study st = prepare_study(small_spec(Experiment::kExp1, EffectMode::kConstant, 17));
  RunOptions opt;
  opt.reps = 4;
  opt.draws = 20;
  opt.deltas = {0.5, 1.0, 2.5};
  opt.threads = 1;
  const McReport one = run_experiment(st, opt);
  opt.threads = 3;
  const McReport three = run_experiment(st, opt);

  ASSERT_EQ(one.rows.size(), 5u);
  std::vector<double> aps_n;
  for (std::size_t k = 0; k < one.rows.size(); ++k) {
    const McRow& r = one.rows[k];
    if (r.estimator == Estimator::kMeanDiffAB) {
      // ~20 uniform records per replication: an action can be absent.
      for (const auto& f : one.cells[k].failures) EXPECT_NE(f.find("EmptyCell"), std::string::npos) << f;
    } else {
      EXPECT_EQ(r.failed, 0u);
    }
    EXPECT_NEAR(r.rmse * r.rmse, r.bias * r.bias + r.sd * r.sd, 1e-12);
    EXPECT_EQ(one.cells[k].estimates, three.cells[k].estimates);
    if (r.estimator == Estimator::kAps) aps_n.push_back(r.avg_subsample_n);
    if (r.estimator == Estimator::kMeanDiffAB) EXPECT_NEAR(r.avg_subsample_n, 20.0, 1.0);
    if (r.estimator == Estimator::kMeanDiffFull) EXPECT_EQ(r.avg_subsample_n, 2000.0);
  }
  ASSERT_EQ(aps_n.size(), 3u);
  EXPECT_LE(aps_n[0], aps_n[1]);
  EXPECT_LE(aps_n[1], aps_n[2]);

  std::ostringstream a, b;
  write_report_csv(one, a);
  write_report_csv(three, b);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Experiment, NonconstantAndExp2Run) {
  RunOptions opt;
  opt.reps = 2;
  opt.draws = 10;
  opt.deltas = {1.0};
  const McReport nc = run_experiment(small_spec(Experiment::kExp1, EffectMode::kNonconstant, 5), opt);
  for (const auto& r : nc.rows) EXPECT_TRUE(std::isfinite(r.rmse));
  const McReport e2 = run_experiment(small_spec(Experiment::kExp2, EffectMode::kConstant, 5), opt);
  ASSERT_EQ(e2.rows.size(), 2u);
  EXPECT_EQ(e2.rows[1].estimator, Estimator::kDirectMethod);
  for (const auto& r : e2.rows) EXPECT_TRUE(std::isfinite(r.rmse));
  const auto j = report_to_json(e2);
  EXPECT_EQ(j.at("experiment"), "exp2");
  EXPECT_EQ(j.at("rows").size(), 2u);
}

TEST(Experiment, RejectsBadOptions) {
  const Study st = prepare_study(small_spec(Experiment::kExp1, EffectMode::kConstant, 1));
  RunOptions opt;
  opt.reps = 1;
  EXPECT_THROW(run_experiment(st, opt), Error);
  opt.reps = 2;
  opt.deltas = {0.0};
  EXPECT_THROW(run_experiment(st, opt), Error);
  EXPECT_EQ(estimator_from_string("direct_method"), Estimator::kDirectMethod);
  EXPECT_THROW(estimator_from_string("ipw"), Error);
}
