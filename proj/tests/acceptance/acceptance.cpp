// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Seeds are fixed here once and never tuned.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "apsope/apsope.hpp"

using namespace apsope;
namespace fs = std::filesystem;

namespace {

const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double sd_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

// Probe record at the origin plus `filler` standard normal records in p
// dimensions. Returns the dataset and the sample sd of column 0.
LogDataset probe_dataset(std::size_t p, std::size_t filler, double* sd0) {
  std::mt19937_64 e(20240611);
  std::normal_distribution<double> normal;
  RowMatrix X = RowMatrix::Zero(static_cast<Eigen::Index>(filler + 1), static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 1; i <= static_cast<Eigen::Index>(filler); ++i) {
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(p); ++j) X(i, j) = normal(e);
  }
  LogDataset ds;
  ds.m = 2;
  ds.contexts = ContextMatrix(std::move(X));
  ds.actions.assign(filler + 1, 1);
  ds.actions[1] = 2;
  ds.rewards.assign(filler + 1, 0.0);
  // Population sd, the scale the ball lives in.
  double mean = 0.0, ss = 0.0;
  for (std::size_t i = 0; i <= filler; ++i) mean += ds.contexts.raw_row(i)[0];
  mean /= static_cast<double>(filler + 1);
  for (std::size_t i = 0; i <= filler; ++i) ss += std::pow(ds.contexts.raw_row(i)[0] - mean, 2);
  *sd0 = std::sqrt(ss / static_cast<double>(filler + 1));
  return ds;
}

// Action 1 on {x_1 >= t}, action 2 elsewhere.
Policy halfspace(double t, std::size_t p) {
  TableLookupPolicy tl;
  TableRegion region;
  region.bounds.push_back({0, t, std::numeric_limits<double>::infinity()});
  region.probs = {1.0, 0.0};
  tl.regions.push_back(region);
  tl.fallback = {0.0, 1.0};
  return Policy(PolicySpec{tl}, p);
}

Outcome criterion1() {
  const auto start = std::chrono::steady_clock::now();
  const double delta = 0.5;
  const std::size_t S = 10000;
  bool ok = true;
  std::ostringstream d;
  for (std::size_t p : {2u, 100u}) {
    double sd = 0.0;
    const LogDataset ds = probe_dataset(p, 199, &sd);
    for (double v : {-0.5, 0.0, 0.5}) {
      // Probe sits at signed normalized distance v (in units of delta) from the boundary.
      const Policy ml = halfspace(-v * delta * sd, p);
      const ApsTable aps = compute_aps(ds, ml, delta, S, RngPlan(101));
      const double got = aps.p(0, 1);
      const double want = k_profile(v, static_cast<int>(p));
      const double tol = 3.0 * std::sqrt(want * (1.0 - want) / static_cast<double>(S)) + 0.01;
      ok = ok && std::abs(got - want) <= tol;
      d << " p=" << p << ",v=" << v << ":" << fmt(got) << "/" << fmt(want);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ok = ok && secs < 60.0;
  d << " (" << fmt(secs, 3) << "s)";
  return {ok, "halfspace APS vs k_profile" + d.str()};
}

Outcome criterion2() {
  sim::DgpSpec spec;
  spec.n = 500;
  spec.train_n = 2000;
  spec.truth_draws = 0;
  spec.seed = 1;
  const sim::Study st = sim::prepare_study(spec);
  const sim::Replication rep = sim::generate_replication(st, 0);
  const Policy uniform(PolicySpec{UniformPolicy{5}}, spec.p);
  std::size_t checked = 0;
  for (double delta : {0.01, 0.5, 3.0}) {
    for (std::size_t S : {1u, 7u, 100u}) {
      const ApsTable aps = compute_aps(rep.data, uniform, delta, S, RngPlan(9));
      for (std::size_t i = 0; i < aps.rows(); ++i) {
        for (Action a = 1; a <= 5; ++a) {
          if (aps.p(i, a) != 0.2) return {false, "record " + std::to_string(i) + " gave " + fmt(aps.p(i, a), 17)};
          ++checked;
        }
      }
    }
  }
  return {true, "Uniform(5) gives exactly 0.2 in " + std::to_string(checked) + " cells"};
}

Outcome criterion3() {
  const auto start = std::chrono::steady_clock::now();
  sim::DgpSpec spec;
  spec.n = 20000;
  spec.truth_draws = 0;
  spec.seed = 1;
  const sim::Study st = sim::prepare_study(spec);
  const std::size_t reps = 20;
  std::vector<std::vector<double>> betas(5);
  std::size_t missing = 0;
  for (std::size_t r = 0; r < reps; ++r) {
    const sim::Replication rep = sim::generate_replication(st, r);
    const ApsTable aps = compute_aps(rep.data, rep.ml, 1.0, 100, RngPlan(spec.seed).child(r, "acceptance-beta"));
    const BetaSet bs = estimate_betas(rep.data, aps);
    for (Action a = 2; a <= 5; ++a) {
      if (const PairwiseFit* f = bs.find(a)) {
        betas[static_cast<std::size_t>(a - 1)].push_back(f->beta_hat);
      } else {
        ++missing;
      }
    }
  }
  bool ok = missing == 0;
  std::ostringstream d;
  for (Action a = 2; a <= 5; ++a) {
    const auto& b = betas[static_cast<std::size_t>(a - 1)];
    if (b.size() < 2) {
      ok = false;
      continue;
    }
    const double mean = mean_of(b);
    const double se = sd_of(b) / std::sqrt(static_cast<double>(b.size()));
    ok = ok && std::abs(mean - (a - 1)) <= 3.0 * se;
    d << " a=" << a << ":" << fmt(mean) << "+-" << fmt(se, 3);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ok = ok && secs < 300.0;
  d << " missing=" << missing << " (" << fmt(secs, 3) << "s)";
  return {ok, "mean beta_hat vs a-1 over 20 reps" + d.str()};
}

const sim::McRow* row_for(const sim::McReport& rep, sim::Estimator e) {
  for (const auto& r : rep.rows) {
    if (r.estimator == e) return &r;
  }
  return nullptr;
}

sim::McReport desk_run(sim::Experiment e, std::uint64_t seed) {
  sim::DgpSpec spec;
  spec.experiment = e;
  spec.seed = seed;
  sim::RunOptions opt;
  opt.deltas = {1.0};
  opt.reps = 100;
  return sim::run_experiment(spec, opt);
}

Outcome criterion4() {
  const auto start = std::chrono::steady_clock::now();
  int rmse_wins = 0, bias_wins = 0;
  std::ostringstream d;
  for (std::uint64_t seed : kSeeds) {
    const auto rep = desk_run(sim::Experiment::kExp1, seed);
    const auto* aps = row_for(rep, sim::Estimator::kAps);
    const auto* full = row_for(rep, sim::Estimator::kMeanDiffFull);
    const auto* ab = row_for(rep, sim::Estimator::kMeanDiffAB);
    rmse_wins += aps->rmse < full->rmse;
    bias_wins += std::abs(full->bias) > std::abs(ab->bias);
    d << " seed" << seed << "[rmse aps=" << fmt(aps->rmse) << " full=" << fmt(full->rmse)
      << "; |bias| full=" << fmt(std::abs(full->bias)) << " ab=" << fmt(std::abs(ab->bias)) << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool ok = rmse_wins >= 2 && bias_wins >= 2 && secs < 900.0;
  d << " rmse " << rmse_wins << "/3, bias " << bias_wins << "/3 (" << fmt(secs, 3) << "s)";
  return {ok, "Exp1 ordering" + d.str()};
}

Outcome criterion5() {
  const auto start = std::chrono::steady_clock::now();
  int wins = 0;
  std::ostringstream d;
  for (std::uint64_t seed : kSeeds) {
    const auto rep = desk_run(sim::Experiment::kExp2, seed);
    const auto* aps = row_for(rep, sim::Estimator::kAps);
    const auto* dm = row_for(rep, sim::Estimator::kDirectMethod);
    wins += std::abs(dm->bias) > 4.0 * std::abs(aps->bias);
    d << " seed" << seed << "[|bias| dm=" << fmt(std::abs(dm->bias)) << " aps=" << fmt(std::abs(aps->bias)) << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool ok = wins >= 2 && secs < 900.0;
  d << " " << wins << "/3 (" << fmt(secs, 3) << "s)";
  return {ok, "Exp2 ordering" + d.str()};
}

Outcome criterion6() {
  int wins = 0;
  std::ostringstream d;
  for (std::uint64_t seed : kSeeds) {
    sim::DgpSpec spec;
    spec.seed = seed;
    spec.n = 5000;
    const sim::Study small = sim::prepare_study(spec);
    sim::Study large = small;
    large.spec.n = 20000;
    sim::RunOptions opt;
    opt.estimators = {sim::Estimator::kAps};
    opt.reps = 50;
    opt.deltas = {1.0};
    const double rmse_small = sim::run_experiment(small, opt).rows[0].rmse;
    opt.deltas = {0.5};
    const double rmse_large = sim::run_experiment(large, opt).rows[0].rmse;
    wins += rmse_large < rmse_small;
    d << " seed" << seed << ":" << fmt(rmse_small) << "->" << fmt(rmse_large);
  }
  return {wins == 3, "RMSE n=5000,delta=1 -> n=20000,delta=0.5" + d.str()};
}

Outcome criterion7() {
  double worst = 0.0;
  std::size_t datasets = 0;
  for (sim::Experiment e : {sim::Experiment::kExp1, sim::Experiment::kExp2}) {
    sim::DgpSpec spec;
    spec.experiment = e;
    spec.n = 3000;
    spec.truth_draws = 0;
    spec.seed = 5;
    const sim::Study st = sim::prepare_study(spec);
    const sim::Replication rep = sim::generate_replication(st, 0);
    const ApsTable aps = compute_aps(rep.data, rep.ml, 1.0, 50, RngPlan(5));
    const BetaSet bs = estimate_betas(rep.data, aps);
    const ValueEstimate ve = estimate_value(rep.data, rep.ml, rep.ml, bs.fits);
    long double sum = 0.0L;
    for (double y : rep.data.rewards) sum += y;
    const double mean = static_cast<double>(sum / static_cast<long double>(rep.data.size()));
    worst = std::max(worst, std::abs(ve.v_hat - mean));
    ++datasets;
  }
  return {worst <= 1e-12, "pi = ML returns mean(Y), max |diff| = " + fmt(worst, 3) + " over " +
                              std::to_string(datasets) + " datasets"};
}

Outcome criterion8() {
  double sd0 = 0.0;
  const std::size_t p = 100;
  const double delta = 0.5;
  const LogDataset ds = probe_dataset(p, 199, &sd0);
  bool ok = true;
  std::ostringstream d;
  for (double v : {0.0, 0.3}) {
    const Policy ml = halfspace(-v * delta * sd0, p);
    std::vector<double> coarse, fine;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
      coarse.push_back(compute_aps(ds, ml, delta, 100, RngPlan(seed)).p(0, 1));
      fine.push_back(compute_aps(ds, ml, delta, 1600, RngPlan(seed + 1000)).p(0, 1));
    }
    const double ratio = sd_of(coarse) / sd_of(fine);
    ok = ok && ratio >= 2.0 && ratio <= 6.0;
    d << " v=" << v << ":" << fmt(ratio, 3);
  }
  return {ok, "sd(S=100)/sd(S=1600) across 50 seeds" + d.str()};
}

int run_cli(const std::string& args, const fs::path& stdout_file) {
  const std::string cmd = std::string(APSOPE_CLI_PATH) + " " + args + " > " + stdout_file.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Runs one command three times (threads 1, 1, 2) into separate directories
// and compares every output file byte for byte.
bool same_outputs(const std::string& name, const std::string& args, const fs::path& root, std::string* why) {
  std::vector<fs::path> dirs;
  for (const auto& [tag, threads] : std::vector<std::pair<std::string, int>>{{"a", 1}, {"b", 1}, {"c", 2}}) {
    const fs::path dir = root / (name + "_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    const int code = run_cli(args + " --threads " + std::to_string(threads) + " --out " + dir.string(),
                             root / (name + "_" + tag + ".stdout"));
    if (code != 0) {
      *why = name + " exited " + std::to_string(code);
      return false;
    }
    dirs.push_back(dir);
  }
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    const auto file = entry.path().filename();
    const std::string ref = slurp(dirs[0] / file);
    for (std::size_t k = 1; k < dirs.size(); ++k) {
      if (!fs::exists(dirs[k] / file) || slurp(dirs[k] / file) != ref) {
        *why = name + ": " + file.string() + " differs";
        return false;
      }
    }
    ++files;
  }
  if (files == 0) {
    *why = name + " wrote nothing";
    return false;
  }
  return true;
}

Outcome criterion9() {
  const fs::path root = fs::path(APSOPE_TEST_TMP) / "acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  std::string why;
  const std::string sim_args =
      "simulate --n 1500 --train-n 3000 --reps 3 --deltas 0.5,1 --draws 20 --truth-draws 20000 --seed 11 "
      "--export-sample --quiet";
  if (!same_outputs("simulate", sim_args, root, &why)) return {false, why};
  const fs::path sample = root / "simulate_a";
  std::vector<std::string> features;
  for (int j = 1; j <= 100; ++j) features.push_back("x" + std::to_string(j));

  nlohmann::json cfg = {{"data", (sample / "sample.csv").string()},
                        {"reward", "y"},
                        {"action", "action"},
                        {"features", features},
                        {"actions", {"1", "2", "3", "4", "5"}},
                        {"ml", (sample / "ml_policy.json").string()},
                        {"seed", 4}};
  nlohmann::json aps_cfg = cfg;
  aps_cfg["delta"] = 0.8;
  aps_cfg["draws"] = 50;
  std::ofstream(root / "aps.json") << aps_cfg.dump();
  if (!same_outputs("aps", "aps --quiet --config " + (root / "aps.json").string(), root, &why)) return {false, why};

  nlohmann::json eval_cfg = cfg;
  eval_cfg["pi"] = (sample / "pi_policy.json").string();
  eval_cfg["deltas"] = {0.5, 1.0};
  eval_cfg["draws"] = 50;
  std::ofstream(root / "evaluate.json") << eval_cfg.dump();
  if (!same_outputs("evaluate", "evaluate --quiet --config " + (root / "evaluate.json").string(), root, &why)) {
    return {false, why};
  }
  return {true, "simulate, aps and evaluate outputs byte-identical across reruns and --threads 1/2"};
}

Outcome criterion10() {
  const fs::path dir = fs::path(APSOPE_TEST_TMP) / "acceptance_nonconstant";
  fs::remove_all(dir);
  const int code = run_cli("simulate --effect-mode nonconstant --reps 20 --deltas 0.5,1 --truth-draws 200000 --seed 1 "
                           "--quiet --out " + dir.string(),
                           fs::path(APSOPE_TEST_TMP) / "acceptance_nonconstant.stdout");
  if (code != 0) return {false, "simulate exited " + std::to_string(code)};
  if (!fs::exists(dir / "report.csv") || !fs::exists(dir / "report.json")) return {false, "report missing"};
  const auto rep = nlohmann::json::parse(slurp(dir / "report.json"));
  std::ostringstream d;
  for (const auto& r : rep.at("rows")) {
    if (r.at("rmse").is_null()) return {false, "row without rmse: " + r.dump()};
    d << " " << r.at("estimator").get<std::string>();
    if (!r.at("delta").is_null()) d << "@" << r.at("delta").get<double>();
    d << "=" << fmt(r.at("rmse").get<double>());
  }
  return {rep.at("effect_mode") == "nonconstant" && rep.at("rows").size() == 4, "nonconstant report rmse" + d.str()};
}

}  // namespace

int main() {
  const std::vector<std::function<Outcome()>> criteria = {criterion1, criterion2, criterion3, criterion4, criterion5,
                                                          criterion6, criterion7, criterion8, criterion9, criterion10};
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    Outcome o;
    try {
      o = criteria[k]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k + 1 << ": " << o.detail << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
